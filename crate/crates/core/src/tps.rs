//! Thin-plate-spline interpolation of per-site scalars and hourly fields.
//!
//! Sites are projected to a local plane (km), centered and divided by the
//! larger side of their bounding box. The spline is
//! `h(p) = d₀ + d₁x + d₂y + Σ cᵢ φ(|p − pᵢ|)` with `φ(r) = r² log r`,
//! fitted by penalized least squares with penalty `λ`. When `λ` is not
//! given it maximizes the profile likelihood of the data projected off the
//! affine null space.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{HourlyField, SiteGrid, HOURS, MISSING};
use crate::error::{Error, Result};
use crate::geo::LocalProjection;

/// Log-λ search bounds and grid for profile-likelihood selection.
pub const LAMBDA_RANGE: (f64, f64) = (1e-8, 1e2);
const LAMBDA_GRID: usize = 21;
const LOG_LAMBDA_TOL: f64 = 1e-3;

fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Mapping from lon/lat to scaled plane coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub proj: LocalProjection,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Scaling {
    fn for_sites(sites: &SiteGrid) -> Self {
        let (lon0, lat0, lon1, lat1) = sites.bbox().expect("non-empty sites");
        let proj = LocalProjection::new(0.5 * (lon0 + lon1), 0.5 * (lat0 + lat1));
        let pts: Vec<(f64, f64)> = sites.sites().iter().map(|s| proj.to_km(s.lon, s.lat)).collect();
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        let scale = span(|p| p.0).max(span(|p| p.1));
        Self {
            proj,
            cx,
            cy,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    pub fn apply(&self, lon: f64, lat: f64) -> (f64, f64) {
        let (x, y) = self.proj.to_km(lon, lat);
        ((x - self.cx) / self.scale, (y - self.cy) / self.scale)
    }
}

/// Site geometry shared by every fit on the same centers.
#[derive(Clone, Debug)]
pub struct TpsGeometry {
    centers: SiteGrid,
    scaling: Scaling,
    pts: Vec<(f64, f64)>,
    k: DMatrix<f64>,
    /// Thin Q and R of the affine design `[1, x, y]`.
    q1: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Orthonormal complement of the affine design, `n × (n − 3)`.
    q2: DMatrix<f64>,
    /// Eigen-decomposition of `Q₂ᵀ K Q₂`.
    evals: DVector<f64>,
    evecs: DMatrix<f64>,
}

impl TpsGeometry {
    pub fn new(centers: &SiteGrid) -> Result<Self> {
        let n = centers.len();
        if n < 4 {
            return Err(Error::InsufficientData(format!("thin-plate spline needs ≥ 4 sites, got {n}")));
        }
        let scaling = Scaling::for_sites(centers);
        let pts: Vec<(f64, f64)> = centers.sites().iter().map(|s| scaling.apply(s.lon, s.lat)).collect();
        let t = DMatrix::from_fn(n, 3, |i, c| match c {
            0 => 1.0,
            1 => pts[i].0,
            _ => pts[i].1,
        });
        let sv = t.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-8 * smax) {
            return Err(Error::Rank("thin-plate spline centers are collinear".into()));
        }
        let qr = t.qr();
        let q1 = qr.q();
        let r = qr.r();
        let proj = DMatrix::identity(n, n) - &q1 * q1.transpose();
        let pe = SymmetricEigen::new(proj);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pe.eigenvalues[b].total_cmp(&pe.eigenvalues[a]).then(a.cmp(&b)));
        let q2 = DMatrix::from_fn(n, n - 3, |i, c| pe.eigenvectors[(i, order[c])]);
        let k = DMatrix::from_fn(n, n, |a, b| {
            let (dx, dy) = (pts[a].0 - pts[b].0, pts[a].1 - pts[b].1);
            kernel(dx * dx + dy * dy)
        });
        let k2 = q2.transpose() * &k * &q2;
        let k2 = (&k2 + k2.transpose()) * 0.5;
        let eig = SymmetricEigen::new(k2);
        Ok(Self {
            centers: centers.clone(),
            scaling,
            pts,
            k,
            q1,
            r,
            q2,
            evals: eig.eigenvalues.map(|v| v.max(0.0)),
            evecs: eig.eigenvectors,
        })
    }

    pub fn centers(&self) -> &SiteGrid {
        &self.centers
    }

    /// Profile log-likelihood of `z = Uᵀ Q₂ᵀ y` at penalty `lambda`.
    fn profile_loglik(&self, z: &DVector<f64>, lambda: f64) -> f64 {
        let m = z.len() as f64;
        let mut q = 0.0;
        let mut logdet = 0.0;
        for i in 0..z.len() {
            let v = self.evals[i] + lambda;
            q += z[i] * z[i] / v;
            logdet += v.ln();
        }
        if q <= 0.0 {
            return f64::INFINITY;
        }
        -0.5 * (m * (q / m).ln() + logdet + m)
    }

    fn rotate(&self, y: &DVector<f64>) -> DVector<f64> {
        self.evecs.transpose() * (self.q2.transpose() * y)
    }

    /// Fit with a fixed or likelihood-selected `lambda`.
    pub fn fit(&self, values: &[f64], lambda: Option<f64>) -> Result<TpsFit> {
        let n = self.pts.len();
        if values.len() != n {
            return Err(Error::Argument(format!("expected {n} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("thin-plate spline values must be finite".into()));
        }
        if let Some(l) = lambda {
            if !(l >= 0.0) {
                return Err(Error::Argument(format!("lambda must be ≥ 0, got {l}")));
            }
        }
        let y = DVector::from_column_slice(values);
        let z = self.rotate(&y);
        let yscale = y.amax().max(1e-300);
        let affine_only = z.norm() <= 1e-12 * yscale * (n as f64).sqrt();
        let (lambda, loglik) = match lambda {
            Some(l) => (l, self.profile_loglik(&z, l)),
            None if affine_only => (LAMBDA_RANGE.1, f64::INFINITY),
            None => {
                let (lo, hi) = (LAMBDA_RANGE.0.log10(), LAMBDA_RANGE.1.log10());
                let f = |ll: f64| self.profile_loglik(&z, 10f64.powf(ll));
                let (best, val) = golden_max(f, lo, hi, LAMBDA_GRID, LOG_LAMBDA_TOL);
                (10f64.powf(best), val)
            }
        };
        let w = DVector::from_fn(z.len(), |i, _| {
            let v = self.evals[i] + lambda;
            if v > 0.0 {
                z[i] / v
            } else {
                0.0
            }
        });
        let c = &self.q2 * (&self.evecs * w);
        let resid = &y - &self.k * &c;
        let d = self
            .r
            .clone()
            .solve_upper_triangular(&(self.q1.transpose() * resid))
            .ok_or_else(|| Error::Rank("affine system is singular".into()))?;
        Ok(TpsFit {
            centers: self.centers.clone(),
            scaling: self.scaling,
            pts: self.pts.clone(),
            c: c.iter().copied().collect(),
            d: [d[0], d[1], d[2]],
            lambda,
            profile_loglik: loglik,
        })
    }
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize, tol: f64) -> (f64, f64) {
    let step = (hi - lo) / (grid - 1) as f64;
    let vals: Vec<f64> = (0..grid).map(|i| f(lo + i as f64 * step)).collect();
    let mut bi = 0;
    for i in 1..grid {
        if vals[i] > vals[bi] {
            bi = i;
        }
    }
    let mut a = lo + bi.saturating_sub(1) as f64 * step;
    let mut b = lo + (bi + 1).min(grid - 1) as f64 * step;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    let mut best = (lo + bi as f64 * step, vals[bi]);
    for (x, v) in [(x1, f1), (x2, f2)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsFit {
    pub centers: SiteGrid,
    pub scaling: Scaling,
    pts: Vec<(f64, f64)>,
    /// Radial coefficients, one per center.
    pub c: Vec<f64>,
    /// Affine coefficients `(1, x, y)` in scaled coordinates.
    pub d: [f64; 3],
    pub lambda: f64,
    pub profile_loglik: f64,
}

impl TpsFit {
    pub fn predict_at(&self, lon: f64, lat: f64) -> f64 {
        let (x, y) = self.scaling.apply(lon, lat);
        let mut v = self.d[0] + self.d[1] * x + self.d[2] * y;
        for (c, p) in self.c.iter().zip(&self.pts) {
            let (dx, dy) = (x - p.0, y - p.1);
            v += c * kernel(dx * dx + dy * dy);
        }
        v
    }
}

pub fn fit_tps(sites: &SiteGrid, values: &[f64], lambda: Option<f64>) -> Result<TpsFit> {
    TpsGeometry::new(sites)?.fit(values, lambda)
}

pub fn predict_tps(fit: &TpsFit, targets: &SiteGrid) -> Vec<f64> {
    targets.sites().iter().map(|s| fit.predict_at(s.lon, s.lat)).collect()
}

/// Precomputed evaluation matrices for one geometry and one target set.
struct Predictor {
    geom: TpsGeometry,
    /// Kernel between targets and centers, `m × n`.
    kt: DMatrix<f64>,
    /// Affine design at the targets, `m × 3`.
    tt: DMatrix<f64>,
}

impl Predictor {
    fn new(geom: TpsGeometry, targets: &SiteGrid) -> Self {
        let tp: Vec<(f64, f64)> = targets
            .sites()
            .iter()
            .map(|s| geom.scaling.apply(s.lon, s.lat))
            .collect();
        let kt = DMatrix::from_fn(tp.len(), geom.pts.len(), |a, b| {
            let (dx, dy) = (tp[a].0 - geom.pts[b].0, tp[a].1 - geom.pts[b].1);
            kernel(dx * dx + dy * dy)
        });
        let tt = DMatrix::from_fn(tp.len(), 3, |i, c| match c {
            0 => 1.0,
            1 => tp[i].0,
            _ => tp[i].1,
        });
        Self { geom, kt, tt }
    }

    fn predict(&self, values: &[f64]) -> Result<Vec<f64>> {
        let f = self.geom.fit(values, None)?;
        let out = &self.kt * DVector::from_vec(f.c) + &self.tt * DVector::from_row_slice(&f.d);
        Ok(out.iter().copied().collect())
    }
}

#[derive(Clone, Debug)]
pub struct Downscaled {
    pub field: HourlyField,
    /// `(day, hour)` slices left missing because too few sites had data.
    pub skipped: Vec<(usize, usize)>,
}

/// Per-(day, hour) spline interpolation of a coarse hourly field to
/// `targets`. All-zero slices pass through as zero without a fit and
/// negative predictions are clamped to zero.
pub fn downscale_hourly(field: &HourlyField, targets: &SiteGrid) -> Result<Downscaled> {
    let full = TpsGeometry::new(field.sites())?;
    let full = Predictor::new(full, targets);
    let n = field.n_sites();
    let m = targets.len();
    let slices: Vec<(usize, usize)> = (0..field.n_days())
        .flat_map(|d| (0..HOURS).map(move |h| (d, h)))
        .collect();
    let results: Vec<Result<Option<Vec<f64>>>> = slices
        .par_iter()
        .map(|&(d, h)| {
            let vals: Vec<f64> = (0..n).map(|s| field.get(s, d, h)).collect();
            let present: Vec<usize> = (0..n).filter(|&s| vals[s].is_finite()).collect();
            if !present.is_empty() && present.iter().all(|&s| vals[s] == 0.0) {
                return Ok(Some(vec![0.0; m]));
            }
            let pred = if present.len() == n {
                full.predict(&vals)
            } else {
                let sub = field.sites().subset(&present);
                let pv: Vec<f64> = present.iter().map(|&s| vals[s]).collect();
                TpsGeometry::new(&sub).and_then(|g| Predictor::new(g, targets).predict(&pv))
            };
            match pred {
                Ok(p) => Ok(Some(p.into_iter().map(|v| v.max(0.0)).collect())),
                Err(Error::InsufficientData(_)) | Err(Error::Rank(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = HourlyField::filled(targets.clone(), field.calendar().clone(), MISSING);
    let mut skipped = Vec::new();
    for (&(d, h), r) in slices.iter().zip(results) {
        match r? {
            Some(p) => {
                for (t, v) in p.into_iter().enumerate() {
                    out.set(t, d, h, v);
                }
            }
            None => skipped.push((d, h)),
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} slice(s) had too few sites for a spline and were left missing", skipped.len());
    }
    Ok(Downscaled { field: out, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub site_id: u32,
    /// Hour-ending label, 1..=24.
    pub hour: usize,
    pub rmse: f64,
    pub std: f64,
    pub ratio: f64,
}

/// Per-(site, hour) RMSE across days of `pred` against `truth` next to the
/// across-day standard deviation of `truth`. `hours` are hour-ending labels.
pub fn rmse_vs_std_report(pred: &HourlyField, truth: &HourlyField, hours: &[usize]) -> Result<Vec<RmseRow>> {
    if !pred.same_geometry(truth) {
        return Err(Error::Argument("prediction and truth grids differ".into()));
    }
    if hours.iter().any(|h| !(1..=HOURS).contains(h)) {
        return Err(Error::Argument("hours must lie in 1..=24".into()));
    }
    let mut rows = Vec::new();
    for (s, site) in truth.sites().sites().iter().enumerate() {
        for &hour in hours {
            let h = hour - 1;
            let pairs: Vec<(f64, f64)> = (0..truth.n_days())
                .map(|d| (pred.get(s, d, h), truth.get(s, d, h)))
                .filter(|(p, t)| p.is_finite() && t.is_finite())
                .collect();
            let k = pairs.len() as f64;
            let rmse = (pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / k).sqrt();
            let tv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let std = crate::stats::std_dev(&tv);
            rows.push(RmseRow {
                site_id: site.id,
                hour,
                rmse,
                std,
                ratio: if std > 0.0 { rmse / std } else { f64::NAN },
            });
        }
    }
    Ok(rows)
}

pub fn write_rmse_report(path: impl AsRef<Path>, rows: &[RmseRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let werr = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["site_id", "hour", "rmse", "std", "ratio"]).map_err(werr)?;
    let f = |v: f64| if v.is_nan() { "NA".to_string() } else { format!("{v}") };
    for r in rows {
        w.write_record([r.site_id.to_string(), r.hour.to_string(), f(r.rmse), f(r.std), f(r.ratio)])
            .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! Spatial Gaussian-process model for standardized coefficients.
//!
//! For one coefficient index `j` the standardized coefficients on day `d` are
//!
//! ```text
//! u*(s, d) = x(s, d)·beta_cov + f(s, d) + ε(s, d)
//! ```
//!
//! with `x` the z-scored daily total, `f` a zero-mean stationary field with
//! covariance `sill · ρ(dist / range)` and `ε` white noise of variance
//! `nugget`. Days are independent replicates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DailyField, SiteGrid};
use crate::error::{Error, Result};
use crate::residuals::ConditionalVarianceTable;

pub const MIN_GP_SITES: usize = 25;
pub const MIN_GP_DAYS: usize = 20;
/// Site count above which dense simulation is refused.
pub const MAX_DENSE_SITES: usize = 5000;

const ETA_BOUNDS: (f64, f64) = (1e-6, 1e4);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovFamily {
    #[default]
    Exponential,
    Matern32,
}

impl CovFamily {
    /// Correlation at distance `d` for range `range`.
    pub fn correlation(self, d: f64, range: f64) -> f64 {
        let r = d / range;
        match self {
            CovFamily::Exponential => (-r).exp(),
            CovFamily::Matern32 => {
                let a = 3f64.sqrt() * r;
                (1.0 + a) * (-a).exp()
            }
        }
    }
}

impl std::str::FromStr for CovFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(CovFamily::Exponential),
            "matern_3_2" | "matern32" => Ok(CovFamily::Matern32),
            other => Err(Error::Config(format!("unknown covariance family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    /// 1-based coefficient index.
    pub j: usize,
    pub beta_cov: f64,
    pub beta_cov_se: f64,
    pub cov_family: CovFamily,
    pub range_km: f64,
    pub sill: f64,
    pub nugget: f64,
    /// Mean and standard deviation used to z-score the daily total.
    pub x_mean: f64,
    pub x_sd: f64,
    pub log_likelihood: f64,
    /// Names of parameters whose optimum sits on a search bound.
    #[serde(default)]
    pub at_bound: Vec<String>,
}

impl GpModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.range_km > 0.0
            && self.sill >= 0.0
            && self.nugget >= 0.0
            && self.x_sd > 0.0
            && self.beta_cov.is_finite()
            && self.sill.is_finite()
            && self.nugget.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid GP model for mode {}", self.j)))
        }
    }

    /// Covariate value for a daily total.
    pub fn covariate(&self, ghi: f64) -> f64 {
        (ghi - self.x_mean) / self.x_sd
    }

    /// Covariance of `u*` between two sites `d` km apart (distinct sites).
    pub fn covariance(&self, d: f64) -> f64 {
        self.sill * self.cov_family.correlation(d, self.range_km)
    }
}

/// Pairwise great-circle distances.
pub fn distance_matrix(sites: &SiteGrid) -> DMatrix<f64> {
    let n = sites.len();
    DMatrix::from_fn(n, n, |a, b| if a == b { 0.0 } else { sites.distance_km(a, b) })
}

/// Per-range sufficient statistics in the eigenbasis of the correlation matrix.
struct Rotated {
    lambda: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

struct Profile {
    ll: f64,
    beta: f64,
    beta_se: f64,
    scale: f64,
}

impl Rotated {
    fn new(dist: &DMatrix<f64>, family: CovFamily, range: f64, y: &DMatrix<f64>, x: &DMatrix<f64>) -> Self {
        let r = dist.map(|d| family.correlation(d, range));
        let eig = SymmetricEigen::new(r);
        let qt = eig.eigenvectors.transpose();
        let (ty, tx) = (&qt * y, &qt * x);
        let n = dist.nrows();
        let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            for d in 0..y.ncols() {
                a[i] += tx[(i, d)] * tx[(i, d)];
                b[i] += tx[(i, d)] * ty[(i, d)];
                c[i] += ty[(i, d)] * ty[(i, d)];
            }
        }
        Self {
            lambda: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            a,
            b,
            c,
        }
    }

    fn profile(&self, eta: f64, n_days: usize) -> Profile {
        let (mut sxx, mut sxy, mut syy, mut logdet) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..self.lambda.len() {
            let v = self.lambda[i] + eta;
            sxx += self.a[i] / v;
            sxy += self.b[i] / v;
            syy += self.c[i] / v;
            logdet += v.ln();
        }
        let beta = if sxx > 1e-300 { sxy / sxx } else { 0.0 };
        let rss = (syy - beta * sxy).max(0.0);
        let nd = (self.lambda.len() * n_days) as f64;
        let scale = rss / nd;
        let ll = if scale > 0.0 {
            -0.5 * (nd * ((2.0 * std::f64::consts::PI * scale).ln() + 1.0) + n_days as f64 * logdet)
        } else {
            f64::NEG_INFINITY
        };
        let beta_se = if sxx > 1e-300 { (scale / sxx).sqrt() } else { f64::NAN };
        Profile { ll, beta, beta_se, scale }
    }
}

/// Grid search followed by golden-section refinement of a 1-D maximum.
fn maximize(f: &mut impl FnMut(f64) -> f64, lo: f64, hi: f64, grid: usize, tol: f64) -> (f64, f64) {
    let step = (hi - lo) / (grid - 1) as f64;
    let mut best = (lo, f64::NEG_INFINITY);
    let mut best_i = 0;
    for i in 0..grid {
        let x = lo + i as f64 * step;
        let v = f(x);
        if v > best.1 {
            best = (x, v);
            best_i = i;
        }
    }
    let (mut a, mut b) = (
        lo + best_i.saturating_sub(1) as f64 * step,
        lo + (best_i + 1).min(grid - 1) as f64 * step,
    );
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
    for (x, v) in [(x1, f1), (x2, f2)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// Maximum-likelihood fit of the GP for coefficient `j` (1-based).
///
/// `ustar` is `n_sites × n_days`, aligned with `daily`; days with any missing
/// coefficient are skipped. The total scale is profiled in closed form, the
/// nugget-to-sill ratio and the range by nested golden-section searches in
/// log space, and `beta_cov` by generalized least squares.
pub fn fit_gp(ustar: &DMatrix<f64>, daily: &DailyField, j: usize, family: CovFamily) -> Result<GpModel> {
    let sites = daily.sites();
    let n = sites.len();
    if ustar.nrows() != n || ustar.ncols() != daily.calendar().len() {
        return Err(Error::Argument("coefficient matrix does not match the daily field".into()));
    }
    if n < MIN_GP_SITES {
        return Err(Error::InsufficientData(format!("GP fit needs ≥ {MIN_GP_SITES} sites, got {n}")));
    }
    let days: Vec<usize> = (0..ustar.ncols())
        .filter(|&d| (0..n).all(|s| ustar[(s, d)].is_finite() && daily.get(s, d).is_finite()))
        .collect();
    if days.len() < MIN_GP_DAYS {
        return Err(Error::InsufficientData(format!(
            "GP fit needs ≥ {MIN_GP_DAYS} complete days, got {}",
            days.len()
        )));
    }
    let y = DMatrix::from_fn(n, days.len(), |s, c| ustar[(s, days[c])]);
    let raw = DMatrix::from_fn(n, days.len(), |s, c| daily.get(s, days[c]));
    let x_mean = raw.mean();
    let sd = (raw.map(|v| (v - x_mean).powi(2)).sum() / (raw.len() as f64 - 1.0)).sqrt();
    let x_sd = if sd > 0.0 { sd } else { 1.0 };
    let x = raw.map(|v| (v - x_mean) / x_sd);

    let dist = distance_matrix(sites);
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            dmin = dmin.min(dist[(a, b)]);
            dmax = dmax.max(dist[(a, b)]);
        }
    }
    if !(dmin > 0.0) {
        return Err(Error::Integrity("two GP sites share a location".into()));
    }
    let (lr_lo, lr_hi) = ((dmin / 10.0).ln(), (2.0 * dmax).ln());
    let (le_lo, le_hi) = (ETA_BOUNDS.0.ln(), ETA_BOUNDS.1.ln());
    let n_days = days.len();

    let inner = |rot: &Rotated| {
        let mut f = |le: f64| rot.profile(le.exp(), n_days).ll;
        maximize(&mut f, le_lo, le_hi, 41, 1e-5)
    };
    let mut outer = |lr: f64| {
        let rot = Rotated::new(&dist, family, lr.exp(), &y, &x);
        inner(&rot).1
    };
    let (lr, ll) = maximize(&mut outer, lr_lo, lr_hi, 25, 1e-5);
    if !ll.is_finite() {
        return Err(Error::Estimation(format!("non-finite GP likelihood for mode {j}")));
    }
    let rot = Rotated::new(&dist, family, lr.exp(), &y, &x);
    let (le, _) = inner(&rot);
    let p = rot.profile(le.exp(), n_days);

    let mut at_bound = Vec::new();
    let near = |v: f64, b: f64| (v - b).abs() < 1e-3;
    if near(lr, lr_lo) {
        at_bound.push("range_lower".to_string());
    }
    if near(lr, lr_hi) {
        at_bound.push("range_upper".to_string());
    }
    if near(le, le_lo) {
        at_bound.push("nugget_lower".to_string());
    }
    if near(le, le_hi) {
        at_bound.push("nugget_upper".to_string());
    }
    if !at_bound.is_empty() {
        log::warn!("GP fit for mode {j} stopped on bound(s): {}", at_bound.join(", "));
    }
    Ok(GpModel {
        j,
        beta_cov: p.beta,
        beta_cov_se: p.beta_se,
        cov_family: family,
        range_km: lr.exp(),
        sill: p.scale,
        nugget: p.scale * le.exp(),
        x_mean,
        x_sd,
        log_likelihood: p.ll,
        at_bound,
    })
}

/// Gaussian log-likelihood of the `n_sites × n_days` matrix under `model`.
pub fn log_likelihood(model: &GpModel, ustar: &DMatrix<f64>, daily: &DailyField) -> Result<f64> {
    let n = ustar.nrows();
    let cov = model_covariance(model, daily.sites());
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut ll = 0.0;
    for d in 0..ustar.ncols() {
        let r = DVector::from_fn(n, |s, _| ustar[(s, d)] - model.beta_cov * model.covariate(daily.get(s, d)));
        let z = chol.solve(&r);
        ll += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&z));
    }
    Ok(ll)
}

/// `sill · ρ + nugget · I` at the given sites.
pub fn model_covariance(model: &GpModel, sites: &SiteGrid) -> DMatrix<f64> {
    let mut c = distance_matrix(sites).map(|d| model.covariance(d));
    for i in 0..sites.len() {
        c[(i, i)] = model.sill + model.nugget;
    }
    c
}

/// Cached Cholesky factor for repeated draws at one set of sites.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    model: GpModel,
    /// Lower factor of the structured part; `None` when the sill is zero.
    l: Option<DMatrix<f64>>,
    nugget_sd: f64,
}

impl FieldSampler {
    pub fn new(model: &GpModel, sites: &SiteGrid) -> Result<Self> {
        model.validate()?;
        let n = sites.len();
        if n > MAX_DENSE_SITES {
            return Err(Error::Argument(format!(
                "{n} sites exceed the dense simulation limit of {MAX_DENSE_SITES}; tile the domain"
            )));
        }
        let l = if model.sill > 0.0 {
            let base = distance_matrix(sites).map(|d| model.covariance(d));
            let mut jitter = 1e-10;
            loop {
                let mut c = base.clone();
                for i in 0..n {
                    c[(i, i)] += jitter * model.sill;
                }
                if let Some(ch) = c.cholesky() {
                    break Some(ch.unpack());
                }
                jitter *= 10.0;
                if jitter > 1e-6 * 1.000001 {
                    return Err(Error::Numeric(format!(
                        "covariance for mode {} is not positive definite after jitter",
                        model.j
                    )));
                }
            }
        } else {
            None
        };
        Ok(Self {
            model: model.clone(),
            l,
            nugget_sd: model.nugget.sqrt(),
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    /// One field draw given per-site daily totals.
    pub fn draw(&self, ghi: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = ghi.len();
        let mut out: Vec<f64> = ghi
            .iter()
            .map(|g| self.model.beta_cov * self.model.covariate(*g))
            .collect();
        if let Some(l) = &self.l {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
            let f = l * z;
            for (o, v) in out.iter_mut().zip(f.iter()) {
                *o += v;
            }
        }
        if self.nugget_sd > 0.0 {
            for o in out.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *o += self.nugget_sd * e;
            }
        }
        out
    }
}

/// One seeded draw of `u*` at `sites` given per-site daily totals.
pub fn simulate_field(model: &GpModel, sites: &SiteGrid, ghi: &[f64], seed: u64) -> Result<Vec<f64>> {
    if ghi.len() != sites.len() {
        return Err(Error::Argument("covariate length does not match sites".into()));
    }
    let sampler = FieldSampler::new(model, sites)?;
    Ok(sampler.draw(ghi, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `u = u* · scale(GHI)` for coefficient `j` (0-based column of the table).
pub fn unstandardize_field(ustar: &[f64], table: &ConditionalVarianceTable, ghi: &[f64], j: usize) -> Vec<f64> {
    ustar.iter().zip(ghi).map(|(u, g)| u * table.scale(*g, j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::CalendarIndex;
    use chrono::NaiveDate;
    use rand::Rng;

    fn model(range: f64, sill: f64, nugget: f64) -> GpModel {
        GpModel {
            j: 1,
            beta_cov: 0.0,
            beta_cov_se: 0.0,
            cov_family: CovFamily::Exponential,
            range_km: range,
            sill,
            nugget,
            x_mean: 0.0,
            x_sd: 1.0,
            log_likelihood: 0.0,
            at_bound: vec![],
        }
    }

    fn simulate_days(m: &GpModel, sites: &SiteGrid, n_days: usize, seed: u64) -> (DMatrix<f64>, DailyField) {
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), n_days);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let ghi: Vec<f64> = (0..sites.len() * n_days).map(|_| 3000.0 + 2000.0 * rng.random::<f64>()).collect();
        let daily = DailyField::from_values(sites.clone(), cal, ghi).unwrap();
        let sampler = FieldSampler::new(m, sites).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = DMatrix::zeros(sites.len(), n_days);
        for d in 0..n_days {
            let g: Vec<f64> = (0..sites.len()).map(|s| daily.get(s, d)).collect();
            let v = sampler.draw(&g, &mut rng);
            for s in 0..sites.len() {
                y[(s, d)] = v[s];
            }
        }
        (y, daily)
    }

    #[test]
    fn zero_model_gives_zero_field() {
        let sites = SiteGrid::regular(-100.0, 40.0, 3, 3, 20.0).unwrap();
        let f = simulate_field(&model(50.0, 0.0, 0.0), &sites, &[1.0; 9], 4).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seeded_draws_repeat() {
        let sites = SiteGrid::regular(-100.0, 40.0, 4, 4, 20.0).unwrap();
        let m = model(50.0, 1.0, 0.1);
        let a = simulate_field(&m, &sites, &[1.0; 16], 4).unwrap();
        let b = simulate_field(&m, &sites, &[1.0; 16], 4).unwrap();
        assert_eq!(a, b);
        let c = simulate_field(&m, &sites, &[1.0; 16], 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_covariance_matches() {
        let sites = SiteGrid::regular(-100.0, 40.0, 5, 5, 20.0).unwrap();
        let m = model(60.0, 1.0, 0.1);
        let sampler = FieldSampler::new(&m, &sites).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut acc = DMatrix::<f64>::zeros(25, 25);
        for _ in 0..n {
            let v = DVector::from_vec(sampler.draw(&[0.0; 25], &mut rng));
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        let c = model_covariance(&m, &sites);
        for a in 0..25 {
            for b in 0..25 {
                let band = ((c[(a, a)] * c[(b, b)] + c[(a, b)].powi(2)) / n as f64).sqrt();
                assert!(
                    (acc[(a, b)] - c[(a, b)]).abs() <= 0.05 * c[(a, b)].abs() + 4.0 * band,
                    "({a},{b}) {} vs {}",
                    acc[(a, b)],
                    c[(a, b)]
                );
            }
        }
    }

    #[test]
    fn simulate_then_refit() {
        let sites = SiteGrid::regular(-100.0, 40.0, 10, 10, 20.0).unwrap();
        let truth = model(60.0, 1.0, 0.1);
        let (y, daily) = simulate_days(&truth, &sites, 200, 7);
        let fit = fit_gp(&y, &daily, 1, CovFamily::Exponential).unwrap();
        for (got, want) in [(fit.range_km, 60.0), (fit.sill, 1.0), (fit.nugget, 0.1)] {
            assert!((got - want).abs() <= 0.25 * want, "{fit:?}");
        }
        assert!(fit.beta_cov.abs() <= 3.0 * fit.beta_cov_se, "{fit:?}");
        let direct = log_likelihood(&fit, &y, &daily).unwrap();
        assert!((direct - fit.log_likelihood).abs() < 1e-6 * direct.abs());
        let init = model(100.0, 1.0, 1.0);
        assert!(fit.log_likelihood >= log_likelihood(&init, &y, &daily).unwrap());
    }

    #[test]
    fn matern_refit() {
        let sites = SiteGrid::regular(-100.0, 40.0, 8, 8, 20.0).unwrap();
        let mut truth = model(50.0, 1.0, 0.1);
        truth.cov_family = CovFamily::Matern32;
        let (y, daily) = simulate_days(&truth, &sites, 150, 8);
        let fit = fit_gp(&y, &daily, 1, CovFamily::Matern32).unwrap();
        assert!((fit.range_km - 50.0).abs() <= 0.3 * 50.0, "{fit:?}");
    }

    #[test]
    fn white_noise_has_no_structure() {
        let sites = SiteGrid::regular(-100.0, 40.0, 6, 6, 20.0).unwrap();
        let (y, daily) = simulate_days(&model(1.0, 0.0, 1.0), &sites, 60, 9);
        let fit = fit_gp(&y, &daily, 1, CovFamily::Exponential).unwrap();
        assert!(fit.sill < 0.05 * (fit.sill + fit.nugget) || fit.range_km < 20.0, "{fit:?}");
    }

    #[test]
    fn planted_covariate_recovered() {
        let sites = SiteGrid::regular(-100.0, 40.0, 6, 6, 20.0).unwrap();
        let mut truth = model(40.0, 0.5, 0.1);
        truth.beta_cov = 0.8;
        truth.x_mean = 4000.0;
        truth.x_sd = 577.0;
        let (y, daily) = simulate_days(&truth, &sites, 100, 10);
        let fit = fit_gp(&y, &daily, 1, CovFamily::Exponential).unwrap();
        // Fitted covariate scaling differs slightly from the planted one.
        let planted = 0.8 * fit.x_sd / 577.0;
        assert!((fit.beta_cov - planted).abs() <= 4.0 * fit.beta_cov_se, "{fit:?}");
    }

    #[test]
    fn fit_preconditions() {
        let sites = SiteGrid::regular(-100.0, 40.0, 4, 4, 20.0).unwrap();
        let (y, daily) = simulate_days(&model(40.0, 1.0, 0.1), &sites, 30, 1);
        assert!(matches!(fit_gp(&y, &daily, 1, CovFamily::Exponential), Err(Error::InsufficientData(_))));
        let sites = SiteGrid::regular(-100.0, 40.0, 5, 5, 20.0).unwrap();
        let (y, daily) = simulate_days(&model(40.0, 1.0, 0.1), &sites, 10, 1);
        assert!(matches!(fit_gp(&y, &daily, 1, CovFamily::Exponential), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn unstandardize_scales_by_bin() {
        let table = ConditionalVarianceTable {
            bin_edges: vec![100.0],
            sigma2: DMatrix::from_row_slice(2, 1, &[4.0, 9.0]),
            counts: vec![30, 30],
            scaling: Default::default(),
        };
        let u = unstandardize_field(&[1.0, 1.0, 0.0], &table, &[50.0, 150.0, 150.0], 0);
        assert_eq!(u, vec![2.0, 3.0, 0.0]);
    }
}

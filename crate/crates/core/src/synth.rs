//! Synthetic ground truth drawn from the model itself.
//!
//! Each site-day gets a weather class (overcast, intermittent, clear) from a
//! spatially correlated latent field. The daily total is the clearsky total
//! times a clearsky index within the class band. Hourly values are the daily
//! total times a warped raised-cosine template, plus planted residual modes
//! whose coefficients are Gaussian-process fields scaled per class.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::{save_daily, save_hourly, save_sites, to_daily, CalendarIndex, DailyField, HourlyField, Site, SiteGrid, HOURS};
use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::spatialfield::{CovFamily, FieldSampler, GpModel};

pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["overcast", "intermittent", "clear"];
/// Clearsky index band per class.
pub const KC_BANDS: [(f64, f64); N_CLASSES] = [(0.1, 0.4), (0.45, 0.85), (0.985, 1.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedGp {
    pub range_km: f64,
    pub sill: f64,
    pub nugget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub nx: usize,
    pub ny: usize,
    pub spacing_km: f64,
    /// South-west corner.
    pub lon0: f64,
    pub lat0: f64,
    pub start: NaiveDate,
    pub n_days: usize,
    /// Clearsky peak irradiance at the summer solstice (W/m²).
    pub peak_wm2: f64,
    /// Relative seasonal swing of the clearsky peak.
    pub seasonal_amplitude: f64,
    /// Template centre and half daylight span (hours).
    pub center_h: f64,
    pub half_width_h: f64,
    /// `β = beta_slope · (lon − lon_c)` in hours per degree.
    pub beta_slope: f64,
    /// `τ = 1 + tau_slope · (lat − lat_c)` per degree.
    pub tau_slope: f64,
    /// Residual-mode coefficient standard deviations on intermittent days.
    pub mode_sd: Vec<f64>,
    /// Multipliers of `mode_sd` per class (overcast, intermittent, clear).
    pub class_sd_factor: [f64; N_CLASSES],
    /// Planted coefficient fields, one per mode.
    pub gps: Vec<PlantedGp>,
    pub cov_family: CovFamily,
    /// Class probabilities (overcast, intermittent, clear).
    pub class_weights: [f64; N_CLASSES],
    pub weather_range_km: f64,
    /// Share of the latent weather variance common to the whole domain.
    pub weather_day_share: f64,
    /// Relative standard deviation of multiplicative hourly noise.
    pub noise_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nx: 10,
            ny: 10,
            spacing_km: 20.0,
            lon0: -105.0,
            lat0: 38.0,
            start: NaiveDate::from_ymd_opt(2019, 7, 1).expect("valid date"),
            n_days: 31,
            peak_wm2: 1000.0,
            seasonal_amplitude: 0.2,
            center_h: 12.0,
            half_width_h: 6.5,
            beta_slope: -1.0 / 15.0,
            tau_slope: 0.01,
            mode_sd: vec![300.0, 180.0, 110.0, 70.0],
            class_sd_factor: [0.3, 1.0, 0.08],
            gps: [90.0, 70.0, 55.0, 45.0]
                .iter()
                .map(|&r| PlantedGp { range_km: r, sill: 1.0, nugget: 0.1 })
                .collect(),
            cov_family: CovFamily::Exponential,
            class_weights: [0.25, 0.45, 0.3],
            weather_range_km: 200.0,
            weather_day_share: 0.5,
            noise_frac: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// 10 × 10 sites over one month.
    pub fn small() -> Self {
        Self::default()
    }

    /// A 30 × 20 site grid meant for a 15 × 10 = 150 tile layout.
    pub fn paper_scale_mini() -> Self {
        Self {
            nx: 30,
            ny: 20,
            spacing_km: 40.0,
            lon0: -110.0,
            lat0: 34.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "paper-scale-mini" => Ok(Self::paper_scale_mini()),
            other => Err(Error::Config(format!(
                "unknown synth preset '{other}' (expected small or paper-scale-mini)"
            ))),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.mode_sd.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid synth config: {m}")));
        if self.nx == 0 || self.ny == 0 || self.n_days == 0 {
            return bad("grid and calendar must be non-empty");
        }
        if !(self.spacing_km > 0.0) {
            return bad("spacing_km must be positive");
        }
        if !(self.peak_wm2 > 0.0) || !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return bad("peak_wm2 must be positive and seasonal_amplitude in [0, 1)");
        }
        if !(self.half_width_h > 1.0) || self.center_h - self.half_width_h < 0.5 || self.center_h + self.half_width_h > 23.5 {
            return bad("daylight span must lie inside the day");
        }
        if self.gps.len() != self.n_modes() {
            return bad("need one planted GP per residual mode");
        }
        if self.n_modes() > 8 {
            return bad("at most 8 residual modes");
        }
        if self.mode_sd.iter().chain(&self.class_sd_factor).any(|v| !(*v >= 0.0)) {
            return bad("standard deviations must be non-negative");
        }
        if self.gps.iter().any(|g| !(g.range_km > 0.0 && g.sill >= 0.0 && g.nugget >= 0.0)) {
            return bad("GP ranges must be positive, sills and nuggets non-negative");
        }
        let w: f64 = self.class_weights.iter().sum();
        if self.class_weights.iter().any(|v| !(*v >= 0.0)) || (w - 1.0).abs() > 1e-9 {
            return bad("class weights must be non-negative and sum to 1");
        }
        if !(self.weather_range_km > 0.0) || !(0.0..=1.0).contains(&self.weather_day_share) {
            return bad("weather_range_km must be positive and weather_day_share in [0, 1]");
        }
        if !(0.0..0.2).contains(&self.noise_frac) {
            return bad("noise_frac must lie in [0, 0.2)");
        }
        let span = self.nx.max(self.ny) as f64 * self.spacing_km / 111.0;
        let tau_min = 1.0 - self.tau_slope.abs() * span;
        if tau_min < 0.5 {
            return bad("tau_slope makes the width factor too small across the grid");
        }
        if self.center_h + self.half_width_h / tau_min + (self.beta_slope.abs() * span) / tau_min > 23.5 {
            return bad("warped daylight span leaves the day");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<SiteGrid> {
        SiteGrid::regular(self.lon0, self.lat0, self.nx, self.ny, self.spacing_km)
    }

    pub fn calendar(&self) -> CalendarIndex {
        CalendarIndex::contiguous(self.start, self.n_days)
    }
}

/// Raised-cosine daylight bump of unit integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center_h: f64,
    pub half_width_h: f64,
}

impl Bump {
    pub fn density(&self, x: f64) -> f64 {
        let (c, w) = (self.center_h, self.half_width_h);
        let t = x - c;
        if t.abs() >= w {
            0.0
        } else {
            (1.0 + (std::f64::consts::PI * t / w).cos()) / (2.0 * w)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (c, w) = (self.center_h, self.half_width_h);
        let t = x - c;
        if t <= -w {
            0.0
        } else if t >= w {
            1.0
        } else {
            let pi = std::f64::consts::PI;
            (t + w + w / pi * (pi * t / w).sin()) / (2.0 * w)
        }
    }

    /// Integral of `τ·g(τ(x − c) − β + c)` over each hour slot.
    pub fn slot_integrals(&self, beta: f64, tau: f64) -> [f64; HOURS] {
        let c = self.center_h;
        let warp = |x: f64| tau * (x - c) - beta + c;
        let mut out = [0.0; HOURS];
        for (h, o) in out.iter_mut().enumerate() {
            *o = self.cdf(warp(h as f64 + 1.0)) - self.cdf(warp(h as f64));
        }
        out
    }
}

/// Template-tapered Legendre polynomials on the daylight span. Each candidate
/// is corrected with multiples of T and T² so that it sums to zero and is
/// orthogonal to the template, then orthonormalized against earlier modes.
/// Every mode vanishes where the template does.
pub fn planted_basis(bump: &Bump, n_modes: usize) -> Vec<[f64; HOURS]> {
    let x: Vec<f64> = (0..HOURS).map(|h| (h as f64 + 0.5 - bump.center_h) / bump.half_width_h).collect();
    let legendre = |n: usize, x: f64| {
        let (mut p0, mut p1) = (1.0, x);
        if n == 0 {
            return p0;
        }
        for k in 1..n {
            let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
            p0 = p1;
            p1 = p2;
        }
        p1
    };
    let t = DVector::from_column_slice(&bump.slot_integrals(0.0, 1.0));
    let t2 = t.component_mul(&t);
    let c = Matrix2::new(t.sum(), t2.sum(), t.dot(&t), t2.dot(&t));
    let c_inv = c.try_inverse().expect("template constraint system is singular");
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut modes = Vec::with_capacity(n_modes);
    let mut degree = 1;
    while modes.len() < n_modes && degree < HOURS {
        let mut v = DVector::from_fn(HOURS, |h, _| t[h] * legendre(degree, x[h]));
        degree += 1;
        let ab = c_inv * Vector2::new(v.sum(), v.dot(&t));
        v -= &t * ab[0] + &t2 * ab[1];
        if let Some(u) = push_orthonormal(&mut basis, v) {
            let mut a = [0.0; HOURS];
            a.copy_from_slice(u.as_slice());
            modes.push(a);
        }
    }
    modes
}

fn push_orthonormal(basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>) -> Option<DVector<f64>> {
    for _ in 0..2 {
        for b in basis.iter() {
            let p = b.dot(&v);
            v -= b * p;
        }
    }
    let n = v.norm();
    if n < 1e-8 {
        return None;
    }
    v /= n;
    basis.push(v.clone());
    Some(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site_id: u32,
    pub lon: f64,
    pub lat: f64,
    pub beta: f64,
    pub tau: f64,
}

/// Everything planted in a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    pub config: SynthConfig,
    pub lon_c: f64,
    pub lat_c: f64,
    pub sites: Vec<SiteTruth>,
    /// Residual modes, one row of 24 slot values each.
    pub phi: Vec<[f64; HOURS]>,
    /// Coefficient standard deviation per class and mode.
    pub class_sd: Vec<Vec<f64>>,
    pub gps: Vec<GpModel>,
    /// Site-days per class.
    pub class_counts: [usize; N_CLASSES],
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub truth: HourlyField,
    pub daily: DailyField,
    pub clearsky: HourlyField,
    /// Weather class per site-day, laid out like [`DailyField`].
    pub classes: Vec<u8>,
    pub params: TruthParams,
}

impl SynthDataset {
    /// Writes `sites.csv`, `hourly.csv` (with clearsky), `daily.csv` and
    /// `truth.params` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_sites(dir.join("sites.csv"), self.truth.sites())?;
        save_hourly(dir.join("hourly.csv"), &self.truth, Some(&self.clearsky))?;
        save_daily(dir.join("daily.csv"), &self.daily)?;
        let p = dir.join("truth.params");
        let text = serde_json::to_string_pretty(&self.params)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn planted_gp(cfg: &SynthConfig, j: usize, gp: &PlantedGp) -> GpModel {
    GpModel {
        j,
        beta_cov: 0.0,
        beta_cov_se: 0.0,
        cov_family: cfg.cov_family,
        range_km: gp.range_km,
        sill: gp.sill,
        nugget: gp.nugget,
        x_mean: 0.0,
        x_sd: 1.0,
        log_likelihood: 0.0,
        at_bound: Vec::new(),
    }
}

fn class_of(p: f64, weights: &[f64; N_CLASSES]) -> (usize, f64) {
    let mut lo = 0.0;
    for (c, w) in weights.iter().enumerate() {
        if p < lo + w || c == N_CLASSES - 1 {
            let frac = if *w > 0.0 { ((p - lo) / w).clamp(0.0, 1.0) } else { 0.5 };
            return (c, frac);
        }
        lo += w;
    }
    unreachable!()
}

/// Generates a dataset; deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let grid = config.grid()?;
    let cal = config.calendar();
    let (lon0, lat0, lon1, lat1) = grid.bbox().expect("non-empty grid");
    let (lon_c, lat_c) = (0.5 * (lon0 + lon1), 0.5 * (lat0 + lat1));
    let bump = Bump {
        center_h: config.center_h,
        half_width_h: config.half_width_h,
    };
    let site_truth: Vec<SiteTruth> = grid
        .sites()
        .iter()
        .map(|s| SiteTruth {
            site_id: s.id,
            lon: s.lon,
            lat: s.lat,
            beta: config.beta_slope * (s.lon - lon_c),
            tau: 1.0 + config.tau_slope * (s.lat - lat_c),
        })
        .collect();
    let shapes: Vec<[f64; HOURS]> = site_truth.iter().map(|t| bump.slot_integrals(t.beta, t.tau)).collect();
    let phi = planted_basis(&bump, config.n_modes());
    let class_sd: Vec<Vec<f64>> = config
        .class_sd_factor
        .iter()
        .map(|f| config.mode_sd.iter().map(|s| s * f).collect())
        .collect();
    let gps: Vec<GpModel> = config.gps.iter().enumerate().map(|(j, g)| planted_gp(config, j + 1, g)).collect();
    let samplers: Vec<FieldSampler> = gps.iter().map(|g| FieldSampler::new(g, &grid)).collect::<Result<_>>()?;
    let weather = FieldSampler::new(
        &GpModel {
            j: 0,
            ..planted_gp(
                config,
                0,
                &PlantedGp {
                    range_km: config.weather_range_km,
                    sill: 1.0 - config.weather_day_share,
                    nugget: 0.0,
                },
            )
        },
        &grid,
    )?;
    let std_normal = Normal::standard();
    let n = grid.len();
    let zeros = vec![0.0; n];

    let days: Vec<(Vec<f64>, Vec<f64>, Vec<u8>)> = (0..cal.len())
        .into_par_iter()
        .map(|d| {
            let date = cal.date(d);
            let key = date.num_days_from_ce() as u64;
            let season = 1.0
                + config.seasonal_amplitude
                    * (2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 172.0) / 365.25).cos();
            let cs_total = config.peak_wm2 * season * config.half_width_h;
            let mut wrng = seeds::rng(config.seed, &[tag::SYNTH_WEATHER, key]);
            let common: f64 = wrng.sample::<f64, _>(StandardNormal) * config.weather_day_share.sqrt();
            let latent = weather.draw(&zeros, &mut wrng);
            let coefs: Vec<Vec<f64>> = samplers
                .iter()
                .enumerate()
                .map(|(j, s)| s.draw(&zeros, &mut seeds::rng(config.seed, &[tag::SYNTH_COEF, key, j as u64])))
                .collect();
            let mut nrng = seeds::rng(config.seed, &[tag::SYNTH_NOISE, key]);
            let mut hourly = vec![0.0; n * HOURS];
            let mut clear = vec![0.0; n * HOURS];
            let mut classes = vec![0u8; n];
            for s in 0..n {
                let p = std_normal.cdf(common + latent[s]);
                let (c, frac) = class_of(p, &config.class_weights);
                let (lo, hi) = KC_BANDS[c];
                let kc = lo + (hi - lo) * frac;
                classes[s] = c as u8;
                let g = kc * cs_total;
                for h in 0..HOURS {
                    let mut y = g * shapes[s][h];
                    for (j, phi_j) in phi.iter().enumerate() {
                        y += class_sd[c][j] * coefs[j][s] * phi_j[h];
                    }
                    y = y.max(0.0);
                    if config.noise_frac > 0.0 && y > 0.0 {
                        let e: f64 = nrng.sample(StandardNormal);
                        y = (y * (1.0 + config.noise_frac * e)).max(0.0);
                    }
                    hourly[s * HOURS + h] = y;
                    clear[s * HOURS + h] = cs_total * shapes[s][h];
                }
            }
            (hourly, clear, classes)
        })
        .collect();

    let nd = cal.len();
    let mut truth = vec![0.0; n * nd * HOURS];
    let mut cs = vec![0.0; n * nd * HOURS];
    let mut classes = vec![0u8; n * nd];
    let mut class_counts = [0usize; N_CLASSES];
    for (d, (h, c, k)) in days.into_iter().enumerate() {
        for s in 0..n {
            let o = (s * nd + d) * HOURS;
            truth[o..o + HOURS].copy_from_slice(&h[s * HOURS..(s + 1) * HOURS]);
            cs[o..o + HOURS].copy_from_slice(&c[s * HOURS..(s + 1) * HOURS]);
            classes[s * nd + d] = k[s];
            class_counts[k[s] as usize] += 1;
        }
    }
    let truth = HourlyField::from_values(grid.clone(), cal.clone(), truth)?;
    let clearsky = HourlyField::from_values(grid, cal, cs)?;
    let daily = to_daily(&truth);
    Ok(SynthDataset {
        truth,
        daily,
        clearsky,
        classes,
        params: TruthParams {
            config: config.clone(),
            lon_c,
            lat_c,
            sites: site_truth,
            phi,
            class_sd,
            gps,
            class_counts,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseMode {
    /// Every k-th fine site along each axis.
    Subsample,
    /// Mean over complete k × k blocks of fine sites.
    BlockAverage,
}

#[derive(Clone, Debug)]
pub struct FineCoarsePair {
    pub fine: SynthDataset,
    pub coarse: HourlyField,
    /// Fine-site indices of each coarse site (one for subsampling, k² for
    /// block averages).
    pub members: Vec<Vec<usize>>,
}

/// A fine dataset generated at `fine_spacing` and its coarse counterpart.
/// `coarse_spacing` must be an integer multiple (at least 2) of
/// `fine_spacing`.
pub fn fine_coarse_pair(config: &SynthConfig, fine_spacing: f64, coarse_spacing: f64, mode: CoarseMode) -> Result<FineCoarsePair> {
    if !(fine_spacing > 0.0 && coarse_spacing > 0.0) {
        return Err(Error::Argument("spacings must be positive".into()));
    }
    let ratio = coarse_spacing / fine_spacing;
    let k = ratio.round();
    if (ratio - k).abs() > 1e-6 || k < 2.0 {
        return Err(Error::Argument(format!(
            "coarse spacing {coarse_spacing} km is not an integer multiple (≥ 2) of fine spacing {fine_spacing} km"
        )));
    }
    let k = k as usize;
    let cfg = SynthConfig {
        spacing_km: fine_spacing,
        ..config.clone()
    };
    if cfg.nx < 2 * k || cfg.ny < 2 * k {
        return Err(Error::Argument(format!(
            "a {}x{} fine grid is too small for a {k}:1 coarse grid",
            cfg.nx, cfg.ny
        )));
    }
    let fine = generate(&cfg)?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    let members: Vec<Vec<usize>> = match mode {
        CoarseMode::Subsample => (0..ny)
            .step_by(k)
            .flat_map(|iy| (0..nx).step_by(k).map(move |ix| vec![iy * nx + ix]))
            .collect(),
        CoarseMode::BlockAverage => (0..ny / k)
            .flat_map(|by| {
                (0..nx / k).map(move |bx| {
                    (0..k)
                        .flat_map(|dy| (0..k).map(move |dx| (by * k + dy) * nx + bx * k + dx))
                        .collect()
                })
            })
            .collect(),
    };
    let fsites = fine.truth.sites();
    let sites: Vec<Site> = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let inv = 1.0 / m.len() as f64;
            Site {
                id: i as u32,
                lon: m.iter().map(|&s| fsites.site(s).lon).sum::<f64>() * inv,
                lat: m.iter().map(|&s| fsites.site(s).lat).sum::<f64>() * inv,
            }
        })
        .collect();
    let grid = SiteGrid::new(sites, coarse_spacing)?;
    let nd = fine.truth.n_days();
    let mut values = vec![0.0; members.len() * nd * HOURS];
    for (c, m) in members.iter().enumerate() {
        for d in 0..nd {
            for h in 0..HOURS {
                let v = m.iter().map(|&s| fine.truth.get(s, d, h)).sum::<f64>() / m.len() as f64;
                values[(c * nd + d) * HOURS + h] = v;
            }
        }
    }
    let coarse = HourlyField::from_values(grid, fine.truth.calendar().clone(), values)?;
    Ok(FineCoarsePair { fine, coarse, members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            nx: 5,
            ny: 4,
            n_days: 6,
            mode_sd: vec![0.0; 4],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn bump_integrates_to_one() {
        let b = Bump { center_h: 12.0, half_width_h: 6.5 };
        for (beta, tau) in [(0.0, 1.0), (0.3, 0.95), (-0.4, 1.08)] {
            let s: f64 = b.slot_integrals(beta, tau).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
        let mut acc = 0.0;
        let n = 200_000;
        for i in 0..n {
            let x = 5.5 + 13.0 * (i as f64 + 0.5) / n as f64;
            acc += b.density(x) * 13.0 / n as f64;
        }
        assert!((acc - 1.0).abs() < 1e-8);
        assert!((b.cdf(12.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn basis_is_orthonormal_and_sums_to_zero() {
        let b = Bump { center_h: 12.0, half_width_h: 6.5 };
        let phi = planted_basis(&b, 4);
        let t = b.slot_integrals(0.0, 1.0);
        for (i, p) in phi.iter().enumerate() {
            assert!(p.iter().sum::<f64>().abs() < 1e-12);
            assert!(p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-12);
            for (k, q) in phi.iter().enumerate() {
                let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
                assert!((dot - if i == k { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            assert!(p[..5].iter().chain(&p[19..]).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn noise_free_truth_is_warped_template_times_total() {
        let ds = generate(&quiet()).unwrap();
        let b = Bump { center_h: 12.0, half_width_h: 6.5 };
        for (s, st) in ds.params.sites.iter().enumerate() {
            let shape = b.slot_integrals(st.beta, st.tau);
            for d in 0..ds.truth.n_days() {
                let g = ds.daily.get(s, d);
                for h in 0..HOURS {
                    assert!((ds.truth.get(s, d, h) - g * shape[h]).abs() < 1e-9 * g.max(1.0));
                }
            }
        }
    }

    #[test]
    fn daily_is_hour_sum_and_seed_reproducible() {
        let cfg = SynthConfig { nx: 6, ny: 5, n_days: 8, noise_frac: 0.01, ..SynthConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.truth.values(), b.truth.values());
        assert_eq!(a.daily.values(), b.daily.values());
        for s in 0..a.truth.n_sites() {
            for d in 0..a.truth.n_days() {
                assert_eq!(a.daily.get(s, d), a.truth.profile(s, d).iter().sum::<f64>());
            }
        }
        let c = generate(&SynthConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.truth.values(), c.truth.values());
        assert!(a.truth.values().iter().all(|v| *v >= 0.0));
        assert_eq!(a.params.class_counts.iter().sum::<usize>(), 30 * 8);
    }

    #[test]
    fn clear_days_pass_the_clearsky_rule() {
        let ds = generate(&SynthConfig { nx: 6, ny: 6, n_days: 20, ..SynthConfig::default() }).unwrap();
        let nd = ds.truth.n_days();
        let mut n_clear = 0;
        for s in 0..ds.truth.n_sites() {
            for d in 0..nd {
                if ds.classes[s * nd + d] == 2 {
                    n_clear += 1;
                    let cs: f64 = ds.clearsky.profile(s, d).iter().sum();
                    assert!(ds.daily.get(s, d) / cs >= 0.98);
                }
            }
        }
        assert!(n_clear > 30);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SynthConfig { nx: 0, ..quiet() }).is_err());
        assert!(generate(&SynthConfig { class_weights: [0.5, 0.5, 0.5], ..quiet() }).is_err());
        assert!(generate(&SynthConfig { gps: vec![], ..quiet() }).is_err());
        assert!(SynthConfig::preset("huge").is_err());
    }

    #[test]
    fn coarse_modes() {
        let cfg = SynthConfig { nx: 8, ny: 6, n_days: 3, ..SynthConfig::default() };
        let p = fine_coarse_pair(&cfg, 10.0, 20.0, CoarseMode::Subsample).unwrap();
        assert_eq!(p.coarse.n_sites(), 12);
        for (c, m) in p.members.iter().enumerate() {
            assert_eq!(p.coarse.profile(c, 1), p.fine.truth.profile(m[0], 1));
        }
        let p = fine_coarse_pair(&cfg, 10.0, 20.0, CoarseMode::BlockAverage).unwrap();
        assert_eq!(p.coarse.n_sites(), 12);
        let m = &p.members[5];
        let mean = m.iter().map(|&s| p.fine.truth.get(s, 2, 12)).sum::<f64>() / 4.0;
        assert!((p.coarse.get(5, 2, 12) - mean).abs() < 1e-9);
        assert!(fine_coarse_pair(&cfg, 10.0, 25.0, CoarseMode::Subsample).is_err());
    }

    #[test]
    fn write_round_trips() {
        let ds = generate(&quiet()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("truth.params")).unwrap();
        let back: TruthParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ds.params);
        let daily = crate::datamodel::load_daily(dir.path().join("daily.csv")).unwrap();
        assert_eq!(daily.values(), ds.daily.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn slot_integrals_are_a_partition(beta in -0.5f64..0.5, tau in 0.9f64..1.1, w in 4.0f64..7.0) {
            let b = Bump { center_h: 12.0, half_width_h: w };
            let s = b.slot_integrals(beta, tau);
            prop_assert!(s.iter().all(|v| *v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

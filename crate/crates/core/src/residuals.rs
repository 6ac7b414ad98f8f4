//! Residuals from the template trend, their SVD basis, and variances of the
//! basis coefficients conditional on the daily total.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DailyField, ProfileMatrix, RowMeta, HOURS};
use crate::error::{Error, Result};
use crate::fpca::sorted_svd;
use crate::template::{DiurnalTemplate, TemplateFit};

/// Minimum number of coefficients per conditional-variance bin.
pub const MIN_BIN_COUNT: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBasis {
    pub month: u32,
    /// `24 × J`, orthonormal columns.
    pub phi: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl ResidualBasis {
    pub fn n_modes(&self) -> usize {
        self.phi.ncols()
    }
}

/// `E = X − GHI · T(·; β, τ)` row by row, with the same row metadata as `x`.
pub fn compute_residuals(
    x: &ProfileMatrix,
    daily: &DailyField,
    t: &DiurnalTemplate,
    fit: &TemplateFit,
) -> Result<ProfileMatrix> {
    let params: HashMap<u32, (f64, f64)> = fit.sites.iter().map(|s| (s.site_id, (s.beta, s.tau))).collect();
    let mut profiles: HashMap<usize, [f64; HOURS]> = HashMap::new();
    let mut e = x.clone();
    for (r, m) in x.rows.iter().enumerate() {
        let prof = match profiles.get(&m.site) {
            Some(p) => *p,
            None => {
                let id = daily.sites().site(m.site).id;
                let (b, ta) = params
                    .get(&id)
                    .ok_or_else(|| Error::Lookup(format!("site {id} has no template parameters")))?;
                let p = t.slot_profile(*b, *ta)?;
                profiles.insert(m.site, p);
                p
            }
        };
        let g = daily.get(m.site, m.day);
        for h in 0..HOURS {
            e.x[(r, h)] -= g * prof[h];
        }
    }
    Ok(e)
}

/// Uncentered SVD of `E`; returns the first `j` modes and the `k × j`
/// coefficient matrix `E · φ`.
pub fn residual_svd(e: &ProfileMatrix, j: usize) -> Result<(ResidualBasis, DMatrix<f64>)> {
    if !(1..=HOURS).contains(&j) {
        return Err(Error::Argument(format!("number of residual modes must be in 1..=24, got {j}")));
    }
    if e.n_rows() < HOURS {
        return Err(Error::InsufficientData(format!(
            "residual SVD needs at least {HOURS} profiles, got {}",
            e.n_rows()
        )));
    }
    let (_, sv, v) = sorted_svd(&e.x)?;
    let phi = v.columns(0, j).into_owned();
    let scores = &e.x * &phi;
    let month = 0;
    Ok((
        ResidualBasis {
            month,
            phi,
            singular_values: sv[..j].to_vec(),
        },
        scores,
    ))
}

/// How standardized coefficients relate to raw ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `u* = u / σ`.
    #[default]
    StdDev,
    /// `u* = u / σ²`, the formula taken literally.
    LiteralVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVarianceTable {
    /// Interior breakpoints of daily GHI (Wh/m²); the outer bins are open.
    pub bin_edges: Vec<f64>,
    /// `n_bins × J` coefficient variances.
    pub sigma2: DMatrix<f64>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub scaling: Scaling,
}

impl ConditionalVarianceTable {
    pub fn n_bins(&self) -> usize {
        self.bin_edges.len() + 1
    }

    pub fn bin_of(&self, ghi: f64) -> usize {
        self.bin_edges.partition_point(|e| *e <= ghi)
    }

    /// Divisor used by [`standardize`] for coefficient `j` at daily total `ghi`.
    pub fn scale(&self, ghi: f64, j: usize) -> f64 {
        let s2 = self.sigma2[(self.bin_of(ghi), j)];
        match self.scaling {
            Scaling::StdDev => s2.sqrt(),
            Scaling::LiteralVariance => s2,
        }
    }
}

/// Equal-count bins of the daily totals with the coefficient variance (mean
/// fixed at zero) of every mode in every bin. Bins with fewer than
/// [`MIN_BIN_COUNT`] members are merged into their smaller neighbour.
pub fn fit_conditional_variance(
    scores: &DMatrix<f64>,
    daily: &DailyField,
    rows: &[RowMeta],
    n_bins: usize,
) -> Result<ConditionalVarianceTable> {
    let k = rows.len();
    if scores.nrows() != k {
        return Err(Error::Argument("score rows do not match row metadata".into()));
    }
    if n_bins == 0 {
        return Err(Error::Argument("n_bins must be positive".into()));
    }
    if k < MIN_BIN_COUNT {
        return Err(Error::InsufficientData(format!(
            "conditional variance needs at least {MIN_BIN_COUNT} coefficients, got {k}"
        )));
    }
    let ghi: Vec<f64> = rows.iter().map(|m| daily.get(m.site, m.day)).collect();
    if ghi.iter().any(|g| !g.is_finite()) {
        return Err(Error::Integrity("missing daily total for a residual row".into()));
    }
    let mut sorted = ghi.clone();
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = Vec::new();
    for b in 1..n_bins {
        let i = b * k / n_bins;
        if i == 0 || i >= k {
            continue;
        }
        let e = 0.5 * (sorted[i - 1] + sorted[i]);
        if edges.last().is_none_or(|l| e > *l) {
            edges.push(e);
        }
    }
    let count = |edges: &[f64]| {
        let mut c = vec![0usize; edges.len() + 1];
        for g in &ghi {
            c[edges.partition_point(|e| *e <= *g)] += 1;
        }
        c
    };
    let mut counts = count(&edges);
    while let Some(b) = (0..counts.len()).find(|&b| counts[b] < MIN_BIN_COUNT) {
        if counts.len() == 1 {
            break;
        }
        let merge_left = b == counts.len() - 1 || (b > 0 && counts[b - 1] <= counts[b + 1]);
        let edge = if merge_left { b - 1 } else { b };
        log::warn!(
            "variance bin {b} has {} coefficients; merging with its {} neighbour",
            counts[b],
            if merge_left { "lower" } else { "upper" }
        );
        edges.remove(edge);
        counts = count(&edges);
    }
    let j = scores.ncols();
    let mut sigma2 = DMatrix::zeros(edges.len() + 1, j);
    for (r, g) in ghi.iter().enumerate() {
        let b = edges.partition_point(|e| *e <= *g);
        for c in 0..j {
            sigma2[(b, c)] += scores[(r, c)] * scores[(r, c)];
        }
    }
    for b in 0..counts.len() {
        for c in 0..j {
            sigma2[(b, c)] /= counts[b] as f64;
        }
    }
    Ok(ConditionalVarianceTable {
        bin_edges: edges,
        sigma2,
        counts,
        scaling: Scaling::StdDev,
    })
}

/// `u* = u / scale(GHI)` for every coefficient.
pub fn standardize(
    scores: &DMatrix<f64>,
    table: &ConditionalVarianceTable,
    daily: &DailyField,
    rows: &[RowMeta],
) -> Result<DMatrix<f64>> {
    let mut out = scores.clone();
    for (r, m) in rows.iter().enumerate() {
        let g = daily.get(m.site, m.day);
        for c in 0..scores.ncols() {
            let s = table.scale(g, c);
            let u = scores[(r, c)];
            out[(r, c)] = if s > 0.0 {
                u / s
            } else if u == 0.0 {
                0.0
            } else {
                return Err(Error::Numeric(format!(
                    "zero variance in bin {} for mode {} with a non-zero coefficient",
                    table.bin_of(g),
                    c + 1
                )));
            };
        }
    }
    Ok(out)
}

/// Inverse of [`standardize`].
pub fn unstandardize(
    ustar: &DMatrix<f64>,
    table: &ConditionalVarianceTable,
    daily: &DailyField,
    rows: &[RowMeta],
) -> DMatrix<f64> {
    let mut out = ustar.clone();
    for (r, m) in rows.iter().enumerate() {
        let g = daily.get(m.site, m.day);
        for c in 0..ustar.ncols() {
            out[(r, c)] *= table.scale(g, c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{CalendarIndex, SiteGrid};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn daily_ramp(n_sites: usize, n_days: usize) -> (DailyField, Vec<RowMeta>) {
        let sites = SiteGrid::regular(0.0, 0.0, n_sites, 1, 10.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), n_days);
        let mut v = Vec::new();
        let mut rows = Vec::new();
        for s in 0..n_sites {
            for d in 0..n_days {
                v.push(1000.0 + (s * n_days + d) as f64);
                rows.push(RowMeta { site: s, day: d });
            }
        }
        (DailyField::from_values(sites, cal, v).unwrap(), rows)
    }

    #[test]
    fn rank_two_tail_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: DMatrix<f64> = DMatrix::from_fn(60, 2, |_, _| rng.random::<f64>() - 0.5);
        let b: DMatrix<f64> = DMatrix::from_fn(2, 24, |_, _| rng.random::<f64>() - 0.5);
        let m = &a * &b;
        let rows: Vec<RowMeta> = (0..60).map(|i| RowMeta { site: i, day: 0 }).collect();
        let e = ProfileMatrix::from_rows(rows, m.transpose().as_slice());
        let (basis, scores) = residual_svd(&e, 4).unwrap();
        assert!(basis.singular_values[2] < 1e-8 && basis.singular_values[3] < 1e-8);
        let rec = &scores * basis.phi.transpose();
        assert!((rec - &e.x).norm() < 1e-9);
        let g = basis.phi.transpose() * &basis.phi;
        assert!((g - DMatrix::identity(4, 4)).abs().max() < 1e-8);
        assert!(matches!(residual_svd(&e, 0), Err(Error::Argument(_))));
        assert!(matches!(residual_svd(&e, 25), Err(Error::Argument(_))));
    }

    #[test]
    fn eckart_young_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: DMatrix<f64> = DMatrix::from_fn(100, 24, |_, _| rng.sample(StandardNormal));
        let rows: Vec<RowMeta> = (0..100).map(|i| RowMeta { site: i, day: 0 }).collect();
        let e = ProfileMatrix::from_rows(rows, m.transpose().as_slice());
        let (_, all) = (0, sorted_svd(&m).unwrap().1);
        let (basis, scores) = residual_svd(&e, 4).unwrap();
        let err = (&e.x - &scores * basis.phi.transpose()).norm();
        let tail: f64 = all[4..].iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-8);
    }

    #[test]
    fn known_normal_variance() {
        let (daily, rows) = daily_ramp(6, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores = DMatrix::from_fn(rows.len(), 2, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let t = fit_conditional_variance(&scores, &daily, &rows, 6).unwrap();
        assert_eq!(t.n_bins(), 6);
        assert!(t.counts.iter().all(|c| *c == 500));
        let n = 500.0f64;
        for b in 0..6 {
            for j in 0..2 {
                assert!((t.sigma2[(b, j)] - 4.0).abs() <= 3.0 * 4.0 * (2.0 / (n - 1.0)).sqrt());
            }
        }
        let z = standardize(&scores, &t, &daily, &rows).unwrap();
        let back = unstandardize(&z, &t, &daily, &rows);
        assert!((back - &scores).abs().max() < 1e-12);
        for b in 0..6 {
            let idx: Vec<usize> = (0..rows.len())
                .filter(|&r| t.bin_of(daily.get(rows[r].site, rows[r].day)) == b)
                .collect();
            let v: f64 = idx.iter().map(|&r| z[(r, 0)].powi(2)).sum::<f64>() / idx.len() as f64;
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_and_zero_bins() {
        let (daily, rows) = daily_ramp(2, 100);
        let scores = DMatrix::zeros(rows.len(), 3);
        let t = fit_conditional_variance(&scores, &daily, &rows, 6).unwrap();
        assert!(t.sigma2.iter().all(|v| *v == 0.0));
        let z = standardize(&scores, &t, &daily, &rows).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let mut bad = scores.clone();
        bad[(0, 0)] = 1.0;
        let t2 = ConditionalVarianceTable {
            sigma2: DMatrix::zeros(t.n_bins(), 3),
            ..t.clone()
        };
        assert!(matches!(standardize(&bad, &t2, &daily, &rows), Err(Error::Numeric(_))));
    }

    #[test]
    fn small_bins_are_merged() {
        let (daily, rows) = daily_ramp(1, 100);
        let scores = DMatrix::from_element(rows.len(), 1, 1.0);
        let t = fit_conditional_variance(&scores, &daily, &rows, 6).unwrap();
        assert!(t.n_bins() <= 3);
        assert!(t.counts.iter().all(|c| *c >= MIN_BIN_COUNT));
        assert_eq!(t.counts.iter().sum::<usize>(), 100);
    }

    #[test]
    fn literal_variance_scaling() {
        let (daily, rows) = daily_ramp(2, 100);
        let scores = DMatrix::from_element(rows.len(), 1, 3.0);
        let mut t = fit_conditional_variance(&scores, &daily, &rows, 2).unwrap();
        t.scaling = Scaling::LiteralVariance;
        let z = standardize(&scores, &t, &daily, &rows).unwrap();
        assert!((z[(0, 0)] - 3.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn residuals_shift_linearly() {
        use crate::template::{DiurnalTemplate, SiteParams};
        let mut slots = [0.0; HOURS];
        for (h, s) in slots.iter_mut().enumerate().take(18).skip(6) {
            *s = ((h as f64 - 5.5) * std::f64::consts::PI / 12.0).sin();
        }
        let t = DiurnalTemplate::from_slot_values(1, &slots, None).unwrap();
        let (daily, rows) = daily_ramp(2, 3);
        let fit = TemplateFit {
            month: 1,
            sites: (0..2)
                .map(|s| SiteParams {
                    site_id: daily.sites().site(s).id,
                    lon: 0.0,
                    lat: 0.0,
                    beta: 0.1 * s as f64,
                    tau: 1.0,
                    converged: true,
                    imputed: false,
                    iterations: 0,
                    objective: 0.0,
                    n_profiles: 3,
                })
                .collect(),
            gamma_beta: None,
            gamma_tau: None,
        };
        let mut data = Vec::new();
        for m in &rows {
            let p = t.slot_profile(0.1 * m.site as f64, 1.0).unwrap();
            data.extend(p.iter().map(|v| v * daily.get(m.site, m.day)));
        }
        let x = ProfileMatrix::from_rows(rows.clone(), &data);
        let e = compute_residuals(&x, &daily, &t, &fit).unwrap();
        assert!(e.x.abs().max() < 1e-9);
        let w: Vec<f64> = (0..HOURS).map(|h| h as f64 * 0.5 - 3.0).collect();
        let mut shifted = x.clone();
        for r in 0..x.n_rows() {
            for h in 0..HOURS {
                shifted.x[(r, h)] += w[h];
            }
        }
        let e2 = compute_residuals(&shifted, &daily, &t, &fit).unwrap();
        for r in 0..x.n_rows() {
            for h in 0..HOURS {
                assert!((e2.x[(r, h)] - e.x[(r, h)] - w[h]).abs() < 1e-9);
            }
        }
        let mut partial = fit.clone();
        partial.sites.pop();
        assert!(matches!(compute_residuals(&x, &daily, &t, &partial), Err(Error::Lookup(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_coefficient_in_one_bin(seed in 0u64..1000, n_bins in 1usize..9) {
            let (daily, rows) = daily_ramp(3, 80);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = DMatrix::from_fn(rows.len(), 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let t = fit_conditional_variance(&scores, &daily, &rows, n_bins).unwrap();
            prop_assert!(t.bin_edges.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(t.sigma2.iter().all(|v| *v >= 0.0));
            prop_assert_eq!(t.counts.iter().sum::<usize>(), rows.len());
            let z = standardize(&scores, &t, &daily, &rows).unwrap();
            let back = unstandardize(&z, &t, &daily, &rows);
            prop_assert!((back - &scores).abs().max() < 1e-12);
        }
    }
}

//! Hourly simulation from the fitted components, physical clamping and
//! optional daily-total rebalancing.

use std::collections::HashMap;

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DailyField, HourlyField, HOURS};
use crate::error::{Error, Result};
use crate::residuals::{ConditionalVarianceTable, ResidualBasis};
use crate::seeds;
use crate::spatialfield::{FieldSampler, GpModel};
use crate::template::{predict_params, DiurnalTemplate, TemplateFit};

/// Observed hourly range per month, used to keep simulations plausible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityEnvelope {
    pub months: Vec<MonthEnvelope>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthEnvelope {
    pub month: u32,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl PlausibilityEnvelope {
    /// Per-(month, hour) min and max over all non-missing values.
    pub fn from_field(field: &HourlyField) -> Self {
        let mut acc: HashMap<u32, ([f64; HOURS], [f64; HOURS])> = HashMap::new();
        for d in 0..field.n_days() {
            let m = field.calendar().month_of(d);
            let e = acc
                .entry(m)
                .or_insert(([f64::INFINITY; HOURS], [f64::NEG_INFINITY; HOURS]));
            for s in 0..field.n_sites() {
                for (h, v) in field.profile(s, d).iter().enumerate() {
                    if v.is_finite() {
                        e.0[h] = e.0[h].min(*v);
                        e.1[h] = e.1[h].max(*v);
                    }
                }
            }
        }
        let mut months: Vec<MonthEnvelope> = acc
            .into_iter()
            .map(|(month, (lo, hi))| {
                // Hours never observed stay unconstrained below and closed above.
                let min = lo.iter().map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
                let max = hi.iter().map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
                MonthEnvelope { month, min, max }
            })
            .collect();
        months.sort_by_key(|m| m.month);
        Self { months }
    }

    pub fn month(&self, month: u32) -> Option<&MonthEnvelope> {
        self.months.iter().find(|m| m.month == month)
    }

    /// Hours (0-based) where the month's envelope maximum is zero.
    pub fn night_hours(&self, month: u32) -> Option<Vec<usize>> {
        self.month(month)
            .map(|m| (0..HOURS).filter(|&h| m.max[h] == 0.0).collect())
    }
}

/// Sets every value outside its `[min, max]` to the violated bound and
/// returns the number of changed cells.
pub fn clamp(field: &mut HourlyField, env: &PlausibilityEnvelope) -> Result<usize> {
    let months: Vec<u32> = (0..field.n_days()).map(|d| field.calendar().month_of(d)).collect();
    let mut count = 0;
    for s in 0..field.n_sites() {
        for (d, m) in months.iter().enumerate() {
            let e = env
                .month(*m)
                .ok_or_else(|| Error::Config(format!("plausibility envelope has no month {m}")))?;
            count += clamp_profile(field.profile_mut(s, d), e);
        }
    }
    Ok(count)
}

fn clamp_profile(p: &mut [f64], e: &MonthEnvelope) -> usize {
    let mut count = 0;
    for (h, v) in p.iter_mut().enumerate() {
        if *v < e.min[h] {
            *v = e.min[h];
            count += 1;
        } else if *v > e.max[h] {
            *v = e.max[h];
            count += 1;
        }
    }
    count
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RebalanceReport {
    /// Largest `|Σ_h y − GHI| / GHI` right after scaling.
    pub max_rel_error_pre_clamp: f64,
    /// The same after clamping once more (equal to the above without an envelope).
    pub max_rel_error_post_clamp: f64,
    pub clamped_cells: usize,
}

fn rel_error(sum: f64, target: f64) -> f64 {
    if target == 0.0 {
        sum.abs()
    } else {
        ((sum - target) / target).abs()
    }
}

/// Scales each site-day so its hours sum to the daily total, then clamps
/// once to `env` when given. The remaining discrepancy is reported, not
/// iterated away.
pub fn rebalance_daily_totals(
    field: &mut HourlyField,
    daily: &DailyField,
    env: Option<&PlausibilityEnvelope>,
) -> Result<RebalanceReport> {
    if daily.sites().len() != field.n_sites() || daily.calendar() != field.calendar() {
        return Err(Error::Argument("daily field does not match the hourly field".into()));
    }
    let mut report = RebalanceReport::default();
    for s in 0..field.n_sites() {
        for d in 0..field.n_days() {
            let target = daily.get(s, d);
            let p = field.profile_mut(s, d);
            let sum: f64 = p.iter().sum();
            if sum > 0.0 {
                let k = target / sum;
                p.iter_mut().for_each(|v| *v *= k);
            } else if target != 0.0 {
                return Err(Error::Numeric(format!(
                    "site {s} day {d}: hour-sum {sum} cannot be rescaled to {target}"
                )));
            }
            let after: f64 = p.iter().sum();
            report.max_rel_error_pre_clamp = report.max_rel_error_pre_clamp.max(rel_error(after, target));
        }
    }
    match env {
        Some(env) => {
            report.clamped_cells = clamp(field, env)?;
            for s in 0..field.n_sites() {
                for d in 0..field.n_days() {
                    let sum: f64 = field.profile(s, d).iter().sum();
                    report.max_rel_error_post_clamp =
                        report.max_rel_error_post_clamp.max(rel_error(sum, daily.get(s, d)));
                }
            }
        }
        None => report.max_rel_error_post_clamp = report.max_rel_error_pre_clamp,
    }
    Ok(report)
}

/// All fitted components for one month (and one tile).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthModel {
    pub month: u32,
    pub template: DiurnalTemplate,
    pub fit: TemplateFit,
    pub basis: ResidualBasis,
    pub variance: ConditionalVarianceTable,
    pub gps: Vec<GpModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimulationOptions {
    pub rebalance: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self { rebalance: true }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub field: HourlyField,
    pub clamped_cells: usize,
    pub rebalance: Option<RebalanceReport>,
    /// Site-days whose simulated profile clamped to all zeros on a day with
    /// positive total; the deterministic trend was used instead.
    pub trend_fallbacks: usize,
}

/// Per-site `(β, τ)`: fitted value when the site was in the fit, otherwise
/// the geographic-model prediction.
pub fn site_warps(fit: &TemplateFit, daily: &DailyField) -> Result<Vec<(f64, f64)>> {
    daily
        .sites()
        .sites()
        .iter()
        .map(|s| match fit.site(s.id) {
            Some(p) => Ok((p.beta, p.tau)),
            None => predict_params(fit, s.lon, s.lat)
                .map_err(|_| Error::Config(format!("no template parameters available for site {}", s.id))),
        })
        .collect()
}

/// Deterministic part `GHI(s, d) · T(h; β_s, τ_s)` of the model.
pub fn trend_field(daily: &DailyField, model: &MonthModel) -> Result<HourlyField> {
    let warps = site_warps(&model.fit, daily)?;
    let mut out = HourlyField::filled(daily.sites().clone(), daily.calendar().clone(), 0.0);
    for (s, (b, t)) in warps.iter().enumerate() {
        let prof = model.template.slot_profile(*b, *t)?;
        for d in 0..daily.calendar().len() {
            let g = daily.get(s, d);
            for (o, p) in out.profile_mut(s, d).iter_mut().zip(&prof) {
                *o = g * p;
            }
        }
    }
    Ok(out)
}

/// Draws hourly GHI for every site-day of `daily`.
///
/// Each day gets one field per residual mode from a stream keyed by
/// `(seed, date, mode)`, so a day's draw is the same whatever else is
/// simulated alongside it.
pub fn simulate_hourly(
    daily: &DailyField,
    model: &MonthModel,
    env: &PlausibilityEnvelope,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<Simulation> {
    let j = model.basis.n_modes();
    if model.gps.len() != j || model.variance.sigma2.ncols() != j {
        return Err(Error::Config(format!(
            "model has {j} residual modes but {} GP models and {} variance columns",
            model.gps.len(),
            model.variance.sigma2.ncols()
        )));
    }
    if daily.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Integrity("daily field has missing values".into()));
    }
    let sites = daily.sites();
    let cal = daily.calendar();
    let trend = trend_field(daily, model)?;
    let samplers: Vec<FieldSampler> = model
        .gps
        .iter()
        .map(|g| FieldSampler::new(g, sites))
        .collect::<Result<_>>()?;
    let envs: Vec<&MonthEnvelope> = (0..cal.len())
        .map(|d| {
            let m = cal.month_of(d);
            env.month(m)
                .ok_or_else(|| Error::Config(format!("plausibility envelope has no month {m}")))
        })
        .collect::<Result<_>>()?;
    let n = sites.len();
    let days: Vec<(Vec<f64>, usize, usize)> = (0..cal.len())
        .into_par_iter()
        .map(|d| {
            let ghi: Vec<f64> = (0..n).map(|s| daily.get(s, d)).collect();
            let key = cal.date(d).num_days_from_ce() as u64;
            let mut u = vec![vec![0.0; n]; j];
            for (c, sampler) in samplers.iter().enumerate() {
                let mut rng = seeds::rng(seed, &[seeds::tag::GP_FIELD, key, c as u64]);
                let ustar = sampler.draw(&ghi, &mut rng);
                u[c] = crate::spatialfield::unstandardize_field(&ustar, &model.variance, &ghi, c);
            }
            let mut vals = vec![0.0; n * HOURS];
            let (mut clamped, mut fallbacks) = (0, 0);
            for s in 0..n {
                let p = &mut vals[s * HOURS..(s + 1) * HOURS];
                p.copy_from_slice(trend.profile(s, d));
                for (c, uc) in u.iter().enumerate() {
                    for (h, v) in p.iter_mut().enumerate() {
                        *v += uc[s] * model.basis.phi[(h, c)];
                    }
                }
                clamped += clamp_profile(p, envs[d]);
                if opts.rebalance && ghi[s] > 0.0 && p.iter().sum::<f64>() <= 0.0 {
                    p.copy_from_slice(trend.profile(s, d));
                    fallbacks += 1;
                }
            }
            (vals, clamped, fallbacks)
        })
        .collect();
    let mut field = HourlyField::filled(sites.clone(), cal.clone(), 0.0);
    let (mut clamped_cells, mut trend_fallbacks) = (0, 0);
    for (d, (vals, c, f)) in days.into_iter().enumerate() {
        for s in 0..n {
            field.profile_mut(s, d).copy_from_slice(&vals[s * HOURS..(s + 1) * HOURS]);
        }
        clamped_cells += c;
        trend_fallbacks += f;
    }
    let rebalance = if opts.rebalance {
        Some(rebalance_daily_totals(&mut field, daily, Some(env))?)
    } else {
        None
    };
    Ok(Simulation {
        field,
        clamped_cells,
        rebalance,
        trend_fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{CalendarIndex, SiteGrid};
    use crate::residuals::Scaling;
    use crate::spatialfield::CovFamily;
    use crate::template::SiteParams;
    use chrono::NaiveDate;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump() -> [f64; HOURS] {
        let mut s = [0.0; HOURS];
        for (h, v) in s.iter_mut().enumerate().take(19).skip(5) {
            *v = ((h as f64 + 0.5 - 5.0) * std::f64::consts::PI / 14.0).sin().powi(2);
        }
        s
    }

    fn setup(sill: f64, nugget: f64) -> (DailyField, MonthModel, PlausibilityEnvelope) {
        let sites = SiteGrid::regular(-100.0, 40.0, 3, 3, 20.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let daily = DailyField::from_values(
            sites.clone(),
            cal,
            (0..45).map(|_| 3000.0 + 4000.0 * rng.random::<f64>()).collect(),
        )
        .unwrap();
        let template = DiurnalTemplate::from_slot_values(6, &bump(), None).unwrap();
        let fit = TemplateFit {
            month: 6,
            sites: sites
                .sites()
                .iter()
                .map(|s| SiteParams {
                    site_id: s.id,
                    lon: s.lon,
                    lat: s.lat,
                    beta: 0.01 * s.id as f64,
                    tau: 1.0,
                    converged: true,
                    imputed: false,
                    iterations: 1,
                    objective: 0.0,
                    n_profiles: 10,
                })
                .collect(),
            gamma_beta: None,
            gamma_tau: None,
        };
        let mut phi = DMatrix::zeros(HOURS, 2);
        phi[(11, 0)] = 1.0;
        phi[(13, 1)] = 1.0;
        let gp = |j| GpModel {
            j,
            beta_cov: 0.0,
            beta_cov_se: 0.0,
            cov_family: CovFamily::Exponential,
            range_km: 50.0,
            sill,
            nugget,
            x_mean: 5000.0,
            x_sd: 1000.0,
            log_likelihood: 0.0,
            at_bound: vec![],
        };
        let model = MonthModel {
            month: 6,
            template,
            fit,
            basis: ResidualBasis {
                month: 6,
                phi,
                singular_values: vec![1.0, 0.5],
            },
            variance: ConditionalVarianceTable {
                bin_edges: vec![5000.0],
                sigma2: DMatrix::from_element(2, 2, 2500.0),
                counts: vec![30, 30],
                scaling: Scaling::StdDev,
            },
            gps: vec![gp(1), gp(2)],
        };
        let mut env = PlausibilityEnvelope::default();
        let mut max = vec![0.0; HOURS];
        for v in max.iter_mut().take(19).skip(5) {
            *v = 1e4;
        }
        env.months.push(MonthEnvelope {
            month: 6,
            min: vec![0.0; HOURS],
            max,
        });
        (daily, model, env)
    }

    #[test]
    fn noise_free_equals_trend() {
        let (daily, model, env) = setup(0.0, 0.0);
        let sim = simulate_hourly(&daily, &model, &env, 3, &SimulationOptions { rebalance: false }).unwrap();
        let trend = trend_field(&daily, &model).unwrap();
        assert_eq!(sim.field.values(), trend.values());
        assert_eq!(sim.clamped_cells, 0);
        for s in 0..9 {
            for d in 0..5 {
                let sum: f64 = sim.field.profile(s, d).iter().sum();
                assert!((sum / daily.get(s, d) - 1.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn seeded_and_rebalanced() {
        let (daily, model, env) = setup(1.0, 0.1);
        let opts = SimulationOptions::default();
        let a = simulate_hourly(&daily, &model, &env, 3, &opts).unwrap();
        let b = simulate_hourly(&daily, &model, &env, 3, &opts).unwrap();
        assert_eq!(a.field.values(), b.field.values());
        let c = simulate_hourly(&daily, &model, &env, 4, &opts).unwrap();
        assert_ne!(a.field.values(), c.field.values());
        let r = a.rebalance.unwrap();
        assert!(r.max_rel_error_pre_clamp <= 1e-9);
        assert!(a.field.values().iter().all(|v| *v >= 0.0));
        for s in 0..9 {
            for d in 0..5 {
                for h in (0..5).chain(19..24) {
                    assert_eq!(a.field.get(s, d, h), 0.0);
                }
            }
        }
    }

    #[test]
    fn missing_components_are_config_errors() {
        let (daily, mut model, env) = setup(1.0, 0.1);
        model.gps.pop();
        assert!(matches!(
            simulate_hourly(&daily, &model, &env, 1, &SimulationOptions::default()),
            Err(Error::Config(_))
        ));
        let (daily, model, _) = setup(1.0, 0.1);
        let empty = PlausibilityEnvelope::default();
        assert!(matches!(
            simulate_hourly(&daily, &model, &empty, 1, &SimulationOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clamp_bounds() {
        let sites = SiteGrid::regular(0.0, 0.0, 1, 1, 10.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), 1);
        let mut f = HourlyField::filled(sites, cal, 50.0);
        f.set(0, 0, 12, -5.0);
        f.set(0, 0, 13, 2000.0);
        let env = PlausibilityEnvelope {
            months: vec![MonthEnvelope {
                month: 6,
                min: vec![0.0; HOURS],
                max: vec![1000.0; HOURS],
            }],
        };
        assert_eq!(clamp(&mut f, &env).unwrap(), 2);
        assert_eq!(f.get(0, 0, 12), 0.0);
        assert_eq!(f.get(0, 0, 13), 1000.0);
        assert_eq!(f.get(0, 0, 14), 50.0);
    }

    #[test]
    fn planted_exceedances_counted() {
        let sites = SiteGrid::regular(0.0, 0.0, 10, 10, 10.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), 10);
        let mut f = HourlyField::filled(sites, cal, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut planted = 0;
        for v in f.values_mut() {
            if rng.random::<f64>() < 0.01 {
                *v = if rng.random::<bool>() { -1.0 } else { 501.0 };
                planted += 1;
            }
        }
        let env = PlausibilityEnvelope {
            months: vec![MonthEnvelope {
                month: 6,
                min: vec![0.0; HOURS],
                max: vec![500.0; HOURS],
            }],
        };
        assert!(planted > 0);
        assert_eq!(clamp(&mut f, &env).unwrap(), planted);
    }

    #[test]
    fn rebalance_arithmetic() {
        let sites = SiteGrid::regular(0.0, 0.0, 1, 1, 10.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), 1);
        let mut f = HourlyField::filled(sites.clone(), cal.clone(), 0.0);
        for h in 6..18 {
            f.set(0, 0, h, 220.0);
        }
        let daily = DailyField::from_values(sites.clone(), cal.clone(), vec![2400.0]).unwrap();
        let r = rebalance_daily_totals(&mut f, &daily, None).unwrap();
        assert!((f.get(0, 0, 6) - 220.0 * 2400.0 / 2640.0).abs() < 1e-12);
        assert!(r.max_rel_error_pre_clamp < 1e-12);
        let before = f.values().to_vec();
        rebalance_daily_totals(&mut f, &daily, None).unwrap();
        for (a, b) in before.iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut zero = HourlyField::filled(sites, cal, 0.0);
        assert!(matches!(rebalance_daily_totals(&mut zero, &daily, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn envelope_from_training() {
        let sites = SiteGrid::regular(0.0, 0.0, 2, 1, 10.0).unwrap();
        let cal = CalendarIndex::contiguous(NaiveDate::from_ymd_opt(2020, 6, 29).unwrap(), 3);
        let mut f = HourlyField::filled(sites, cal, 0.0);
        f.set(0, 0, 12, 700.0);
        f.set(1, 1, 12, 800.0);
        f.set(1, 2, 12, 300.0);
        let env = PlausibilityEnvelope::from_field(&f);
        assert_eq!(env.months.len(), 2);
        assert_eq!(env.month(6).unwrap().max[12], 800.0);
        assert_eq!(env.month(7).unwrap().max[12], 300.0);
        assert_eq!(env.night_hours(6).unwrap().len(), 23);
    }
}

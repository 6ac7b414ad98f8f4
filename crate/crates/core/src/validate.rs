//! Comparison metrics between an observed and a simulated hourly field:
//! clearsky index, hourly quantiles, time derivatives, daily totals and
//! semivariograms, with a low-precision solar position for zenith filters.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DailyField, HourlyField, SiteGrid, HOURS, MISSING};
use crate::error::{Error, Result};
use crate::stats::{box_stats, fit_line, quantile_sorted, BoxStats};

/// Clearsky values at or below this (W/m²) give no clearsky index.
pub const KC_THRESHOLD: f64 = 10.0;
/// Zenith limit for the quantile comparisons.
pub const QQ_MAX_ZENITH: f64 = 80.0;
/// Minimum number of site pairs in a semivariogram lag bin.
pub const MIN_PAIRS: usize = 30;

/// `ghi / clearsky` where the clearsky value exceeds `threshold`.
pub fn clearsky_index(field: &HourlyField, clearsky: &HourlyField, threshold: f64) -> Result<HourlyField> {
    if !field.same_geometry(clearsky) {
        return Err(Error::Argument("clearsky field geometry differs".into()));
    }
    let mut out = field.clone();
    for (o, c) in out.values_mut().iter_mut().zip(clearsky.values()) {
        *o = if c.is_finite() && *c > threshold && o.is_finite() { *o / c } else { MISSING };
    }
    Ok(out)
}

fn spencer(date: NaiveDate) -> (f64, f64) {
    let g = 2.0 * PI * (date.ordinal() as f64 - 1.0) / 365.0;
    let decl = 0.006918 - 0.399912 * g.cos() + 0.070257 * g.sin() - 0.006758 * (2.0 * g).cos()
        + 0.000907 * (2.0 * g).sin()
        - 0.002697 * (3.0 * g).cos()
        + 0.00148 * (3.0 * g).sin();
    let eot_min = 229.18
        * (0.000075 + 0.001868 * g.cos() - 0.032077 * g.sin() - 0.014615 * (2.0 * g).cos()
            - 0.040849 * (2.0 * g).sin());
    (decl, eot_min)
}

/// Clock-to-solar-time offset in hours at the site's standard meridian.
fn solar_offset(lon: f64, date: NaiveDate) -> f64 {
    let (_, eot) = spencer(date);
    let meridian = 15.0 * (lon / 15.0).round();
    (4.0 * (lon - meridian) + eot) / 60.0
}

/// Clock hour (local standard time) of solar noon.
pub fn solar_noon(lon: f64, date: NaiveDate) -> f64 {
    12.0 - solar_offset(lon, date)
}

/// Solar zenith in degrees at clock hour `hour` (local standard time).
pub fn solar_zenith(lat: f64, lon: f64, date: NaiveDate, hour: f64) -> f64 {
    let (decl, _) = spencer(date);
    let omega = (15.0 * (hour + solar_offset(lon, date) - 12.0)).to_radians();
    let phi = lat.to_radians();
    let c = phi.sin() * decl.sin() + phi.cos() * decl.cos() * omega.cos();
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-cell flag, laid out like an [`HourlyField`]: true where the zenith at
/// the slot midpoint is below `max_zenith`.
pub fn zenith_mask(field: &HourlyField, max_zenith: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(field.values().len());
    for site in field.sites().sites() {
        for &date in field.calendar().dates() {
            for h in 0..HOURS {
                out.push(solar_zenith(site.lat, site.lon, date, h as f64 + 0.5) < max_zenith);
            }
        }
    }
    out
}

/// Errors unless both fields share sites and calendar; names the first differing site.
pub fn check_pair(obs: &HourlyField, sim: &HourlyField) -> Result<()> {
    if obs.sites() != sim.sites() {
        let (a, b) = (obs.sites().sites(), sim.sites().sites());
        let first = a
            .iter()
            .zip(b)
            .find(|(x, y)| x != y)
            .map(|(x, _)| x.id)
            .or_else(|| a.get(b.len()).or(b.get(a.len())).map(|s| s.id))
            .map_or_else(|| "spacing differs".to_string(), |id| format!("first mismatching site {id}"));
        return Err(Error::Argument(format!("observed and simulated grids differ: {first}")));
    }
    if obs.calendar() != sim.calendar() {
        return Err(Error::Argument("observed and simulated calendars differ".into()));
    }
    Ok(())
}

/// Cells usable for both fields: inside `mask` and finite in both.
fn shared_cells(obs: &HourlyField, sim: &HourlyField, mask: Option<&[bool]>) -> Vec<bool> {
    obs.values()
        .iter()
        .zip(sim.values())
        .enumerate()
        .map(|(i, (o, s))| o.is_finite() && s.is_finite() && mask.is_none_or(|m| m[i]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    /// Hour-ending label, or `None` for the pooled comparison.
    pub hour: Option<usize>,
    pub p: f64,
    pub observed: f64,
    pub simulated: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub metric: String,
    pub rows: Vec<QuantileRow>,
    pub max_gap: f64,
    pub notes: Vec<String>,
}

impl QuantileReport {
    /// Largest gap restricted to the given hour-ending labels.
    pub fn max_gap_for_hours(&self, hours: &[usize]) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.hour.is_some_and(|h| hours.contains(&h)))
            .map(|r| (r.observed - r.simulated).abs())
            .fold(0.0, f64::max)
    }
}

pub fn quantile_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Quantiles of observed against simulated values on the shared mask,
/// per hour or pooled across hours.
pub fn hourly_quantile_compare(
    metric: &str,
    obs: &HourlyField,
    sim: &HourlyField,
    mask: Option<&[bool]>,
    pooled: bool,
) -> Result<QuantileReport> {
    check_pair(obs, sim)?;
    let use_cell = shared_cells(obs, sim, mask);
    let mut groups: Vec<(Option<usize>, Vec<f64>, Vec<f64>)> = if pooled {
        vec![(None, Vec::new(), Vec::new())]
    } else {
        (1..=HOURS).map(|h| (Some(h), Vec::new(), Vec::new())).collect()
    };
    for (i, (o, s)) in obs.values().iter().zip(sim.values()).enumerate() {
        if use_cell[i] {
            let g = if pooled { 0 } else { i % HOURS };
            groups[g].1.push(*o);
            groups[g].2.push(*s);
        }
    }
    let ps = quantile_grid();
    let mut report = QuantileReport {
        metric: metric.to_string(),
        ..Default::default()
    };
    for (hour, mut o, mut s) in groups {
        if o.is_empty() {
            report.notes.push(format!("hour {} has no usable cells", hour.map_or(0, |h| h)));
            continue;
        }
        o.sort_by(f64::total_cmp);
        s.sort_by(f64::total_cmp);
        for &p in &ps {
            let (qo, qs) = (quantile_sorted(&o, p), quantile_sorted(&s, p));
            report.max_gap = report.max_gap.max((qo - qs).abs());
            report.rows.push(QuantileRow {
                hour,
                p,
                observed: qo,
                simulated: qs,
            });
        }
    }
    Ok(report)
}

/// Daylight flags laid out like an [`HourlyField`]: zenith below 90°.
pub fn daylight_mask(field: &HourlyField) -> Vec<bool> {
    zenith_mask(field, 90.0)
}

/// First differences `y(h+1) − y(h)` within each site-day where both
/// endpoints are flagged in `mask` and finite.
pub fn time_derivative(field: &HourlyField, mask: &[bool]) -> Vec<f64> {
    let v = field.values();
    let mut out = Vec::new();
    for start in (0..v.len()).step_by(HOURS) {
        for h in 0..HOURS - 1 {
            let (a, b) = (start + h, start + h + 1);
            if mask[a] && mask[b] && v[a].is_finite() && v[b].is_finite() {
                out.push(v[b] - v[a]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub observed: BoxStats,
    pub simulated: BoxStats,
}

/// Box summaries of observed and simulated derivatives on a shared mask.
pub fn derivative_compare(obs: &HourlyField, sim: &HourlyField, mask: &[bool]) -> Result<DerivativeReport> {
    check_pair(obs, sim)?;
    let shared = shared_cells(obs, sim, Some(mask));
    Ok(DerivativeReport {
        observed: box_stats(&time_derivative(obs, &shared)),
        simulated: box_stats(&time_derivative(sim, &shared)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyTotalReport {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub max_rel_deviation: f64,
    pub mean_rel_deviation: f64,
    /// `(site_id, date, observed, simulated)`.
    pub pairs: Vec<(u32, NaiveDate, f64, f64)>,
}

/// Observed daily totals against hour-sums of the simulation.
pub fn daily_total_compare(obs: &DailyField, sim: &HourlyField) -> Result<DailyTotalReport> {
    if obs.sites() != sim.sites() || obs.calendar() != sim.calendar() {
        return Err(Error::Argument("daily and hourly fields differ in geometry".into()));
    }
    let mut pairs = Vec::new();
    for (s, site) in obs.sites().sites().iter().enumerate() {
        for d in 0..obs.calendar().len() {
            let o = obs.get(s, d);
            let p = sim.profile(s, d);
            if o.is_finite() && p.iter().all(|v| v.is_finite()) {
                pairs.push((site.id, obs.calendar().date(d), o, p.iter().sum::<f64>()));
            }
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.3).collect();
    let line = fit_line(&xs, &ys);
    let rel: Vec<f64> = pairs
        .iter()
        .filter(|p| p.2 > 0.0)
        .map(|p| (p.3 - p.2) / p.2)
        .collect();
    Ok(DailyTotalReport {
        n: pairs.len(),
        slope: line.map_or(f64::NAN, |l| l.slope),
        intercept: line.map_or(f64::NAN, |l| l.intercept),
        max_rel_deviation: rel.iter().fold(0.0, |m, r| m.max(r.abs())),
        mean_rel_deviation: if rel.is_empty() { 0.0 } else { rel.iter().sum::<f64>() / rel.len() as f64 },
        pairs,
    })
}

/// Site pairs grouped into equal-width great-circle lag bins.
#[derive(Clone, Debug)]
pub struct LagBins {
    pub edges: Vec<f64>,
    pairs: Vec<Vec<(usize, usize)>>,
    mean_dist: Vec<f64>,
}

impl LagBins {
    /// `n_bins` bins up to half the largest pairwise distance.
    pub fn new(sites: &SiteGrid, n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Argument("need at least one lag bin".into()));
        }
        let n = sites.len();
        let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        let mut dmax: f64 = 0.0;
        for a in 0..n {
            for b in (a + 1)..n {
                let d = sites.distance_km(a, b);
                dmax = dmax.max(d);
                all.push((a, b, d));
            }
        }
        let maxlag = dmax / 2.0;
        let w = maxlag / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * w).collect();
        let mut pairs = vec![Vec::new(); n_bins];
        let mut sum = vec![0.0; n_bins];
        for (a, b, d) in all {
            if d > 0.0 && d <= maxlag {
                let i = ((d / w).ceil() as usize).clamp(1, n_bins) - 1;
                pairs[i].push((a, b));
                sum[i] += d;
            }
        }
        let mean_dist = sum.iter().zip(&pairs).map(|(s, p)| if p.is_empty() { f64::NAN } else { s / p.len() as f64 }).collect();
        Ok(Self { edges, pairs, mean_dist })
    }

    pub fn n_bins(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_pairs(&self, bin: usize) -> usize {
        self.pairs[bin].len()
    }

    pub fn mean_distance(&self, bin: usize) -> f64 {
        self.mean_dist[bin]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagValue {
    pub bin: usize,
    pub lag_km: f64,
    pub gamma: f64,
    pub n_pairs: usize,
}

/// Classical estimator `γ = mean ½ (v_a − v_b)²` per lag bin; bins with
/// fewer than [`MIN_PAIRS`] usable pairs are dropped.
pub fn semivariogram(values: &[f64], bins: &LagBins) -> Vec<LagValue> {
    let mut out = Vec::new();
    for (i, pairs) in bins.pairs.iter().enumerate() {
        let (mut s, mut n) = (0.0, 0usize);
        for &(a, b) in pairs {
            let (x, y) = (values[a], values[b]);
            if x.is_finite() && y.is_finite() {
                s += 0.5 * (x - y) * (x - y);
                n += 1;
            }
        }
        if n >= MIN_PAIRS {
            out.push(LagValue {
                bin: i,
                lag_km: bins.mean_dist[i],
                gamma: s / n as f64,
                n_pairs: n,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemivarianceRow {
    pub month: u32,
    /// Hour-ending label.
    pub hour: usize,
    pub lag_km: f64,
    pub observed: [f64; 3],
    pub simulated: [f64; 3],
    pub n_slices: usize,
}

/// 0.25, 0.5 and 0.75 quantiles across days of the per-slice semivariograms,
/// grouped by (month, hour), for both fields on matching cells.
pub fn semivariogram_compare(
    obs: &HourlyField,
    sim: &HourlyField,
    hours: &[usize],
    n_bins: usize,
) -> Result<(Vec<SemivarianceRow>, Vec<String>)> {
    check_pair(obs, sim)?;
    let bins = LagBins::new(obs.sites(), n_bins)?;
    let mut notes: Vec<String> = (0..bins.n_bins())
        .filter(|&b| bins.n_pairs(b) < MIN_PAIRS)
        .map(|b| format!("lag bin {b} has {} pairs and is dropped", bins.n_pairs(b)))
        .collect();
    let mut months: Vec<u32> = (0..obs.n_days()).map(|d| obs.calendar().month_of(d)).collect();
    months.sort_unstable();
    months.dedup();
    let n = obs.n_sites();
    let mut rows = Vec::new();
    for &m in &months {
        let days: Vec<usize> = (0..obs.n_days()).filter(|&d| obs.calendar().month_of(d) == m).collect();
        for &hour in hours {
            let h = hour - 1;
            let mut per_bin: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); bins.n_bins()];
            for &d in &days {
                let mut vo: Vec<f64> = (0..n).map(|s| obs.get(s, d, h)).collect();
                let mut vs: Vec<f64> = (0..n).map(|s| sim.get(s, d, h)).collect();
                for s in 0..n {
                    if !(vo[s].is_finite() && vs[s].is_finite()) {
                        vo[s] = MISSING;
                        vs[s] = MISSING;
                    }
                }
                for (lo, ls) in semivariogram(&vo, &bins).into_iter().zip(semivariogram(&vs, &bins)) {
                    per_bin[lo.bin].0.push(lo.gamma);
                    per_bin[ls.bin].1.push(ls.gamma);
                }
            }
            for (b, (mut go, mut gs)) in per_bin.into_iter().enumerate() {
                if go.is_empty() {
                    continue;
                }
                go.sort_by(f64::total_cmp);
                gs.sort_by(f64::total_cmp);
                let q = |v: &[f64]| [quantile_sorted(v, 0.25), quantile_sorted(v, 0.5), quantile_sorted(v, 0.75)];
                rows.push(SemivarianceRow {
                    month: m,
                    hour,
                    lag_km: bins.mean_distance(b),
                    observed: q(&go),
                    simulated: q(&gs),
                    n_slices: go.len(),
                });
            }
        }
    }
    notes.push(format!(
        "lag bins: {} equal-width bins up to {:.3} km (half the largest site separation)",
        bins.n_bins(),
        bins.edges.last().copied().unwrap_or(0.0)
    ));
    Ok((rows, notes))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

pub fn write_quantile_report(path: impl AsRef<Path>, r: &QuantileReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# schema: metric={} columns=hour,p,observed,simulated; hour 0 = pooled", r.metric).map_err(io)?;
    for n in &r.notes {
        writeln!(w, "# note: {n}").map_err(io)?;
    }
    writeln!(w, "hour,p,observed,simulated").map_err(io)?;
    for row in &r.rows {
        writeln!(w, "{},{},{},{}", row.hour.unwrap_or(0), row.p, fmt(row.observed), fmt(row.simulated)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_derivative_report(path: impl AsRef<Path>, r: &DerivativeReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# schema: metric=time_derivative units=W/m2 per hour").map_err(io)?;
    writeln!(w, "source,n,whisker_low,q1,median,q3,whisker_high").map_err(io)?;
    for (name, b) in [("observed", &r.observed), ("simulated", &r.simulated)] {
        writeln!(
            w,
            "{name},{},{},{},{},{},{}",
            b.n,
            fmt(b.whisker_low),
            fmt(b.q1),
            fmt(b.median),
            fmt(b.q3),
            fmt(b.whisker_high)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_daily_total_report(path: impl AsRef<Path>, r: &DailyTotalReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "# schema: metric=daily_total slope={} intercept={} max_rel_deviation={} mean_rel_deviation={}",
        fmt(r.slope),
        fmt(r.intercept),
        fmt(r.max_rel_deviation),
        fmt(r.mean_rel_deviation)
    )
    .map_err(io)?;
    writeln!(w, "site_id,date,observed,simulated").map_err(io)?;
    for (id, date, o, s) in &r.pairs {
        writeln!(w, "{id},{},{},{}", date.format("%Y-%m-%d"), fmt(*o), fmt(*s)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_semivariogram_report(path: impl AsRef<Path>, rows: &[SemivarianceRow], notes: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# schema: metric=semivariogram quantiles across days per (month, hour)").map_err(io)?;
    for n in notes {
        writeln!(w, "# note: {n}").map_err(io)?;
    }
    writeln!(w, "month,hour,lag_km,obs_q25,obs_q50,obs_q75,sim_q25,sim_q50,sim_q75,n_slices").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.month,
            r.hour,
            fmt(r.lag_km),
            fmt(r.observed[0]),
            fmt(r.observed[1]),
            fmt(r.observed[2]),
            fmt(r.simulated[0]),
            fmt(r.simulated[1]),
            fmt(r.simulated[2]),
            r.n_slices
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

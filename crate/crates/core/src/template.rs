//! Universal clearsky diurnal template and per-site warp parameters.
//!
//! A template `g` is a non-negative curve on the hour axis whose values at
//! the 24 slot midpoints (`h + 0.5`, hour-ending slots) sum to one. A site is
//! described by a shift `β` (hours, positive = later) and a width scale `τ`
//! (`τ > 1` = shorter day). The warped template is
//!
//! ```text
//! T(h; β, τ) = τ · g(τ·(h − c_h) − β + c_h)
//! ```
//!
//! where `c_h` is the mean solar-noon hour of the clear profiles the template
//! was built from. The leading `τ` keeps the area under the warped curve
//! equal to one, so the hour slots of `GHI(d)·T` still add up to (nearly)
//! the daily total after stretching or compressing the day.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DailyField, HourlyField, ProfileMatrix, HOURS};
use crate::error::{Error, Result};
use crate::spline::NaturalSpline;
use crate::stats::{fit_line, LineFit};

/// Lower bound applied to predicted or fitted `τ`.
pub const MIN_TAU: f64 = 0.05;

/// Minimum number of clear site-days needed to build a template.
pub const MIN_CLEAR_PROFILES: usize = 30;

/// Minimum number of profiles for a per-site warp fit.
pub const MIN_SITE_PROFILES: usize = 10;

/// Hour-axis position of slot `h` (0-based), i.e. its midpoint.
pub fn slot_midpoint(h: usize) -> f64 {
    h as f64 + 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiurnalTemplate {
    pub month: u32,
    /// Mean solar-noon hour of the source profiles.
    pub c_h: f64,
    /// Cubic spline through the normalized slot values of the daylight span,
    /// bracketed by one zero-valued knot on each side.
    spline: NaturalSpline,
    /// Number of profiles averaged into the template.
    pub n_profiles: usize,
}

/// Spline through a 24-slot profile's daylight span plus zero brackets.
fn daylight_spline(slots: &[f64]) -> Option<NaturalSpline> {
    let first = slots.iter().position(|v| *v > 0.0)?;
    let last = slots.iter().rposition(|v| *v > 0.0)?;
    let mut knots = Vec::with_capacity(last - first + 3);
    let mut values = Vec::with_capacity(last - first + 3);
    knots.push(first as f64 - 0.5);
    values.push(0.0);
    for (h, v) in slots.iter().enumerate().take(last + 1).skip(first) {
        knots.push(slot_midpoint(h));
        values.push(*v);
    }
    knots.push(last as f64 + 1.5);
    values.push(0.0);
    Some(NaturalSpline::new(knots, values))
}

fn spline_value(s: &NaturalSpline, x: f64) -> f64 {
    s.eval(x).map_or(0.0, |v| v.max(0.0))
}

/// Hour of the maximum of the spline through a profile's daylight span.
pub fn interpolated_argmax(slots: &[f64]) -> Option<f64> {
    let s = daylight_spline(slots)?;
    let (a, b) = (s.first_knot(), s.last_knot());
    let step = 0.01;
    let n = ((b - a) / step).ceil() as usize;
    let mut best = (a, f64::NEG_INFINITY);
    for i in 0..=n {
        let x = (a + i as f64 * step).min(b);
        let v = spline_value(&s, x);
        if v > best.1 {
            best = (x, v);
        }
    }
    // Golden-section refinement inside the bracketing grid cell.
    let (mut lo, mut hi) = ((best.0 - step).max(a), (best.0 + step).min(b));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        if spline_value(&s, x1) >= spline_value(&s, x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    Some(0.5 * (lo + hi))
}

impl DiurnalTemplate {
    /// Template from 24 non-negative slot values (normalized here). When
    /// `c_h` is `None` it is set to the interpolated argmax of the profile.
    pub fn from_slot_values(month: u32, slots: &[f64], c_h: Option<f64>) -> Result<Self> {
        if slots.len() != HOURS || slots.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument(
                "template needs 24 finite non-negative slot values".into(),
            ));
        }
        let total: f64 = slots.iter().sum();
        if total <= 0.0 {
            return Err(Error::Estimation("template profile is identically zero".into()));
        }
        let norm: Vec<f64> = slots.iter().map(|v| v / total).collect();
        let spline = daylight_spline(&norm).expect("non-zero profile");
        let c_h = match c_h {
            Some(c) => c,
            None => interpolated_argmax(&norm).expect("non-zero profile"),
        };
        Ok(Self {
            month,
            c_h,
            spline,
            n_profiles: 1,
        })
    }

    /// Knot positions on the hour axis.
    pub fn knots(&self) -> &[f64] {
        self.spline.knots()
    }

    /// Normalized template values at the knots.
    pub fn values(&self) -> &[f64] {
        self.spline.values()
    }

    /// `(start, end)` hours outside which the template is zero.
    pub fn support(&self) -> (f64, f64) {
        (self.spline.first_knot(), self.spline.last_knot())
    }

    /// Unwarped template `g(x)`; zero outside the support, never negative.
    pub fn base(&self, x: f64) -> f64 {
        spline_value(&self.spline, x)
    }

    /// Warped template at hour `h`; `tau` must be positive.
    pub fn evaluate(&self, h: f64, beta: f64, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::Argument(format!("tau must be positive, got {tau}")));
        }
        Ok(self.warped(h, beta, tau))
    }

    fn warped(&self, h: f64, beta: f64, tau: f64) -> f64 {
        tau * self.base(tau * (h - self.c_h) - beta + self.c_h)
    }

    /// Warped template at the 24 slot midpoints.
    pub fn slot_profile(&self, beta: f64, tau: f64) -> Result<[f64; HOURS]> {
        if !(tau > 0.0) {
            return Err(Error::Argument(format!("tau must be positive, got {tau}")));
        }
        let mut out = [0.0; HOURS];
        for (h, o) in out.iter_mut().enumerate() {
            *o = self.warped(slot_midpoint(h), beta, tau);
        }
        Ok(out)
    }
}

/// Free-standing form of [`DiurnalTemplate::evaluate`].
pub fn evaluate_template(t: &DiurnalTemplate, h: f64, beta: f64, tau: f64) -> Result<f64> {
    t.evaluate(h, beta, tau)
}

/// How clear site-days were picked for template estimation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ClearDayRule {
    /// Daily clearsky index `Σ ghi / Σ clearsky` at or above `threshold`.
    ClearskyIndex { threshold: f64 },
    /// The top `fraction` of site-days ranked by daily total.
    TopFraction { fraction: f64 },
}

impl ClearDayRule {
    pub const DEFAULT_KC: ClearDayRule = ClearDayRule::ClearskyIndex { threshold: 0.98 };
    pub const DEFAULT_TOP: ClearDayRule = ClearDayRule::TopFraction { fraction: 0.05 };
}

/// Rows of `x` regarded as clear. With a clearsky field the daily clearsky
/// index rule applies, otherwise the top-fraction rule.
pub fn select_clear_rows(x: &ProfileMatrix, clearsky: Option<&HourlyField>) -> (Vec<usize>, ClearDayRule) {
    match clearsky {
        Some(cs) => {
            let ClearDayRule::ClearskyIndex { threshold } = ClearDayRule::DEFAULT_KC else {
                unreachable!()
            };
            let rows = x
                .rows
                .iter()
                .enumerate()
                .filter(|(r, m)| {
                    let denom: f64 = cs.profile(m.site, m.day).iter().sum();
                    let num: f64 = x.x.row(*r).sum();
                    denom > 0.0 && denom.is_finite() && num / denom >= threshold
                })
                .map(|(r, _)| r)
                .collect();
            (rows, ClearDayRule::DEFAULT_KC)
        }
        None => {
            let ClearDayRule::TopFraction { fraction } = ClearDayRule::DEFAULT_TOP else {
                unreachable!()
            };
            let mut totals: Vec<(usize, f64)> = (0..x.n_rows()).map(|r| (r, x.x.row(r).sum())).collect();
            totals.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let n = ((x.n_rows() as f64) * fraction).ceil() as usize;
            let mut rows: Vec<usize> = totals.into_iter().take(n).map(|(r, _)| r).collect();
            rows.sort_unstable();
            (rows, ClearDayRule::DEFAULT_TOP)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemplateEstimate {
    pub template: DiurnalTemplate,
    pub rule: ClearDayRule,
    pub clear_rows: Vec<usize>,
}

/// Normalized mean of the clear profiles in `x`, spline-interpolated.
///
/// `x` should already be restricted to the month window and sites in scope.
/// `clearsky`, when given, must share geometry with the field `x` was built
/// from.
pub fn estimate_clearsky_template(
    x: &ProfileMatrix,
    clearsky: Option<&HourlyField>,
    month: u32,
) -> Result<TemplateEstimate> {
    let (rows, rule) = select_clear_rows(x, clearsky);
    if rows.len() < MIN_CLEAR_PROFILES {
        return Err(Error::Estimation(format!(
            "only {} clear site-days for month {month} (need {MIN_CLEAR_PROFILES}); widen the month window or add sites",
            rows.len()
        )));
    }
    let mut mean = [0.0; HOURS];
    let mut argmax_sum = 0.0;
    let mut argmax_n = 0usize;
    for &r in &rows {
        let row: Vec<f64> = x.x.row(r).iter().copied().collect();
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v;
        }
        if let Some(a) = interpolated_argmax(&row) {
            argmax_sum += a;
            argmax_n += 1;
        }
    }
    if argmax_n == 0 {
        return Err(Error::Estimation("all clear profiles are zero".into()));
    }
    let mut template = DiurnalTemplate::from_slot_values(month, &mean, Some(argmax_sum / argmax_n as f64))?;
    template.n_profiles = rows.len();
    Ok(TemplateEstimate {
        template,
        rule,
        clear_rows: rows,
    })
}

/// Geographic linear model `param = intercept + slope · covariate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoModel {
    pub intercept: f64,
    pub slope: f64,
    pub residual_sd: f64,
    pub slope_se: f64,
    pub n: usize,
}

impl GeoModel {
    pub fn predict(&self, covariate: f64) -> f64 {
        self.intercept + self.slope * covariate
    }
}

impl GeoModel {
    fn from_line(f: LineFit, n: usize) -> Self {
        Self {
            intercept: f.intercept,
            slope: f.slope,
            residual_sd: f.residual_sd,
            slope_se: f.slope_se,
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub site_id: u32,
    pub lon: f64,
    pub lat: f64,
    pub beta: f64,
    pub tau: f64,
    pub converged: bool,
    /// Value replaced by the geographic model prediction.
    pub imputed: bool,
    pub iterations: u32,
    pub objective: f64,
    pub n_profiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateFit {
    pub month: u32,
    pub sites: Vec<SiteParams>,
    /// `β` against longitude.
    pub gamma_beta: Option<GeoModel>,
    /// `τ` against latitude.
    pub gamma_tau: Option<GeoModel>,
}

impl TemplateFit {
    pub fn site(&self, id: u32) -> Option<&SiteParams> {
        self.sites.iter().find(|s| s.site_id == id)
    }
}

/// Stopping rules for the damped Gauss–Newton warp fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlsOptions {
    pub max_iterations: u32,
    pub step_tol: f64,
    pub rel_objective_tol: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tol: 1e-8,
            rel_objective_tol: 1e-10,
        }
    }
}

/// Sufficient statistics of one site's profiles for the warp objective
/// `Σ_d Σ_h (y_dh − G_d·T_h)² = S_yy − 2·Σ_h A_h·T_h + S_GG·Σ_h T_h²`.
struct SiteStats {
    a: [f64; HOURS],
    s_gg: f64,
    s_yy: f64,
}

impl SiteStats {
    fn objective(&self, t: &[f64; HOURS]) -> f64 {
        let mut f = self.s_yy;
        for h in 0..HOURS {
            f += -2.0 * self.a[h] * t[h] + self.s_gg * t[h] * t[h];
        }
        f.max(0.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct NlsOutcome {
    beta: f64,
    tau: f64,
    objective: f64,
    iterations: u32,
    converged: bool,
}

fn fit_warp(t: &DiurnalTemplate, st: &SiteStats, opts: &NlsOptions) -> NlsOutcome {
    let eval = |b: f64, ta: f64| t.slot_profile(b, ta).expect("tau kept positive");
    let (mut beta, mut tau) = (0.0, 1.0);
    let mut f = st.objective(&eval(beta, tau));
    let mut mu = 1e-3;
    let eps = 1e-6;
    for it in 1..=opts.max_iterations {
        if f == 0.0 {
            return NlsOutcome { beta, tau, objective: f, iterations: it - 1, converged: true };
        }
        let p = eval(beta, tau);
        let (pb_hi, pb_lo) = (eval(beta + eps, tau), eval(beta - eps, tau));
        let (pt_hi, pt_lo) = (eval(beta, tau + eps), eval(beta, tau - eps));
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for h in 0..HOURS {
            let d = [(pb_hi[h] - pb_lo[h]) / (2.0 * eps), (pt_hi[h] - pt_lo[h]) / (2.0 * eps)];
            let r = st.a[h] - st.s_gg * p[h];
            for i in 0..2 {
                jtr[i] -= d[i] * r;
                for k in 0..2 {
                    jtj[i][k] += st.s_gg * d[i] * d[k];
                }
            }
        }
        let mut accepted = None;
        for _ in 0..60 {
            let m00 = jtj[0][0] * (1.0 + mu) + 1e-300;
            let m11 = jtj[1][1] * (1.0 + mu) + 1e-300;
            let m01 = jtj[0][1];
            let det = m00 * m11 - m01 * m01;
            if det.is_finite() && det != 0.0 {
                let db = -(m11 * jtr[0] - m01 * jtr[1]) / det;
                let dt = -(m00 * jtr[1] - m01 * jtr[0]) / det;
                let (nb, nt) = (beta + db, tau + dt);
                if nt > MIN_TAU && nb.is_finite() && nt.is_finite() {
                    let nf = st.objective(&eval(nb, nt));
                    if nf <= f {
                        accepted = Some((nb, nt, nf, db, dt));
                        break;
                    }
                }
            }
            mu *= 4.0;
        }
        let Some((nb, nt, nf, db, dt)) = accepted else {
            // No damped step improves the objective: a numerical minimum.
            return NlsOutcome { beta, tau, objective: f, iterations: it, converged: true };
        };
        let rel = (f - nf) / f.max(f64::MIN_POSITIVE);
        beta = nb;
        tau = nt;
        f = nf;
        mu = (mu / 3.0).max(1e-12);
        if (db * db + dt * dt).sqrt() < opts.step_tol || rel < opts.rel_objective_tol {
            return NlsOutcome { beta, tau, objective: f, iterations: it, converged: true };
        }
    }
    NlsOutcome {
        beta,
        tau,
        objective: f,
        iterations: opts.max_iterations,
        converged: false,
    }
}

/// Per-site least-squares warp `(β, τ)` of `GHI(s, d)·T(h; β, τ)` to the
/// profiles in `x`. Sites that fail to converge (or have too few profiles)
/// are flagged and replaced by the geographic-model prediction fitted on the
/// converged sites.
pub fn fit_site_params(
    t: &DiurnalTemplate,
    x: &ProfileMatrix,
    daily: &DailyField,
    opts: &NlsOptions,
) -> Result<TemplateFit> {
    let mut by_site: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, m) in x.rows.iter().enumerate() {
        by_site.entry(m.site).or_default().push(r);
    }
    let grid = daily.sites();
    let entries: Vec<(usize, Vec<usize>)> = by_site.into_iter().collect();
    let sites: Vec<SiteParams> = entries
        .par_iter()
        .map(|(site, rows)| {
            let mut st = SiteStats { a: [0.0; HOURS], s_gg: 0.0, s_yy: 0.0 };
            for &r in rows {
                let m = x.rows[r];
                let g = daily.get(m.site, m.day);
                st.s_gg += g * g;
                for h in 0..HOURS {
                    let y = x.x[(r, h)];
                    st.a[h] += g * y;
                    st.s_yy += y * y;
                }
            }
            let info = grid.site(*site);
            let out = if rows.len() >= MIN_SITE_PROFILES && st.s_gg.is_finite() {
                fit_warp(t, &st, opts)
            } else {
                NlsOutcome { beta: 0.0, tau: 1.0, objective: f64::NAN, iterations: 0, converged: false }
            };
            SiteParams {
                site_id: info.id,
                lon: info.lon,
                lat: info.lat,
                beta: out.beta,
                tau: out.tau,
                converged: out.converged,
                imputed: false,
                iterations: out.iterations,
                objective: out.objective,
                n_profiles: rows.len(),
            }
        })
        .collect();
    let mut fit = TemplateFit {
        month: t.month,
        sites,
        gamma_beta: None,
        gamma_tau: None,
    };
    let failed = fit.sites.iter().filter(|s| !s.converged).count();
    if failed > 0 {
        log::warn!("{failed} site(s) did not converge in month {}; imputing from geographic models", fit.month);
        fit = fit_geo_models(&fit)?;
        let geo = fit.clone();
        for s in fit.sites.iter_mut().filter(|s| !s.converged) {
            let (b, ta) = predict_params(&geo, s.lon, s.lat)?;
            s.beta = b;
            s.tau = ta;
            s.imputed = true;
        }
    }
    Ok(fit)
}

/// OLS fits of `β` on longitude and `τ` on latitude over converged sites.
pub fn fit_geo_models(fit: &TemplateFit) -> Result<TemplateFit> {
    let good: Vec<&SiteParams> = fit.sites.iter().filter(|s| s.converged && !s.imputed).collect();
    if good.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "geographic models need ≥ 3 converged sites, have {}",
            good.len()
        )));
    }
    let lon: Vec<f64> = good.iter().map(|s| s.lon).collect();
    let lat: Vec<f64> = good.iter().map(|s| s.lat).collect();
    let beta: Vec<f64> = good.iter().map(|s| s.beta).collect();
    let tau: Vec<f64> = good.iter().map(|s| s.tau).collect();
    let gb = fit_line(&lon, &beta)
        .ok_or_else(|| Error::Rank("all converged sites share one longitude".into()))?;
    let gt = fit_line(&lat, &tau)
        .ok_or_else(|| Error::Rank("all converged sites share one latitude".into()))?;
    let mut out = fit.clone();
    out.gamma_beta = Some(GeoModel::from_line(gb, good.len()));
    out.gamma_tau = Some(GeoModel::from_line(gt, good.len()));
    Ok(out)
}

/// `(β, τ)` at an arbitrary location from the geographic models.
pub fn predict_params(fit: &TemplateFit, lon: f64, lat: f64) -> Result<(f64, f64)> {
    let (Some(gb), Some(gt)) = (fit.gamma_beta, fit.gamma_tau) else {
        return Err(Error::Config("geographic models have not been fitted".into()));
    };
    let beta = gb.predict(lon);
    let mut tau = gt.predict(lat);
    if tau <= MIN_TAU {
        log::warn!("predicted tau {tau} at ({lon}, {lat}) clamped to {MIN_TAU}");
        tau = MIN_TAU;
    }
    Ok((beta, tau))
}

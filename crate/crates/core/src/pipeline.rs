//! End-to-end fit and simulation over a tile layout, plus the model file and
//! run manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assemble::{simulate_hourly, MonthEnvelope, MonthModel, PlausibilityEnvelope, SimulationOptions};
use crate::datamodel::{profile_matrix, to_daily, DailyField, HourlyField, HOURS, MISSING};
use crate::error::{Error, Result};
use crate::residuals::{compute_residuals, fit_conditional_variance, residual_svd, standardize, Scaling};
use crate::seeds;
use crate::spatialfield::{fit_gp, CovFamily, GpModel};
use crate::template::{estimate_clearsky_template, fit_geo_models, fit_site_params, ClearDayRule, NlsOptions};
use crate::tiling::{build_layout, run_tiles, smooth_covariance_params, MonthWindow, Tile, TileLayout, DEFAULT_BUFFER_DAYS, DEFAULT_MARGIN};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub n_modes: usize,
    pub n_bins: usize,
    pub cov_family: CovFamily,
    pub literal_sigma2: bool,
    pub buffer_days: u32,
    pub margin: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub months: Vec<u32>,
    pub smooth_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_modes: 4,
            n_bins: 6,
            cov_family: CovFamily::Exponential,
            literal_sigma2: false,
            buffer_days: DEFAULT_BUFFER_DAYS,
            margin: DEFAULT_MARGIN,
            tiles_x: 1,
            tiles_y: 1,
            months: vec![1, 4, 7, 10],
            smooth_covariance: true,
        }
    }
}

/// Fitted model for one tile and month.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub tile: usize,
    pub month: u32,
    pub model: MonthModel,
    pub envelope: PlausibilityEnvelope,
    /// Per-tile GP fits before cross-tile smoothing.
    pub raw_gps: Vec<GpModel>,
    pub clear_rule: ClearDayRule,
    pub n_profiles: usize,
    /// Range of training daily totals.
    pub ghi_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub tile: usize,
    pub month: u32,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub options: FitOptions,
    pub layout: TileLayout,
    pub entries: Vec<ModelEntry>,
    pub failures: Vec<TaskFailure>,
}

impl ModelFile {
    pub fn entry(&self, tile: usize, month: u32) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.tile == tile && e.month == month)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ModelFile = serde_json::from_str(&text)?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "model file schema {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Per-hour bounds over every window day, labelled with the target month.
fn window_envelope(field: &HourlyField, month: u32) -> PlausibilityEnvelope {
    let all = PlausibilityEnvelope::from_field(field);
    let mut min = vec![f64::INFINITY; HOURS];
    let mut max = vec![0.0f64; HOURS];
    for m in &all.months {
        for h in 0..HOURS {
            min[h] = min[h].min(m.min[h]);
            max[h] = max[h].max(m.max[h]);
        }
    }
    for v in min.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    PlausibilityEnvelope {
        months: vec![MonthEnvelope { month, min, max }],
    }
}

/// Fits every model component on the super tile of `tile` over the
/// buffered window of `month`.
pub fn fit_tile_month(
    data: &HourlyField,
    clearsky: Option<&HourlyField>,
    tile: &Tile,
    month: u32,
    opts: &FitOptions,
) -> Result<ModelEntry> {
    let window = MonthWindow::new(month, opts.buffer_days)?;
    let days = window.days(data.calendar());
    if days.is_empty() {
        return Err(Error::EmptySelection(format!("no days of month {month} in the data")));
    }
    let sub = data.select(&tile.super_sites, &days);
    let cs = clearsky.map(|c| c.select(&tile.super_sites, &days));
    let x = profile_matrix(&sub, |_| true, |_, _| true)?;
    let est = estimate_clearsky_template(&x, cs.as_ref(), month)?;
    let daily = to_daily(&sub);
    let fit = fit_site_params(&est.template, &x, &daily, &NlsOptions::default())?;
    let fit = if fit.gamma_beta.is_some() {
        fit
    } else {
        match fit_geo_models(&fit) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("tile {} month {month}: geographic models unavailable: {e}", tile.id);
                fit
            }
        }
    };
    let e = compute_residuals(&x, &daily, &est.template, &fit)?;
    let (mut basis, scores) = residual_svd(&e, opts.n_modes)?;
    basis.month = month;
    let mut table = fit_conditional_variance(&scores, &daily, &e.rows, opts.n_bins)?;
    if opts.literal_sigma2 {
        table.scaling = Scaling::LiteralVariance;
    }
    let ustar = standardize(&scores, &table, &daily, &e.rows)?;
    let (n_sites, n_days) = (sub.n_sites(), sub.n_days());
    let gps = (0..opts.n_modes)
        .map(|j| {
            let mut m = DMatrix::from_element(n_sites, n_days, MISSING);
            for (r, meta) in e.rows.iter().enumerate() {
                m[(meta.site, meta.day)] = ustar[(r, j)];
            }
            fit_gp(&m, &daily, j + 1, opts.cov_family)
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = daily.values().iter().copied().filter(|v| v.is_finite()).collect();
    let ghi_range = (
        totals.iter().copied().fold(f64::INFINITY, f64::min),
        totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(ModelEntry {
        tile: tile.id,
        month,
        envelope: window_envelope(&sub, month),
        raw_gps: gps.clone(),
        model: MonthModel {
            month,
            template: est.template,
            fit,
            basis,
            variance: table,
            gps,
        },
        clear_rule: est.rule,
        n_profiles: x.n_rows(),
        ghi_range,
    })
}

/// Fits all (tile, month) models and smooths covariance parameters across
/// tiles month by month.
pub fn fit_model(data: &HourlyField, clearsky: Option<&HourlyField>, opts: &FitOptions, workers: usize) -> Result<ModelFile> {
    if let Some(cs) = clearsky {
        if !cs.same_geometry(data) {
            return Err(Error::Argument("clearsky field geometry differs from GHI".into()));
        }
    }
    let layout = build_layout(data.sites(), opts.tiles_x, opts.tiles_y, opts.margin)?;
    let outcomes = run_tiles(&layout, &opts.months, workers, |tile, month| {
        fit_tile_month(data, clearsky, tile, month, opts)
    })?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(e) => entries.push(e),
            Err(error) => failures.push(TaskFailure {
                tile: o.tile,
                month: o.month,
                error,
            }),
        }
    }
    if opts.smooth_covariance {
        let mut by_month: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_month.entry(e.month).or_default().push(i);
        }
        for (month, idx) in &by_month {
            if idx.len() < 4 {
                log::warn!("month {month}: {} fitted tile(s); covariance parameters left unsmoothed", idx.len());
                continue;
            }
            let centers: Vec<(f64, f64)> = idx.iter().map(|&i| layout.tiles[entries[i].tile].bounds.center()).collect();
            for j in 0..opts.n_modes {
                let raw: Vec<GpModel> = idx.iter().map(|&i| entries[i].raw_gps[j].clone()).collect();
                let smooth = smooth_covariance_params(&raw, &centers);
                for (&i, g) in idx.iter().zip(smooth) {
                    entries[i].model.gps[j] = g;
                }
            }
        }
    }
    Ok(ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        options: opts.clone(),
        layout,
        entries,
        failures,
    })
}

/// Seed of ensemble member `member` for tile `tile`.
pub fn member_seed(master: u64, member: u64, tile: usize) -> u64 {
    seeds::derive(master, &[member, tile as u64])
}

#[derive(Clone, Debug, Default)]
pub struct SimulationSummary {
    pub clamped_cells: usize,
    pub trend_fallbacks: usize,
    pub max_rel_error_pre_clamp: f64,
    pub max_rel_error_post_clamp: f64,
    pub warnings: Vec<String>,
}

/// One ensemble member for every site-day of `daily`, using the model of
/// each site's target tile and each day's month.
pub fn simulate_member(
    model: &ModelFile,
    daily: &DailyField,
    seed: u64,
    member: u64,
    opts: &SimulationOptions,
) -> Result<(HourlyField, SimulationSummary)> {
    let layout = &model.layout;
    let cal = daily.calendar();
    let mut groups: BTreeMap<(usize, u32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut site_tile = Vec::with_capacity(daily.sites().len());
    for s in daily.sites().sites() {
        let t = layout.tile_of(s.lon, s.lat).ok_or_else(|| {
            Error::Lookup(format!("site {} at ({}, {}) lies outside the model's tile coverage", s.id, s.lon, s.lat))
        })?;
        site_tile.push(t);
    }
    for (s, &t) in site_tile.iter().enumerate() {
        for d in 0..cal.len() {
            let g = groups.entry((t, cal.month_of(d))).or_default();
            if g.0.last() != Some(&s) {
                g.0.push(s);
            }
        }
    }
    for ((_, m), g) in groups.iter_mut() {
        g.1 = (0..cal.len()).filter(|&d| cal.month_of(d) == *m).collect();
    }
    let mut warnings = Vec::new();
    for &(t, m) in groups.keys() {
        let e = model.entry(t, m).ok_or_else(|| {
            let why = model
                .failures
                .iter()
                .find(|f| f.tile == t && f.month == m)
                .map_or_else(|| "not fitted".to_string(), |f| format!("fit failed: {}", f.error));
            Error::Lookup(format!("no model for tile {t} month {m} ({why})"))
        })?;
        let (sites, days) = &groups[&(t, m)];
        let (lo, hi) = e.ghi_range;
        let outside = sites
            .iter()
            .flat_map(|&s| days.iter().map(move |&d| daily.get(s, d)))
            .filter(|g| *g < lo || *g > hi)
            .count();
        if outside > 0 {
            let w = format!("tile {t} month {m}: {outside} daily totals outside the training range [{lo}, {hi}]");
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let results: Vec<_> = groups
        .par_iter()
        .map(|(&(t, m), (sites, days))| {
            let e = model.entry(t, m).expect("checked above");
            let sub = daily.select(sites, days);
            simulate_hourly(&sub, &e.model, &e.envelope, member_seed(seed, member, t), opts)
                .map_err(|err| Error::Estimation(format!("tile {t} month {m}: {err}")))
                .map(|sim| ((sites, days), sim))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = HourlyField::filled(daily.sites().clone(), cal.clone(), MISSING);
    let mut summary = SimulationSummary {
        warnings,
        ..Default::default()
    };
    for ((sites, days), sim) in results {
        summary.clamped_cells += sim.clamped_cells;
        summary.trend_fallbacks += sim.trend_fallbacks;
        if let Some(r) = &sim.rebalance {
            summary.max_rel_error_pre_clamp = summary.max_rel_error_pre_clamp.max(r.max_rel_error_pre_clamp);
            summary.max_rel_error_post_clamp = summary.max_rel_error_post_clamp.max(r.max_rel_error_post_clamp);
        }
        for (i, &s) in sites.iter().enumerate() {
            for (k, &d) in days.iter().enumerate() {
                out.profile_mut(s, d).copy_from_slice(sim.field.profile(i, k));
            }
        }
    }
    Ok((out, summary))
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    /// Digest of `path`, recorded by file name only so manifests do not
    /// depend on where a run was made.
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            path: path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            sha256: file_sha256(path)?,
        })
    }
}

/// Record of one command run, enough to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

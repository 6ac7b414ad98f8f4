//! Command-line front end: argument parsing, config files and the five
//! subcommands. Values from `--config` take precedence over flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::assemble::SimulationOptions;
use crate::datamodel::{load_daily, load_hourly, load_sites, save_hourly, to_daily, Schema};
use crate::error::{Error, Result};
use crate::pipeline::{fit_model, simulate_member, FitOptions, Manifest, ModelFile};
use crate::spatialfield::CovFamily;
use crate::synth::{generate, SynthConfig};
use crate::tiling::build_layout;
use crate::tps::{downscale_hourly, rmse_vs_std_report, write_rmse_report};
use crate::validate::{
    check_pair, clearsky_index, daily_total_compare, daylight_mask, derivative_compare, hourly_quantile_compare,
    semivariogram_compare, write_daily_total_report, write_derivative_report, write_quantile_report,
    write_semivariogram_report, zenith_mask, KC_THRESHOLD, QQ_MAX_ZENITH,
};

/// Exit code when some (tile, month) tasks failed but output was written.
pub const EXIT_PARTIAL: i32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "solar-downscale", version, about = "Downscale daily GHI grids to hourly, spatially correlated fields")]
pub struct Cli {
    /// TOML config file; its values override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Comma-separated months, e.g. 1,4,7,10.
    #[arg(long, global = true, value_delimiter = ',')]
    pub months: Option<Vec<u32>>,
    /// Tile layout as NXxNY, e.g. 20x16.
    #[arg(long, global = true)]
    pub tiles: Option<String>,
    /// Super-tile margin as a fraction of the tile width, per side.
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    /// Number of residual modes.
    #[arg(long = "basis-j", global = true)]
    pub basis_j: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub rebalance: Option<OnOff>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-tile, per-month models from hourly data.
    Fit(FitArgs),
    /// Simulate hourly ensemble members from daily totals.
    Simulate(SimulateArgs),
    /// Interpolate an hourly field onto target sites with thin-plate splines.
    Downscale(DownscaleArgs),
    /// Compare observed and simulated hourly fields.
    Validate(ValidateArgs),
    /// Write a synthetic dataset with known parameters.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Hourly input (with an optional clearsky column).
    #[arg(long)]
    pub hourly: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub cov_family: Option<CovFamily>,
    /// Scale coefficients by σ² instead of σ.
    #[arg(long)]
    pub literal_sigma2: bool,
    #[arg(long)]
    pub buffer_days: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub daily: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub members: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DownscaleArgs {
    /// Coarse hourly input.
    #[arg(long)]
    pub hourly: PathBuf,
    /// Target sites table.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Hourly truth at the target sites; enables the RMSE report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub observed: PathBuf,
    #[arg(long)]
    pub simulated: PathBuf,
    /// Hourly file whose clearsky column is used; defaults to the observed file.
    #[arg(long)]
    pub clearsky: Option<PathBuf>,
    /// Daily totals; defaults to hour-sums of the observed field.
    #[arg(long)]
    pub daily: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// small or paper-scale-mini.
    #[arg(long, default_value = "small")]
    pub preset: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub bins: Option<usize>,
    pub cov_family: Option<CovFamily>,
    pub literal_sigma2: Option<bool>,
    pub buffer_days: Option<u32>,
    pub smooth_covariance: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub members: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    /// Hour-ending labels for the semivariogram comparison.
    pub semivariogram_hours: Option<Vec<usize>>,
    pub lag_bins: Option<usize>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub months: Option<Vec<u32>>,
    pub tiles: Option<String>,
    pub margin: Option<f64>,
    pub basis_j: Option<usize>,
    pub rebalance: Option<OnOff>,
    pub fit: FitSection,
    pub simulate: SimulateSection,
    pub validate: ValidateSection,
    /// Full or partial synth settings layered over the preset.
    pub synth: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Settings after merging flags and config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Not recorded in manifests: outputs do not depend on it.
    #[serde(skip)]
    pub workers: usize,
    pub fit: FitOptions,
    pub rebalance: bool,
    pub members: usize,
    pub semivariogram_hours: Vec<usize>,
    pub lag_bins: usize,
    #[serde(skip)]
    pub synth_overrides: Option<toml::Table>,
}

pub fn parse_tiles(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("tiles must look like NXxNY, got '{s}'"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let nx: usize = a.trim().parse().map_err(|_| bad())?;
    let ny: usize = b.trim().parse().map_err(|_| bad())?;
    if nx == 0 || ny == 0 {
        return Err(bad());
    }
    Ok((nx, ny))
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut fit = FitOptions::default();
        if let Some(m) = file.months.clone().or_else(|| cli.months.clone()) {
            fit.months = m;
        }
        if let Some(t) = file.tiles.as_deref().or(cli.tiles.as_deref()) {
            (fit.tiles_x, fit.tiles_y) = parse_tiles(t)?;
        }
        if let Some(m) = file.margin.or(cli.margin) {
            fit.margin = m;
        }
        if let Some(j) = file.basis_j.or(cli.basis_j) {
            fit.n_modes = j;
        }
        if let Command::Fit(a) = &cli.command {
            if let Some(b) = a.bins {
                fit.n_bins = b;
            }
            if let Some(c) = a.cov_family {
                fit.cov_family = c;
            }
            fit.literal_sigma2 = a.literal_sigma2;
            if let Some(b) = a.buffer_days {
                fit.buffer_days = b;
            }
        }
        let fs = &file.fit;
        if let Some(b) = fs.bins {
            fit.n_bins = b;
        }
        if let Some(c) = fs.cov_family {
            fit.cov_family = c;
        }
        if let Some(l) = fs.literal_sigma2 {
            fit.literal_sigma2 = l;
        }
        if let Some(b) = fs.buffer_days {
            fit.buffer_days = b;
        }
        if let Some(s) = fs.smooth_covariance {
            fit.smooth_covariance = s;
        }
        if fit.months.is_empty() || fit.months.iter().any(|m| !(1..=12).contains(m)) {
            return Err(Error::Config("months must be a non-empty list within 1..=12".into()));
        }
        if !(fit.margin >= 0.0) {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        if !(1..=24).contains(&fit.n_modes) || fit.n_bins == 0 {
            return Err(Error::Config("basis-j must be in 1..=24 and bins positive".into()));
        }
        let members_flag = match &cli.command {
            Command::Simulate(a) => a.members,
            _ => None,
        };
        let members = file.simulate.members.or(members_flag).unwrap_or(1);
        if members == 0 {
            return Err(Error::Config("members must be at least 1".into()));
        }
        let semivariogram_hours = file.validate.semivariogram_hours.clone().unwrap_or_else(|| (10..=15).collect());
        if semivariogram_hours.iter().any(|h| !(1..=24).contains(h)) {
            return Err(Error::Config("semivariogram hours must lie in 1..=24".into()));
        }
        Ok(Self {
            seed: file.seed.or(cli.seed).unwrap_or(0),
            workers: file
                .workers
                .or(cli.workers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            fit,
            rebalance: file.rebalance.or(cli.rebalance).unwrap_or(OnOff::On) == OnOff::On,
            members,
            semivariogram_hours,
            lag_bins: file.validate.lag_bins.unwrap_or(10),
            synth_overrides: file.synth,
        })
    }
}

/// Result of a command that may have completed only partly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub partial: bool,
    pub outputs: Vec<PathBuf>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_fit(cfg: &RunConfig, args: &FitArgs) -> Result<Outcome> {
    let data = load_hourly(&args.hourly, &Schema::default())?;
    if data.clearsky.is_none() {
        log::warn!("no clearsky column in {}; clear days chosen by the top-fraction rule", args.hourly.display());
    }
    let model = fit_model(&data.ghi, data.clearsky.as_ref(), &cfg.fit, cfg.workers)?;
    if model.entries.is_empty() {
        let first = model.failures.first().map_or_else(String::new, |f| {
            format!(": tile {} month {}: {}", f.tile, f.month, f.error)
        });
        return Err(Error::Estimation(format!("every (tile, month) fit failed{first}")));
    }
    model.save(&args.out)?;
    let mut man = Manifest::new("fit", None, serde_json::to_value(cfg)?);
    man.add_input(&args.hourly)?;
    man.add_output(&args.out)?;
    for e in &model.entries {
        man.notes.push(format!(
            "tile {} month {}: clear-day rule {}, {} profiles",
            e.tile,
            e.month,
            serde_json::to_string(&e.clear_rule)?,
            e.n_profiles
        ));
    }
    for f in &model.failures {
        man.notes.push(format!("FAILED tile {} month {}: {}", f.tile, f.month, f.error));
    }
    let mp = man.write(manifest_path(&args.out))?;
    Ok(Outcome {
        partial: !model.failures.is_empty(),
        outputs: vec![args.out.clone(), mp],
    })
}

pub fn cmd_simulate(cfg: &RunConfig, args: &SimulateArgs) -> Result<Outcome> {
    let model = ModelFile::load(&args.model)?;
    let daily = load_daily(&args.daily)?;
    create_dir(&args.out_dir)?;
    let opts = SimulationOptions { rebalance: cfg.rebalance };
    let mut man = Manifest::new("simulate", Some(cfg.seed), serde_json::to_value(cfg)?);
    man.add_input(&args.model)?;
    man.add_input(&args.daily)?;
    let mut outputs = Vec::new();
    for m in 0..cfg.members {
        let (field, summary) = simulate_member(&model, &daily, cfg.seed, m as u64, &opts)?;
        let p = args.out_dir.join(format!("member_{m:03}.csv"));
        save_hourly(&p, &field, None)?;
        man.add_output(&p)?;
        man.notes.push(format!(
            "member {m}: {} clamped cells, {} trend fallbacks, max relative daily-total error {:e} before and {:e} after clamping",
            summary.clamped_cells, summary.trend_fallbacks, summary.max_rel_error_pre_clamp, summary.max_rel_error_post_clamp
        ));
        man.notes.extend(summary.warnings);
        outputs.push(p);
    }
    outputs.push(man.write(args.out_dir.join("manifest.json"))?);
    Ok(Outcome { partial: false, outputs })
}

pub fn cmd_downscale(cfg: &RunConfig, args: &DownscaleArgs) -> Result<Outcome> {
    let coarse = load_hourly(&args.hourly, &Schema::default())?.ghi;
    let targets = load_sites(&args.targets)?;
    let out = downscale_hourly(&coarse, &targets)?;
    save_hourly(&args.out, &out.field, None)?;
    let mut man = Manifest::new("downscale", None, serde_json::to_value(cfg)?);
    man.add_input(&args.hourly)?;
    man.add_input(&args.targets)?;
    man.add_output(&args.out)?;
    for (d, h) in &out.skipped {
        man.notes.push(format!("slice {} hour {} left missing", coarse.calendar().date(*d), h + 1));
    }
    let mut outputs = vec![args.out.clone()];
    if let Some(t) = &args.truth {
        let truth = load_hourly(t, &Schema::default())?.ghi;
        let hours: Vec<usize> = (1..=24).collect();
        let rows = rmse_vs_std_report(&out.field, &truth, &hours)?;
        let mut rp = args.out.as_os_str().to_owned();
        rp.push(".rmse.csv");
        let rp = PathBuf::from(rp);
        write_rmse_report(&rp, &rows)?;
        man.add_input(t)?;
        man.add_output(&rp)?;
        outputs.push(rp);
    }
    outputs.push(man.write(manifest_path(&args.out))?);
    Ok(Outcome { partial: false, outputs })
}

#[derive(Clone, Debug, Serialize)]
struct ValidationSummary {
    kc_max_gap: Option<f64>,
    ghi_max_gap: f64,
    derivative_q1: (f64, f64),
    derivative_median: (f64, f64),
    derivative_q3: (f64, f64),
    daily_slope: f64,
    daily_max_rel_deviation: f64,
}

pub fn cmd_validate(cfg: &RunConfig, args: &ValidateArgs) -> Result<Outcome> {
    let obs = load_hourly(&args.observed, &Schema::default())?;
    let sim = load_hourly(&args.simulated, &Schema::default())?.ghi;
    let cs = match &args.clearsky {
        Some(p) => load_hourly(p, &Schema::default())?.clearsky,
        None => obs.clearsky.clone(),
    };
    let obs_ghi = obs.ghi;
    check_pair(&obs_ghi, &sim)?;
    let daily = match &args.daily {
        Some(p) => load_daily(p)?,
        None => to_daily(&obs_ghi),
    };
    create_dir(&args.out_dir)?;
    let mut man = Manifest::new("validate", None, serde_json::to_value(cfg)?);
    man.add_input(&args.observed)?;
    man.add_input(&args.simulated)?;
    if let Some(p) = &args.clearsky {
        man.add_input(p)?;
    }
    if let Some(p) = &args.daily {
        man.add_input(p)?;
    }
    let mut outputs = Vec::new();
    let zmask = zenith_mask(&obs_ghi, QQ_MAX_ZENITH);
    let kc_gap = match &cs {
        Some(cs) => {
            let kc_obs = clearsky_index(&obs_ghi, cs, KC_THRESHOLD)?;
            let kc_sim = clearsky_index(&sim, cs, KC_THRESHOLD)?;
            let r = hourly_quantile_compare("clearsky_index", &kc_obs, &kc_sim, Some(&zmask), false)?;
            let p = args.out_dir.join("kc_quantiles.csv");
            write_quantile_report(&p, &r)?;
            outputs.push(p);
            Some(r.max_gap)
        }
        None => {
            man.notes.push("no clearsky column: clearsky-index quantiles skipped".into());
            None
        }
    };
    let qq = hourly_quantile_compare("ghi", &obs_ghi, &sim, Some(&zmask), true)?;
    let p = args.out_dir.join("ghi_quantiles.csv");
    write_quantile_report(&p, &qq)?;
    outputs.push(p);
    let der = derivative_compare(&obs_ghi, &sim, &daylight_mask(&obs_ghi))?;
    let p = args.out_dir.join("derivatives.csv");
    write_derivative_report(&p, &der)?;
    outputs.push(p);
    let dt = daily_total_compare(&daily, &sim)?;
    let p = args.out_dir.join("daily_totals.csv");
    write_daily_total_report(&p, &dt)?;
    outputs.push(p);
    let (rows, notes) = semivariogram_compare(&obs_ghi, &sim, &cfg.semivariogram_hours, cfg.lag_bins)?;
    let p = args.out_dir.join("semivariogram.csv");
    write_semivariogram_report(&p, &rows, &notes)?;
    outputs.push(p);
    let summary = ValidationSummary {
        kc_max_gap: kc_gap,
        ghi_max_gap: qq.max_gap,
        derivative_q1: (der.observed.q1, der.simulated.q1),
        derivative_median: (der.observed.median, der.simulated.median),
        derivative_q3: (der.observed.q3, der.simulated.q3),
        daily_slope: dt.slope,
        daily_max_rel_deviation: dt.max_rel_deviation,
    };
    let p = args.out_dir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&p, e))?;
    outputs.push(p);
    for o in &outputs {
        man.add_output(o)?;
    }
    outputs.push(man.write(args.out_dir.join("manifest.json"))?);
    Ok(Outcome { partial: false, outputs })
}

/// Synth settings: preset, then `[synth]` overrides, then the seed.
pub fn synth_config(cfg: &RunConfig, preset: &str, seed_given: bool) -> Result<SynthConfig> {
    let base = SynthConfig::preset(preset)?;
    let mut out = match &cfg.synth_overrides {
        Some(t) => {
            let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in t {
                table.insert(k.clone(), v.clone());
            }
            table
                .try_into::<SynthConfig>()
                .map_err(|e| Error::Config(format!("synth section: {e}")))?
        }
        None => base,
    };
    if seed_given {
        out.seed = cfg.seed;
    }
    Ok(out)
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs, seed_given: bool) -> Result<Outcome> {
    let sc = synth_config(cfg, &args.preset, seed_given)?;
    let ds = generate(&sc)?;
    ds.write(&args.out_dir)?;
    let (nx, ny) = if cfg.fit.tiles_x * cfg.fit.tiles_y > 1 {
        (cfg.fit.tiles_x, cfg.fit.tiles_y)
    } else if args.preset == "paper-scale-mini" {
        (15, 10)
    } else {
        (1, 1)
    };
    let layout = build_layout(ds.truth.sites(), nx, ny, cfg.fit.margin)?;
    layout.write(args.out_dir.join("layout.json"))?;
    let names = ["sites.csv", "hourly.csv", "daily.csv", "truth.params", "layout.json"];
    let outputs: Vec<PathBuf> = names.iter().map(|n| args.out_dir.join(n)).collect();
    let mut man = Manifest::new("synth", Some(sc.seed), serde_json::to_value(&sc)?);
    for o in &outputs {
        man.add_output(o)?;
    }
    man.notes.push(format!(
        "preset {}; layout {nx}x{ny} with {} non-empty tiles",
        args.preset,
        layout.non_empty().count()
    ));
    let mut outputs = outputs;
    outputs.push(man.write(args.out_dir.join("manifest.json"))?);
    Ok(Outcome { partial: false, outputs })
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = RunConfig::resolve(&cli).and_then(|cfg| match &cli.command {
        Command::Fit(a) => cmd_fit(&cfg, a),
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Downscale(a) => cmd_downscale(&cfg, a),
        Command::Validate(a) => cmd_validate(&cfg, a),
        Command::Synth(a) => {
            let seed_given = cli.seed.is_some() || cli.config.as_ref().is_some_and(|p| {
                FileConfig::load(p).map(|f| f.seed.is_some()).unwrap_or(false)
            });
            cmd_synth(&cfg, a, seed_given)
        }
    });
    match result {
        Ok(o) => {
            for p in &o.outputs {
                log::info!("wrote {}", file_name(p));
            }
            if o.partial {
                eprintln!("warning: some tasks failed; see the manifest");
                EXIT_PARTIAL
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

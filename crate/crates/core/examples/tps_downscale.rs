//! Thin-plate spline downscaling from a coarse grid to held-out fine sites.

use solar_downscale::stats::quantile_sorted;
use solar_downscale::synth::{fine_coarse_pair, CoarseMode, SynthConfig};
use solar_downscale::tps::{downscale_hourly, rmse_vs_std_report};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { nx: 12, ny: 12, ..SynthConfig::small() };
    let pair = fine_coarse_pair(&cfg, 10.0, 20.0, CoarseMode::Subsample)?;
    let fine = &pair.fine.truth;
    let coarse_ids: Vec<usize> = pair.members.iter().map(|m| m[0]).collect();
    let held: Vec<usize> = (0..fine.n_sites()).filter(|s| !coarse_ids.contains(s)).collect();
    let targets = fine.sites().subset(&held);
    let down = downscale_hourly(&pair.coarse, &targets)?;
    println!(
        "{} coarse sites -> {} targets, {} slices skipped",
        pair.coarse.n_sites(),
        held.len(),
        down.skipped.len()
    );
    let days: Vec<usize> = (0..fine.n_days()).collect();
    let truth = fine.select(&held, &days);
    let hours: Vec<usize> = (8..=17).collect();
    let rows = rmse_vs_std_report(&down.field, &truth, &hours)?;
    println!("hour  median RMSE/std");
    for h in hours {
        let mut r: Vec<f64> = rows.iter().filter(|x| x.hour == h && x.ratio.is_finite()).map(|x| x.ratio).collect();
        r.sort_by(f64::total_cmp);
        println!("{h:>4}  {:.3}", quantile_sorted(&r, 0.5));
    }
    Ok(())
}

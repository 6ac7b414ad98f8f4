//! Fit a month model on synthetic data and simulate hourly fields from the
//! daily totals.

use solar_downscale::assemble::SimulationOptions;
use solar_downscale::pipeline::{fit_model, simulate_member, FitOptions};
use solar_downscale::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::small())?;
    let opts = FitOptions { months: vec![7], ..FitOptions::default() };
    let model = fit_model(&ds.truth, Some(&ds.clearsky), &opts, 2)?;
    let entry = &model.entries[0];
    println!("month {} fitted on {} profiles", entry.month, entry.n_profiles);
    for gp in &entry.model.gps {
        println!("  mode {} range {:.1} km sill {:.3} nugget {:.3}", gp.j, gp.range_km, gp.sill, gp.nugget);
    }

    for rebalance in [false, true] {
        let (sim, summary) = simulate_member(&model, &ds.daily, 7, 0, &SimulationOptions { rebalance })?;
        println!(
            "rebalance {rebalance}: {} clamped cells, max daily-total error {:.2e} pre-clamp, {:.2e} post-clamp",
            summary.clamped_cells, summary.max_rel_error_pre_clamp, summary.max_rel_error_post_clamp
        );
        let s = 0;
        let d = 10;
        let row: Vec<String> = (0..24).map(|h| format!("{:.0}", sim.get(s, d, h))).collect();
        println!("  site 0 day {d}: {}", row.join(" "));
    }
    let truth: Vec<String> = (0..24).map(|h| format!("{:.0}", ds.truth.get(0, 10, h))).collect();
    println!("  truth       : {}", truth.join(" "));
    Ok(())
}

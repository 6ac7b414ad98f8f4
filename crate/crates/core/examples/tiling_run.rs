//! Overlapping tile layout and a parallel per-tile, per-month run.

use solar_downscale::pipeline::{fit_model, FitOptions};
use solar_downscale::synth::{generate, SynthConfig};
use solar_downscale::tiling::build_layout;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig { nx: 16, ny: 12, ..SynthConfig::small() })?;
    let layout = build_layout(ds.truth.sites(), 2, 2, 0.4)?;
    for t in &layout.tiles {
        println!(
            "tile {} ({},{}): {} sites, {} in super tile, lon {:.2}..{:.2} -> {:.2}..{:.2}",
            t.id,
            t.ix,
            t.iy,
            t.sites.len(),
            t.super_sites.len(),
            t.bounds.lon_min,
            t.bounds.lon_max,
            t.super_bounds.lon_min,
            t.super_bounds.lon_max
        );
    }
    let opts = FitOptions { months: vec![7], tiles_x: 2, tiles_y: 2, ..FitOptions::default() };
    let model = fit_model(&ds.truth, Some(&ds.clearsky), &opts, 4)?;
    println!("{} tile-month models, {} failures", model.entries.len(), model.failures.len());
    for e in &model.entries {
        let r: Vec<String> = e.model.gps.iter().map(|g| format!("{:.0}", g.range_km)).collect();
        println!("  tile {} month {}: ranges km [{}]", e.tile, e.month, r.join(", "));
    }
    Ok(())
}

//! Generate a small synthetic dataset with known parameters and write it to disk.
//!
//! cargo run --example synth_dataset -- /tmp/synth

use solar_downscale::synth::{generate, SynthConfig, CLASS_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    let cfg = SynthConfig { seed: 42, ..SynthConfig::small() };
    let ds = generate(&cfg)?;
    println!(
        "{} sites x {} days, spacing {} km",
        ds.truth.n_sites(),
        ds.truth.n_days(),
        cfg.spacing_km
    );
    for (name, n) in CLASS_NAMES.iter().zip(ds.params.class_counts) {
        println!("  {name:<12} {n} site-days");
    }
    let first = &ds.params.sites[0];
    println!("site {} planted beta {:.3} h, tau {:.4}", first.site_id, first.beta, first.tau);
    ds.write(&out)?;
    println!("wrote {out}/{{sites,hourly,daily}}.csv and truth.params");
    Ok(())
}

//! Estimate the clearsky template, fit per-site shift and width, and compare
//! the geographic slopes with the planted ones.

use solar_downscale::datamodel::{profile_matrix, to_daily};
use solar_downscale::synth::{generate, SynthConfig};
use solar_downscale::template::{estimate_clearsky_template, fit_geo_models, fit_site_params, NlsOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { mode_sd: vec![0.0; 4], noise_frac: 0.01, spacing_km: 50.0, ..SynthConfig::small() };
    let ds = generate(&cfg)?;
    let x = profile_matrix(&ds.truth, |_| true, |_, _| true)?;
    let est = estimate_clearsky_template(&x, Some(&ds.clearsky), 7)?;
    println!("clear-day rule {:?}, {} clear profiles", est.rule, est.clear_rows.len());
    println!("template anchor c = {:.3} h", est.template.c_h);

    let fit = fit_site_params(&est.template, &x, &to_daily(&ds.truth), &NlsOptions::default())?;
    let fit = fit_geo_models(&fit)?;
    let gb = fit.gamma_beta.as_ref().unwrap();
    let gt = fit.gamma_tau.as_ref().unwrap();
    println!("beta ~ lon slope {:.5} (planted {:.5})", gb.slope, cfg.beta_slope);
    println!("tau  ~ lat slope {:.5} (planted {:.5})", gt.slope, cfg.tau_slope);
    let worst = ds
        .params
        .sites
        .iter()
        .map(|t| (fit.site(t.site_id).unwrap().beta - t.beta).abs())
        .fold(0.0, f64::max);
    println!("max per-site beta error {worst:.4} h");
    Ok(())
}

//! Residual basis and GHI-conditional variance of the mode coefficients.

use solar_downscale::datamodel::{profile_matrix, to_daily};
use solar_downscale::residuals::{compute_residuals, fit_conditional_variance, residual_svd, standardize};
use solar_downscale::synth::{generate, SynthConfig};
use solar_downscale::template::{estimate_clearsky_template, fit_site_params, NlsOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::small())?;
    let daily = to_daily(&ds.truth);
    let x = profile_matrix(&ds.truth, |_| true, |_, _| true)?;
    let t = estimate_clearsky_template(&x, Some(&ds.clearsky), 7)?.template;
    let fit = fit_site_params(&t, &x, &daily, &NlsOptions::default())?;
    let e = compute_residuals(&x, &daily, &t, &fit)?;
    let (basis, scores) = residual_svd(&e, 4)?;
    println!("singular values {:?}", basis.singular_values.iter().map(|s| s.round()).collect::<Vec<_>>());

    let table = fit_conditional_variance(&scores, &daily, &e.rows, 6)?;
    println!("bin  upper edge   n    sd1     sd2     sd3     sd4");
    for b in 0..table.n_bins() {
        let edge = table.bin_edges.get(b).copied().unwrap_or(f64::INFINITY);
        print!("{b:>3} {edge:>10.0} {:>5}", table.counts[b]);
        for j in 0..4 {
            print!(" {:>7.1}", table.sigma2[(b, j)].sqrt());
        }
        println!();
    }
    let z = standardize(&scores, &table, &daily, &e.rows)?;
    let var: f64 = z.column(0).iter().map(|v| v * v).sum::<f64>() / z.nrows() as f64;
    println!("standardized mode-1 variance {var:.3}");
    Ok(())
}

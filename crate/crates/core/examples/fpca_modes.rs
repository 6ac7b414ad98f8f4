//! Functional PCA of daily profiles: variance explained and the leading modes.

use solar_downscale::datamodel::profile_matrix;
use solar_downscale::fpca::{fpca_decompose, variance_explained};
use solar_downscale::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::small())?;
    let x = profile_matrix(&ds.truth, |_| true, |_, _| true)?;
    let f = fpca_decompose(&x)?;
    println!("{} profiles", x.x.nrows());
    for j in 1..=5 {
        println!("  first {j} modes explain {:.1}%", 100.0 * variance_explained(&f, j)?);
    }
    println!("hour  mean    mode1   mode2");
    for h in 0..24 {
        println!(
            "{:>4} {:>7.4} {:>7.3} {:>7.3}",
            h + 1,
            f.mean_profile[h],
            f.basis[(h, 0)],
            f.basis[(h, 1)]
        );
    }
    Ok(())
}

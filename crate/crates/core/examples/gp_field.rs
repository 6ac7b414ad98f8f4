//! Draw spatial fields from a Gaussian process and refit its parameters.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use solar_downscale::datamodel::{CalendarIndex, DailyField, SiteGrid};
use solar_downscale::spatialfield::{fit_gp, CovFamily, FieldSampler, GpModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sites = SiteGrid::regular(-100.0, 40.0, 8, 8, 15.0)?;
    let truth = GpModel {
        j: 1,
        beta_cov: 0.0,
        beta_cov_se: 0.0,
        cov_family: CovFamily::Exponential,
        range_km: 60.0,
        sill: 1.0,
        nugget: 0.1,
        x_mean: 0.0,
        x_sd: 1.0,
        log_likelihood: 0.0,
        at_bound: vec![],
    };
    let n_days = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cal = CalendarIndex::contiguous(chrono::NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), n_days);
    let ghi: Vec<f64> = (0..sites.len() * n_days).map(|_| 2000.0 + 5000.0 * rng.random::<f64>()).collect();
    let daily = DailyField::from_values(sites.clone(), cal, ghi)?;

    let sampler = FieldSampler::new(&truth, &sites)?;
    let mut u = DMatrix::zeros(sites.len(), n_days);
    for d in 0..n_days {
        let g: Vec<f64> = (0..sites.len()).map(|s| daily.get(s, d)).collect();
        u.set_column(d, &nalgebra::DVector::from_vec(sampler.draw(&g, &mut rng)));
    }
    let fit = fit_gp(&u, &daily, 1, CovFamily::Exponential)?;
    println!("           planted   fitted");
    println!("range km  {:>8.2} {:>8.2}", truth.range_km, fit.range_km);
    println!("sill      {:>8.3} {:>8.3}", truth.sill, fit.sill);
    println!("nugget    {:>8.3} {:>8.3}", truth.nugget, fit.nugget);
    println!("GHI coef  {:>8.3} {:>8.3} (se {:.3})", truth.beta_cov, fit.beta_cov, fit.beta_cov_se);
    Ok(())
}

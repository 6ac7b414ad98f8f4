//! Compare a simulated member with the synthetic truth using the validation metrics.

use solar_downscale::assemble::SimulationOptions;
use solar_downscale::pipeline::{fit_model, simulate_member, FitOptions};
use solar_downscale::synth::{generate, SynthConfig};
use solar_downscale::validate::{
    clearsky_index, daily_total_compare, daylight_mask, derivative_compare, hourly_quantile_compare,
    semivariogram_compare, zenith_mask, KC_THRESHOLD, QQ_MAX_ZENITH,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::small())?;
    let opts = FitOptions { months: vec![7], ..FitOptions::default() };
    let model = fit_model(&ds.truth, Some(&ds.clearsky), &opts, 2)?;
    let (sim, _) = simulate_member(&model, &ds.daily, 5, 0, &SimulationOptions::default())?;

    let mask = zenith_mask(&ds.truth, QQ_MAX_ZENITH);
    let kc_o = clearsky_index(&ds.truth, &ds.clearsky, KC_THRESHOLD)?;
    let kc_s = clearsky_index(&sim, &ds.clearsky, KC_THRESHOLD)?;
    let qq = hourly_quantile_compare("clearsky_index", &kc_o, &kc_s, Some(&mask), false)?;
    println!("kc quantile gap: all hours {:.3}, hours 11-14 {:.3}", qq.max_gap, qq.max_gap_for_hours(&[11, 12, 13, 14]));

    let der = derivative_compare(&ds.truth, &sim, &daylight_mask(&ds.truth))?;
    println!(
        "dGHI/dt quartiles observed {:.1} / {:.1} / {:.1}, simulated {:.1} / {:.1} / {:.1}",
        der.observed.q1, der.observed.median, der.observed.q3, der.simulated.q1, der.simulated.median, der.simulated.q3
    );

    let dt = daily_total_compare(&ds.daily, &sim)?;
    println!("daily totals: slope {:.4}, max rel deviation {:.2e}", dt.slope, dt.max_rel_deviation);

    let (rows, _) = semivariogram_compare(&ds.truth, &sim, &[12], 8)?;
    println!("lag km   observed median   simulated median");
    for r in rows {
        println!("{:>6.1} {:>16.0} {:>18.0}", r.lag_km, r.observed[1], r.simulated[1]);
    }
    Ok(())
}

//! ODE solution and a CTMC ensemble for one scenario, with the run-to-run
//! spread of peak height and timing. Writes `ensemble.svg` to the temp dir.

use epiident::ctmc::{run_ensemble, took_off};
use epiident::rng::RngSeed;
use epiident::scenarios::grid_scenario;
use epiident::sir::{integrate_sir, peak_of};
use epiident::stats::{mean, sd};
use epiident::svg::{Plot, PALETTE};

fn main() -> epiident::Result<()> {
    let sc = grid_scenario(0.1, 0.0004, 1000)?;
    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?.trajectory;
    let (t_ode, h_ode) = peak_of(&ode)?;
    println!("{}: R0 = {:.2}, ODE peak {h_ode:.1} on day {t_ode}", sc.label, sc.r0());

    let runs = run_ensemble(&sc.params, &sc.count_initial()?, &sc.grid, 200, RngSeed::default())?;
    let peaks: Vec<(f64, f64)> = runs.iter().filter(|r| took_off(r)).map(|r| peak_of(r).unwrap()).collect();
    let (t, h): (Vec<f64>, Vec<f64>) = peaks.iter().copied().unzip();
    println!(
        "{} of {} runs took off; peak day {:.1} ± {:.1}, height {:.1} ± {:.1}",
        peaks.len(),
        runs.len(),
        mean(&t),
        sd(&t),
        mean(&h),
        sd(&h)
    );

    let mut plot = Plot::new("CTMC ensemble", "day", "prevalence").y_from_zero();
    for r in runs.iter().take(40) {
        plot.line(r.times().iter().zip(&r.prevalence).map(|(&t, &i)| [t, i]), PALETTE[0], 1.0, 0.25);
    }
    plot.line(ode.times().iter().zip(&ode.prevalence).map(|(&t, &i)| [t, i]), "black", 2.0, 1.0);
    let path = std::env::temp_dir().join("ensemble.svg");
    plot.write_to(std::fs::File::create(&path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

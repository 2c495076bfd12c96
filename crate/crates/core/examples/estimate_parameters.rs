//! Least-squares recovery of (α, β) from one CTMC realization and from a
//! noisy copy of the ODE curve.

use epiident::ctmc::simulate_daily;
use epiident::estimate::{best_fit, FitConfig};
use epiident::rng::RngSeed;
use epiident::scenarios::grid_scenario;
use epiident::sir::integrate_sir;
use epiident::synth::{gaussian_dataset, NoiseSpec};

fn main() -> epiident::Result<()> {
    let sc = grid_scenario(0.1, 0.0004, 1000)?;
    let seed = RngSeed::default();
    let config = FitConfig::around(&sc.params, sc.initial);

    let ode = integrate_sir(&sc.params, &sc.initial, &sc.grid)?.trajectory;
    let ctmc = simulate_daily(&sc.params, &sc.count_initial()?, &sc.grid, seed)?;
    let gauss = gaussian_dataset(&ode, NoiseSpec::new(0.1)?, seed.derive(&[1]))?;

    println!("truth      alpha {:.4}  beta {:.6}", sc.params.alpha, sc.params.beta);
    for (name, data) in [("ctmc", &ctmc), ("gaussian", &gauss)] {
        let e = best_fit(data, &config)?;
        println!(
            "{name:<10} alpha {:.4}  beta {:.6}  sse {:.1}  ({} iterations)",
            e.alpha_hat, e.beta_hat, e.sse, e.iterations
        );
    }
    Ok(())
}

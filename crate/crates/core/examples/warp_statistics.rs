//! Peak amplitude ratio `a` and peak shift Δt of CTMC runs against the ODE,
//! and how their spread shrinks with R₀ and population size.

use epiident::rng::RngSeed;
use epiident::scenarios::grid_scenario;
use epiident::synth::warp_statistics;

fn main() -> epiident::Result<()> {
    let scenarios = [grid_scenario(0.2, 0.0004, 1000)?, grid_scenario(0.14, 0.002, 1000)?];
    let cells = warp_statistics(&scenarios, &[100, 1000, 10_000], 200, RngSeed::default())?;
    println!("{:>6} {:>6} {:>8} {:>8}", "R0", "N", "sd(a)", "sd(dt)");
    for c in cells {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!("{:>6.2} {:>6} {:>8} {:>8}", c.r0, c.population, f(c.sd_a), f(c.sd_dt));
    }
    Ok(())
}

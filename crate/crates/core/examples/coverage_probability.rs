//! A small coverage run: how often the 68% KDE region built from each noise
//! model contains the true parameters when the data really are CTMC.
//! The scale here is far below what a reliable estimate needs.

use epiident::coverage::{run_coverage, CoverageConfig, CoverageMethod};
use epiident::rng::RngSeed;
use epiident::scenarios::grid_scenario;

fn main() -> epiident::Result<()> {
    let sc = grid_scenario(0.14, 0.002, 1000)?;
    for method in [CoverageMethod::Ctmc, CoverageMethod::Gaussian(0.1), CoverageMethod::Hybrid] {
        let mut config = CoverageConfig::new(method, RngSeed::default());
        config.j_outer = 8;
        config.m_inner = 80;
        config.reference_runs = 200;
        let r = run_coverage(&sc, &config)?;
        println!("{:<13} coverage {:.2} over {} trials", method.to_string(), r.coverage, r.members.len());
    }
    Ok(())
}

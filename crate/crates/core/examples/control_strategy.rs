//! Near-equivalent fits to two weeks of incidence give very different
//! outcomes once the same contact reduction is applied to each of them.

use epiident::rng::RngSeed;
use epiident::studies::{control_demo, histogram};

fn main() -> epiident::Result<()> {
    let demo = control_demo(5, RngSeed::default())?;
    let p = &demo.projection;
    println!(
        "{} fits, final size from {:.0} to {:.0} (ratio {:.1})",
        p.finals.len(),
        p.finals.iter().copied().fold(f64::INFINITY, f64::min),
        p.finals.iter().copied().fold(0.0, f64::max),
        p.spread_ratio().unwrap_or(f64::NAN)
    );
    for b in histogram(&p.finals, 8)? {
        println!("{:7.0}-{:<7.0} {}", b.lower, b.upper, "#".repeat(b.count));
    }
    Ok(())
}

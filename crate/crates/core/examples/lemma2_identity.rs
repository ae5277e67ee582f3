//! Monte Carlo check that the unconditional noise prediction is unbiased for the injected noise.
//!
//! An oracle built for the wrong world (its prior mean is shifted by 0.5) shows
//! what a violation looks like.
//!
//! ```text
//! cargo run --release --example lemma2_identity -- [samples]
//! ```

use recfg::metrics::lemma2_residual;
use recfg::schedule::NoiseSchedule;
use recfg::world::{AnalyticWorld, ExactOracle};

fn main() -> recfg::error::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200_000);
    let world = AnalyticWorld::toy();
    let exact = ExactOracle::new(world.clone(), NoiseSchedule::VarianceExploding);
    let shifted = AnalyticWorld::new(
        world.cond_var().to_vec(),
        vec![0.5],
        world.prior_var().to_vec(),
    )?;
    let wrong = ExactOracle::new(shifted, NoiseSchedule::VarianceExploding);
    for t in [0.1, 1.0, 10.0, 99.0] {
        let e = lemma2_residual(&exact, &world, t, n, 11)?;
        let w = lemma2_residual(&wrong, &world, t, n, 11)?;
        println!(
            "t = {t:>5}: exact {:>10.2e} ({:>5.2} se)   wrong prior {:>10.2e} ({:>7.1} se)",
            e.value[0],
            e.value[0] / e.se[0],
            w.value[0],
            w.value[0] / w.se[0]
        );
    }
    Ok(())
}

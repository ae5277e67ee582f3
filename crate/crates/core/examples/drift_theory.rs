//! Predicted mean drift of CFG sampling against the realized sampler mean.
//!
//! ```text
//! cargo run --release --example drift_theory
//! ```

use recfg::guidance::GuidanceCoefficients;
use recfg::metrics::moments_of;
use recfg::sampler::{ddim_run, GuidanceRule, Method, SamplerConfig};
use recfg::schedule::{GridSpec, NoiseSchedule, TimeGrid};
use recfg::shift::{drift_propagate, DriftOptions, DriftRecursion};
use recfg::world::{AnalyticWorld, Condition, ExactOracle, ScoreOracle};

fn main() -> recfg::error::Result<()> {
    let oracle = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
    let grid = TimeGrid::build(
        oracle.schedule(),
        &GridSpec {
            nfe: 256,
            ..GridSpec::default()
        },
    )?;
    let cond = Condition::scalar(1.0);
    // Every weight reuses the same starting noise and the sampler is affine in
    // it, so the z column is one shared draw rather than independent evidence.
    let sampler = SamplerConfig::new(Method::Ddim, grid.clone(), 100_000, 1);

    println!(
        "{:>6} {:>14} {:>14} {:>10} {:>14}",
        "gamma", "predicted", "observed", "z", "sigma-ratio"
    );
    for gamma in [1.5, 2.0, 2.5, 3.0] {
        let coeffs = vec![GuidanceCoefficients::cfg(gamma); grid.nfe()];
        let predict = |recursion| -> recfg::error::Result<f64> {
            let opts = DriftOptions {
                recursion,
                ..DriftOptions::default()
            };
            let states = drift_propagate(&oracle, oracle.world(), &coeffs, &grid, &cond, &opts)?;
            Ok(states.last().expect("initial state").delta[0])
        };
        let batch = ddim_run(
            &oracle,
            oracle.world(),
            &GuidanceRule::Cfg(gamma),
            &sampler,
            &cond,
        )?;
        let m = moments_of(&batch.x0, 1)?;
        let observed = 1.0 - m.mean[0];
        let predicted = predict(DriftRecursion::MeanExact)?;
        println!(
            "{gamma:>6} {predicted:>14.6e} {observed:>14.6e} {:>10.2} {:>14.6e}",
            (predicted - observed) / m.se_mean[0],
            predict(DriftRecursion::SigmaRatio)?
        );
    }
    Ok(())
}

//! End-to-end CFG versus ReCFG comparison on one condition.

use crate::error::Result;
use crate::guidance::{ClampMode, GuidanceCoefficients};
use crate::sampler::{ddim_run, Gamma0Source, GuidanceRule, SampleBatch, SamplerConfig};
use crate::schedule::TimeGrid;
use crate::shift::{cfg_toy_distribution, effective_gamma0, recfg_toy_distribution, ShiftReport};
use crate::table::LookupTable;
use crate::world::{AnalyticWorld, Condition, ScoreOracle};

/// Terminal batches of both samplers at one `γ` with their predicted laws.
#[derive(Debug, Clone)]
pub struct GuidedPair {
    pub gamma: f64,
    pub cfg: SampleBatch,
    pub recfg: SampleBatch,
    /// `N(c φ(γ,T), 2^(1-γ) ψ(γ,T))`.
    pub cfg_report: ShiftReport,
    /// Rectified law: mean `c` and the constant-weight variance at the
    /// effective `γ0` of the table-derived schedule. The constant-`γ0` mean
    /// coefficient is not used because the realized schedule fluctuates in
    /// sign around zero and cancels in the mean, which stays at `c`.
    pub recfg_report: ShiftReport,
    /// First component of the resolved `γ0` at each step.
    pub gamma0_per_step: Vec<f64>,
    /// Resolved ReCFG weights, one entry per step.
    pub recfg_coeffs: Vec<GuidanceCoefficients>,
}

/// Runs DDIM with CFG and with table-driven ReCFG from the same starting noise.
///
/// The reports use the first component; they describe the one-dimensional toy
/// and are only meaningful for it.
#[allow(clippy::too_many_arguments)]
pub fn guided_pair<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    table: &LookupTable,
    grid: &TimeGrid,
    cond: &Condition,
    gamma: f64,
    clamp: ClampMode,
    batch: usize,
    seed: u64,
) -> Result<GuidedPair> {
    let cfg = SamplerConfig::new(crate::sampler::Method::Ddim, grid.clone(), batch, seed);
    let cfg_batch = ddim_run(oracle, world, &GuidanceRule::Cfg(gamma), &cfg, cond)?;
    let rule = GuidanceRule::Recfg {
        gamma1: vec![gamma],
        source: Gamma0Source::Table {
            table,
            clamp,
            fallback: true,
        },
    };
    let recfg_coeffs = rule.resolve(cond, grid)?;
    let gamma0_per_step: Vec<f64> = recfg_coeffs.iter().map(|c| c.gamma0_at(0)).collect();
    let recfg_batch = ddim_run(oracle, world, &rule, &cfg, cond)?;
    let horizon = grid.horizon();
    let g0 = effective_gamma0(grid, &gamma0_per_step)?;
    Ok(GuidedPair {
        gamma,
        cfg: cfg_batch,
        recfg: recfg_batch,
        cfg_report: cfg_toy_distribution(gamma, horizon)?,
        recfg_report: ShiftReport {
            mean_coeff: 1.0,
            ..recfg_toy_distribution(gamma, g0, horizon)?
        },
        gamma0_per_step,
        recfg_coeffs,
    })
}

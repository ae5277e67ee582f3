//! Numerical laboratory for classifier-free guidance and its rectified variant
//! on analytic Gaussian diffusion worlds.
//!
//! The toy world `x0 | c ~ N(c, 1)` under the variance-exploding schedule has
//! closed-form scores, so every sampler output can be compared with an exact
//! terminal law. The modules cover:
//!
//! * [`schedule`]: noise schedules, time grids and DDIM step coefficients.
//! * [`world`]: analytic worlds and the score oracles built on them.
//! * [`guidance`]: CFG and ReCFG combiners with the feasibility clamp.
//! * [`sampler`]: batched DDIM and probability-flow ODE integration.
//! * [`shift`]: terminal mean and variance laws, the `φ` function and drift recursion.
//! * [`table`]: expectation-ratio lookup tables from oracles or prediction caches.
//! * [`metrics`]: moments, KS statistics, density curves and figure data.
//! * [`verify`]: the invariant suite behind `recfg verify`.
//! * [`cli`]: the `recfg` command line.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Quadrature nodes and weights are kept at their published digits.
#![allow(clippy::excessive_precision)]
// Per-component loops over several parallel slices read better indexed.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod output;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod shift;
pub mod summation;
pub mod table;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
pub use guidance::{ClampMode, GuidanceCoefficients};
pub use sampler::{
    ddim_run, ode_run, Gamma0Source, GuidanceRule, Method, SampleBatch, SamplerConfig,
};
pub use schedule::{GridSpec, NoiseSchedule, TimeGrid};
pub use shift::{phi_finite, phi_limit, ShiftReport};
pub use table::{build_from_oracle, BuildOptions, LookupTable};
pub use world::{AnalyticWorld, Condition, ExactOracle, PerturbedOracle, ScoreOracle};

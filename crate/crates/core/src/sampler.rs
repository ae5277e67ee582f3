//! Deterministic guided samplers: DDIM with `δ_t = 0` and the probability-flow
//! ODE integrated with classical RK4 or forward Euler.
//!
//! Chains start from `x_T ~ q_T(x | c)` of the world, chain `j` drawing from stream
//! `j` of `derive_seed(seed, INIT_PURPOSE)`. Chains run in parallel; each is a
//! deterministic function of its start so results do not depend on the worker
//! count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{combine_into, ClampMode, GuidanceCoefficients};
use crate::output::{fmt17, write_csv};
use crate::rng::{derive_seed, NormalStream};
use crate::schedule::TimeGrid;
use crate::table::LookupTable;
use crate::world::{AnalyticWorld, Condition, ScoreOracle};

const INIT_PURPOSE: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ddim,
    OdeRk4,
    OdeEuler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub grid: TimeGrid,
    pub batch: usize,
    pub seed: u64,
    /// Record every intermediate state (memory grows with `batch × nfe`).
    pub keep_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(method: Method, grid: TimeGrid, batch: usize, seed: u64) -> Self {
        Self {
            method,
            grid,
            batch,
            seed,
            keep_trajectory: false,
        }
    }
}

/// Terminal samples for one condition, row-major `[batch × dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    pub condition: Condition,
    pub x0: Vec<f64>,
    /// `trajectory[j]` holds chain `j`'s states at every grid time, row-major.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x0.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn sample(&self, j: usize) -> &[f64] {
        &self.x0[j * self.dim..(j + 1) * self.dim]
    }

    /// Component `k` of every sample.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.x0.iter().skip(k).step_by(self.dim).copied().collect()
    }

    /// CSV with columns `chain,condition,x0_0,...`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let header: Vec<String> = ["chain".to_string(), "condition".to_string()]
            .into_iter()
            .chain((0..self.dim).map(|k| format!("x0_{k}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            path,
            &header,
            (0..self.len()).map(|j| {
                [j.to_string(), self.condition.id.clone()]
                    .into_iter()
                    .chain(self.sample(j).iter().map(|v| fmt17(*v)))
                    .collect::<Vec<_>>()
            }),
        )
    }
}

/// Where the rectified `γ0` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Gamma0Source<'a> {
    /// Same `γ0` at every step; projected by `clamp`.
    Fixed { gamma0: Vec<f64>, clamp: ClampMode },
    /// Per-step values resolved from a lookup table.
    Table {
        table: &'a LookupTable,
        clamp: ClampMode,
        fallback: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceRule<'a> {
    None,
    Cfg(f64),
    Recfg {
        gamma1: Vec<f64>,
        source: Gamma0Source<'a>,
    },
}

impl GuidanceRule<'_> {
    /// Coefficients for each step of `grid` under condition `cond`.
    ///
    /// A table built on a different grid is read at the nearest stored time.
    pub fn resolve(&self, cond: &Condition, grid: &TimeGrid) -> Result<Vec<GuidanceCoefficients>> {
        let nfe = grid.nfe();
        match self {
            GuidanceRule::None => Ok(vec![GuidanceCoefficients::unguided(); nfe]),
            GuidanceRule::Cfg(g) => Ok(vec![GuidanceCoefficients::cfg(*g); nfe]),
            GuidanceRule::Recfg { gamma1, source } => match source {
                Gamma0Source::Fixed { gamma0, clamp } => {
                    let c = crate::guidance::clamp_coeffs(&GuidanceCoefficients::new(
                        gamma1.clone(),
                        gamma0.clone(),
                        *clamp,
                    ))?;
                    Ok(vec![c; nfe])
                }
                Gamma0Source::Table {
                    table,
                    clamp,
                    fallback,
                } => {
                    let same_grid = table.grid == *grid;
                    if !same_grid {
                        log::warn!(
                            "table grid ({} steps) differs from the sampler grid ({nfe} steps); using nearest-time lookup",
                            table.nfe()
                        );
                    }
                    (0..nfe)
                        .map(|i| {
                            let idx = if same_grid {
                                i
                            } else {
                                table.grid.nearest_index(grid.times()[i])
                            };
                            let g0 = table.gamma0_for(gamma1, &cond.id, idx, *clamp, *fallback)?;
                            Ok(GuidanceCoefficients::new(gamma1.clone(), g0, *clamp))
                        })
                        .collect()
                }
            },
        }
    }
}

/// Chains integrated together; fixed so that block layout never changes results.
const BLOCK: usize = 256;

/// Guided noise predictions for a block of states sharing `t`.
struct BlockEval<'a, O: ScoreOracle> {
    oracle: &'a O,
    cond: &'a [f64],
    ec: Vec<f64>,
    eu: Vec<f64>,
}

impl<'a, O: ScoreOracle> BlockEval<'a, O> {
    fn new(oracle: &'a O, cond: &'a [f64], len: usize) -> Self {
        Self {
            oracle,
            cond,
            ec: vec![0.0; len],
            eu: vec![0.0; len],
        }
    }

    fn eps(
        &mut self,
        xs: &[f64],
        t: f64,
        coeff: &GuidanceCoefficients,
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.oracle.dim();
        let n = xs.len();
        self.oracle
            .eps_cond_batch(xs, self.cond, t, &mut self.ec[..n])?;
        self.oracle.eps_uncond_batch(xs, t, &mut self.eu[..n])?;
        for ((o, ec), eu) in out
            .chunks_exact_mut(d)
            .zip(self.ec[..n].chunks_exact(d))
            .zip(self.eu[..n].chunks_exact(d))
        {
            combine_into(ec, eu, coeff, o)?;
        }
        Ok(())
    }

    /// PF-ODE velocity `f x + g² ε̂ / (2σ)`.
    fn velocity(
        &mut self,
        xs: &[f64],
        t: f64,
        coeff: &GuidanceCoefficients,
        out: &mut [f64],
    ) -> Result<()> {
        let sched = self.oracle.schedule();
        let sigma = sched.sigma(t)?;
        if !(sigma > 0.0) {
            return Err(Error::SingularSigma { t });
        }
        let (f, g2) = sched.drift_diffusion(t);
        self.eps(xs, t, coeff, out)?;
        let scale = g2 / (2.0 * sigma);
        for (o, x) in out.iter_mut().zip(xs) {
            *o = f * x + scale * *o;
        }
        Ok(())
    }
}

/// Scratch buffers for one block.
struct Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Work {
    fn new(len: usize) -> Self {
        Self {
            k: [
                vec![0.0; len],
                vec![0.0; len],
                vec![0.0; len],
                vec![0.0; len],
            ],
            tmp: vec![0.0; len],
        }
    }
}

fn ddim_step<O: ScoreOracle>(
    ev: &mut BlockEval<O>,
    w: &mut Work,
    xs: &mut [f64],
    t: f64,
    t_prev: f64,
    coeff: &GuidanceCoefficients,
) -> Result<()> {
    let (a, b) = ev.oracle.schedule().ddim_step_coeffs(t, t_prev)?;
    let eps = &mut w.k[0][..xs.len()];
    ev.eps(xs, t, coeff, eps)?;
    for (x, e) in xs.iter_mut().zip(eps.iter()) {
        *x = a * *x + b * e;
    }
    Ok(())
}

fn euler_step<O: ScoreOracle>(
    ev: &mut BlockEval<O>,
    w: &mut Work,
    xs: &mut [f64],
    t: f64,
    t_prev: f64,
    coeff: &GuidanceCoefficients,
) -> Result<()> {
    let h = t_prev - t;
    let v = &mut w.k[0][..xs.len()];
    ev.velocity(xs, t, coeff, v)?;
    for (x, v) in xs.iter_mut().zip(v.iter()) {
        *x += h * v;
    }
    Ok(())
}

fn rk4_step<O: ScoreOracle>(
    ev: &mut BlockEval<O>,
    w: &mut Work,
    xs: &mut [f64],
    t: f64,
    t_prev: f64,
    coeff: &GuidanceCoefficients,
) -> Result<()> {
    let n = xs.len();
    let h = t_prev - t;
    let mid = t + 0.5 * h;
    let [k1, k2, k3, k4] = &mut w.k;
    let tmp = &mut w.tmp[..n];
    ev.velocity(xs, t, coeff, &mut k1[..n])?;
    for j in 0..n {
        tmp[j] = xs[j] + 0.5 * h * k1[j];
    }
    ev.velocity(tmp, mid, coeff, &mut k2[..n])?;
    for j in 0..n {
        tmp[j] = xs[j] + 0.5 * h * k2[j];
    }
    ev.velocity(tmp, mid, coeff, &mut k3[..n])?;
    for j in 0..n {
        tmp[j] = xs[j] + h * k3[j];
    }
    ev.velocity(tmp, t_prev, coeff, &mut k4[..n])?;
    for j in 0..n {
        xs[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    Ok(())
}

/// Integrates the row-major block of states `xs` from `grid.horizon()` down the
/// grid, in place. When `trajectories` is given, row `j`'s state after every
/// step is appended to `trajectories[j]`.
///
/// ODE methods cannot evaluate the velocity at `σ = 0`, so a final step that
/// lands on a zero-noise time is taken with the DDIM update, which is the exact
/// flow map of an affine noise prediction frozen at the step's start.
pub fn integrate_block<O: ScoreOracle>(
    oracle: &O,
    coeffs: &[GuidanceCoefficients],
    method: Method,
    grid: &TimeGrid,
    cond: &Condition,
    xs: &mut [f64],
    mut trajectories: Option<&mut [Vec<f64>]>,
) -> Result<()> {
    let d = oracle.dim();
    Error::check_dim(d, cond.value.len())?;
    Error::check_dim(grid.nfe(), coeffs.len())?;
    if !xs.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: xs.len() % d,
        });
    }
    let record = |xs: &[f64], tr: &mut Option<&mut [Vec<f64>]>| {
        if let Some(tr) = tr.as_deref_mut() {
            for (row, dst) in xs.chunks_exact(d).zip(tr.iter_mut()) {
                dst.extend_from_slice(row);
            }
        }
    };
    let sched = oracle.schedule();
    let mut ev = BlockEval::new(oracle, &cond.value, xs.len());
    let mut w = Work::new(xs.len());
    record(xs, &mut trajectories);
    for (i, coeff) in coeffs.iter().enumerate() {
        let (t, t_prev) = grid.step(i);
        let lands_on_zero_noise = sched.sigma(t_prev)? == 0.0;
        match method {
            Method::Ddim => ddim_step(&mut ev, &mut w, xs, t, t_prev, coeff)?,
            _ if lands_on_zero_noise => ddim_step(&mut ev, &mut w, xs, t, t_prev, coeff)?,
            Method::OdeRk4 => rk4_step(&mut ev, &mut w, xs, t, t_prev, coeff)?,
            Method::OdeEuler => euler_step(&mut ev, &mut w, xs, t, t_prev, coeff)?,
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure { step: i, t: t_prev });
        }
        record(xs, &mut trajectories);
    }
    Ok(())
}

/// Single-chain form of [`integrate_block`].
pub fn integrate_from<O: ScoreOracle>(
    oracle: &O,
    coeffs: &[GuidanceCoefficients],
    method: Method,
    grid: &TimeGrid,
    cond: &Condition,
    x: &mut [f64],
    trajectory: Option<&mut Vec<f64>>,
) -> Result<()> {
    Error::check_dim(oracle.dim(), x.len())?;
    match trajectory {
        Some(tr) => {
            let mut one = [std::mem::take(tr)];
            let out = integrate_block(oracle, coeffs, method, grid, cond, x, Some(&mut one));
            *tr = std::mem::take(&mut one[0]);
            out
        }
        None => integrate_block(oracle, coeffs, method, grid, cond, x, None),
    }
}

/// Runs `cfg.batch` chains of the configured method under `rule`.
pub fn run<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    rule: &GuidanceRule,
    cfg: &SamplerConfig,
    cond: &Condition,
) -> Result<SampleBatch> {
    let d = oracle.dim();
    Error::check_dim(d, world.dim())?;
    Error::check_dim(d, cond.value.len())?;
    if cfg.batch == 0 {
        return Err(Error::Validation("sampling.batch must be >= 1".into()));
    }
    let coeffs = rule.resolve(cond, &cfg.grid)?;
    let start = world.cond_marginal(oracle.schedule(), &cond.value, cfg.grid.horizon())?;
    let init_seed = derive_seed(cfg.seed, INIT_PURPOSE);
    type Block = (Vec<f64>, Option<Vec<Vec<f64>>>);
    let blocks: Vec<Block> = (0..cfg.batch.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let chains = b * BLOCK..((b + 1) * BLOCK).min(cfg.batch);
            let mut xs = Vec::with_capacity(chains.len() * d);
            for j in chains.clone() {
                let mut stream = NormalStream::new(init_seed, j as u64);
                xs.extend((0..d).map(|k| start.mean[k] + start.var[k].sqrt() * stream.next()));
            }
            let mut tr = cfg.keep_trajectory.then(|| vec![Vec::new(); chains.len()]);
            integrate_block(
                oracle,
                &coeffs,
                cfg.method,
                &cfg.grid,
                cond,
                &mut xs,
                tr.as_deref_mut(),
            )?;
            Ok((xs, tr))
        })
        .collect::<Result<_>>()?;
    let mut x0 = Vec::with_capacity(cfg.batch * d);
    let mut trajectory = cfg.keep_trajectory.then(|| Vec::with_capacity(cfg.batch));
    for (xs, tr) in blocks {
        x0.extend(xs);
        if let (Some(all), Some(tr)) = (trajectory.as_mut(), tr) {
            all.extend(tr);
        }
    }
    Ok(SampleBatch {
        dim: d,
        condition: cond.clone(),
        x0,
        trajectory,
    })
}

/// Guided DDIM; `cfg.method` is ignored.
pub fn ddim_run<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    rule: &GuidanceRule,
    cfg: &SamplerConfig,
    cond: &Condition,
) -> Result<SampleBatch> {
    let cfg = SamplerConfig {
        method: Method::Ddim,
        ..cfg.clone()
    };
    run(oracle, world, rule, &cfg, cond)
}

/// PF-ODE sampler; uses RK4 unless `cfg.method` is `OdeEuler`.
pub fn ode_run<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    rule: &GuidanceRule,
    cfg: &SamplerConfig,
    cond: &Condition,
) -> Result<SampleBatch> {
    let method = match cfg.method {
        Method::OdeEuler => Method::OdeEuler,
        _ => Method::OdeRk4,
    };
    let cfg = SamplerConfig {
        method,
        ..cfg.clone()
    };
    run(oracle, world, rule, &cfg, cond)
}

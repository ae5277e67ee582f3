//! Expectation shift of guided sampling on the one-dimensional toy world.
//!
//! Solving the probability-flow ODE of the toy (`q_0(x|c) = N(c, 1)`,
//! `q(c) = N(0, 1)`, VE schedule) with constant weights `(gamma1, gamma0)` gives
//! an affine map `x_T -> x_0`. Starting from `x_T ~ N(c, T + 1)` the terminal law
//! is Gaussian with mean `c * m(gamma1, gamma0, T)` and variance
//! `2^gamma0 (T+1)^(1-gamma1) (T+2)^(-gamma0)`, where
//!
//! ```text
//! m = 2^(gamma0/2) [ (T+1)^(-gamma1/2) (T+2)^(-gamma0/2)
//!                    + gamma1/2 * ∫_0^T (s+1)^(-(gamma1+2)/2) (s+2)^(-gamma0/2) ds ].
//! ```
//!
//! CFG is `gamma0 = 1 - gamma`, giving `phi(gamma, T)`. The integral is evaluated
//! after substituting `v = (s+1)^(-1/2)`, which maps `[0, ∞)` onto `(0, 1]` and
//! turns the CFG integrand into the smooth `2 (1 + v^2)^((gamma-1)/2)`.
//!
//! The drift of a deterministic DDIM sampler's mean away from the forward
//! marginal mean is propagated step by step; see [`DriftRecursion`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{combine_into, residual_into, GuidanceCoefficients};
use crate::quadrature::{integrate, QuadratureOptions};
use crate::rng::{derive_seed, NormalStream};
use crate::schedule::TimeGrid;
use crate::summation::NeumaierSum;
use crate::world::{AnalyticWorld, Condition, ScoreOracle};

const LIMIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    Quadrature,
    ClosedForm,
    Recurrence,
}

impl ReportSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportSource::Quadrature => "quadrature",
            ReportSource::ClosedForm => "closed_form",
            ReportSource::Recurrence => "recurrence",
        }
    }
}

/// Terminal law `N(c * mean_coeff, variance)` of the guided toy sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub gamma1: f64,
    pub gamma0: f64,
    /// Horizon `T`; `f64::INFINITY` for the limit.
    pub horizon: f64,
    pub mean_coeff: f64,
    pub variance: f64,
    pub source: ReportSource,
}

/// `∫_a^b (s+1)^(-(g1+2)/2) (s+2)^(-g0/2) ds` for `0 <= a <= b <= ∞`.
fn shift_integral(
    gamma1: f64,
    gamma0: f64,
    a: f64,
    b: f64,
    opts: QuadratureOptions,
) -> Result<f64> {
    let v_hi = (a + 1.0).powf(-0.5);
    let v_lo = if b.is_infinite() {
        0.0
    } else {
        (b + 1.0).powf(-0.5)
    };
    let p = gamma1 + gamma0 - 1.0;
    let q = -0.5 * gamma0;
    let integrand = move |v: f64| {
        let base = (1.0 + v * v).powf(q);
        if p == 0.0 {
            2.0 * base
        } else {
            2.0 * v.powf(p) * base
        }
    };
    Ok(integrate(integrand, v_lo, v_hi, opts)?.value)
}

/// `(T+1)^(1-γ) / ((T+1)^γ (T+2)^(1-γ))` written as `ψ(γ, T)`; tends to 1 as `T -> ∞`.
pub fn psi(gamma: f64, horizon: f64) -> f64 {
    if horizon.is_infinite() {
        return 1.0;
    }
    ((1.0 - gamma) * (horizon + 1.0).ln() - (1.0 - gamma) * (horizon + 2.0).ln()).exp()
}

/// Mean factor for constant weights `(gamma1, gamma0)` and finite horizon.
pub fn mean_coeff(gamma1: f64, gamma0: f64, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!(
            "horizon must be finite and > 0, got {horizon}"
        )));
    }
    if !(gamma1 > 0.0) || gamma1 + gamma0 <= 0.0 {
        return Err(Error::Domain(format!(
            "need gamma1 > 0 and gamma1 + gamma0 > 0, got ({gamma1}, {gamma0})"
        )));
    }
    let boundary =
        (-0.5 * gamma1 * (horizon + 1.0).ln() - 0.5 * gamma0 * (horizon + 2.0).ln()).exp();
    let integral = shift_integral(gamma1, gamma0, 0.0, horizon, QuadratureOptions::default())?;
    Ok(2f64.powf(0.5 * gamma0) * (boundary + 0.5 * gamma1 * integral))
}

/// `φ(γ, T)`: the factor multiplying `c` in the CFG terminal mean.
pub fn phi_finite(gamma: f64, horizon: f64) -> Result<f64> {
    if !(gamma >= 1.0) {
        return Err(Error::Domain(format!(
            "phi requires gamma >= 1, got {gamma}"
        )));
    }
    mean_coeff(gamma, 1.0 - gamma, horizon)
}

/// `φ(γ) = lim_{T -> ∞} φ(γ, T) = γ 2^((1-γ)/2) ∫_0^1 (1+v^2)^((γ-1)/2) dv`.
pub fn phi_limit(gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!(
            "phi requires finite gamma >= 1, got {gamma}"
        )));
    }
    // the integral grows like 2^((γ-1)/2); keep the tolerance relative to φ
    let opts = QuadratureOptions {
        abs_tol: LIMIT_TOL * 2f64.powf(0.5 * (gamma - 1.0)).max(1.0),
        ..QuadratureOptions::default()
    };
    let integral = shift_integral(gamma, 1.0 - gamma, 0.0, f64::INFINITY, opts)?;
    Ok(2f64.powf(0.5 * (1.0 - gamma)) * 0.5 * gamma * integral)
}

/// Integer argument of the closed forms: `Odd(n)` is `γ = 2n + 1`, `Even(n)` is `γ = 2n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Odd(u32),
    Even(u32),
}

impl Parity {
    pub fn gamma(&self) -> f64 {
        match *self {
            Parity::Odd(n) => 2.0 * n as f64 + 1.0,
            Parity::Even(n) => 2.0 * n as f64,
        }
    }

    /// The parity form of an integer `γ >= 1`, if `γ` is an integer.
    pub fn from_gamma(gamma: f64) -> Option<Parity> {
        if gamma < 1.0 || gamma.fract() != 0.0 || gamma > u32::MAX as f64 {
            return None;
        }
        let g = gamma as u32;
        Some(if g % 2 == 1 {
            Parity::Odd(g / 2)
        } else {
            Parity::Even(g / 2)
        })
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `ln (2k)!!`.
fn ln_double_factorial_even(k: u32) -> f64 {
    k as f64 * std::f64::consts::LN_2 + ln_gamma(k as f64 + 1.0)
}

/// `ln (2k-1)!!`.
fn ln_double_factorial_odd(k: u32) -> f64 {
    ln_gamma(2.0 * k as f64 + 1.0) - ln_double_factorial_even(k)
}

/// Exact finite-sum value of `φ` at an integer argument.
///
/// Odd: `φ(2n+1) = 2^-n Σ_k C(n,k) (2n+1)/(2n-2k+1)`.
/// Even (`n >= 1`): the double-factorial expansion obtained through `u = sqrt(s+2)`.
/// Double factorials are handled in log space once `n > 20`.
pub fn phi_closed(parity: Parity) -> Result<f64> {
    const SQRT2: f64 = std::f64::consts::SQRT_2;
    // ln((√2-1)/(√2+1))
    let log_ratio = ((SQRT2 - 1.0) / (SQRT2 + 1.0)).ln();
    match parity {
        Parity::Odd(n) => {
            let nf = n as f64;
            let mut acc = NeumaierSum::new();
            if n <= 20 {
                // C(n,k) 2^-n built incrementally
                let mut weight = 0.5f64.powi(n as i32);
                for k in 0..=n {
                    acc.add(weight * (2.0 * nf + 1.0) / (2.0 * nf - 2.0 * k as f64 + 1.0));
                    weight *= (nf - k as f64) / (k as f64 + 1.0);
                }
            } else {
                for k in 0..=n {
                    let kf = k as f64;
                    let ln_w = ln_gamma(nf + 1.0)
                        - ln_gamma(kf + 1.0)
                        - ln_gamma(nf - kf + 1.0)
                        - nf * std::f64::consts::LN_2;
                    acc.add(ln_w.exp() * (2.0 * nf + 1.0) / (2.0 * nf - 2.0 * kf + 1.0));
                }
            }
            Ok(acc.value())
        }
        Parity::Even(0) => Err(Error::Domain("even closed form needs n >= 1".into())),
        Parity::Even(1) => Ok(2f64.powf(-0.5) * (SQRT2 - 0.5 * log_ratio)),
        Parity::Even(n) => {
            let nf = n as f64;
            let tail = 2.0 * SQRT2 - log_ratio;
            if n <= 20 {
                let mut ratio = 2.0; // (2k)!!/(2k-1)!! at k = 1
                let mut sum = NeumaierSum::new();
                for k in 2..=n {
                    let kf = k as f64;
                    ratio *= 2.0 * kf / (2.0 * kf - 1.0);
                    sum.add(ratio / kf * 2f64.powf(kf - 0.5));
                }
                // (2n-1)!!/(2n)!! = 1/ratio at k = n
                let prefactor = SQRT2 * nf / (ratio * 2f64.powi(n as i32));
                Ok(prefactor * (sum.value() + tail))
            } else {
                let ln_pre = ln_double_factorial_odd(n) - ln_double_factorial_even(n)
                    + 0.5 * std::f64::consts::LN_2
                    + nf.ln()
                    - nf * std::f64::consts::LN_2;
                let mut acc = NeumaierSum::new();
                for k in 2..=n {
                    let kf = k as f64;
                    let ln_term =
                        ln_double_factorial_even(k) - ln_double_factorial_odd(k) - kf.ln()
                            + (kf - 0.5) * std::f64::consts::LN_2;
                    acc.add((ln_pre + ln_term).exp());
                }
                acc.add(ln_pre.exp() * tail);
                Ok(acc.value())
            }
        }
    }
}

/// `φ(γ+2) - 1 - (γ+1)/(2γ) φ(γ)`; zero by integration by parts.
pub fn phi_recurrence_residual(gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0) {
        return Err(Error::Domain(format!(
            "recurrence requires gamma >= 1, got {gamma}"
        )));
    }
    Ok(phi_limit(gamma + 2.0)? - 1.0 - (gamma + 1.0) / (2.0 * gamma) * phi_limit(gamma)?)
}

/// `φ(γ)` obtained by stepping the recurrence up from a base point in `[1, 3)`.
pub fn phi_via_recurrence(gamma: f64) -> Result<f64> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!(
            "phi requires finite gamma >= 1, got {gamma}"
        )));
    }
    let steps = ((gamma - 1.0) / 2.0).floor() as u32;
    let mut g = gamma - 2.0 * steps as f64;
    let mut phi = phi_limit(g)?;
    for _ in 0..steps {
        phi = 1.0 + (g + 1.0) / (2.0 * g) * phi;
        g += 2.0;
    }
    Ok(phi)
}

/// `h1(γ) = γ (7/15) (10/7)^((5-γ)/2)`, the lower bound on `[1, 3]`.
pub fn h1(gamma: f64) -> f64 {
    gamma * 7.0 / 15.0 * (10.0f64 / 7.0).powf(0.5 * (5.0 - gamma))
}

/// `h2(γ) = γ (2/3)^((γ-1)/2)`, the lower bound on `[3, 5]`.
pub fn h2(gamma: f64) -> f64 {
    gamma * (2.0f64 / 3.0).powf(0.5 * (gamma - 1.0))
}

/// Largest of the lower bounds that apply at `γ`.
pub fn phi_lower_bound(gamma: f64) -> f64 {
    let mut bound = f64::NEG_INFINITY;
    if (1.0..=3.0).contains(&gamma) {
        bound = bound.max(h1(gamma));
    }
    if (3.0..=5.0).contains(&gamma) {
        bound = bound.max(h2(gamma));
    }
    if gamma >= 3.0 {
        bound = bound.max(2.0);
    }
    bound
}

/// Whether `φ(γ)` satisfies every bound that applies at `γ`.
pub fn phi_bounds_check(gamma: f64) -> bool {
    if !(gamma >= 1.0) {
        return false;
    }
    match phi_limit(gamma) {
        // equality holds at γ = 3, so allow quadrature round-off
        Ok(phi) => phi >= phi_lower_bound(gamma) - 1e-11,
        Err(_) => false,
    }
}

/// Terminal law of CFG on the toy; `horizon = ∞` gives the limit law.
pub fn cfg_toy_distribution(gamma: f64, horizon: f64) -> Result<ShiftReport> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
    }
    let mean_coeff = if horizon.is_infinite() {
        phi_limit(gamma)?
    } else {
        phi_finite(gamma, horizon)?
    };
    Ok(ShiftReport {
        gamma1: gamma,
        gamma0: 1.0 - gamma,
        horizon,
        mean_coeff,
        variance: 2f64.powf(1.0 - gamma) * psi(gamma, horizon),
        source: ReportSource::Quadrature,
    })
}

/// Variance of the toy terminal law under constant `(gamma1, gamma0)`:
/// `2^γ0 (T+1)^(1-γ1) (T+2)^(-γ0)`.
pub fn recfg_variance(gamma1: f64, gamma0: f64, horizon: f64) -> f64 {
    (gamma0 * std::f64::consts::LN_2 + (1.0 - gamma1) * (horizon + 1.0).ln()
        - gamma0 * (horizon + 2.0).ln())
    .exp()
}

/// Terminal law under constant rectified weights.
pub fn recfg_toy_distribution(gamma1: f64, gamma0: f64, horizon: f64) -> Result<ShiftReport> {
    Ok(ShiftReport {
        gamma1,
        gamma0,
        horizon,
        mean_coeff: mean_coeff(gamma1, gamma0, horizon)?,
        variance: recfg_variance(gamma1, gamma0, horizon),
        source: ReportSource::Quadrature,
    })
}

/// State `x_t` of the toy PF-ODE started from `x_T` at time `T`, for constant weights.
pub fn toy_pf_ode_solution(
    gamma1: f64,
    gamma0: f64,
    c: f64,
    x_horizon: f64,
    horizon: f64,
    t: f64,
) -> Result<f64> {
    if !(0.0 <= t && t <= horizon && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "need 0 <= t <= T < ∞, got t = {t}, T = {horizon}"
        )));
    }
    let growth = |s: f64| (0.5 * gamma1 * (s + 1.0).ln() + 0.5 * gamma0 * (s + 2.0).ln()).exp();
    let integral = shift_integral(gamma1, gamma0, t, horizon, QuadratureOptions::default())?;
    Ok(growth(t) * (x_horizon / growth(horizon) + c * 0.5 * gamma1 * integral))
}

/// Constant `gamma0` giving the same toy terminal variance as a piecewise-constant
/// per-step schedule on `grid` (step `i` holds on `[t_{i+1}, t_i]`).
pub fn effective_gamma0(grid: &TimeGrid, gamma0_per_step: &[f64]) -> Result<f64> {
    Error::check_dim(grid.nfe(), gamma0_per_step.len())?;
    let mut weighted = NeumaierSum::new();
    for (i, g0) in gamma0_per_step.iter().enumerate() {
        let (t, t_prev) = grid.step(i);
        weighted.add(g0 * ((t + 2.0) / (t_prev + 2.0)).ln());
    }
    Ok(weighted.value() / ((grid.horizon() + 2.0) / (grid.terminal() + 2.0)).ln())
}

/// Drift `Δ_t = E[x_t] - E[x̃_t]` after `t_index` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftState {
    pub t_index: usize,
    pub t: f64,
    pub delta: Vec<f64>,
}

/// Form of the one-step drift update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftRecursion {
    /// `Δ_prev = a Δ_t - b (E_x̃[γ1 ε_c + γ0 ε_u] - E_x[ε_c])`, with `x̃` the forward
    /// marginal translated by `-Δ_t`. Exact for affine oracles.
    #[default]
    MeanExact,
    /// `Δ_prev = (σ_prev/σ_t) Δ_t - b E_x[(γ1-1) ε_c + γ0 ε_u]` under the forward
    /// marginal. This replaces `E_x̃[ε_c]` by `-Δ_t/σ_t`, which holds when `Δ_t = 0`
    /// but not in general, so over many steps it underestimates the drift.
    SigmaRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftOptions {
    pub mc_samples: usize,
    pub seed: u64,
    /// Use Monte Carlo even for affine oracles.
    pub force_monte_carlo: bool,
    pub recursion: DriftRecursion,
}

impl Default for DriftOptions {
    fn default() -> Self {
        Self {
            mc_samples: 100_000,
            seed: 0,
            force_monte_carlo: false,
            recursion: DriftRecursion::MeanExact,
        }
    }
}

/// Per-step expectations needed by the update.
struct StepMoments {
    /// `E_x̃[γ1 ε_c + γ0 ε_u]` or, for the sigma-ratio form, `E_x[residual]`.
    guided: Vec<f64>,
    /// `E_x[ε_c]` under the untranslated forward marginal.
    cond: Vec<f64>,
}

/// Propagates the drift recursion from `Δ_T = 0` down the grid.
///
/// Affine oracles are evaluated at the marginal mean directly unless
/// `force_monte_carlo` is set. Otherwise step `i` draws `mc_samples` pairs
/// `(x_0, ε)` from streams of `derive_seed(seed, i)`.
pub fn drift_propagate<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    coeffs: &[GuidanceCoefficients],
    grid: &TimeGrid,
    cond: &Condition,
    opts: &DriftOptions,
) -> Result<Vec<DriftState>> {
    let d = oracle.dim();
    Error::check_dim(d, cond.value.len())?;
    Error::check_dim(grid.nfe(), coeffs.len())?;
    let sched = oracle.schedule();
    let analytic = oracle.is_affine() && !opts.force_monte_carlo;
    if !analytic && opts.mc_samples < 2 {
        return Err(Error::Validation("drift mc_samples must be >= 2".into()));
    }
    let mut delta = vec![0.0; d];
    let mut states = Vec::with_capacity(grid.nfe() + 1);
    states.push(DriftState {
        t_index: 0,
        t: grid.horizon(),
        delta: delta.clone(),
    });
    for (i, coeff) in coeffs.iter().enumerate() {
        let (t, t_prev) = grid.step(i);
        let (alpha, sigma) = sched.eval(t)?;
        let (alpha_prev, sigma_prev) = sched.eval(t_prev)?;
        let a = alpha_prev / alpha;
        let b = sigma_prev - a * sigma;
        // the sigma-ratio form evaluates everything under the untranslated marginal
        let shift: Vec<f64> = match opts.recursion {
            DriftRecursion::MeanExact => delta.clone(),
            DriftRecursion::SigmaRatio => vec![0.0; d],
        };
        let m = if analytic {
            step_moments_analytic(oracle, coeff, cond, alpha, t, &shift, opts.recursion)?
        } else {
            step_moments_mc(oracle, world, coeff, cond, alpha, sigma, t, &shift, opts, i)?
        };
        for k in 0..d {
            delta[k] = match opts.recursion {
                DriftRecursion::MeanExact => a * delta[k] - b * (m.guided[k] - m.cond[k]),
                DriftRecursion::SigmaRatio => sigma_prev / sigma * delta[k] - b * m.guided[k],
            };
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure { step: i, t: t_prev });
        }
        states.push(DriftState {
            t_index: i + 1,
            t: t_prev,
            delta: delta.clone(),
        });
    }
    Ok(states)
}

fn guided_term(
    ec: &[f64],
    eu: &[f64],
    coeff: &GuidanceCoefficients,
    recursion: DriftRecursion,
    out: &mut [f64],
) -> Result<()> {
    match recursion {
        DriftRecursion::MeanExact => combine_into(ec, eu, coeff, out),
        DriftRecursion::SigmaRatio => residual_into(ec, eu, coeff, out),
    }
}

fn step_moments_analytic<O: ScoreOracle>(
    oracle: &O,
    coeff: &GuidanceCoefficients,
    cond: &Condition,
    alpha: f64,
    t: f64,
    shift: &[f64],
    recursion: DriftRecursion,
) -> Result<StepMoments> {
    let d = oracle.dim();
    let mean: Vec<f64> = cond.value.iter().map(|c| alpha * c).collect();
    let shifted: Vec<f64> = mean.iter().zip(shift).map(|(m, s)| m - s).collect();
    let (ec, eu) = oracle.eps_pair(&shifted, &cond.value, t)?;
    let mut guided = vec![0.0; d];
    guided_term(&ec, &eu, coeff, recursion, &mut guided)?;
    let mut cond_mean = vec![0.0; d];
    oracle.eps_cond_into(&mean, &cond.value, t, &mut cond_mean)?;
    Ok(StepMoments {
        guided,
        cond: cond_mean,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_moments_mc<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    coeff: &GuidanceCoefficients,
    cond: &Condition,
    alpha: f64,
    sigma: f64,
    t: f64,
    shift: &[f64],
    opts: &DriftOptions,
    step: usize,
) -> Result<StepMoments> {
    let d = oracle.dim();
    let step_seed = derive_seed(opts.seed, step as u64);
    let mut acc_guided = vec![NeumaierSum::new(); d];
    let mut acc_cond = vec![NeumaierSum::new(); d];
    let (mut x0, mut x, mut xs) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut ec, mut eu, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for j in 0..opts.mc_samples {
        let mut stream = NormalStream::new(step_seed, j as u64);
        world.draw_conditional_into(&cond.value, &mut stream, &mut x0);
        for k in 0..d {
            x[k] = alpha * x0[k] + sigma * stream.next();
            xs[k] = x[k] - shift[k];
        }
        oracle.eps_cond_into(&xs, &cond.value, t, &mut ec)?;
        oracle.eps_uncond_into(&xs, t, &mut eu)?;
        guided_term(&ec, &eu, coeff, opts.recursion, &mut g)?;
        oracle.eps_cond_into(&x, &cond.value, t, &mut ec)?;
        for k in 0..d {
            acc_guided[k].add(g[k]);
            acc_cond[k].add(ec[k]);
        }
    }
    let n = opts.mc_samples as f64;
    Ok(StepMoments {
        guided: acc_guided.iter().map(|a| a.value() / n).collect(),
        cond: acc_cond.iter().map(|a| a.value() / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::ClampMode;
    use crate::schedule::NoiseSchedule;
    use crate::world::ExactOracle;

    #[test]
    fn special_values_of_the_limit() {
        assert!((phi_limit(1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((phi_limit(3.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((phi_limit(5.0).unwrap() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn finite_horizon_values() {
        // γ = 1 has an exact antiderivative and equals 1 for every T
        assert!((phi_finite(1.0, 1e3).unwrap() - 1.0).abs() < 1e-9);
        // reference values from 40-digit quadrature of the untransformed integral
        assert!((phi_finite(2.0, 1e6).unwrap() - 1.622_518_133_830_448).abs() < 1e-9);
        assert!((phi_finite(3.0, 1e6).unwrap() - 2.0).abs() <= 1e-3);
        assert!((phi_finite(3.0, 1e6).unwrap() - 1.999_000_000_500_000).abs() < 1e-10);
        assert!((phi_finite(2.0, 99.0).unwrap() - 1.552_631_885_957_088).abs() < 1e-10);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(phi_limit(0.5), Err(Error::Domain(_))));
        assert!(matches!(phi_finite(2.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(phi_closed(Parity::Even(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn closed_forms() {
        assert!((phi_closed(Parity::Odd(0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((phi_closed(Parity::Odd(1)).unwrap() - 2.0).abs() < 1e-15);
        assert!((phi_closed(Parity::Odd(2)).unwrap() - 7.0 / 3.0).abs() < 1e-15);
        assert!((phi_closed(Parity::Even(1)).unwrap() - 1.623_225_240_140_230_5).abs() < 1e-14);
        assert!((phi_closed(Parity::Even(2)).unwrap() - 2.217_418_930_105_172_9).abs() < 1e-13);
        assert!((phi_closed(Parity::Even(5)).unwrap() - 2.345_369_116_525_474_9).abs() < 1e-13);
    }

    #[test]
    fn closed_forms_agree_across_the_log_space_switch() {
        for n in [18u32, 20, 21, 22, 30] {
            let even = phi_closed(Parity::Even(n)).unwrap();
            let limit = phi_limit(2.0 * n as f64).unwrap();
            assert!(
                (even - limit).abs() < 1e-9,
                "even n = {n}: {even} vs {limit}"
            );
            let odd = phi_closed(Parity::Odd(n)).unwrap();
            let limit = phi_limit(2.0 * n as f64 + 1.0).unwrap();
            assert!((odd - limit).abs() < 1e-9, "odd n = {n}: {odd} vs {limit}");
        }
    }

    #[test]
    fn odd_sequence_tends_to_two() {
        let v = phi_closed(Parity::Odd(50)).unwrap();
        assert!((v - 2.0).abs() < 0.05);
        assert!((v - 2.020_862_465_174_249_6).abs() < 1e-12);
    }

    #[test]
    fn recurrence_holds() {
        for g in [1.0, 2.0, 3.0, 3.7] {
            assert!(phi_recurrence_residual(g).unwrap().abs() < 1e-10);
        }
        assert!(
            (phi_via_recurrence(7.0).unwrap() - phi_closed(Parity::Odd(3)).unwrap()).abs() < 1e-11
        );
    }

    #[test]
    fn bounds() {
        assert!((h1(1.0) - 20.0 / 21.0).abs() < 1e-15);
        assert!((h1(3.0) - 2.0).abs() < 1e-15);
        assert!((h2(3.0) - 2.0).abs() < 1e-15);
        for g in [1.0, 3.0, 4.0, 4.5, 10.0] {
            assert!(phi_bounds_check(g), "gamma = {g}");
        }
        assert!(!phi_bounds_check(0.5));
    }

    #[test]
    fn toy_distributions() {
        let r = cfg_toy_distribution(1.0, 1e8).unwrap();
        assert!((r.mean_coeff - 1.0).abs() < 1e-9);
        assert!((r.variance - 1.0).abs() < 1e-12);
        let r = cfg_toy_distribution(2.5, f64::INFINITY).unwrap();
        assert!((r.variance - 2f64.powf(-1.5)).abs() < 1e-15);
        let r = cfg_toy_distribution(3.0, f64::INFINITY).unwrap();
        assert!((r.mean_coeff - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recfg_variance_values() {
        for t in [1.0, 99.0, 1e4] {
            assert!((recfg_variance(1.0, 0.0, t) - 1.0).abs() < 1e-15);
        }
        assert!((recfg_variance(2.0, 0.0, 99.0) - 0.01).abs() < 1e-15);
        assert!((recfg_variance(2.0, -1.0, 99.0) - 0.505).abs() < 1e-14);
    }

    #[test]
    fn recfg_with_zero_gamma0_is_unbiased() {
        for g1 in [1.5, 2.0, 4.0] {
            assert!((mean_coeff(g1, 0.0, 99.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_variance_equals_general_formula() {
        for g in [1.5, 2.0, 2.5] {
            let a = cfg_toy_distribution(g, 99.0).unwrap().variance;
            assert!((a - recfg_variance(g, 1.0 - g, 99.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn pf_ode_solution_end_points() {
        let x = toy_pf_ode_solution(2.0, -1.0, 1.0, 3.0, 99.0, 99.0).unwrap();
        assert!((x - 3.0).abs() < 1e-14);
        let x0 = toy_pf_ode_solution(2.0, -1.0, 1.0, 2.0, 99.0, 0.0).unwrap();
        assert!(
            (x0 - phi_finite(2.0, 99.0).unwrap() - 2f64.powf(-0.5) / 100.0 * 101f64.sqrt()).abs()
                < 1e-12
        );
    }

    #[test]
    fn effective_gamma0_of_constant_schedule() {
        let grid = TimeGrid::uniform_time(99.0, 50, 1e-3).unwrap();
        let g = effective_gamma0(&grid, &vec![-0.3; 50]).unwrap();
        assert!((g + 0.3).abs() < 1e-14);
    }

    #[test]
    fn single_drift_step_matches_hand_computation() {
        let oracle = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
        let grid = TimeGrid::from_times(vec![1.0, 0.5]).unwrap();
        let states = drift_propagate(
            &oracle,
            oracle.world(),
            &[GuidanceCoefficients::cfg(2.0)],
            &grid,
            &Condition::scalar(1.0),
            &DriftOptions::default(),
        )
        .unwrap();
        let expected = -((0.5f64.sqrt() - 1.0) * (1.0 - 2.0) * (1.0 / 3.0));
        assert!((states[1].delta[0] - expected).abs() < 1e-15);
        assert!((expected + 0.097_631_072_9).abs() < 1e-9);
    }

    #[test]
    fn unguided_drift_vanishes() {
        let oracle = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
        let grid = TimeGrid::uniform_time(99.0, 32, 1e-3).unwrap();
        let coeffs = vec![GuidanceCoefficients::new(vec![1.0], vec![0.0], ClampMode::Off); 32];
        let states = drift_propagate(
            &oracle,
            oracle.world(),
            &coeffs,
            &grid,
            &Condition::scalar(1.0),
            &DriftOptions::default(),
        )
        .unwrap();
        assert!(states.iter().all(|s| s.delta[0] == 0.0));
    }

    #[test]
    fn recursions_agree_on_the_first_step_only() {
        let oracle = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
        let grid = TimeGrid::from_times(vec![4.0, 1.0, 0.25]).unwrap();
        let coeffs = vec![GuidanceCoefficients::cfg(2.0); 2];
        let run = |recursion| {
            let opts = DriftOptions {
                recursion,
                ..DriftOptions::default()
            };
            drift_propagate(
                &oracle,
                oracle.world(),
                &coeffs,
                &grid,
                &Condition::scalar(1.0),
                &opts,
            )
            .unwrap()
        };
        let exact = run(DriftRecursion::MeanExact);
        let ratio = run(DriftRecursion::SigmaRatio);
        assert!((exact[1].delta[0] - ratio[1].delta[0]).abs() < 1e-15);
        assert!((exact[2].delta[0] - ratio[2].delta[0]).abs() > 1e-3);
    }

    #[test]
    fn monte_carlo_drift_tracks_the_analytic_path() {
        let oracle = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
        let grid = TimeGrid::uniform_time(9.0, 8, 1e-2).unwrap();
        let coeffs = vec![GuidanceCoefficients::cfg(2.0); 8];
        let cond = Condition::scalar(1.0);
        let analytic = drift_propagate(
            &oracle,
            oracle.world(),
            &coeffs,
            &grid,
            &cond,
            &DriftOptions::default(),
        )
        .unwrap();
        let opts = DriftOptions {
            mc_samples: 20_000,
            seed: 5,
            force_monte_carlo: true,
            ..DriftOptions::default()
        };
        let mc = drift_propagate(&oracle, oracle.world(), &coeffs, &grid, &cond, &opts).unwrap();
        let (a, m) = (
            analytic.last().unwrap().delta[0],
            mc.last().unwrap().delta[0],
        );
        assert!((a - m).abs() < 0.05, "{a} vs {m}");
    }
}

//! Noise schedules, time grids, forward perturbation and DDIM step coefficients.
//!
//! Time is continuous. A schedule maps `t` to `(alpha_t, sigma_t)` so that the
//! forward perturbation is `x_t = alpha_t * x_0 + sigma_t * eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of schedule together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum NoiseSchedule {
    /// `alpha = 1`, `sigma = sqrt(t)`.
    #[serde(rename = "ve")]
    #[default]
    VarianceExploding,
    /// Linear-beta variance preserving schedule,
    /// `alpha = exp(-t^2 (beta_max - beta_min) / 4 - t beta_min / 2)`, `sigma = sqrt(1 - alpha^2)`.
    #[serde(rename = "vp")]
    VariancePreserving { beta_min: f64, beta_max: f64 },
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::VarianceExploding => Ok(()),
            NoiseSchedule::VariancePreserving { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(Error::Validation(format!(
                        "schedule: need 0 < beta_min <= beta_max, got beta_min = {beta_min}, beta_max = {beta_max}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Returns `(alpha_t, sigma_t)`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!(
                "schedule evaluated at t = {t}; need finite t >= 0"
            )));
        }
        Ok(self.eval_unchecked(t))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, t: f64) -> (f64, f64) {
        match *self {
            NoiseSchedule::VarianceExploding => (1.0, t.sqrt()),
            NoiseSchedule::VariancePreserving { beta_min, beta_max } => {
                let log_alpha = -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min;
                let alpha = log_alpha.exp();
                // 1 - alpha^2 without cancellation for small t
                let sigma = (-(2.0 * log_alpha).exp_m1()).sqrt();
                (alpha, sigma)
            }
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(a, _)| a)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.eval(t).map(|(_, s)| s)
    }

    /// Signal-to-noise ratio `alpha^2 / sigma^2`; infinite at `sigma = 0`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.eval(t)?;
        Ok(a * a / (s * s))
    }

    /// Drift and squared diffusion `(f_t, g_t^2)` of the forward SDE
    /// `dx = f_t x dt + g_t dw`.
    pub fn drift_diffusion(&self, t: f64) -> (f64, f64) {
        match *self {
            NoiseSchedule::VarianceExploding => (0.0, 1.0),
            NoiseSchedule::VariancePreserving { beta_min, beta_max } => {
                let beta = beta_min + t * (beta_max - beta_min);
                (-0.5 * beta, beta)
            }
        }
    }

    /// Inverse of `t -> sigma_t` (sigma is strictly increasing for both kinds).
    pub fn time_for_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0) {
            return Err(Error::Domain(format!("sigma = {sigma} must be >= 0")));
        }
        match *self {
            NoiseSchedule::VarianceExploding => Ok(sigma * sigma),
            NoiseSchedule::VariancePreserving { beta_min, beta_max } => {
                if sigma >= 1.0 {
                    return Err(Error::Domain(format!("VP sigma = {sigma} must be < 1")));
                }
                // -2 log alpha = -ln(1 - sigma^2) = t beta_min + t^2 (beta_max - beta_min) / 2
                let target = -(-sigma * sigma).ln_1p();
                let a = 0.5 * (beta_max - beta_min);
                let b = beta_min;
                if a == 0.0 {
                    return Ok(target / b);
                }
                Ok((-b + (b * b + 4.0 * a * target).sqrt()) / (2.0 * a))
            }
        }
    }

    /// Coefficients `(a, b)` of the deterministic DDIM update
    /// `x_prev = a * x_t + b * eps_hat`, with `a = alpha_prev / alpha_t` and
    /// `b = sigma_prev - a * sigma_t`.
    pub fn ddim_step_coeffs(&self, t: f64, t_prev: f64) -> Result<(f64, f64)> {
        if !(t > t_prev) {
            return Err(Error::Ordering { t, t_prev });
        }
        let (alpha_t, sigma_t) = self.eval(t)?;
        let (alpha_prev, sigma_prev) = self.eval(t_prev)?;
        let a = alpha_prev / alpha_t;
        Ok((a, sigma_prev - a * sigma_t))
    }

    /// `alpha_t * x0 + sigma_t * noise`.
    pub fn forward_perturb(&self, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(x0.len(), noise.len())?;
        let (alpha, sigma) = self.eval(t)?;
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(x, n)| alpha * x + sigma * n)
            .collect())
    }
}

/// How evaluation times are spread over `[t_min, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridSpacing {
    /// Uniform in `t`.
    UniformTime,
    /// Uniform in `sigma^(1/rho)`; `rho = 1` is uniform in sigma.
    SigmaPower { rho: f64 },
}

impl Default for GridSpacing {
    fn default() -> Self {
        GridSpacing::SigmaPower { rho: 2.0 }
    }
}

/// Parameters from which a [`TimeGrid`] is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub nfe: usize,
    pub t_min: f64,
    pub spacing: GridSpacing,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: 99.0,
            nfe: 4096,
            t_min: 1e-3,
            spacing: GridSpacing::default(),
        }
    }
}

/// Strictly decreasing sequence of times `T = t_N > ... > t_0`.
///
/// The first `nfe()` entries are the times at which the network is evaluated;
/// the last entry is the terminal time (0, or `t_min` for truncated grids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(times: Vec<f64>) -> Result<Self> {
        TimeGrid::from_times(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.times
    }
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Validation(format!(
                "time grid needs at least 2 points, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Validation(
                "time grid entries must be finite and >= 0".into(),
            ));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[0] > w[1])) {
            return Err(Error::Validation(format!(
                "time grid must be strictly decreasing; violated at index {}: {} -> {}",
                i,
                times[i],
                times[i + 1]
            )));
        }
        Ok(Self { times })
    }

    pub fn build(schedule: &NoiseSchedule, spec: &GridSpec) -> Result<Self> {
        match spec.spacing {
            GridSpacing::UniformTime => Self::uniform_time(spec.horizon, spec.nfe, spec.t_min),
            GridSpacing::SigmaPower { rho } => {
                Self::sigma_power(schedule, spec.horizon, spec.nfe, spec.t_min, rho)
            }
        }
    }

    fn check_params(horizon: f64, nfe: usize, t_min: f64) -> Result<()> {
        if nfe == 0 {
            return Err(Error::Validation("grid.nfe must be >= 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Validation(format!(
                "grid.horizon must be finite and > 0, got {horizon}"
            )));
        }
        if !(t_min >= 0.0 && t_min < horizon) {
            return Err(Error::Validation(format!(
                "grid.t_min must satisfy 0 <= t_min < horizon, got {t_min}"
            )));
        }
        Ok(())
    }

    /// Assembles evaluation times from a monotone map `u in [0, 1] -> t` and
    /// appends the terminal time 0.
    fn assemble(horizon: f64, nfe: usize, t_min: f64, map: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut times = Vec::with_capacity(nfe + 1);
        if t_min > 0.0 {
            if nfe == 1 {
                times.push(map(0.0));
            } else {
                let last = (nfe - 1) as f64;
                times.extend((0..nfe).map(|i| map(i as f64 / last)));
            }
        } else {
            times.extend((0..nfe).map(|i| map(i as f64 / nfe as f64)));
        }
        // pin the end points exactly
        times[0] = horizon;
        if t_min > 0.0 && nfe > 1 {
            times[nfe - 1] = t_min;
        }
        times.push(0.0);
        times
    }

    /// `nfe` evaluation times uniform in `t` on `[t_min, T]`, then 0.
    pub fn uniform_time(horizon: f64, nfe: usize, t_min: f64) -> Result<Self> {
        Self::check_params(horizon, nfe, t_min)?;
        let times = Self::assemble(horizon, nfe, t_min, |u| horizon + u * (t_min - horizon));
        Self::from_times(times)
    }

    /// `nfe` evaluation times uniform in `sigma^(1/rho)` between `sigma(T)` and
    /// `sigma(t_min)`, then 0.
    pub fn sigma_power(
        schedule: &NoiseSchedule,
        horizon: f64,
        nfe: usize,
        t_min: f64,
        rho: f64,
    ) -> Result<Self> {
        Self::check_params(horizon, nfe, t_min)?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Validation(format!(
                "grid.spacing.rho must be > 0, got {rho}"
            )));
        }
        let hi = schedule.sigma(horizon)?.powf(1.0 / rho);
        let lo = schedule.sigma(t_min)?.powf(1.0 / rho);
        let times = Self::assemble(horizon, nfe, t_min, |u| {
            let s = (hi + u * (lo - hi)).powf(rho);
            schedule.time_for_sigma(s).unwrap_or(f64::NAN)
        });
        Self::from_times(times)
    }

    /// Grid that stops at `t_min > 0` instead of continuing to 0.
    pub fn truncated(&self) -> Result<Self> {
        let mut times = self.times.clone();
        if *times.last().unwrap() == 0.0 {
            times.pop();
        }
        Self::from_times(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.times[0]
    }

    pub fn terminal(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of steps, which equals the number of network evaluations.
    pub fn nfe(&self) -> usize {
        self.times.len() - 1
    }

    /// `(t, t_prev)` for step `i`, where step 0 starts at `T`.
    pub fn step(&self, i: usize) -> (f64, f64) {
        (self.times[i], self.times[i + 1])
    }

    /// Evaluation times `t_N, ..., t_1`.
    pub fn eval_times(&self) -> &[f64] {
        &self.times[..self.nfe()]
    }

    /// Index of the evaluation time nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let eval = self.eval_times();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &s) in eval.iter().enumerate() {
            let d = (s - t).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VE: NoiseSchedule = NoiseSchedule::VarianceExploding;

    #[test]
    fn ve_values() {
        assert_eq!(VE.eval(4.0).unwrap(), (1.0, 2.0));
        assert_eq!(VE.eval(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(VE.eval(1.0).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn negative_time_is_domain_error() {
        assert!(matches!(VE.eval(-0.5), Err(Error::Domain(_))));
        assert!(matches!(VE.eval(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn ddim_coefficients() {
        assert_eq!(VE.ddim_step_coeffs(1.0, 0.25).unwrap(), (1.0, -0.5));
        assert_eq!(VE.ddim_step_coeffs(1.0, 0.0).unwrap(), (1.0, -1.0));
        assert_eq!(VE.ddim_step_coeffs(4.0, 1.0).unwrap(), (1.0, -1.0));
        assert!(matches!(
            VE.ddim_step_coeffs(1.0, 1.0),
            Err(Error::Ordering { .. })
        ));
        assert!(matches!(
            VE.ddim_step_coeffs(0.5, 1.0),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn forward_perturbation() {
        assert_eq!(VE.forward_perturb(&[0.0], 9.0, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(VE.forward_perturb(&[1.0], 9.0, &[1.0]).unwrap(), vec![4.0]);
        assert_eq!(VE.forward_perturb(&[2.0], 0.0, &[5.0]).unwrap(), vec![2.0]);
        assert!(matches!(
            VE.forward_perturb(&[1.0, 2.0], 1.0, &[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn vp_is_variance_preserving_and_invertible() {
        let vp = NoiseSchedule::VariancePreserving {
            beta_min: 0.1,
            beta_max: 20.0,
        };
        for &t in &[1e-4, 0.01, 0.3, 0.9, 1.0] {
            let (a, s) = vp.eval(t).unwrap();
            assert!((a * a + s * s - 1.0).abs() < 1e-14);
            let back = vp.time_for_sigma(s).unwrap();
            assert!(
                (back - t).abs() < 1e-9 * t.max(1e-3),
                "t = {t}, back = {back}"
            );
        }
    }

    #[test]
    fn vp_drift_matches_log_alpha_derivative() {
        let vp = NoiseSchedule::VariancePreserving {
            beta_min: 0.1,
            beta_max: 20.0,
        };
        let t = 0.4;
        let h = 1e-6;
        let dlog = (vp.alpha(t + h).unwrap().ln() - vp.alpha(t - h).unwrap().ln()) / (2.0 * h);
        let (f, g2) = vp.drift_diffusion(t);
        assert!((f - dlog).abs() < 1e-7);
        let s2 = |t: f64| vp.sigma(t).unwrap().powi(2);
        let ds2 = (s2(t + h) - s2(t - h)) / (2.0 * h);
        assert!((g2 - (ds2 - 2.0 * f * s2(t))).abs() < 1e-6);
    }

    #[test]
    fn grids_are_strictly_decreasing() {
        let g = TimeGrid::uniform_time(99.0, 10, 1e-3).unwrap();
        assert_eq!(g.nfe(), 10);
        assert_eq!(g.horizon(), 99.0);
        assert_eq!(g.times()[9], 1e-3);
        assert_eq!(g.terminal(), 0.0);
        let g = TimeGrid::sigma_power(&VE, 99.0, 64, 1e-3, 2.0).unwrap();
        assert_eq!(g.nfe(), 64);
        assert_eq!(g.times()[63], 1e-3);
        let g = TimeGrid::uniform_time(1.0, 4, 0.0).unwrap();
        assert_eq!(g.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(TimeGrid::from_times(vec![1.0, 1.0, 0.0]).is_err());
        assert!(TimeGrid::from_times(vec![1.0]).is_err());
    }

    #[test]
    fn nearest_index_lookup() {
        let g = TimeGrid::uniform_time(1.0, 4, 0.0).unwrap();
        assert_eq!(g.nearest_index(0.74), 1);
        assert_eq!(g.nearest_index(0.0), 3);
    }

    #[test]
    fn truncated_grid_stops_at_t_min() {
        let g = TimeGrid::uniform_time(10.0, 5, 0.5)
            .unwrap()
            .truncated()
            .unwrap();
        assert_eq!(g.terminal(), 0.5);
        assert_eq!(g.nfe(), 4);
    }
}

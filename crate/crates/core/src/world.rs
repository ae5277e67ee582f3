//! Exact-score Gaussian worlds and the noise-prediction oracles built on them.
//!
//! A world is a diagonal linear-Gaussian model: `c ~ N(m_c, v_c)` and
//! `x_0 | c ~ N(c, v_1)` per dimension. Under a schedule `(alpha_t, sigma_t)` both
//! the conditional and the unconditional marginals stay Gaussian, so scores and
//! noise predictions are affine in `x`. With `D = 1, v_1 = 1, m_c = 0, v_c = 1`
//! and the VE schedule this is the classic one-dimensional counterexample where
//! `q_t(x|c) = N(c, 1 + t)` and `q_t(x) = N(0, 2 + t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NormalStream;
use crate::schedule::NoiseSchedule;

/// A conditioning value together with the key used in lookup tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: String,
    pub value: Vec<f64>,
}

impl Condition {
    /// Condition whose id is the comma-joined shortest decimal form of `value`.
    pub fn new(value: Vec<f64>) -> Self {
        let id = value
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        Self { id, value }
    }

    pub fn with_id(id: impl Into<String>, value: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            value,
        }
    }

    pub fn scalar(c: f64) -> Self {
        Self::new(vec![c])
    }
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticWorld {
    cond_var: Vec<f64>,
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
}

impl AnalyticWorld {
    pub fn new(cond_var: Vec<f64>, prior_mean: Vec<f64>, prior_var: Vec<f64>) -> Result<Self> {
        let d = cond_var.len();
        if d == 0 {
            return Err(Error::Validation(
                "world.cond_var must have at least one entry".into(),
            ));
        }
        Error::check_dim(d, prior_mean.len())?;
        Error::check_dim(d, prior_var.len())?;
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&cond_var) {
            return Err(Error::Validation(
                "world.cond_var entries must be finite and > 0".into(),
            ));
        }
        if !positive(&prior_var) {
            return Err(Error::Validation(
                "world.prior_var entries must be finite and > 0".into(),
            ));
        }
        if prior_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation(
                "world.prior_mean entries must be finite".into(),
            ));
        }
        Ok(Self {
            cond_var,
            prior_mean,
            prior_var,
        })
    }

    /// The one-dimensional toy: `q_0(x|c) = N(c, 1)`, `q(c) = N(0, 1)`.
    pub fn toy() -> Self {
        Self::new(vec![1.0], vec![0.0], vec![1.0]).expect("toy world is valid")
    }

    pub fn dim(&self) -> usize {
        self.cond_var.len()
    }

    pub fn cond_var(&self) -> &[f64] {
        &self.cond_var
    }

    pub fn prior_mean(&self) -> &[f64] {
        &self.prior_mean
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    /// Variance of `q_0(x_0)`, i.e. `v_1 + v_c`.
    pub fn marginal_var(&self) -> Vec<f64> {
        self.cond_var
            .iter()
            .zip(&self.prior_var)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// `q_t(x | c)`.
    pub fn cond_marginal(&self, sched: &NoiseSchedule, c: &[f64], t: f64) -> Result<Gaussian> {
        Error::check_dim(self.dim(), c.len())?;
        let (alpha, sigma) = sched.eval(t)?;
        Ok(Gaussian {
            mean: c.iter().map(|c| alpha * c).collect(),
            var: self
                .cond_var
                .iter()
                .map(|v| alpha * alpha * v + sigma * sigma)
                .collect(),
        })
    }

    /// `q_t(x)`.
    pub fn marginal(&self, sched: &NoiseSchedule, t: f64) -> Result<Gaussian> {
        let (alpha, sigma) = sched.eval(t)?;
        Ok(Gaussian {
            mean: self.prior_mean.iter().map(|m| alpha * m).collect(),
            var: self
                .marginal_var()
                .iter()
                .map(|v| alpha * alpha * v + sigma * sigma)
                .collect(),
        })
    }

    /// Posterior `q_t(c | x)`.
    pub fn condition_posterior(
        &self,
        sched: &NoiseSchedule,
        x: &[f64],
        t: f64,
    ) -> Result<Gaussian> {
        Error::check_dim(self.dim(), x.len())?;
        let (alpha, sigma) = sched.eval(t)?;
        let mut mean = Vec::with_capacity(self.dim());
        let mut var = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let s2 = alpha * alpha * self.cond_var[i] + sigma * sigma;
            let precision = 1.0 / self.prior_var[i] + alpha * alpha / s2;
            mean.push((self.prior_mean[i] / self.prior_var[i] + alpha * x[i] / s2) / precision);
            var.push(1.0 / precision);
        }
        Ok(Gaussian { mean, var })
    }

    /// `grad_x log q_t(x | c)`.
    pub fn cond_score(
        &self,
        sched: &NoiseSchedule,
        x: &[f64],
        c: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), x.len())?;
        Error::check_dim(self.dim(), c.len())?;
        let (alpha, sigma) = sched.eval(t)?;
        Ok((0..self.dim())
            .map(|i| -(x[i] - alpha * c[i]) / (alpha * alpha * self.cond_var[i] + sigma * sigma))
            .collect())
    }

    /// `grad_x log q_t(x)`.
    pub fn uncond_score(&self, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), x.len())?;
        let (alpha, sigma) = sched.eval(t)?;
        let total = self.marginal_var();
        Ok((0..self.dim())
            .map(|i| {
                -(x[i] - alpha * self.prior_mean[i]) / (alpha * alpha * total[i] + sigma * sigma)
            })
            .collect())
    }

    /// Writes one draw of `x_0 ~ q_0(x_0 | c)` using the next normals of `stream`.
    pub fn draw_conditional_into(&self, c: &[f64], stream: &mut NormalStream, out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = c[i] + self.cond_var[i].sqrt() * stream.next();
        }
    }

    /// `n` i.i.d. pairs `(x_0, c)`; pair `i` uses stream `i` of `seed`.
    pub fn sample_data(&self, n: usize, seed: u64) -> DataBatch {
        let d = self.dim();
        let mut x0 = vec![0.0; n * d];
        let mut c = vec![0.0; n * d];
        for i in 0..n {
            let mut stream = NormalStream::new(seed, i as u64);
            let ci = &mut c[i * d..(i + 1) * d];
            for k in 0..d {
                ci[k] = self.prior_mean[k] + self.prior_var[k].sqrt() * stream.next();
            }
            let ci = ci.to_vec();
            self.draw_conditional_into(&ci, &mut stream, &mut x0[i * d..(i + 1) * d]);
        }
        DataBatch { dim: d, x0, c }
    }
}

/// Flat row-major storage of `(x_0, c)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub dim: usize,
    pub x0: Vec<f64>,
    pub c: Vec<f64>,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.x0.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let d = self.dim;
        (&self.x0[i * d..(i + 1) * d], &self.c[i * d..(i + 1) * d])
    }
}

/// Noise-prediction model exposing a conditional and an unconditional branch.
pub trait ScoreOracle: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    fn eps_cond_into(&self, x: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    fn eps_uncond_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// Conditional predictions for the rows of the row-major `xs`, all at `t`.
    fn eps_cond_batch(&self, xs: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.eps_cond_into(x, c, t, o)?;
        }
        Ok(())
    }

    /// Unconditional predictions for the rows of `xs`, all at `t`.
    fn eps_uncond_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.eps_uncond_into(x, t, o)?;
        }
        Ok(())
    }

    /// Whether both branches are affine in `x`. Expectations of an affine
    /// oracle equal its value at the mean.
    fn is_affine(&self) -> bool {
        false
    }

    fn eps_pair(&self, x: &[f64], c: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        Error::check_dim(d, x.len())?;
        Error::check_dim(d, c.len())?;
        let mut cond = vec![0.0; d];
        let mut uncond = vec![0.0; d];
        self.eps_cond_into(x, c, t, &mut cond)?;
        self.eps_uncond_into(x, t, &mut uncond)?;
        Ok((cond, uncond))
    }
}

/// Oracle returning `eps = -sigma_t * score` of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactOracle {
    world: AnalyticWorld,
    schedule: NoiseSchedule,
    // per-dimension cached variances
    cond_var: Vec<f64>,
    total_var: Vec<f64>,
}

impl ExactOracle {
    pub fn new(world: AnalyticWorld, schedule: NoiseSchedule) -> Self {
        let cond_var = world.cond_var().to_vec();
        let total_var = world.marginal_var();
        Self {
            world,
            schedule,
            cond_var,
            total_var,
        }
    }

    pub fn world(&self) -> &AnalyticWorld {
        &self.world
    }

    #[inline]
    fn sigma_checked(&self, t: f64) -> Result<(f64, f64)> {
        let (alpha, sigma) = self.schedule.eval(t)?;
        if sigma <= 0.0 {
            return Err(Error::SingularSigma { t });
        }
        Ok((alpha, sigma))
    }
}

impl ScoreOracle for ExactOracle {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    #[inline]
    fn eps_cond_into(&self, x: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        Error::check_dim(self.dim(), x.len())?;
        self.eps_cond_batch(x, c, t, out)
    }

    #[inline]
    fn eps_uncond_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        Error::check_dim(self.dim(), x.len())?;
        self.eps_uncond_batch(x, t, out)
    }

    fn eps_cond_batch(&self, xs: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        Error::check_dim(d, c.len())?;
        let (alpha, sigma) = self.sigma_checked(t)?;
        let s2 = sigma * sigma;
        if d == 1 {
            let (shift, den) = (alpha * c[0], alpha * alpha * self.cond_var[0] + s2);
            for (o, x) in out.iter_mut().zip(xs) {
                *o = sigma * (x - shift) / den;
            }
            return Ok(());
        }
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for i in 0..d {
                o[i] = sigma * (x[i] - alpha * c[i]) / (alpha * alpha * self.cond_var[i] + s2);
            }
        }
        Ok(())
    }

    fn eps_uncond_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        let (alpha, sigma) = self.sigma_checked(t)?;
        let s2 = sigma * sigma;
        let m = self.world.prior_mean();
        if d == 1 {
            let (shift, den) = (alpha * m[0], alpha * alpha * self.total_var[0] + s2);
            for (o, x) in out.iter_mut().zip(xs) {
                *o = sigma * (x - shift) / den;
            }
            return Ok(());
        }
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for i in 0..d {
                o[i] = sigma * (x[i] - alpha * m[i]) / (alpha * alpha * self.total_var[i] + s2);
            }
        }
        Ok(())
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Exact oracle with a biased conditional branch:
/// `eps_cond = scale * eps_cond_exact + mean_bias`. The unconditional branch is untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedOracle {
    exact: ExactOracle,
    mean_bias: Vec<f64>,
    scale: Vec<f64>,
}

impl PerturbedOracle {
    pub fn new(exact: ExactOracle, mean_bias: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let d = exact.dim();
        let mean_bias = broadcast("oracle.mean_bias", mean_bias, d)?;
        let scale = broadcast("oracle.scale", scale, d)?;
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(
                "oracle.scale entries must be finite and > 0".into(),
            ));
        }
        if mean_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation(
                "oracle.mean_bias entries must be finite".into(),
            ));
        }
        Ok(Self {
            exact,
            mean_bias,
            scale,
        })
    }

    pub fn exact(&self) -> &ExactOracle {
        &self.exact
    }

    pub fn mean_bias(&self) -> &[f64] {
        &self.mean_bias
    }
}

impl ScoreOracle for PerturbedOracle {
    fn dim(&self) -> usize {
        self.exact.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.exact.schedule()
    }

    #[inline]
    fn eps_cond_into(&self, x: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        Error::check_dim(self.dim(), x.len())?;
        self.eps_cond_batch(x, c, t, out)
    }

    #[inline]
    fn eps_uncond_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.exact.eps_uncond_into(x, t, out)
    }

    fn eps_cond_batch(&self, xs: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.exact.eps_cond_batch(xs, c, t, out)?;
        let d = self.dim();
        for row in out.chunks_exact_mut(d) {
            for i in 0..d {
                row[i] = self.scale[i] * row[i] + self.mean_bias[i];
            }
        }
        Ok(())
    }

    fn eps_uncond_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.exact.eps_uncond_batch(xs, t, out)
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Either oracle variant, as selected from configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyOracle {
    Exact(ExactOracle),
    Perturbed(PerturbedOracle),
}

impl AnyOracle {
    pub fn world(&self) -> &AnalyticWorld {
        match self {
            AnyOracle::Exact(o) => o.world(),
            AnyOracle::Perturbed(o) => o.exact().world(),
        }
    }
}

impl ScoreOracle for AnyOracle {
    fn dim(&self) -> usize {
        match self {
            AnyOracle::Exact(o) => o.dim(),
            AnyOracle::Perturbed(o) => o.dim(),
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        match self {
            AnyOracle::Exact(o) => o.schedule(),
            AnyOracle::Perturbed(o) => o.schedule(),
        }
    }

    #[inline]
    fn eps_cond_into(&self, x: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            AnyOracle::Exact(o) => o.eps_cond_into(x, c, t, out),
            AnyOracle::Perturbed(o) => o.eps_cond_into(x, c, t, out),
        }
    }

    #[inline]
    fn eps_uncond_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            AnyOracle::Exact(o) => o.eps_uncond_into(x, t, out),
            AnyOracle::Perturbed(o) => o.eps_uncond_into(x, t, out),
        }
    }

    fn eps_cond_batch(&self, xs: &[f64], c: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            AnyOracle::Exact(o) => o.eps_cond_batch(xs, c, t, out),
            AnyOracle::Perturbed(o) => o.eps_cond_batch(xs, c, t, out),
        }
    }

    fn eps_uncond_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            AnyOracle::Exact(o) => o.eps_uncond_batch(xs, t, out),
            AnyOracle::Perturbed(o) => o.eps_uncond_batch(xs, t, out),
        }
    }

    fn is_affine(&self) -> bool {
        true
    }
}

fn check_batch(d: usize, xs: &[f64], out: &[f64]) -> Result<()> {
    Error::check_dim(xs.len(), out.len())?;
    if !xs.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: xs.len() % d,
        });
    }
    Ok(())
}

/// Expands a length-1 vector to `dim` entries; other lengths must equal `dim`.
pub(crate) fn broadcast(field: &str, v: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; dim]),
        n if n == dim => Ok(v),
        n => Err(Error::Validation(format!(
            "{field}: expected 1 or {dim} entries, got {n}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VE: NoiseSchedule = NoiseSchedule::VarianceExploding;

    fn toy_oracle() -> ExactOracle {
        ExactOracle::new(AnalyticWorld::toy(), VE)
    }

    #[test]
    fn toy_conditional_scores() {
        let w = AnalyticWorld::toy();
        for &t in &[0.0, 0.5, 7.0] {
            assert_eq!(w.cond_score(&VE, &[1.3], &[1.3], t).unwrap(), vec![0.0]);
        }
        assert_eq!(w.cond_score(&VE, &[1.0], &[0.0], 0.0).unwrap(), vec![-1.0]);
        assert!((w.cond_score(&VE, &[2.5], &[0.5], 3.0).unwrap()[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn toy_unconditional_scores() {
        let w = AnalyticWorld::toy();
        assert_eq!(w.uncond_score(&VE, &[0.0], 4.0).unwrap(), vec![0.0]);
        assert_eq!(w.uncond_score(&VE, &[2.0], 0.0).unwrap(), vec![-1.0]);
        assert_eq!(w.uncond_score(&VE, &[4.0], 2.0).unwrap(), vec![-1.0]);
    }

    #[test]
    fn score_dimension_mismatch() {
        let w = AnalyticWorld::toy();
        assert!(matches!(
            w.cond_score(&VE, &[1.0, 2.0], &[0.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_eps_pair() {
        let o = toy_oracle();
        let (ec, eu) = o.eps_pair(&[0.7], &[0.7], 1.0).unwrap();
        assert_eq!(ec, vec![0.0]);
        let u = AnalyticWorld::toy().uncond_score(&VE, &[0.7], 1.0).unwrap()[0];
        assert_eq!(eu, vec![-u]);
        let (ec, eu) = o.eps_pair(&[1.0], &[0.0], 1.0).unwrap();
        assert!((ec[0] - 0.5).abs() < 1e-15);
        assert!((eu[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn eps_at_zero_noise_is_singular() {
        let o = toy_oracle();
        assert!(matches!(
            o.eps_pair(&[1.0], &[0.0], 0.0),
            Err(Error::SingularSigma { .. })
        ));
    }

    #[test]
    fn perturbed_bias_on_conditional_branch_only() {
        let o = PerturbedOracle::new(toy_oracle(), vec![0.1], vec![1.0]).unwrap();
        let (ec, eu) = o.eps_pair(&[0.4], &[0.4], 1.0).unwrap();
        let (_, eu_exact) = toy_oracle().eps_pair(&[0.4], &[0.4], 1.0).unwrap();
        assert!((ec[0] - 0.1).abs() < 1e-15);
        assert_eq!(eu, eu_exact);
    }

    #[test]
    fn bayes_consistency_of_scores() {
        let w = AnalyticWorld::new(vec![0.5, 2.0], vec![0.3, -1.0], vec![1.5, 0.25]).unwrap();
        let vp = NoiseSchedule::VariancePreserving {
            beta_min: 0.1,
            beta_max: 20.0,
        };
        for sched in [VE, vp] {
            for &t in &[0.01, 0.3, 1.0] {
                let x = [0.8, -2.1];
                let post = w.condition_posterior(&sched, &x, t).unwrap();
                // the conditional score is affine in c, so its posterior average is
                // its value at the posterior mean
                let avg = w.cond_score(&sched, &x, &post.mean, t).unwrap();
                let direct = w.uncond_score(&sched, &x, t).unwrap();
                for k in 0..2 {
                    assert!((avg[k] - direct[k]).abs() < 1e-12, "{avg:?} vs {direct:?}");
                }
            }
        }
    }

    #[test]
    fn sample_data_is_deterministic() {
        let w = AnalyticWorld::toy();
        assert_eq!(w.sample_data(100, 3), w.sample_data(100, 3));
        assert_ne!(w.sample_data(100, 3), w.sample_data(100, 4));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast("f", vec![2.0], 3).unwrap(), vec![2.0; 3]);
        assert!(broadcast("f", vec![1.0, 2.0], 3).is_err());
    }
}

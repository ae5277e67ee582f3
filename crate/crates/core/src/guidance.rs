//! Guidance rules combining the conditional and unconditional noise predictions.
//!
//! CFG uses weights `(gamma, 1 - gamma)`. The rectified rule relaxes the
//! sum-to-one constraint to independent per-dimension weights `(gamma1, gamma0)`;
//! CFG is the special case `gamma0 = 1 - gamma1`, and both go through the same
//! arithmetic so that the embedding is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feasible set enforced on `gamma0` given `gamma1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampMode {
    /// `gamma0 <= 0` and `gamma1 + gamma0 >= 1`.
    #[default]
    Strict,
    /// `gamma0 <= 0` and `gamma1 + gamma0 >= 0`.
    Loose,
    Off,
}

/// Guidance weights. Either vector may have length 1, which broadcasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCoefficients {
    pub gamma1: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub clamp_mode: ClampMode,
}

impl GuidanceCoefficients {
    pub fn new(gamma1: Vec<f64>, gamma0: Vec<f64>, clamp_mode: ClampMode) -> Self {
        Self {
            gamma1,
            gamma0,
            clamp_mode,
        }
    }

    /// No guidance: `(1, 0)`.
    pub fn unguided() -> Self {
        Self::new(vec![1.0], vec![0.0], ClampMode::Off)
    }

    /// CFG weights `(gamma, 1 - gamma)`.
    pub fn cfg(gamma: f64) -> Self {
        Self::new(vec![gamma], vec![1.0 - gamma], ClampMode::Off)
    }

    /// Length after broadcasting both vectors against each other.
    pub fn len(&self) -> usize {
        self.gamma1.len().max(self.gamma0.len())
    }

    pub fn is_empty(&self) -> bool {
        self.gamma1.is_empty() || self.gamma0.is_empty()
    }

    fn check_broadcast(&self, dim: usize) -> Result<()> {
        for v in [&self.gamma1, &self.gamma0] {
            if v.len() != 1 && v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn gamma1_at(&self, i: usize) -> f64 {
        pick(&self.gamma1, i)
    }

    #[inline]
    pub fn gamma0_at(&self, i: usize) -> f64 {
        pick(&self.gamma0, i)
    }
}

#[inline]
fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// `gamma * eps_cond + (1 - gamma) * eps_uncond`.
pub fn combine_cfg(eps_cond: &[f64], eps_uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    combine_recfg(eps_cond, eps_uncond, &GuidanceCoefficients::cfg(gamma))
}

/// `gamma1 * eps_cond + gamma0 * eps_uncond`, element-wise.
pub fn combine_recfg(
    eps_cond: &[f64],
    eps_uncond: &[f64],
    coeffs: &GuidanceCoefficients,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; eps_cond.len()];
    combine_into(eps_cond, eps_uncond, coeffs, &mut out)?;
    Ok(out)
}

/// Allocation-free form of [`combine_recfg`].
pub fn combine_into(
    eps_cond: &[f64],
    eps_uncond: &[f64],
    coeffs: &GuidanceCoefficients,
    out: &mut [f64],
) -> Result<()> {
    let d = eps_cond.len();
    Error::check_dim(d, eps_uncond.len())?;
    Error::check_dim(d, out.len())?;
    coeffs.check_broadcast(d)?;
    for i in 0..d {
        out[i] = coeffs.gamma1_at(i) * eps_cond[i] + coeffs.gamma0_at(i) * eps_uncond[i];
    }
    Ok(())
}

/// Drift-driving residual `(gamma1 - 1) * eps_cond + gamma0 * eps_uncond`.
pub fn residual_eps(
    eps_cond: &[f64],
    eps_uncond: &[f64],
    coeffs: &GuidanceCoefficients,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; eps_cond.len()];
    residual_into(eps_cond, eps_uncond, coeffs, &mut out)?;
    Ok(out)
}

pub fn residual_into(
    eps_cond: &[f64],
    eps_uncond: &[f64],
    coeffs: &GuidanceCoefficients,
    out: &mut [f64],
) -> Result<()> {
    let d = eps_cond.len();
    Error::check_dim(d, eps_uncond.len())?;
    Error::check_dim(d, out.len())?;
    coeffs.check_broadcast(d)?;
    for i in 0..d {
        out[i] = (coeffs.gamma1_at(i) - 1.0) * eps_cond[i] + coeffs.gamma0_at(i) * eps_uncond[i];
    }
    Ok(())
}

/// Projects each `gamma0` component onto the feasible interval of the
/// coefficient's clamp mode: `[1 - gamma1, 0]` (strict) or `[-gamma1, 0]` (loose).
/// `gamma1` is returned unchanged.
pub fn clamp_coeffs(coeffs: &GuidanceCoefficients) -> Result<GuidanceCoefficients> {
    if coeffs.clamp_mode == ClampMode::Off {
        return Ok(coeffs.clone());
    }
    let n = coeffs.len();
    coeffs.check_broadcast(n)?;
    let mut gamma0 = Vec::with_capacity(n);
    for i in 0..n {
        let g1 = coeffs.gamma1_at(i);
        let lo = match coeffs.clamp_mode {
            ClampMode::Strict => {
                if g1 < 1.0 {
                    return Err(Error::InfeasibleClamp {
                        index: i,
                        gamma1: g1,
                    });
                }
                1.0 - g1
            }
            ClampMode::Loose => {
                if g1 < 0.0 {
                    return Err(Error::InfeasibleClamp {
                        index: i,
                        gamma1: g1,
                    });
                }
                -g1
            }
            ClampMode::Off => unreachable!(),
        };
        gamma0.push(coeffs.gamma0_at(i).clamp(lo, 0.0));
    }
    Ok(GuidanceCoefficients {
        gamma1: coeffs.gamma1.clone(),
        gamma0,
        clamp_mode: coeffs.clamp_mode,
    })
}

/// Whether `coeffs` satisfies the inequalities of its own clamp mode.
pub fn is_feasible(coeffs: &GuidanceCoefficients) -> bool {
    let n = coeffs.len();
    (0..n).all(|i| {
        let (g1, g0) = (coeffs.gamma1_at(i), coeffs.gamma0_at(i));
        match coeffs.clamp_mode {
            ClampMode::Strict => g0 <= 0.0 && g1 + g0 >= 1.0,
            ClampMode::Loose => g0 <= 0.0 && g1 + g0 >= 0.0,
            ClampMode::Off => true,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strict(g1: f64, g0: f64) -> GuidanceCoefficients {
        GuidanceCoefficients::new(vec![g1], vec![g0], ClampMode::Strict)
    }

    #[test]
    fn cfg_special_cases() {
        let ec = [0.3, -1.2];
        let eu = [0.9, 0.4];
        assert_eq!(combine_cfg(&ec, &eu, 1.0).unwrap(), ec.to_vec());
        assert_eq!(combine_cfg(&ec, &eu, 0.0).unwrap(), eu.to_vec());
        assert_eq!(combine_cfg(&[1.0], &[0.5], 2.0).unwrap(), vec![1.5]);
    }

    #[test]
    fn recfg_examples() {
        let ec = [0.3, -1.2];
        let eu = [0.9, 0.4];
        let unguided = GuidanceCoefficients::new(vec![1.0], vec![0.0], ClampMode::Off);
        assert_eq!(combine_recfg(&ec, &eu, &unguided).unwrap(), ec.to_vec());
        let c = GuidanceCoefficients::new(vec![2.0, 3.0], vec![-1.0, -2.0], ClampMode::Off);
        assert_eq!(
            combine_recfg(&[1.0, 1.0], &[1.0, 1.0], &c).unwrap(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn broadcast_mismatch() {
        let c = GuidanceCoefficients::new(vec![2.0, 3.0], vec![0.0], ClampMode::Off);
        assert!(matches!(
            combine_recfg(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &c),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(combine_cfg(&[1.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_coeffs(&strict(3.0, 0.5)).unwrap().gamma0, vec![0.0]);
        let c = clamp_coeffs(&strict(1.2, -0.5)).unwrap();
        assert!((c.gamma0[0] + 0.2).abs() < 1e-15);
        assert_eq!(clamp_coeffs(&strict(2.0, -0.7)).unwrap().gamma0, vec![-0.7]);
        let loose = GuidanceCoefficients::new(vec![1.2], vec![-1.5], ClampMode::Loose);
        assert_eq!(clamp_coeffs(&loose).unwrap().gamma0, vec![-1.2]);
    }

    #[test]
    fn strict_clamp_rejects_small_gamma1() {
        let c = GuidanceCoefficients::new(vec![2.0, 0.5], vec![0.0], ClampMode::Strict);
        assert!(matches!(
            clamp_coeffs(&c),
            Err(Error::InfeasibleClamp { index: 1, .. })
        ));
    }

    #[test]
    fn residual_examples() {
        let unguided = GuidanceCoefficients::unguided();
        assert_eq!(residual_eps(&[0.4], &[0.2], &unguided).unwrap(), vec![0.0]);
        let c = GuidanceCoefficients::new(vec![2.0], vec![-1.0], ClampMode::Off);
        assert_eq!(residual_eps(&[0.7], &[0.7], &c).unwrap(), vec![0.0]);
    }

    proptest! {
        #[test]
        fn cfg_embeds_bit_for_bit(g in -3.0f64..8.0, ec in prop::collection::vec(-5.0f64..5.0, 1..6), shift in -2.0f64..2.0) {
            let eu: Vec<f64> = ec.iter().map(|e| e * 0.7 + shift).collect();
            let a = combine_cfg(&ec, &eu, g).unwrap();
            let b = combine_recfg(&ec, &eu, &GuidanceCoefficients::new(vec![g], vec![1.0 - g], ClampMode::Strict)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cfg_residual_is_scaled_difference(g in 0.0f64..8.0, ec in -5.0f64..5.0, eu in -5.0f64..5.0) {
            let r = residual_eps(&[ec], &[eu], &GuidanceCoefficients::cfg(g)).unwrap()[0];
            prop_assert!((r - (g - 1.0) * (ec - eu)).abs() <= 1e-12 * (1.0 + ec.abs() + eu.abs()) * (1.0 + g));
        }

        #[test]
        fn clamp_is_idempotent_and_feasible(
            g1 in prop::collection::vec(1.0f64..10.0, 1..5),
            g0s in prop::collection::vec(-12.0f64..12.0, 5),
            loose in any::<bool>(),
        ) {
            let g0 = g0s[..g1.len()].to_vec();
            let mode = if loose { ClampMode::Loose } else { ClampMode::Strict };
            let c = GuidanceCoefficients::new(g1, g0, mode);
            let once = clamp_coeffs(&c).unwrap();
            prop_assert!(is_feasible(&once));
            prop_assert_eq!(clamp_coeffs(&once).unwrap(), once.clone());
            prop_assert_eq!(&once.gamma1, &c.gamma1);
        }

        #[test]
        fn combiners_are_linear(a in -3.0f64..3.0, x in prop::collection::vec(-5.0f64..5.0, 4), y in prop::collection::vec(-5.0f64..5.0, 4)) {
            let c = GuidanceCoefficients::new(vec![2.5], vec![-0.75], ClampMode::Off);
            let xs: Vec<f64> = x.iter().map(|v| a * v).collect();
            let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
            let scaled = combine_recfg(&xs, &ys, &c).unwrap();
            let base = combine_recfg(&x, &y, &c).unwrap();
            for (s, b) in scaled.iter().zip(&base) {
                prop_assert!((s - a * b).abs() < 1e-10);
            }
        }
    }
}

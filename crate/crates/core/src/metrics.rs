//! Sample statistics, reference densities and goodness of fit.
//!
//! Everything here is a pure function of its inputs. Exports use the text
//! formats `x,pdf,label` for curves and `bin_left,bin_right,count` for
//! histograms.

use std::path::Path;

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::output::{fmt17, write_csv};
use crate::rng::{derive_seed, NormalStream};
use crate::sampler::SampleBatch;
use crate::shift::ShiftReport;
use crate::summation::NeumaierSum;
use crate::world::{AnalyticWorld, ScoreOracle};

/// Per-component sample moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance.
    pub var: Vec<f64>,
    pub se_mean: Vec<f64>,
}

/// Moments of each component of a terminal batch.
pub fn moments(batch: &SampleBatch) -> Result<Moments> {
    moments_of(&batch.x0, batch.dim)
}

/// Moments of the columns of the row-major `values` with `dim` columns.
pub fn moments_of(values: &[f64], dim: usize) -> Result<Moments> {
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: values.len(),
        });
    }
    let n = values.len() / dim;
    if n < 2 {
        return Err(Error::Validation(format!(
            "moments need at least 2 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let mut mean = Vec::with_capacity(dim);
    let mut var = Vec::with_capacity(dim);
    for k in 0..dim {
        let col = || values.iter().skip(k).step_by(dim).copied();
        let m = col().collect::<NeumaierSum>().value() / nf;
        let ss = col()
            .map(|v| (v - m) * (v - m))
            .collect::<NeumaierSum>()
            .value();
        mean.push(m);
        var.push(ss / (nf - 1.0));
    }
    let se_mean = var.iter().map(|v| (v / nf).sqrt()).collect();
    Ok(Moments {
        n,
        mean,
        var,
        se_mean,
    })
}

/// Tabulated density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub xs: Vec<f64>,
    pub pdf: Vec<f64>,
    pub label: String,
}

impl DensityCurve {
    /// Trapezoid-rule mass over the tabulated range.
    pub fn mass(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.pdf.windows(2))
            .map(|(x, p)| 0.5 * (x[1] - x[0]) * (p[0] + p[1]))
            .collect::<NeumaierSum>()
            .value()
    }

    /// Location of the largest tabulated value.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .pdf
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            });
        self.xs[i]
    }

    /// Cumulative trapezoid integral, normalised to end at the tabulated mass.
    fn cdf_at(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        let mut acc = 0.0;
        for (w, p) in self.xs.windows(2).zip(self.pdf.windows(2)) {
            if x < w[1] {
                // linear pdf inside the panel
                let h = x - w[0];
                let slope = (p[1] - p[0]) / (w[1] - w[0]);
                return acc + h * (p[0] + 0.5 * slope * h);
            }
            acc += 0.5 * (w[1] - w[0]) * (p[0] + p[1]);
        }
        acc
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_curves_csv(path, std::slice::from_ref(self))
    }
}

/// Writes several curves to one `x,pdf,label` file.
pub fn write_curves_csv(path: &Path, curves: &[DensityCurve]) -> Result<()> {
    write_csv(
        path,
        &["x", "pdf", "label"],
        curves.iter().flat_map(|c| {
            c.xs.iter()
                .zip(&c.pdf)
                .map(|(x, p)| vec![fmt17(*x), fmt17(*p), c.label.clone()])
        }),
    )
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = (x - mean) / var.sqrt();
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

pub fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (2.0 * var).sqrt())
}

/// `points` equally spaced abscissae covering `mean ± half_width_sd` standard deviations.
pub fn support(mean: f64, var: f64, half_width_sd: f64, points: usize) -> Vec<f64> {
    let sd = var.sqrt();
    let (lo, hi) = (mean - half_width_sd * sd, mean + half_width_sd * sd);
    let step = (hi - lo) / (points.max(2) - 1) as f64;
    (0..points.max(2)).map(|i| lo + step * i as f64).collect()
}

pub fn gaussian_curve(
    mean: f64,
    var: f64,
    xs: &[f64],
    label: impl Into<String>,
) -> Result<DensityCurve> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Domain(format!(
            "density variance must be positive and finite, got {var}"
        )));
    }
    Ok(DensityCurve {
        xs: xs.to_vec(),
        pdf: xs.iter().map(|&x| normal_pdf(x, mean, var)).collect(),
        label: label.into(),
    })
}

/// Gaussian `N(c * mean_coeff, variance)` predicted by `report`.
pub fn theory_density(report: &ShiftReport, c: f64, xs: &[f64]) -> Result<DensityCurve> {
    let label = if report.gamma1 == 1.0 && report.gamma0 == 0.0 {
        "ground_truth".to_string()
    } else {
        format!("theory_g1={}_g0={}", report.gamma1, report.gamma0)
    };
    gaussian_curve(c * report.mean_coeff, report.variance, xs, label)
}

/// Reference distribution for [`ks_distance`].
#[derive(Debug, Clone, Copy)]
pub enum KsReference<'a> {
    Gaussian { mean: f64, var: f64 },
    Curve(&'a DensityCurve),
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("samples contain NaN".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Kolmogorov–Smirnov statistic `sup |F_n - F|` of `samples` against `reference`.
pub fn ks_distance(samples: &[f64], reference: KsReference) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::Validation(format!(
            "KS distance needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    let cdf = |x: f64| match reference {
        KsReference::Gaussian { mean, var } => normal_cdf(x, mean, var),
        KsReference::Curve(c) => c.cdf_at(x),
    };
    let s = sorted(samples)?;
    let n = s.len() as f64;
    Ok(s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    }))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation(
            "KS two-sample test needs non-empty batches".into(),
        ));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic one-sample critical value `sqrt(-ln(α/2) / 2) / sqrt(n)`; about
/// `1.63 / sqrt(n)` at `α = 0.01`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(0.5 * alpha).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Monte Carlo estimate with its standard error, per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorEstimate {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

/// Estimates `E[ε_uncond(x_t)] - (E[x_t] - α_t E[x_0]) / σ_t` under the joint
/// data law of `world`, which vanishes for a model whose unconditional branch
/// is the posterior mean of the noise.
///
/// Each draw contributes `ε_uncond(x_t) - z` with `x_t = α_t x_0 + σ_t z`, so
/// the estimator and its error bar share the same samples. Pair `i` uses stream
/// `i` of `derive_seed(seed, 0)` and its noise comes from stream `i` of
/// `derive_seed(seed, 1)`.
pub fn lemma2_residual<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    t: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<VectorEstimate> {
    let d = oracle.dim();
    Error::check_dim(d, world.dim())?;
    if mc_samples < 2 {
        return Err(Error::Validation(format!(
            "mc_samples must be >= 2, got {mc_samples}"
        )));
    }
    let (alpha, sigma) = oracle.schedule().eval(t)?;
    if !(sigma > 0.0) {
        return Err(Error::SingularSigma { t });
    }
    let data = world.sample_data(mc_samples, derive_seed(seed, 0));
    let noise_seed = derive_seed(seed, 1);
    let mut diffs = vec![0.0; mc_samples * d];
    let mut xt = vec![0.0; d];
    let mut z = vec![0.0; d];
    for i in 0..mc_samples {
        let (x0, _) = data.pair(i);
        NormalStream::new(noise_seed, i as u64).fill(&mut z);
        for k in 0..d {
            xt[k] = alpha * x0[k] + sigma * z[k];
        }
        let row = &mut diffs[i * d..(i + 1) * d];
        oracle.eps_uncond_into(&xt, t, row)?;
        for k in 0..d {
            row[k] -= z[k];
        }
    }
    let m = moments_of(&diffs, d)?;
    Ok(VectorEstimate {
        value: m.mean,
        se: m.se_mean,
    })
}

/// Histogram bin rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Binning {
    /// Width `2 IQR n^(-1/3)`.
    #[default]
    FreedmanDiaconis,
    Count(usize),
}

/// Upper limit on automatically chosen bins.
const MAX_BINS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub label: String,
    /// `counts.len() + 1` increasing edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts normalised to a density.
    pub fn density(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, w)| c as f64 / (n * (w[1] - w[0])))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["bin_left", "bin_right", "count"],
            self.edges
                .windows(2)
                .zip(&self.counts)
                .map(|(w, c)| vec![fmt17(w[0]), fmt17(w[1]), c.to_string()]),
        )
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn histogram(samples: &[f64], binning: Binning, label: impl Into<String>) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Validation("histogram of an empty batch".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("histogram samples must be finite".into()));
    }
    let s = sorted(samples)?;
    let (lo, hi) = (s[0], s[s.len() - 1]);
    let bins = match binning {
        Binning::Count(0) => {
            return Err(Error::Validation("histogram bin count must be >= 1".into()))
        }
        Binning::Count(k) => k,
        Binning::FreedmanDiaconis => {
            let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
            let width = 2.0 * iqr / (s.len() as f64).cbrt();
            if width > 0.0 && hi > lo {
                (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS)
            } else {
                1
            }
        }
    };
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    let mut counts = vec![0u64; bins];
    for &x in &s {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram {
        label: label.into(),
        edges,
        counts,
    })
}

/// Goodness of fit of one empirical batch against its theory curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsSummary {
    pub label: String,
    pub n: usize,
    pub statistic: f64,
    pub critical: f64,
    pub pass: bool,
}

pub const KS_ALPHA: f64 = 0.01;

pub fn ks_summary(
    label: impl Into<String>,
    samples: &[f64],
    mean: f64,
    var: f64,
) -> Result<KsSummary> {
    let statistic = ks_distance(samples, KsReference::Gaussian { mean, var })?;
    let critical = ks_critical(samples.len(), KS_ALPHA);
    Ok(KsSummary {
        label: label.into(),
        n: samples.len(),
        statistic,
        critical,
        pass: statistic < critical,
    })
}

pub fn write_ks_csv(path: &Path, rows: &[KsSummary]) -> Result<()> {
    write_csv(
        path,
        &["label", "n", "ks", "critical", "pass"],
        rows.iter().map(|r| {
            vec![
                r.label.clone(),
                r.n.to_string(),
                fmt17(r.statistic),
                fmt17(r.critical),
                r.pass.to_string(),
            ]
        }),
    )
}

/// Ground truth, CFG and ReCFG densities with their empirical histograms at one `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Panel {
    pub gamma: f64,
    pub condition: f64,
    pub curves: Vec<DensityCurve>,
    pub histograms: Vec<Histogram>,
    pub ks: Vec<KsSummary>,
}

/// Composes the comparison at one `γ` from the two terminal batches and the
/// matching theory reports. Curves are tabulated on a common support wide
/// enough for all three laws.
pub fn figure1_panel(
    c: f64,
    cfg_report: &ShiftReport,
    cfg_samples: &[f64],
    recfg_report: &ShiftReport,
    recfg_samples: &[f64],
    binning: Binning,
    points: usize,
) -> Result<Figure1Panel> {
    let laws = [
        (c, 1.0),
        (c * cfg_report.mean_coeff, cfg_report.variance),
        (c * recfg_report.mean_coeff, recfg_report.variance),
    ];
    let lo = laws
        .iter()
        .map(|(m, v)| m - 6.0 * v.sqrt())
        .fold(f64::INFINITY, f64::min);
    let hi = laws
        .iter()
        .map(|(m, v)| m + 6.0 * v.sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let xs = support(0.5 * (lo + hi), (0.5 * (hi - lo)).powi(2), 1.0, points);
    let curves = vec![
        gaussian_curve(c, 1.0, &xs, "ground_truth")?,
        gaussian_curve(laws[1].0, laws[1].1, &xs, "cfg_theory")?,
        gaussian_curve(laws[2].0, laws[2].1, &xs, "recfg_theory")?,
    ];
    let histograms = vec![
        histogram(cfg_samples, binning, "cfg_empirical")?,
        histogram(recfg_samples, binning, "recfg_empirical")?,
    ];
    let ks = vec![
        ks_summary("cfg", cfg_samples, laws[1].0, laws[1].1)?,
        ks_summary("recfg", recfg_samples, laws[2].0, laws[2].1)?,
    ];
    Ok(Figure1Panel {
        gamma: cfg_report.gamma1,
        condition: c,
        curves,
        histograms,
        ks,
    })
}

impl Figure1Panel {
    /// Writes the combined per-`γ` CSV (`label,x,pdf,bin_left,bin_right,count`,
    /// curve rows leave the bin columns empty and vice versa) plus the KS summary.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tag = fmt_tag(self.gamma);
        let curve_rows = self.curves.iter().flat_map(|c| {
            c.xs.iter().zip(&c.pdf).map(|(x, p)| {
                vec![
                    c.label.clone(),
                    fmt17(*x),
                    fmt17(*p),
                    String::new(),
                    String::new(),
                    String::new(),
                ]
            })
        });
        let hist_rows = self.histograms.iter().flat_map(|h| {
            h.edges
                .windows(2)
                .zip(&h.counts)
                .map(|(w, n)| {
                    vec![
                        h.label.clone(),
                        String::new(),
                        String::new(),
                        fmt17(w[0]),
                        fmt17(w[1]),
                        n.to_string(),
                    ]
                })
                .collect::<Vec<_>>()
        });
        write_csv(
            &dir.join(format!("figure1_gamma_{tag}.csv")),
            &["label", "x", "pdf", "bin_left", "bin_right", "count"],
            curve_rows.chain(hist_rows),
        )?;
        write_ks_csv(&dir.join(format!("ks_gamma_{tag}.csv")), &self.ks)
    }
}

/// File-name form of a real such as `2.5` → `2.5`, `-1` → `m1`.
pub fn fmt_tag(x: f64) -> String {
    let s = format!("{x}");
    s.replace('-', "m")
}

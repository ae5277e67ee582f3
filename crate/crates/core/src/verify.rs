//! Invariant suite run by the `verify` command.
//!
//! Every check is self-contained, seeded, and reports a pass flag with a one
//! line detail. `Full` scale uses the acceptance sample sizes; `Quick` shrinks
//! them and widens statistical bands by three standard errors accordingly.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::VerifyScale;
use crate::error::{Error, Result};
use crate::experiment::{guided_pair, GuidedPair};
use crate::guidance::{
    clamp_coeffs, combine_cfg, combine_recfg, is_feasible, ClampMode, GuidanceCoefficients,
};
use crate::metrics::{ks_summary, moments_of};
use crate::output::{fmt17, write_csv, write_json};
use crate::rng::{derive_seed, NormalStream};
use crate::sampler::{ddim_run, integrate_from, GuidanceRule, Method, SamplerConfig};
use crate::schedule::{GridSpacing, GridSpec, NoiseSchedule, TimeGrid};
use crate::shift::{
    drift_propagate, phi_bounds_check, phi_closed, phi_limit, phi_recurrence_residual,
    toy_pf_ode_solution, DriftOptions, DriftRecursion, Parity,
};
use crate::table::{
    build_from_oracle, table_from_json, table_to_json, BuildOptions, BuildStats, LookupTable,
};
use crate::world::{AnalyticWorld, Condition, ExactOracle, PerturbedOracle, ScoreOracle};

/// Sample sizes of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteParams {
    pub scale: VerifyScale,
    pub horizon: f64,
    pub nfe: usize,
    pub table_n: usize,
    pub batch: usize,
    pub lemma_n: usize,
    pub convergence_ns: Vec<usize>,
    pub gammas: Vec<f64>,
    pub condition: f64,
}

impl SuiteParams {
    pub fn for_scale(scale: VerifyScale) -> Self {
        let full = scale == VerifyScale::Full;
        Self {
            scale,
            horizon: 99.0,
            nfe: 4096,
            table_n: if full { 1_000_000 } else { 100_000 },
            batch: if full { 100_000 } else { 20_000 },
            lemma_n: if full { 1_000_000 } else { 100_000 },
            convergence_ns: if full {
                vec![1_000, 10_000, 100_000, 1_000_000]
            } else {
                vec![1_000, 10_000, 100_000]
            },
            gammas: vec![1.5, 2.0, 2.5],
            condition: 1.0,
        }
    }

    fn quick(&self) -> bool {
        self.scale == VerifyScale::Quick
    }

    /// Relative tolerance, widened by three standard errors at quick scale.
    fn band(&self, tol: f64, rel_se: f64) -> f64 {
        if self.quick() {
            tol + 3.0 * rel_se
        } else {
            tol
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub params: SuiteParams,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Writes `verify_report.json` and `verify_report.csv` (`check,passed,detail`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("verify_report.json"), self)?;
        write_csv(
            &dir.join("verify_report.csv"),
            &["check", "passed", "detail"],
            self.checks
                .iter()
                .map(|c| vec![c.name.clone(), c.passed.to_string(), c.detail.clone()]),
        )
    }
}

/// Pass flag and detail of one check.
type Outcome = (bool, String);

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn run(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<Outcome>) {
        let name = name.into();
        let start = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.checks.push(Check {
            name,
            passed,
            detail,
            seconds,
        });
    }
}

fn toy() -> ExactOracle {
    ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {threads} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every check.
pub fn run_suite(params: &SuiteParams, seed: u64) -> VerifyReport {
    let mut s = Suite { checks: Vec::new() };

    s.run("phi_special_values", check_phi_special);
    s.run("phi_recurrence", check_phi_recurrence);
    s.run("phi_closed_forms", check_phi_closed);
    s.run("phi_bounds", check_phi_bounds);
    s.run("schedule_snr_monotone", check_snr_monotone);
    s.run("ddim_translation", || check_ddim_translation(seed));
    s.run("pf_ode_composition", check_pf_ode_composition);
    s.run("bayes_consistency", || check_bayes(seed));
    s.run("zero_cond_eps_mean", || check_zero_cond_mean(params, seed));
    for t in [0.1, 1.0, 10.0, 99.0] {
        s.run(format!("lemma2_identity_t{t}"), || {
            check_lemma2(params, t, seed)
        });
    }
    s.run("guidance_cfg_embedding", || check_cfg_embedding(seed));
    s.run("clamp_idempotence", || check_clamp(seed));
    s.run("combiner_linearity", || check_linearity(seed));
    s.run("ddim_affine_exactness", || check_affine_exactness(seed));
    s.run("guidance_equivalence", || check_guidance_equivalence(seed));
    s.run("sampler_determinism", || check_sampler_determinism(seed));

    // Figure 1 and drift share one table and one set of sampler runs.
    let oracle = toy();
    let grid = TimeGrid::build(
        oracle.schedule(),
        &GridSpec {
            horizon: params.horizon,
            nfe: params.nfe,
            ..GridSpec::default()
        },
    );
    let cond = Condition::scalar(params.condition);
    let mut table: Option<LookupTable> = None;
    s.run("figure1_table", || {
        let grid = grid.as_ref().map_err(clone_err)?;
        let opts = BuildOptions {
            n_per_condition: params.table_n,
            seed,
            ..BuildOptions::default()
        };
        let (t, _) = build_from_oracle(
            &oracle,
            oracle.world(),
            grid,
            std::slice::from_ref(&cond),
            &opts,
        )?;
        let detail = format!(
            "n={} nfe={} max|ratio|={:.3e}",
            params.table_n,
            t.nfe(),
            t.max_abs_ratio()
        );
        table = Some(t);
        Ok((true, detail))
    });
    for &gamma in &params.gammas {
        let mut pair: Option<GuidedPair> = None;
        s.run(format!("figure1_gamma_{gamma}"), || {
            let (grid, table) = (
                grid.as_ref().map_err(clone_err)?,
                table.as_ref().ok_or_else(no_table)?,
            );
            let p = guided_pair(
                &oracle,
                oracle.world(),
                table,
                grid,
                &cond,
                gamma,
                ClampMode::Strict,
                params.batch,
                derive_seed(seed, 0xF1),
            )?;
            let out = check_figure1(params, &oracle, grid, &cond, &p);
            pair = Some(p);
            out
        });
        s.run(format!("drift_theorem3_gamma_{gamma}"), || {
            let grid = grid.as_ref().map_err(clone_err)?;
            check_drift(&oracle, grid, &cond, pair.as_ref().ok_or_else(no_table)?)
        });
    }

    s.run("table_ratio_convergence", || {
        check_ratio_convergence(params, seed)
    });
    s.run("table_perturbed_ratio", || {
        check_perturbed_ratio(params, seed)
    });
    s.run("table_annihilation", || check_annihilation(params, seed));
    s.run("table_avg_consistency", || check_avg_consistency(seed));
    s.run("table_condition_spread", || {
        check_condition_spread(params, seed)
    });
    s.run("table_build_determinism", || check_build_determinism(seed));
    s.run("table_round_trip", || check_round_trip(seed));

    VerifyReport {
        params: params.clone(),
        seed,
        checks: s.checks,
    }
}

fn clone_err(e: &Error) -> Error {
    Error::Validation(e.to_string())
}

fn no_table() -> Error {
    Error::Validation("skipped: prerequisite check failed".into())
}

fn check_phi_special() -> Result<Outcome> {
    let vals = [(1.0, 1.0), (3.0, 2.0), (5.0, 7.0 / 3.0)];
    let mut worst = 0.0f64;
    for (g, want) in vals {
        worst = worst.max((phi_limit(g)? - want).abs());
    }
    Ok((
        worst <= 1e-9,
        format!("max |phi - exact| = {worst:.2e} at gamma in {{1, 3, 5}}"),
    ))
}

fn check_phi_recurrence() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for i in 0..=16 {
        worst = worst.max(phi_recurrence_residual(1.0 + 0.25 * i as f64)?);
    }
    Ok((
        worst <= 1e-8,
        format!("max residual {worst:.2e} on gamma = 1, 1.25, ..., 5"),
    ))
}

fn check_phi_closed() -> Result<Outcome> {
    let mut worst_odd = 0.0f64;
    for n in 0..=6 {
        worst_odd =
            worst_odd.max((phi_closed(Parity::Odd(n))? - phi_limit(2.0 * n as f64 + 1.0)?).abs());
    }
    let even = (phi_closed(Parity::Even(1))? - phi_limit(2.0)?).abs();
    let odd50 = (phi_closed(Parity::Odd(50))? - 2.0).abs();
    Ok((
        worst_odd <= 1e-8 && even <= 1e-9 && odd50 < 0.05,
        format!("odd n<=6 max diff {worst_odd:.2e}; even(1) diff {even:.2e}; |phi(101) - 2| = {odd50:.3e}"),
    ))
}

fn check_phi_bounds() -> Result<Outcome> {
    let failing: Vec<f64> = (0..=70)
        .map(|i| 1.0 + 0.1 * i as f64)
        .filter(|&g| !phi_bounds_check(g))
        .collect();
    Ok((
        failing.is_empty(),
        format!("71 grid points on [1, 8], failing: {failing:?}"),
    ))
}

fn check_snr_monotone() -> Result<Outcome> {
    let ve = NoiseSchedule::VarianceExploding;
    let vp = NoiseSchedule::VariancePreserving {
        beta_min: 0.1,
        beta_max: 20.0,
    };
    let mut ok = true;
    for (sched, lo, hi) in [(ve, -4.0f64, 4.0f64), (vp, -4.0, 0.0)] {
        let ts: Vec<f64> = (0..=400)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / 400.0))
            .collect();
        let snr: Vec<f64> = ts.iter().map(|&t| sched.snr(t)).collect::<Result<_>>()?;
        ok &= snr.windows(2).all(|w| w[1] < w[0]);
    }
    Ok((
        ok,
        "alpha^2/sigma^2 strictly decreasing on 401 log-spaced times (VE, VP)".into(),
    ))
}

fn check_ddim_translation(seed: u64) -> Result<Outcome> {
    let mut rng = NormalStream::new(derive_seed(seed, 0xD0), 0);
    let mut worst = 0.0f64;
    for sched in [
        NoiseSchedule::VarianceExploding,
        NoiseSchedule::VariancePreserving {
            beta_min: 0.1,
            beta_max: 20.0,
        },
    ] {
        for _ in 0..1000 {
            let t = 0.01 + 0.9 * rng.next().abs().min(1.0);
            let t_prev = t * 0.5;
            let (a, b) = sched.ddim_step_coeffs(t, t_prev)?;
            let (x, delta, eps) = (rng.next(), rng.next(), rng.next());
            let shifted = a * (x + delta) + b * eps - (a * x + b * eps);
            worst = worst.max((shifted - a * delta).abs() / (1.0 + (a * delta).abs()));
        }
    }
    Ok((
        worst < 1e-12,
        format!("max relative deviation {worst:.2e} over 2000 random steps"),
    ))
}

fn check_pf_ode_composition() -> Result<Outcome> {
    let o = toy();
    let cond = Condition::scalar(1.0);
    let grid = TimeGrid::uniform_time(9.0, 80, 0.1)?.truncated()?;
    let mut worst = 0.0f64;
    for (g, x_start) in [(1.0, -2.0), (2.0, 1.0), (3.0, 4.0)] {
        let coeffs = vec![GuidanceCoefficients::cfg(g); grid.nfe()];
        let mut x = vec![x_start];
        integrate_from(&o, &coeffs, Method::OdeRk4, &grid, &cond, &mut x, None)?;
        let exact = toy_pf_ode_solution(g, 1.0 - g, 1.0, x_start, 9.0, grid.terminal())?;
        worst = worst.max((x[0] - exact).abs());
    }
    Ok((
        worst < 1e-6,
        format!("RK4 (80 steps) vs closed-form flow map: max error {worst:.2e}"),
    ))
}

fn check_bayes(seed: u64) -> Result<Outcome> {
    let world = AnalyticWorld::new(vec![0.5, 2.0], vec![0.3, -1.0], vec![1.5, 0.7])?;
    let mut rng = NormalStream::new(derive_seed(seed, 0xBA), 0);
    let mut worst = 0.0f64;
    for sched in [
        NoiseSchedule::VarianceExploding,
        NoiseSchedule::VariancePreserving {
            beta_min: 0.1,
            beta_max: 20.0,
        },
    ] {
        for t in [0.01, 0.3, 0.9] {
            for _ in 0..50 {
                let x = [3.0 * rng.next(), 3.0 * rng.next()];
                // the conditional score is affine in c, so its posterior average is its value at the posterior mean
                let post = world.condition_posterior(&sched, &x, t)?;
                let avg = world.cond_score(&sched, &x, &post.mean, t)?;
                let u = world.uncond_score(&sched, &x, t)?;
                for k in 0..2 {
                    worst = worst.max((avg[k] - u[k]).abs() / (1.0 + u[k].abs()));
                }
            }
        }
    }
    Ok((worst < 1e-12, format!("max relative gap {worst:.2e}")))
}

fn check_zero_cond_mean(p: &SuiteParams, seed: u64) -> Result<Outcome> {
    let o = toy();
    let c = [1.0];
    let mut worst_z = 0.0f64;
    for (j, t) in [0.1, 1.0, 10.0, 99.0].into_iter().enumerate() {
        let law = o.world().cond_marginal(o.schedule(), &c, t)?;
        let mut rng = NormalStream::new(derive_seed(seed, 0x2C), j as u64);
        let mut vals = vec![0.0; p.lemma_n];
        for v in vals.iter_mut() {
            let x = [law.mean[0] + law.var[0].sqrt() * rng.next()];
            let mut e = [0.0];
            o.eps_cond_into(&x, &c, t, &mut e)?;
            *v = e[0];
        }
        let m = moments_of(&vals, 1)?;
        worst_z = worst_z.max((m.mean[0] / m.se_mean[0]).abs());
    }
    Ok((
        worst_z < 3.0,
        format!("max |mean|/se = {worst_z:.2} at t in {{0.1, 1, 10, 99}}"),
    ))
}

fn check_lemma2(p: &SuiteParams, t: f64, seed: u64) -> Result<Outcome> {
    let o = toy();
    let r = crate::metrics::lemma2_residual(
        &o,
        o.world(),
        t,
        p.lemma_n,
        derive_seed(seed, t.to_bits()),
    )?;
    let z = r.value[0] / r.se[0];
    Ok((
        z.abs() < 3.0,
        format!(
            "residual {:.3e} (se {:.3e}, {z:.2} se), n = {}",
            r.value[0], r.se[0], p.lemma_n
        ),
    ))
}

fn random_vec(rng: &mut NormalStream, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.next()).collect()
}

fn check_cfg_embedding(seed: u64) -> Result<Outcome> {
    let mut rng = NormalStream::new(derive_seed(seed, 0xCE), 0);
    let mut ok = true;
    for i in 0..500 {
        let d = 1 + i % 5;
        let (ec, eu) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let g = 4.0 * rng.next();
        let a = combine_cfg(&ec, &eu, g)?;
        let b = combine_recfg(
            &ec,
            &eu,
            &GuidanceCoefficients::new(vec![g], vec![1.0 - g], ClampMode::Off),
        )?;
        ok &= a == b;
    }
    Ok((
        ok,
        "recfg(gamma, 1 - gamma) == cfg(gamma) bit-for-bit on 500 random inputs".into(),
    ))
}

fn check_clamp(seed: u64) -> Result<Outcome> {
    let mut rng = NormalStream::new(derive_seed(seed, 0xC1), 0);
    let mut ok = true;
    for mode in [ClampMode::Strict, ClampMode::Loose] {
        for _ in 0..500 {
            let g1: Vec<f64> = (0..3).map(|_| 1.0 + 3.0 * rng.next().abs()).collect();
            let g0 = (0..3).map(|_| 3.0 * rng.next()).collect();
            let once = clamp_coeffs(&GuidanceCoefficients::new(g1, g0, mode))?;
            let twice = clamp_coeffs(&once)?;
            ok &= once == twice && is_feasible(&once);
        }
    }
    Ok((
        ok,
        "clamp(clamp(x)) == clamp(x) and feasible, strict and loose, 1000 cases".into(),
    ))
}

fn check_linearity(seed: u64) -> Result<Outcome> {
    let mut rng = NormalStream::new(derive_seed(seed, 0x11), 0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let d = 3;
        let coeffs = GuidanceCoefficients::new(
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
            ClampMode::Off,
        );
        let (a1, b1, a2, b2) = (
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
        );
        let (s, u) = (rng.next(), rng.next());
        let mix = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(x, y)| s * x + u * y)
                .collect::<Vec<_>>()
        };
        let lhs = combine_recfg(&mix(&a1, &a2), &mix(&b1, &b2), &coeffs)?;
        let r1 = combine_recfg(&a1, &b1, &coeffs)?;
        let r2 = combine_recfg(&a2, &b2, &coeffs)?;
        for k in 0..d {
            worst = worst.max((lhs[k] - (s * r1[k] + u * r2[k])).abs());
        }
    }
    Ok((
        worst < 1e-12,
        format!("max deviation {worst:.2e} over 500 random combinations"),
    ))
}

fn check_affine_exactness(seed: u64) -> Result<Outcome> {
    // DDIM with an affine oracle is an affine map; recover (slope, intercept)
    // from two chains and predict the batch moments.
    let o = toy();
    let cond = Condition::scalar(1.0);
    let grid = TimeGrid::build(
        o.schedule(),
        &GridSpec {
            nfe: 256,
            ..GridSpec::default()
        },
    )?;
    let coeffs = vec![GuidanceCoefficients::cfg(2.0); grid.nfe()];
    let map = |x: f64| -> Result<f64> {
        let mut v = vec![x];
        integrate_from(&o, &coeffs, Method::Ddim, &grid, &cond, &mut v, None)?;
        Ok(v[0])
    };
    let intercept = map(0.0)?;
    let slope = map(1.0)? - intercept;
    let cfg = SamplerConfig::new(Method::Ddim, grid.clone(), 20_000, derive_seed(seed, 0xAF));
    let batch = ddim_run(&o, o.world(), &GuidanceRule::Cfg(2.0), &cfg, &cond)?;
    let start = o
        .world()
        .cond_marginal(o.schedule(), &cond.value, grid.horizon())?;
    // chain j starts from stream j, so the prediction uses the realized starts
    let m = moments_of(&batch.x0, 1)?;
    let starts: Vec<f64> = batch.x0.iter().map(|x| (x - intercept) / slope).collect();
    let ms = moments_of(&starts, 1)?;
    let mean_gap = (m.mean[0] - (slope * ms.mean[0] + intercept)).abs();
    let var_gap = (m.var[0] - slope * slope * ms.var[0]).abs() / m.var[0];
    let start_z = (ms.mean[0] - start.mean[0]) / (start.var[0] / 20_000.0).sqrt();
    let ok = mean_gap < 1e-9 && var_gap < 1e-9 && start_z.abs() < 4.0;
    Ok((
        ok,
        format!("slope {slope:.6e}, intercept {intercept:.6e}; mean gap {mean_gap:.1e}, var gap {var_gap:.1e}, start mean {start_z:.2} se"),
    ))
}

fn check_guidance_equivalence(seed: u64) -> Result<Outcome> {
    let o = toy();
    let grid = TimeGrid::uniform_time(99.0, 128, 1e-3)?;
    let cond = Condition::scalar(1.0);
    let mut ok = true;
    for method in [Method::Ddim, Method::OdeRk4, Method::OdeEuler] {
        let cfg = SamplerConfig::new(method, grid.clone(), 500, seed);
        for g in [1.5, 2.0, 2.5] {
            let a = crate::sampler::run(&o, o.world(), &GuidanceRule::Cfg(g), &cfg, &cond)?;
            let rule = GuidanceRule::Recfg {
                gamma1: vec![g],
                source: crate::sampler::Gamma0Source::Fixed {
                    gamma0: vec![1.0 - g],
                    clamp: ClampMode::Off,
                },
            };
            let b = crate::sampler::run(&o, o.world(), &rule, &cfg, &cond)?;
            ok &= a == b;
        }
    }
    Ok((
        ok,
        "cfg(gamma) == recfg(gamma, 1 - gamma) bit-for-bit for DDIM, RK4, Euler".into(),
    ))
}

fn check_sampler_determinism(seed: u64) -> Result<Outcome> {
    let o = toy();
    let grid = TimeGrid::uniform_time(99.0, 64, 1e-3)?;
    let cfg = SamplerConfig::new(Method::OdeRk4, grid, 3_000, seed);
    let cond = Condition::scalar(1.0);
    let run = || crate::sampler::run(&o, o.world(), &GuidanceRule::Cfg(2.0), &cfg, &cond);
    let a = in_pool(1, run)??;
    let b = in_pool(4, run)??;
    Ok((a == b, "identical batches with 1 and 4 workers".into()))
}

fn check_figure1(
    p: &SuiteParams,
    o: &ExactOracle,
    grid: &TimeGrid,
    cond: &Condition,
    pair: &GuidedPair,
) -> Result<Outcome> {
    let c = p.condition;
    let n = pair.cfg.len() as f64;
    let var_rel_se = (2.0 / (n - 1.0)).sqrt();

    let m = moments_of(&pair.cfg.x0, 1)?;
    let (mean_t, var_t) = (c * pair.cfg_report.mean_coeff, pair.cfg_report.variance);
    let cfg_mean_err = (m.mean[0] - mean_t).abs() / mean_t.abs();
    let cfg_var_err = (m.var[0] - var_t).abs() / var_t;
    let cfg_mean_ok = cfg_mean_err <= p.band(0.01, m.se_mean[0] / mean_t.abs());
    let cfg_var_ok = cfg_var_err <= p.band(0.02, var_rel_se);

    // Ratio noise in the table leaves a residual drift under the realized
    // weights. At full scale it is below the sampler's standard error and the
    // target is c itself; the smaller quick-scale table moves the mean
    // measurably, so there the target is c minus the predicted drift.
    let states = drift_propagate(
        o,
        o.world(),
        &pair.recfg_coeffs,
        grid,
        cond,
        &DriftOptions::default(),
    )?;
    let re_drift = states.last().expect("at least the initial state").delta[0];
    let re_target = if p.quick() { c - re_drift } else { c };
    let r = moments_of(&pair.recfg.x0, 1)?;
    let re_z = (r.mean[0] - re_target) / r.se_mean[0];
    let re_var_t = pair.recfg_report.variance;
    let re_var_err = (r.var[0] - re_var_t).abs() / re_var_t;
    let re_var_ok = re_var_err <= p.band(0.02, var_rel_se);

    let ks_cfg = ks_summary("cfg", &pair.cfg.x0, mean_t, var_t)?;
    let ks_re = ks_summary("recfg", &pair.recfg.x0, re_target, re_var_t)?;
    let ok =
        cfg_mean_ok && cfg_var_ok && re_z.abs() < 3.0 && re_var_ok && ks_cfg.pass && ks_re.pass;
    Ok((
        ok,
        format!(
            "cfg mean rel err {cfg_mean_err:.2e}, var rel err {cfg_var_err:.2e}; recfg mean {re_z:.2} se from {re_target:.6} \
             (predicted residual drift {re_drift:.2e}), var rel err {re_var_err:.2e} (effective gamma0 {:.3e}); \
             KS cfg {:.2e}, recfg {:.2e} (critical {:.2e})",
            pair.recfg_report.gamma0, ks_cfg.statistic, ks_re.statistic, ks_cfg.critical
        ),
    ))
}

fn check_drift(
    o: &ExactOracle,
    grid: &TimeGrid,
    cond: &Condition,
    pair: &GuidedPair,
) -> Result<Outcome> {
    let coeffs = vec![GuidanceCoefficients::cfg(pair.gamma); grid.nfe()];
    let last = |recursion| -> Result<f64> {
        let opts = DriftOptions {
            recursion,
            ..DriftOptions::default()
        };
        let states = drift_propagate(o, o.world(), &coeffs, grid, cond, &opts)?;
        Ok(states.last().expect("at least the initial state").delta[0])
    };
    let predicted = last(DriftRecursion::MeanExact)?;
    let sigma_ratio = last(DriftRecursion::SigmaRatio)?;
    let m = moments_of(&pair.cfg.x0, 1)?;
    let observed = cond.value[0] - m.mean[0];
    let z = (predicted - observed) / m.se_mean[0];
    Ok((
        z.abs() < 3.0,
        format!(
            "predicted {predicted:.5e}, observed {observed:.5e} ({z:.2} se); sigma-ratio form gives {sigma_ratio:.5e}"
        ),
    ))
}

fn small_grid(nfe: usize) -> Result<TimeGrid> {
    TimeGrid::build(
        &NoiseSchedule::VarianceExploding,
        &GridSpec {
            nfe,
            spacing: GridSpacing::SigmaPower { rho: 2.0 },
            ..GridSpec::default()
        },
    )
}

fn build<O: ScoreOracle>(
    o: &O,
    grid: &TimeGrid,
    conditions: &[Condition],
    n: usize,
    seed: u64,
) -> Result<(LookupTable, BuildStats)> {
    let opts = BuildOptions {
        n_per_condition: n,
        seed,
        ..BuildOptions::default()
    };
    build_from_oracle(o, &AnalyticWorld::toy(), grid, conditions, &opts)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn check_ratio_convergence(p: &SuiteParams, seed: u64) -> Result<Outcome> {
    let o = toy();
    let grid = small_grid(16)?;
    let cond = [Condition::scalar(1.0)];
    let mut maxes = Vec::new();
    for &n in &p.convergence_ns {
        maxes.push(
            build(&o, &grid, &cond, n, derive_seed(seed, 0xC0))?
                .0
                .max_abs_ratio(),
        );
    }
    let ns: Vec<f64> = p.convergence_ns.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&ns, &maxes);
    Ok((
        (slope + 0.5).abs() <= 0.15,
        format!(
            "max |ratio| [{}] over n = {:?}; slope {slope:.3}",
            maxes
                .iter()
                .map(|m| format!("{m:.3e}"))
                .collect::<Vec<_>>()
                .join(", "),
            p.convergence_ns
        ),
    ))
}

/// `E[ε_cond] / E[ε_uncond]` under `q_t(x | c)` for the perturbed toy oracle.
pub fn perturbed_ratio(
    world: &AnalyticWorld,
    sched: &NoiseSchedule,
    bias: f64,
    c: f64,
    t: f64,
) -> Result<f64> {
    let (alpha, sigma) = sched.eval(t)?;
    let total = world.marginal_var()[0];
    let mean_uncond =
        sigma * alpha * (c - world.prior_mean()[0]) / (alpha * alpha * total + sigma * sigma);
    Ok(bias / mean_uncond)
}

fn check_perturbed_ratio(p: &SuiteParams, seed: u64) -> Result<Outcome> {
    let exact = toy();
    let o = PerturbedOracle::new(exact.clone(), vec![0.1], vec![1.0])?;
    let grid = TimeGrid::from_times(vec![4.0, 1.0, 0.25, 0.0])?;
    let (table, stats) = build(
        &o,
        &grid,
        &[Condition::scalar(1.0)],
        p.lemma_n,
        derive_seed(seed, 0x9E),
    )?;
    let want = perturbed_ratio(exact.world(), exact.schedule(), 0.1, 1.0, 1.0)?;
    let got = table.ratios("1", 1).ok_or_else(no_table)?[0];
    let se = stats.ratio_se["1"][1];
    let z = (got - want) / se;
    Ok((
        z.abs() < 3.0,
        format!("ratio at t=1: {got:.5} vs analytic {want:.5} ({z:.2} se)"),
    ))
}

fn check_annihilation(p: &SuiteParams, seed: u64) -> Result<Outcome> {
    let grid = small_grid(64)?;
    let cond = [Condition::scalar(1.0)];
    let n = p.table_n / 10;
    let gamma1 = 2.0;
    let mut worst = 0.0f64;
    let mut outliers = 0;

    // exact oracle: E[γ1 ε_c + γ0 ε_u] with γ0 from an independent build
    let exact = toy();
    let (t1, s1) = build(&exact, &grid, &cond, n, derive_seed(seed, 0xA1))?;
    let (_, s2) = build(&exact, &grid, &cond, n, derive_seed(seed, 0xA2))?;
    for i in 0..grid.nfe() {
        let g0 = t1.gamma0_for(&[gamma1], "1", i, ClampMode::Off, false)?[0];
        let (mc, mu) = (s2.mean_cond["1"][i], s2.mean_uncond["1"][i]);
        let se = mu.abs()
            * (gamma1.powi(2) * s2.ratio_se["1"][i].powi(2)
                + (1.0 - gamma1).powi(2) * s1.ratio_se["1"][i].powi(2))
            .sqrt();
        let z = (gamma1 * mc + g0 * mu) / se;
        worst = worst.max(z.abs());
        outliers += usize::from(z.abs() > 3.5);
    }

    // perturbed oracle: the residual (γ1 - 1) ε_c + γ0 ε_u, which the ratio cancels
    let pert = PerturbedOracle::new(exact, vec![0.1], vec![1.0])?;
    let (t1, s1) = build(&pert, &grid, &cond, n, derive_seed(seed, 0xA3))?;
    let (_, s2) = build(&pert, &grid, &cond, n, derive_seed(seed, 0xA4))?;
    for i in 0..grid.nfe() {
        let g0 = t1.gamma0_for(&[gamma1], "1", i, ClampMode::Off, false)?[0];
        let (mc, mu) = (s2.mean_cond["1"][i], s2.mean_uncond["1"][i]);
        let se = mu.abs()
            * (gamma1 - 1.0).abs()
            * (s1.ratio_se["1"][i].powi(2) + s2.ratio_se["1"][i].powi(2)).sqrt();
        let z = ((gamma1 - 1.0) * mc + g0 * mu) / se;
        worst = worst.max(z.abs());
        outliers += usize::from(z.abs() > 3.5);
    }
    Ok((
        outliers <= 1,
        format!("128 cells (exact and perturbed, n = {n}): max |z| {worst:.2}, {outliers} beyond 3.5 se"),
    ))
}

fn check_avg_consistency(seed: u64) -> Result<Outcome> {
    let conds: Vec<Condition> = [-1.5, 0.5, 1.0, 2.0]
        .into_iter()
        .map(Condition::scalar)
        .collect();
    let (table, _) = build(&toy(), &small_grid(32)?, &conds, 2_000, seed)?;
    let ok = table.validate().is_ok();
    Ok((
        ok,
        "stored avg equals the mean of the stored condition tensors exactly".into(),
    ))
}

fn check_condition_spread(p: &SuiteParams, seed: u64) -> Result<Outcome> {
    // For the exact toy every ratio is pure noise around 0, so at each cell the
    // weighted across-condition sum of squares is chi-square with K-1 = 4
    // degrees of freedom. Cells of one condition share their x0 draws and are
    // strongly correlated, so the per-cell p-values are combined by Bonferroni.
    let conds: Vec<Condition> = [-2.0, -1.0, 1.0, 1.5, 2.5]
        .into_iter()
        .map(Condition::scalar)
        .collect();
    let grid = small_grid(64)?;
    let (table, stats) = build(
        &toy(),
        &grid,
        &conds,
        p.table_n / 20,
        derive_seed(seed, 0x5D),
    )?;
    let (_, std) = table.condition_spread();
    let mut q_sum = 0.0;
    let mut p_min = 1.0_f64;
    for i in 0..grid.nfe() {
        let w: Vec<f64> = conds
            .iter()
            .map(|c| stats.ratio_se[&c.id][i].powi(-2))
            .collect();
        let r: Vec<f64> = conds
            .iter()
            .map(|c| table.ratios(&c.id, i).expect("built")[0])
            .collect();
        let mean = w.iter().zip(&r).map(|(w, r)| w * r).sum::<f64>() / w.iter().sum::<f64>();
        let x: f64 = w.iter().zip(&r).map(|(w, r)| w * (r - mean).powi(2)).sum();
        q_sum += x / 4.0;
        p_min = p_min.min((-x / 2.0).exp() * (1.0 + x / 2.0));
    }
    let q = q_sum / grid.nfe() as f64;
    let adjusted = (p_min * grid.nfe() as f64).min(1.0);
    let mean_std = std.iter().sum::<f64>() / std.len() as f64;
    Ok((
        adjusted >= 0.01,
        format!(
            "mean across-condition std {mean_std:.3e}; mean spread / se^2 = {q:.3}; \
             smallest cell p-value {p_min:.2e}, Bonferroni-adjusted {adjusted:.3} (need >= 0.01)"
        ),
    ))
}

fn check_build_determinism(seed: u64) -> Result<Outcome> {
    let conds: Vec<Condition> = [0.5, 1.0].into_iter().map(Condition::scalar).collect();
    let grid = small_grid(256)?;
    let o = toy();
    let one = in_pool(1, || build(&o, &grid, &conds, 20_000, seed))??.0;
    let eight = in_pool(8, || build(&o, &grid, &conds, 20_000, seed))??.0;
    let (a, b) = (table_to_json(&one)?, table_to_json(&eight)?);
    Ok((
        a == b,
        format!(
            "table JSON of {} bytes identical with 1 and 8 workers",
            a.len()
        ),
    ))
}

fn check_round_trip(seed: u64) -> Result<Outcome> {
    let o = PerturbedOracle::new(toy(), vec![0.1], vec![1.2])?;
    let conds: Vec<Condition> = [0.5, 1.0].into_iter().map(Condition::scalar).collect();
    let (table, _) = build(&o, &small_grid(32)?, &conds, 5_000, seed)?;
    let text = table_to_json(&table)?;
    let back = table_from_json(&text)?;
    let again = table_to_json(&back)?;
    Ok((
        back == table && again == text,
        "save -> load -> save reproduces table and bytes".into(),
    ))
}

/// CSV row form of a check, used by `plot-data` summaries.
pub fn check_row(c: &Check) -> Vec<String> {
    vec![
        c.name.clone(),
        c.passed.to_string(),
        fmt17(c.seconds),
        c.detail.clone(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1e3, 1e4, 1e5];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn perturbed_ratio_example() {
        let r = perturbed_ratio(
            &AnalyticWorld::toy(),
            &NoiseSchedule::VarianceExploding,
            0.1,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((r - 0.3).abs() < 1e-15);
    }

    #[test]
    fn deterministic_checks_pass() {
        for (name, out) in [
            ("phi_special", check_phi_special()),
            ("closed", check_phi_closed()),
            ("bounds", check_phi_bounds()),
            ("snr", check_snr_monotone()),
            ("translation", check_ddim_translation(1)),
            ("composition", check_pf_ode_composition()),
            ("bayes", check_bayes(1)),
            ("embedding", check_cfg_embedding(1)),
            ("clamp", check_clamp(1)),
            ("linearity", check_linearity(1)),
            ("round_trip", check_round_trip(1)),
        ] {
            let (ok, detail) = out.unwrap();
            assert!(ok, "{name}: {detail}");
        }
    }
}

//! Acceptance criteria 1 to 9, run at their stated scale and tolerances.
//!
//! Everything runs inside one test so the criteria execute in order, time
//! cleanly and print one line each. Run with `--nocapture` to see the lines.

use std::process::Command;
use std::time::{Duration, Instant};

use recfg::experiment::guided_pair;
use recfg::guidance::{ClampMode, GuidanceCoefficients};
use recfg::metrics::{ks_summary, lemma2_residual, moments_of};
use recfg::rng::derive_seed;
use recfg::schedule::{GridSpec, NoiseSchedule, TimeGrid};
use recfg::shift::{
    drift_propagate, phi_bounds_check, phi_closed, phi_limit, phi_recurrence_residual,
    DriftOptions, DriftRecursion, Parity,
};
use recfg::table::{build_from_oracle, table_from_json, table_to_json, BuildOptions};
use recfg::verify::{log_log_slope, perturbed_ratio};
use recfg::world::{AnalyticWorld, Condition, ExactOracle, PerturbedOracle, ScoreOracle};

const SEED: u64 = 0;
const HORIZON: f64 = 99.0;
const NFE: usize = 4096;
const BATCH: usize = 100_000;
const TABLE_N: usize = 1_000_000;
const GAMMAS: [f64; 3] = [1.5, 2.0, 2.5];
const C: f64 = 1.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn toy() -> ExactOracle {
    ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding)
}

fn single_worker<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn within_budget(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (limit {limit_s} s)"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let e1 = (phi_limit(1.0).unwrap() - 1.0).abs();
    let e3 = (phi_limit(3.0).unwrap() - 2.0).abs();
    let e5 = (phi_limit(5.0).unwrap() - 7.0 / 3.0).abs();
    let (fast, time) = within_budget(start.elapsed(), 1.0);
    let worst = e1.max(e3).max(e5);
    outcome(
        worst <= 1e-9 && fast,
        format!("special values: |phi(1)-1| {e1:.1e}, |phi(3)-2| {e3:.1e}, |phi(5)-7/3| {e5:.1e}; {time}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let worst = (0..=16)
        .map(|k| {
            phi_recurrence_residual(1.0 + 0.25 * k as f64)
                .unwrap()
                .abs()
        })
        .fold(0.0, f64::max);
    let (fast, time) = within_budget(start.elapsed(), 10.0);
    outcome(
        worst <= 1e-8 && fast,
        format!("recurrence: max residual {worst:.2e} over gamma = 1.0, 1.25, ..., 5.0; {time}"),
    )
}

fn criterion_3() -> Outcome {
    let odd = (0..=6)
        .map(|n| {
            (phi_closed(Parity::Odd(n)).unwrap() - phi_limit(2.0 * n as f64 + 1.0).unwrap()).abs()
        })
        .fold(0.0, f64::max);
    let even_value = phi_closed(Parity::Even(1)).unwrap();
    let even = (even_value - phi_limit(2.0).unwrap()).abs();
    let pinned = (even_value - 1.623225).abs();
    outcome(
        odd <= 1e-8 && even <= 1e-9 && pinned < 5e-7,
        format!(
            "closed forms: odd n <= 6 max err {odd:.2e}; phi(2) = {even_value:.9} err {even:.2e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let grid: Vec<f64> = (0..=70).map(|k| 1.0 + 0.1 * k as f64).collect();
    let failing: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|&g| !phi_bounds_check(g))
        .collect();
    outcome(
        failing.is_empty(),
        format!(
            "bounds hold at {} of {} grid points on [1, 8]",
            grid.len() - failing.len(),
            grid.len()
        ),
    )
}

/// Criteria 5 and 6 share the table and the CFG runs.
fn criteria_5_and_6() -> (Outcome, Outcome) {
    let oracle = toy();
    let grid = TimeGrid::build(
        oracle.schedule(),
        &GridSpec {
            horizon: HORIZON,
            nfe: NFE,
            ..GridSpec::default()
        },
    )
    .unwrap();
    let cond = Condition::scalar(C);
    let start = Instant::now();
    let pairs = single_worker(|| {
        let opts = BuildOptions {
            n_per_condition: TABLE_N,
            seed: SEED,
            ..BuildOptions::default()
        };
        let (table, _) = build_from_oracle(
            &oracle,
            oracle.world(),
            &grid,
            std::slice::from_ref(&cond),
            &opts,
        )
        .unwrap();
        GAMMAS
            .iter()
            .map(|&g| {
                let seed = derive_seed(SEED, 0xF1);
                guided_pair(
                    &oracle,
                    oracle.world(),
                    &table,
                    &grid,
                    &cond,
                    g,
                    ClampMode::Strict,
                    BATCH,
                    seed,
                )
                .unwrap()
            })
            .collect::<Vec<_>>()
    });
    let (fast, time) = within_budget(start.elapsed(), 300.0);

    let mut ok5 = fast;
    let mut parts5 = Vec::new();
    let mut ok6 = true;
    let mut parts6 = Vec::new();
    let var_rel_tol = 0.02;
    for p in &pairs {
        let cfg = moments_of(&p.cfg.x0, 1).unwrap();
        let mean_t = C * p.cfg_report.mean_coeff;
        let var_t = p.cfg_report.variance;
        let cfg_mean_err = (cfg.mean[0] - mean_t).abs() / mean_t.abs();
        let cfg_var_err = (cfg.var[0] - var_t).abs() / var_t;

        let re = moments_of(&p.recfg.x0, 1).unwrap();
        let re_z = (re.mean[0] - C) / re.se_mean[0];
        let re_var_t = p.recfg_report.variance;
        let re_var_err = (re.var[0] - re_var_t).abs() / re_var_t;

        let ks_cfg = ks_summary("cfg", &p.cfg.x0, mean_t, var_t).unwrap();
        let ks_re = ks_summary("recfg", &p.recfg.x0, C, re_var_t).unwrap();

        ok5 &= cfg_mean_err <= 0.01
            && cfg_var_err <= var_rel_tol
            && re_z.abs() <= 3.0
            && re_var_err <= var_rel_tol
            && ks_cfg.pass
            && ks_re.pass;
        parts5.push(format!(
            "g={}: cfg mean {cfg_mean_err:.1e} var {cfg_var_err:.1e} ks {:.1e}; recfg z {re_z:.2} var {re_var_err:.1e} ks {:.1e}",
            p.gamma, ks_cfg.statistic, ks_re.statistic
        ));

        // The ground-truth mean is c exactly, so only the sampler mean carries error.
        let coeffs = vec![GuidanceCoefficients::cfg(p.gamma); grid.nfe()];
        let drift = |recursion| {
            let opts = DriftOptions {
                recursion,
                ..DriftOptions::default()
            };
            drift_propagate(&oracle, oracle.world(), &coeffs, &grid, &cond, &opts)
                .unwrap()
                .last()
                .unwrap()
                .delta[0]
        };
        let predicted = drift(DriftRecursion::MeanExact);
        let literal = drift(DriftRecursion::SigmaRatio);
        let observed = C - cfg.mean[0];
        let z = (predicted - observed) / cfg.se_mean[0];
        ok6 &= z.abs() <= 3.0;
        parts6.push(format!(
            "g={}: predicted {predicted:.4e} observed {observed:.4e} ({z:.2} se; sigma-ratio form {literal:.2e})",
            p.gamma
        ));
    }
    let critical = ks_summary("x", &pairs[0].cfg.x0, 0.0, 1.0)
        .unwrap()
        .critical;
    (
        outcome(
            ok5,
            format!("{}; KS critical {critical:.2e}; {time}", parts5.join("; ")),
        ),
        outcome(ok6, parts6.join("; ")),
    )
}

fn criterion_6_timed() -> Outcome {
    // The drift prediction alone, timed separately from the sampling it is compared with.
    let oracle = toy();
    let grid = TimeGrid::build(oracle.schedule(), &GridSpec::default()).unwrap();
    let cond = Condition::scalar(C);
    let start = Instant::now();
    for g in GAMMAS {
        let coeffs = vec![GuidanceCoefficients::cfg(g); grid.nfe()];
        drift_propagate(
            &oracle,
            oracle.world(),
            &coeffs,
            &grid,
            &cond,
            &DriftOptions::default(),
        )
        .unwrap();
    }
    let (fast, time) = within_budget(start.elapsed(), 120.0);
    outcome(fast, format!("drift propagation for three gammas: {time}"))
}

fn criterion_7() -> Outcome {
    let oracle = toy();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, t) in [0.1, 1.0, 10.0, 99.0].into_iter().enumerate() {
        let est = lemma2_residual(
            &oracle,
            oracle.world(),
            t,
            1_000_000,
            derive_seed(SEED, 0x1E + k as u64),
        )
        .unwrap();
        let z = est.value[0] / est.se[0];
        ok &= z.abs() <= 3.0;
        parts.push(format!("t={t}: {:.2e} ({z:.2} se)", est.value[0]));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let oracle = toy();
    let small = TimeGrid::build(
        oracle.schedule(),
        &GridSpec {
            nfe: 16,
            ..GridSpec::default()
        },
    )
    .unwrap();
    let one = [Condition::scalar(1.0)];
    let exact_build = |grid: &TimeGrid, n: usize, seed: u64| {
        let opts = BuildOptions {
            n_per_condition: n,
            seed,
            ..BuildOptions::default()
        };
        build_from_oracle(&oracle, oracle.world(), grid, &one, &opts)
            .unwrap()
            .0
    };
    let ns = [1e3, 1e4, 1e5, 1e6];
    let maxes: Vec<f64> = ns
        .iter()
        .map(|&n| exact_build(&small, n as usize, derive_seed(SEED, 0x8C)).max_abs_ratio())
        .collect();
    let slope = log_log_slope(&ns, &maxes);
    let slope_ok = (slope + 0.5).abs() <= 0.15;

    let perturbed = PerturbedOracle::new(toy(), vec![0.1], vec![1.0]).unwrap();
    let coarse = TimeGrid::from_times(vec![4.0, 1.0, 0.25, 0.0]).unwrap();
    let opts = BuildOptions {
        n_per_condition: 1_000_000,
        seed: derive_seed(SEED, 0x8D),
        ..BuildOptions::default()
    };
    let (table, stats) =
        build_from_oracle(&perturbed, oracle.world(), &coarse, &one, &opts).unwrap();
    let want = perturbed_ratio(oracle.world(), oracle.schedule(), 0.1, 1.0, 1.0).unwrap();
    let got = table.ratios("1", 1).unwrap()[0];
    let z = (got - want) / stats.ratio_se["1"][1];
    let ratio_ok = z.abs() <= 3.0 && (want - 0.3).abs() < 1e-12;

    let mid = TimeGrid::build(
        oracle.schedule(),
        &GridSpec {
            nfe: 256,
            ..GridSpec::default()
        },
    )
    .unwrap();
    let two: Vec<Condition> = [0.5, 1.0].into_iter().map(Condition::scalar).collect();
    let in_pool = |workers| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap()
            .install(|| {
                let opts = BuildOptions {
                    n_per_condition: 20_000,
                    seed: derive_seed(SEED, 0x8E),
                    ..BuildOptions::default()
                };
                table_to_json(
                    &build_from_oracle(&perturbed, oracle.world(), &mid, &two, &opts)
                        .unwrap()
                        .0,
                )
                .unwrap()
            })
    };
    let (a, b) = (in_pool(1), in_pool(8));
    let identical = a == b;

    let back = table_from_json(&a).unwrap();
    let round_trip = table_to_json(&back).unwrap() == a;

    outcome(
        slope_ok && ratio_ok && identical && round_trip,
        format!(
            "slope {slope:.3}; perturbed ratio {got:.5} vs {want:.5} ({z:.2} se); 1 vs 8 workers identical: {identical}; \
             round trip exact: {round_trip}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_recfg"))
        .args(["verify", "--set", "verify.scale=full", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let code = status.status.code();
    let stdout = String::from_utf8_lossy(&status.stdout);
    let summary = stdout.lines().last().unwrap_or("").to_string();
    outcome(
        code == Some(0),
        format!("recfg verify exit {code:?}: {summary}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1", criterion_1()),
        ("2", criterion_2()),
        ("3", criterion_3()),
        ("4", criterion_4()),
    ];
    let (c5, c6) = criteria_5_and_6();
    let c6_time = criterion_6_timed();
    results.push(("5", c5));
    results.push((
        "6",
        outcome(
            c6.passed && c6_time.passed,
            format!("{}; {}", c6.detail, c6_time.detail),
        ),
    ));
    results.push(("7", criterion_7()));
    results.push(("8", criterion_8()));
    results.push(("9", criterion_9()));

    for (name, r) in &results {
        println!(
            "criterion {name}: {} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

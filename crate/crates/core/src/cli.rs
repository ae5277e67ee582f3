//! Command-line front end.
//!
//! Every command writes under `<output root>/<command>/` with fixed file names,
//! so identical configurations produce identical trees. Failures exit with 1
//! (invalid input), 2 (numerical failure) or 3 (invariant failure) and leave an
//! `error.json` next to the outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{GuidanceMode, RunConfig};
use crate::error::{CellId, Error, Result};
use crate::experiment::guided_pair;
use crate::metrics::{figure1_panel, fmt_tag, moments_of};
use crate::output::{fmt17, write_csv, write_json};
use crate::sampler::{run as run_sampler, Gamma0Source, GuidanceRule, SamplerConfig};
use crate::schedule::TimeGrid;
use crate::shift::{
    cfg_toy_distribution, drift_propagate, effective_gamma0, phi_closed, recfg_toy_distribution,
    Parity, ShiftReport,
};
use crate::table::{
    build_from_oracle, ingest_cache, load_table, read_cache_csv, save_table, write_heatmaps,
    LookupTable,
};
use crate::verify::{run_suite, SuiteParams};
use crate::world::{AnyOracle, Condition, ScoreOracle};

#[derive(Debug, Parser)]
#[command(
    name = "recfg",
    version,
    about = "Guided-sampling laboratory on analytic Gaussian worlds"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a configuration field, e.g. `--set grid.nfe=256`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Output root (overrides `output` and the RECFG_OUT variable).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Tabulate the terminal mean coefficient and variance over a grid of weights.
    ShiftAnalyze,
    /// CFG versus ReCFG versus ground truth for each configured weight.
    Simulate,
    /// Build the expectation-ratio table from the oracle or a prediction cache.
    BuildTable,
    /// Guided DDIM or probability-flow ODE sampling.
    Sample,
    /// Run the invariant suite.
    Verify,
    /// Collect earlier outputs into per-figure bundles.
    PlotData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::ShiftAnalyze => "shift-analyze",
            Command::Simulate => "simulate",
            Command::BuildTable => "build-table",
            Command::Sample => "sample",
            Command::Verify => "verify",
            Command::PlotData => "plot-data",
        }
    }
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Validation = 1,
    Numeric = 2,
    Invariant = 3,
}

/// Command failure, either a library error or failed invariants.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    Invariants(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Invariants(_) => ExitCode::Invariant,
            Failure::Error(e) => match e {
                Error::Quadrature { .. }
                | Error::NumericFailure { .. }
                | Error::SingularSigma { .. }
                | Error::Ordering { .. } => ExitCode::Numeric,
                _ => ExitCode::Validation,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Invariants(_) => "invariant",
            Failure::Error(e) => match e {
                Error::Domain(_) => "domain",
                Error::Ordering { .. } => "ordering",
                Error::DimensionMismatch { .. } => "dimension_mismatch",
                Error::SingularSigma { .. } => "singular_sigma",
                Error::InfeasibleClamp { .. } => "infeasible_clamp",
                Error::Quadrature { .. } => "quadrature",
                Error::NumericFailure { .. } => "numeric_failure",
                Error::Lookup(_) => "lookup",
                Error::IncompleteTable { .. } => "incomplete_table",
                Error::Validation(_) => "validation",
                Error::SchemaVersion { .. } => "schema_version",
                Error::Parse { .. } => "parse",
                Error::Io { .. } => "io",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Error(e) => e.to_string(),
            Failure::Invariants(names) => format!(
                "{} invariant check(s) failed: {}",
                names.len(),
                names.join(", ")
            ),
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    command: &'a str,
    exit_code: i32,
    kind: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    gaps: Vec<CellId>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_checks: Vec<String>,
}

fn write_error_report(dir: &Path, command: Command, failure: &Failure) {
    let report = ErrorReport {
        command: command.name(),
        exit_code: failure.exit_code() as i32,
        kind: failure.kind(),
        message: failure.message(),
        gaps: match failure {
            Failure::Error(Error::IncompleteTable { gaps }) => gaps.clone(),
            _ => Vec::new(),
        },
        failed_checks: match failure {
            Failure::Invariants(names) => names.clone(),
            _ => Vec::new(),
        },
    };
    if let Err(e) = write_json(&dir.join("error.json"), &report) {
        log::error!("could not write error report: {e}");
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::Validation as i32
            } else {
                0
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    run_cli(&cli) as i32
}

/// Runs a parsed command line.
pub fn run_cli(cli: &Cli) -> ExitCode {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map(|mut cfg| {
        if let Some(out) = &cli.out {
            cfg.output = Some(out.clone());
        }
        cfg
    });
    let dir = match &cfg {
        Ok(cfg) => cfg.output_root(),
        Err(_) => cli
            .out
            .clone()
            .unwrap_or_else(|| RunConfig::default().output_root()),
    }
    .join(cli.command.name());
    let result = cfg.map_err(Failure::from).and_then(|cfg| {
        let workers = cli.workers.unwrap_or(0);
        if cli.workers == Some(0) {
            return Err(Error::Validation("--workers must be >= 1".into()).into());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
        pool.install(|| run_command(cli.command, &cfg, &dir))
    });
    match result {
        Ok(()) => {
            // a stale report from an earlier failure would be misleading
            let _ = std::fs::remove_file(dir.join("error.json"));
            ExitCode::Ok
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            write_error_report(&dir, cli.command, &f);
            f.exit_code()
        }
    }
}

/// Runs one command with a validated configuration, writing into `dir`.
pub fn run_command(
    command: Command,
    cfg: &RunConfig,
    dir: &Path,
) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match command {
        Command::ShiftAnalyze => shift_analyze(cfg, dir)?,
        Command::Simulate => simulate(cfg, dir)?,
        Command::BuildTable => build_table(cfg, dir)?,
        Command::Sample => sample(cfg, dir)?,
        Command::Verify => return verify(cfg, dir),
        Command::PlotData => plot_data(cfg, dir)?,
    }
    Ok(())
}

const SHIFT_HEADER: [&str; 7] = [
    "kind",
    "gamma1",
    "gamma0",
    "horizon",
    "mean_coeff",
    "variance",
    "source",
];

fn shift_row(kind: &str, r: &ShiftReport) -> Vec<String> {
    vec![
        kind.to_string(),
        fmt17(r.gamma1),
        fmt17(r.gamma0),
        fmt17(r.horizon),
        fmt17(r.mean_coeff),
        fmt17(r.variance),
        r.source.as_str().to_string(),
    ]
}

fn shift_analyze(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for &h in &cfg.shift.horizons {
        for &g in &cfg.shift.gammas {
            let r = cfg_toy_distribution(g, h)?;
            rows.push(shift_row("cfg", &r));
            if h.is_infinite() {
                if let Some(parity) = Parity::from_gamma(g) {
                    let closed = ShiftReport {
                        mean_coeff: phi_closed(parity)?,
                        source: crate::shift::ReportSource::ClosedForm,
                        ..r
                    };
                    rows.push(shift_row("cfg", &closed));
                }
                continue;
            }
            for &g0 in &cfg.shift.gamma0s {
                rows.push(shift_row("recfg", &recfg_toy_distribution(g, g0, h)?));
            }
        }
    }
    log::info!("{} rows", rows.len());
    write_csv(&dir.join("shift_report.csv"), &SHIFT_HEADER, rows)
}

/// Loads `table.path` or builds a table from the configured oracle.
fn obtain_table(cfg: &RunConfig, oracle: &AnyOracle, grid: &TimeGrid) -> Result<LookupTable> {
    match &cfg.table.path {
        Some(path) => {
            let table = load_table(path)?;
            if table.dim != oracle.dim() {
                return Err(Error::Validation(format!(
                    "table.path: table has dim {}, world has dim {}",
                    table.dim,
                    oracle.dim()
                )));
            }
            Ok(table)
        }
        None => {
            log::info!(
                "building lookup table: {} condition(s), n = {}, {} steps",
                cfg.table.conditions.len(),
                cfg.table.n_per_condition,
                grid.nfe()
            );
            let (table, _) = build_from_oracle(
                oracle,
                oracle.world(),
                grid,
                &cfg.table_conditions(),
                &cfg.build_options(),
            )?;
            Ok(table)
        }
    }
}

#[derive(Serialize)]
struct TableSummary {
    model_id: String,
    nfe: usize,
    dim: usize,
    conditions: Vec<String>,
    max_abs_ratio: f64,
    flagged: Vec<CellId>,
}

fn build_table(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let grid = cfg.time_grid()?;
    let table = match &cfg.table.cache {
        Some(cache) => ingest_cache(
            read_cache_csv(cache)?,
            &grid,
            cfg.world.cond_var.len(),
            &cfg.table.model_id,
        )?,
        None => {
            let oracle = cfg.oracle()?;
            let (table, stats) = build_from_oracle(
                &oracle,
                oracle.world(),
                &grid,
                &cfg.table_conditions(),
                &cfg.build_options(),
            )?;
            let d = table.dim;
            write_csv(
                &dir.join("ratio_stats.csv"),
                &[
                    "cond_id",
                    "t_index",
                    "dim",
                    "mean_cond",
                    "mean_uncond",
                    "ratio_se",
                ],
                stats.mean_cond.iter().flat_map(|(id, mc)| {
                    let (mu, se) = (&stats.mean_uncond[id], &stats.ratio_se[id]);
                    (0..mc.len())
                        .map(|j| {
                            vec![
                                id.clone(),
                                (j / d).to_string(),
                                (j % d).to_string(),
                                fmt17(mc[j]),
                                fmt17(mu[j]),
                                fmt17(se[j]),
                            ]
                        })
                        .collect::<Vec<_>>()
                }),
            )?;
            table
        }
    };
    save_table(&table, &dir.join("table.json"))?;
    write_heatmaps(&table, dir)?;
    let (mean, std) = table.condition_spread();
    write_csv(
        &dir.join("condition_spread.csv"),
        &["t_index", "dim", "mean", "std"],
        mean.iter().zip(&std).enumerate().map(|(j, (m, s))| {
            vec![
                (j / table.dim).to_string(),
                (j % table.dim).to_string(),
                fmt17(*m),
                fmt17(*s),
            ]
        }),
    )?;
    write_json(
        &dir.join("summary.json"),
        &TableSummary {
            model_id: table.model_id.clone(),
            nfe: table.nfe(),
            dim: table.dim,
            conditions: table.conditions.keys().cloned().collect(),
            max_abs_ratio: table.max_abs_ratio(),
            flagged: table.flagged.clone(),
        },
    )
}

#[derive(Serialize)]
struct SampleSummary {
    method: crate::sampler::Method,
    mode: GuidanceMode,
    condition: Condition,
    n: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
    se_mean: Vec<f64>,
    effective_gamma0: Option<f64>,
}

fn sample(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let oracle = cfg.oracle()?;
    let grid = cfg.time_grid()?;
    let cond = cfg.sampling_condition();
    let g = &cfg.guidance;
    let table = match (g.mode, &g.gamma0) {
        (GuidanceMode::Recfg, None) => Some(obtain_table(cfg, &oracle, &grid)?),
        _ => None,
    };
    let rule = match g.mode {
        GuidanceMode::None => GuidanceRule::None,
        GuidanceMode::Cfg => {
            if g.gamma1.len() != 1 {
                return Err(Error::Validation(
                    "guidance.gamma1: cfg mode takes a single weight".into(),
                ));
            }
            GuidanceRule::Cfg(g.gamma1[0])
        }
        GuidanceMode::Recfg => GuidanceRule::Recfg {
            gamma1: g.gamma1.clone(),
            source: match (&g.gamma0, &table) {
                (Some(g0), _) => Gamma0Source::Fixed {
                    gamma0: g0.clone(),
                    clamp: g.clamp,
                },
                (None, Some(table)) => Gamma0Source::Table {
                    table,
                    clamp: g.clamp,
                    fallback: g.fallback,
                },
                (None, None) => unreachable!("table obtained above"),
            },
        },
    };
    let coeffs = rule.resolve(&cond, &grid)?;
    let mut sc = SamplerConfig::new(
        cfg.sampling.method,
        grid.clone(),
        cfg.sampling.batch,
        cfg.seed,
    );
    sc.keep_trajectory = cfg.sampling.keep_trajectory;
    let batch = run_sampler(&oracle, oracle.world(), &rule, &sc, &cond)?;
    batch.write_csv(&dir.join("samples.csv"))?;
    let d = batch.dim;
    if let Some(tr) = &batch.trajectory {
        let header: Vec<String> = ["chain".to_string(), "step".to_string(), "t".to_string()]
            .into_iter()
            .chain((0..d).map(|k| format!("x_{k}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &dir.join("trajectory.csv"),
            &header,
            tr.iter().enumerate().flat_map(|(j, states)| {
                states
                    .chunks_exact(d)
                    .enumerate()
                    .map(|(step, x)| {
                        [j.to_string(), step.to_string(), fmt17(grid.times()[step])]
                            .into_iter()
                            .chain(x.iter().map(|v| fmt17(*v)))
                            .collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            }),
        )?;
    }
    let effective = match g.mode {
        GuidanceMode::Recfg => {
            write_csv(
                &dir.join("gamma0_per_step.csv"),
                &["t_index", "t", "dim", "gamma1", "gamma0"],
                coeffs.iter().enumerate().flat_map(|(i, c)| {
                    (0..d)
                        .map(|k| {
                            vec![
                                i.to_string(),
                                fmt17(grid.times()[i]),
                                k.to_string(),
                                fmt17(c.gamma1_at(k)),
                                fmt17(c.gamma0_at(k)),
                            ]
                        })
                        .collect::<Vec<_>>()
                }),
            )?;
            let g0: Vec<f64> = coeffs.iter().map(|c| c.gamma0_at(0)).collect();
            Some(effective_gamma0(&grid, &g0)?)
        }
        _ => None,
    };
    let m = if batch.len() >= 2 {
        moments_of(&batch.x0, d)?
    } else {
        crate::metrics::Moments {
            n: batch.len(),
            mean: batch.x0.clone(),
            var: vec![f64::NAN; d],
            se_mean: vec![f64::NAN; d],
        }
    };
    log::info!("{} samples, mean {:?}", batch.len(), m.mean);
    write_json(
        &dir.join("summary.json"),
        &SampleSummary {
            method: cfg.sampling.method,
            mode: g.mode,
            condition: cond,
            n: batch.len(),
            mean: m.mean,
            var: m.var,
            se_mean: m.se_mean,
            effective_gamma0: effective,
        },
    )
}

fn is_toy(cfg: &RunConfig) -> bool {
    cfg.world.cond_var == [1.0]
        && cfg.world.prior_mean == [0.0]
        && cfg.world.prior_var == [1.0]
        && cfg.schedule == crate::schedule::NoiseSchedule::VarianceExploding
}

fn simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if !is_toy(cfg) {
        return Err(Error::Validation(
            "simulate: theory curves describe the one-dimensional toy world (cond_var = prior_var = [1], prior_mean = [0], VE schedule)".into(),
        ));
    }
    let oracle = cfg.oracle()?;
    let grid = cfg.time_grid()?;
    let cond = cfg.sampling_condition();
    let c = cond.value[0];
    let table = obtain_table(cfg, &oracle, &grid)?;
    let mut summary = Vec::new();
    for &gamma in &cfg.guidance.gammas {
        log::info!("gamma = {gamma}");
        let pair = guided_pair(
            &oracle,
            oracle.world(),
            &table,
            &grid,
            &cond,
            gamma,
            cfg.guidance.clamp,
            cfg.sampling.batch,
            cfg.seed,
        )?;
        let tag = fmt_tag(gamma);
        pair.cfg
            .write_csv(&dir.join(format!("samples_cfg_gamma_{tag}.csv")))?;
        pair.recfg
            .write_csv(&dir.join(format!("samples_recfg_gamma_{tag}.csv")))?;
        write_csv(
            &dir.join(format!("gamma0_gamma_{tag}.csv")),
            &["t_index", "t", "gamma0"],
            pair.gamma0_per_step
                .iter()
                .enumerate()
                .map(|(i, g0)| vec![i.to_string(), fmt17(grid.times()[i]), fmt17(*g0)]),
        )?;
        if pair.cfg.len() >= 10 {
            let panel = figure1_panel(
                c,
                &pair.cfg_report,
                &pair.cfg.x0,
                &pair.recfg_report,
                &pair.recfg.x0,
                cfg.plot.binning(),
                cfg.plot.points,
            )?;
            panel.write(dir)?;
        }
        let coeffs = vec![crate::guidance::GuidanceCoefficients::cfg(gamma); grid.nfe()];
        let drift = drift_propagate(
            &oracle,
            oracle.world(),
            &coeffs,
            &grid,
            &cond,
            &cfg.drift_options(),
        )?;
        let delta = drift.last().map(|s| s.delta[0]).unwrap_or(0.0);
        let (mc, mr) = (moments_of(&pair.cfg.x0, 1)?, moments_of(&pair.recfg.x0, 1)?);
        summary.push(vec![
            fmt17(gamma),
            fmt17(mc.mean[0]),
            fmt17(mc.se_mean[0]),
            fmt17(mc.var[0]),
            fmt17(c * pair.cfg_report.mean_coeff),
            fmt17(pair.cfg_report.variance),
            fmt17(mr.mean[0]),
            fmt17(mr.se_mean[0]),
            fmt17(mr.var[0]),
            fmt17(pair.recfg_report.gamma0),
            fmt17(c * pair.recfg_report.mean_coeff),
            fmt17(pair.recfg_report.variance),
            fmt17(delta),
            fmt17(c - mc.mean[0]),
        ]);
    }
    write_csv(
        &dir.join("summary.csv"),
        &[
            "gamma",
            "cfg_mean",
            "cfg_se_mean",
            "cfg_var",
            "cfg_theory_mean",
            "cfg_theory_var",
            "recfg_mean",
            "recfg_se_mean",
            "recfg_var",
            "recfg_effective_gamma0",
            "recfg_theory_mean",
            "recfg_theory_var",
            "drift_predicted",
            "drift_observed",
        ],
        summary,
    )
}

fn verify(cfg: &RunConfig, dir: &Path) -> std::result::Result<(), Failure> {
    let params = SuiteParams::for_scale(cfg.verify.scale);
    let report = run_suite(&params, cfg.seed);
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    report.write(dir)?;
    let failed: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
    println!(
        "{} of {} checks passed",
        report.checks.len() - failed.len(),
        report.checks.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariants(failed))
    }
}

fn read_rows(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::output::csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| crate::output::csv_error(path, e))?
        .clone();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| crate::output::csv_error(path, e))?;
    Ok((header, rows))
}

/// Files in `dir` named `<prefix>*<suffix>`, sorted by name.
fn matching(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(mid) = name
            .strip_prefix(prefix)
            .and_then(|s| s.strip_suffix(suffix))
        {
            out.push((mid.to_string(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Concatenates same-shaped CSVs with a leading key column.
fn merge(key: &str, files: &[(String, PathBuf)], dest: &Path) -> Result<usize> {
    let mut header: Option<csv::StringRecord> = None;
    let mut rows = Vec::new();
    for (tag, path) in files {
        let (h, recs) = read_rows(path)?;
        match &header {
            Some(prev) if *prev != h => {
                return Err(Error::Validation(format!(
                    "{}: unexpected header {h:?}",
                    path.display()
                )));
            }
            _ => header = Some(h),
        }
        rows.extend(recs.into_iter().map(|r| {
            std::iter::once(tag.clone())
                .chain(r.iter().map(str::to_string))
                .collect::<Vec<_>>()
        }));
    }
    let Some(h) = header else { return Ok(0) };
    let cols: Vec<&str> = std::iter::once(key).chain(h.iter()).collect();
    let n = rows.len();
    write_csv(dest, &cols, rows)?;
    Ok(n)
}

#[derive(Serialize)]
struct Manifest {
    files: Vec<String>,
}

fn plot_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let root = cfg.output_root();
    let mut files = Vec::new();
    let mut add = |name: &str, rows: usize| {
        if rows > 0 {
            files.push(name.to_string());
        }
    };
    let sim = root.join("simulate");
    add(
        "figure1.csv",
        merge(
            "gamma",
            &matching(&sim, "figure1_gamma_", ".csv")?,
            &dir.join("figure1.csv"),
        )?,
    );
    add(
        "figure1_ks.csv",
        merge(
            "gamma",
            &matching(&sim, "ks_gamma_", ".csv")?,
            &dir.join("figure1_ks.csv"),
        )?,
    );
    add(
        "figure1_summary.csv",
        merge(
            "source",
            &[("simulate".into(), sim.join("summary.csv"))]
                .into_iter()
                .filter(|(_, p)| p.exists())
                .collect::<Vec<_>>(),
            &dir.join("figure1_summary.csv"),
        )?,
    );
    add(
        "figure2_heatmap.csv",
        merge(
            "cond_id",
            &matching(&root.join("build-table"), "heatmap_", ".csv")?,
            &dir.join("figure2_heatmap.csv"),
        )?,
    );
    let shift = root.join("shift-analyze").join("shift_report.csv");
    if shift.exists() {
        add(
            "shift_curves.csv",
            merge(
                "source_file",
                &[("shift_report".into(), shift)],
                &dir.join("shift_curves.csv"),
            )?,
        );
    }
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "plot-data: nothing to collect under {}; run simulate, build-table or shift-analyze first",
            root.display()
        )));
    }
    log::info!("wrote {}", files.join(", "));
    write_json(&dir.join("manifest.json"), &Manifest { files })
}

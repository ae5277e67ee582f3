//! Run configuration: a TOML file plus `key=value` overrides.
//!
//! Precedence is overrides > file > built-in defaults. Overrides address nested
//! fields with dotted keys (`grid.nfe=256`) and take TOML literals; a value that
//! does not parse as a literal is taken as a string. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::ClampMode;
use crate::metrics::Binning;
use crate::sampler::Method;
use crate::schedule::{GridSpec, NoiseSchedule, TimeGrid};
use crate::shift::{DriftOptions, DriftRecursion};
use crate::table::BuildOptions;
use crate::world::{AnalyticWorld, AnyOracle, Condition, ExactOracle, PerturbedOracle};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "RECFG_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub cond_var: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            cond_var: vec![1.0],
            prior_mean: vec![0.0],
            prior_var: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    None,
    Cfg,
    #[default]
    Recfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Weight used by `sample`; one entry or one per dimension.
    pub gamma1: Vec<f64>,
    /// Fixed `γ0` for ReCFG; when absent it is read from the lookup table.
    pub gamma0: Option<Vec<f64>>,
    /// Weights swept by `simulate`.
    pub gammas: Vec<f64>,
    pub clamp: ClampMode,
    /// Use the condition-averaged row for conditions missing from the table.
    pub fallback: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Recfg,
            gamma1: vec![2.0],
            gamma0: None,
            gammas: vec![1.5, 2.0, 2.5],
            clamp: ClampMode::Strict,
            fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    #[default]
    Exact,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Additive bias on the conditional branch of the perturbed oracle.
    pub mean_bias: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Exact,
            mean_bias: vec![0.0],
            scale: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub id: Option<String>,
    pub value: Vec<f64>,
}

impl ConditionConfig {
    pub fn to_condition(&self) -> Condition {
        match &self.id {
            Some(id) => Condition::with_id(id.clone(), self.value.clone()),
            None => Condition::new(self.value.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableConfig {
    /// Existing table to load instead of building one.
    pub path: Option<PathBuf>,
    /// Prediction cache to ingest in `build-table`.
    pub cache: Option<PathBuf>,
    pub n_per_condition: usize,
    pub model_id: String,
    pub conditions: Vec<ConditionConfig>,
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            path: None,
            cache: None,
            n_per_condition: 100_000,
            model_id: "analytic".into(),
            conditions: vec![ConditionConfig {
                id: None,
                value: vec![1.0],
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub method: Method,
    pub batch: usize,
    pub condition: ConditionConfig,
    pub keep_trajectory: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            method: Method::Ddim,
            batch: 100_000,
            condition: ConditionConfig {
                id: None,
                value: vec![1.0],
            },
            keep_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub gammas: Vec<f64>,
    /// `inf` selects the limit.
    pub horizons: Vec<f64>,
    /// Rectified rows written alongside the CFG rows, one per `γ0`.
    pub gamma0s: Vec<f64>,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            gammas: (0..=16).map(|i| 1.0 + 0.25 * i as f64).collect(),
            horizons: vec![99.0, f64::INFINITY],
            gamma0s: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub mc_samples: usize,
    pub force_monte_carlo: bool,
    pub recursion: DriftRecursion,
}

impl Default for DriftConfig {
    fn default() -> Self {
        let d = DriftOptions::default();
        Self {
            mc_samples: d.mc_samples,
            force_monte_carlo: d.force_monte_carlo,
            recursion: d.recursion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyScale {
    /// Acceptance-level sample sizes.
    #[default]
    Full,
    /// Reduced sample sizes with correspondingly wider statistical bands.
    Quick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub scale: VerifyScale,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            scale: VerifyScale::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Abscissae per density curve.
    pub points: usize,
    /// Histogram bins; 0 selects the Freedman–Diaconis rule.
    pub bins: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            points: 401,
            bins: 0,
        }
    }
}

impl PlotConfig {
    pub fn binning(&self) -> Binning {
        match self.bins {
            0 => Binning::FreedmanDiaconis,
            k => Binning::Count(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; falls back to `$RECFG_OUT`, then `out`.
    pub output: Option<PathBuf>,
    pub world: WorldConfig,
    pub schedule: NoiseSchedule,
    pub grid: GridSpec,
    pub guidance: GuidanceConfig,
    pub oracle: OracleConfig,
    pub table: TableConfig,
    pub sampling: SamplingConfig,
    pub shift: ShiftConfig,
    pub drift: DriftConfig,
    pub verify: VerifyConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: None,
            world: WorldConfig::default(),
            schedule: NoiseSchedule::VarianceExploding,
            grid: GridSpec::default(),
            guidance: GuidanceConfig::default(),
            oracle: OracleConfig::default(),
            table: TableConfig::default(),
            sampling: SamplingConfig::default(),
            shift: ShiftConfig::default(),
            drift: DriftConfig::default(),
            verify: VerifyConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

/// Message of `e` without the variant prefix of validation errors.
fn strip(e: Error) -> String {
    match e {
        Error::Validation(m) => m,
        other => other.to_string(),
    }
}

/// Parses `key=value`; the value is a TOML literal or, failing that, a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{spec}`: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Validation(format!(
            "override `{spec}`: empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Validation(format!(
                "override `{}`: `{}` is not a table",
                path.join("."),
                path[..=depth].join(".")
            ))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text with overrides applied on top.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {e}")))?;
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                Error::Validation(format!("config: {}: {}", e.path(), e.inner().message()))
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// Output root: the explicit value, else `$RECFG_OUT`, else `out`.
    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Validation(format!("{field}: {why}")));
        let finite = |field: &str, v: &[f64]| -> Result<()> {
            match v.iter().position(|x| !x.is_finite()) {
                Some(i) => bad(
                    &format!("{field}[{i}]"),
                    format!("must be finite, got {}", v[i]),
                ),
                None => Ok(()),
            }
        };

        self.world()
            .map_err(|e| Error::Validation(format!("world: {}", strip(e))))?;
        self.schedule
            .validate()
            .map_err(|e| Error::Validation(format!("schedule: {}", strip(e))))?;
        let g = &self.grid;
        if g.nfe == 0 {
            return bad("grid.nfe", "must be >= 1".into());
        }
        if !(g.t_min >= 0.0) || !g.t_min.is_finite() {
            return bad(
                "grid.t_min",
                format!("must be finite and >= 0, got {}", g.t_min),
            );
        }
        if !(g.horizon > g.t_min) || !g.horizon.is_finite() {
            return bad(
                "grid.horizon",
                format!("must be finite and > grid.t_min, got {}", g.horizon),
            );
        }
        let d = self.world.cond_var.len();

        let gd = &self.guidance;
        finite("guidance.gamma1", &gd.gamma1)?;
        if gd.gamma1.len() != 1 && gd.gamma1.len() != d {
            return bad(
                "guidance.gamma1",
                format!("expected 1 or {d} entries, got {}", gd.gamma1.len()),
            );
        }
        if let Some(g0) = &gd.gamma0 {
            finite("guidance.gamma0", g0)?;
            if g0.len() != 1 && g0.len() != d {
                return bad(
                    "guidance.gamma0",
                    format!("expected 1 or {d} entries, got {}", g0.len()),
                );
            }
        }
        finite("guidance.gammas", &gd.gammas)?;
        if gd.gammas.is_empty() {
            return bad("guidance.gammas", "must not be empty".into());
        }
        if gd.mode == GuidanceMode::Recfg && gd.clamp == ClampMode::Strict {
            if let Some(i) = gd.gamma1.iter().position(|g| *g < 1.0) {
                return bad(
                    &format!("guidance.gamma1[{i}]"),
                    "strict clamping needs gamma1 >= 1".into(),
                );
            }
        }

        self.oracle()
            .map_err(|e| Error::Validation(format!("oracle: {}", strip(e))))?;

        let t = &self.table;
        if t.n_per_condition < 2 {
            return bad(
                "table.n_per_condition",
                format!("must be >= 2, got {}", t.n_per_condition),
            );
        }
        if t.conditions.is_empty() {
            return bad("table.conditions", "must not be empty".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, c) in t.conditions.iter().enumerate() {
            if c.value.len() != d {
                return bad(
                    &format!("table.conditions[{i}].value"),
                    format!("expected {d} entries, got {}", c.value.len()),
                );
            }
            finite(&format!("table.conditions[{i}].value"), &c.value)?;
            if !ids.insert(c.to_condition().id) {
                return bad(
                    &format!("table.conditions[{i}]"),
                    "duplicate condition id".into(),
                );
            }
        }

        let s = &self.sampling;
        if s.batch == 0 {
            return bad("sampling.batch", "must be >= 1".into());
        }
        if s.condition.value.len() != d {
            return bad(
                "sampling.condition.value",
                format!("expected {d} entries, got {}", s.condition.value.len()),
            );
        }
        finite("sampling.condition.value", &s.condition.value)?;

        finite("shift.gammas", &self.shift.gammas)?;
        finite("shift.gamma0s", &self.shift.gamma0s)?;
        if let Some(h) = self.shift.horizons.iter().find(|h| !(**h > 0.0)) {
            return bad("shift.horizons", format!("entries must be > 0, got {h}"));
        }
        if self.drift.mc_samples < 2 {
            return bad(
                "drift.mc_samples",
                format!("must be >= 2, got {}", self.drift.mc_samples),
            );
        }
        if self.plot.points < 2 {
            return bad(
                "plot.points",
                format!("must be >= 2, got {}", self.plot.points),
            );
        }
        Ok(())
    }

    pub fn world(&self) -> Result<AnalyticWorld> {
        let w = &self.world;
        AnalyticWorld::new(
            w.cond_var.clone(),
            w.prior_mean.clone(),
            w.prior_var.clone(),
        )
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::build(&self.schedule, &self.grid)
    }

    pub fn oracle(&self) -> Result<AnyOracle> {
        let exact = ExactOracle::new(self.world()?, self.schedule);
        Ok(match self.oracle.kind {
            OracleKind::Exact => AnyOracle::Exact(exact),
            OracleKind::Perturbed => AnyOracle::Perturbed(PerturbedOracle::new(
                exact,
                self.oracle.mean_bias.clone(),
                self.oracle.scale.clone(),
            )?),
        })
    }

    pub fn table_conditions(&self) -> Vec<Condition> {
        self.table
            .conditions
            .iter()
            .map(ConditionConfig::to_condition)
            .collect()
    }

    pub fn sampling_condition(&self) -> Condition {
        self.sampling.condition.to_condition()
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            n_per_condition: self.table.n_per_condition,
            seed: self.seed,
            model_id: self.table.model_id.clone(),
        }
    }

    pub fn drift_options(&self) -> DriftOptions {
        DriftOptions {
            mc_samples: self.drift.mc_samples,
            seed: self.seed,
            force_monte_carlo: self.drift.force_monte_carlo,
            recursion: self.drift.recursion,
        }
    }
}

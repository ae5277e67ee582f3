//! Expectation-ratio lookup tables.
//!
//! A table stores, for every condition and every evaluation time of a fixed
//! grid, the per-dimension ratio `E[ε_c(x_t, c)] / E[ε_u(x_t)]` under the forward
//! marginal `q_t(x_t | c)`. The rectified weight is then `γ0 = (1 - γ1) * ratio`,
//! followed by the clamp. Conditions missing from the table fall back to `avg`,
//! the arithmetic mean of the stored tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CellId, Error, Result};
use crate::guidance::{clamp_coeffs, residual_into, ClampMode, GuidanceCoefficients};
use crate::output::{csv_error, fmt17, sanitize, write_csv};
use crate::rng::{derive_seed, NormalStream};
use crate::schedule::TimeGrid;
use crate::summation::NeumaierSum;
use crate::world::{AnalyticWorld, Condition, ScoreOracle};

pub const SCHEMA_VERSION: u32 = 1;

/// Cells with `|mean ε_u| < DENOMINATOR_FLOOR * rms(ε_u)` are degenerate.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Key under which the fallback tensor is addressed.
pub const AVG_ID: &str = "avg";

#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub schema_version: u32,
    pub model_id: String,
    pub grid: TimeGrid,
    pub dim: usize,
    /// Row-major `[nfe × dim]` ratio tensors keyed by condition id.
    pub conditions: BTreeMap<String, Vec<f64>>,
    pub avg: Vec<f64>,
    pub counts: BTreeMap<String, u64>,
    /// `None` for tables ingested from a prediction cache.
    pub build_seed: Option<u64>,
    /// Degenerate cells whose ratio was replaced by 1.
    pub flagged: Vec<CellId>,
}

fn mean_of(conditions: &BTreeMap<String, Vec<f64>>, len: usize) -> Vec<f64> {
    let k = conditions.len() as f64;
    (0..len)
        .map(|j| {
            conditions
                .values()
                .map(|v| v[j])
                .collect::<NeumaierSum>()
                .value()
                / k
        })
        .collect()
}

impl LookupTable {
    fn assemble(
        model_id: String,
        grid: TimeGrid,
        dim: usize,
        conditions: BTreeMap<String, Vec<f64>>,
        counts: BTreeMap<String, u64>,
        build_seed: Option<u64>,
        flagged: Vec<CellId>,
    ) -> Result<Self> {
        if conditions.is_empty() {
            return Err(Error::Validation(
                "a lookup table needs at least one condition".into(),
            ));
        }
        let avg = mean_of(&conditions, grid.nfe() * dim);
        let table = Self {
            schema_version: SCHEMA_VERSION,
            model_id,
            grid,
            dim,
            conditions,
            avg,
            counts,
            build_seed,
            flagged,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn nfe(&self) -> usize {
        self.grid.nfe()
    }

    /// Checks shapes, finiteness and that `avg` is the mean of the stored tensors.
    pub fn validate(&self) -> Result<()> {
        let len = self.nfe() * self.dim;
        if self.conditions.contains_key(AVG_ID) {
            return Err(Error::Validation(format!(
                "condition id `{AVG_ID}` is reserved"
            )));
        }
        for (id, v) in self
            .conditions
            .iter()
            .chain([(&AVG_ID.to_string(), &self.avg)])
        {
            if v.len() != len {
                return Err(Error::Validation(format!(
                    "table tensor `{id}` has {} entries, expected nfe × dim = {len}",
                    v.len()
                )));
            }
            if let Some(j) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "table tensor `{id}` has a non-finite entry at t_index {}, dim {}",
                    j / self.dim,
                    j % self.dim
                )));
            }
        }
        if mean_of(&self.conditions, len) != self.avg {
            return Err(Error::Validation(
                "table avg is not the mean of its condition tensors".into(),
            ));
        }
        Ok(())
    }

    fn row<'a>(&self, tensor: &'a [f64], t_index: usize) -> &'a [f64] {
        &tensor[t_index * self.dim..(t_index + 1) * self.dim]
    }

    /// Ratios of a stored condition at `t_index`.
    pub fn ratios(&self, cond_id: &str, t_index: usize) -> Option<&[f64]> {
        if t_index >= self.nfe() {
            return None;
        }
        self.conditions.get(cond_id).map(|v| self.row(v, t_index))
    }

    /// Ratios for `cond_id`, or the mean tensor when absent and `fallback` is set.
    pub fn lookup(&self, cond_id: &str, t_index: usize, fallback: bool) -> Result<&[f64]> {
        if t_index >= self.nfe() {
            return Err(Error::Lookup(format!(
                "t_index {t_index} outside a table with {} steps",
                self.nfe()
            )));
        }
        match self.conditions.get(cond_id) {
            Some(v) => Ok(self.row(v, t_index)),
            None if fallback || cond_id == AVG_ID => Ok(self.row(&self.avg, t_index)),
            None => Err(Error::Lookup(format!(
                "condition `{cond_id}` is not in the table and fallback is disabled"
            ))),
        }
    }

    /// `γ0 = (1 - γ1) ⊗ ratio`, projected by `clamp_mode`.
    pub fn gamma0_for(
        &self,
        gamma1: &[f64],
        cond_id: &str,
        t_index: usize,
        clamp_mode: ClampMode,
        fallback: bool,
    ) -> Result<Vec<f64>> {
        let ratio = self.lookup(cond_id, t_index, fallback)?;
        if gamma1.len() != 1 && gamma1.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: gamma1.len(),
            });
        }
        let g1 = |k: usize| {
            if gamma1.len() == 1 {
                gamma1[0]
            } else {
                gamma1[k]
            }
        };
        let raw: Vec<f64> = ratio
            .iter()
            .enumerate()
            .map(|(k, r)| (1.0 - g1(k)) * r)
            .collect();
        let gamma1_full: Vec<f64> = (0..self.dim).map(g1).collect();
        let clamped = clamp_coeffs(&GuidanceCoefficients::new(gamma1_full, raw, clamp_mode))?;
        Ok(clamped.gamma0)
    }

    /// Per-cell mean and sample standard deviation of the ratio across conditions.
    pub fn condition_spread(&self) -> (Vec<f64>, Vec<f64>) {
        let len = self.nfe() * self.dim;
        let k = self.conditions.len();
        let mean = self.avg.clone();
        let std = (0..len)
            .map(|j| {
                if k < 2 {
                    return 0.0;
                }
                let ss: NeumaierSum = self
                    .conditions
                    .values()
                    .map(|v| (v[j] - mean[j]).powi(2))
                    .collect();
                (ss.value() / (k - 1) as f64).sqrt()
            })
            .collect();
        (mean, std)
    }

    /// Largest absolute ratio over all cells of all stored conditions.
    pub fn max_abs_ratio(&self) -> f64 {
        self.conditions
            .values()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Settings of [`build_from_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub n_per_condition: usize,
    pub seed: u64,
    pub model_id: String,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            n_per_condition: 100_000,
            seed: 0,
            model_id: "analytic".into(),
        }
    }
}

/// Sampling diagnostics of a build, `[nfe × dim]` per condition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildStats {
    pub mean_cond: BTreeMap<String, Vec<f64>>,
    pub mean_uncond: BTreeMap<String, Vec<f64>>,
    /// Delta-method standard error of each ratio.
    pub ratio_se: BTreeMap<String, Vec<f64>>,
}

/// Rows per chunk; part of the reduction order, so fixed.
const CHUNK_ROWS: usize = 1024;

struct CellSums {
    cond: NeumaierSum,
    uncond: NeumaierSum,
    cond_sq: NeumaierSum,
    uncond_sq: NeumaierSum,
    cross: NeumaierSum,
}

struct CellOutcome {
    ratio: f64,
    mean_cond: f64,
    mean_uncond: f64,
    se: f64,
    degenerate: bool,
}

impl CellSums {
    fn new() -> Self {
        Self {
            cond: NeumaierSum::new(),
            uncond: NeumaierSum::new(),
            cond_sq: NeumaierSum::new(),
            uncond_sq: NeumaierSum::new(),
            cross: NeumaierSum::new(),
        }
    }

    /// Plain sums over one chunk, folded into the compensated totals.
    fn add_chunk<'a>(
        &mut self,
        ec: impl Iterator<Item = &'a f64>,
        eu: impl Iterator<Item = &'a f64>,
    ) {
        let mut p = [0.0f64; 5];
        for (&c, &u) in ec.zip(eu) {
            p[0] += c;
            p[1] += u;
            p[2] += c * c;
            p[3] += u * u;
            p[4] += c * u;
        }
        self.cond.add(p[0]);
        self.uncond.add(p[1]);
        self.cond_sq.add(p[2]);
        self.uncond_sq.add(p[3]);
        self.cross.add(p[4]);
    }

    fn finish(&self, n: usize) -> CellOutcome {
        let nf = n as f64;
        let mc = self.cond.value() / nf;
        let mu = self.uncond.value() / nf;
        let rms_u = (self.uncond_sq.value() / nf).sqrt();
        let var_c = (self.cond_sq.value() - nf * mc * mc) / (nf - 1.0);
        let var_u = (self.uncond_sq.value() - nf * mu * mu) / (nf - 1.0);
        let cov = (self.cross.value() - nf * mc * mu) / (nf - 1.0);
        if !(mu.abs() >= DENOMINATOR_FLOOR * rms_u) || mu == 0.0 {
            return CellOutcome {
                ratio: 1.0,
                mean_cond: mc,
                mean_uncond: mu,
                se: f64::NAN,
                degenerate: true,
            };
        }
        let r = mc / mu;
        let var_r = (var_c - 2.0 * r * cov + r * r * var_u).max(0.0) / (nf * mu * mu);
        CellOutcome {
            ratio: r,
            mean_cond: mc,
            mean_uncond: mu,
            se: var_r.sqrt(),
            degenerate: false,
        }
    }
}

/// Builds a table by Monte Carlo over the forward marginals of `world`.
///
/// Condition `k` of `conditions` draws its `x_0` batch from stream 0 of
/// `derive_seed(seed, k)`, and the noise at step `i` from stream `i + 1`. The same
/// `x_0` batch is reused for every step with fresh noise. Steps are processed in
/// parallel but each is reduced sequentially, so the result does not depend on
/// the number of workers.
pub fn build_from_oracle<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    grid: &TimeGrid,
    conditions: &[Condition],
    opts: &BuildOptions,
) -> Result<(LookupTable, BuildStats)> {
    let d = oracle.dim();
    Error::check_dim(d, world.dim())?;
    let n = opts.n_per_condition;
    if n < 2 {
        return Err(Error::Validation(format!(
            "table.n_per_condition must be >= 2, got {n}"
        )));
    }
    if conditions.is_empty() {
        return Err(Error::Validation(
            "table.conditions must not be empty".into(),
        ));
    }
    let sched = oracle.schedule();
    let mut coeffs = Vec::with_capacity(grid.nfe());
    for &t in grid.eval_times() {
        let (alpha, sigma) = sched.eval(t)?;
        if !(sigma > 0.0) {
            return Err(Error::SingularSigma { t });
        }
        coeffs.push((t, alpha, sigma));
    }

    let mut ratios = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut flagged = Vec::new();
    let mut stats = BuildStats::default();
    for (k, cond) in conditions.iter().enumerate() {
        Error::check_dim(d, cond.value.len())?;
        if ratios.contains_key(&cond.id) {
            return Err(Error::Validation(format!(
                "duplicate condition id `{}`",
                cond.id
            )));
        }
        let seed_c = derive_seed(opts.seed, k as u64);
        let mut x0 = vec![0.0; n * d];
        let mut stream = NormalStream::new(seed_c, 0);
        for row in x0.chunks_exact_mut(d) {
            world.draw_conditional_into(&cond.value, &mut stream, row);
        }
        let per_step: Vec<Vec<CellOutcome>> = coeffs
            .par_iter()
            .enumerate()
            .map(|(i, &(t, alpha, sigma))| {
                let mut noise = NormalStream::new(seed_c, i as u64 + 1);
                let mut sums: Vec<CellSums> = (0..d).map(|_| CellSums::new()).collect();
                let len = CHUNK_ROWS.min(n) * d;
                let (mut x, mut ec, mut eu) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                for rows in x0.chunks(CHUNK_ROWS * d) {
                    let m = rows.len();
                    for (xv, r) in x[..m].iter_mut().zip(rows) {
                        *xv = alpha * r + sigma * noise.next();
                    }
                    oracle.eps_cond_batch(&x[..m], &cond.value, t, &mut ec[..m])?;
                    oracle.eps_uncond_batch(&x[..m], t, &mut eu[..m])?;
                    for (q, cell) in sums.iter_mut().enumerate() {
                        cell.add_chunk(ec[q..m].iter().step_by(d), eu[q..m].iter().step_by(d));
                    }
                }
                Ok(sums.iter().map(|s| s.finish(n)).collect())
            })
            .collect::<Result<_>>()?;

        let len = grid.nfe() * d;
        let (mut r, mut mc, mut mu, mut se) = (
            Vec::with_capacity(len),
            Vec::with_capacity(len),
            Vec::with_capacity(len),
            Vec::with_capacity(len),
        );
        for (i, cells) in per_step.iter().enumerate() {
            for (q, cell) in cells.iter().enumerate() {
                if cell.degenerate {
                    log::warn!(
                        "degenerate denominator in cell ({}, t_index={i}, dim={q}); ratio set to 1",
                        cond.id
                    );
                    flagged.push(CellId {
                        cond_id: cond.id.clone(),
                        t_index: i,
                        dim: q,
                    });
                }
                r.push(cell.ratio);
                mc.push(cell.mean_cond);
                mu.push(cell.mean_uncond);
                se.push(cell.se);
            }
        }
        ratios.insert(cond.id.clone(), r);
        counts.insert(cond.id.clone(), n as u64);
        stats.mean_cond.insert(cond.id.clone(), mc);
        stats.mean_uncond.insert(cond.id.clone(), mu);
        stats.ratio_se.insert(cond.id.clone(), se);
    }
    let table = LookupTable::assemble(
        opts.model_id.clone(),
        grid.clone(),
        d,
        ratios,
        counts,
        Some(opts.seed),
        flagged,
    )?;
    Ok((table, stats))
}

/// One line of a prediction cache: partial sums of both branches over `count`
/// samples of `x_t ~ q_t(x_t | c)` for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCacheRecord {
    pub cond_id: String,
    pub t_index: usize,
    pub dim: usize,
    pub sum_cond: f64,
    pub sum_uncond: f64,
    pub count: u64,
}

pub const CACHE_HEADER: [&str; 6] = [
    "cond_id",
    "t_index",
    "dim",
    "sum_cond",
    "sum_uncond",
    "count",
];

/// Builds a table from externally computed sums. Duplicate cells are merged by
/// summation; every `(condition, t_index, dim)` cell must be present. A cell is
/// degenerate when its unconditional mean is zero or below
/// `DENOMINATOR_FLOOR` times the conditional mean in magnitude, since the cache
/// carries no second moments.
pub fn ingest_cache<I>(
    records: I,
    grid: &TimeGrid,
    dim: usize,
    model_id: &str,
) -> Result<LookupTable>
where
    I: IntoIterator<Item = PredictionCacheRecord>,
{
    let nfe = grid.nfe();
    let mut cells: BTreeMap<(String, usize, usize), (NeumaierSum, NeumaierSum, u64)> =
        BTreeMap::new();
    for (line, rec) in records.into_iter().enumerate() {
        let at = || format!("cache record {}", line + 1);
        if rec.count == 0 {
            return Err(Error::Validation(format!("{}: count must be >= 1", at())));
        }
        if !rec.sum_cond.is_finite() || !rec.sum_uncond.is_finite() {
            return Err(Error::Validation(format!("{}: sums must be finite", at())));
        }
        if rec.t_index >= nfe {
            return Err(Error::Validation(format!(
                "{}: t_index {} outside the grid's {nfe} steps",
                at(),
                rec.t_index
            )));
        }
        if rec.dim >= dim {
            return Err(Error::Validation(format!(
                "{}: dim {} outside 0..{dim}",
                at(),
                rec.dim
            )));
        }
        if rec.cond_id == AVG_ID || rec.cond_id.is_empty() {
            return Err(Error::Validation(format!(
                "{}: invalid cond_id `{}`",
                at(),
                rec.cond_id
            )));
        }
        let cell = cells
            .entry((rec.cond_id, rec.t_index, rec.dim))
            .or_insert_with(|| (NeumaierSum::new(), NeumaierSum::new(), 0));
        cell.0.add(rec.sum_cond);
        cell.1.add(rec.sum_uncond);
        cell.2 += rec.count;
    }
    let ids: Vec<String> = {
        let mut v: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
        v.dedup();
        v
    };
    if ids.is_empty() {
        return Err(Error::Validation("prediction cache is empty".into()));
    }
    let mut gaps = Vec::new();
    let mut ratios = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut flagged = Vec::new();
    for id in &ids {
        let mut r = Vec::with_capacity(nfe * dim);
        let mut min_count = u64::MAX;
        for t_index in 0..nfe {
            for q in 0..dim {
                match cells.get(&(id.clone(), t_index, q)) {
                    None => {
                        gaps.push(CellId {
                            cond_id: id.clone(),
                            t_index,
                            dim: q,
                        });
                        r.push(f64::NAN);
                    }
                    Some((sc, su, count)) => {
                        min_count = min_count.min(*count);
                        let n = *count as f64;
                        let (mc, mu) = (sc.value() / n, su.value() / n);
                        if mu == 0.0 || mu.abs() < DENOMINATOR_FLOOR * mc.abs() {
                            log::warn!("degenerate denominator in cell ({id}, t_index={t_index}, dim={q}); ratio set to 1");
                            flagged.push(CellId {
                                cond_id: id.clone(),
                                t_index,
                                dim: q,
                            });
                            r.push(1.0);
                        } else {
                            r.push(mc / mu);
                        }
                    }
                }
            }
        }
        ratios.insert(id.clone(), r);
        counts.insert(id.clone(), min_count);
    }
    if !gaps.is_empty() {
        return Err(Error::IncompleteTable { gaps });
    }
    LookupTable::assemble(
        model_id.to_string(),
        grid.clone(),
        dim,
        ratios,
        counts,
        None,
        flagged,
    )
}

/// Reads a prediction cache CSV with header `cond_id,t_index,dim,sum_cond,sum_uncond,count`.
pub fn read_cache_csv(path: &Path) -> Result<Vec<PredictionCacheRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != CACHE_HEADER {
        return Err(Error::Validation(format!(
            "{}: expected header `{}`",
            path.display(),
            CACHE_HEADER.join(",")
        )));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Validation(format!("{} record {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_cache_csv(path: &Path, records: &[PredictionCacheRecord]) -> Result<()> {
    write_csv(
        path,
        &CACHE_HEADER,
        records.iter().map(|r| {
            vec![
                r.cond_id.clone(),
                r.t_index.to_string(),
                r.dim.to_string(),
                fmt17(r.sum_cond),
                fmt17(r.sum_uncond),
                r.count.to_string(),
            ]
        }),
    )
}

/// On-disk layout. Tensors are base64 of little-endian `f64`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    schema_version: u32,
    model_id: String,
    dim: usize,
    nfe: usize,
    times: Vec<f64>,
    build_seed: Option<u64>,
    counts: BTreeMap<String, u64>,
    flagged: Vec<CellId>,
    avg: String,
    conditions: BTreeMap<String, String>,
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(field: &str, s: &str, len: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| {
        Error::Validation(format!("table tensor `{field}` is not valid base64: {e}"))
    })?;
    if bytes.len() != len * 8 {
        return Err(Error::Validation(format!(
            "table tensor `{field}` holds {} bytes, expected {}",
            bytes.len(),
            len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serialized JSON text of `table`.
pub fn table_to_json(table: &LookupTable) -> Result<String> {
    let file = TableFile {
        schema_version: table.schema_version,
        model_id: table.model_id.clone(),
        dim: table.dim,
        nfe: table.nfe(),
        times: table.grid.times().to_vec(),
        build_seed: table.build_seed,
        counts: table.counts.clone(),
        flagged: table.flagged.clone(),
        avg: encode(&table.avg),
        conditions: table
            .conditions
            .iter()
            .map(|(k, v)| (k.clone(), encode(v)))
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Validation(format!("cannot serialize table: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn save_table(table: &LookupTable, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, table_to_json(table)?).map_err(|e| Error::io(path, e))
}

/// Byte offset of 1-based `(line, column)` in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn table_from_json(text: &str) -> Result<LookupTable> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    };
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
    let version = match value.get("schema_version") {
        None => return Err(Error::Validation("table file has no schema_version".into())),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    if version.trim() != SCHEMA_VERSION.to_string() {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    value["schema_version"] = serde_json::Value::from(SCHEMA_VERSION);
    let file: TableFile = serde_json::from_value(value)
        .map_err(|e| Error::Validation(format!("malformed table file: {e}")))?;
    let grid = TimeGrid::from_times(file.times)?;
    if grid.nfe() != file.nfe {
        return Err(Error::Validation(format!(
            "table nfe {} disagrees with its {} grid times",
            file.nfe,
            grid.nfe() + 1
        )));
    }
    let len = file.nfe * file.dim;
    let conditions = file
        .conditions
        .iter()
        .map(|(k, v)| Ok((k.clone(), decode(k, v, len)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let table = LookupTable {
        schema_version: file.schema_version,
        model_id: file.model_id,
        grid,
        dim: file.dim,
        conditions,
        avg: decode(AVG_ID, &file.avg, len)?,
        counts: file.counts,
        build_seed: file.build_seed,
        flagged: file.flagged,
    };
    table.validate()?;
    Ok(table)
}

pub fn load_table(path: &Path) -> Result<LookupTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    table_from_json(&text)
}

/// Writes `heatmap_avg.csv` and one `heatmap_<id>.csv` per condition into `dir`,
/// each with columns `t_index,dim,ratio`.
pub fn write_heatmaps(table: &LookupTable, dir: &Path) -> Result<()> {
    let one = |name: String, tensor: &[f64]| {
        write_csv(
            &dir.join(name),
            &["t_index", "dim", "ratio"],
            tensor.iter().enumerate().map(|(j, r)| {
                vec![
                    (j / table.dim).to_string(),
                    (j % table.dim).to_string(),
                    fmt17(*r),
                ]
            }),
        )
    };
    one("heatmap_avg.csv".into(), &table.avg)?;
    for (id, v) in &table.conditions {
        one(format!("heatmap_{}.csv", sanitize(id)), v)?;
    }
    Ok(())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// `E‖(γ1 - 1) ε_c + γ0 ε_u‖²` over steps and the forward marginal.
///
/// Sample `j` uses step `j mod nfe` and stream `j` of `seed`, so two coefficient
/// schedules evaluated with the same seed see identical `(t, x_t)` draws.
pub fn objective_l<O: ScoreOracle>(
    oracle: &O,
    world: &AnalyticWorld,
    coeffs: &[GuidanceCoefficients],
    grid: &TimeGrid,
    cond: &Condition,
    mc_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    if mc_samples < 2 {
        return Err(Error::Validation(format!(
            "mc_samples must be >= 2, got {mc_samples}"
        )));
    }
    let d = oracle.dim();
    Error::check_dim(d, cond.value.len())?;
    Error::check_dim(grid.nfe(), coeffs.len())?;
    let sched = oracle.schedule();
    let mut sum = NeumaierSum::new();
    let mut sum_sq = NeumaierSum::new();
    let (mut x0, mut x, mut ec, mut eu, mut r) = (
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
        vec![0.0; d],
    );
    for j in 0..mc_samples {
        let i = j % grid.nfe();
        let t = grid.times()[i];
        let (alpha, sigma) = sched.eval(t)?;
        let mut stream = NormalStream::new(seed, j as u64);
        world.draw_conditional_into(&cond.value, &mut stream, &mut x0);
        for k in 0..d {
            x[k] = alpha * x0[k] + sigma * stream.next();
        }
        oracle.eps_cond_into(&x, &cond.value, t, &mut ec)?;
        oracle.eps_uncond_into(&x, t, &mut eu)?;
        residual_into(&ec, &eu, &coeffs[i], &mut r)?;
        let v: f64 = r.iter().map(|e| e * e).sum();
        sum.add(v);
        sum_sq.add(v * v);
    }
    let n = mc_samples as f64;
    let mean = sum.value() / n;
    let var = ((sum_sq.value() - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Estimate {
        value: mean,
        se: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use crate::world::{ExactOracle, PerturbedOracle};

    fn toy() -> ExactOracle {
        ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding)
    }

    fn rec(id: &str, t: usize, d: usize, sc: f64, su: f64, n: u64) -> PredictionCacheRecord {
        PredictionCacheRecord {
            cond_id: id.into(),
            t_index: t,
            dim: d,
            sum_cond: sc,
            sum_uncond: su,
            count: n,
        }
    }

    fn one_step() -> TimeGrid {
        TimeGrid::from_times(vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn ingest_single_and_duplicate_records() {
        let t = ingest_cache([rec("1", 0, 0, 2.0, 4.0, 10)], &one_step(), 1, "m").unwrap();
        assert_eq!(t.ratios("1", 0).unwrap(), &[0.5]);
        let t = ingest_cache(
            [rec("1", 0, 0, 1.0, 2.0, 5), rec("1", 0, 0, 1.0, 2.0, 5)],
            &one_step(),
            1,
            "m",
        )
        .unwrap();
        assert_eq!(t.ratios("1", 0).unwrap(), &[0.5]);
        assert_eq!(t.counts["1"], 10);
    }

    #[test]
    fn ingest_rejects_zero_count_and_gaps() {
        assert!(matches!(
            ingest_cache([rec("1", 0, 0, 1.0, 1.0, 0)], &one_step(), 1, "m"),
            Err(Error::Validation(_))
        ));
        let grid = TimeGrid::from_times(vec![2.0, 1.0, 0.0]).unwrap();
        match ingest_cache([rec("1", 0, 0, 1.0, 1.0, 3)], &grid, 1, "m") {
            Err(Error::IncompleteTable { gaps }) => {
                assert_eq!(
                    gaps,
                    vec![CellId {
                        cond_id: "1".into(),
                        t_index: 1,
                        dim: 0
                    }]
                );
            }
            other => panic!("expected incomplete table, got {other:?}"),
        }
    }

    #[test]
    fn ingest_flags_zero_denominator() {
        let t = ingest_cache([rec("a", 0, 0, 1.0, 0.0, 3)], &one_step(), 1, "m").unwrap();
        assert_eq!(t.ratios("a", 0).unwrap(), &[1.0]);
        assert_eq!(t.flagged.len(), 1);
    }

    #[test]
    fn gamma0_resolution_and_clamp() {
        let t = ingest_cache(
            [
                rec("pos", 0, 0, 0.3, 1.0, 1),
                rec("neg", 0, 0, -0.3, 1.0, 1),
            ],
            &one_step(),
            1,
            "m",
        )
        .unwrap();
        let g = t
            .gamma0_for(&[2.0], "pos", 0, ClampMode::Strict, true)
            .unwrap();
        assert!((g[0] + 0.3).abs() < 1e-15);
        let g = t
            .gamma0_for(&[2.0], "neg", 0, ClampMode::Strict, true)
            .unwrap();
        assert_eq!(g, vec![0.0]);
        // avg of 0.3 and -0.3
        let g = t
            .gamma0_for(&[2.0], "other", 0, ClampMode::Off, true)
            .unwrap();
        assert_eq!(g, vec![0.0]);
        assert!(matches!(
            t.gamma0_for(&[2.0], "other", 0, ClampMode::Strict, false),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(t.lookup("pos", 1, true), Err(Error::Lookup(_))));
    }

    #[test]
    fn exact_toy_ratios_are_near_zero() {
        let o = toy();
        let grid = TimeGrid::uniform_time(9.0, 4, 1e-2).unwrap();
        let (t, stats) = build_from_oracle(
            &o,
            o.world(),
            &grid,
            &[Condition::scalar(1.0)],
            &BuildOptions {
                n_per_condition: 20_000,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let r = &t.conditions["1"];
        let se = &stats.ratio_se["1"];
        for (x, s) in r.iter().zip(se) {
            assert!(x.abs() < 4.0 * s, "{x} vs se {s}");
        }
        assert!(t.flagged.is_empty());
    }

    #[test]
    fn perturbed_oracle_ratio() {
        let o = PerturbedOracle::new(toy(), vec![0.1], vec![1.0]).unwrap();
        let grid = TimeGrid::from_times(vec![1.0, 0.0]).unwrap();
        let (t, stats) = build_from_oracle(
            &o,
            o.exact().world(),
            &grid,
            &[Condition::scalar(1.0)],
            &BuildOptions {
                n_per_condition: 200_000,
                seed: 3,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let (r, se) = (t.conditions["1"][0], stats.ratio_se["1"][0]);
        assert!((r - 0.3).abs() < 3.0 * se, "{r} ± {se}");
    }

    #[test]
    fn json_round_trip_and_errors() {
        let t = ingest_cache(
            [rec("a", 0, 0, 0.3, 1.0, 2), rec("a", 0, 1, 0.1, 3.0, 2)],
            &one_step(),
            2,
            "m",
        )
        .unwrap();
        let s = table_to_json(&t).unwrap();
        assert_eq!(table_from_json(&s).unwrap(), t);
        match table_from_json(&s[..s.len() / 2]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset <= s.len() / 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let old = s.replacen("\"schema_version\": 1", "\"schema_version\": \"0\"", 1);
        assert!(matches!(
            table_from_json(&old),
            Err(Error::SchemaVersion { .. })
        ));
    }

    #[test]
    fn byte_offsets() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("ab", 1, 1), 0);
    }

    #[test]
    fn objective_special_cases() {
        let o = toy();
        let grid = TimeGrid::uniform_time(9.0, 4, 1e-2).unwrap();
        let cond = Condition::scalar(1.0);
        let none = vec![GuidanceCoefficients::unguided(); 4];
        assert_eq!(
            objective_l(&o, o.world(), &none, &grid, &cond, 100, 1)
                .unwrap()
                .value,
            0.0
        );
        let cfg = vec![GuidanceCoefficients::cfg(2.0); 4];
        let l_cfg = objective_l(&o, o.world(), &cfg, &grid, &cond, 1000, 1).unwrap();
        assert!(l_cfg.value > 0.0);
        let re = vec![GuidanceCoefficients::new(vec![2.0], vec![0.0], ClampMode::Strict); 4];
        let l_re = objective_l(&o, o.world(), &re, &grid, &cond, 4000, 1).unwrap();
        let l_cfg = objective_l(&o, o.world(), &cfg, &grid, &cond, 4000, 1).unwrap();
        // closed forms at c = 1: E[ε_c²] = t/(1+t), E[(ε_c - ε_u)²] = t/((1+t)(2+t))
        let ts = grid.eval_times();
        let want_re = ts.iter().map(|t| t / (1.0 + t)).sum::<f64>() / 4.0;
        let want_cfg = ts.iter().map(|t| t / ((1.0 + t) * (2.0 + t))).sum::<f64>() / 4.0;
        assert!((l_re.value - want_re).abs() < 4.0 * l_re.se);
        assert!((l_cfg.value - want_cfg).abs() < 4.0 * l_cfg.se);
    }
}

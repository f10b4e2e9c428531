//! Per-bucket batch-size search against a pluggable training-step probe.
//!
//! The search starts from an initial guess, doubles after every successful
//! step and halves after every out-of-memory step until it holds one valid
//! and one invalid size, then bisects between them. It stops once the valid
//! size is within `tolerance` of the invalid one, measured relative to the
//! invalid size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bucketing::BucketTree;
use crate::datastream::Modality;
use crate::error::{Error, Result};

pub const BATCH_PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Success,
    Oom,
}

/// Runs one full training step (forward, backward, update) on a batch of
/// `batch_size` random examples of the given lengths.
///
/// Implementations must be monotone in `batch_size`: if a size runs out of
/// memory, every larger size does too.
pub trait StepRunner {
    fn run(&self, batch_size: u64, input_length: f64, output_length: u64) -> StepOutcome;

    /// Whether `run` may be called from several threads at once. A pure
    /// memory model is; a real accelerator probe is not.
    fn is_reentrant(&self) -> bool {
        false
    }
}

/// Memory stand-in for a transformer training step:
///
/// `mem(b, Lin, Lout) = c0 + b * (c1*Lin + c2*Lout + c3*Lin^2 + c4*Lout^2 + c5*Lin*Lout)`
///
/// A step runs out of memory iff `mem > capacity_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMemoryModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub capacity_bytes: f64,
}

impl SyntheticMemoryModel {
    pub fn validate(&self) -> Result<()> {
        let cs = [self.c0, self.c1, self.c2, self.c3, self.c4, self.c5];
        if cs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::config(
                "memory model coefficients must be finite and nonnegative",
            ));
        }
        if !(self.capacity_bytes.is_finite() && self.capacity_bytes > 0.0) {
            return Err(Error::config("memory model capacity must be positive"));
        }
        Ok(())
    }

    pub fn memory(&self, batch_size: u64, input_length: f64, output_length: u64) -> f64 {
        let (li, lo) = (input_length, output_length as f64);
        let per_example = self.c1 * li + self.c2 * lo + self.c3 * li * li + self.c4 * lo * lo + self.c5 * li * lo;
        self.c0 + batch_size as f64 * per_example
    }
}

impl StepRunner for SyntheticMemoryModel {
    fn run(&self, batch_size: u64, input_length: f64, output_length: u64) -> StepOutcome {
        if self.memory(batch_size, input_length, output_length) > self.capacity_bytes {
            StepOutcome::Oom
        } else {
            StepOutcome::Success
        }
    }

    fn is_reentrant(&self) -> bool {
        true
    }
}

impl<R: StepRunner + ?Sized> StepRunner for &R {
    fn run(&self, batch_size: u64, input_length: f64, output_length: u64) -> StepOutcome {
        (**self).run(batch_size, input_length, output_length)
    }

    fn is_reentrant(&self) -> bool {
        (**self).is_reentrant()
    }
}

/// One memory model per modality, as read by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModelSet {
    #[serde(default = "profile_version")]
    pub version: u32,
    pub models: BTreeMap<Modality, SyntheticMemoryModel>,
}

fn profile_version() -> u32 {
    BATCH_PROFILE_VERSION
}

impl MemoryModelSet {
    pub fn from_json(s: &str) -> Result<Self> {
        let set: MemoryModelSet = serde_json::from_str(s)?;
        if set.models.is_empty() {
            return Err(Error::config("memory model config declares no models"));
        }
        for m in set.models.values() {
            m.validate()?;
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub initial_batch_size: u64,
    /// Stop when `(invalid - valid) / invalid <= tolerance`.
    pub tolerance: f64,
    /// Returned as-is when no size up to it runs out of memory.
    pub max_batch_size_cap: u64,
    /// Search cells from longest to shortest, starting each from the
    /// neighbouring solved cell's result. Fewer probes, but the entries found
    /// may differ within tolerance from an unseeded run.
    #[serde(default)]
    pub seed_from_neighbors: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            initial_batch_size: 32,
            tolerance: 0.05,
            max_batch_size_cap: 65_536,
            seed_from_neighbors: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_batch_size == 0 {
            return Err(Error::config("initial_batch_size must be at least 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::config(format!(
                "tolerance must be in (0, 1), got {}",
                self.tolerance
            )));
        }
        if self.max_batch_size_cap == 0 {
            return Err(Error::config("max_batch_size_cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub batch_size: u64,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Probing(u64),
    Found(u64),
    /// Batch size 1 ran out of memory.
    Unsatisfiable,
}

/// The search as a state machine: ask [`BatchSearch::status`] for the next
/// size, run it, report back with [`BatchSearch::observe`]. Useful when the
/// probe lives outside this process.
#[derive(Debug, Clone)]
pub struct BatchSearch {
    config: SearchConfig,
    best_valid: Option<u64>,
    min_invalid: Option<u64>,
    status: SearchStatus,
    probes: Vec<Probe>,
}

impl BatchSearch {
    pub fn new(config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let start = config.initial_batch_size.min(config.max_batch_size_cap);
        Ok(Self {
            config,
            best_valid: None,
            min_invalid: None,
            status: SearchStatus::Probing(start),
            probes: Vec::new(),
        })
    }

    pub fn status(&self) -> SearchStatus {
        self.status
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn invalid_bound(&self) -> Option<u64> {
        self.min_invalid
    }

    /// Records the outcome of running `batch_size`. Fails if the outcome
    /// contradicts an earlier one under the monotonicity contract.
    pub fn observe(&mut self, batch_size: u64, outcome: StepOutcome) -> Result<()> {
        match outcome {
            StepOutcome::Success => {
                if let Some(inv) = self.min_invalid.filter(|inv| batch_size >= *inv) {
                    return Err(Error::ContractViolation(format!(
                        "batch size {batch_size} succeeded after {inv} ran out of memory"
                    )));
                }
                self.best_valid = Some(self.best_valid.map_or(batch_size, |v| v.max(batch_size)));
            }
            StepOutcome::Oom => {
                if let Some(v) = self.best_valid.filter(|v| batch_size <= *v) {
                    return Err(Error::ContractViolation(format!(
                        "batch size {batch_size} ran out of memory after {v} succeeded"
                    )));
                }
                self.min_invalid = Some(self.min_invalid.map_or(batch_size, |i| i.min(batch_size)));
            }
        }
        self.probes.push(Probe { batch_size, outcome });
        self.status = self.advance();
        Ok(())
    }

    fn advance(&self) -> SearchStatus {
        let cap = self.config.max_batch_size_cap;
        match (self.best_valid, self.min_invalid) {
            (None, None) => SearchStatus::Probing(self.config.initial_batch_size.min(cap)),
            (None, Some(inv)) => {
                if inv <= 1 {
                    SearchStatus::Unsatisfiable
                } else {
                    SearchStatus::Probing(inv / 2)
                }
            }
            (Some(valid), None) => {
                if valid >= cap {
                    SearchStatus::Found(valid)
                } else {
                    SearchStatus::Probing(valid.saturating_mul(2).min(cap))
                }
            }
            (Some(valid), Some(inv)) => {
                let gap = inv - valid;
                if gap <= 1 || gap as f64 / inv as f64 <= self.config.tolerance {
                    SearchStatus::Found(valid)
                } else {
                    SearchStatus::Probing(valid + gap / 2)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub batch_size: u64,
    /// Smallest size observed to run out of memory, if any.
    pub invalid_bound: Option<u64>,
    pub probes: Vec<Probe>,
}

pub fn search_batch_size<R: StepRunner + ?Sized>(
    runner: &R,
    input_length: f64,
    output_length: u64,
    config: &SearchConfig,
) -> Result<SearchResult> {
    let mut search = BatchSearch::new(*config)?;
    loop {
        match search.status() {
            SearchStatus::Probing(b) => {
                let outcome = runner.run(b, input_length, output_length);
                search.observe(b, outcome)?;
            }
            SearchStatus::Found(b) => {
                return Ok(SearchResult {
                    batch_size: b,
                    invalid_bound: search.invalid_bound(),
                    probes: search.probes,
                });
            }
            SearchStatus::Unsatisfiable => {
                return Err(Error::Unsatisfiable {
                    input_length,
                    output_length,
                });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMethod {
    Search,
    BaselineHeuristic,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLog {
    pub input_length: f64,
    pub output_length: u64,
    pub probes: Vec<Probe>,
}

/// Maximum batch size per (bucket, sub-bucket).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProfile {
    pub method: ProfileMethod,
    pub grid: Vec<Vec<u64>>,
    /// Probe lengths and search log per cell; empty for non-search profiles.
    #[serde(default)]
    pub cells: Vec<Vec<CellLog>>,
}

#[derive(Serialize, Deserialize)]
struct BatchProfileDoc {
    version: u32,
    #[serde(flatten)]
    profile: BatchProfile,
}

impl BatchProfile {
    pub fn from_grid(grid: Vec<Vec<u64>>) -> Result<Self> {
        let p = Self {
            method: ProfileMethod::Manual,
            grid,
            cells: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Same batch size for every cell of a `num_buckets x num_subbuckets` grid.
    pub fn uniform(num_buckets: usize, num_subbuckets: usize, batch_size: u64) -> Result<Self> {
        Self::from_grid(vec![vec![batch_size; num_subbuckets]; num_buckets])
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.grid.first().map_or(0, Vec::len);
        if width == 0 || self.grid.iter().any(|r| r.len() != width) {
            return Err(Error::config("batch profile grid must be a non-empty rectangle"));
        }
        if let Some((i, j)) = self.find_cell(|b| b == 0) {
            return Err(Error::config(format!("batch profile cell ({i}, {j}) is zero")));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.len(), self.grid.first().map_or(0, Vec::len))
    }

    pub fn find_cell(&self, pred: impl Fn(u64) -> bool) -> Option<(usize, usize)> {
        self.grid
            .iter()
            .enumerate()
            .find_map(|(i, row)| row.iter().position(|b| pred(*b)).map(|j| (i, j)))
    }

    pub fn mean_batch_size(&self) -> f64 {
        let n: usize = self.grid.iter().map(Vec::len).sum();
        self.grid.iter().flatten().map(|b| *b as f64).sum::<f64>() / n as f64
    }

    /// Repeats a single-column (1D) profile across `num_subbuckets` columns so
    /// it can be compared cell by cell with a 2D profile.
    pub fn expand_subbuckets(&self, num_subbuckets: usize) -> Result<Self> {
        if self.shape().1 != 1 {
            return Err(Error::config("only a one-column profile can be expanded"));
        }
        Ok(Self {
            method: self.method,
            grid: self.grid.iter().map(|r| vec![r[0]; num_subbuckets]).collect(),
            cells: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BatchProfileDoc {
            version: BATCH_PROFILE_VERSION,
            profile: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BatchProfileDoc = serde_json::from_str(s)?;
        if doc.version != BATCH_PROFILE_VERSION {
            return Err(Error::config(format!(
                "unsupported batch profile version {}",
                doc.version
            )));
        }
        doc.profile.validate()?;
        Ok(doc.profile)
    }
}

fn search_cell<R: StepRunner + ?Sized>(
    runner: &R,
    tree: &BucketTree,
    (i, j): (usize, usize),
    config: &SearchConfig,
) -> Result<(u64, CellLog)> {
    let (lin, lout) = (tree.input_edges[i], tree.output_edges[i][j]);
    let res = search_batch_size(runner, lin, lout, config).map_err(|e| Error::UnsatisfiableCell {
        bucket: i,
        subbucket: j,
        source: Box::new(e),
    })?;
    Ok((
        res.batch_size,
        CellLog {
            input_length: lin,
            output_length: lout,
            probes: res.probes,
        },
    ))
}

fn assemble(nb: usize, ns: usize, results: Vec<((usize, usize), (u64, CellLog))>) -> BatchProfile {
    let mut grid = vec![vec![0; ns]; nb];
    let mut cells: Vec<Vec<Option<CellLog>>> = (0..nb).map(|_| (0..ns).map(|_| None).collect()).collect();
    for ((i, j), (b, log)) in results {
        grid[i][j] = b;
        cells[i][j] = Some(log);
    }
    BatchProfile {
        method: ProfileMethod::Search,
        grid,
        cells: cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.expect("every cell searched")).collect())
            .collect(),
    }
}

/// Searches every cell at that cell's edge lengths, the longest sequences
/// routing admits into it.
pub fn build_profile<R: StepRunner + ?Sized>(
    runner: &R,
    tree: &BucketTree,
    config: &SearchConfig,
) -> Result<BatchProfile> {
    tree.validate()?;
    config.validate()?;
    let (nb, ns) = (tree.num_buckets(), tree.num_subbuckets());
    let mut results = Vec::with_capacity(nb * ns);
    let mut previous: Option<u64> = None;
    // longest cells first
    for i in (0..nb).rev() {
        for j in (0..ns).rev() {
            let mut cfg = *config;
            if let (true, Some(b)) = (config.seed_from_neighbors, previous) {
                cfg.initial_batch_size = b;
            }
            let (b, log) = search_cell(runner, tree, (i, j), &cfg)?;
            previous = Some(b);
            results.push(((i, j), (b, log)));
        }
    }
    Ok(assemble(nb, ns, results))
}

/// Like [`build_profile`], spreading cells over `threads` workers when the
/// runner is reentrant. Falls back to the serial search otherwise, or when
/// neighbour seeding is requested. Both paths produce the same profile.
pub fn build_profile_concurrent<R: StepRunner + Sync + ?Sized>(
    runner: &R,
    tree: &BucketTree,
    config: &SearchConfig,
    threads: usize,
) -> Result<BatchProfile> {
    if !runner.is_reentrant() || config.seed_from_neighbors || threads <= 1 {
        return build_profile(runner, tree, config);
    }
    tree.validate()?;
    config.validate()?;
    let (nb, ns) = (tree.num_buckets(), tree.num_subbuckets());
    let cells: Vec<(usize, usize)> = (0..nb).rev().flat_map(|i| (0..ns).rev().map(move |j| (i, j))).collect();
    let chunk = cells.len().div_ceil(threads);
    let outcomes: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&cell| search_cell(runner, tree, cell, config).map(|r| (cell, r)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("search worker panicked"))
            .collect()
    });
    let mut results = Vec::with_capacity(cells.len());
    for part in outcomes {
        results.extend(part?);
    }
    Ok(assemble(nb, ns, results))
}

/// The hand-tuned baseline: one total-length budget per batch with a
/// quadratic penalty on the bucket's input edge `L`:
/// `floor(max_total_length / (L + quadratic_penalty * L^2))`, at least 1.
/// Output lengths are ignored.
pub fn baseline_heuristic_profile(
    tree: &BucketTree,
    max_total_length: f64,
    quadratic_penalty: f64,
) -> Result<BatchProfile> {
    tree.validate()?;
    if !(max_total_length.is_finite() && max_total_length > 0.0) {
        return Err(Error::config("max_total_length must be positive"));
    }
    if !(quadratic_penalty.is_finite() && quadratic_penalty >= 0.0) {
        return Err(Error::config("quadratic_penalty must be nonnegative"));
    }
    let ns = tree.num_subbuckets();
    let grid = tree
        .input_edges
        .iter()
        .map(|&l| {
            let cost = l + quadratic_penalty * l * l;
            let b = if cost > 0.0 {
                (max_total_length / cost).floor()
            } else {
                max_total_length.floor()
            };
            vec![(b as u64).max(1); ns]
        })
        .collect();
    Ok(BatchProfile {
        method: ProfileMethod::BaselineHeuristic,
        grid,
        cells: Vec::new(),
    })
}

/// Largest total-length budget for which the baseline heuristic never asks
/// for more than `reference` allows in any bucket (the row minimum).
pub fn calibrate_baseline_total(reference: &BatchProfile, tree: &BucketTree, quadratic_penalty: f64) -> Result<f64> {
    tree.validate()?;
    reference.validate()?;
    if reference.grid.len() != tree.num_buckets() {
        return Err(Error::config("reference profile and tree disagree on bucket count"));
    }
    let total = tree
        .input_edges
        .iter()
        .zip(&reference.grid)
        .map(|(&l, row)| {
            let limit = *row.iter().min().expect("validated") as f64;
            (limit + 0.5) * (l + quadratic_penalty * l * l)
        })
        .filter(|t| *t > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !total.is_finite() {
        return Err(Error::config("cannot calibrate a baseline on zero-length buckets"));
    }
    Ok(total)
}

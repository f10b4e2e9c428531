//! Equal-mass 1D/2D bucket estimation and the dynamic bucketing sampler.
//!
//! A [`BucketTree`] first splits examples by input length into
//! `num_buckets` buckets, then splits each bucket by output length into
//! `num_subbuckets` sub-buckets. With `num_subbuckets == 1` this is plain
//! 1D bucketing. Edges are inclusive upper bounds: an example goes to the
//! first bucket whose edge is `>=` its length.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datastream::{ExampleMeta, Modality};
use crate::error::{Error, Result};
use crate::oomptimizer::BatchProfile;

pub const BUCKET_TREE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMeasure {
    /// Buckets hold equal total input length; sub-buckets equal total output tokens.
    InputMass,
    /// Buckets and sub-buckets hold equal example counts.
    ExampleCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketConfig {
    pub num_buckets: usize,
    pub num_subbuckets: usize,
    pub sample_size: usize,
    pub mass_measure: MassMeasure,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            num_buckets: 10,
            num_subbuckets: 10,
            sample_size: 500_000,
            mass_measure: MassMeasure::InputMass,
        }
    }
}

impl BucketConfig {
    pub fn grid_size(&self) -> usize {
        self.num_buckets * self.num_subbuckets
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_buckets == 0 || self.num_subbuckets == 0 {
            return Err(Error::config("num_buckets and num_subbuckets must be at least 1"));
        }
        if self.sample_size < self.grid_size() {
            return Err(Error::config(format!(
                "sample_size {} is smaller than the {}x{} bucket grid",
                self.sample_size, self.num_buckets, self.num_subbuckets
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTree {
    /// Inclusive upper bound of each input-length bucket.
    pub input_edges: Vec<f64>,
    /// Per bucket, inclusive upper bound of each output-length sub-bucket.
    pub output_edges: Vec<Vec<u64>>,
    /// Set when some buckets are empty (repeated edges), e.g. for a sample
    /// whose lengths are all equal.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct BucketTreeDoc {
    version: u32,
    #[serde(flatten)]
    tree: BucketTree,
}

impl BucketTree {
    pub fn num_buckets(&self) -> usize {
        self.input_edges.len()
    }

    pub fn num_subbuckets(&self) -> usize {
        self.output_edges.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_edges.is_empty() {
            return Err(Error::config("bucket tree has no buckets"));
        }
        if self.output_edges.len() != self.input_edges.len() {
            return Err(Error::config("bucket tree: one output edge list per bucket required"));
        }
        if self.input_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("bucket tree: non-finite input edge"));
        }
        if self.input_edges.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("bucket tree: input edges must be non-decreasing"));
        }
        let width = self.num_subbuckets();
        for (i, sub) in self.output_edges.iter().enumerate() {
            if sub.is_empty() || sub.len() != width {
                return Err(Error::config(format!(
                    "bucket tree: bucket {i} has {} sub-buckets, expected {width}",
                    sub.len()
                )));
            }
            if sub.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::config(format!(
                    "bucket tree: output edges of bucket {i} must be non-decreasing"
                )));
            }
        }
        Ok(())
    }

    /// The 1D tree with the same input edges, each bucket keeping only its
    /// largest output edge.
    pub fn collapse_outputs(&self) -> BucketTree {
        BucketTree {
            input_edges: self.input_edges.clone(),
            output_edges: self
                .output_edges
                .iter()
                .map(|sub| vec![*sub.last().expect("validated tree")])
                .collect(),
            degenerate: self.degenerate,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BucketTreeDoc {
            version: BUCKET_TREE_VERSION,
            tree: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BucketTreeDoc = serde_json::from_str(s)?;
        if doc.version != BUCKET_TREE_VERSION {
            return Err(Error::config(format!(
                "unsupported bucket tree version {}",
                doc.version
            )));
        }
        doc.tree.validate()?;
        Ok(doc.tree)
    }
}

/// Greedy cumulative cut: sweep `values` (sorted ascending) accumulating
/// `masses`; part `k` ends at the first element whose cumulative mass reaches
/// `k * total / parts`, and its edge is that element's value.
fn equal_mass_edges(values: &[f64], masses: &[f64], parts: usize) -> Vec<f64> {
    let max = values.last().copied().unwrap_or(0.0);
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return vec![max; parts];
    }
    let mut edges = Vec::with_capacity(parts);
    let mut idx = 0;
    let mut cum = masses[0];
    for k in 1..parts {
        let target = k as f64 * total / parts as f64;
        while cum < target && idx + 1 < values.len() {
            idx += 1;
            cum += masses[idx];
        }
        edges.push(values[idx]);
    }
    edges.push(max);
    edges
}

fn by_input(a: &ExampleMeta, b: &ExampleMeta) -> Ordering {
    a.input_length.total_cmp(&b.input_length).then_with(|| a.id.cmp(&b.id))
}

fn by_output(a: &ExampleMeta, b: &ExampleMeta) -> Ordering {
    a.output_length.cmp(&b.output_length).then_with(|| a.id.cmp(&b.id))
}

/// Estimates equal-mass bucket edges from a sample.
///
/// Buckets are cut on input length with [`MassMeasure`] mass; the examples
/// that route to each bucket are then cut on output length. A bucket that
/// receives no examples (possible only with tied input lengths) copies the
/// previous bucket's output edges and marks the tree degenerate.
pub fn estimate_bins(sample: &[ExampleMeta], config: &BucketConfig) -> Result<BucketTree> {
    config.validate()?;
    if sample.len() < config.grid_size() {
        return Err(Error::config(format!(
            "sample of {} examples is smaller than the {}x{} bucket grid",
            sample.len(),
            config.num_buckets,
            config.num_subbuckets
        )));
    }
    if let Some(bad) = sample
        .iter()
        .find(|e| !e.input_length.is_finite() || e.input_length < 0.0)
    {
        return Err(Error::Domain(format!(
            "example {:?} has invalid input_length {}",
            bad.id, bad.input_length
        )));
    }

    let mut sorted: Vec<&ExampleMeta> = sample.iter().collect();
    sorted.sort_by(|a, b| by_input(a, b));
    let values: Vec<f64> = sorted.iter().map(|e| e.input_length).collect();
    let masses: Vec<f64> = match config.mass_measure {
        MassMeasure::InputMass => values.clone(),
        MassMeasure::ExampleCount => vec![1.0; values.len()],
    };
    let input_edges = equal_mass_edges(&values, &masses, config.num_buckets);

    let mut members: Vec<Vec<&ExampleMeta>> = vec![Vec::new(); config.num_buckets];
    for ex in &sorted {
        let i = input_edges.partition_point(|edge| *edge < ex.input_length);
        members[i.min(config.num_buckets - 1)].push(ex);
    }

    let mut degenerate = false;
    let mut output_edges: Vec<Vec<u64>> = Vec::with_capacity(config.num_buckets);
    for bucket in &mut members {
        if bucket.is_empty() {
            degenerate = true;
            let prev = output_edges
                .last()
                .cloned()
                .unwrap_or_else(|| vec![0; config.num_subbuckets]);
            output_edges.push(prev);
            continue;
        }
        bucket.sort_by(|a, b| by_output(a, b));
        let outs: Vec<f64> = bucket.iter().map(|e| e.output_length as f64).collect();
        let masses: Vec<f64> = match config.mass_measure {
            MassMeasure::InputMass => outs.clone(),
            MassMeasure::ExampleCount => vec![1.0; outs.len()],
        };
        let sub = equal_mass_edges(&outs, &masses, config.num_subbuckets)
            .into_iter()
            .map(|e| e as u64)
            .collect();
        output_edges.push(sub);
    }
    if input_edges.windows(2).any(|w| w[0] == w[1]) {
        degenerate = true;
    }
    if degenerate {
        log::warn!("estimated bucket tree is degenerate: some buckets share an edge and receive no examples");
    }
    Ok(BucketTree {
        input_edges,
        output_edges,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub bucket: usize,
    pub subbucket: usize,
    /// Input length exceeded the last input edge.
    pub input_outlier: bool,
    /// Output length exceeded the bucket's last output edge.
    pub output_outlier: bool,
}

impl Route {
    pub fn is_outlier(&self) -> bool {
        self.input_outlier || self.output_outlier
    }
}

/// First-fit routing; overflowing lengths go to the last (sub-)bucket and are flagged.
pub fn route(example: &ExampleMeta, tree: &BucketTree) -> Route {
    let nb = tree.input_edges.len();
    let i = tree.input_edges.partition_point(|edge| *edge < example.input_length);
    let (bucket, input_outlier) = if i >= nb { (nb - 1, true) } else { (i, false) };
    let sub = &tree.output_edges[bucket];
    let j = sub.partition_point(|edge| *edge < example.output_length);
    let (subbucket, output_outlier) = if j >= sub.len() {
        (sub.len() - 1, true)
    } else {
        (j, false)
    };
    Route {
        bucket,
        subbucket,
        input_outlier,
        output_outlier,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub examples: Vec<ExampleMeta>,
    /// Parallel to `examples`: whether the example overflowed its bucket.
    pub outliers: Vec<bool>,
    pub modality: Modality,
    pub bucket_index: (usize, usize),
    pub max_input_length: f64,
    pub max_output_length: u64,
}

impl MiniBatch {
    /// Builds a batch and computes its length maxima. `entries` must be non-empty.
    pub fn new(entries: Vec<(ExampleMeta, bool)>, bucket_index: (usize, usize)) -> Result<Self> {
        let modality = entries
            .first()
            .map(|(e, _)| e.modality)
            .ok_or_else(|| Error::Domain("mini-batch must not be empty".into()))?;
        let (examples, outliers): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let max_input_length = examples.iter().map(|e| e.input_length).fold(0.0, f64::max);
        let max_output_length = examples.iter().map(|e| e.output_length).max().unwrap_or(0);
        Ok(Self {
            examples,
            outliers,
            modality,
            bucket_index,
            max_input_length,
            max_output_length,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaddingStats {
    pub input_padding_ratio: f64,
    pub output_padding_ratio: f64,
}

fn padding_ratio(sum: f64, n: usize, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    (1.0 - sum / (n as f64 * max)).clamp(0.0, 1.0)
}

/// Fraction of padded cells along the input and output axes when the batch
/// is padded to its longest example.
pub fn padding_stats(batch: &MiniBatch) -> Result<PaddingStats> {
    if batch.examples.is_empty() {
        return Err(Error::Domain("padding of an empty batch is undefined".into()));
    }
    let n = batch.examples.len();
    let in_sum: f64 = batch.examples.iter().map(|e| e.input_length).sum();
    let out_sum: f64 = batch.examples.iter().map(|e| e.output_length as f64).sum();
    Ok(PaddingStats {
        input_padding_ratio: padding_ratio(in_sum, n, batch.max_input_length),
        output_padding_ratio: padding_ratio(out_sum, n, batch.max_output_length as f64),
    })
}

/// Groups incoming examples into one buffer per (bucket, sub-bucket) and
/// emits a batch whenever a buffer reaches the profile's batch size.
///
/// Batches come out in the order their buffers fill. Partially filled
/// buffers stay put until [`DynamicBucketingSampler::drain`] is called. The
/// sampler accepts a single modality; a mismatching example is an error.
pub struct DynamicBucketingSampler<I> {
    input: I,
    tree: BucketTree,
    grid: Vec<Vec<u64>>,
    buffers: Vec<Vec<Vec<(ExampleMeta, bool)>>>,
    modality: Option<Modality>,
    consumed: u64,
    failed: bool,
}

impl<I> DynamicBucketingSampler<I>
where
    I: Iterator<Item = Result<ExampleMeta>>,
{
    pub fn new(input: I, tree: BucketTree, profile: &BatchProfile) -> Result<Self> {
        tree.validate()?;
        let (nb, ns) = (tree.num_buckets(), tree.num_subbuckets());
        if profile.grid.len() != nb || profile.grid.iter().any(|row| row.len() != ns) {
            return Err(Error::config(format!(
                "batch profile shape does not match the {nb}x{ns} bucket tree"
            )));
        }
        if let Some((i, j)) = profile.find_cell(|b| b == 0) {
            return Err(Error::config(format!(
                "batch size of bucket ({i}, {j}) must be positive"
            )));
        }
        Ok(Self {
            input,
            buffers: vec![vec![Vec::new(); ns]; nb],
            grid: profile.grid.clone(),
            tree,
            modality: None,
            consumed: 0,
            failed: false,
        })
    }

    /// Number of input examples pulled so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// Examples currently waiting in buffers.
    pub fn pending(&self) -> usize {
        self.buffers.iter().flatten().map(Vec::len).sum()
    }

    pub fn tree(&self) -> &BucketTree {
        &self.tree
    }

    /// Flushes every non-empty buffer as a (possibly short) batch, in bucket order.
    pub fn drain(&mut self) -> Vec<MiniBatch> {
        let mut out = Vec::new();
        for (i, row) in self.buffers.iter_mut().enumerate() {
            for (j, buf) in row.iter_mut().enumerate() {
                if !buf.is_empty() {
                    out.push(MiniBatch::new(std::mem::take(buf), (i, j)).expect("non-empty buffer"));
                }
            }
        }
        out
    }
}

impl<I> Iterator for DynamicBucketingSampler<I>
where
    I: Iterator<Item = Result<ExampleMeta>>,
{
    type Item = Result<MiniBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let example = match self.input.next()? {
                Ok(e) => e,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            };
            self.consumed += 1;
            match self.modality {
                None => self.modality = Some(example.modality),
                Some(m) if m != example.modality => {
                    self.failed = true;
                    return Some(Err(Error::config(format!(
                        "bucketing sampler for {m} received a {} example ({:?})",
                        example.modality, example.id
                    ))));
                }
                Some(_) => {}
            }
            let r = route(&example, &self.tree);
            let (i, j) = (r.bucket, r.subbucket);
            let buf = &mut self.buffers[i][j];
            buf.push((example, r.is_outlier()));
            if buf.len() as u64 >= self.grid[i][j] {
                let entries = std::mem::take(buf);
                return Some(MiniBatch::new(entries, (i, j)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, input: f64, output: u64) -> ExampleMeta {
        ExampleMeta {
            id: id.into(),
            source_id: "s".into(),
            modality: Modality::Text,
            input_length: input,
            output_length: output,
        }
    }

    fn cfg(nb: usize, ns: usize) -> BucketConfig {
        BucketConfig {
            num_buckets: nb,
            num_subbuckets: ns,
            sample_size: nb * ns,
            mass_measure: MassMeasure::InputMass,
        }
    }

    #[test]
    fn one_to_eight_split_in_two() {
        let sample: Vec<_> = (1..=8).map(|i| ex(&format!("e{i}"), i as f64, 1)).collect();
        let tree = estimate_bins(&sample, &cfg(2, 1)).unwrap();
        assert_eq!(tree.input_edges, vec![6.0, 8.0]);
        assert!(!tree.degenerate);
    }

    #[test]
    fn greedy_cut_is_within_one_element_of_best_cut() {
        // brute force over all 7 single cut points of 1..=8
        let values: Vec<f64> = (1..=8).map(f64::from).collect();
        let total: f64 = values.iter().sum();
        let best_dev = (1..8)
            .map(|c| {
                let left: f64 = values[..c].iter().sum();
                (left - total / 2.0).abs().max((total - left - total / 2.0).abs())
            })
            .fold(f64::INFINITY, f64::min);
        let left: f64 = values.iter().filter(|v| **v <= 6.0).sum();
        let greedy_dev = (left - total / 2.0).abs();
        assert!(greedy_dev <= best_dev + 8.0);
    }

    #[test]
    fn all_equal_lengths_are_degenerate() {
        let sample: Vec<_> = (0..20).map(|i| ex(&format!("e{i}"), 4.0, 7)).collect();
        let tree = estimate_bins(&sample, &cfg(3, 2)).unwrap();
        assert!(tree.degenerate);
        assert!(tree.input_edges.iter().all(|e| *e == 4.0));
        assert!(tree.output_edges.iter().flatten().all(|e| *e == 7));
        let r = route(&sample[0], &tree);
        assert_eq!((r.bucket, r.subbucket), (0, 0));
        assert!(!r.is_outlier());
    }

    #[test]
    fn sample_smaller_than_grid() {
        let sample: Vec<_> = (0..5).map(|i| ex(&format!("e{i}"), i as f64, 1)).collect();
        let c = BucketConfig {
            sample_size: 100,
            ..cfg(3, 3)
        };
        assert!(matches!(estimate_bins(&sample, &c), Err(Error::Config(_))));
    }

    #[test]
    fn routing_boundaries_and_overflow() {
        let tree = BucketTree {
            input_edges: vec![6.0, 8.0],
            output_edges: vec![vec![3, 10], vec![5, 20]],
            degenerate: false,
        };
        let r = route(&ex("a", 6.0, 3), &tree);
        assert_eq!((r.bucket, r.subbucket, r.is_outlier()), (0, 0, false));
        let r = route(&ex("b", 9.0, 1), &tree);
        assert_eq!((r.bucket, r.subbucket), (1, 0));
        assert!(r.input_outlier && !r.output_outlier);
        let r = route(&ex("c", 7.0, 21), &tree);
        assert_eq!((r.bucket, r.subbucket), (1, 1));
        assert!(r.output_outlier);
    }

    #[test]
    fn padding_arithmetic() {
        let b = MiniBatch::new(vec![(ex("a", 1.0, 2), false), (ex("b", 3.0, 4), false)], (0, 0)).unwrap();
        let p = padding_stats(&b).unwrap();
        assert_eq!(p.output_padding_ratio, 0.25);
        assert_eq!(p.input_padding_ratio, 1.0 - 4.0 / 6.0);
        let one = MiniBatch::new(vec![(ex("a", 5.0, 9), false)], (0, 0)).unwrap();
        assert_eq!(padding_stats(&one).unwrap().output_padding_ratio, 0.0);
        let zeros = MiniBatch::new(vec![(ex("a", 0.0, 0), false), (ex("b", 0.0, 0), false)], (0, 0)).unwrap();
        let p = padding_stats(&zeros).unwrap();
        assert_eq!((p.input_padding_ratio, p.output_padding_ratio), (0.0, 0.0));
        let mut empty = one.clone();
        empty.examples.clear();
        assert!(matches!(padding_stats(&empty), Err(Error::Domain(_))));
    }

    #[test]
    fn tree_json_roundtrip_and_version_check() {
        let tree = BucketTree {
            input_edges: vec![1.5, 8.0],
            output_edges: vec![vec![3, 10], vec![5, 20]],
            degenerate: false,
        };
        let s = tree.to_json().unwrap();
        assert!(s.contains("\"version\": 1"));
        assert_eq!(BucketTree::from_json(&s).unwrap(), tree);
        let bad = s.replace("\"version\": 1", "\"version\": 9");
        assert!(BucketTree::from_json(&bad).is_err());
    }

    #[test]
    fn collapse_keeps_last_output_edge() {
        let tree = BucketTree {
            input_edges: vec![1.5, 8.0],
            output_edges: vec![vec![3, 10], vec![5, 20]],
            degenerate: false,
        };
        assert_eq!(tree.collapse_outputs().output_edges, vec![vec![10], vec![20]]);
    }
}

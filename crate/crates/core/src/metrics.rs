//! Pipeline diagnostics: padding, source-mix stationarity, per-bucket source
//! skew and batch-size summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bucketing::padding_stats;
use crate::combiner::ModalityStep;
use crate::datastream::Modality;
use crate::error::{Error, Result};
use crate::oomptimizer::BatchProfile;

/// Total-variation distance, half the L1 distance between two distributions.
/// Keys missing from one side count as probability zero.
pub fn tv_distance(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, pv) in p {
        sum += (pv - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, qv) in q {
        if !p.contains_key(k) {
            sum += qv.abs();
        }
    }
    0.5 * sum
}

fn normalize_counts(counts: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let n: u64 = counts.values().sum();
    counts.iter().map(|(k, c)| (k.clone(), *c as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub modality: Modality,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub steps: u64,
    /// Window length in steps. Windows are disjoint and aligned; a trailing
    /// partial window is dropped.
    pub window: u64,
    /// Configured blend weights per source. Sources of a modality missing
    /// here are compared against that modality's whole-run mixture instead.
    pub source_weights: BTreeMap<String, SourceWeight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowTv {
    pub window_start_step: u64,
    pub tv_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaddingSummary {
    pub mean_input_padding: f64,
    pub mean_output_padding: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub steps_simulated: u64,
    pub window: u64,
    pub batches_per_modality: BTreeMap<Modality, u64>,
    pub examples_per_modality: BTreeMap<Modality, u64>,
    pub mean_batch_size_per_modality: BTreeMap<Modality, f64>,
    pub padding_per_modality: BTreeMap<Modality, PaddingSummary>,
    /// Means over all sub-batches.
    pub mean_input_padding: f64,
    pub mean_output_padding: f64,
    pub outlier_fraction: f64,
    /// Per window, the largest over modalities of the TV distance between the
    /// window's source mixture and the reference weights.
    pub mixture_tv_distance_series: Vec<WindowTv>,
    pub max_window_tv: f64,
    /// Per modality, per (bucket, sub-bucket): TV distance between the
    /// sources seen in that cell and the modality's reference weights.
    /// `None` for cells that never produced a batch.
    pub per_bucket_source_skew: BTreeMap<Modality, Vec<Vec<Option<f64>>>>,
}

type SourceCounts = BTreeMap<String, u64>;

/// Consumes exactly `config.steps` steps of `pipeline` and aggregates the
/// diagnostics.
pub fn simulate<I>(pipeline: I, config: &SimulationConfig) -> Result<SimulationReport>
where
    I: IntoIterator<Item = Result<ModalityStep>>,
{
    if config.steps == 0 || config.window == 0 {
        return Err(Error::config("steps and window must be at least 1"));
    }
    let mut batches: BTreeMap<Modality, u64> = BTreeMap::new();
    let mut examples: BTreeMap<Modality, u64> = BTreeMap::new();
    let mut pad_sums: BTreeMap<Modality, (f64, f64)> = BTreeMap::new();
    let mut outliers = 0u64;
    let mut global: BTreeMap<Modality, SourceCounts> = BTreeMap::new();
    let mut cells: BTreeMap<(Modality, usize, usize), SourceCounts> = BTreeMap::new();
    let mut windows: Vec<(u64, BTreeMap<Modality, SourceCounts>)> = Vec::new();
    let mut current: BTreeMap<Modality, SourceCounts> = BTreeMap::new();

    let mut it = pipeline.into_iter();
    for step in 0..config.steps {
        let item = it
            .next()
            .ok_or_else(|| Error::Domain(format!("pipeline ended after {step} steps")))?;
        let item = item.map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        for batch in item.batches() {
            let m = batch.modality;
            let pad = padding_stats(batch).map_err(|e| Error::Step {
                step,
                source: Box::new(e),
            })?;
            *batches.entry(m).or_default() += 1;
            *examples.entry(m).or_default() += batch.len() as u64;
            let s = pad_sums.entry(m).or_default();
            s.0 += pad.input_padding_ratio;
            s.1 += pad.output_padding_ratio;
            outliers += batch.outliers.iter().filter(|o| **o).count() as u64;
            let (bi, bj) = batch.bucket_index;
            for ex in &batch.examples {
                *global.entry(m).or_default().entry(ex.source_id.clone()).or_default() += 1;
                *cells
                    .entry((m, bi, bj))
                    .or_default()
                    .entry(ex.source_id.clone())
                    .or_default() += 1;
                *current.entry(m).or_default().entry(ex.source_id.clone()).or_default() += 1;
            }
        }
        if (step + 1) % config.window == 0 {
            windows.push((step + 1 - config.window, std::mem::take(&mut current)));
        }
    }

    // reference mixture per modality
    let mut reference: BTreeMap<Modality, BTreeMap<String, f64>> = BTreeMap::new();
    for (src, sw) in &config.source_weights {
        reference.entry(sw.modality).or_default().insert(src.clone(), sw.weight);
    }
    for weights in reference.values_mut() {
        let total: f64 = weights.values().sum();
        weights.values_mut().for_each(|w| *w /= total);
    }
    for (m, counts) in &global {
        reference.entry(*m).or_insert_with(|| normalize_counts(counts));
    }

    let mixture_tv_distance_series: Vec<WindowTv> = windows
        .iter()
        .map(|(start, per_mod)| WindowTv {
            window_start_step: *start,
            tv_distance: per_mod
                .iter()
                .map(|(m, counts)| tv_distance(&normalize_counts(counts), &reference[m]))
                .fold(0.0, f64::max),
        })
        .collect();
    let max_window_tv = mixture_tv_distance_series
        .iter()
        .map(|w| w.tv_distance)
        .fold(0.0, f64::max);

    let mut per_bucket_source_skew: BTreeMap<Modality, Vec<Vec<Option<f64>>>> = BTreeMap::new();
    for m in global.keys() {
        let (rows, cols) = cells
            .keys()
            .filter(|(cm, _, _)| cm == m)
            .fold((0, 0), |(r, c), (_, i, j)| (r.max(i + 1), c.max(j + 1)));
        let mut grid = vec![vec![None; cols]; rows];
        for ((cm, i, j), counts) in &cells {
            if cm == m {
                grid[*i][*j] = Some(tv_distance(&normalize_counts(counts), &reference[m]));
            }
        }
        per_bucket_source_skew.insert(*m, grid);
    }

    let total_batches: u64 = batches.values().sum();
    let total_examples: u64 = examples.values().sum();
    let (in_sum, out_sum) = pad_sums.values().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok(SimulationReport {
        steps_simulated: config.steps,
        window: config.window,
        mean_batch_size_per_modality: batches
            .iter()
            .map(|(m, n)| (*m, examples[m] as f64 / *n as f64))
            .collect(),
        padding_per_modality: pad_sums
            .iter()
            .map(|(m, (i, o))| {
                let n = batches[m] as f64;
                (
                    *m,
                    PaddingSummary {
                        mean_input_padding: i / n,
                        mean_output_padding: o / n,
                    },
                )
            })
            .collect(),
        batches_per_modality: batches,
        examples_per_modality: examples,
        mean_input_padding: in_sum / total_batches as f64,
        mean_output_padding: out_sum / total_batches as f64,
        outlier_fraction: outliers as f64 / total_examples as f64,
        mixture_tv_distance_series,
        max_window_tv,
        per_bucket_source_skew,
    })
}

impl SimulationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps simulated      {}", self.steps_simulated);
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>12} {:>14} {:>14} {:>14}",
            "modality", "batches", "examples", "mean batch", "input pad", "output pad"
        );
        for (m, n) in &self.batches_per_modality {
            let pad = self.padding_per_modality[m];
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>12} {:>14.2} {:>14.4} {:>14.4}",
                m.as_str(),
                n,
                self.examples_per_modality[m],
                self.mean_batch_size_per_modality[m],
                pad.mean_input_padding,
                pad.mean_output_padding
            );
        }
        let _ = writeln!(s, "mean input padding   {:.4}", self.mean_input_padding);
        let _ = writeln!(s, "mean output padding  {:.4}", self.mean_output_padding);
        let _ = writeln!(s, "outlier fraction     {:.4}", self.outlier_fraction);
        let _ = writeln!(
            s,
            "max window TV        {:.4} ({} windows of {} steps)",
            self.max_window_tv,
            self.mixture_tv_distance_series.len(),
            self.window
        );
        for (m, grid) in &self.per_bucket_source_skew {
            let max = grid.iter().flatten().flatten().copied().fold(0.0, f64::max);
            let _ = writeln!(s, "max bucket skew {:<5} {:.4}", m.as_str(), max);
        }
        s
    }
}

pub const RATIO_BANDS: [f64; 4] = [1.0, 1.5, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileComparison {
    /// `b[i][j] / a[i][j]`.
    pub ratios: Vec<Vec<f64>>,
    /// `(band, fraction of cells with ratio >= band)` for [`RATIO_BANDS`].
    pub bands: Vec<(f64, f64)>,
    pub mean_ratio: f64,
}

impl ProfileComparison {
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        let n: usize = self.ratios.iter().map(Vec::len).sum();
        let hits = self.ratios.iter().flatten().filter(|r| **r >= threshold).count();
        hits as f64 / n as f64
    }
}

pub fn compare_profiles(a: &BatchProfile, b: &BatchProfile) -> Result<ProfileComparison> {
    a.validate()?;
    b.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "profile shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ratios: Vec<Vec<f64>> = a
        .grid
        .iter()
        .zip(&b.grid)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| *y as f64 / *x as f64).collect())
        .collect();
    let n: usize = ratios.iter().map(Vec::len).sum();
    let mean_ratio = ratios.iter().flatten().sum::<f64>() / n as f64;
    let mut cmp = ProfileComparison {
        ratios,
        bands: Vec::new(),
        mean_ratio,
    };
    cmp.bands = RATIO_BANDS.iter().map(|t| (*t, cmp.fraction_at_least(*t))).collect();
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    #[test]
    fn tv_basics() {
        let p = dist(&[("A", 1.0)]);
        let q = dist(&[("A", 0.5), ("B", 0.5)]);
        assert_eq!(tv_distance(&p, &q), 0.5);
        assert_eq!(tv_distance(&q, &p), 0.5);
        assert_eq!(tv_distance(&q, &q), 0.0);
        assert_eq!(tv_distance(&dist(&[("A", 1.0)]), &dist(&[("B", 1.0)])), 1.0);
    }

    #[test]
    fn profile_ratios() {
        let a = BatchProfile::from_grid(vec![vec![2, 4], vec![6, 8]]).unwrap();
        let same = compare_profiles(&a, &a).unwrap();
        assert!(same.ratios.iter().flatten().all(|r| *r == 1.0));
        let doubled = BatchProfile::from_grid(vec![vec![4, 8], vec![12, 16]]).unwrap();
        let c = compare_profiles(&a, &doubled).unwrap();
        assert!(c.ratios.iter().flatten().all(|r| *r == 2.0));
        assert_eq!(c.fraction_at_least(1.5), 1.0);
        assert_eq!(c.fraction_at_least(4.0), 0.0);
        let other = BatchProfile::from_grid(vec![vec![1, 1, 1]]).unwrap();
        assert!(matches!(compare_profiles(&a, &other), Err(Error::Config(_))));
    }

    #[test]
    fn simulate_rejects_zero_steps() {
        let cfg = SimulationConfig {
            steps: 0,
            window: 1,
            source_weights: BTreeMap::new(),
        };
        assert!(simulate(std::iter::empty(), &cfg).is_err());
    }
}

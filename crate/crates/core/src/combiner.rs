//! Joins per-modality mini-batch streams into one training stream.
//!
//! Streams are keyed by a lane name (normally the modality name). Zipped
//! steps list their batches in ascending lane-name order.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bucketing::MiniBatch;
use crate::error::{Error, Result};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineStrategy {
    RoundRobin,
    Zip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerConfig {
    pub strategy: CombineStrategy,
    /// Round-robin selection probabilities per lane; empty means equal.
    #[serde(default)]
    pub lane_probs: BTreeMap<String, f64>,
    pub seed: u64,
}

impl CombinerConfig {
    pub fn round_robin(seed: u64) -> Self {
        Self {
            strategy: CombineStrategy::RoundRobin,
            lane_probs: BTreeMap::new(),
            seed,
        }
    }

    pub fn zip() -> Self {
        Self {
            strategy: CombineStrategy::Zip,
            lane_probs: BTreeMap::new(),
            seed: 0,
        }
    }
}

/// One training step's worth of data.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityStep {
    Single(MiniBatch),
    /// One batch per lane, consumed as gradient-accumulation micro-steps.
    Zipped(Vec<MiniBatch>),
}

impl ModalityStep {
    pub fn batches(&self) -> &[MiniBatch] {
        match self {
            ModalityStep::Single(b) => std::slice::from_ref(b),
            ModalityStep::Zipped(bs) => bs,
        }
    }
}

/// Draws one lane per step from the seeded multinomial and yields that
/// lane's next batch. Lanes not drawn are not advanced.
pub struct RoundRobin<I> {
    lanes: Vec<(String, I)>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    done: bool,
}

pub fn round_robin<I>(samplers: BTreeMap<String, I>, config: &CombinerConfig) -> Result<RoundRobin<I>>
where
    I: Iterator<Item = Result<MiniBatch>>,
{
    if samplers.is_empty() {
        return Err(Error::config("round robin needs at least one sampler"));
    }
    let probs: Vec<f64> = if config.lane_probs.is_empty() {
        vec![1.0 / samplers.len() as f64; samplers.len()]
    } else {
        if !config.lane_probs.keys().eq(samplers.keys()) {
            return Err(Error::config(format!(
                "round robin probabilities cover {:?} but samplers are {:?}",
                config.lane_probs.keys().collect::<Vec<_>>(),
                samplers.keys().collect::<Vec<_>>()
            )));
        }
        let probs: Vec<f64> = config.lane_probs.values().copied().collect();
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::config("round robin probabilities must be positive"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("round robin probabilities sum to {sum}, not 1")));
        }
        probs
    };
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::config(e.to_string()))?;
    Ok(RoundRobin {
        lanes: samplers.into_iter().collect(),
        dist,
        rng: rng(config.seed),
        done: false,
    })
}

impl<I> Iterator for RoundRobin<I>
where
    I: Iterator<Item = Result<MiniBatch>>,
{
    type Item = Result<ModalityStep>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let idx = self.dist.sample(&mut self.rng);
        match self.lanes[idx].1.next() {
            Some(Ok(b)) => Some(Ok(ModalityStep::Single(b))),
            Some(Err(e)) => {
                self.done = true;
                Some(Err(e))
            }
            None => {
                self.done = true;
                None
            }
        }
    }
}

/// Advances every lane once per step.
pub struct Zip<I> {
    lanes: Vec<(String, I)>,
    done: bool,
}

pub fn zip<I>(samplers: BTreeMap<String, I>) -> Result<Zip<I>>
where
    I: Iterator<Item = Result<MiniBatch>>,
{
    if samplers.len() < 2 {
        return Err(Error::config("zip needs at least two samplers"));
    }
    Ok(Zip {
        lanes: samplers.into_iter().collect(),
        done: false,
    })
}

impl<I> Iterator for Zip<I>
where
    I: Iterator<Item = Result<MiniBatch>>,
{
    type Item = Result<ModalityStep>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut batches = Vec::with_capacity(self.lanes.len());
        for (lane, it) in &mut self.lanes {
            match it.next() {
                Some(Ok(b)) if !b.is_empty() => batches.push(b),
                Some(Ok(_)) => {
                    self.done = true;
                    return Some(Err(Error::Domain(format!("lane {lane:?} produced an empty batch"))));
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    return None;
                }
            }
        }
        Some(Ok(ModalityStep::Zipped(batches)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::{ExampleMeta, Modality};

    fn batches(tag: &str, modality: Modality) -> impl Iterator<Item = Result<MiniBatch>> + use<> {
        let tag = tag.to_owned();
        (0u64..).map(move |i| {
            let ex = ExampleMeta {
                id: format!("{tag}{i}"),
                source_id: tag.clone(),
                modality,
                input_length: 1.0,
                output_length: 1,
            };
            MiniBatch::new(vec![(ex, false)], (0, 0))
        })
    }

    #[test]
    fn zip_is_lockstep() {
        let mut lanes = BTreeMap::new();
        lanes.insert("audio".to_owned(), batches("a", Modality::Audio));
        lanes.insert("text".to_owned(), batches("t", Modality::Text));
        let steps: Vec<Vec<String>> = zip(lanes)
            .unwrap()
            .take(2)
            .map(|s| s.unwrap().batches().iter().map(|b| b.examples[0].id.clone()).collect())
            .collect();
        assert_eq!(steps, vec![vec!["a0", "t0"], vec!["a1", "t1"]]);
    }

    #[test]
    fn zip_needs_two() {
        let mut lanes = BTreeMap::new();
        lanes.insert("audio".to_owned(), batches("a", Modality::Audio));
        assert!(zip(lanes).is_err());
    }

    #[test]
    fn single_lane_round_robin() {
        let mut lanes = BTreeMap::new();
        lanes.insert("text".to_owned(), batches("t", Modality::Text));
        let rr = round_robin(lanes, &CombinerConfig::round_robin(5)).unwrap();
        for step in rr.take(100) {
            match step.unwrap() {
                ModalityStep::Single(b) => assert_eq!(b.modality, Modality::Text),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn probability_keys_must_match() {
        let mut lanes = BTreeMap::new();
        lanes.insert("audio".to_owned(), batches("a", Modality::Audio));
        lanes.insert("text".to_owned(), batches("t", Modality::Text));
        let mut cfg = CombinerConfig::round_robin(0);
        cfg.lane_probs.insert("audio".into(), 1.0);
        assert!(matches!(round_robin(lanes, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let mut lanes = BTreeMap::new();
        lanes.insert("audio".to_owned(), batches("a", Modality::Audio));
        lanes.insert("text".to_owned(), batches("t", Modality::Text));
        let mut cfg = CombinerConfig::round_robin(0);
        cfg.lane_probs.insert("audio".into(), 0.5);
        cfg.lane_probs.insert("text".into(), 0.6);
        assert!(matches!(round_robin(lanes, &cfg), Err(Error::Config(_))));
    }
}

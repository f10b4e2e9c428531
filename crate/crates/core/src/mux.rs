//! Stochastic weighted multiplexer over infinite example streams.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;

use crate::datastream::ExampleMeta;
use crate::error::{Error, Result};
use crate::seed::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MuxConfig {
    /// Unnormalized weights; normalization happens at draw time.
    pub stream_weights: BTreeMap<String, f64>,
    pub seed: u64,
}

impl MuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream_weights.is_empty() {
            return Err(Error::config("mux needs at least one stream"));
        }
        for (id, w) in &self.stream_weights {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::config(format!(
                    "mux weight for {id:?} must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Interleaves streams by drawing the next source from the multinomial
/// defined by the weights. Streams are ordered by source id, so the output
/// does not depend on the order the caller passed them in.
pub struct Mux<I> {
    streams: Vec<(String, I)>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    done: bool,
}

impl<I> std::fmt::Debug for Mux<I> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mux")
            .field("streams", &self.streams.iter().map(|(id, _)| id).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

/// Builds a multiplexer. There must be exactly one stream per weight entry.
pub fn mux<I>(streams: Vec<(String, I)>, config: &MuxConfig) -> Result<Mux<I>>
where
    I: Iterator<Item = Result<ExampleMeta>>,
{
    config.validate()?;
    if streams.len() != config.stream_weights.len() {
        return Err(Error::config(format!(
            "mux got {} streams for {} weights",
            streams.len(),
            config.stream_weights.len()
        )));
    }
    let mut streams = streams;
    streams.sort_by(|a, b| a.0.cmp(&b.0));
    let mut weights = Vec::with_capacity(streams.len());
    for (idx, (id, _)) in streams.iter().enumerate() {
        if idx > 0 && streams[idx - 1].0 == *id {
            return Err(Error::config(format!("duplicate mux stream {id:?}")));
        }
        let w = config
            .stream_weights
            .get(id)
            .ok_or_else(|| Error::config(format!("no mux weight for stream {id:?}")))?;
        weights.push(*w);
    }
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::config(format!("mux weights: {e}")))?;
    Ok(Mux {
        streams,
        dist,
        rng: rng(config.seed),
        done: false,
    })
}

impl<I> Iterator for Mux<I>
where
    I: Iterator<Item = Result<ExampleMeta>>,
{
    type Item = Result<ExampleMeta>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let idx = self.dist.sample(&mut self.rng);
        let item = self.streams[idx].1.next();
        if !matches!(item, Some(Ok(_))) {
            // a finite or failed input ends the blend
            self.done = true;
        }
        item
    }
}

/// Relative frequency of each source in `window`.
pub fn empirical_mixture(window: &[ExampleMeta]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for ex in window {
        *counts.entry(ex.source_id.clone()).or_default() += 1;
    }
    let n = window.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// Normalizes a weight map to sum to one.
pub fn normalize(weights: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let total: f64 = weights.values().sum();
    weights.iter().map(|(k, w)| (k.clone(), w / total)).collect()
}

//! Assembles streams, multiplexers, bucketing samplers and a combiner into
//! one training-step stream, and defines the per-modality artifact bundles
//! exchanged through files.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bucketing::{BucketTree, DynamicBucketingSampler, MiniBatch};
use crate::combiner::{round_robin, zip, CombineStrategy, CombinerConfig, ModalityStep};
use crate::datastream::{count_dataset, open_stream, ExampleMeta, ExampleStream, Modality, StreamSpec};
use crate::error::{Error, Result};
use crate::metrics::SourceWeight;
use crate::mux::{mux, Mux, MuxConfig};
use crate::oomptimizer::BatchProfile;
use crate::seed::{derive_seed, stable_hash};

pub type BatchStream = Box<dyn Iterator<Item = Result<MiniBatch>> + Send>;
pub type StepStream = Box<dyn Iterator<Item = Result<ModalityStep>> + Send>;

pub const ARTIFACT_SET_VERSION: u32 = 1;

/// One artifact (bucket tree or batch profile) per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySet<T> {
    pub version: u32,
    pub modalities: BTreeMap<Modality, T>,
}

impl<T: Serialize + DeserializeOwned> ModalitySet<T> {
    pub fn new(modalities: BTreeMap<Modality, T>) -> Self {
        Self {
            version: ARTIFACT_SET_VERSION,
            modalities,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(s)?;
        if set.version != ARTIFACT_SET_VERSION {
            return Err(Error::config(format!("unsupported artifact version {}", set.version)));
        }
        if set.modalities.is_empty() {
            return Err(Error::config("artifact holds no modalities"));
        }
        Ok(set)
    }

    pub fn get(&self, m: Modality) -> Result<&T> {
        self.modalities
            .get(&m)
            .ok_or_else(|| Error::config(format!("artifact has no entry for modality {m}")))
    }
}

pub type TreeSet = ModalitySet<BucketTree>;
pub type ProfileSet = ModalitySet<BatchProfile>;

impl ModalitySet<BucketTree> {
    pub fn validate(&self) -> Result<()> {
        self.modalities.values().try_for_each(BucketTree::validate)
    }
}

impl ModalitySet<BatchProfile> {
    pub fn validate(&self) -> Result<()> {
        self.modalities.values().try_for_each(BatchProfile::validate)
    }
}

/// Re-seeds every stream from a run-level seed.
pub fn apply_global_seed(specs: &mut [StreamSpec], seed: u64) {
    for s in specs {
        s.seed = derive_seed(seed, s.seed);
    }
}

pub fn specs_for(specs: &[StreamSpec], modality: Modality) -> Vec<StreamSpec> {
    specs.iter().filter(|s| s.modality == modality).cloned().collect()
}

pub fn modalities(specs: &[StreamSpec]) -> Vec<Modality> {
    let mut ms: Vec<Modality> = specs.iter().map(|s| s.modality).collect();
    ms.sort();
    ms.dedup();
    ms
}

pub fn mux_seed(seed: u64, modality: Modality) -> u64 {
    derive_seed(seed, stable_hash(&format!("mux/{modality}")))
}

/// Multiplexes the given streams with their configured weights.
pub fn blended_stream(specs: &[StreamSpec], seed: u64) -> Result<Mux<ExampleStream>> {
    let mut streams = Vec::with_capacity(specs.len());
    let mut weights = BTreeMap::new();
    for s in specs {
        streams.push((s.source_id.clone(), open_stream(s)?.boxed()));
        weights.insert(s.source_id.clone(), s.weight);
    }
    mux(
        streams,
        &MuxConfig {
            stream_weights: weights,
            seed,
        },
    )
}

#[derive(Debug, Clone)]
pub struct DrawnSample {
    pub examples: Vec<ExampleMeta>,
    /// The requested size exceeded the corpus, so some examples repeat.
    pub wrapped: bool,
}

/// Takes `size` examples from the blended stream of `specs`.
pub fn draw_sample(specs: &[StreamSpec], size: usize, seed: u64) -> Result<DrawnSample> {
    let mut corpus = 0u64;
    for s in specs {
        corpus += count_dataset(s)?.num_examples;
    }
    let wrapped = size as u64 > corpus;
    if wrapped {
        log::warn!("sample size {size} exceeds corpus size {corpus}; the sample wraps around the streams");
    }
    let examples = blended_stream(specs, seed)?.take(size).collect::<Result<Vec<_>>>()?;
    if examples.len() < size {
        return Err(Error::Domain(format!(
            "stream ended after {} of {size} examples",
            examples.len()
        )));
    }
    Ok(DrawnSample { examples, wrapped })
}

pub fn modality_sampler(
    specs: &[StreamSpec],
    tree: &BucketTree,
    profile: &BatchProfile,
    mux_seed: u64,
) -> Result<DynamicBucketingSampler<Mux<ExampleStream>>> {
    DynamicBucketingSampler::new(blended_stream(specs, mux_seed)?, tree.clone(), profile)
}

pub fn combine(lanes: BTreeMap<String, BatchStream>, config: &CombinerConfig) -> Result<StepStream> {
    Ok(match config.strategy {
        CombineStrategy::RoundRobin => Box::new(round_robin(lanes, config)?),
        CombineStrategy::Zip => Box::new(zip(lanes)?),
    })
}

/// Streams of every modality present in `specs`, each blended, bucketed with
/// its modality's tree and profile, then combined. Lanes are named after
/// their modality.
pub fn build_pipeline(
    specs: &[StreamSpec],
    trees: &TreeSet,
    profiles: &ProfileSet,
    combiner: &CombinerConfig,
    seed: u64,
) -> Result<StepStream> {
    let mut lanes: BTreeMap<String, BatchStream> = BTreeMap::new();
    for m in modalities(specs) {
        let sampler = modality_sampler(&specs_for(specs, m), trees.get(m)?, profiles.get(m)?, mux_seed(seed, m))?;
        lanes.insert(m.to_string(), Box::new(sampler));
    }
    combine(lanes, combiner)
}

pub fn source_weights(specs: &[StreamSpec]) -> BTreeMap<String, SourceWeight> {
    specs
        .iter()
        .map(|s| {
            (
                s.source_id.clone(),
                SourceWeight {
                    modality: s.modality,
                    weight: s.weight,
                },
            )
        })
        .collect()
}

//! Deterministic synthetic corpora for profiling and tests.
//!
//! Each source draws `(ln input, ln output)` from a bivariate normal with the
//! configured means, standard deviations and correlation, then exponentiates.
//! With probability `outlier_rate` the output length is further multiplied
//! by `outlier_scale` and clamped to `output_max`. Text input lengths are rounded to whole tokens, audio
//! durations to centiseconds; output lengths are whole tokens, at least 1.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datastream::{DatasetEntry, ExampleMeta, ManifestFile, Modality, ShardRecord, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::oomptimizer::{MemoryModelSet, SyntheticMemoryModel, BATCH_PROFILE_VERSION};
use crate::seed::{derive_seed, rng, stable_hash};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthModel {
    pub input_log_mean: f64,
    pub input_log_std: f64,
    pub input_min: f64,
    pub input_max: f64,
    pub output_log_mean: f64,
    pub output_log_std: f64,
    /// Upper clamp on output length, applied after the outlier scaling.
    pub output_max: f64,
    /// Correlation between log input and log output length.
    pub correlation: f64,
    pub outlier_rate: f64,
    pub outlier_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub source_id: String,
    pub modality: Modality,
    pub num_examples: usize,
    pub num_shards: usize,
    pub lengths: LengthModel,
    /// Written to the manifest; omitted means natural weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub sources: Vec<SourceConfig>,
}

impl LengthModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.input_log_mean,
            self.input_log_std,
            self.input_min,
            self.input_max,
            self.output_log_mean,
            self.output_log_std,
            self.output_max,
            self.correlation,
            self.outlier_rate,
            self.outlier_scale,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("length model parameters must be finite"));
        }
        if self.input_log_std < 0.0 || self.output_log_std < 0.0 {
            return Err(Error::config("log standard deviations must be nonnegative"));
        }
        if !(0.0 <= self.input_min && self.input_min <= self.input_max) {
            return Err(Error::config("need 0 <= input_min <= input_max"));
        }
        if self.output_max < 1.0 {
            return Err(Error::config("output_max must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation must be in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::config("outlier_rate must be in [0, 1]"));
        }
        if self.outlier_scale < 1.0 {
            return Err(Error::config("outlier_scale must be at least 1"));
        }
        Ok(())
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("synthetic config has no sources"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sources {
            if !ids.insert(&s.source_id) {
                return Err(Error::config(format!("duplicate source_id {:?}", s.source_id)));
            }
            if s.source_id.is_empty() || s.source_id.contains(['/', '\\']) {
                return Err(Error::config(format!("invalid source_id {:?}", s.source_id)));
            }
            if s.num_examples == 0 || s.num_shards == 0 || s.num_shards > s.num_examples {
                return Err(Error::config(format!(
                    "source {:?}: need 1 <= num_shards <= num_examples",
                    s.source_id
                )));
            }
            if let Some(w) = s.weight {
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::config(format!(
                        "source {:?}: weight must be positive",
                        s.source_id
                    )));
                }
            }
            s.lengths.validate()?;
        }
        Ok(())
    }

    /// The corpus used by the acceptance suite and the README walkthrough:
    /// two audio and two text sources with weakly correlated input/output
    /// lengths and 2% long-output outliers.
    pub fn shipped() -> Self {
        let audio = LengthModel {
            input_log_mean: 8.0f64.ln(),
            input_log_std: 0.6,
            input_min: 0.5,
            input_max: 40.0,
            output_log_mean: 40.0f64.ln(),
            output_log_std: 0.6,
            output_max: 512.0,
            correlation: 0.3,
            outlier_rate: 0.02,
            outlier_scale: 4.0,
        };
        let text = LengthModel {
            input_log_mean: 30.0f64.ln(),
            input_log_std: 0.7,
            input_min: 1.0,
            input_max: 256.0,
            output_log_mean: 32.0f64.ln(),
            output_log_std: 0.6,
            output_max: 512.0,
            correlation: 0.3,
            outlier_rate: 0.02,
            outlier_scale: 4.0,
        };
        Self {
            seed: 20_241_001,
            sources: vec![
                source("asr_en", Modality::Audio, 12_000, 8, audio),
                source(
                    "ast_en_de",
                    Modality::Audio,
                    6_000,
                    4,
                    LengthModel {
                        output_log_mean: 44.0f64.ln(),
                        ..audio
                    },
                ),
                source("nmt_en_de", Modality::Text, 20_000, 8, text),
                source(
                    "nmt_en_fr",
                    Modality::Text,
                    10_000,
                    4,
                    LengthModel {
                        input_log_mean: 36.0f64.ln(),
                        ..text
                    },
                ),
            ],
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn source(id: &str, modality: Modality, n: usize, shards: usize, lengths: LengthModel) -> SourceConfig {
    SourceConfig {
        source_id: id.to_owned(),
        modality,
        num_examples: n,
        num_shards: shards,
        lengths,
        weight: None,
    }
}

/// Memory models paired with [`SyntheticConfig::shipped`].
pub fn shipped_memory_models() -> MemoryModelSet {
    let mut models = std::collections::BTreeMap::new();
    models.insert(
        Modality::Audio,
        SyntheticMemoryModel {
            c0: 4.0e9,
            c1: 2.0e7,
            c2: 1.0e7,
            c3: 4.0e5,
            c4: 2.0e4,
            c5: 2.0e5,
            capacity_bytes: 80.0e9,
        },
    );
    models.insert(
        Modality::Text,
        SyntheticMemoryModel {
            c0: 4.0e9,
            c1: 4.0e6,
            c2: 4.0e6,
            c3: 4.0e4,
            c4: 6.0e4,
            c5: 4.0e4,
            capacity_bytes: 80.0e9,
        },
    );
    MemoryModelSet {
        version: BATCH_PROFILE_VERSION,
        models,
    }
}

fn source_seed(seed: u64, source_id: &str) -> u64 {
    derive_seed(seed, stable_hash(source_id))
}

/// Generates one source's examples in id order.
pub fn generate_examples(source: &SourceConfig, seed: u64) -> Result<Vec<ExampleMeta>> {
    source.lengths.validate()?;
    let lm = &source.lengths;
    let mut r = rng(source_seed(seed, &source.source_id));
    let rho = lm.correlation;
    let resid = (1.0 - rho * rho).max(0.0).sqrt();
    let mut out = Vec::with_capacity(source.num_examples);
    for i in 0..source.num_examples {
        let z1: f64 = r.sample(StandardNormal);
        let z2: f64 = r.sample(StandardNormal);
        let raw_in = (lm.input_log_mean + lm.input_log_std * z1).exp();
        let mut raw_out = (lm.output_log_mean + lm.output_log_std * (rho * z1 + resid * z2)).exp();
        if r.random::<f64>() < lm.outlier_rate {
            raw_out *= lm.outlier_scale;
        }
        let clamped = raw_in.clamp(lm.input_min, lm.input_max);
        let input_length = match source.modality {
            Modality::Text => clamped.round().max(1.0),
            Modality::Audio => (clamped * 100.0).round() / 100.0,
        };
        out.push(ExampleMeta {
            id: format!("{}-{i:07}", source.source_id),
            source_id: source.source_id.clone(),
            modality: source.modality,
            input_length,
            output_length: raw_out.min(lm.output_max).round().max(1.0) as u64,
        });
    }
    Ok(out)
}

/// Writes every source as contiguous JSON Lines shards under
/// `out_dir/<source_id>/shard-NNNN.jsonl` plus `out_dir/manifest.json`.
/// Returns the manifest path.
pub fn write_corpus(config: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut datasets = Vec::with_capacity(config.sources.len());
    for src in &config.sources {
        let examples = generate_examples(src, config.seed)?;
        let dir = out_dir.join(&src.source_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = examples.len();
        for k in 0..src.num_shards {
            let (lo, hi) = (k * n / src.num_shards, (k + 1) * n / src.num_shards);
            let path = dir.join(format!("shard-{k:04}.jsonl"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for ex in &examples[lo..hi] {
                let rec = ShardRecord {
                    id: ex.id.clone(),
                    modality: ex.modality,
                    input_length: ex.input_length,
                    output_length: ex.output_length,
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        datasets.push(DatasetEntry {
            source_id: src.source_id.clone(),
            modality: src.modality,
            shards: vec![format!("{}/shard-*.jsonl", src.source_id)],
            weight: src.weight,
            seed: Some(source_seed(config.seed, &src.source_id)),
        });
    }
    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        datasets,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

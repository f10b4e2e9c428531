//! Manifest-described datasets read as infinite, sequential shard streams.
//!
//! A dataset is a list of shard files. Each shard is UTF-8 JSON Lines, one
//! example per line:
//!
//! ```text
//! {"id": "utt-000017", "modality": "audio", "input_length": 7.32, "output_length": 41}
//! ```
//!
//! `input_length` is seconds for audio and tokens for text; `output_length` is
//! the target token count. Extra fields are ignored.
//!
//! The top-level manifest is a JSON document:
//!
//! ```text
//! {
//!   "version": 1,
//!   "datasets": [
//!     {"source_id": "asr_en", "modality": "audio", "shards": ["asr_en/*.jsonl"], "weight": 3.0, "seed": 11}
//!   ]
//! }
//! ```
//!
//! `shards` holds glob patterns resolved relative to the manifest's
//! directory. `weight` defaults to the dataset's example count (its natural
//! weight) and `seed` defaults to a stable hash of `source_id`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng, stable_hash};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Sampling-relevant metadata of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMeta {
    pub id: String,
    pub source_id: String,
    pub modality: Modality,
    /// Seconds for audio, tokens for text.
    pub input_length: f64,
    /// Target token count.
    pub output_length: u64,
}

/// One dataset viewed as an infinite sequential stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub source_id: String,
    pub shard_paths: Vec<PathBuf>,
    pub weight: f64,
    pub seed: u64,
    pub modality: Modality,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::config(format!(
                "stream {:?}: weight must be positive, got {}",
                self.source_id, self.weight
            )));
        }
        if self.shard_paths.is_empty() {
            return Err(Error::config(format!("stream {:?} has no shards", self.source_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Shard {
    pub path: PathBuf,
    pub examples: Vec<ExampleMeta>,
}

/// One line of a shard file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardRecord {
    pub id: String,
    pub modality: Modality,
    pub input_length: f64,
    pub output_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    #[serde(default = "default_version")]
    pub version: u32,
    pub datasets: Vec<DatasetEntry>,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub source_id: String,
    pub modality: Modality,
    pub shards: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Reads one shard file. `source_id` is stamped onto every example; lines
/// whose modality differs from `modality` are rejected.
pub fn read_shard(path: &Path, source_id: &str, modality: Modality) -> Result<Shard> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: ShardRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !(rec.input_length.is_finite() && rec.input_length >= 0.0) {
            return Err(parse_err(format!(
                "input_length must be finite and nonnegative, got {}",
                rec.input_length
            )));
        }
        if rec.modality != modality {
            return Err(parse_err(format!(
                "modality {} does not match dataset modality {}",
                rec.modality, modality
            )));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?} within shard", rec.id)));
        }
        examples.push(ExampleMeta {
            id: rec.id,
            source_id: source_id.to_owned(),
            modality: rec.modality,
            input_length: rec.input_length,
            output_length: rec.output_length,
        });
    }
    if examples.is_empty() {
        return Err(Error::config(format!("shard {} is empty", path.display())));
    }
    Ok(Shard {
        path: path.to_path_buf(),
        examples,
    })
}

fn expand_globs(base: &Path, patterns: &[String], source_id: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pattern in patterns {
        let full = if Path::new(pattern).is_absolute() {
            PathBuf::from(pattern)
        } else {
            base.join(pattern)
        };
        let full = full.to_string_lossy().into_owned();
        let matches = glob::glob(&full)
            .map_err(|e| Error::config(format!("dataset {source_id:?}: bad glob {pattern:?}: {e}")))?;
        let mut found = false;
        for entry in matches {
            let p = entry.map_err(|e| {
                let path = e.path().to_path_buf();
                Error::io(path, e.into())
            })?;
            if p.is_file() {
                paths.push(p);
                found = true;
            }
        }
        if !found {
            return Err(Error::config(format!(
                "dataset {source_id:?}: pattern {pattern:?} matched no shard files"
            )));
        }
    }
    Ok(paths)
}

/// Loads the top-level manifest, resolving shard globs and natural weights.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<StreamSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::config(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.datasets.is_empty() {
        return Err(Error::config("manifest declares no datasets"));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut ids = BTreeSet::new();
    let mut specs = Vec::with_capacity(manifest.datasets.len());
    for entry in manifest.datasets {
        if !ids.insert(entry.source_id.clone()) {
            return Err(Error::config(format!("duplicate source_id {:?}", entry.source_id)));
        }
        let shard_paths = expand_globs(base, &entry.shards, &entry.source_id)?;
        let mut spec = StreamSpec {
            seed: entry.seed.unwrap_or_else(|| stable_hash(&entry.source_id)),
            source_id: entry.source_id,
            shard_paths,
            weight: 1.0,
            modality: entry.modality,
        };
        let counts = count_dataset(&spec)?;
        if counts.num_examples == 0 {
            return Err(Error::config(format!("dataset {:?} is empty", spec.source_id)));
        }
        spec.weight = entry.weight.unwrap_or(counts.num_examples as f64);
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetCounts {
    pub num_examples: u64,
    pub total_input_mass: f64,
    pub total_output_mass: f64,
}

/// Exact totals over one pass of the dataset.
pub fn count_dataset(spec: &StreamSpec) -> Result<DatasetCounts> {
    if spec.shard_paths.is_empty() {
        return Err(Error::config(format!("stream {:?} has no shards", spec.source_id)));
    }
    let mut counts = DatasetCounts {
        num_examples: 0,
        total_input_mass: 0.0,
        total_output_mass: 0.0,
    };
    for path in &spec.shard_paths {
        let shard = read_shard(path, &spec.source_id, spec.modality)?;
        for ex in &shard.examples {
            counts.num_examples += 1;
            counts.total_input_mass += ex.input_length;
            counts.total_output_mass += ex.output_length as f64;
        }
    }
    Ok(counts)
}

/// The shard visiting order of pass `pass` for a stream seeded with `seed`.
pub fn shard_order(num_shards: usize, seed: u64, pass: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_shards).collect();
    order.shuffle(&mut rng(derive_seed(seed, pass)));
    order
}

fn example_seed(seed: u64, pass: u64, shard_index: usize) -> u64 {
    derive_seed(derive_seed(seed, pass), 1 + shard_index as u64)
}

pub type ExampleStream = Box<dyn Iterator<Item = Result<ExampleMeta>> + Send>;

/// Infinite iterator over a dataset. Each pass visits every shard once in a
/// seeded order and every shard's examples in a seeded order; shards are read
/// from disk when reached. After an error the iterator is exhausted.
#[derive(Debug)]
pub struct ShardStream {
    spec: StreamSpec,
    pass: u64,
    order: Vec<usize>,
    next_shard: usize,
    current: std::vec::IntoIter<ExampleMeta>,
    failed: bool,
}

pub fn open_stream(spec: &StreamSpec) -> Result<ShardStream> {
    spec.validate()?;
    Ok(ShardStream {
        order: shard_order(spec.shard_paths.len(), spec.seed, 0),
        spec: spec.clone(),
        pass: 0,
        next_shard: 0,
        current: Vec::new().into_iter(),
        failed: false,
    })
}

impl ShardStream {
    /// Index of the pass currently being read (0-based).
    pub fn pass(&self) -> u64 {
        self.pass
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn boxed(self) -> ExampleStream {
        Box::new(self)
    }

    fn load_next_shard(&mut self) -> Result<()> {
        if self.next_shard == self.order.len() {
            self.pass += 1;
            self.order = shard_order(self.spec.shard_paths.len(), self.spec.seed, self.pass);
            self.next_shard = 0;
        }
        let shard_index = self.order[self.next_shard];
        self.next_shard += 1;
        let path = &self.spec.shard_paths[shard_index];
        let mut shard = read_shard(path, &self.spec.source_id, self.spec.modality)?;
        shard
            .examples
            .shuffle(&mut rng(example_seed(self.spec.seed, self.pass, shard_index)));
        self.current = shard.examples.into_iter();
        Ok(())
    }
}

impl Iterator for ShardStream {
    type Item = Result<ExampleMeta>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(ex) = self.current.next() {
                return Some(Ok(ex));
            }
            if let Err(e) = self.load_next_shard() {
                self.failed = true;
                return Some(Err(e));
            }
        }
    }
}

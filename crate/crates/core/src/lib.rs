//! Streaming sampler for variable-length multimodal training corpora.
//!
//! The crate works purely on example metadata (ids and sequence lengths):
//!
//! * [`datastream`] reads line-delimited shard manifests as infinite,
//!   per-pass reshuffled streams.
//! * [`mux`] blends several streams with a seeded weighted multiplexer.
//! * [`bucketing`] estimates equal-mass 1D/2D bucket bins and groups
//!   examples into minimally padded mini-batches.
//! * [`oomptimizer`] searches the largest safe batch size per bucket against
//!   a pluggable step runner.
//! * [`combiner`] joins per-modality batch streams (round robin or zip).
//! * [`metrics`] measures padding, source-mix stationarity and batch sizes.
//!
//! [`synthetic`] and [`pipeline`] provide a corpus generator and the glue used
//! by the command-line tool.

pub mod bucketing;
pub mod combiner;
pub mod datastream;
pub mod error;
pub mod metrics;
pub mod mux;
pub mod oomptimizer;
pub mod pipeline;
pub mod seed;
pub mod synthetic;

pub use bucketing::{
    estimate_bins, padding_stats, route, BucketConfig, BucketTree, DynamicBucketingSampler, MassMeasure, MiniBatch,
    Route,
};
pub use combiner::{round_robin, zip, CombineStrategy, CombinerConfig, ModalityStep};
pub use datastream::{count_dataset, load_manifest, open_stream, DatasetCounts, ExampleMeta, Modality, StreamSpec};
pub use error::{Error, Result};
pub use metrics::{compare_profiles, simulate, tv_distance, SimulationConfig, SimulationReport};
pub use mux::{empirical_mixture, mux, Mux, MuxConfig};
pub use oomptimizer::{
    baseline_heuristic_profile, build_profile, search_batch_size, BatchProfile, SearchConfig, StepOutcome, StepRunner,
    SyntheticMemoryModel,
};

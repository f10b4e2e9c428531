#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use bucketmux::{ExampleMeta, Modality, StepOutcome, StepRunner, StreamSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn example(id: &str, source: &str, input: f64, output: u64) -> ExampleMeta {
    ExampleMeta {
        id: id.to_owned(),
        source_id: source.to_owned(),
        modality: Modality::Text,
        input_length: input,
        output_length: output,
    }
}

/// Writes `n` text examples into `shards` JSONL files under `dir/name/`.
pub fn write_dataset(dir: &Path, name: &str, n: usize, shards: usize) -> Vec<PathBuf> {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub).unwrap();
    let mut paths = Vec::new();
    for k in 0..shards {
        let path = sub.join(format!("part-{k:03}.jsonl"));
        let mut f = std::fs::File::create(&path).unwrap();
        for i in (k * n / shards)..((k + 1) * n / shards) {
            writeln!(
                f,
                "{{\"id\":\"{name}-{i}\",\"modality\":\"text\",\"input_length\":{},\"output_length\":{}}}",
                1 + i % 17,
                1 + i % 5
            )
            .unwrap();
        }
        paths.push(path);
    }
    paths
}

pub fn text_spec(name: &str, paths: Vec<PathBuf>, seed: u64) -> StreamSpec {
    StreamSpec {
        source_id: name.to_owned(),
        shard_paths: paths,
        weight: 1.0,
        seed,
        modality: Modality::Text,
    }
}

/// Log-normal lengths drawn with Box-Muller on a private generator.
pub fn lognormal_sample(n: usize, seed: u64) -> Vec<ExampleMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    (0..n)
        .map(|i| {
            let input = (2.0 + 0.6 * normal()).exp();
            let output = (5.0 + 0.5 * normal()).exp().round().max(1.0) as u64;
            example(&format!("s{i:07}"), "src", input, output)
        })
        .collect()
}

/// Largest batch size the runner accepts, by exhaustive scan from 1.
pub fn linear_scan_max<R: StepRunner>(runner: &R, lin: f64, lout: u64, limit: u64) -> u64 {
    let mut best = 0;
    for b in 1..=limit {
        if runner.run(b, lin, lout) == StepOutcome::Success {
            best = b;
        } else {
            break;
        }
    }
    best
}

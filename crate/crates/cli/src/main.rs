//! `bucketmux` command-line tool.
//!
//! Every command reads and writes plain files, so a run chains as
//! `gen-synthetic -> estimate-buckets -> oomptimize -> simulate`.
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bucketmux::bucketing::{estimate_bins, BucketConfig, MassMeasure};
use bucketmux::combiner::{CombineStrategy, CombinerConfig};
use bucketmux::datastream::{load_manifest, Modality, StreamSpec};
use bucketmux::metrics::{compare_profiles, simulate, SimulationConfig};
use bucketmux::oomptimizer::{
    baseline_heuristic_profile, build_profile_concurrent, calibrate_baseline_total, MemoryModelSet, SearchConfig,
};
use bucketmux::pipeline::{
    apply_global_seed, build_pipeline, draw_sample, modalities, mux_seed, source_weights, specs_for, ProfileSet,
    TreeSet,
};
use bucketmux::seed::{derive_seed, stable_hash};
use bucketmux::synthetic::{write_corpus, SyntheticConfig};

#[derive(Debug, Parser)]
#[command(
    name = "bucketmux",
    version,
    about = "Bucketing, batch-size search and blending for variable-length corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mass {
    Input,
    Count,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    RoundRobin,
    Zip,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus and its manifest.
    GenSynthetic {
        /// Corpus description (JSON). Defaults to the built-in preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate equal-mass bucket bins per modality from a blended sample.
    EstimateBuckets {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_buckets: usize,
        #[arg(long, default_value_t = 10)]
        num_subbuckets: usize,
        #[arg(long, default_value_t = 500_000)]
        sample_size: usize,
        #[arg(long, value_enum, default_value_t = Mass::Input)]
        mass: Mass,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Search the largest safe batch size of every bucket.
    Oomptimize {
        #[arg(long)]
        trees: PathBuf,
        /// Per-modality synthetic memory models (JSON).
        #[arg(long)]
        memory_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        initial_batch_size: u64,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 65_536)]
        max_batch_size: u64,
        /// Start each cell from its solved neighbour (fewer probes).
        #[arg(long)]
        seed_from_neighbors: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Emit the total-length heuristic profile instead of searching.
        #[arg(long)]
        baseline: bool,
        /// Quadratic length penalty of the baseline heuristic.
        #[arg(long, default_value_t = 0.0)]
        penalty: f64,
        /// Total-length budget of the baseline; calibrated against the memory
        /// model when omitted.
        #[arg(long)]
        max_total: Option<f64>,
    },
    /// Run the full pipeline and report padding, stationarity and batch sizes.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        steps: u64,
        #[arg(long, default_value_t = 1_000)]
        window: u64,
        #[arg(long, value_enum, default_value_t = Strategy::RoundRobin)]
        strategy: Strategy,
        /// Round-robin probabilities, e.g. `audio=0.5,text=0.5`. Default: equal.
        #[arg(long)]
        probs: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-cell batch-size ratios `b / a` of two profile files.
    CompareProfiles {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_specs(manifest: &Path, seed: u64) -> Result<Vec<StreamSpec>> {
    let mut specs = load_manifest(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    apply_global_seed(&mut specs, seed);
    Ok(specs)
}

fn gen_synthetic(config: Option<PathBuf>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SyntheticConfig::from_json(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticConfig::shipped(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = write_corpus(&cfg, out_dir)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn estimate_buckets(manifest: &Path, out: &Path, config: BucketConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let specs = load_specs(manifest, seed)?;
    let mut trees = BTreeMap::new();
    for m in modalities(&specs) {
        // draw_sample logs a warning when the sample wraps around the corpus
        let sample = draw_sample(&specs_for(&specs, m), config.sample_size, mux_seed(seed, m))?;
        log::info!("{m}: drew {} examples", sample.examples.len());
        let tree = estimate_bins(&sample.examples, &config).with_context(|| format!("estimating {m} buckets"))?;
        if tree.degenerate {
            eprintln!("warning: {m}: degenerate bucket tree (repeated edges)");
        }
        trees.insert(m, tree);
    }
    write(out, &TreeSet::new(trees).to_json()?)?;
    println!("wrote {}", out.display());
    Ok(())
}

struct OomptimizeArgs {
    search: SearchConfig,
    threads: usize,
    baseline: bool,
    penalty: f64,
    max_total: Option<f64>,
}

fn oomptimize(trees: &Path, memory_model: &Path, out: &Path, args: OomptimizeArgs) -> Result<()> {
    let trees = TreeSet::from_json(&read(trees)?).context("parsing bucket trees")?;
    trees.validate()?;
    let models = MemoryModelSet::from_json(&read(memory_model)?).context("parsing memory model")?;
    let mut profiles = BTreeMap::new();
    for (m, tree) in &trees.modalities {
        let model = models
            .models
            .get(m)
            .with_context(|| format!("memory model has no entry for {m}"))?;
        log::info!("{m}: profiling {}x{} cells", tree.num_buckets(), tree.num_subbuckets());
        let profile = if args.baseline {
            let total = match args.max_total {
                Some(t) => t,
                None => {
                    let reference = build_profile_concurrent(model, tree, &args.search, args.threads)
                        .with_context(|| format!("{m}: calibrating baseline"))?;
                    calibrate_baseline_total(&reference, tree, args.penalty)?
                }
            };
            println!("{m}: baseline max_total_length = {total}");
            baseline_heuristic_profile(tree, total, args.penalty)?
        } else {
            build_profile_concurrent(model, tree, &args.search, args.threads).with_context(|| format!("{m}"))?
        };
        println!("{m}: mean batch size {:.2}", profile.mean_batch_size());
        profiles.insert(*m, profile);
    }
    write(out, &ProfileSet::new(profiles).to_json()?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_probs(spec: &str) -> Result<BTreeMap<String, f64>> {
    let mut probs = BTreeMap::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .with_context(|| format!("expected lane=probability, got {part:?}"))?;
        let k = k.trim();
        k.parse::<Modality>()?;
        let v: f64 = v.trim().parse().with_context(|| format!("bad probability {v:?}"))?;
        probs.insert(k.to_owned(), v);
    }
    Ok(probs)
}

struct SimulateArgs {
    steps: u64,
    window: u64,
    strategy: Strategy,
    probs: Option<String>,
    seed: u64,
}

fn run_simulation(manifest: &Path, trees: &Path, profiles: &Path, out: &Path, args: SimulateArgs) -> Result<()> {
    let specs = load_specs(manifest, args.seed)?;
    let trees = TreeSet::from_json(&read(trees)?).context("parsing bucket trees")?;
    trees.validate()?;
    let profiles = ProfileSet::from_json(&read(profiles)?).context("parsing batch profiles")?;
    profiles.validate()?;
    let combiner = CombinerConfig {
        strategy: match args.strategy {
            Strategy::RoundRobin => CombineStrategy::RoundRobin,
            Strategy::Zip => CombineStrategy::Zip,
        },
        lane_probs: match &args.probs {
            Some(p) => parse_probs(p)?,
            None => BTreeMap::new(),
        },
        seed: derive_seed(args.seed, stable_hash("combiner")),
    };
    let pipeline = build_pipeline(&specs, &trees, &profiles, &combiner, args.seed)?;
    log::info!("simulating {} steps", args.steps);
    let report = simulate(
        pipeline,
        &SimulationConfig {
            steps: args.steps,
            window: args.window,
            source_weights: source_weights(&specs),
        },
    )?;
    let table = report.to_table();
    write(out, &(report.to_json()? + "\n"))?;
    write(&out.with_extension("txt"), &table)?;
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}

fn compare(a: &Path, b: &Path, out: Option<PathBuf>) -> Result<()> {
    let a = ProfileSet::from_json(&read(a)?).context("parsing profile a")?;
    let b = ProfileSet::from_json(&read(b)?).context("parsing profile b")?;
    let mut all = BTreeMap::new();
    for (m, pa) in &a.modalities {
        let pb = b.get(*m)?;
        let pa = if pa.shape().1 == 1 && pb.shape().1 > 1 {
            pa.expand_subbuckets(pb.shape().1)?
        } else {
            pa.clone()
        };
        let cmp = compare_profiles(&pa, pb).with_context(|| format!("{m}"))?;
        print!("{m}: mean ratio {:.3}", cmp.mean_ratio);
        for (band, frac) in &cmp.bands {
            print!("  >={band}: {:.1}%", 100.0 * frac);
        }
        println!();
        all.insert(*m, cmp);
    }
    if let Some(out) = out {
        write(&out, &(serde_json::to_string_pretty(&all)? + "\n"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { config, seed, out_dir } => gen_synthetic(config, seed, &out_dir),
        Command::EstimateBuckets {
            manifest,
            out,
            num_buckets,
            num_subbuckets,
            sample_size,
            mass,
            seed,
        } => {
            let config = BucketConfig {
                num_buckets,
                num_subbuckets,
                sample_size,
                mass_measure: match mass {
                    Mass::Input => MassMeasure::InputMass,
                    Mass::Count => MassMeasure::ExampleCount,
                },
            };
            estimate_buckets(&manifest, &out, config, seed)
        }
        Command::Oomptimize {
            trees,
            memory_model,
            out,
            initial_batch_size,
            tolerance,
            max_batch_size,
            seed_from_neighbors,
            threads,
            baseline,
            penalty,
            max_total,
        } => {
            if threads == 0 {
                bail!("--threads must be at least 1");
            }
            let search = SearchConfig {
                initial_batch_size,
                tolerance,
                max_batch_size_cap: max_batch_size,
                seed_from_neighbors,
            };
            search.validate()?;
            let args = OomptimizeArgs {
                search,
                threads,
                baseline,
                penalty,
                max_total,
            };
            oomptimize(&trees, &memory_model, &out, args)
        }
        Command::Simulate {
            manifest,
            trees,
            profiles,
            out,
            steps,
            window,
            strategy,
            probs,
            seed,
        } => run_simulation(
            &manifest,
            &trees,
            &profiles,
            &out,
            SimulateArgs {
                steps,
                window,
                strategy,
                probs,
                seed,
            },
        ),
        Command::CompareProfiles { a, b, out } => compare(&a, &b, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

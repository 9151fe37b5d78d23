//! Command-line pipeline: dataset generation, two-stage training,
//! reconstruction, and evaluation.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime/numeric failure,
//! 2 usage or configuration error.

use crate::dataset::{
    generate_desk_benchmark, load_datasets, BenchmarkCounts, LoadedDataset,
    TestInstance, MANIFEST_NAME,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    noise_sweep, reconstruction_cd, run_ablation, sign_accuracy, BenchmarkSpec, ChamferConfig,
    ExperimentReport, NoiseConfig, ReconSettings, ReportMetadata, ReportRow,
};
use crate::geometry::{load_cloud, normalize_cloud};
use crate::model::{load_checkpoint, ConditionalSdfModel, DecoderConfig, EncoderConfig};
use crate::reconstruction::{evaluate_grid, marching_cubes, export_mesh};
use crate::training::{
    refine, train_stage1, train_stage2, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Desk-scale conditional SDF toolkit.
#[derive(Parser)]
#[command(name = "gensdf", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark dataset.
    GenData(GenDataArgs),
    /// Train stage 1 (episodic meta-learning) or stage 2 (semi-supervision).
    Train(TrainArgs),
    /// Reconstruct a mesh from a point cloud with a trained model.
    Reconstruct(ReconstructArgs),
    /// Evaluate a trained model (or run the ablation harness).
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output dataset directory (default: $GENSDF_DATA_DIR or ./data).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per conditioning cloud.
    #[arg(long, default_value_t = 2048)]
    pub cloud_size: usize,
    #[arg(long, default_value_t = 20)]
    pub labeled_per_category: usize,
    #[arg(long, default_value_t = 20)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_category: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training stage: 1 or 2.
    #[arg(long)]
    pub stage: u32,
    /// Dataset manifest path (default: $GENSDF_DATA_DIR/manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints, metrics, and the run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage-2 initialization checkpoint (stage-1 output).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Allow stage 2 from random initialization (the semi-only arm).
    #[arg(long)]
    pub from_scratch: bool,
    /// Print the resolved config and dataset statistics, then exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input cloud (.xyz or .pcb).
    #[arg(long)]
    pub cloud: PathBuf,
    /// Output OBJ path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub refine_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub refine_lr: f64,
    /// Recenter and rescale the input cloud into the unit cube first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(clap::ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Seen,
    Unseen,
    Noise,
    Ablation,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained checkpoint; unused in ablation mode (arms train afresh).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    /// Output directory for report files.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Samples per mesh for Chamfer distance.
    #[arg(long, default_value_t = 30000)]
    pub cd_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run config for ablation training.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Full run configuration: training hyperparameters plus model shape.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything needed to reproduce a run: config, seeds, data checksums.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub data_manifest: String,
    pub data_manifest_sha256: String,
    pub checkpoints: Vec<String>,
    pub metrics: Option<String>,
    pub seeds: Vec<u64>,
    pub wall_seconds: f64,
    pub revision: String,
}

fn revision() -> String {
    std::env::var("GENSDF_REVISION").unwrap_or_else(|_| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Exclusive ownership of a run directory for the process lifetime.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| {
                Error::Config(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            })?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn data_dir_default() -> PathBuf {
    std::env::var_os("GENSDF_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn resolve_manifest_path(data: &Option<PathBuf>) -> PathBuf {
    match data {
        Some(p) if p.is_dir() => p.join(MANIFEST_NAME),
        Some(p) => p.clone(),
        None => data_dir_default().join(MANIFEST_NAME),
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

/// Maps error kinds onto the exit-code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Argument(_)
        | Error::Usage(_)
        | Error::Dataset(_)
        | Error::Load(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(data_dir_default);
    let counts = BenchmarkCounts {
        labeled_per_category: args.labeled_per_category,
        unlabeled: args.unlabeled,
        test_per_category: args.test_per_category,
    };
    let manifest = generate_desk_benchmark(&out, args.seed, args.cloud_size, &counts)?;
    println!(
        "wrote {} instances ({} files) to {}",
        manifest.entries.len(),
        manifest.entries.len() + 1,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    init_threads(args.threads);
    let started = Instant::now();
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.train.validate()?;

    let manifest_path = resolve_manifest_path(&args.data);
    let loaded = load_datasets(&manifest_path)?;

    // Resolve the initial model before any filesystem writes.
    let model_init = match (args.stage, &args.init, args.from_scratch) {
        (1, None, _) => {
            ConditionalSdfModel::new(config.encoder.clone(), config.decoder.clone(), config.train.seed)?
        }
        (1, Some(_), _) => {
            return Err(Error::Usage("--init is only meaningful for stage 2".into()))
        }
        (2, Some(init), false) => {
            let (model, _) = load_checkpoint(init)?;
            model
        }
        (2, None, true) => {
            ConditionalSdfModel::new(config.encoder.clone(), config.decoder.clone(), config.train.seed)?
        }
        (2, None, false) => {
            return Err(Error::Usage(
                "stage 2 needs --init CHECKPOINT, or --from-scratch for the semi-only arm".into(),
            ))
        }
        (2, Some(_), true) => {
            return Err(Error::Usage("--init and --from-scratch are mutually exclusive".into()))
        }
        (stage, ..) => return Err(Error::Usage(format!("unknown stage {stage} (expected 1 or 2)"))),
    };

    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        println!(
            "dataset: {} labeled ({:?}), {} unlabeled ({:?}), {} test instances",
            loaded.labeled.instances.len(),
            loaded.labeled.categories(),
            loaded.unlabeled.instances.len(),
            loaded.unlabeled.categories(),
            loaded.test.len()
        );
        return Ok(());
    }

    let _lock = RunLock::acquire(&args.out)?;
    let checkpoint_dir = args.out.join("checkpoints");
    let metrics_path = args.out.join("metrics.csv");
    let mut train_cfg = config.train.clone();
    train_cfg.checkpoint_dir = Some(checkpoint_dir.clone());
    train_cfg.metrics_path = Some(metrics_path.clone());
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    let mut model = model_init;
    let outcome = match args.stage {
        1 => train_stage1(&mut model, &loaded.labeled, &train_cfg)?,
        _ => train_stage2(&mut model, &loaded.labeled, &loaded.unlabeled, &train_cfg)?,
    };

    let checkpoints: Vec<String> = std::fs::read_dir(&checkpoint_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().display().to_string())
        .collect();
    let manifest = RunManifest {
        version: 1,
        command: format!("train --stage {}", args.stage),
        config_hash: config.hash(),
        config,
        data_manifest: manifest_path.display().to_string(),
        data_manifest_sha256: crate::dataset::file_sha256(&manifest_path)?,
        checkpoints,
        metrics: Some(metrics_path.display().to_string()),
        seeds: vec![train_cfg.seed],
        wall_seconds: started.elapsed().as_secs_f64(),
        revision: revision(),
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let last_epoch_mean = outcome.epoch_mean_total.last().map(|(_, m)| *m);
    println!(
        "stage {} done: {} epochs, final epoch mean loss {}",
        args.stage,
        outcome.epochs_run,
        last_epoch_mean.map(|m| m.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    init_threads(args.threads);
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let raw = load_cloud(&args.cloud)?;
    let cloud = if args.normalize {
        let (normalized, transform) = normalize_cloud(&raw);
        log::info!(
            "normalized cloud: center ({}, {}, {}), scale {}",
            transform.center.x,
            transform.center.y,
            transform.center.z,
            transform.scale
        );
        normalized
    } else {
        raw
    };
    let model = if args.refine_iters > 0 {
        refine(&model, &cloud, args.refine_iters, args.refine_lr)?
    } else {
        model
    };
    let field = evaluate_grid(&model, &cloud, args.resolution)?;
    let mesh = marching_cubes(&field, 0.0)?;
    export_mesh(&mesh, &args.out)?;
    println!(
        "wrote {} ({} vertices, {} triangles)",
        args.out.display(),
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    init_threads(args.threads);
    let manifest_path = resolve_manifest_path(&args.data);
    let loaded = load_datasets(&manifest_path)?;
    std::fs::create_dir_all(&args.report)?;
    let recon = ReconSettings {
        resolution: args.resolution,
        chamfer: ChamferConfig {
            samples: args.cd_samples,
            seed: args.seed,
            ..ChamferConfig::default()
        },
    };
    match args.mode {
        EvalMode::Seen | EvalMode::Unseen => {
            let checkpoint = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Usage("seen/unseen evaluation needs --checkpoint".into())
            })?;
            let (model, _) = load_checkpoint(checkpoint)?;
            let (split, instances) = match args.mode {
                EvalMode::Seen => ("seen", labeled_as_test(&loaded)),
                _ => ("unseen", loaded.test.clone()),
            };
            let report = eval_instances(&model, &instances, split, args.seed, &recon)?;
            report.write_json(&args.report.join(format!("{split}.json")))?;
            report.write_csv(&args.report.join(format!("{split}.csv")))?;
            println!("wrote {} rows to {}", report.rows.len(), args.report.display());
        }
        EvalMode::Noise => {
            let checkpoint = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Usage("noise evaluation needs --checkpoint".into())
            })?;
            let (model, _) = load_checkpoint(checkpoint)?;
            let target = loaded
                .test
                .iter()
                .find(|t| t.shape.category_id == "torus")
                .or(loaded.test.first())
                .ok_or_else(|| Error::Dataset("no test instances for the noise sweep".into()))?;
            let noise = NoiseConfig {
                seed: args.seed,
                ..NoiseConfig::default()
            };
            let points = noise_sweep(&model, &target.shape, &target.cloud, &noise, &recon)?;
            let mut csv = String::from("variance,cd,empty\n");
            for p in &points {
                csv.push_str(&format!("{},{},{}\n", p.variance, p.cd, p.empty_reconstruction));
            }
            let path = args.report.join("noise.csv");
            std::fs::write(&path, csv)?;
            println!("wrote {} rows to {}", points.len(), path.display());
        }
        EvalMode::Ablation => {
            let config = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            config.train.validate()?;
            let seen = labeled_as_test(&loaded);
            let spec = BenchmarkSpec {
                labeled: &loaded.labeled,
                unlabeled: &loaded.unlabeled,
                seen: &seen,
                unseen: &loaded.test,
                encoder: config.encoder.clone(),
                decoder: config.decoder.clone(),
                stage1: config.train.clone(),
                stage2: config.train.clone(),
                seeds: vec![args.seed, args.seed + 1, args.seed + 2],
                recon,
                sign_queries: 2000,
            };
            let report = run_ablation(&spec)?;
            report.write_json(&args.report.join("ablation.json"))?;
            report.write_csv(&args.report.join("ablation.csv"))?;
            for s in &report.summaries {
                println!(
                    "{}: seen {}/{} unseen {}/{}{}",
                    s.arm,
                    s.seen_mean,
                    s.seen_median,
                    s.unseen_mean,
                    s.unseen_median,
                    if s.failed { " [failed]" } else { "" }
                );
            }
        }
    }
    Ok(())
}

/// Labeled instances viewed as evaluation targets.
fn labeled_as_test(loaded: &LoadedDataset) -> Vec<TestInstance> {
    loaded
        .labeled
        .instances
        .iter()
        .map(|i| TestInstance {
            id: i.id.clone(),
            shape: i.shape.clone(),
            cloud: i.cloud.clone(),
        })
        .collect()
}

/// Single-model evaluation over a set of instances.
fn eval_instances(
    model: &ConditionalSdfModel,
    instances: &[TestInstance],
    split: &str,
    seed: u64,
    recon: &ReconSettings,
) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    for inst in instances {
        let cd = reconstruction_cd(model, &inst.cloud, &inst.shape, recon)?;
        let sign = sign_accuracy(model, &inst.shape, &inst.cloud, 2000, seed).ok();
        rows.push(ReportRow {
            arm: "model".into(),
            category: inst.shape.category_id.clone(),
            shape_id: inst.id.clone(),
            seed,
            split: split.into(),
            cd,
            sign_acc: sign,
            failed: !cd.is_finite(),
        });
    }
    Ok(ExperimentReport {
        rows,
        summaries: Vec::new(),
        metadata: ReportMetadata {
            config_hash: String::new(),
            seeds: vec![seed],
            revision: revision(),
        },
    })
}


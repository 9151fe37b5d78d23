//! Stage-1 episodic meta-learning, stage-2 semi-supervision, the
//! supervised-only arm, and test-time refinement.
//!
//! Every random choice derives functionally from (seed, stage, epoch, step),
//! so resuming from a checkpoint replays the remaining trajectory bitwise
//! and dropping one loss branch never shifts the other branch's samples.

use super::adam::{adam_step, sgd_step, AdamState};
use super::metrics::{MetricsRow, MetricsSink};
use super::{
    episodic_split, LabeledDataset, LabeledInstance, OptimizerKind, SelfLossKind, TrainConfig,
    UnlabeledDataset,
};
use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::geometry::{sample_queries, sample_queries_from_cloud, PointCloud, QuerySample};
use crate::losses::{pull_loss_graph, self_loss_graph, LossBreakdown, SignSource};
use crate::model::{save_checkpoint, CheckpointExtras, ConditionalSdfModel};
use crate::rng::{derive_seed, rng_for};
use rand::seq::SliceRandom;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Bump when the on-disk run layout changes.
pub const TRAIN_CONFIG_VERSION: u32 = 1;

const TAG_STAGE1: u64 = 0x51a1;
const TAG_STAGE2: u64 = 0x51a2;
const TAG_SUP: u64 = 0x51a5;
const TAG_REFINE: u64 = 0x51af;

/// Optimizer state that can checkpoint and resume.
pub enum OptimizerState {
    Adam {
        state: AdamState,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &ConditionalSdfModel) -> Self {
        match kind {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => OptimizerState::Adam {
                state: AdamState::new(model.params()),
                beta1,
                beta2,
                epsilon,
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptimizerState::Adam { state, .. } => state.step_count,
            OptimizerState::Sgd => 0,
        }
    }

    fn apply(&mut self, model: &mut ConditionalSdfModel, grads: &[Tensor], lr: f64) {
        match self {
            OptimizerState::Adam {
                state,
                beta1,
                beta2,
                epsilon,
            } => adam_step(model.params_mut(), grads, state, lr, *beta1, *beta2, *epsilon),
            OptimizerState::Sgd => sgd_step(model.params_mut(), grads, lr),
        }
    }

    /// Moment tensors for the checkpoint; zeros for SGD.
    pub fn moments(&self, model: &ConditionalSdfModel) -> Vec<(Tensor, Tensor)> {
        match self {
            OptimizerState::Adam { state, .. } => state
                .m
                .iter()
                .cloned()
                .zip(state.v.iter().cloned())
                .collect(),
            OptimizerState::Sgd => model
                .params()
                .iter()
                .map(|p| {
                    (
                        Tensor::zeros(p.tensor.shape().to_vec()),
                        Tensor::zeros(p.tensor.shape().to_vec()),
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds optimizer state from checkpoint extras.
    pub fn from_extras(kind: OptimizerKind, extras: &CheckpointExtras) -> Self {
        match kind {
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => OptimizerState::Adam {
                state: AdamState {
                    step_count: extras.step_count,
                    m: extras.moments.iter().map(|(m, _)| m.clone()).collect(),
                    v: extras.moments.iter().map(|(_, v)| v.clone()).collect(),
                },
                beta1,
                beta2,
                epsilon,
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }
}

/// What a finished (or aborted) run reports back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub stage: &'static str,
    pub epochs_run: usize,
    pub rows: Vec<MetricsRow>,
    /// (epoch, mean total loss) in epoch order.
    pub epoch_mean_total: Vec<(usize, f64)>,
    pub final_checkpoint: Option<PathBuf>,
}

enum Stage {
    Meta,
    Semi,
    SupOnly,
}

impl Stage {
    fn tag(&self) -> u64 {
        match self {
            Stage::Meta => TAG_STAGE1,
            Stage::Semi => TAG_STAGE2,
            Stage::SupOnly => TAG_SUP,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Stage::Meta => "stage1",
            Stage::Semi => "stage2",
            Stage::SupOnly => "sup",
        }
    }

    fn lambda(&self, config: &TrainConfig) -> f64 {
        match self {
            Stage::Meta => config.weights.lambda_m,
            Stage::Semi => config.weights.lambda_s,
            Stage::SupOnly => 0.0,
        }
    }
}

/// Self-supervised side of one step.
enum SelfBatch<'a> {
    /// Stage 1: labeled instance treated as pseudo-unlabeled. Ground-truth
    /// signs pick the loss branch; distance magnitudes come from the
    /// nearest-neighbor geometry only.
    Pseudo(&'a LabeledInstance),
    /// Stage 2 / refinement: a raw cloud, predicted signs.
    Raw(&'a PointCloud),
}

/// Stage 1: episodic meta-learning on the labeled set.
pub fn train_stage1(
    model: &mut ConditionalSdfModel,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut opt = OptimizerState::new(config.optimizer, model);
    train_stage1_from(model, data, config, 0, &mut opt)
}

pub fn train_stage1_from(
    model: &mut ConditionalSdfModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    start_epoch: usize,
    opt: &mut OptimizerState,
) -> Result<TrainOutcome> {
    config.validate()?;
    // Fail fast on datasets the episodic scheme cannot split.
    episodic_split(data, &config.schedule(), 0)?;
    run_epochs(model, Stage::Meta, data, None, config, start_epoch, opt)
}

/// Stage 2: full labeled supervision plus self-supervision on the
/// category-disjoint unlabeled set.
pub fn train_stage2(
    model: &mut ConditionalSdfModel,
    labeled: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut opt = OptimizerState::new(config.optimizer, model);
    train_stage2_from(model, labeled, unlabeled, config, 0, &mut opt)
}

pub fn train_stage2_from(
    model: &mut ConditionalSdfModel,
    labeled: &LabeledDataset,
    unlabeled: &UnlabeledDataset,
    config: &TrainConfig,
    start_epoch: usize,
    opt: &mut OptimizerState,
) -> Result<TrainOutcome> {
    config.validate()?;
    unlabeled.check_disjoint_from(labeled)?;
    run_epochs(
        model,
        Stage::Semi,
        labeled,
        Some(unlabeled),
        config,
        start_epoch,
        opt,
    )
}

/// Supervised-only arm: all labeled instances, no episodes, no
/// self-supervision.
pub fn train_supervised(
    model: &mut ConditionalSdfModel,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut opt = OptimizerState::new(config.optimizer, model);
    run_epochs(model, Stage::SupOnly, data, None, config, 0, &mut opt)
}

fn run_epochs(
    model: &mut ConditionalSdfModel,
    stage: Stage,
    labeled: &LabeledDataset,
    unlabeled: Option<&UnlabeledDataset>,
    config: &TrainConfig,
    start_epoch: usize,
    opt: &mut OptimizerState,
) -> Result<TrainOutcome> {
    let mut sink = match &config.metrics_path {
        Some(path) => MetricsSink::to_file(path)?,
        None => MetricsSink::in_memory(),
    };
    let lambda = stage.lambda(config);
    let tag = stage.tag();
    let mut final_checkpoint = None;

    for epoch in start_epoch..config.epochs {
        // Role assignment for this epoch.
        let (sup_pool, self_pool): (Vec<usize>, Vec<usize>) = match stage {
            Stage::Meta => {
                let split = episodic_split(labeled, &config.schedule(), epoch)?;
                (split.sup_indices, split.self_indices)
            }
            Stage::Semi => (
                (0..labeled.instances.len()).collect(),
                (0..unlabeled.map(|u| u.instances.len()).unwrap_or(0)).collect(),
            ),
            Stage::SupOnly => ((0..labeled.instances.len()).collect(), Vec::new()),
        };
        let mut sup_order = sup_pool.clone();
        sup_order.shuffle(&mut rng_for(config.seed, &[tag, 0x0bd, epoch as u64, 0]));
        let mut self_order = self_pool.clone();
        self_order.shuffle(&mut rng_for(config.seed, &[tag, 0x0bd, epoch as u64, 1]));

        let steps = config
            .steps_per_epoch
            .unwrap_or_else(|| sup_order.len().max(self_order.len()));

        for step in 0..steps {
            let started = Instant::now();
            let sup_inst = &labeled.instances[sup_order[step % sup_order.len()]];
            let self_batch = if config.omit_self_term || self_order.is_empty() {
                None
            } else {
                Some(match stage {
                    Stage::Meta => {
                        SelfBatch::Pseudo(&labeled.instances[self_order[step % self_order.len()]])
                    }
                    Stage::Semi => SelfBatch::Raw(
                        &unlabeled.unwrap().instances[self_order[step % self_order.len()]].cloud,
                    ),
                    Stage::SupOnly => unreachable!("sup-only has no self pool"),
                })
            };
            let step_seed = derive_seed(config.seed, &[tag, epoch as u64, step as u64]);
            let breakdown = train_step(
                model,
                Some(sup_inst),
                self_batch,
                lambda,
                config,
                opt,
                step_seed,
            )
            .map_err(|e| {
                Error::Numeric {
                    op: format!("{} epoch {epoch} step {step}", stage.name()),
                    detail: format!(
                        "{e}; last good checkpoint: {}",
                        final_checkpoint
                            .as_ref()
                            .map(|p: &PathBuf| p.display().to_string())
                            .unwrap_or_else(|| "none".into())
                    ),
                }
            })?;
            sink.record(MetricsRow {
                epoch,
                step,
                stage: stage.name(),
                sup_term: breakdown.sup_term,
                self_term: breakdown.self_term,
                point_term: breakdown.point_term,
                total: breakdown.total,
                lr: config.learning_rate,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
        }

        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch_{epoch:04}.gsdf"));
            save_with_state(model, opt, epoch + 1, config, &path)?;
            final_checkpoint = Some(path);
        }
    }

    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("final.gsdf");
        save_with_state(model, opt, config.epochs, config, &path)?;
        final_checkpoint = Some(path);
    }
    sink.flush()?;
    Ok(TrainOutcome {
        stage: stage.name(),
        epochs_run: config.epochs.saturating_sub(start_epoch),
        epoch_mean_total: sink.epoch_means(),
        rows: sink.rows,
        final_checkpoint,
    })
}

fn save_with_state(
    model: &ConditionalSdfModel,
    opt: &OptimizerState,
    epochs_done: usize,
    config: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let extras = CheckpointExtras {
        epoch: epochs_done,
        step_count: opt.step_count(),
        base_seed: config.seed,
        config_hash: config.hash(),
        moments: opt.moments(model),
    };
    save_checkpoint(model, Some(&extras), path)
}

/// One optimization step over an optional supervised branch and an optional
/// self-supervised branch, combined as sup + lambda * (self + lambda_p * point).
fn train_step(
    model: &mut ConditionalSdfModel,
    sup: Option<&LabeledInstance>,
    self_batch: Option<SelfBatch<'_>>,
    lambda: f64,
    config: &TrainConfig,
    opt: &mut OptimizerState,
    step_seed: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let k = config.queries_per_cloud;
    let n_near = ((k as f64) * config.near_fraction).round() as usize;
    let n_uniform = k - n_near.min(k);
    let n_near = k - n_uniform;

    let mut sup_node: Option<VarId> = None;
    let mut breakdown = LossBreakdown::default();

    if let Some(inst) = sup {
        let samples = sample_queries(
            &inst.shape,
            &inst.cloud,
            n_near,
            n_uniform,
            config.sigma_near,
            derive_seed(step_seed, &[0]),
            true,
        )?;
        let feats = model.encode_graph(&mut tape, &bound, &inst.cloud)?;
        let xs: Vec<_> = samples.iter().map(|s| s.x).collect();
        let queries = model.queries_leaf(&mut tape, &xs, false)?;
        let preds = model.decode_graph(&mut tape, &bound, queries, &feats)?;
        let gts = tape.constant(Tensor::from_vec(
            vec![samples.len(), 1],
            samples.iter().map(|s| s.gt_sdf.expect("labeled")).collect(),
        )?)?;
        let diff = tape.sub(preds, gts)?;
        let absdiff = tape.abs(diff)?;
        let node = tape.reduce_mean(absdiff)?;
        breakdown.sup_term = tape.value(node).item();
        breakdown.sup_count = samples.len();
        sup_node = Some(node);
    }

    let mut self_nodes = None;
    if let Some(batch) = self_batch {
        let (cloud, samples, sign_source): (&PointCloud, Vec<QuerySample>, SignSource) =
            match batch {
                SelfBatch::Pseudo(inst) => (
                    &inst.cloud,
                    sample_queries(
                        &inst.shape,
                        &inst.cloud,
                        n_near,
                        n_uniform,
                        config.sigma_near,
                        derive_seed(step_seed, &[1]),
                        true,
                    )?,
                    SignSource::GroundTruth,
                ),
                SelfBatch::Raw(cloud) => (
                    cloud,
                    sample_queries_from_cloud(
                        cloud,
                        n_near,
                        n_uniform,
                        config.sigma_near,
                        derive_seed(step_seed, &[1]),
                    )?,
                    SignSource::Predicted,
                ),
            };
        let feats = model.encode_graph(&mut tape, &bound, cloud)?;
        let subsample_seed = derive_seed(step_seed, &[3]);
        let nodes = match config.self_loss {
            SelfLossKind::SignedNn => self_loss_graph(
                model,
                &mut tape,
                &bound,
                &feats,
                &samples,
                cloud,
                sign_source,
                config.point_subsample,
                subsample_seed,
            )?,
            SelfLossKind::GradientPull => {
                let feat_values = model.encode(cloud)?;
                pull_loss_graph(
                    model,
                    &mut tape,
                    &bound,
                    &feats,
                    &feat_values,
                    &samples,
                    cloud,
                    config.point_subsample,
                    subsample_seed,
                )?
            }
        };
        breakdown.self_term = tape.value(nodes.self_term).item();
        breakdown.point_term = tape.value(nodes.point_term).item();
        breakdown.self_count = nodes.self_count;
        breakdown.skipped = nodes.skipped;
        breakdown.point_count = nodes.point_count;
        self_nodes = Some(nodes);
    }

    let total = match (sup_node, &self_nodes) {
        (Some(sup), Some(nodes)) => {
            let weighted_point = tape.scalar_mul(nodes.point_term, config.weights.lambda_p)?;
            let inner = tape.add(nodes.self_term, weighted_point)?;
            let weighted = tape.scalar_mul(inner, lambda)?;
            tape.add(sup, weighted)?
        }
        (Some(sup), None) => sup,
        (None, Some(nodes)) => {
            let weighted_point = tape.scalar_mul(nodes.point_term, config.weights.lambda_p)?;
            tape.add(nodes.self_term, weighted_point)?
        }
        (None, None) => return Err(Error::Usage("train_step with no loss branches".into())),
    };
    breakdown.total = tape.value(total).item();

    tape.backward(total)?;
    let grads: Vec<Tensor> = bound
        .ids()
        .iter()
        .zip(model.params().iter())
        .map(|(&id, p)| {
            tape.grad(id)
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
        })
        .collect();
    opt.apply(model, &grads, config.learning_rate);
    Ok(breakdown)
}

/// Knobs for test-time refinement; the defaults mirror the evaluation
/// protocol (5000 raw points, self-supervised only).
#[derive(Debug, Clone, Copy)]
pub struct RefineOptions {
    pub max_points: usize,
    pub queries_per_iter: usize,
    pub near_fraction: f64,
    pub sigma_near: f64,
    pub point_subsample: usize,
    pub lambda_p: f64,
    pub seed: u64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_points: 5000,
            queries_per_iter: 512,
            near_fraction: 0.9,
            sigma_near: 0.05,
            point_subsample: 512,
            lambda_p: 0.01,
            seed: 0,
        }
    }
}

/// Test-time refinement: a few self-supervised steps on the raw cloud with
/// predicted signs. Returns a refined copy; the input model is untouched.
pub fn refine(
    model: &ConditionalSdfModel,
    cloud: &PointCloud,
    iters: usize,
    lr: f64,
) -> Result<ConditionalSdfModel> {
    refine_with(model, cloud, iters, lr, &RefineOptions::default())
}

pub fn refine_with(
    model: &ConditionalSdfModel,
    cloud: &PointCloud,
    iters: usize,
    lr: f64,
    opts: &RefineOptions,
) -> Result<ConditionalSdfModel> {
    let mut refined = model.clone();
    if iters == 0 {
        return Ok(refined);
    }
    if !(lr > 0.0) {
        return Err(Error::Config("refinement learning rate must be positive".into()));
    }
    // Bound the working cloud to max_points, deterministically.
    let working = if cloud.len() > opts.max_points {
        let mut idx: Vec<usize> = (0..cloud.len()).collect();
        idx.shuffle(&mut rng_for(opts.seed, &[TAG_REFINE, 0x77]));
        idx.truncate(opts.max_points);
        idx.sort_unstable();
        PointCloud::new(idx.into_iter().map(|i| cloud.point(i)).collect())?
    } else {
        cloud.clone()
    };

    let k = opts.queries_per_iter;
    let n_near = ((k as f64) * opts.near_fraction).round() as usize;
    let n_uniform = k - n_near.min(k);
    let n_near = k - n_uniform;

    let mut opt = OptimizerState::new(OptimizerKind::default(), &refined);
    let mut last_good = refined.params().clone();
    for iter in 0..iters {
        let result = (|| -> Result<()> {
            let mut tape = Tape::new();
            let bound = refined.bind(&mut tape, true)?;
            let samples = sample_queries_from_cloud(
                &working,
                n_near,
                n_uniform,
                opts.sigma_near,
                derive_seed(opts.seed, &[TAG_REFINE, iter as u64]),
            )?;
            let feats = refined.encode_graph(&mut tape, &bound, &working)?;
            let nodes = self_loss_graph(
                &refined,
                &mut tape,
                &bound,
                &feats,
                &samples,
                &working,
                SignSource::Predicted,
                opts.point_subsample,
                derive_seed(opts.seed, &[TAG_REFINE, iter as u64, 3]),
            )?;
            let weighted_point = tape.scalar_mul(nodes.point_term, opts.lambda_p)?;
            let total = tape.add(nodes.self_term, weighted_point)?;
            tape.backward(total)?;
            let grads: Vec<Tensor> = bound
                .ids()
                .iter()
                .zip(refined.params().iter())
                .map(|(&id, p)| {
                    tape.grad(id)
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
                })
                .collect();
            opt.apply(&mut refined, &grads, lr);
            Ok(())
        })();
        match result {
            Ok(()) => last_good = refined.params().clone(),
            Err(e) => {
                log::warn!("refinement aborted at iter {iter}: {e}; returning best-so-far");
                refined.set_params(last_good);
                return Ok(refined);
            }
        }
    }
    Ok(refined)
}

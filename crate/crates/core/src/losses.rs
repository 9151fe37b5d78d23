//! Training objectives: supervised L1, the signed nearest-neighbor
//! self-supervised loss, the gradient-pull baseline, and the stage
//! combiners.
//!
//! The self-supervised loss estimates a surface point for each query from
//! its predicted distance and the direction to its nearest cloud neighbor:
//! with d = (x - t)/|x - t| and branch sign s, t_hat = x - d*phi when
//! s >= 0 and x + d*phi when s < 0, penalized by |t_hat - t|^2. Expanded
//! along d this residual is exactly (|x - t| - s*phi)^2, which is the form
//! the differentiable graph uses. The branch sign comes either from ground
//! truth (stage 1, where signs are disentangled from the hidden distance
//! labels) or from the current prediction (stage 2 and refinement).

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, QuerySample};
use crate::model::{BoundParams, ConditionalSdfModel, FeatureVars, LatentFeatures};
use crate::rng::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Queries closer than this to their nearest neighbor are skipped: the
/// pull direction d is undefined there.
pub const MIN_NN_DIST: f64 = 1e-9;

/// Loss coefficients. `lambda_m` weights the self-supervised term in stage
/// 1, `lambda_s` in stage 2, and `lambda_p` the zero-level point term
/// inside the self-supervised loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 0.1,
            lambda_s: 0.1,
            lambda_p: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_m < 0.0 || self.lambda_s < 0.0 || self.lambda_p < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Where the branch sign of the surface-point estimate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignSource {
    /// Branch on the current prediction's sign; valid on truly unlabeled
    /// data.
    Predicted,
    /// Branch on the ground-truth sign; requires labels on every sample and
    /// makes wrong-sign predictions strictly more costly.
    GroundTruth,
}

/// Per-term loss accounting for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup_term: f64,
    pub self_term: f64,
    pub point_term: f64,
    pub sup_count: usize,
    /// Non-skipped self-supervised samples; denominators use this, never
    /// the raw batch size.
    pub self_count: usize,
    pub skipped: usize,
    pub point_count: usize,
}

/// Mean L1 error between predictions and ground-truth signed distances.
pub fn loss_sup(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "loss_sup length mismatch: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("loss_sup needs at least one sample".into()));
    }
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Surface-point estimate from the predicted distance and the direction to
/// the nearest neighbor, branch chosen by `sign_source`. Returns `None`
/// when x coincides with its neighbor (sample skipped).
pub fn t_hat_signed(
    x: &Point3,
    t: &Point3,
    phi: f64,
    sign_source: SignSource,
    gt_sign: Option<f64>,
) -> Result<Option<Point3>> {
    let diff = x.sub(t);
    let dist = diff.norm();
    if dist < MIN_NN_DIST {
        return Ok(None);
    }
    let sigma = match sign_source {
        SignSource::Predicted => {
            if phi >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        SignSource::GroundTruth => gt_sign.ok_or_else(|| {
            Error::Usage("ground-truth sign source requires gt_sign".into())
        })?,
    };
    let d = diff.scale(1.0 / dist);
    Ok(Some(if sigma >= 0.0 {
        x.sub(&d.scale(phi))
    } else {
        x.add(&d.scale(phi))
    }))
}

/// Gradient-pull estimate `x - unit(grad) * phi`. Returns `None` when the
/// gradient is too small to normalize (sample skipped).
pub fn t_hat_gradient(x: &Point3, phi: f64, grad: &[f64; 3]) -> Option<Point3> {
    let g = Point3::new(grad[0], grad[1], grad[2]);
    let n = g.norm();
    if n < MIN_NN_DIST {
        return None;
    }
    let u = g.scale(1.0 / n);
    Some(x.sub(&u.scale(phi)))
}

/// Tape handles for the self-supervised loss terms.
pub struct SelfLossNodes {
    /// Scalar: mean squared surface-estimate error over non-skipped samples.
    pub self_term: VarId,
    /// Scalar: mean |prediction| over the cloud-point subsample.
    pub point_term: VarId,
    pub self_count: usize,
    pub skipped: usize,
    pub point_count: usize,
}

/// Builds Eq.-style self-supervised loss nodes on a live tape, with
/// gradients flowing through encoder and decoder.
///
/// `point_subsample` bounds the zero-level term's cost; `subsample_seed`
/// makes the choice of cloud points deterministic per step.
#[allow(clippy::too_many_arguments)]
pub fn self_loss_graph(
    model: &ConditionalSdfModel,
    tape: &mut Tape,
    bound: &BoundParams,
    feats: &FeatureVars,
    samples: &[QuerySample],
    cloud: &PointCloud,
    sign_source: SignSource,
    point_subsample: usize,
    subsample_seed: u64,
) -> Result<SelfLossNodes> {
    let usable: Vec<&QuerySample> = samples.iter().filter(|s| s.nn_dist >= MIN_NN_DIST).collect();
    let skipped = samples.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Loss(
            "all self-supervised samples were skipped (queries coincide with the cloud)".into(),
        ));
    }
    if sign_source == SignSource::GroundTruth && usable.iter().any(|s| s.gt_sdf.is_none()) {
        return Err(Error::Dataset(
            "ground-truth sign source requires labels on every sample".into(),
        ));
    }

    let xs: Vec<Point3> = usable.iter().map(|s| s.x).collect();
    let queries = model.queries_leaf(tape, &xs, false)?;
    let preds = model.decode_graph(tape, bound, queries, feats)?;

    // Branch signs: constants of the step. Under the predicted source the
    // branch follows the current forward values.
    let sigma: Vec<f64> = match sign_source {
        SignSource::GroundTruth => usable.iter().map(|s| s.gt_sign().unwrap()).collect(),
        SignSource::Predicted => tape
            .value(preds)
            .data()
            .iter()
            .map(|&p| if p >= 0.0 { 1.0 } else { -1.0 })
            .collect(),
    };
    let k = usable.len();
    let sigma_t = tape.constant(Tensor::from_vec(vec![k, 1], sigma)?)?;
    let nn_dist_t = tape.constant(Tensor::from_vec(
        vec![k, 1],
        usable.iter().map(|s| s.nn_dist).collect(),
    )?)?;
    // (|x - t| - sigma * phi)^2 == |t_hat - t|^2 for the selected branch.
    let signed_pred = tape.mul(sigma_t, preds)?;
    let residual = tape.sub(nn_dist_t, signed_pred)?;
    let sq = tape.square(residual)?;
    let self_term = tape.reduce_mean(sq)?;

    let (point_term, point_count) =
        point_term_graph(model, tape, bound, feats, cloud, point_subsample, subsample_seed)?;

    Ok(SelfLossNodes {
        self_term,
        point_term,
        self_count: k,
        skipped,
        point_count,
    })
}

/// Gradient-pull variant (the internal baseline): `t_hat = x - unit(grad) * phi`
/// with the input gradient treated as a constant of the step (first-order
/// only). `|t_hat - t|^2` expands to `|x-t|^2 - 2 (u . (x-t)) phi + phi^2`.
#[allow(clippy::too_many_arguments)]
pub fn pull_loss_graph(
    model: &ConditionalSdfModel,
    tape: &mut Tape,
    bound: &BoundParams,
    feats: &FeatureVars,
    feat_values: &LatentFeatures,
    samples: &[QuerySample],
    cloud: &PointCloud,
    point_subsample: usize,
    subsample_seed: u64,
) -> Result<SelfLossNodes> {
    let candidates: Vec<&QuerySample> =
        samples.iter().filter(|s| s.nn_dist >= MIN_NN_DIST).collect();
    if candidates.is_empty() {
        return Err(Error::Loss("all pull-baseline samples were skipped".into()));
    }
    let xs: Vec<Point3> = candidates.iter().map(|s| s.x).collect();
    let grads = model.input_gradient_batch(&xs, feat_values)?;

    let mut usable = Vec::with_capacity(candidates.len());
    let mut units = Vec::with_capacity(candidates.len());
    for (s, g) in candidates.iter().zip(&grads) {
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n >= MIN_NN_DIST {
            usable.push(*s);
            units.push([g[0] / n, g[1] / n, g[2] / n]);
        }
    }
    let skipped = samples.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Loss("all pull-baseline gradients vanished".into()));
    }

    let k = usable.len();
    let xs: Vec<Point3> = usable.iter().map(|s| s.x).collect();
    let queries = model.queries_leaf(tape, &xs, false)?;
    let preds = model.decode_graph(tape, bound, queries, feats)?;

    let mut a = Vec::with_capacity(k); // |x - t|^2
    let mut b2 = Vec::with_capacity(k); // 2 (u . (x - t))
    for (s, u) in usable.iter().zip(&units) {
        let diff = s.x.sub(&s.nn);
        a.push(diff.dot(&diff));
        b2.push(2.0 * (u[0] * diff.x + u[1] * diff.y + u[2] * diff.z));
    }
    let a_t = tape.constant(Tensor::from_vec(vec![k, 1], a)?)?;
    let b2_t = tape.constant(Tensor::from_vec(vec![k, 1], b2)?)?;
    let cross = tape.mul(b2_t, preds)?;
    let sq_pred = tape.square(preds)?;
    let lin = tape.sub(a_t, cross)?;
    let per_sample = tape.add(lin, sq_pred)?;
    let self_term = tape.reduce_mean(per_sample)?;

    let (point_term, point_count) =
        point_term_graph(model, tape, bound, feats, cloud, point_subsample, subsample_seed)?;

    Ok(SelfLossNodes {
        self_term,
        point_term,
        self_count: k,
        skipped,
        point_count,
    })
}

/// Zero-level term: mean |prediction| over a deterministic subsample of the
/// conditioning cloud.
fn point_term_graph(
    model: &ConditionalSdfModel,
    tape: &mut Tape,
    bound: &BoundParams,
    feats: &FeatureVars,
    cloud: &PointCloud,
    point_subsample: usize,
    subsample_seed: u64,
) -> Result<(VarId, usize)> {
    let n = cloud.len();
    let take = point_subsample.max(1).min(n);
    let pts: Vec<Point3> = if take == n {
        cloud.points().to_vec()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(subsample_seed, &[0x90]));
        idx.truncate(take);
        idx.sort_unstable();
        idx.into_iter().map(|i| cloud.point(i)).collect()
    };
    let q = model.queries_leaf(tape, &pts, false)?;
    let preds = model.decode_graph(tape, bound, q, feats)?;
    let absd = tape.abs(preds)?;
    Ok((tape.reduce_mean(absd)?, take))
}

/// Value-level self-supervised loss for a cached model state. The
/// breakdown's total is Eq. (7)'s self loss: self_term + lambda_p * point_term.
pub fn loss_self(
    model: &ConditionalSdfModel,
    features: &LatentFeatures,
    samples: &[QuerySample],
    cloud: &PointCloud,
    sign_source: SignSource,
    weights: &LossWeights,
    point_subsample: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let fv = model.features_to_vars(&mut tape, features)?;
    let nodes = self_loss_graph(
        model,
        &mut tape,
        &bound,
        &fv,
        samples,
        cloud,
        sign_source,
        point_subsample,
        0,
    )?;
    let self_term = tape.value(nodes.self_term).item();
    let point_term = tape.value(nodes.point_term).item();
    Ok(LossBreakdown {
        total: self_term + weights.lambda_p * point_term,
        sup_term: 0.0,
        self_term,
        point_term,
        sup_count: 0,
        self_count: nodes.self_count,
        skipped: nodes.skipped,
        point_count: nodes.point_count,
    })
}

/// Stage-1 combiner: total = sup + lambda_m * (self + lambda_p * point).
pub fn loss_meta(sup_term: f64, sup_count: usize, self_part: &LossBreakdown, weights: &LossWeights) -> LossBreakdown {
    combine(sup_term, sup_count, self_part, weights.lambda_m, weights.lambda_p)
}

/// Stage-2 combiner: identical algebra with lambda_s.
pub fn loss_semi(sup_term: f64, sup_count: usize, self_part: &LossBreakdown, weights: &LossWeights) -> LossBreakdown {
    combine(sup_term, sup_count, self_part, weights.lambda_s, weights.lambda_p)
}

fn combine(
    sup_term: f64,
    sup_count: usize,
    self_part: &LossBreakdown,
    lambda: f64,
    lambda_p: f64,
) -> LossBreakdown {
    LossBreakdown {
        total: sup_term + lambda * (self_part.self_term + lambda_p * self_part.point_term),
        sup_term,
        self_term: self_part.self_term,
        point_term: self_part.point_term,
        sup_count,
        self_count: self_part.self_count,
        skipped: self_part.skipped,
        point_count: self_part.point_count,
    }
}

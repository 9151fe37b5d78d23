//! The conditional SDF network: a point-cloud encoder producing
//! query-conditioned features and an MLP decoder predicting signed
//! distance.
//!
//! Two encoder variants share one decoder contract:
//! - `GlobalLatent`: per-point MLP max-pooled into a single latent vector;
//! - `GridLocal`: per-point features scatter-averaged onto a lattice and
//!   gathered trilinearly at each query, concatenated with the pooled
//!   global vector. Local conditioning is what lets the decoder transfer
//!   to unseen categories.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    GlobalLatent,
    GridLocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Hidden widths of the per-point MLP; a final linear maps to
    /// `latent_dim`.
    pub point_mlp_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Lattice resolution per axis for the grid-local variant.
    pub grid_resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::GridLocal,
            point_mlp_widths: vec![64, 128, 256],
            latent_dim: 256,
            grid_resolution: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Hidden layer widths; activations are relu, output is linear.
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        // Desk default; the 8x512 configuration used for parity runs is a
        // config choice away.
        Self {
            hidden: vec![128, 128, 128, 128],
        }
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat parameter storage in declaration order; the checkpoint format and
/// the optimizer both key off this order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Cached conditioning features for one cloud, reused across the many
/// queries of a grid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentFeatures {
    Global {
        /// `[1, L]`
        latent: Tensor,
    },
    GridLocal {
        /// `[res^3, L]`
        grid: Tensor,
        /// `[1, L]`
        global: Tensor,
        resolution: usize,
    },
}

/// Tape-resident feature handles, used when gradients must flow through
/// the encoder.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub global: VarId,
    pub grid: Option<VarId>,
}

/// Parameter leaves bound onto a tape, aligned with the `ParamStore`.
pub struct BoundParams {
    ids: Vec<VarId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

/// Encoder + decoder parameters realizing `predict(x, cloud) = s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSdfModel {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    params: ParamStore,
    pub init_seed: u64,
}

impl ConditionalSdfModel {
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        if encoder.point_mlp_widths.is_empty() {
            return Err(Error::Config("encoder needs at least one MLP width".into()));
        }
        if encoder.latent_dim == 0 {
            return Err(Error::Config("latent dim must be positive".into()));
        }
        if encoder.grid_resolution < 4 {
            return Err(Error::Config("grid resolution must be >= 4".into()));
        }
        if decoder.hidden.is_empty() {
            return Err(Error::Config("decoder needs at least one hidden layer".into()));
        }
        let mut params = ParamStore::default();
        let mut layer = 0u64;
        let mut push_linear = |params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            // Kaiming-style uniform fan-in init; biases start at zero.
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = rng_for(seed, &[0x1417, layer]);
            layer += 1;
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            params.push(
                format!("{name}.w"),
                Tensor::from_vec(vec![fan_in, fan_out], w).expect("sized"),
            );
            params.push(format!("{name}.b"), Tensor::vector(vec![0.0; fan_out]));
        };

        let mut dims = vec![3];
        dims.extend_from_slice(&encoder.point_mlp_widths);
        dims.push(encoder.latent_dim);
        for i in 0..dims.len() - 1 {
            push_linear(&mut params, &format!("enc.mlp{i}"), dims[i], dims[i + 1]);
        }

        let feat_dim = match encoder.variant {
            EncoderVariant::GlobalLatent => encoder.latent_dim,
            EncoderVariant::GridLocal => 2 * encoder.latent_dim,
        };
        let mut ddims = vec![3 + feat_dim];
        ddims.extend_from_slice(&decoder.hidden);
        ddims.push(1);
        for i in 0..ddims.len() - 1 {
            push_linear(&mut params, &format!("dec.mlp{i}"), ddims[i], ddims[i + 1]);
        }

        Ok(Self {
            encoder,
            decoder,
            params,
            init_seed: seed,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    /// Width of the conditioning feature handed to the decoder.
    pub fn feature_dim(&self) -> usize {
        match self.encoder.variant {
            EncoderVariant::GlobalLatent => self.encoder.latent_dim,
            EncoderVariant::GridLocal => 2 * self.encoder.latent_dim,
        }
    }

    /// Binds every parameter as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundParams> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            ids.push(tape.leaf(p.tensor.clone(), requires_grad)?);
        }
        Ok(BoundParams { ids })
    }

    fn encoder_layer_count(&self) -> usize {
        self.encoder.point_mlp_widths.len() + 1
    }

    /// Runs the encoder on the tape. The cloud is re-ordered canonically so
    /// pooling reductions are exactly permutation invariant.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cloud: &PointCloud,
    ) -> Result<FeatureVars> {
        let pts = cloud.canonical_order();
        let n = pts.len();
        let mut data = Vec::with_capacity(n * 3);
        for p in &pts {
            data.extend_from_slice(&p.as_array());
        }
        let mut h = tape.constant(Tensor::from_vec(vec![n, 3], data)?)?;
        let layers = self.encoder_layer_count();
        for i in 0..layers {
            let w = bound.ids[2 * i];
            let b = bound.ids[2 * i + 1];
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        let global = tape.max_pool_over_points(h)?;
        let grid = match self.encoder.variant {
            EncoderVariant::GlobalLatent => None,
            EncoderVariant::GridLocal => {
                Some(tape.grid_scatter_mean(h, &pts, self.encoder.grid_resolution)?)
            }
        };
        Ok(FeatureVars { global, grid })
    }

    /// Runs the decoder on the tape for a `[q,3]` batch of queries.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        queries: VarId,
        feats: &FeatureVars,
    ) -> Result<VarId> {
        let q = tape.value(queries).rows();
        let feat_q = match (self.encoder.variant, feats.grid) {
            (EncoderVariant::GlobalLatent, _) => tape.repeat_rows(feats.global, q)?,
            (EncoderVariant::GridLocal, Some(grid)) => {
                let local =
                    tape.grid_gather_trilinear(grid, queries, self.encoder.grid_resolution)?;
                let global = tape.repeat_rows(feats.global, q)?;
                tape.concat(&[local, global], 1)?
            }
            (EncoderVariant::GridLocal, None) => {
                return Err(Error::Usage(
                    "grid-local decode needs grid features from this model's encode".into(),
                ))
            }
        };
        let mut h = tape.concat(&[queries, feat_q], 1)?;
        let offset = 2 * self.encoder_layer_count();
        let layers = self.decoder.hidden.len() + 1;
        for i in 0..layers {
            let w = bound.ids[offset + 2 * i];
            let b = bound.ids[offset + 2 * i + 1];
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Rebinds cached features as constants on a fresh tape.
    pub fn features_to_vars(&self, tape: &mut Tape, feats: &LatentFeatures) -> Result<FeatureVars> {
        match feats {
            LatentFeatures::Global { latent } => Ok(FeatureVars {
                global: tape.constant(latent.clone())?,
                grid: None,
            }),
            LatentFeatures::GridLocal {
                grid,
                global,
                resolution,
            } => {
                if *resolution != self.encoder.grid_resolution {
                    return Err(Error::Usage(
                        "features were encoded at a different grid resolution".into(),
                    ));
                }
                Ok(FeatureVars {
                    global: tape.constant(global.clone())?,
                    grid: Some(tape.constant(grid.clone())?),
                })
            }
        }
    }

    /// Encodes a cloud into cacheable conditioning features.
    pub fn encode(&self, cloud: &PointCloud) -> Result<LatentFeatures> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let feats = self.encode_graph(&mut tape, &bound, cloud)?;
        Ok(match (self.encoder.variant, feats.grid) {
            (EncoderVariant::GlobalLatent, _) => LatentFeatures::Global {
                latent: tape.value(feats.global).clone(),
            },
            (EncoderVariant::GridLocal, Some(grid)) => LatentFeatures::GridLocal {
                grid: tape.value(grid).clone(),
                global: tape.value(feats.global).clone(),
                resolution: self.encoder.grid_resolution,
            },
            (EncoderVariant::GridLocal, None) => unreachable!(),
        })
    }

    /// Predicted signed distance at one query.
    pub fn predict(&self, x: &Point3, feats: &LatentFeatures) -> Result<f64> {
        Ok(self.predict_batch(std::slice::from_ref(x), feats)?[0])
    }

    /// Predicted signed distances for a batch of queries.
    pub fn predict_batch(&self, xs: &[Point3], feats: &LatentFeatures) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let fv = self.features_to_vars(&mut tape, feats)?;
        let q = self.queries_leaf(&mut tape, xs, false)?;
        let out = self.decode_graph(&mut tape, &bound, q, &fv)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Exact reverse-mode gradient of the prediction with respect to the
    /// query coordinates, one 3-vector per query.
    pub fn input_gradient_batch(
        &self,
        xs: &[Point3],
        feats: &LatentFeatures,
    ) -> Result<Vec<[f64; 3]>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let fv = self.features_to_vars(&mut tape, feats)?;
        let q = self.queries_leaf(&mut tape, xs, true)?;
        let out = self.decode_graph(&mut tape, &bound, q, &fv)?;
        // Each prediction depends only on its own query row, so the gradient
        // of the sum recovers every per-query gradient in one backward pass.
        let total = tape.reduce_sum(out)?;
        tape.backward(total)?;
        let g = tape
            .grad(q)
            .ok_or_else(|| Error::Usage("query gradient unavailable".into()))?;
        Ok(g
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    pub fn input_gradient(&self, x: &Point3, feats: &LatentFeatures) -> Result<[f64; 3]> {
        Ok(self.input_gradient_batch(std::slice::from_ref(x), feats)?[0])
    }

    pub fn queries_leaf(
        &self,
        tape: &mut Tape,
        xs: &[Point3],
        requires_grad: bool,
    ) -> Result<VarId> {
        let mut data = Vec::with_capacity(xs.len() * 3);
        for x in xs {
            data.extend_from_slice(&x.as_array());
        }
        tape.leaf(Tensor::from_vec(vec![xs.len(), 3], data)?, requires_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_surface, Pose, ShapeFamily, ShapeInstance};
    use rand::seq::SliceRandom;

    fn small_model(variant: EncoderVariant, seed: u64) -> ConditionalSdfModel {
        ConditionalSdfModel::new(
            EncoderConfig {
                variant,
                point_mlp_widths: vec![16, 32],
                latent_dim: 16,
                grid_resolution: 6,
            },
            DecoderConfig {
                hidden: vec![32, 32],
            },
            seed,
        )
        .unwrap()
    }

    fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "s")
            .unwrap();
        sample_surface(&s, n, seed).unwrap()
    }

    #[test]
    fn encode_is_bitwise_permutation_invariant() {
        for variant in [EncoderVariant::GlobalLatent, EncoderVariant::GridLocal] {
            let model = small_model(variant, 3);
            let cloud = sphere_cloud(200, 1);
            let mut shuffled = cloud.points().to_vec();
            shuffled.shuffle(&mut crate::rng::rng_for(9, &[2]));
            let permuted = PointCloud::new(shuffled).unwrap();
            let a = model.encode(&cloud).unwrap();
            let b = model.encode(&permuted).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicating_points_keeps_global_latent_features() {
        let model = small_model(EncoderVariant::GlobalLatent, 3);
        let cloud = sphere_cloud(100, 1);
        let mut doubled = cloud.points().to_vec();
        doubled.extend_from_slice(cloud.points());
        let doubled = PointCloud::new(doubled).unwrap();
        assert_eq!(model.encode(&cloud).unwrap(), model.encode(&doubled).unwrap());
    }

    #[test]
    fn different_clouds_give_different_features() {
        let model = small_model(EncoderVariant::GridLocal, 3);
        let sphere = sphere_cloud(200, 1);
        let b = ShapeInstance::new(
            ShapeFamily::Box {
                half_extents: [0.4; 3],
            },
            Pose::default(),
            "b",
        )
        .unwrap();
        let box_cloud = sample_surface(&b, 200, 1).unwrap();
        let fa = model.encode(&sphere).unwrap();
        let fb = model.encode(&box_cloud).unwrap();
        let gap = match (&fa, &fb) {
            (
                LatentFeatures::GridLocal { global: a, .. },
                LatentFeatures::GridLocal { global: b, .. },
            ) => a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
            _ => unreachable!(),
        };
        assert!(gap > 0.0);
    }

    #[test]
    fn untrained_predictions_are_bounded() {
        for variant in [EncoderVariant::GlobalLatent, EncoderVariant::GridLocal] {
            let model = small_model(variant, 7);
            let cloud = sphere_cloud(200, 1);
            let feats = model.encode(&cloud).unwrap();
            for p in [
                Point3::zero(),
                Point3::new(0.9, -0.7, 0.3),
                Point3::new(-1.0, 1.0, -1.0),
            ] {
                let s = model.predict(&p, &feats).unwrap();
                assert!(s.is_finite() && s.abs() < 10.0, "prediction {s}");
            }
        }
    }

    #[test]
    fn batch_predict_matches_pointwise() {
        let model = small_model(EncoderVariant::GridLocal, 7);
        let cloud = sphere_cloud(150, 1);
        let feats = model.encode(&cloud).unwrap();
        let xs = [
            Point3::new(0.1, 0.2, 0.3),
            Point3::new(-0.5, 0.0, 0.25),
            Point3::new(0.8, -0.8, 0.0),
        ];
        let batch = model.predict_batch(&xs, &feats).unwrap();
        for (x, &b) in xs.iter().zip(&batch) {
            assert_eq!(model.predict(x, &feats).unwrap(), b);
        }
    }

    #[test]
    fn global_latent_feature_is_constant_in_x() {
        let model = small_model(EncoderVariant::GlobalLatent, 5);
        let cloud = sphere_cloud(100, 1);
        let feats = model.encode(&cloud).unwrap();
        // Gradient structure depends on x only through the decoder input: two
        // queries with the same coordinates see identical gradients.
        let g1 = model.input_gradient(&Point3::new(0.3, 0.1, -0.2), &feats).unwrap();
        let g2 = model.input_gradient(&Point3::new(0.3, 0.1, -0.2), &feats).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn zeroed_last_layer_kills_input_gradient() {
        let mut model = small_model(EncoderVariant::GridLocal, 5);
        let n = model.params().len();
        // Last weight + bias belong to the decoder output layer.
        for i in [n - 2, n - 1] {
            let t = model.params_mut().tensor_mut(i);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let cloud = sphere_cloud(100, 1);
        let feats = model.encode(&cloud).unwrap();
        let g = model.input_gradient(&Point3::new(0.2, -0.1, 0.4), &feats).unwrap();
        assert_eq!(g, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = small_model(EncoderVariant::GridLocal, 11);
        let cloud = sphere_cloud(200, 2);
        let feats = model.encode(&cloud).unwrap();
        let mut rng = crate::rng::rng_for(23, &[1]);
        let mut checked = 0;
        while checked < 5 {
            let x = Point3::new(
                rng.random::<f64>() * 1.6 - 0.8,
                rng.random::<f64>() * 1.6 - 0.8,
                rng.random::<f64>() * 1.6 - 0.8,
            );
            let g = model.input_gradient(&x, &feats).unwrap();
            let h = 1e-5;
            let mut ok = true;
            for a in 0..3 {
                let mut hi = x;
                let mut lo = x;
                match a {
                    0 => {
                        hi.x += h;
                        lo.x -= h;
                    }
                    1 => {
                        hi.y += h;
                        lo.y -= h;
                    }
                    _ => {
                        hi.z += h;
                        lo.z -= h;
                    }
                }
                let fd = (model.predict(&hi, &feats).unwrap()
                    - model.predict(&lo, &feats).unwrap())
                    / (2.0 * h);
                // Skip points straddling relu or lattice-cell kinks.
                if (g[a] - fd).abs() / g[a].abs().max(1.0) > 1e-4 {
                    ok = false;
                }
            }
            if ok {
                checked += 1;
            }
        }
    }

    #[test]
    fn prediction_is_continuous() {
        let model = small_model(EncoderVariant::GridLocal, 13);
        let cloud = sphere_cloud(200, 2);
        let feats = model.encode(&cloud).unwrap();
        let x = Point3::new(0.31, -0.12, 0.44);
        let s0 = model.predict(&x, &feats).unwrap();
        let s1 = model
            .predict(&Point3::new(x.x + 1e-6, x.y, x.z), &feats)
            .unwrap();
        assert!((s0 - s1).abs() <= 1e-3);
    }
}

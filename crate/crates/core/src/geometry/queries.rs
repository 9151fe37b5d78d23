//! Query-point sampling around a conditioning cloud.

use super::{exact_sdf, sample_surface, KdTree, Point3, PointCloud, ShapeInstance};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;
use rand_distr::StandardNormal;

/// A query coordinate with optional ground-truth signed distance and its
/// nearest neighbor in the conditioning cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub x: Point3,
    /// Ground-truth signed distance; absent on unlabeled data.
    pub gt_sdf: Option<f64>,
    /// Nearest cloud point.
    pub nn: Point3,
    pub nn_dist: f64,
    pub nn_index: usize,
}

impl QuerySample {
    /// Sign of the ground-truth distance, if labeled. Zero counts as
    /// nonnegative.
    pub fn gt_sign(&self) -> Option<f64> {
        self.gt_sdf.map(|d| if d >= 0.0 { 1.0 } else { -1.0 })
    }
}

/// Samples `n_near` near-surface queries (fresh surface points perturbed by
/// isotropic Gaussian noise of std `sigma_near`) plus `n_uniform` queries
/// uniform in [-1,1]^3. Ground truth is attached iff `with_labels`; nearest
/// neighbors against `cloud` are always attached.
pub fn sample_queries(
    shape: &ShapeInstance,
    cloud: &PointCloud,
    n_near: usize,
    n_uniform: usize,
    sigma_near: f64,
    seed: u64,
    with_labels: bool,
) -> Result<Vec<QuerySample>> {
    if n_near + n_uniform == 0 {
        return Err(Error::Argument("need at least one query".into()));
    }
    if !(sigma_near > 0.0) {
        return Err(Error::Argument("sigma_near must be positive".into()));
    }
    let tree = KdTree::build(cloud)?;
    let mut out = Vec::with_capacity(n_near + n_uniform);
    if n_near > 0 {
        let base = sample_surface(shape, n_near, crate::rng::derive_seed(seed, &[0x51]))?;
        let mut rng = rng_for(seed, &[0x52]);
        for p in base.points() {
            let x = perturb(p, sigma_near, &mut rng);
            out.push(annotate(shape, &tree, x, with_labels));
        }
    }
    let mut rng = rng_for(seed, &[0x53]);
    for _ in 0..n_uniform {
        let x = uniform_cube(&mut rng);
        out.push(annotate(shape, &tree, x, with_labels));
    }
    Ok(out)
}

/// Unlabeled variant for raw clouds without a ground-truth operator:
/// near-surface queries perturb cloud points themselves. `gt_sdf` is never
/// attached, by construction.
pub fn sample_queries_from_cloud(
    cloud: &PointCloud,
    n_near: usize,
    n_uniform: usize,
    sigma_near: f64,
    seed: u64,
) -> Result<Vec<QuerySample>> {
    if n_near + n_uniform == 0 {
        return Err(Error::Argument("need at least one query".into()));
    }
    if !(sigma_near > 0.0) {
        return Err(Error::Argument("sigma_near must be positive".into()));
    }
    let tree = KdTree::build(cloud)?;
    let mut out = Vec::with_capacity(n_near + n_uniform);
    let mut rng = rng_for(seed, &[0x54]);
    for k in 0..n_near {
        let p = cloud.point((rng.random::<u64>() % cloud.len() as u64) as usize);
        let x = perturb(&p, sigma_near, &mut rng);
        let (nn, nn_dist, nn_index) = tree.nearest(&x);
        out.push(QuerySample {
            x,
            gt_sdf: None,
            nn,
            nn_dist,
            nn_index,
        });
        let _ = k;
    }
    let mut rng = rng_for(seed, &[0x55]);
    for _ in 0..n_uniform {
        let x = uniform_cube(&mut rng);
        let (nn, nn_dist, nn_index) = tree.nearest(&x);
        out.push(QuerySample {
            x,
            gt_sdf: None,
            nn,
            nn_dist,
            nn_index,
        });
    }
    Ok(out)
}

fn perturb(p: &Point3, sigma: f64, rng: &mut impl Rng) -> Point3 {
    Point3::new(
        p.x + sigma * rng.sample::<f64, _>(StandardNormal),
        p.y + sigma * rng.sample::<f64, _>(StandardNormal),
        p.z + sigma * rng.sample::<f64, _>(StandardNormal),
    )
}

fn uniform_cube(rng: &mut impl Rng) -> Point3 {
    Point3::new(
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
        rng.random::<f64>() * 2.0 - 1.0,
    )
}

fn annotate(shape: &ShapeInstance, tree: &KdTree, x: Point3, with_labels: bool) -> QuerySample {
    let (nn, nn_dist, nn_index) = tree.nearest(&x);
    QuerySample {
        x,
        gt_sdf: with_labels.then(|| exact_sdf(shape, &x)),
        nn,
        nn_dist,
        nn_index,
    }
}

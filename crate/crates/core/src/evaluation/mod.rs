//! Quantitative evaluation: Chamfer distance, sign accuracy, the
//! noise-robustness sweep, and the four-arm ablation harness.

mod ablation;

pub use ablation::{
    run_ablation, AblationArm, ArmSummary, BenchmarkSpec, ExperimentReport, ReportMetadata,
    ReportRow,
};

use crate::error::{Error, Result};
use crate::geometry::{
    sample_queries, sample_surface, KdTree, Point3, PointCloud, ShapeInstance,
};
use crate::model::ConditionalSdfModel;
use crate::reconstruction::{evaluate_grid, marching_cubes, TriangleMesh};
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sentinel for arms whose reconstruction produced no surface.
pub const CD_SENTINEL: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferFlavor {
    /// Sum of mean squared nearest-neighbor distances, both directions.
    #[default]
    Squared,
    /// Same with plain distances, for cross-paper comparison.
    Unsquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferConfig {
    /// Points sampled per mesh.
    pub samples: usize,
    pub seed: u64,
    pub flavor: ChamferFlavor,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self {
            samples: 30_000,
            seed: 0,
            flavor: ChamferFlavor::Squared,
        }
    }
}

/// Chamfer distance between two clouds, kd-tree accelerated.
pub fn chamfer(a: &PointCloud, b: &PointCloud, flavor: ChamferFlavor) -> f64 {
    let dir = |from: &PointCloud, to: &PointCloud| -> f64 {
        let tree = KdTree::build(to).expect("nonempty cloud");
        let sum: f64 = from
            .points()
            .iter()
            .map(|p| {
                let (_, d, _) = tree.nearest(p);
                match flavor {
                    ChamferFlavor::Squared => d * d,
                    ChamferFlavor::Unsquared => d,
                }
            })
            .sum();
        sum / from.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// O(n^2) reference used to validate the accelerated path.
pub fn chamfer_brute(a: &PointCloud, b: &PointCloud, flavor: ChamferFlavor) -> f64 {
    let dir = |from: &PointCloud, to: &PointCloud| -> f64 {
        let sum: f64 = from
            .points()
            .iter()
            .map(|p| {
                let d2 = to
                    .points()
                    .iter()
                    .map(|q| p.dist2(q))
                    .fold(f64::INFINITY, f64::min);
                match flavor {
                    ChamferFlavor::Squared => d2,
                    ChamferFlavor::Unsquared => d2.sqrt(),
                }
            })
            .sum();
        sum / from.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// Area-weighted surface sampling of a mesh: triangles drawn by area,
/// points uniform in barycentric coordinates. Deterministic per seed.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.is_empty() {
        return Err(Error::Evaluation("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::Evaluation("mesh has zero surface area".into()));
    }
    let mut rng = rng_for(seed, &[0x3e5a]);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c < u).min(mesh.triangles.len() - 1);
        let t = mesh.triangles[idx];
        let a = mesh.vertices[t[0] as usize];
        let b = mesh.vertices[t[1] as usize];
        let c = mesh.vertices[t[2] as usize];
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        pts.push(Point3::new(
            wa * a.x + wb * b.x + wc * c.x,
            wa * a.y + wb * b.y + wc * c.y,
            wa * a.z + wb * b.z + wc * c.z,
        ));
    }
    PointCloud::new(pts)
}

/// Fraction of mixed near-surface/uniform queries on which the model's sign
/// matches the oracle, excluding the |sdf| < 1e-3 band around the surface.
pub fn sign_accuracy(
    model: &ConditionalSdfModel,
    shape: &ShapeInstance,
    cloud: &PointCloud,
    n_queries: usize,
    seed: u64,
) -> Result<f64> {
    let feats = model.encode(cloud)?;
    sign_accuracy_with(
        |xs| model.predict_batch(xs, &feats),
        shape,
        cloud,
        n_queries,
        seed,
    )
}

/// Generic form taking any batch predictor; lets tests plug in oracles.
pub fn sign_accuracy_with(
    predict: impl Fn(&[Point3]) -> Result<Vec<f64>>,
    shape: &ShapeInstance,
    cloud: &PointCloud,
    n_queries: usize,
    seed: u64,
) -> Result<f64> {
    let n_near = (n_queries as f64 * 0.9).round() as usize;
    let n_uniform = n_queries - n_near.min(n_queries);
    let n_near = n_queries - n_uniform;
    let queries = sample_queries(shape, cloud, n_near, n_uniform, 0.05, seed, true)?;
    let xs: Vec<Point3> = queries.iter().map(|q| q.x).collect();
    let preds = predict(&xs)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (q, pred) in queries.iter().zip(&preds) {
        let gt = q.gt_sdf.expect("labeled queries");
        if gt.abs() < 1e-3 {
            continue;
        }
        total += 1;
        if (gt >= 0.0) == (*pred >= 0.0) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Evaluation(
            "all queries fell inside the surface exclusion band".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

/// Settings for reconstruct-then-measure evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconSettings {
    pub resolution: usize,
    pub chamfer: ChamferConfig,
}

impl Default for ReconSettings {
    fn default() -> Self {
        Self {
            resolution: 128,
            chamfer: ChamferConfig::default(),
        }
    }
}

/// Reconstructs from `cloud` and measures CD against surface samples of the
/// oracle shape. An empty reconstruction yields the +inf sentinel.
pub fn reconstruction_cd(
    model: &ConditionalSdfModel,
    cloud: &PointCloud,
    shape: &ShapeInstance,
    settings: &ReconSettings,
) -> Result<f64> {
    let field = evaluate_grid(model, cloud, settings.resolution)?;
    let mesh = marching_cubes(&field, 0.0)?;
    if mesh.is_empty() {
        return Ok(CD_SENTINEL);
    }
    let recon = sample_mesh_surface(&mesh, settings.chamfer.samples, settings.chamfer.seed)?;
    let truth = sample_surface(
        shape,
        settings.chamfer.samples,
        crate::rng::derive_seed(settings.chamfer.seed, &[0x6f]),
    )?;
    Ok(chamfer(&recon, &truth, settings.chamfer.flavor))
}

/// Variance grid for the robustness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Variances (sigma^2), nonnegative and strictly increasing.
    pub variances: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            variances: vec![0.0, 0.01, 0.05, 0.1, 0.15, 0.2],
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variances.is_empty() {
            return Err(Error::Config("noise grid is empty".into()));
        }
        if self.variances[0] < 0.0 {
            return Err(Error::Config("variances must be nonnegative".into()));
        }
        if self.variances.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("variances must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One entry of the noise sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoisePoint {
    pub variance: f64,
    pub cd: f64,
    pub empty_reconstruction: bool,
}

/// Perturbs the conditioning cloud with iid Gaussian noise per variance,
/// reconstructs, and measures CD against the clean shape surface. The
/// zero-variance entry is bitwise identical to plain reconstruction.
pub fn noise_sweep(
    model: &ConditionalSdfModel,
    shape: &ShapeInstance,
    base_cloud: &PointCloud,
    noise: &NoiseConfig,
    settings: &ReconSettings,
) -> Result<Vec<NoisePoint>> {
    noise.validate()?;
    let mut out = Vec::with_capacity(noise.variances.len());
    for (vi, &variance) in noise.variances.iter().enumerate() {
        let sigma = variance.sqrt();
        let mut rng = rng_for(noise.seed, &[0x401e, vi as u64]);
        let noisy = PointCloud::new(
            base_cloud
                .points()
                .iter()
                .map(|p| {
                    use rand_distr::StandardNormal;
                    Point3::new(
                        p.x + sigma * rng.sample::<f64, _>(StandardNormal),
                        p.y + sigma * rng.sample::<f64, _>(StandardNormal),
                        p.z + sigma * rng.sample::<f64, _>(StandardNormal),
                    )
                })
                .collect(),
        )?;
        let cd = reconstruction_cd(model, &noisy, shape, settings)?;
        out.push(NoisePoint {
            variance,
            cd,
            empty_reconstruction: !cd.is_finite(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exact_sdf, Pose, ShapeFamily};

    fn cloud_of(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn chamfer_identities() {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "s")
            .unwrap();
        let a = sample_surface(&s, 200, 1).unwrap();
        assert_eq!(chamfer(&a, &a, ChamferFlavor::Squared), 0.0);
        let b = cloud_of(vec![Point3::new(0.0, 0.0, 1.0)]);
        let c = cloud_of(vec![Point3::zero()]);
        assert!((chamfer(&b, &c, ChamferFlavor::Squared) - 2.0).abs() < 1e-15);
        assert!((chamfer(&b, &c, ChamferFlavor::Unsquared) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force() {
        let mut rng = rng_for(3, &[0x77]);
        let rand_cloud = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            cloud_of(
                (0..n)
                    .map(|_| {
                        Point3::new(
                            rng.random::<f64>() * 2.0 - 1.0,
                            rng.random::<f64>() * 2.0 - 1.0,
                            rng.random::<f64>() * 2.0 - 1.0,
                        )
                    })
                    .collect(),
            )
        };
        for flavor in [ChamferFlavor::Squared, ChamferFlavor::Unsquared] {
            let a = rand_cloud(&mut rng, 500);
            let b = rand_cloud(&mut rng, 421);
            let fast = chamfer(&a, &b, flavor);
            let brute = chamfer_brute(&a, &b, flavor);
            assert!((fast - brute).abs() <= 1e-12, "fast {fast} vs brute {brute}");
            assert_eq!(chamfer(&a, &b, flavor), chamfer(&b, &a, flavor));
        }
    }

    #[test]
    fn chamfer_is_rigid_motion_invariant() {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.4 }, Pose::default(), "s")
            .unwrap();
        let a = sample_surface(&s, 300, 1).unwrap();
        let b = sample_surface(&s, 300, 2).unwrap();
        let shift = Point3::new(0.13, -0.21, 0.08);
        let move_cloud = |c: &PointCloud| {
            cloud_of(c.points().iter().map(|p| p.add(&shift)).collect())
        };
        let before = chamfer(&a, &b, ChamferFlavor::Squared);
        let after = chamfer(&move_cloud(&a), &move_cloud(&b), ChamferFlavor::Squared);
        assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn mesh_sampling_respects_barycentric_bounds_and_areas() {
        let mesh = TriangleMesh {
            vertices: vec![
                Point3::zero(),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(-2.0, 0.0, 0.0),
                Point3::new(0.0, -3.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 8000;
        let cloud = sample_mesh_surface(&mesh, n, 5).unwrap();
        // Single-triangle membership: points stay in the z=0 plane and in
        // one of the two triangles (nonnegative barycentric coordinates).
        let mut counts = [0usize; 2];
        for p in cloud.points() {
            assert!(p.z.abs() < 1e-12);
            if p.x >= 0.0 && p.y >= 0.0 {
                counts[0] += 1;
            } else {
                counts[1] += 1;
            }
        }
        // Areas 0.5 vs 3.0: expect 1:6 ratio within 3 sigma binomial.
        let p = 0.5 / 3.5;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let frac = counts[0] as f64 / n as f64;
        assert!((frac - p).abs() < 3.0 * sigma, "fraction {frac} vs {p}");
        // Deterministic per seed.
        assert_eq!(cloud, sample_mesh_surface(&mesh, n, 5).unwrap());
        assert_ne!(cloud, sample_mesh_surface(&mesh, n, 6).unwrap());
    }

    #[test]
    fn empty_mesh_sampling_is_an_evaluation_error() {
        assert!(matches!(
            sample_mesh_surface(&TriangleMesh::default(), 10, 0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn sign_accuracy_oracle_bounds() {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "s")
            .unwrap();
        let cloud = sample_surface(&s, 256, 1).unwrap();
        let oracle = |xs: &[Point3]| Ok(xs.iter().map(|x| exact_sdf(&s, x)).collect());
        assert_eq!(
            sign_accuracy_with(oracle, &s, &cloud, 500, 7).unwrap(),
            1.0
        );
        let anti = |xs: &[Point3]| Ok(xs.iter().map(|x| -exact_sdf(&s, x)).collect());
        assert_eq!(sign_accuracy_with(anti, &s, &cloud, 500, 7).unwrap(), 0.0);
    }

    #[test]
    fn noise_config_validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        assert!(NoiseConfig {
            variances: vec![0.1, 0.1],
            seed: 0
        }
        .validate()
        .is_err());
        assert!(NoiseConfig {
            variances: vec![-0.1, 0.1],
            seed: 0
        }
        .validate()
        .is_err());
    }
}

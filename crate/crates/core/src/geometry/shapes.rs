//! Analytic shape families with exact signed distance functions and
//! area-uniform surface sampling.
//!
//! All distances are exact Euclidean signed distances (negative inside),
//! except for `CompositeUnion`, whose `min` of part distances is only a
//! lower bound near part intersections; instances report this through
//! [`ShapeInstance::sdf_is_exact`].

use super::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Rigid translation plus uniform scale. Uniform (rather than per-axis)
/// scale keeps the scaled distance field an exact SDF; anisotropy comes
/// from the family parameters instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub scale: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            scale: 1.0,
        }
    }
}

/// Shape family and its parameters, in the shape's local frame.
///
/// Axis-symmetric families (torus, capsule, cylinder) are aligned with the
/// y axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    Torus {
        major_radius: f64,
        minor_radius: f64,
    },
    Capsule {
        half_height: f64,
        radius: f64,
    },
    Cylinder {
        half_height: f64,
        radius: f64,
    },
    /// Union of posed primitive parts; SDF is the min over parts.
    CompositeUnion {
        parts: Vec<ShapeInstance>,
    },
}

impl ShapeFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere { .. } => "sphere",
            ShapeFamily::Box { .. } => "box",
            ShapeFamily::Torus { .. } => "torus",
            ShapeFamily::Capsule { .. } => "capsule",
            ShapeFamily::Cylinder { .. } => "cylinder",
            ShapeFamily::CompositeUnion { .. } => "composite-union",
        }
    }
}

/// A concrete shape: family parameters, pose, and the category it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    #[serde(flatten)]
    pub family: ShapeFamily,
    #[serde(default)]
    pub pose: Pose,
    pub category_id: String,
}

impl ShapeInstance {
    pub fn new(family: ShapeFamily, pose: Pose, category_id: impl Into<String>) -> Result<Self> {
        let shape = Self {
            family,
            pose,
            category_id: category_id.into(),
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Checks parameter positivity and that the posed surface fits in
    /// [-1, 1]^3.
    pub fn validate(&self) -> Result<()> {
        if !(self.pose.scale > 0.0) || !self.pose.scale.is_finite() {
            return Err(Error::Shape(format!(
                "pose scale must be positive, got {}",
                self.pose.scale
            )));
        }
        match &self.family {
            ShapeFamily::Sphere { radius } => positive("radius", *radius)?,
            ShapeFamily::Box { half_extents } => {
                for (i, h) in half_extents.iter().enumerate() {
                    positive(&format!("half_extents[{i}]"), *h)?;
                }
            }
            ShapeFamily::Torus {
                major_radius,
                minor_radius,
            } => {
                positive("major_radius", *major_radius)?;
                positive("minor_radius", *minor_radius)?;
                if minor_radius >= major_radius {
                    return Err(Error::Shape(
                        "torus minor radius must be below major radius".into(),
                    ));
                }
            }
            ShapeFamily::Capsule {
                half_height,
                radius,
            }
            | ShapeFamily::Cylinder {
                half_height,
                radius,
            } => {
                positive("half_height", *half_height)?;
                positive("radius", *radius)?;
            }
            ShapeFamily::CompositeUnion { parts } => {
                if parts.is_empty() {
                    return Err(Error::Shape("composite union needs at least one part".into()));
                }
                for part in parts {
                    if matches!(part.family, ShapeFamily::CompositeUnion { .. }) {
                        return Err(Error::Shape("composite parts must be primitives".into()));
                    }
                    part.validate_local()?;
                }
            }
        }
        let ext = self.world_extent();
        if ext.iter().any(|&e| e > 1.0 + 1e-9) {
            return Err(Error::Shape(format!(
                "shape extent {ext:?} exceeds the [-1,1]^3 cube"
            )));
        }
        Ok(())
    }

    /// Parameter checks only, skipping the unit-cube bound; used for parts
    /// of a composite, whose bound is checked on the composite.
    fn validate_local(&self) -> Result<()> {
        let unposed = ShapeInstance {
            family: self.family.clone(),
            pose: Pose::default(),
            category_id: self.category_id.clone(),
        };
        unposed.validate()
    }

    /// Whether `exact_sdf` is an exact signed distance everywhere.
    /// False for composites, where the min under-estimates distance near
    /// part intersections.
    pub fn sdf_is_exact(&self) -> bool {
        !matches!(self.family, ShapeFamily::CompositeUnion { .. })
    }

    /// Per-axis half-extent of the posed surface around the origin.
    pub fn world_extent(&self) -> [f64; 3] {
        let local = self.local_extent();
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = local[a] * self.pose.scale + self.pose.translation[a].abs();
        }
        out
    }

    fn local_extent(&self) -> [f64; 3] {
        match &self.family {
            ShapeFamily::Sphere { radius } => [*radius; 3],
            ShapeFamily::Box { half_extents } => *half_extents,
            ShapeFamily::Torus {
                major_radius,
                minor_radius,
            } => {
                let rr = major_radius + minor_radius;
                [rr, *minor_radius, rr]
            }
            ShapeFamily::Capsule {
                half_height,
                radius,
            } => [*radius, half_height + radius, *radius],
            ShapeFamily::Cylinder {
                half_height,
                radius,
            } => [*radius, *half_height, *radius],
            ShapeFamily::CompositeUnion { parts } => {
                let mut out = [0.0f64; 3];
                for part in parts {
                    let e = part.world_extent();
                    for a in 0..3 {
                        out[a] = out[a].max(e[a]);
                    }
                }
                out
            }
        }
    }

    /// Analytic surface area (world units). Composite areas are the sum of
    /// part areas, ignoring overlap — good enough for sampling weights.
    pub fn surface_area(&self) -> f64 {
        let s2 = self.pose.scale * self.pose.scale;
        s2 * match &self.family {
            ShapeFamily::Sphere { radius } => 4.0 * PI * radius * radius,
            ShapeFamily::Box { half_extents } => {
                let [hx, hy, hz] = *half_extents;
                8.0 * (hx * hy + hy * hz + hz * hx)
            }
            ShapeFamily::Torus {
                major_radius,
                minor_radius,
            } => 4.0 * PI * PI * major_radius * minor_radius,
            ShapeFamily::Capsule {
                half_height,
                radius,
            } => 4.0 * PI * radius * half_height + 4.0 * PI * radius * radius,
            ShapeFamily::Cylinder {
                half_height,
                radius,
            } => 4.0 * PI * radius * half_height + 2.0 * PI * radius * radius,
            ShapeFamily::CompositeUnion { parts } => {
                parts.iter().map(|p| p.surface_area()).sum::<f64>()
            }
        }
    }

    /// Analytic enclosed volume (world units); composites ignore overlap
    /// and so over-estimate.
    pub fn volume(&self) -> f64 {
        let s3 = self.pose.scale.powi(3);
        s3 * match &self.family {
            ShapeFamily::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            ShapeFamily::Box { half_extents } => {
                8.0 * half_extents[0] * half_extents[1] * half_extents[2]
            }
            ShapeFamily::Torus {
                major_radius,
                minor_radius,
            } => 2.0 * PI * PI * major_radius * minor_radius * minor_radius,
            ShapeFamily::Capsule {
                half_height,
                radius,
            } => {
                2.0 * PI * radius * radius * half_height + 4.0 / 3.0 * PI * radius.powi(3)
            }
            ShapeFamily::Cylinder {
                half_height,
                radius,
            } => 2.0 * PI * radius * radius * half_height,
            ShapeFamily::CompositeUnion { parts } => {
                parts.iter().map(|p| p.volume()).sum::<f64>()
            }
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{name} must be positive, got {v}")))
    }
}

/// Exact signed distance from `x` to the posed shape surface: negative
/// inside, positive outside, zero on the surface. For composite unions this
/// is the min over parts.
pub fn exact_sdf(shape: &ShapeInstance, x: &Point3) -> f64 {
    let t = shape.pose.translation;
    let s = shape.pose.scale;
    let local = Point3::new((x.x - t[0]) / s, (x.y - t[1]) / s, (x.z - t[2]) / s);
    s * sdf_local(&shape.family, &local)
}

fn sdf_local(family: &ShapeFamily, p: &Point3) -> f64 {
    match family {
        ShapeFamily::Sphere { radius } => p.norm() - radius,
        ShapeFamily::Box { half_extents } => {
            let q = [
                p.x.abs() - half_extents[0],
                p.y.abs() - half_extents[1],
                p.z.abs() - half_extents[2],
            ];
            let outside =
                (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2)).sqrt();
            let inside = q[0].max(q[1]).max(q[2]).min(0.0);
            outside + inside
        }
        ShapeFamily::Torus {
            major_radius,
            minor_radius,
        } => {
            let ring = (p.x * p.x + p.z * p.z).sqrt() - major_radius;
            (ring * ring + p.y * p.y).sqrt() - minor_radius
        }
        ShapeFamily::Capsule {
            half_height,
            radius,
        } => {
            let y = p.y.clamp(-half_height, *half_height);
            (p.x * p.x + (p.y - y) * (p.y - y) + p.z * p.z).sqrt() - radius
        }
        ShapeFamily::Cylinder {
            half_height,
            radius,
        } => {
            let dr = (p.x * p.x + p.z * p.z).sqrt() - radius;
            let dy = p.y.abs() - half_height;
            let inside = dr.max(dy).min(0.0);
            let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            inside + outside
        }
        ShapeFamily::CompositeUnion { parts } => parts
            .iter()
            .map(|part| exact_sdf(part, p))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Samples `n` approximately area-uniform points on the posed surface.
/// Deterministic for a fixed seed.
pub fn sample_surface(shape: &ShapeInstance, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Argument("sample_surface needs n >= 1".into()));
    }
    shape.validate()?;
    let mut rng = rng_for(seed, &[0x5a17]);
    let mut pts = Vec::with_capacity(n);
    match &shape.family {
        ShapeFamily::CompositeUnion { parts } => {
            // Sample parts proportionally to area, rejecting points that fall
            // strictly inside another part so samples stay on the union
            // boundary.
            let areas: Vec<f64> = parts.iter().map(|p| p.surface_area()).collect();
            let total: f64 = areas.iter().sum();
            let mut attempts = 0usize;
            let max_attempts = n.saturating_mul(200);
            while pts.len() < n {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(Error::Shape(
                        "composite surface sampling failed: parts may be fully contained".into(),
                    ));
                }
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = 0;
                for (i, a) in areas.iter().enumerate() {
                    acc += a;
                    if u <= acc {
                        chosen = i;
                        break;
                    }
                }
                let local = sample_primitive_surface(&parts[chosen].family, &mut rng);
                let p = apply_pose(&parts[chosen].pose, &local);
                let on_boundary = parts
                    .iter()
                    .enumerate()
                    .all(|(i, part)| i == chosen || exact_sdf(part, &p) > -1e-9);
                if on_boundary {
                    pts.push(p);
                }
            }
        }
        family => {
            for _ in 0..n {
                pts.push(sample_primitive_surface(family, &mut rng));
            }
        }
    }
    let posed: Vec<Point3> = pts.iter().map(|p| apply_pose(&shape.pose, p)).collect();
    PointCloud::new(posed)
}

fn apply_pose(pose: &Pose, p: &Point3) -> Point3 {
    Point3::new(
        p.x * pose.scale + pose.translation[0],
        p.y * pose.scale + pose.translation[1],
        p.z * pose.scale + pose.translation[2],
    )
}

fn unit_direction(rng: &mut impl Rng) -> Point3 {
    loop {
        let d = Point3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = d.norm();
        if n > 1e-12 {
            return d.scale(1.0 / n);
        }
    }
}

fn sample_primitive_surface(family: &ShapeFamily, rng: &mut impl Rng) -> Point3 {
    match family {
        ShapeFamily::Sphere { radius } => unit_direction(rng).scale(*radius),
        ShapeFamily::Box { half_extents } => {
            let [hx, hy, hz] = *half_extents;
            // Face pair areas; each pair has two identical faces.
            let ax = 4.0 * hy * hz;
            let ay = 4.0 * hx * hz;
            let az = 4.0 * hx * hy;
            let u: f64 = rng.random::<f64>() * (ax + ay + az);
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            if u < ax {
                Point3::new(sign * hx, (2.0 * a - 1.0) * hy, (2.0 * b - 1.0) * hz)
            } else if u < ax + ay {
                Point3::new((2.0 * a - 1.0) * hx, sign * hy, (2.0 * b - 1.0) * hz)
            } else {
                Point3::new((2.0 * a - 1.0) * hx, (2.0 * b - 1.0) * hy, sign * hz)
            }
        }
        ShapeFamily::Torus {
            major_radius,
            minor_radius,
        } => {
            let theta = rng.random::<f64>() * 2.0 * PI;
            // Rejection on the tube angle: surface density is proportional
            // to R + r cos(phi).
            let phi = loop {
                let cand = rng.random::<f64>() * 2.0 * PI;
                let accept = (major_radius + minor_radius * cand.cos())
                    / (major_radius + minor_radius);
                if rng.random::<f64>() < accept {
                    break cand;
                }
            };
            let ring = major_radius + minor_radius * phi.cos();
            Point3::new(
                ring * theta.cos(),
                minor_radius * phi.sin(),
                ring * theta.sin(),
            )
        }
        ShapeFamily::Capsule {
            half_height,
            radius,
        } => {
            let side = 4.0 * PI * radius * half_height;
            let caps = 4.0 * PI * radius * radius;
            if rng.random::<f64>() * (side + caps) < side {
                let y = (2.0 * rng.random::<f64>() - 1.0) * half_height;
                let theta = rng.random::<f64>() * 2.0 * PI;
                Point3::new(radius * theta.cos(), y, radius * theta.sin())
            } else {
                let d = unit_direction(rng);
                let top = rng.random::<f64>() < 0.5;
                let dy = d.y.abs();
                if top {
                    Point3::new(radius * d.x, half_height + radius * dy, radius * d.z)
                } else {
                    Point3::new(radius * d.x, -half_height - radius * dy, radius * d.z)
                }
            }
        }
        ShapeFamily::Cylinder {
            half_height,
            radius,
        } => {
            let side = 4.0 * PI * radius * half_height;
            let disks = 2.0 * PI * radius * radius;
            if rng.random::<f64>() * (side + disks) < side {
                let y = (2.0 * rng.random::<f64>() - 1.0) * half_height;
                let theta = rng.random::<f64>() * 2.0 * PI;
                Point3::new(radius * theta.cos(), y, radius * theta.sin())
            } else {
                let rho = radius * rng.random::<f64>().sqrt();
                let theta = rng.random::<f64>() * 2.0 * PI;
                let y = if rng.random::<f64>() < 0.5 {
                    *half_height
                } else {
                    -*half_height
                };
                Point3::new(rho * theta.cos(), y, rho * theta.sin())
            }
        }
        ShapeFamily::CompositeUnion { .. } => {
            unreachable!("composites are sampled part-wise in sample_surface")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> ShapeInstance {
        ShapeInstance::new(ShapeFamily::Sphere { radius: r }, Pose::default(), "sphere").unwrap()
    }

    #[test]
    fn sphere_sdf_matches_hand_values() {
        let s = sphere(0.5);
        assert!((exact_sdf(&s, &Point3::new(1.0, 0.0, 0.0)) - 0.5).abs() < 1e-12);
        assert!((exact_sdf(&s, &Point3::zero()) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn torus_sdf_matches_hand_value() {
        let t = ShapeInstance::new(
            ShapeFamily::Torus {
                major_radius: 0.5,
                minor_radius: 0.2,
            },
            Pose::default(),
            "torus",
        )
        .unwrap();
        assert!((exact_sdf(&t, &Point3::new(0.5, 0.0, 0.0)) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn box_center_distance_is_nearest_face() {
        let b = ShapeInstance::new(
            ShapeFamily::Box {
                half_extents: [0.3; 3],
            },
            Pose::default(),
            "box",
        )
        .unwrap();
        assert!((exact_sdf(&b, &Point3::zero()) + 0.3).abs() < 1e-12);
    }

    #[test]
    fn pose_scales_and_translates_the_field() {
        let s = ShapeInstance::new(
            ShapeFamily::Sphere { radius: 0.5 },
            Pose {
                translation: [0.2, 0.0, 0.0],
                scale: 0.5,
            },
            "sphere",
        )
        .unwrap();
        // Surface at x = 0.2 + 0.25.
        assert!(exact_sdf(&s, &Point3::new(0.45, 0.0, 0.0)).abs() < 1e-12);
        assert!((exact_sdf(&s, &Point3::new(0.95, 0.0, 0.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn surface_samples_sit_on_the_surface() {
        for family in [
            ShapeFamily::Sphere { radius: 0.5 },
            ShapeFamily::Box {
                half_extents: [0.4, 0.3, 0.2],
            },
            ShapeFamily::Torus {
                major_radius: 0.5,
                minor_radius: 0.2,
            },
            ShapeFamily::Capsule {
                half_height: 0.3,
                radius: 0.2,
            },
            ShapeFamily::Cylinder {
                half_height: 0.3,
                radius: 0.25,
            },
        ] {
            let shape = ShapeInstance::new(family, Pose::default(), "t").unwrap();
            let cloud = sample_surface(&shape, 500, 7).unwrap();
            let worst = cloud
                .points()
                .iter()
                .map(|p| exact_sdf(&shape, p).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-6, "{}: worst residual {worst}", shape.family.name());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = sphere(0.5);
        let a = sample_surface(&s, 100, 42).unwrap();
        let b = sample_surface(&s, 100, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn box_face_counts_match_face_areas() {
        // Chi-square style check: per-face-pair sample fractions within 5%
        // of the analytic area fractions.
        let he = [0.5, 0.3, 0.2];
        let b = ShapeInstance::new(ShapeFamily::Box { half_extents: he }, Pose::default(), "box")
            .unwrap();
        let cloud = sample_surface(&b, 10_000, 11).unwrap();
        let ax = 4.0 * he[1] * he[2];
        let ay = 4.0 * he[0] * he[2];
        let az = 4.0 * he[0] * he[1];
        let total = 2.0 * (ax + ay + az);
        let mut counts = [0usize; 3];
        for p in cloud.points() {
            // A sample lies on the face pair whose coordinate hits the
            // half-extent.
            let dx = (p.x.abs() - he[0]).abs();
            let dy = (p.y.abs() - he[1]).abs();
            let dz = (p.z.abs() - he[2]).abs();
            if dx <= dy && dx <= dz {
                counts[0] += 1;
            } else if dy <= dz {
                counts[1] += 1;
            } else {
                counts[2] += 1;
            }
        }
        let expect = [2.0 * ax / total, 2.0 * ay / total, 2.0 * az / total];
        for a in 0..3 {
            let frac = counts[a] as f64 / 10_000.0;
            assert!(
                (frac - expect[a]).abs() < 0.05,
                "axis {a}: got {frac}, want {}",
                expect[a]
            );
        }
    }

    #[test]
    fn composite_union_samples_stay_on_boundary() {
        let parts = vec![
            ShapeInstance::new(
                ShapeFamily::Sphere { radius: 0.3 },
                Pose {
                    translation: [-0.2, 0.0, 0.0],
                    scale: 1.0,
                },
                "part",
            )
            .unwrap(),
            ShapeInstance::new(
                ShapeFamily::Box {
                    half_extents: [0.25; 3],
                },
                Pose {
                    translation: [0.25, 0.0, 0.0],
                    scale: 1.0,
                },
                "part",
            )
            .unwrap(),
        ];
        let comp = ShapeInstance::new(
            ShapeFamily::CompositeUnion { parts },
            Pose::default(),
            "composite",
        )
        .unwrap();
        assert!(!comp.sdf_is_exact());
        let cloud = sample_surface(&comp, 400, 3).unwrap();
        for p in cloud.points() {
            assert!(exact_sdf(&comp, p).abs() <= 1e-6);
        }
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        assert!(matches!(
            ShapeInstance::new(ShapeFamily::Sphere { radius: 0.0 }, Pose::default(), "s"),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ShapeInstance::new(
                ShapeFamily::Sphere { radius: 0.5 },
                Pose {
                    translation: [0.9, 0.0, 0.0],
                    scale: 1.0
                },
                "s"
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lipschitz_and_sign_consistency() {
        let shapes = [
            ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "a").unwrap(),
            ShapeInstance::new(
                ShapeFamily::Box {
                    half_extents: [0.4, 0.3, 0.2],
                },
                Pose::default(),
                "b",
            )
            .unwrap(),
            ShapeInstance::new(
                ShapeFamily::Torus {
                    major_radius: 0.5,
                    minor_radius: 0.2,
                },
                Pose::default(),
                "c",
            )
            .unwrap(),
            ShapeInstance::new(
                ShapeFamily::Cylinder {
                    half_height: 0.4,
                    radius: 0.3,
                },
                Pose::default(),
                "d",
            )
            .unwrap(),
        ];
        let mut rng = rng_for(99, &[1]);
        for shape in &shapes {
            for _ in 0..2500 {
                let a = Point3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                );
                let b = Point3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                );
                let da = exact_sdf(shape, &a);
                let db = exact_sdf(shape, &b);
                assert!(
                    (da - db).abs() <= a.dist(&b) * (1.0 + 1e-9) + 1e-15,
                    "{} not 1-Lipschitz",
                    shape.family.name()
                );
            }
        }
        // Sign consistency on points constructed inside / outside.
        let s = sphere(0.5);
        assert!(exact_sdf(&s, &Point3::new(0.1, 0.1, 0.1)) < 0.0);
        assert!(exact_sdf(&s, &Point3::new(0.9, 0.0, 0.0)) > 0.0);
    }
}

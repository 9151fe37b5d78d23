//! Analytic shapes with exact signed distances, point-cloud sampling and
//! nearest-neighbor queries — the data substrate for everything downstream.

mod io;
mod kdtree;
mod queries;
mod shapes;

pub use io::{load_cloud, normalize_cloud, save_cloud, NormalizeTransform};
pub use kdtree::KdTree;
pub use queries::{sample_queries, sample_queries_from_cloud, QuerySample};
pub use shapes::{exact_sdf, sample_surface, Pose, ShapeFamily, ShapeInstance};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point in normalized object space. Canonical shapes live in [-1, 1]^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn add(&self, o: &Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(&self, o: &Point3) -> f64 {
        self.sub(o).norm()
    }

    pub fn dist2(&self, o: &Point3) -> f64 {
        let d = self.sub(o);
        d.dot(&d)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

/// An unordered surface sample of N points. Order carries no meaning but is
/// kept stable so that downstream indices (nearest-neighbor annotations)
/// remain valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud must be nonempty".into()));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::Argument(format!(
                "point cloud contains non-finite point {p:?}"
            )));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    /// The points reordered lexicographically by (x, y, z).
    ///
    /// Used by the encoder so that pooling reductions run in an order that
    /// does not depend on the input permutation, which makes permutation
    /// invariance exact rather than approximate.
    pub fn canonical_order(&self) -> Vec<Point3> {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| {
            (a.x, a.y, a.z)
                .partial_cmp(&(b.x, b.y, b.z))
                .expect("cloud points are finite")
        });
        pts
    }
}

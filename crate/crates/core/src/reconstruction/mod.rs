//! Dense grid evaluation of the predicted field and zero-level-set
//! extraction via marching cubes; mesh and field file formats.

mod marching_cubes;
mod obj;
mod tables;

pub use marching_cubes::marching_cubes;
pub use obj::{export_mesh, format_coord, import_mesh};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::model::ConditionalSdfModel;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Scalar field sampled on an `r^3` node lattice over the cube [-1,1]^3,
/// stored x-major (x slowest, z fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    resolution: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn from_values(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Argument("grid resolution must be >= 2".into()));
        }
        if values.len() != resolution.pow(3) {
            return Err(Error::Argument(format!(
                "expected {} values for resolution {resolution}, got {}",
                resolution.pow(3),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "grid_field".into(),
                detail: format!("non-finite value {bad}"),
            });
        }
        Ok(Self { resolution, values })
    }

    /// Evaluates `f` at every lattice node.
    pub fn from_fn(resolution: usize, f: impl Fn(Point3) -> f64 + Sync) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Argument("grid resolution must be >= 2".into()));
        }
        let r = resolution;
        let values: Vec<f64> = (0..r)
            .into_par_iter()
            .flat_map_iter(|i| {
                let f = &f;
                (0..r).flat_map(move |j| {
                    (0..r).map(move |k| f(node_position(r, i, j, k)))
                })
            })
            .collect();
        Self::from_values(r, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// World coordinates of node (i, j, k).
    pub fn node(&self, i: usize, j: usize, k: usize) -> Point3 {
        node_position(self.resolution, i, j, k)
    }

    /// Lattice spacing.
    pub fn cell_size(&self) -> f64 {
        2.0 / (self.resolution as f64 - 1.0)
    }
}

fn node_position(r: usize, i: usize, j: usize, k: usize) -> Point3 {
    let step = 2.0 / (r as f64 - 1.0);
    Point3::new(
        -1.0 + step * i as f64,
        -1.0 + step * j as f64,
        -1.0 + step * k as f64,
    )
}

/// Evaluates the conditional field on a dense lattice. The cloud is encoded
/// once; prediction parallelizes over x-slabs.
pub fn evaluate_grid(
    model: &ConditionalSdfModel,
    cloud: &PointCloud,
    resolution: usize,
) -> Result<GridField> {
    if resolution < 8 {
        return Err(Error::Argument("reconstruction resolution must be >= 8".into()));
    }
    let feats = model.encode(cloud)?;
    let r = resolution;
    let slabs: Vec<Result<Vec<f64>>> = (0..r)
        .into_par_iter()
        .map(|i| {
            let mut queries = Vec::with_capacity(r * r);
            for j in 0..r {
                for k in 0..r {
                    queries.push(node_position(r, i, j, k));
                }
            }
            model.predict_batch(&queries, &feats).map_err(|e| {
                // Locate the offending node for the error message.
                for (idx, q) in queries.iter().enumerate() {
                    if model.predict(q, &feats).is_err() {
                        let j = idx / r;
                        let k = idx % r;
                        return Error::Numeric {
                            op: "evaluate_grid".into(),
                            detail: format!(
                                "non-finite prediction at node ({i},{j},{k}) = ({}, {}, {})",
                                q.x, q.y, q.z
                            ),
                        };
                    }
                }
                e
            })
        })
        .collect();
    let mut values = Vec::with_capacity(r * r * r);
    for slab in slabs {
        values.extend(slab?);
    }
    GridField::from_values(r, values)
}

/// Triangle mesh with deduplicated vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        let u = b.sub(&a);
        let v = c.sub(&a);
        let cx = u.y * v.z - u.z * v.y;
        let cy = u.z * v.x - u.x * v.z;
        let cz = u.x * v.y - u.y * v.x;
        0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Signed volume via the divergence theorem; positive when triangles
    /// wind counter-clockwise seen from outside.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                a.dot(&Point3::new(
                    b.y * c.z - b.z * c.y,
                    b.z * c.x - b.x * c.z,
                    b.x * c.y - b.y * c.x,
                )) / 6.0
            })
            .sum()
    }

    /// Undirected edge -> incident triangle count.
    pub fn edge_counts(&self) -> std::collections::HashMap<(u32, u32), usize> {
        let mut counts = std::collections::HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// V - E + F over the whole mesh.
    pub fn euler_characteristic(&self) -> i64 {
        let v = self.vertices.len() as i64;
        let e = self.edge_counts().len() as i64;
        let f = self.triangles.len() as i64;
        v - e + f
    }
}

/// Writes a `.grid` field dump: u32 LE resolution per axis, f64 LE bounds
/// (lo/hi per axis), then f64 LE values.
pub fn save_grid(field: &GridField, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let r = field.resolution() as u32;
    for _ in 0..3 {
        w.write_all(&r.to_le_bytes())?;
    }
    for _ in 0..3 {
        w.write_all(&(-1.0f64).to_le_bytes())?;
        w.write_all(&1.0f64.to_le_bytes())?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridField> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
    let mut u32buf = [0u8; 4];
    let mut res = [0u32; 3];
    for slot in res.iter_mut() {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Load(format!("{}: truncated header", path.display())))?;
        *slot = u32::from_le_bytes(u32buf);
    }
    if res[0] != res[1] || res[1] != res[2] {
        return Err(Error::Load("only cubic grids are supported".into()));
    }
    let mut f64buf = [0u8; 8];
    for _ in 0..6 {
        r.read_exact(&mut f64buf)
            .map_err(|_| Error::Load(format!("{}: truncated bounds", path.display())))?;
    }
    let n = (res[0] as usize).pow(3);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut f64buf)
            .map_err(|_| Error::Load(format!("{}: truncated values", path.display())))?;
        values.push(f64::from_le_bytes(f64buf));
    }
    GridField::from_values(res[0] as usize, values)
}

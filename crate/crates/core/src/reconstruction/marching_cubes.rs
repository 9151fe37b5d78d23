//! Marching cubes over a [`GridField`].
//!
//! Standard 256-case table with edge-linear interpolation of crossing
//! positions. Vertices are deduplicated per lattice edge, so shared edges
//! reference identical vertex indices and closed level sets come out
//! watertight. Nodes equal to the iso value are nudged by +1e-12 before
//! casing; the bias is far below geometric tolerance and removes
//! degenerate topologies.

use super::tables::TRI_TABLE;
use super::{GridField, TriangleMesh};
use crate::error::Result;
use crate::geometry::Point3;
use std::collections::HashMap;

/// Cube corner offsets in (di, dj, dk), matching the triangle table.
const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

/// For each cube edge: (lower corner offset, axis). The canonical lattice
/// edge representation shared between neighboring cells.
const EDGES: [((usize, usize, usize), u8); 12] = [
    ((0, 0, 0), 0), // 0: corners 0-1
    ((1, 0, 0), 1), // 1: 1-2
    ((0, 1, 0), 0), // 2: 3-2
    ((0, 0, 0), 1), // 3: 0-3
    ((0, 0, 1), 0), // 4: 4-5
    ((1, 0, 1), 1), // 5: 5-6
    ((0, 1, 1), 0), // 6: 7-6
    ((0, 0, 1), 1), // 7: 4-7
    ((0, 0, 0), 2), // 8: 0-4
    ((1, 0, 0), 2), // 9: 1-5
    ((1, 1, 0), 2), // 10: 2-6
    ((0, 1, 0), 2), // 11: 3-7
];

/// Extracts the `iso` level set as a triangle mesh. An all-positive or
/// all-negative field yields an empty mesh.
pub fn marching_cubes(field: &GridField, iso: f64) -> Result<TriangleMesh> {
    let r = field.resolution();
    // Nudge exact hits off the iso level once, consistently for all cells.
    let adjusted: Vec<f64> = field
        .values()
        .iter()
        .map(|&v| if v == iso { v + 1e-12 } else { v })
        .collect();
    let value = |i: usize, j: usize, k: usize| adjusted[(i * r + j) * r + k];

    let mut mesh = TriangleMesh::default();
    let mut edge_vertices: HashMap<(u32, u8), u32> = HashMap::new();

    let mut vertex_on_edge = |mesh: &mut TriangleMesh, i: usize, j: usize, k: usize, axis: u8| {
        let node_index = ((i * r + j) * r + k) as u32;
        *edge_vertices.entry((node_index, axis)).or_insert_with(|| {
            let lo = field.node(i, j, k);
            let (i2, j2, k2) = match axis {
                0 => (i + 1, j, k),
                1 => (i, j + 1, k),
                _ => (i, j, k + 1),
            };
            let hi = field.node(i2, j2, k2);
            let v_lo = value(i, j, k);
            let v_hi = value(i2, j2, k2);
            let t = (iso - v_lo) / (v_hi - v_lo);
            let p = Point3::new(
                lo.x + t * (hi.x - lo.x),
                lo.y + t * (hi.y - lo.y),
                lo.z + t * (hi.z - lo.z),
            );
            mesh.vertices.push(p);
            (mesh.vertices.len() - 1) as u32
        })
    };

    for i in 0..r - 1 {
        for j in 0..r - 1 {
            for k in 0..r - 1 {
                let mut cube_index = 0usize;
                for (bit, &(di, dj, dk)) in CORNERS.iter().enumerate() {
                    if value(i + di, j + dj, k + dk) < iso {
                        cube_index |= 1 << bit;
                    }
                }
                if cube_index == 0 || cube_index == 255 {
                    continue;
                }
                let row = &TRI_TABLE[cube_index];
                let mut e = 0;
                while e < 16 && row[e] >= 0 {
                    let mut tri = [0u32; 3];
                    for (slot, &edge) in tri.iter_mut().zip(&row[e..e + 3]) {
                        let ((di, dj, dk), axis) = EDGES[edge as usize];
                        *slot = vertex_on_edge(&mut mesh, i + di, j + dj, k + dk, axis);
                    }
                    // The table winds clockwise seen from the positive side;
                    // swap to the outward convention (counter-clockwise from
                    // positive field, normals toward positive values).
                    let tri = [tri[0], tri[2], tri[1]];
                    if mesh.triangle_area(&tri) >= 1e-12 {
                        mesh.triangles.push(tri);
                    }
                    e += 3;
                }
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exact_sdf, Pose, ShapeFamily, ShapeInstance};

    fn sphere_field(r: f64, res: usize) -> GridField {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: r }, Pose::default(), "s")
            .unwrap();
        GridField::from_fn(res, |p| exact_sdf(&s, &p)).unwrap()
    }

    #[test]
    fn all_positive_field_gives_empty_mesh() {
        let field = GridField::from_fn(8, |_| 1.0).unwrap();
        let mesh = marching_cubes(&field, 0.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn sphere_vertices_sit_near_the_radius() {
        let res = 64;
        let mesh = marching_cubes(&sphere_field(0.5, res), 0.0).unwrap();
        assert!(!mesh.is_empty());
        let tol = 2.0 * (2.0 / (res as f64 - 1.0));
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 0.5).abs() < tol,
                "vertex at radius {}",
                v.norm()
            );
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_and_outward() {
        let mesh = marching_cubes(&sphere_field(0.5, 32), 0.0).unwrap();
        for (&_edge, &count) in mesh.edge_counts().iter() {
            assert_eq!(count, 2, "open or non-manifold edge");
        }
        // Outward orientation: positive signed volume, close to the ball's.
        let vol = mesh.signed_volume();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 0.5f64.powi(3);
        assert!(vol > 0.0, "inward winding, volume {vol}");
        assert!((vol - expect).abs() / expect < 0.05, "volume {vol} vs {expect}");
    }

    #[test]
    fn single_interior_negative_node_makes_a_closed_octahedron() {
        let res = 9;
        let mut values = vec![1.0; res * res * res];
        values[(4 * res + 4) * res + 4] = -1.0;
        let field = GridField::from_values(res, values).unwrap();
        let mesh = marching_cubes(&field, 0.0).unwrap();
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.euler_characteristic(), 2);
        for (_, count) in mesh.edge_counts() {
            assert_eq!(count, 2);
        }
        // Normals point toward the positive field, i.e. away from the
        // negative node: volume is positive.
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn vertices_lie_on_straddling_edges() {
        let field = sphere_field(0.45, 16);
        let mesh = marching_cubes(&field, 0.0).unwrap();
        let step = field.cell_size();
        for v in &mesh.vertices {
            // Each vertex sits on exactly one lattice edge: two coordinates
            // are lattice values, one is interpolated within a cell.
            let mut off_lattice = 0;
            for c in v.as_array() {
                let u = (c + 1.0) / step;
                if (u - u.round()).abs() > 1e-9 {
                    off_lattice += 1;
                }
            }
            assert!(off_lattice <= 1);
        }
    }

    #[test]
    fn exact_zero_nodes_do_not_break_topology() {
        // A plane of exact zeros between positive and negative half-spaces.
        let res = 8;
        let field = GridField::from_fn(res, |p| {
            if p.x.abs() < 1e-12 {
                0.0
            } else {
                p.x
            }
        })
        .unwrap();
        let mesh = marching_cubes(&field, 0.0).unwrap();
        assert!(!mesh.is_empty());
    }
}

//! ASCII OBJ export/import with canonical float formatting.
//!
//! Coordinates are written with 9 significant digits; writing what the
//! reader produced yields a byte-identical file, which is the round-trip
//! contract checkpoints and tests rely on.

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Canonical coordinate formatting: 9 significant digits, scientific.
pub fn format_coord(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes `v x y z` lines then `f a b c` lines with 1-based indices. An
/// empty mesh produces a valid, empty file.
pub fn export_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(
            w,
            "v {} {} {}",
            format_coord(v.x),
            format_coord(v.y),
            format_coord(v.z)
        )?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_mesh(path: &Path) -> Result<TriangleMesh> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
    let mut mesh = TriangleMesh::default();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let context = || format!("{}:{}", path.display(), lineno + 1);
        match parts.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    *c = parts
                        .next()
                        .ok_or_else(|| Error::Load(format!("{}: short vertex line", context())))?
                        .parse()
                        .map_err(|e| Error::Load(format!("{}: {e}", context())))?;
                }
                mesh.vertices.push(Point3::from(coord));
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for slot in idx.iter_mut() {
                    let raw = parts
                        .next()
                        .ok_or_else(|| Error::Load(format!("{}: short face line", context())))?;
                    // Accept plain indices only (no texture/normal slashes).
                    let one_based: u32 = raw
                        .parse()
                        .map_err(|e| Error::Load(format!("{}: {e}", context())))?;
                    if one_based == 0 || one_based as usize > mesh.vertices.len() {
                        return Err(Error::Load(format!(
                            "{}: face index {one_based} out of range",
                            context()
                        )));
                    }
                    *slot = one_based - 1;
                }
                mesh.triangles.push(idx);
            }
            Some(other) => {
                return Err(Error::Load(format!(
                    "{}: unsupported OBJ element `{other}`",
                    context()
                )))
            }
            None => {}
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_triangle() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn unit_triangle_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        export_mesh(&unit_triangle(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("v "));
        assert_eq!(lines[3], "f 1 2 3");
    }

    #[test]
    fn empty_mesh_is_a_valid_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.obj");
        export_mesh(&TriangleMesh::default(), &path).unwrap();
        let back = import_mesh(&path).unwrap();
        assert!(back.is_empty());
        assert!(back.vertices.is_empty());
    }

    #[test]
    fn export_import_identity_on_representable_coords() {
        let mesh = unit_triangle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        export_mesh(&mesh, &path).unwrap();
        let back = import_mesh(&path).unwrap();
        assert_eq!(mesh, back);
    }

    #[test]
    fn round_trip_is_idempotent_in_bytes() {
        // Arbitrary-precision coordinates quantize once at export; after
        // that, export -> import -> export is byte-stable.
        let mesh = TriangleMesh {
            vertices: vec![
                Point3::new(0.123456789123456, -0.987654321987654, 1.0 / 3.0),
                Point3::new(-1.0 + 1e-13, 0.5, 0.25),
                Point3::new(0.0, 0.7071067811865476, -0.3333333333333333),
            ],
            triangles: vec![[0, 1, 2]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.obj");
        let p2 = dir.path().join("b.obj");
        export_mesh(&mesh, &p1).unwrap();
        let m1 = import_mesh(&p1).unwrap();
        export_mesh(&m1, &p2).unwrap();
        let m2 = import_mesh(&p2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn malformed_faces_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nf 1 2 9\n").unwrap();
        assert!(matches!(import_mesh(&path), Err(Error::Load(_))));
    }
}

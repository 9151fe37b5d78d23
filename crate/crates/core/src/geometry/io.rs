//! Point-cloud file formats and cloud normalization.
//!
//! Two formats, auto-detected by extension:
//! - `.xyz` — ASCII, one `x y z` triple per line;
//! - `.pcb` — little-endian binary: u64 point count, then f32 triples.

use super::{Point3, PointCloud};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    match extension(path)? {
        CloudFormat::Xyz => {
            let mut w = BufWriter::new(File::create(path)?);
            for p in cloud.points() {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
            w.flush()?;
        }
        CloudFormat::Pcb => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(&(cloud.len() as u64).to_le_bytes())?;
            for p in cloud.points() {
                for v in p.as_array() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match extension(path)? {
        CloudFormat::Xyz => {
            let r = BufReader::new(File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
            let mut pts = Vec::new();
            for (lineno, line) in r.lines().enumerate() {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let mut it = trimmed.split_whitespace();
                let mut coord = [0.0f64; 3];
                for c in coord.iter_mut() {
                    *c = it
                        .next()
                        .ok_or_else(|| {
                            Error::Load(format!("{}:{}: short line", path.display(), lineno + 1))
                        })?
                        .parse::<f64>()
                        .map_err(|e| {
                            Error::Load(format!("{}:{}: {e}", path.display(), lineno + 1))
                        })?;
                }
                pts.push(Point3::from(coord));
            }
            PointCloud::new(pts)
        }
        CloudFormat::Pcb => {
            let mut r = BufReader::new(File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
            let mut header = [0u8; 8];
            r.read_exact(&mut header)
                .map_err(|_| Error::Load(format!("{}: truncated header", path.display())))?;
            let n = u64::from_le_bytes(header) as usize;
            let mut buf = vec![0u8; n * 12];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Load(format!("{}: truncated payload", path.display())))?;
            let pts = buf
                .chunks_exact(12)
                .map(|c| {
                    Point3::new(
                        f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                        f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
                        f32::from_le_bytes(c[8..12].try_into().unwrap()) as f64,
                    )
                })
                .collect();
            PointCloud::new(pts)
        }
    }
}

enum CloudFormat {
    Xyz,
    Pcb,
}

fn extension(path: &Path) -> Result<CloudFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => Ok(CloudFormat::Xyz),
        Some("pcb") => Ok(CloudFormat::Pcb),
        other => Err(Error::Argument(format!(
            "unknown cloud format {other:?} for {} (expected .xyz or .pcb)",
            path.display()
        ))),
    }
}

/// Recenter-and-rescale mapping applied to an external cloud so that it
/// fits in [-1, 1]^3. Invertible, for mapping reconstructions back.
#[derive(Debug, Clone, Copy)]
pub struct NormalizeTransform {
    pub center: Point3,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: &Point3) -> Point3 {
        p.sub(&self.center).scale(self.scale)
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        p.scale(1.0 / self.scale).add(&self.center)
    }
}

/// Recenters a cloud on its bounding-box center and scales it so the
/// largest half-extent becomes 0.9, leaving headroom inside the unit cube.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, NormalizeTransform) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        let a = p.as_array();
        for i in 0..3 {
            lo[i] = lo[i].min(a[i]);
            hi[i] = hi[i].max(a[i]);
        }
    }
    let center = Point3::new(
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    );
    let half = (0..3).map(|i| 0.5 * (hi[i] - lo[i])).fold(0.0, f64::max);
    let scale = if half > 0.0 { 0.9 / half } else { 1.0 };
    let t = NormalizeTransform { center, scale };
    let pts = cloud.points().iter().map(|p| t.apply(p)).collect();
    (PointCloud::new(pts).expect("nonempty"), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_surface, Pose, ShapeFamily, ShapeInstance};

    #[test]
    fn xyz_round_trip() {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "s")
            .unwrap();
        let cloud = sample_surface(&s, 64, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        save_cloud(&cloud, &path).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn pcb_round_trip_is_f32_exact() {
        let s = ShapeInstance::new(ShapeFamily::Sphere { radius: 0.5 }, Pose::default(), "s")
            .unwrap();
        let cloud = sample_surface(&s, 64, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pcb");
        save_cloud(&cloud, &path).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.len(), cloud.len());
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!(a.x as f32, b.x as f32);
            assert!((a.x - b.x).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_extension_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cloud(&dir.path().join("c.ply")).is_err());
    }

    #[test]
    fn truncated_pcb_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pcb");
        std::fs::write(&path, 100u64.to_le_bytes()).unwrap();
        assert!(matches!(load_cloud(&path), Err(Error::Load(_))));
    }

    #[test]
    fn normalization_fits_unit_cube() {
        let pts = vec![
            Point3::new(10.0, 5.0, -3.0),
            Point3::new(14.0, 6.0, -2.0),
            Point3::new(12.0, 5.5, -2.5),
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let (norm, t) = normalize_cloud(&cloud);
        for p in norm.points() {
            assert!(p.x.abs() <= 0.9 + 1e-12);
            assert!(p.y.abs() <= 0.9 + 1e-12);
            assert!(p.z.abs() <= 0.9 + 1e-12);
        }
        // Invertible.
        for (orig, n) in cloud.points().iter().zip(norm.points()) {
            let back = t.invert(n);
            assert!(orig.dist(&back) < 1e-12);
        }
    }
}

//! Desk-benchmark generation and the on-disk dataset layout.
//!
//! A dataset directory holds one manifest JSON plus one cloud file per
//! instance. The manifest records every instance's analytic shape; the
//! loader is what enforces the label boundary: unlabeled instances come
//! back as bare clouds with no SDF operator attached.

use crate::error::{Error, Result};
use crate::geometry::{
    sample_surface, save_cloud, load_cloud, PointCloud, Pose, ShapeFamily, ShapeInstance,
};
use crate::rng::rng_for;
use crate::training::{
    LabeledDataset, LabeledInstance, UnlabeledDataset, UnlabeledInstance,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub shape: ShapeInstance,
    pub cloud_path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub cloud_size: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Instance counts for the generated benchmark.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchmarkCounts {
    /// Instances per labeled category (sphere, box, capsule).
    pub labeled_per_category: usize,
    /// Unlabeled cylinder instances.
    pub unlabeled: usize,
    /// Instances per test category (torus, composite-union).
    pub test_per_category: usize,
}

impl Default for BenchmarkCounts {
    fn default() -> Self {
        Self {
            labeled_per_category: 20,
            unlabeled: 20,
            test_per_category: 10,
        }
    }
}

/// A held-out test instance: shape oracle plus conditioning cloud.
#[derive(Debug, Clone)]
pub struct TestInstance {
    pub id: String,
    pub shape: ShapeInstance,
    pub cloud: PointCloud,
}

/// The three splits loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub labeled: LabeledDataset,
    pub unlabeled: UnlabeledDataset,
    pub test: Vec<TestInstance>,
}

fn range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A random instance of one family, posed to stay inside the unit cube.
fn random_instance(kind: &str, category: &str, rng: &mut impl Rng) -> Result<ShapeInstance> {
    let family = match kind {
        "sphere" => ShapeFamily::Sphere {
            radius: range(rng, 0.35, 0.5),
        },
        "box" => ShapeFamily::Box {
            half_extents: [
                range(rng, 0.25, 0.45),
                range(rng, 0.25, 0.45),
                range(rng, 0.25, 0.45),
            ],
        },
        "capsule" => ShapeFamily::Capsule {
            half_height: range(rng, 0.25, 0.35),
            radius: range(rng, 0.18, 0.28),
        },
        "cylinder" => ShapeFamily::Cylinder {
            half_height: range(rng, 0.3, 0.45),
            radius: range(rng, 0.25, 0.4),
        },
        "torus" => {
            let major = range(rng, 0.45, 0.55);
            ShapeFamily::Torus {
                major_radius: major,
                minor_radius: range(rng, 0.15, f64::min(0.22, major * 0.45)),
            }
        }
        "composite-union" => {
            let r = range(rng, 0.2, 0.3);
            let hx = range(rng, 0.15, 0.25);
            let offset = range(rng, 0.15, 0.3);
            ShapeFamily::CompositeUnion {
                parts: vec![
                    ShapeInstance::new(
                        ShapeFamily::Sphere { radius: r },
                        Pose {
                            translation: [-offset, 0.0, 0.0],
                            scale: 1.0,
                        },
                        category,
                    )?,
                    ShapeInstance::new(
                        ShapeFamily::Box {
                            half_extents: [hx, range(rng, 0.15, 0.3), range(rng, 0.15, 0.3)],
                        },
                        Pose {
                            translation: [offset, 0.0, 0.0],
                            scale: 1.0,
                        },
                        category,
                    )?,
                ],
            }
        }
        other => return Err(Error::Config(format!("unknown shape family `{other}`"))),
    };
    // Unposed extent decides how much room is left for scale + translation.
    // Pose variation is kept moderate: the benchmark tests cross-category
    // generalization, not pose regression.
    let probe = ShapeInstance {
        family: family.clone(),
        pose: Pose::default(),
        category_id: category.to_string(),
    };
    let ext = probe.world_extent();
    let max_ext = ext.iter().fold(0.0f64, |a, &b| a.max(b));
    let scale = range(rng, 0.85, (0.95 / max_ext).min(1.05));
    let mut translation = [0.0; 3];
    for (a, t) in translation.iter_mut().enumerate() {
        let room = (0.95 - ext[a] * scale).max(0.0).min(0.12);
        *t = range(rng, -room, room);
    }
    ShapeInstance::new(family, Pose { translation, scale }, category)
}

/// Generates the desk benchmark into `root`: labeled {sphere, box, capsule},
/// unlabeled {cylinder}, test {torus, composite-union}, plus the manifest.
/// Identical seeds produce identical files and checksums.
pub fn generate_desk_benchmark(
    root: &Path,
    seed: u64,
    cloud_size: usize,
    counts: &BenchmarkCounts,
) -> Result<DatasetManifest> {
    if cloud_size == 0 {
        return Err(Error::Argument("cloud size must be >= 1".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut entries = Vec::new();
    let make = |kind: &str, split: Split, count: usize, entries: &mut Vec<ManifestEntry>| -> Result<()> {
        for k in 0..count {
            let id = format!("{kind}-{k:03}");
            let mut rng = rng_for(seed, &[0xda7a, hash_tag(kind), k as u64]);
            let shape = random_instance(kind, kind, &mut rng)?;
            let cloud = sample_surface(
                &shape,
                cloud_size,
                crate::rng::derive_seed(seed, &[0xc10d, hash_tag(kind), k as u64]),
            )?;
            let cloud_path = format!("{id}.xyz");
            save_cloud(&cloud, &root.join(&cloud_path))?;
            let digest = file_sha256(&root.join(&cloud_path))?;
            entries.push(ManifestEntry {
                id,
                split,
                shape,
                cloud_path,
                sha256: digest,
            });
        }
        Ok(())
    };
    for kind in ["sphere", "box", "capsule"] {
        make(kind, Split::Labeled, counts.labeled_per_category, &mut entries)?;
    }
    make("cylinder", Split::Unlabeled, counts.unlabeled, &mut entries)?;
    for kind in ["torus", "composite-union"] {
        make(kind, Split::Test, counts.test_per_category, &mut entries)?;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        cloud_size,
        entries,
    };
    save_manifest(&manifest, &root.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn hash_tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Load(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads clouds for every entry and splits them. Validates category
/// disjointness across splits and per-file checksums.
pub fn load_datasets(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.entries {
        let cloud_file = root.join(&entry.cloud_path);
        let digest = file_sha256(&cloud_file)?;
        if digest != entry.sha256 {
            return Err(Error::Load(format!(
                "{}: checksum mismatch (expected {}, got {digest})",
                cloud_file.display(),
                entry.sha256
            )));
        }
        let cloud = load_cloud(&cloud_file)?;
        match entry.split {
            Split::Labeled => labeled.push(LabeledInstance {
                id: entry.id.clone(),
                shape: entry.shape.clone(),
                cloud,
            }),
            Split::Unlabeled => unlabeled.push(UnlabeledInstance {
                id: entry.id.clone(),
                category_id: entry.shape.category_id.clone(),
                cloud,
            }),
            Split::Test => test.push(TestInstance {
                id: entry.id.clone(),
                shape: entry.shape.clone(),
                cloud,
            }),
        }
    }
    let labeled = LabeledDataset::new(labeled)?;
    let unlabeled = UnlabeledDataset::new(unlabeled)?;
    unlabeled.check_disjoint_from(&labeled)?;
    Ok(LoadedDataset {
        labeled,
        unlabeled,
        test,
    })
}

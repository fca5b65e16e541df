//! On-disk dataset layout:
//!
//! ```text
//! <root>/rig.json
//! <root>/samples/<id>/<camera>.f32    planar RGB float32, little endian
//! <root>/samples/<id>/<camera>.json   shape and camera name
//! <root>/samples/<id>/labels.json
//! <root>/manifest.json                written last
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{derive_labels, generate_scene, render_rig, sample_rng, EgoPose, Palette, SceneSpec};
use crate::camera::{CameraName, CameraRig};
use crate::error::{Error, Result};
use crate::types::{BevGridSpec, Image, ObjectClass, PolygonLabel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RIG_FILE: &str = "rig.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSidecar {
    pub camera: CameraName,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub dtype: String,
}

/// Contents of `labels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub frame_id: u64,
    pub split: String,
    pub ego: EgoPose,
    pub labels: Vec<PolygonLabel>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            if l.corners.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("frame {}: label {i} has non-finite corners", self.frame_id)));
            }
            if crate::polygon::signed_area(&l.corners) >= 0.0 {
                return Err(Error::Dataset(format!("frame {}: label {i} is not clockwise", self.frame_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: String,
    pub parking: usize,
    pub vehicles: usize,
    /// SHA-256 over the sample's files.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub scene: SceneSpec,
    pub grid: BevGridSpec,
    pub counts: BTreeMap<String, usize>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Loads the manifest; a missing manifest marks an incomplete dataset.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Dataset(format!(
                "{} has no {MANIFEST_FILE}; the dataset is missing or was not completely generated",
                root.as_ref().display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported dataset format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn ids(&self, split: &str) -> Vec<u64> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sample_dir(root: &Path, id: u64) -> PathBuf {
    root.join("samples").join(format!("{id:06}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn image_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Renders and writes one sample; returns its manifest entry.
fn write_sample(
    root: &Path,
    id: u64,
    split: &str,
    spec: &SceneSpec,
    rig: &CameraRig,
    grid: &BevGridSpec,
    seed: u64,
) -> Result<ManifestEntry> {
    let world = generate_scene(spec, &mut sample_rng(seed, id))?;
    let labels = derive_labels(&world, rig, grid);
    let images = render_rig(&world.in_vehicle_frame(), rig, &Palette::default());
    let dir = sample_dir(root, id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut digest = Sha256::new();
    for (cam, img) in rig.cameras.iter().zip(&images) {
        let name = cam.name.as_str();
        let bytes = image_bytes(img);
        digest.update(&bytes);
        write(&dir.join(format!("{name}.f32")), &bytes)?;
        let side = ImageSidecar {
            camera: cam.name,
            shape: [Image::CHANNELS, img.height, img.width],
            dtype: "float32".into(),
        };
        write(&dir.join(format!("{name}.json")), &serde_json::to_vec_pretty(&side).expect("sidecar serializes"))?;
    }
    let record = SampleRecord {
        frame_id: id,
        split: split.into(),
        ego: world.ego,
        labels,
    };
    let json = serde_json::to_vec_pretty(&record).expect("record serializes");
    digest.update(&json);
    write(&dir.join("labels.json"), &json)?;
    let count = |c| record.labels.iter().filter(|l| l.class == c).count();
    Ok(ManifestEntry {
        id,
        split: split.into(),
        parking: count(ObjectClass::Parking),
        vehicles: count(ObjectClass::Vehicle),
        digest: hex(&digest.finalize()),
    })
}

/// Generates `splits` (name, count) samples with consecutive frame ids and
/// writes the manifest once every sample is on disk.
pub fn generate_dataset(
    root: impl AsRef<Path>,
    spec: &SceneSpec,
    rig: &CameraRig,
    grid: &BevGridSpec,
    splits: &[(&str, usize)],
    seed: u64,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    rig.save(root.join(RIG_FILE))?;
    let mut jobs = Vec::new();
    let mut next = 0u64;
    for (name, n) in splits {
        for _ in 0..*n {
            jobs.push((next, name.to_string()));
            next += 1;
        }
    }
    let samples = jobs
        .par_iter()
        .map(|(id, split)| write_sample(root, *id, split, spec, rig, grid, seed))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        scene: spec.clone(),
        grid: *grid,
        counts: splits.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        samples,
    };
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    write(&tmp, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub record: SampleRecord,
    /// In rig order.
    pub images: Vec<Image>,
}

/// Reads one sample, checking every sidecar against the rig.
pub fn load_sample(root: impl AsRef<Path>, rig: &CameraRig, id: u64) -> Result<LoadedSample> {
    let dir = sample_dir(root.as_ref(), id);
    let path = dir.join("labels.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: SampleRecord = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    record.validate()?;
    let mut images = Vec::with_capacity(rig.cameras.len());
    for cam in &rig.cameras {
        let name = cam.name.as_str();
        let side_path = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: ImageSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(side_path.display().to_string(), e))?;
        let [w, h] = cam.intrinsics.image_size();
        if side.camera != cam.name || side.shape != [Image::CHANNELS, h, w] || side.dtype != "float32" {
            return Err(Error::Dataset(format!(
                "{}: sidecar {:?} does not match camera '{name}' ({w}x{h})",
                side_path.display(),
                side
            )));
        }
        let raw_path = dir.join(format!("{name}.f32"));
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        if bytes.len() != 4 * Image::CHANNELS * w * h {
            return Err(Error::Dataset(format!("{}: expected {} bytes, found {}", raw_path.display(), 4 * 3 * w * h, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        images.push(Image { width: w, height: h, data });
    }
    Ok(LoadedSample { record, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            slots_per_row: [3, 4],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let rig = CameraRig::synthetic_default();
        let grid = BevGridSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(a.path(), &spec(), &rig, &grid, &[("train", 2), ("val", 1)], 5).unwrap();
        let mb = generate_dataset(b.path(), &spec(), &rig, &grid, &[("train", 2), ("val", 1)], 5).unwrap();
        assert_eq!(ma.hash(), mb.hash());
        assert_eq!(DatasetManifest::load(a.path()).unwrap(), ma);
        assert_eq!(ma.ids("val"), vec![2]);
        let s = load_sample(a.path(), &rig, 1).unwrap();
        assert_eq!(s.images.len(), 4);
        assert_eq!(s.record.frame_id, 1);
        assert_eq!(CameraRig::load(a.path().join(RIG_FILE)).unwrap(), rig);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = tempfile::tempdir().unwrap();
        let m = generate_dataset(d.path(), &spec(), &CameraRig::synthetic_default(), &BevGridSpec::default(), &[("train", 0)], 1)
            .unwrap();
        assert!(m.samples.is_empty());
        assert!(DatasetManifest::load(d.path()).is_ok());
    }

    #[test]
    fn missing_manifest_is_refused() {
        let d = tempfile::tempdir().unwrap();
        let e = DatasetManifest::load(d.path()).unwrap_err();
        assert!(e.to_string().contains("manifest.json"), "{e}");
    }

    #[test]
    fn corrupt_sidecar_rejected() {
        let rig = CameraRig::synthetic_default();
        let d = tempfile::tempdir().unwrap();
        generate_dataset(d.path(), &spec(), &rig, &BevGridSpec::default(), &[("train", 1)], 2).unwrap();
        let p = sample_dir(d.path(), 0).join("rear.json");
        let text = fs::read_to_string(&p).unwrap().replace("float32", "float16");
        fs::write(&p, text).unwrap();
        assert!(load_sample(d.path(), &rig, 0).is_err());
    }
}

//! On-disk dataset layout and split manifests.
//!
//! ```text
//! root/images/<frame_id>.png                      RGB
//! root/masks/{silhouette,ligament,ridge}/<id>.png 8-bit, foreground ≥ 128
//! root/depth/<frame_id>.png                       optional, 16-bit
//! root/manifest.json
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::depth::{self, DepthProvider, PrecomputedDepth};
use super::FrameSample;
use crate::{Error, Result, CLASSES};

/// Annotation flag letters in class order.
pub const FLAGS: [&str; 3] = ["s", "l", "r"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub frame_id: String,
    pub patient_id: String,
    pub split: Split,
    /// Subset of `s`, `l`, `r`.
    pub flags: Vec<String>,
}

impl ManifestRecord {
    pub fn present(&self) -> [bool; 3] {
        FLAGS.map(|f| self.flags.iter().any(|g| g == f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub entries: Vec<ManifestRecord>,
}

impl SplitManifest {
    /// Validates uniqueness, flags and patient-disjointness.
    pub fn new(entries: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut patient_split: HashMap<&str, Split> = HashMap::new();
        for r in &self.entries {
            if !ids.insert(r.frame_id.as_str()) {
                return Err(Error::Schema(format!("frame `{}` listed twice", r.frame_id)));
            }
            if let Some(bad) = r.flags.iter().find(|f| !FLAGS.contains(&f.as_str())) {
                return Err(Error::Schema(format!("frame `{}` has unknown flag `{bad}`", r.frame_id)));
            }
            match patient_split.get(r.patient_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(Error::Schema(format!(
                        "patient `{}` appears in both {s} and {} (frame `{}`)",
                        r.patient_id, r.split, r.frame_id
                    )));
                }
                _ => {
                    patient_split.insert(&r.patient_id, r.split);
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.entries {
            *c.entry(r.split).or_default() += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.entries.iter().filter(move |r| r.split == split)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn read_rgb(path: &Path) -> std::result::Result<Array3<f32>, image::ImageError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Frames of `split` in manifest order. Depth comes from `root/depth/` when
/// the file exists, otherwise from `fallback`.
pub fn load_l3d(
    root: &Path,
    manifest: &SplitManifest,
    split: Split,
    fallback: &dyn DepthProvider,
) -> Result<Vec<FrameSample>> {
    manifest.validate()?;
    let precomputed = PrecomputedDepth::new(root.join("depth"));
    let mut out = Vec::new();
    for r in manifest.split(split) {
        let ingest = |reason: String| Error::Ingestion { frame_id: r.frame_id.clone(), reason };
        let image_path = root.join("images").join(format!("{}.png", r.frame_id));
        if !image_path.exists() {
            return Err(ingest(format!("missing image {}", image_path.display())));
        }
        let rgb = read_rgb(&image_path).map_err(|e| ingest(e.to_string()))?;
        let (_, h, w) = rgb.dim();
        let present = r.present();
        let mut masks = Array3::<f32>::zeros((3, h, w));
        for (c, class) in CLASSES.iter().enumerate() {
            if !present[c] {
                continue;
            }
            let path = root.join("masks").join(class).join(format!("{}.png", r.frame_id));
            if !path.exists() {
                return Err(ingest(format!("flagged {class} but {} is missing", path.display())));
            }
            let m = image::open(&path).map_err(|e| ingest(e.to_string()))?.into_luma8();
            if m.dimensions() != (w as u32, h as u32) {
                return Err(Error::Schema(format!(
                    "frame `{}`: {class} mask is {:?}, image is {w}×{h}",
                    r.frame_id,
                    m.dimensions()
                )));
            }
            for (i, &v) in m.as_raw().iter().enumerate() {
                masks[[c, i / w, i % w]] = (v >= 128) as u8 as f32;
            }
        }
        let depth = if precomputed.path(&r.frame_id).exists() {
            depth::provide(&precomputed, &r.frame_id, &rgb)?
        } else {
            depth::provide(fallback, &r.frame_id, &rgb)?
        };
        out.push(FrameSample { frame_id: r.frame_id.clone(), patient_id: r.patient_id.clone(), rgb, depth, masks, present });
    }
    Ok(out)
}

/// Writes frames in the layout read by [`load_l3d`], with a manifest.
pub fn write_dataset(root: &Path, frames: &[(FrameSample, Split)]) -> Result<SplitManifest> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("depth"))?;
    for class in CLASSES {
        std::fs::create_dir_all(root.join("masks").join(class))?;
    }
    let mut entries = Vec::with_capacity(frames.len());
    for (f, split) in frames {
        f.validate()?;
        let (h, w) = f.size();
        let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut rgb = RgbImage::new(w as u32, h as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            *px = image::Rgb([to8(f.rgb[[0, y, x]]), to8(f.rgb[[1, y, x]]), to8(f.rgb[[2, y, x]])]);
        }
        rgb.save(root.join("images").join(format!("{}.png", f.frame_id)))?;
        depth::write_depth_png(&root.join("depth").join(format!("{}.png", f.frame_id)), &f.depth)?;
        let mut flags = Vec::new();
        for (c, class) in CLASSES.iter().enumerate() {
            if !f.present[c] {
                continue;
            }
            flags.push(FLAGS[c].to_string());
            let mut m = GrayImage::new(w as u32, h as u32);
            for (x, y, px) in m.enumerate_pixels_mut() {
                px.0[0] = if f.masks[[c, y as usize, x as usize]] > 0.5 { 255 } else { 0 };
            }
            m.save(root.join("masks").join(class).join(format!("{}.png", f.frame_id)))?;
        }
        entries.push(ManifestRecord { frame_id: f.frame_id.clone(), patient_id: f.patient_id.clone(), split: *split, flags });
    }
    let manifest = SplitManifest::new(entries)?;
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, LuminanceProxy, SynthConfig};

    fn rec(id: &str, patient: &str, split: Split, flags: &[&str]) -> ManifestRecord {
        ManifestRecord {
            frame_id: id.into(),
            patient_id: patient.into(),
            split,
            flags: flags.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn shared_patient_is_rejected() {
        let err = SplitManifest::new(vec![rec("a", "p1", Split::Train, &[]), rec("b", "p1", Split::Test, &[])]);
        assert!(matches!(err, Err(Error::Schema(_))));
        let dup = SplitManifest::new(vec![rec("a", "p1", Split::Train, &[]), rec("a", "p2", Split::Train, &[])]);
        assert!(matches!(dup, Err(Error::Schema(_))));
    }

    #[test]
    fn flags_map_to_presence() {
        assert_eq!(rec("a", "p", Split::Train, &["r", "s"]).present(), [true, false, true]);
    }

    #[test]
    fn write_then_load_round_trip() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let cfg = SynthConfig { seed: 5, count: 3, resolution: 64, curve_thickness_px: 3, ..SynthConfig::default() };
        let mut frames = Vec::new();
        for i in 0..3 {
            let mut f = generate_synthetic(&cfg, i)?;
            f.patient_id = format!("p{i}");
            frames.push((f, if i < 2 { Split::Train } else { Split::Val }));
        }
        frames[1].0.masks.index_axis_mut(ndarray::Axis(0), 1).fill(0.0);
        frames[1].0.present[1] = false;
        let manifest = write_dataset(dir.path(), &frames)?;
        let reread = SplitManifest::load(&dir.path().join("manifest.json"))?;
        assert_eq!(reread, manifest);
        let train = load_l3d(dir.path(), &reread, Split::Train, &LuminanceProxy::default())?;
        assert_eq!(train.len(), 2);
        assert!(!train[1].present[1]);
        for (got, (want, _)) in train.iter().zip(&frames) {
            assert_eq!(got.masks, want.masks);
            for (a, b) in got.depth.iter().zip(want.depth.iter()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
            for (a, b) in got.rgb.iter().zip(want.rgb.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        assert!(load_l3d(dir.path(), &reread, Split::Test, &LuminanceProxy::default())?.is_empty());

        std::fs::remove_file(dir.path().join("images").join(format!("{}.png", frames[0].0.frame_id)))?;
        match load_l3d(dir.path(), &reread, Split::Train, &LuminanceProxy::default()) {
            Err(Error::Ingestion { frame_id, .. }) => assert_eq!(frame_id, frames[0].0.frame_id),
            other => panic!("expected an ingestion error, got {other:?}"),
        }
        Ok(())
    }

    #[test]
    fn mask_size_mismatch_is_schema_error() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let cfg = SynthConfig { seed: 5, count: 1, resolution: 64, curve_thickness_px: 3, ..SynthConfig::default() };
        let mut f = generate_synthetic(&cfg, 0)?;
        f.present = [true, false, false];
        f.masks.index_axis_mut(ndarray::Axis(0), 1).fill(0.0);
        f.masks.index_axis_mut(ndarray::Axis(0), 2).fill(0.0);
        let m = write_dataset(dir.path(), &[(f.clone(), Split::Train)])?;
        GrayImage::new(10, 10).save(dir.path().join("masks/silhouette").join(format!("{}.png", f.frame_id)))?;
        assert!(matches!(load_l3d(dir.path(), &m, Split::Train, &LuminanceProxy::default()), Err(Error::Schema(_))));
        Ok(())
    }
}

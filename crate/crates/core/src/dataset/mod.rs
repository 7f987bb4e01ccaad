//! Frames, manifests, synthetic data, augmentation and depth providers.

pub mod augment;
pub mod depth;
pub mod l3d;
pub mod synth;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, Axis};

use crate::{Error, Result};

pub use augment::{augment, hflip, resize_sample, AugmentParams};
pub use depth::{DepthProvider, LuminanceProxy, PrecomputedDepth};
pub use l3d::{load_l3d, write_dataset, ManifestRecord, Split, SplitManifest};
pub use synth::{generate_synthetic, SynthConfig};

/// One annotated RGB-D frame. Arrays are channel-first with values in `[0, 1]`;
/// mask channels follow [`crate::CLASSES`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame_id: String,
    pub patient_id: String,
    pub rgb: Array3<f32>,
    pub depth: Array3<f32>,
    pub masks: Array3<f32>,
    pub present: [bool; 3],
}

impl FrameSample {
    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        let d = self.rgb.dim();
        (d.1, d.2)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        let schema = |msg: String| Error::Schema(format!("frame `{}`: {msg}", self.frame_id));
        if self.rgb.dim().0 != 3 || self.depth.dim() != (1, h, w) || self.masks.dim() != (3, h, w) {
            return Err(schema(format!(
                "rgb {:?}, depth {:?} and masks {:?} disagree",
                self.rgb.dim(),
                self.depth.dim(),
                self.masks.dim()
            )));
        }
        if self.masks.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(schema("masks must be exactly 0 or 1".into()));
        }
        for c in 0..3 {
            if !self.present[c] && self.masks.index_axis(Axis(0), c).iter().any(|&m| m != 0.0) {
                return Err(schema(format!("{} is absent but its mask is not empty", crate::CLASSES[c])));
            }
        }
        Ok(())
    }

    /// Foreground pixel count per class.
    pub fn foreground(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for (c, count) in n.iter_mut().enumerate() {
            *count = self.masks.slice(s![c, .., ..]).iter().filter(|&&m| m > 0.5).count();
        }
        n
    }
}

/// Frames stacked into model inputs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frame_ids: Vec<String>,
    /// `[B, 3, H, W]`.
    pub rgb: Tensor,
    /// `[B, 1, H, W]`.
    pub depth: Tensor,
    /// `[B, 3, H, W]`.
    pub masks: Tensor,
    pub present: Vec<[bool; 3]>,
}

fn stack(arrays: Vec<&Array3<f32>>, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = arrays[0].dim();
    let mut data = Vec::with_capacity(arrays.len() * c * h * w);
    for a in &arrays {
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Batch {
    /// Stacks samples, resizing any that are not `resolution`².
    pub fn new(samples: &[&FrameSample], resolution: usize, dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("cannot build an empty batch".into()));
        }
        let resized: Vec<std::borrow::Cow<'_, FrameSample>> = samples
            .iter()
            .map(|s| {
                if s.size() == (resolution, resolution) {
                    std::borrow::Cow::Borrowed(*s)
                } else {
                    std::borrow::Cow::Owned(resize_sample(s, resolution, resolution))
                }
            })
            .collect();
        Ok(Self {
            frame_ids: resized.iter().map(|s| s.frame_id.clone()).collect(),
            rgb: stack(resized.iter().map(|s| &s.rgb).collect(), dtype)?,
            depth: stack(resized.iter().map(|s| &s.depth).collect(), dtype)?,
            masks: stack(resized.iter().map(|s| &s.masks).collect(), dtype)?,
            present: resized.iter().map(|s| s.present).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

//! Joint geometric augmentation of rgb, depth and masks.
//!
//! Every transform is an inverse map from output to source coordinates, shared
//! by all arrays of a frame. Images resample bilinearly, masks by nearest
//! neighbour so they stay binary.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FrameSample;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MIN_CROP_SCALE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    /// Side of the crop window relative to the frame.
    pub crop_scale: f64,
    /// Position of the crop window in `[0, 1]²`, as a fraction of the free margin.
    pub crop_offset: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { flip: false, rotation_deg: 0.0, crop_scale: 1.0, crop_offset: (0.0, 0.0) };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            crop_scale: rng.random_range(MIN_CROP_SCALE..=1.0),
            crop_offset: (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Source `(x, y)` for output pixel `(u, v)` in a `h × w` frame.
    pub fn source(&self, u: usize, v: usize, h: usize, w: usize) -> (f64, f64) {
        let (wf, hf) = (w as f64, h as f64);
        let s = self.crop_scale;
        // crop then resize back
        let x = self.crop_offset.0 * (1.0 - s) * (wf - 1.0) + u as f64 * s;
        let y = self.crop_offset.1 * (1.0 - s) * (hf - 1.0) + v as f64 * s;
        // undo the rotation about the frame centre
        let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
        let (sin, cos) = (-self.rotation_deg.to_radians()).sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let (x, y) = (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy);
        if self.flip {
            (wf - 1.0 - x, y)
        } else {
            (x, y)
        }
    }
}

fn remap(src: &Array3<f32>, h: usize, w: usize, map: impl Fn(usize, usize) -> (f64, f64), nearest: bool) -> Array3<f32> {
    let (c, sh, sw) = src.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < sw && (y as usize) < sh;
    for v in 0..h {
        for u in 0..w {
            let (x, y) = map(u, v);
            if nearest {
                let (xi, yi) = (x.round() as isize, y.round() as isize);
                if inside(xi, yi) {
                    for ch in 0..c {
                        out[[ch, v, u]] = src[[ch, yi as usize, xi as usize]];
                    }
                }
                continue;
            }
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let taps = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1, y0, fx * (1.0 - fy)), (x0, y0 + 1, (1.0 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)];
            for ch in 0..c {
                let mut acc = 0f32;
                for &(xx, yy, wt) in &taps {
                    if wt != 0.0 && inside(xx, yy) {
                        acc += wt * src[[ch, yy as usize, xx as usize]];
                    }
                }
                out[[ch, v, u]] = acc;
            }
        }
    }
    out
}

fn with_arrays(sample: &FrameSample, rgb: Array3<f32>, depth: Array3<f32>, masks: Array3<f32>) -> FrameSample {
    let mut present = [false; 3];
    for (c, p) in present.iter_mut().enumerate() {
        *p = sample.present[c] && masks.index_axis(ndarray::Axis(0), c).iter().any(|&m| m > 0.0);
    }
    FrameSample {
        frame_id: sample.frame_id.clone(),
        patient_id: sample.patient_id.clone(),
        rgb,
        depth,
        masks,
        present,
    }
}

/// Applies `params` to every array of the frame. A class whose mask is cropped
/// away entirely is marked absent.
pub fn apply(sample: &FrameSample, params: &AugmentParams) -> FrameSample {
    let (h, w) = sample.size();
    let map = |u, v| params.source(u, v, h, w);
    with_arrays(
        sample,
        remap(&sample.rgb, h, w, map, false),
        remap(&sample.depth, h, w, map, false),
        remap(&sample.masks, h, w, map, true),
    )
}

/// Random flip, rotation and crop drawn from `seed`.
pub fn augment(sample: &FrameSample, seed: u64) -> FrameSample {
    apply(sample, &AugmentParams::from_seed(seed))
}

pub fn hflip(sample: &FrameSample) -> FrameSample {
    apply(sample, &AugmentParams { flip: true, ..AugmentParams::IDENTITY })
}

/// Resamples a frame to `h × w` (bilinear for images, nearest for masks).
pub fn resize_sample(sample: &FrameSample, h: usize, w: usize) -> FrameSample {
    let (sh, sw) = sample.size();
    let (ry, rx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    let map = |u: usize, v: usize| {
        (((u as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64), ((v as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64))
    };
    with_arrays(
        sample,
        remap(&sample.rgb, h, w, map, false),
        remap(&sample.depth, h, w, map, false),
        remap(&sample.masks, h, w, map, true),
    )
}

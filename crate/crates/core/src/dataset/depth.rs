//! Depth providers: precomputed maps on disk or a luminance stand-in.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array3;

use crate::{Error, Result};

/// Produces a `[1, H, W]` relative depth map in `[0, 1]` for a frame.
pub trait DepthProvider {
    fn depth(&self, frame_id: &str, rgb: &Array3<f32>) -> Result<Array3<f32>>;
}

/// Runs a provider and checks that its output matches the frame.
pub fn provide(provider: &dyn DepthProvider, frame_id: &str, rgb: &Array3<f32>) -> Result<Array3<f32>> {
    let d = provider.depth(frame_id, rgb)?;
    let (_, h, w) = rgb.dim();
    if d.dim() != (1, h, w) {
        return Err(Error::Provider(format!("frame `{frame_id}`: depth {:?} for a {h}×{w} image", d.dim())));
    }
    Ok(d)
}

/// Grayscale, Gaussian-blurred, min-max normalized luminance.
#[derive(Debug, Clone, Copy)]
pub struct LuminanceProxy {
    /// Blur width relative to the image width.
    pub sigma_frac: f64,
}

impl Default for LuminanceProxy {
    fn default() -> Self {
        Self { sigma_frac: 1.0 / 64.0 }
    }
}

fn blur_1d(data: &mut [f32], h: usize, w: usize, kernel: &[f32], horizontal: bool) {
    let r = kernel.len() as isize / 2;
    let src = data.to_vec();
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    for line in 0..lines {
        for i in 0..len {
            let mut acc = 0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, len as isize - 1) as usize;
                let idx = if horizontal { line * w + j } else { j * w + line };
                acc += kv * src[idx];
            }
            let idx = if horizontal { line * w + i } else { i * w + line };
            data[idx] = acc;
        }
    }
}

impl DepthProvider for LuminanceProxy {
    fn depth(&self, _frame_id: &str, rgb: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = rgb.dim();
        if c != 3 {
            return Err(Error::Provider(format!("expected 3 colour channels, got {c}")));
        }
        let mut g: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.299 * rgb[[0, y, x]] + 0.587 * rgb[[1, y, x]] + 0.114 * rgb[[2, y, x]]
            })
            .collect();
        let sigma = (self.sigma_frac * w as f64).max(0.5);
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        blur_1d(&mut g, h, w, &kernel, true);
        blur_1d(&mut g, h, w, &kernel, false);
        let (lo, hi) = g.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        let out = g.iter().map(|&v| if range > 1e-6 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 }).collect();
        Ok(Array3::from_shape_vec((1, h, w), out).expect("length matches"))
    }
}

/// Reads `<dir>/<frame_id>.png` as 16-bit grayscale.
#[derive(Debug, Clone)]
pub struct PrecomputedDepth {
    pub dir: PathBuf,
}

impl PrecomputedDepth {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, frame_id: &str) -> PathBuf {
        self.dir.join(format!("{frame_id}.png"))
    }
}

impl DepthProvider for PrecomputedDepth {
    fn depth(&self, frame_id: &str, _rgb: &Array3<f32>) -> Result<Array3<f32>> {
        read_depth_png(&self.path(frame_id)).map_err(|e| Error::Provider(format!("frame `{frame_id}`: {e}")))
    }
}

pub fn read_depth_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Ok(Array3::from_shape_vec((1, h as usize, w as usize), data).expect("length matches"))
}

pub fn write_depth_png(path: &Path, depth: &Array3<f32>) -> Result<()> {
    let (_, h, w) = depth.dim();
    let data: Vec<u16> = depth.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("length matches");
    img.save(path)?;
    Ok(())
}

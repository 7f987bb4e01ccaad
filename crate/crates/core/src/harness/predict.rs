//! Probability maps and overlays for a directory of images.

use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;

use super::checkpoint;
use crate::dataset::depth::{provide, DepthProvider, LuminanceProxy, PrecomputedDepth};
use crate::dataset::{resize_sample, Batch, FrameSample};
use crate::model::LandmarkModel;
use crate::{Error, Result};

/// Overlay colours in class order: silhouette blue, ligament green, ridge red.
pub const OVERLAY_COLORS: [[u8; 3]; 3] = [[0, 0, 255], [0, 255, 0], [255, 0, 0]];

pub fn write_prob_png(path: &Path, probs: &Array3<f32>) -> Result<()> {
    let (_, h, w) = probs.dim();
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push((probs[[c, y, x]].clamp(0.0, 1.0) * 65535.0).round() as u16);
            }
        }
    }
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("length matches");
    img.save(path)?;
    Ok(())
}

pub fn read_prob_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f32 / 65535.0))
}

/// Paints every pixel whose class probability reaches `threshold`; later classes win.
pub fn overlay(rgb: &RgbImage, probs: &Array3<f32>, threshold: f32) -> RgbImage {
    let mut out = rgb.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        for (c, color) in OVERLAY_COLORS.iter().enumerate() {
            if probs[[c, y as usize, x as usize]] >= threshold {
                *px = Rgb(*color);
            }
        }
    }
    out
}

fn to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
}

/// Probabilities for one image, returned at the image's own size.
pub fn predict_image(model: &LandmarkModel, img: &RgbImage, frame_id: &str, depth: &dyn DepthProvider) -> Result<Array3<f32>> {
    let rgb = to_array(img);
    let (_, h, w) = rgb.dim();
    let d = provide(depth, frame_id, &rgb)?;
    let frame = FrameSample {
        frame_id: frame_id.to_string(),
        patient_id: String::new(),
        rgb,
        depth: d,
        masks: Array3::zeros((3, h, w)),
        present: [false; 3],
    };
    let r = model.resolution();
    let batch = Batch::new(&[&frame], r, DType::F32)?;
    let probs = model.forward(&batch.rgb, &batch.depth)?.prediction.probs.detach();
    let v = probs.get(0)?.flatten_all()?.to_vec1::<f32>()?;
    let at_model = FrameSample {
        rgb: Array3::from_shape_vec((3, r, r), v).expect("length matches"),
        depth: Array3::zeros((1, r, r)),
        masks: Array3::zeros((3, r, r)),
        ..frame
    };
    Ok(if (h, w) == (r, r) { at_model.rgb } else { resize_sample(&at_model, h, w).rgb })
}

#[derive(Debug, Clone, Default)]
pub struct PredictSummary {
    pub written: Vec<(PathBuf, PathBuf)>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Writes `<stem>_prob.png` (16-bit, one channel per class) and `<stem>_overlay.png`
/// for every image in `images`. Depth comes from `depth_dir` when given.
pub fn predict_dir(model: &LandmarkModel, images: &Path, out: &Path, depth_dir: Option<&Path>) -> Result<PredictSummary> {
    std::fs::create_dir_all(out)?;
    let proxy = LuminanceProxy::default();
    let pre = depth_dir.map(PrecomputedDepth::new);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut summary = PredictSummary::default();
    for path in entries {
        let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let img = match image::open(&path) {
            Ok(i) => i.into_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.skipped.push((path, e.to_string()));
                continue;
            }
        };
        let provider: &dyn DepthProvider = match &pre {
            Some(p) if p.path(&stem).exists() => p,
            _ => &proxy,
        };
        let probs = predict_image(model, &img, &stem, provider)?;
        let prob_path = out.join(format!("{stem}_prob.png"));
        let overlay_path = out.join(format!("{stem}_overlay.png"));
        write_prob_png(&prob_path, &probs)?;
        overlay(&img, &probs, 0.5).save(&overlay_path)?;
        summary.written.push((prob_path, overlay_path));
    }
    if summary.written.is_empty() && !summary.skipped.is_empty() {
        return Err(Error::Ingestion {
            frame_id: images.display().to_string(),
            reason: format!("none of the {} images could be read", summary.skipped.len()),
        });
    }
    Ok(summary)
}

pub fn predict_checkpoint(ckpt: &Path, images: &Path, out: &Path, depth_dir: Option<&Path>) -> Result<PredictSummary> {
    let (model, _, _) = checkpoint::load_model(ckpt, None)?;
    predict_dir(&model, images, out, depth_dir)
}

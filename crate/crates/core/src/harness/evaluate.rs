//! Inference over frame sets and checkpoint evaluation.

use std::path::Path;

use candle_core::DType;
use ndarray::Array3;

use super::checkpoint;
use super::config::TrainConfig;
use super::train::load_frames;
use crate::dataset::{resize_sample, Batch, FrameSample, Split};
use crate::metrics::{self, MetricsReport};
use crate::model::{LandmarkModel, ModelConfig};
use crate::Result;

/// Class probabilities `[3, R, R]` per frame at model resolution.
pub fn predict_probs(model: &LandmarkModel, frames: &[FrameSample], batch_size: usize) -> Result<Vec<Array3<f32>>> {
    let r = model.resolution();
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let refs: Vec<&FrameSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, r, DType::F32)?;
        let probs = model.forward(&batch.rgb, &batch.depth)?.prediction.probs.detach().to_dtype(DType::F32)?;
        for i in 0..chunk.len() {
            let v = probs.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            out.push(Array3::from_shape_vec((3, r, r), v).expect("length matches"));
        }
    }
    Ok(out)
}

/// Metrics of `model` on `frames`, compared at model resolution.
pub fn evaluate_model(model: &LandmarkModel, frames: &[FrameSample], batch_size: usize, threshold: f64) -> Result<MetricsReport> {
    let r = model.resolution();
    let probs = predict_probs(model, frames, batch_size)?;
    let gts: Vec<FrameSample> = frames
        .iter()
        .map(|f| if f.size() == (r, r) { f.clone() } else { resize_sample(f, r, r) })
        .collect();
    let preds: Vec<(String, Array3<f32>)> = frames.iter().map(|f| f.frame_id.clone()).zip(probs).collect();
    metrics::evaluate_split(&preds, &gts, threshold)
}

/// Evaluates the checkpoint in `dir` on `split` of its own dataset. With
/// `requested`, the checkpoint must hold that architecture. Writes
/// `eval_<split>.json` and `.txt` next to the checkpoint.
pub fn evaluate_checkpoint(dir: &Path, split: Split, requested: Option<&ModelConfig>) -> Result<MetricsReport> {
    let (model, _, meta) = checkpoint::load_model(dir, requested)?;
    let frames = load_frames(&meta.config, split)?;
    let report = evaluate_model(&model, &frames, meta.config.batch_size, 0.5)?;
    std::fs::write(dir.join(format!("eval_{split}.json")), report.to_json()?)?;
    std::fs::write(dir.join(format!("eval_{split}.txt")), format!("{report}\n"))?;
    Ok(report)
}

/// Evaluates with an explicit data configuration instead of the checkpoint's own.
pub fn evaluate_checkpoint_on(dir: &Path, data: &TrainConfig, split: Split, requested: Option<&ModelConfig>) -> Result<MetricsReport> {
    let (model, _, meta) = checkpoint::load_model(dir, requested)?;
    let frames = load_frames(data, split)?;
    evaluate_model(&model, &frames, meta.config.batch_size, 0.5)
}

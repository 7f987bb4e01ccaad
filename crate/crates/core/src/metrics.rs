//! Overlap and surface-distance metrics for binary landmark masks.
//!
//! Masks are flat row-major `bool` slices with an explicit `(height, width)`.
//! Every foreground pixel counts as surface, since landmarks are thin curves.

use std::fmt;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameSample;

use crate::{Error, Result, CLASSES};

fn check(pred: &[bool], gt: &[bool], shape: (usize, usize)) -> Result<()> {
    let n = shape.0 * shape.1;
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "masks of length {} and {} do not match {}x{}",
            pred.len(),
            gt.len(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let mut p = 0;
    let mut g = 0;
    let mut both = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    (p, g, both)
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dsc(pred: &[bool], gt: &[bool], shape: (usize, usize)) -> Result<f64> {
    check(pred, gt, shape)?;
    let (p, g, both) = counts(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool], shape: (usize, usize)) -> Result<f64> {
    check(pred, gt, shape)?;
    let (p, g, both) = counts(pred, gt);
    let union = p + g - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
/// Returns `None` when the mask is empty.
pub fn squared_distance_transform(mask: &[bool], shape: (usize, usize)) -> Option<Vec<f64>> {
    let (h, w) = shape;
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut col_in = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    let mut d = vec![0f64; h * w];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if mask[y * w + x] { 0.0 } else { FAR };
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    for y in 0..h {
        edt_1d(&d[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    Some(d)
}

/// Average symmetric surface distance in pixels. Both empty gives 0; exactly
/// one empty gives the image diagonal.
pub fn assd(pred: &[bool], gt: &[bool], shape: (usize, usize)) -> Result<f64> {
    check(pred, gt, shape)?;
    let diagonal = ((shape.0 * shape.0 + shape.1 * shape.1) as f64).sqrt();
    let (dp, dg) = match (squared_distance_transform(pred, shape), squared_distance_transform(gt, shape)) {
        (None, None) => return Ok(0.0),
        (Some(_), None) | (None, Some(_)) => return Ok(diagonal),
        (Some(a), Some(b)) => (a, b),
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if pred[i] {
            total += dg[i].sqrt();
            n += 1;
        }
        if gt[i] {
            total += dp[i].sqrt();
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Percent.
    pub dsc: f64,
    /// Percent.
    pub iou: f64,
    /// Pixels.
    pub assd: f64,
    pub n_frames: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// In class order; `None` metrics when no evaluated frame had the class.
    pub per_class: Vec<(String, Option<ClassMetrics>, usize)>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub mean_assd: f64,
    pub n_frames: usize,
}

/// One frame's thresholded prediction and ground truth.
pub struct FrameEval<'a> {
    pub frame_id: &'a str,
    /// `[3, H, W]` probabilities, row-major.
    pub probs: &'a [f32],
    /// `[3, H, W]` binary ground truth.
    pub masks: &'a [f32],
    pub present: [bool; 3],
    pub shape: (usize, usize),
}

/// Per-class metrics averaged over frames where the class is present, then an
/// unweighted mean over classes that were evaluated at least once.
pub fn evaluate_frames(frames: &[FrameEval<'_>], threshold: f64) -> Result<MetricsReport> {
    let mut sums = [[0f64; 3]; 3];
    let mut used = [0usize; 3];
    let mut skipped = [0usize; 3];
    for f in frames {
        let n = f.shape.0 * f.shape.1;
        if f.probs.len() != 3 * n || f.masks.len() != 3 * n {
            return Err(Error::Shape(format!("frame {}: arrays do not match {:?}", f.frame_id, f.shape)));
        }
        for c in 0..3 {
            if !f.present[c] {
                skipped[c] += 1;
                continue;
            }
            let pred: Vec<bool> = f.probs[c * n..(c + 1) * n].iter().map(|&p| p as f64 >= threshold).collect();
            let gt: Vec<bool> = f.masks[c * n..(c + 1) * n].iter().map(|&m| m > 0.5).collect();
            sums[c][0] += dsc(&pred, &gt, f.shape)?;
            sums[c][1] += iou(&pred, &gt, f.shape)?;
            sums[c][2] += assd(&pred, &gt, f.shape)?;
            used[c] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(3);
    let mut means = [0f64; 3];
    let mut evaluated = 0usize;
    for c in 0..3 {
        let m = (used[c] > 0).then(|| {
            let k = used[c] as f64;
            ClassMetrics {
                dsc: 100.0 * sums[c][0] / k,
                iou: 100.0 * sums[c][1] / k,
                assd: sums[c][2] / k,
                n_frames: used[c],
                n_skipped: skipped[c],
            }
        });
        if let Some(m) = &m {
            means[0] += m.dsc;
            means[1] += m.iou;
            means[2] += m.assd;
            evaluated += 1;
        }
        per_class.push((CLASSES[c].to_string(), m, skipped[c]));
    }
    let k = evaluated.max(1) as f64;
    Ok(MetricsReport {
        per_class,
        mean_dsc: means[0] / k,
        mean_iou: means[1] / k,
        mean_assd: means[2] / k,
        n_frames: frames.len(),
    })
}

/// Checks that predictions and ground truth line up by frame id.
pub fn check_alignment<'a>(
    pred_ids: impl IntoIterator<Item = &'a str>,
    gt_ids: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let a: Vec<&str> = pred_ids.into_iter().collect();
    let b: Vec<&str> = gt_ids.into_iter().collect();
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} predictions for {} frames", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(&b) {
        if x != y {
            return Err(Error::Alignment(format!("prediction for `{x}` paired with frame `{y}`")));
        }
    }
    Ok(())
}

/// Binarizes `preds` (`[3, H, W]` probabilities per frame) and scores them
/// against `gts`, which must list the same frames in the same order.
pub fn evaluate_split(preds: &[(String, Array3<f32>)], gts: &[FrameSample], threshold: f64) -> Result<MetricsReport> {
    check_alignment(preds.iter().map(|(id, _)| id.as_str()), gts.iter().map(|g| g.frame_id.as_str()))?;
    let mut frames = Vec::with_capacity(gts.len());
    for ((id, p), g) in preds.iter().zip(gts) {
        if p.dim() != g.masks.dim() {
            return Err(Error::Shape(format!("frame {id}: prediction {:?} vs masks {:?}", p.dim(), g.masks.dim())));
        }
        frames.push(FrameEval {
            frame_id: id,
            probs: p.as_slice().ok_or_else(|| Error::Shape("prediction not contiguous".into()))?,
            masks: g.masks.as_slice().ok_or_else(|| Error::Shape("masks not contiguous".into()))?,
            present: g.present,
            shape: g.size(),
        });
    }
    evaluate_frames(&frames, threshold)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>8} {:>8} {:>7}", "class", "DSC↑", "IoU↑", "Assd↓", "frames")?;
        for (name, m, skipped) in &self.per_class {
            match m {
                Some(m) => writeln!(f, "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>7}", name, m.dsc, m.iou, m.assd, m.n_frames)?,
                None => writeln!(f, "{:<12} {:>8} {:>8} {:>8} {:>7}", name, "-", "-", "-", format!("0/{skipped}"))?,
            }
        }
        write!(
            f,
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>7}",
            "mean", self.mean_dsc, self.mean_iou, self.mean_assd, self.n_frames
        )
    }
}

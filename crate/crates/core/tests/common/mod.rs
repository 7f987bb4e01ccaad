#![allow(dead_code)]

use std::collections::BTreeSet;

use candle_core::{Device, Tensor, Var};
use geoprompt::dataset::{ManifestRecord, Split, SplitManifest};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error between the autograd gradient of `f` at `x0` and central differences.
pub fn grad_rel_error(f: &dyn Fn(&Tensor) -> Tensor, x0: &Tensor) -> f64 {
    let x = Var::from_tensor(x0).unwrap();
    let y = f(x.as_tensor());
    let g = y.backward().unwrap().get(x.as_tensor()).expect("gradient reaches the input").clone();
    let analytic = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let dims = x0.dims().to_vec();
    let eval = |v: Vec<f64>| f(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        numeric.push((eval(plus) - eval(minus)) / (2.0 * FD_STEP));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

pub fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>(), dims, &Device::Cpu).unwrap()
}

pub fn binary(rng: &mut ChaCha8Rng, dims: &[usize], p: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

/// Set-based Dice and IoU on a flat mask.
pub fn oracle_overlap(p: &[bool], g: &[bool]) -> (f64, f64) {
    let a: BTreeSet<usize> = p.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let b: BTreeSet<usize> = g.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    let d = if a.len() + b.len() == 0 { 1.0 } else { 2.0 * inter / (a.len() + b.len()) as f64 };
    let j = if union == 0.0 { 1.0 } else { inter / union };
    (d, j)
}

/// All-pairs average symmetric surface distance over the foreground pixels of an `n × n` mask.
pub fn oracle_assd(p: &[bool], g: &[bool], n: usize) -> f64 {
    let points = |m: &[bool]| -> Vec<(f64, f64)> {
        m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| ((i / n) as f64, (i % n) as f64)).collect()
    };
    let (a, b) = (points(p), points(g));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((2 * n * n) as f64).sqrt(),
        _ => {}
    }
    let nearest = |x: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let total: f64 = a.iter().map(|x| nearest(x, &b)).sum::<f64>() + b.iter().map(|y| nearest(y, &a)).sum::<f64>();
    total / (a.len() + b.len()) as f64
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let density = rng.random_range(0.0..0.5);
    (0..n * n).map(|_| rng.random_bool(density)).collect()
}

/// Manifest records with `counts` frames per split, five frames per patient,
/// patients never shared across splits.
pub fn records(counts: [usize; 3]) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    let flag_sets: [&[&str]; 4] = [&["s", "l", "r"], &["r", "s"], &["l"], &[]];
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for k in 0..n {
            out.push(ManifestRecord {
                frame_id: format!("{split}_{k:04}"),
                patient_id: format!("{split}_patient_{:03}", k / 5),
                split,
                flags: flag_sets[k % 4].iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    out
}

pub fn full_size_manifest() -> geoprompt::Result<SplitManifest> {
    SplitManifest::new(records([921, 122, 109]))
}

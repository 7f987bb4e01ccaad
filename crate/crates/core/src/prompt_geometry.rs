//! Depth-aware prompt embedding: learnable class prompts attend over depth
//! features, and a contrastive loss pulls each prompt toward the depth
//! features pooled under its class mask.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;
use crate::params::{Init, Params};
use crate::{Error, Result, CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Per-position sigmoid of the scaled prompt/feature product.
    #[default]
    Sigmoid,
    /// Softmax over spatial positions.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// How class masks are reduced to the feature grid before pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPooling {
    /// A cell is inside the mask if any of its pixels is.
    #[default]
    Any,
    /// A cell is inside the mask if at least half of its pixels are.
    Majority,
}

/// The three class prompts, stored as `prompt.{silhouette,ligament,ridge}`.
#[derive(Debug, Clone)]
pub struct GeometricPrompts {
    rows: Vec<Tensor>,
}

impl GeometricPrompts {
    pub fn new(channels: usize, p: Params) -> Result<Self> {
        let rows = CLASSES
            .iter()
            .map(|name| p.get(&[channels], name, Init::Normal(0.02)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn from_tensor(p: &Tensor) -> Result<Self> {
        let (n, _) = p.dims2()?;
        if n != 3 {
            return Err(Error::Shape(format!("prompts must be [3, C], got {:?}", p.dims())));
        }
        Ok(Self { rows: (0..3).map(|i| p.get(i)).collect::<candle_core::Result<_>>()? })
    }

    /// `[3, C]`
    pub fn matrix(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.rows, 0)?)
    }

    pub fn channels(&self) -> usize {
        self.rows[0].dims()[0]
    }
}

/// Per-class feature blocks `F_G` `[B, 3, C, S, S]` and attention maps `A` `[B, 3, S, S]`.
#[derive(Debug, Clone)]
pub struct ClassActivatedFeatures {
    pub features: Tensor,
    pub attention: Tensor,
}

impl ClassActivatedFeatures {
    /// `F_G^c` for one class, `[B, C, S, S]`.
    pub fn class(&self, c: usize) -> Result<Tensor> {
        Ok(self.features.narrow(1, c, 1)?.squeeze(1)?)
    }
}

/// `f_d: [B, C, S, S]`. `F_G^c = F_d + A_c ⊙ F_d`.
pub fn prompt_attention(f_d: &Tensor, prompts: &GeometricPrompts, mode: AttentionMode) -> Result<ClassActivatedFeatures> {
    let (b, c, h, w) = f_d.dims4()?;
    if prompts.channels() != c {
        return Err(Error::Shape(format!(
            "prompt width {} does not match depth feature channels {c}",
            prompts.channels()
        )));
    }
    let p = prompts.matrix()?;
    let flat = f_d.reshape((b, c, h * w))?;
    let logits = p.broadcast_matmul(&flat)?.affine(1.0 / (c as f64).sqrt(), 0.0)?;
    let attention = match mode {
        AttentionMode::Sigmoid => sigmoid(&logits)?,
        AttentionMode::Softmax => candle_nn::ops::softmax_last_dim(&logits)?,
    }
    .reshape((b, 3, h, w))?;
    let features = f_d
        .unsqueeze(1)?
        .broadcast_add(&f_d.unsqueeze(1)?.broadcast_mul(&attention.unsqueeze(2)?)?)?;
    Ok(ClassActivatedFeatures { features, attention })
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbeddings {
    /// `[3, C]`; rows of invalid classes are zero.
    pub r: Tensor,
    pub valid: [bool; 3],
}

/// Reduces binary masks `[B, 3, H, W]` to the `S×S` feature grid.
pub fn downsample_masks(masks: &Tensor, size: usize, pooling: MaskPooling) -> Result<Tensor> {
    let (b, n, h, w) = masks.dims4()?;
    if h % size != 0 || w % size != 0 || h / size != w / size {
        return Err(Error::Shape(format!("mask size {h}x{w} is not a multiple of grid {size}")));
    }
    let k = h / size;
    let cells = masks.detach().reshape((b, n, size, k, size, k))?;
    let out = match pooling {
        MaskPooling::Any => cells.max(5)?.max(3)?.gt(0.0)?,
        MaskPooling::Majority => cells.mean(5)?.mean(3)?.ge(0.5)?,
    };
    Ok(out.to_dtype(masks.dtype())?)
}

const POOL_EPS: f64 = 1e-6;

/// Masked average pooling of `f_d` `[B, C, S, S]` under each class mask,
/// accumulated over the whole batch. `present` is `[B]` triples.
pub fn reference_embeddings(
    f_d: &Tensor,
    masks: &Tensor,
    present: &[[bool; 3]],
    pooling: MaskPooling,
) -> Result<ReferenceEmbeddings> {
    let (b, c, s, _) = f_d.dims4()?;
    let (mb, mc, _, _) = masks.dims4()?;
    if mb != b || mc != 3 || present.len() != b {
        return Err(Error::Shape(format!(
            "masks {:?} / present ({}) do not match a batch of {b}",
            masks.dims(),
            present.len()
        )));
    }
    let flags: Vec<f64> = present.iter().flat_map(|p| p.iter().map(|&x| if x { 1.0 } else { 0.0 })).collect();
    let flags = Tensor::from_vec(flags, (b, 3, 1), f_d.device())?.to_dtype(f_d.dtype())?;
    let m = downsample_masks(&masks.to_dtype(f_d.dtype())?, s, pooling)?
        .reshape((b, 3, s * s))?
        .broadcast_mul(&flags)?;
    let counts = m.sum(2)?.sum(0)?;
    let sums = m.matmul(&f_d.reshape((b, c, s * s))?.t()?)?.sum(0)?;
    let r = sums.broadcast_div(&(counts.clone() + POOL_EPS)?.unsqueeze(1)?)?;
    let counts = counts.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut valid = [false; 3];
    for (k, v) in valid.iter_mut().enumerate() {
        *v = present.iter().any(|p| p[k]) && counts[k] > 0.0;
    }
    let keep: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let keep = Tensor::from_vec(keep, (3, 1), f_d.device())?.to_dtype(f_d.dtype())?;
    Ok(ReferenceEmbeddings { r: r.broadcast_mul(&keep)?, valid })
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub loss: Tensor,
    /// No class was valid; `loss` is an exact zero.
    pub skipped: bool,
}

fn normalize_rows(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// `p`, `r`: `[3, C]`. Mean over valid classes of
/// `logsumexp_k(sim(P_l, R_k)/τ) − sim(P_l, R_l)/τ`, valid `k` only.
pub fn contrastive_prompt_loss(
    p: &Tensor,
    refs: &ReferenceEmbeddings,
    tau: f64,
    similarity: Similarity,
) -> Result<ContrastiveLoss> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if p.dims() != refs.r.dims() {
        return Err(Error::Shape(format!("prompts {:?} vs references {:?}", p.dims(), refs.r.dims())));
    }
    let idx: Vec<u32> = (0..3u32).filter(|&k| refs.valid[k as usize]).collect();
    if idx.is_empty() {
        return Ok(ContrastiveLoss { loss: Tensor::zeros((), p.dtype(), p.device())?, skipped: true });
    }
    let n = idx.len();
    let idx = Tensor::from_vec(idx, n, p.device())?;
    let (pv, rv) = (p.index_select(&idx, 0)?, refs.r.index_select(&idx, 0)?);
    let (pv, rv) = match similarity {
        Similarity::Cosine => (normalize_rows(&pv)?, normalize_rows(&rv)?),
        Similarity::Dot => (pv, rv),
    };
    let logits = pv.matmul(&rv.t()?)?.affine(1.0 / tau, 0.0)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(1)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = (logits * eye)?.sum(1)?;
    let loss = (lse - diag)?.mean_all()?;
    Ok(ContrastiveLoss { loss, skipped: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_prompt_gives_half_attention() -> Result<()> {
        let f = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &Device::Cpu)?;
        let prompts = GeometricPrompts::from_tensor(&Tensor::zeros((3, 4), DType::F64, &Device::Cpu)?)?;
        let out = prompt_attention(&f, &prompts, AttentionMode::Sigmoid)?;
        let a = out.attention.flatten_all()?.to_vec1::<f64>()?;
        assert!(a.iter().all(|&x| x == 0.5));
        let expect = (&f * 1.5)?.flatten_all()?.to_vec1::<f64>()?;
        for c in 0..3 {
            assert_eq!(out.class(c)?.flatten_all()?.to_vec1::<f64>()?, expect);
        }
        Ok(())
    }

    #[test]
    fn strongly_negative_prompt_recovers_identity() -> Result<()> {
        let f = Tensor::ones((1, 4, 2, 2), DType::F64, &Device::Cpu)?;
        let prompts = GeometricPrompts::from_tensor(&Tensor::full(-1e3, (3, 4), &Device::Cpu)?)?;
        let out = prompt_attention(&f, &prompts, AttentionMode::Sigmoid)?;
        let diff = (out.class(1)? - &f)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12);
        Ok(())
    }

    #[test]
    fn prompts_are_named_per_class() -> Result<()> {
        let s = ParamStore::new(DType::F32, 3);
        let p = GeometricPrompts::new(8, s.root().pp("prompt"))?;
        assert_eq!(s.names(), vec!["prompt.ligament", "prompt.ridge", "prompt.silhouette"]);
        assert_eq!(p.matrix()?.dims(), &[3, 8]);
        Ok(())
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let f = Tensor::zeros((1, 5, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let p = GeometricPrompts::from_tensor(&Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(prompt_attention(&f, &p, AttentionMode::Sigmoid), Err(Error::Shape(_))));
    }

    #[test]
    fn full_and_empty_masks() -> Result<()> {
        let f = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu)?;
        let mut m = vec![0.0; 3 * 16 * 16];
        m[..256].iter_mut().for_each(|x| *x = 1.0);
        let masks = t(&m, &[1, 3, 16, 16]);
        let refs = reference_embeddings(&f, &masks, &[[true, true, false]], MaskPooling::Any)?;
        assert_eq!(refs.valid, [true, false, false]);
        let mean = f.mean(3)?.mean(2)?.squeeze(0)?.to_vec1::<f64>()?;
        let r = refs.r.to_vec2::<f64>()?;
        for (a, b) in r[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
        assert!(r[1].iter().chain(&r[2]).all(|&x| x == 0.0));
        Ok(())
    }

    #[test]
    fn single_pixel_mask_picks_its_cell() -> Result<()> {
        let f = Tensor::randn(0f64, 1.0, (1, 4, 4, 4), &Device::Cpu)?;
        let mut m = vec![0.0; 3 * 16 * 16];
        m[2 * 256 + 9 * 16 + 6] = 1.0; // ridge, pixel (9, 6) -> cell (2, 1)
        let refs = reference_embeddings(&f, &t(&m, &[1, 3, 16, 16]), &[[true, true, true]], MaskPooling::Any)?;
        assert_eq!(refs.valid, [false, false, true]);
        let cell = f.squeeze(0)?.narrow(1, 2, 1)?.narrow(2, 1, 1)?.flatten_all()?.to_vec1::<f64>()?;
        for (a, b) in refs.r.get(2)?.to_vec1::<f64>()?.iter().zip(&cell) {
            assert!((a - b).abs() <= 1e-6 * b.abs() + 1e-12);
        }
        Ok(())
    }

    #[test]
    fn majority_pooling_drops_thin_coverage() -> Result<()> {
        let mut m = vec![0.0; 8 * 8];
        m[3 * 8..4 * 8].iter_mut().for_each(|x| *x = 1.0);
        let masks = t(&m, &[1, 1, 8, 8]);
        let any = downsample_masks(&masks, 2, MaskPooling::Any)?.sum_all()?.to_scalar::<f64>()?;
        let maj = downsample_masks(&masks, 2, MaskPooling::Majority)?.sum_all()?.to_scalar::<f64>()?;
        assert_eq!((any, maj), (2.0, 0.0));
        Ok(())
    }

    fn refs(r: Tensor, valid: [bool; 3]) -> ReferenceEmbeddings {
        ReferenceEmbeddings { r, valid }
    }

    #[test]
    fn uniform_similarities_give_ln3() -> Result<()> {
        let p = t(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[3, 2]);
        let out = contrastive_prompt_loss(&p, &refs(p.clone(), [true; 3]), 0.07, Similarity::Cosine)?;
        assert!((out.loss.to_scalar::<f64>()? - 3f64.ln()).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn confident_diagonal_matches_closed_form() -> Result<()> {
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu)?;
        let out = contrastive_prompt_loss(&eye, &refs(eye.clone(), [true; 3]), 0.1, Similarity::Cosine)?;
        let expect = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((out.loss.to_scalar::<f64>()? - expect).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn degenerate_validity() -> Result<()> {
        let p = Tensor::randn(0f64, 1.0, (3, 4), &Device::Cpu)?;
        let r = Tensor::randn(0f64, 1.0, (3, 4), &Device::Cpu)?;
        let one = contrastive_prompt_loss(&p, &refs(r.clone(), [false, true, false]), 0.07, Similarity::Cosine)?;
        assert_eq!(one.loss.to_scalar::<f64>()?, 0.0);
        assert!(!one.skipped);
        let none = contrastive_prompt_loss(&p, &refs(r.clone(), [false; 3]), 0.07, Similarity::Cosine)?;
        assert!(none.skipped);
        assert_eq!(none.loss.to_scalar::<f64>()?, 0.0);
        assert!(matches!(
            contrastive_prompt_loss(&p, &refs(r, [true; 3]), 0.0, Similarity::Cosine),
            Err(Error::Parameter(_))
        ));
        Ok(())
    }
}

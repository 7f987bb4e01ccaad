//! Segmentation, anatomic and composite training objectives.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::ops;
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1.0;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", a.dims(), b.dims())));
    }
    if a.rank() < 2 {
        return Err(Error::Shape(format!("expected at least [H, W], got {:?}", a.dims())));
    }
    Ok(())
}

/// Soft dice loss per map: sums run over the last two dims, so a `[B, K, H, W]`
/// input gives `[B, K]`.
pub fn dice_map(prob: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(prob, target)?;
    let r = prob.rank();
    let inter = (prob * target)?.sum(r - 1)?.sum(r - 2)?;
    let denom = (prob.sum(r - 1)?.sum(r - 2)? + target.sum(r - 1)?.sum(r - 2)?)?;
    Ok(((inter * 2.0)? + DICE_EPS)?.div(&(denom + DICE_EPS)?)?.affine(-1.0, 1.0)?)
}

/// `1 − (2Σpt + ε)/(Σp + Σt + ε)` averaged over all leading dims.
pub fn dice_loss(prob: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(dice_map(prob, target)?.mean_all()?)
}

/// Pixelwise cross-entropy with logits.
pub fn bce_map(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(logits, target)?;
    Ok(ops::bce_with_logits(logits, target)?)
}

/// Mean binary cross-entropy with logits.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(bce_map(logits, target)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct SegmentationLoss {
    pub seg: Tensor,
    /// `[3]`, dice per class averaged over frames.
    pub dice: Tensor,
    /// `[3]`, pixel-mean cross-entropy per class.
    pub bce: Tensor,
}

/// `logits`, `masks`: `[B, 3, H, W]`. Mean over the three classes of dice + BCE.
pub fn segmentation_loss(logits: &Tensor, masks: &Tensor) -> Result<SegmentationLoss> {
    check_same(logits, masks)?;
    let (_, k, _, _) = logits.dims4()?;
    if k != 3 {
        return Err(Error::Shape(format!("expected 3 class maps, got {k}")));
    }
    let prob = crate::nn::sigmoid(logits)?;
    let dice = dice_map(&prob, masks)?.mean(0)?;
    let bce = bce_map(logits, masks)?.mean(3)?.mean(2)?.mean(0)?;
    let seg = (&dice + &bce)?.mean_all()?;
    Ok(SegmentationLoss { seg, dice, bce })
}

/// Dice of the anatomic probability map `[B, 1, H, W]` against the union of the class masks.
pub fn anatomic_loss(prob: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let union = masks.max_keepdim(1)?;
    dice_loss(prob, &union)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub seg: f64,
    pub cl: f64,
    pub ana: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { seg: 1.0, cl: 1.0, ana: 1.0 }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ_seg·seg + λ_cl·cl + λ_ana·ana`, accumulated in that order. A non-finite
/// term fails before anything is summed.
pub fn total_loss(seg: &Tensor, cl: &Tensor, ana: &Tensor, lambdas: Lambdas) -> Result<Tensor> {
    for (name, t) in [("seg", seg), ("cl", cl), ("ana", ana)] {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite { term: name.to_string(), step: None });
        }
    }
    let total = ((seg * lambdas.seg)? + (cl * lambdas.cl)?)?;
    Ok((total + (ana * lambdas.ana)?)?)
}

/// Scalar summary of one step's objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub cl: f64,
    pub ana: f64,
    pub per_class_dice: [f64; 3],
    pub per_class_bce: [f64; 3],
    pub lambdas: Lambdas,
    pub cl_skipped: bool,
}

impl LossReport {
    pub fn new(
        total: &Tensor,
        seg: &SegmentationLoss,
        cl: &Tensor,
        ana: &Tensor,
        lambdas: Lambdas,
        cl_skipped: bool,
    ) -> Result<Self> {
        let triple = |t: &Tensor| -> Result<[f64; 3]> {
            let v = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            Ok([v[0], v[1], v[2]])
        };
        Ok(Self {
            total: scalar(total)?,
            seg: scalar(&seg.seg)?,
            cl: scalar(cl)?,
            ana: scalar(ana)?,
            per_class_dice: triple(&seg.dice)?,
            per_class_bce: triple(&seg.bce)?,
            lambdas,
            cl_skipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn dice_closed_forms() -> Result<()> {
        let mut target = vec![0.0; 400];
        target[..100].iter_mut().for_each(|x| *x = 1.0);
        let tt = t(&target, &[20, 20]);
        assert_eq!(scalar(&dice_loss(&tt, &tt)?)?, 0.0);
        let zeros = tt.zeros_like()?;
        assert_eq!(scalar(&dice_loss(&zeros, &zeros)?)?, 0.0);
        let d = scalar(&dice_loss(&t(&[1.0; 4], &[2, 2]), &t(&[1.0, 1.0, 0.0, 0.0], &[2, 2]))?)?;
        assert!((d - 2.0 / 7.0).abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn bce_closed_forms() -> Result<()> {
        let target = t(&[1.0, 0.0, 1.0, 0.0], &[2, 2]);
        let z = scalar(&bce_loss(&target.zeros_like()?, &target)?)?;
        assert!((z - 2f64.ln()).abs() < 1e-15);
        let confident = t(&[20.0, -20.0, 20.0, -20.0], &[2, 2]);
        let c = scalar(&bce_loss(&confident, &target)?)?;
        assert!((c - (-20f64).exp().ln_1p()).abs() < 1e-20);
        Ok(())
    }

    #[test]
    fn empty_masks_with_zero_logits_give_ln2() -> Result<()> {
        let z = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu)?;
        let s = segmentation_loss(&z, &z)?;
        // dice of p=0.5 against an empty target is 1 − 1/(8+1) per map
        let dice = 1.0 - 1.0 / 9.0;
        assert!((scalar(&s.seg)? - (dice + 2f64.ln())).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn saturated_prediction_is_near_zero() -> Result<()> {
        let masks = t(&[1.0, 0.0, 0.0, 1.0].repeat(3), &[1, 3, 2, 2]);
        let logits = masks.affine(80.0, -40.0)?;
        assert!(scalar(&segmentation_loss(&logits, &masks)?.seg)? <= 1e-6);
        Ok(())
    }

    #[test]
    fn total_is_weighted_sum_and_rejects_nan() -> Result<()> {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let l = Lambdas::default();
        assert_eq!(scalar(&total_loss(&s(0.5), &s(0.2), &s(0.3), l)?)?, 1.0);
        let only_seg = Lambdas { seg: 1.0, cl: 0.0, ana: 0.0 };
        assert_eq!(scalar(&total_loss(&s(0.7), &s(0.2), &s(0.3), only_seg)?)?, 0.7);
        assert_eq!(scalar(&total_loss(&s(0.0), &s(0.0), &s(0.0), l)?)?, 0.0);
        match total_loss(&s(0.1), &s(f64::NAN), &s(0.3), l) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "cl"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
        Ok(())
    }
}

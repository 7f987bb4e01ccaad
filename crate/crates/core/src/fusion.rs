//! Cross-modal fusion: bi-modal feature unification of the RGB and depth
//! streams, and semantic-specific geometric augmentation with reverse
//! anatomic attention.

use candle_core::{Module, Tensor};

use crate::nn::{sigmoid, Conv2d, ConvNormAct, ConvSpec};
use crate::ops;
use crate::params::{Init, Params};
use crate::{Error, Result, CLASSES};

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Squeeze-and-excitation channel gating.
#[derive(Debug, Clone)]
pub struct SeBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize, p: Params) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::Config(format!(
                "squeeze-excitation needs channels ({channels}) >= reduction ({reduction})"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w1: p.get(&[hidden, channels], "fc1.weight", Init::FanInUniform)?,
            b1: p.get(&[hidden], "fc1.bias", Init::Zeros)?,
            w2: p.get(&[channels, hidden], "fc2.weight", Init::FanInUniform)?,
            b2: p.get(&[channels], "fc2.bias", Init::Zeros)?,
        })
    }

    /// Per-channel scale `s ∈ (0,1)`, `[B, C]`.
    pub fn scale(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let gap = x.mean(3)?.mean(2)?;
        let h = gap.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?.relu()?;
        sigmoid(&h.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?)
    }
}

impl Module for SeBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let s = self.scale(x)?;
        x.broadcast_mul(&s.unsqueeze(2)?.unsqueeze(3)?)
    }
}

/// Bi-modal feature unification.
#[derive(Debug, Clone)]
pub struct Bfu {
    se_rgb: SeBlock,
    se_depth: SeBlock,
    merge: ConvNormAct,
}

/// The three branches concatenated before the merge convolution.
pub struct BfuBranches {
    pub summed: Tensor,
    pub local: Tensor,
    pub global: Tensor,
}

impl Bfu {
    pub fn new(channels: usize, reduction: usize, p: Params) -> Result<Self> {
        Ok(Self {
            se_rgb: SeBlock::new(channels, reduction, p.pp("se_rgb"))?,
            se_depth: SeBlock::new(channels, reduction, p.pp("se_depth"))?,
            merge: ConvNormAct::new(3 * channels, channels, ConvSpec::k1(), p.pp("merge"))?,
        })
    }

    pub fn branches(&self, f_rgb: &Tensor, f_d: &Tensor) -> Result<BfuBranches> {
        check_same(f_rgb, f_d, "fusion inputs differ in shape")?;
        let summed = (self.se_rgb.forward(f_rgb)? + self.se_depth.forward(f_d)?)?;
        let local = ops::avg_pool_same(&summed, 3)?;
        let global = summed.mean_keepdim(3)?.mean_keepdim(2)?.broadcast_as(summed.shape())?.contiguous()?;
        Ok(BfuBranches { summed, local, global })
    }

    pub fn fuse(&self, f_rgb: &Tensor, f_d: &Tensor) -> Result<Tensor> {
        let b = self.branches(f_rgb, f_d)?;
        Ok(self.merge.forward(&Tensor::cat(&[&b.summed, &b.local, &b.global], 1)?)?)
    }
}

/// Concatenation followed by a 1×1 convolution; the fusion used when unification is disabled.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    merge: ConvNormAct,
}

impl ConcatFusion {
    pub fn new(channels: usize, p: Params) -> Result<Self> {
        Ok(Self { merge: ConvNormAct::new(2 * channels, channels, ConvSpec::k1(), p.pp("merge"))? })
    }

    pub fn fuse(&self, f_rgb: &Tensor, f_d: &Tensor) -> Result<Tensor> {
        check_same(f_rgb, f_d, "fusion inputs differ in shape")?;
        Ok(self.merge.forward(&Tensor::cat(&[f_rgb, f_d], 1)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedFeature {
    pub f_a: Tensor,
    /// `[B, 1, S, S]`
    pub anatomic_logits: Tensor,
    /// Reverse weights `1 − σ(anatomic_logits)`.
    pub rho: Tensor,
    /// `ρ ⊙ F_f`
    pub f_ana: Tensor,
    pub decoder_input: Tensor,
}

/// Semantic-specific geometric augmentation.
#[derive(Debug, Clone)]
pub struct Sga {
    per_class: Vec<ConvNormAct>,
    merge: Conv2d,
    anatomic: Conv2d,
}

impl Sga {
    pub fn new(channels: usize, p: Params) -> Result<Self> {
        let per_class = CLASSES
            .iter()
            .map(|name| ConvNormAct::new(2 * channels, channels, ConvSpec::k3(), p.pp(format!("class.{name}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_class,
            merge: Conv2d::new(3 * channels, channels, ConvSpec::k1(), p.pp("merge"))?,
            anatomic: Conv2d::new(channels, 1, ConvSpec::k1(), p.pp("anatomic_logits"))?,
        })
    }

    /// `f_g` holds the three class blocks `F_G^c`, each shaped like `f_f`.
    pub fn augment(&self, f_g: &[Tensor; 3], f_f: &Tensor) -> Result<AugmentedFeature> {
        let mut blocks = Vec::with_capacity(3);
        for (conv, g) in self.per_class.iter().zip(f_g) {
            check_same(g, f_f, "class feature vs fused feature")?;
            blocks.push(conv.forward(&Tensor::cat(&[g, f_f], 1)?)?);
        }
        let f_a = self.merge.forward(&Tensor::cat(&blocks, 1)?)?;
        let anatomic_logits = self.anatomic.forward(&f_a)?;
        let rho = sigmoid(&anatomic_logits)?.affine(-1.0, 1.0)?;
        let f_ana = f_f.broadcast_mul(&rho)?;
        let decoder_input = (&f_a + &f_ana)?;
        Ok(AugmentedFeature { f_a, anatomic_logits, rho, f_ana, decoder_input })
    }
}

/// Auxiliary anatomic prediction from the reverse-attended feature.
#[derive(Debug, Clone)]
pub struct AnatomicHead {
    conv: Conv2d,
}

impl AnatomicHead {
    pub fn new(channels: usize, p: Params) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(channels, 1, ConvSpec::k1(), p.pp("conv"))? })
    }

    /// `[B, C, S, S]` → probabilities `[B, 1, size, size]`.
    pub fn forward(&self, f_ana: &Tensor, size: usize) -> Result<Tensor> {
        let logits = ops::resize_bilinear(&self.conv.forward(f_ana)?, size, size)?;
        Ok(sigmoid(&logits)?)
    }
}

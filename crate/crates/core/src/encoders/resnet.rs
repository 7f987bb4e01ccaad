//! 34-layer residual encoder trunk.
//!
//! Stem, then stages of 3/4/6 basic blocks at widths 64/128/256 (strides
//! 4/8/16). The 512-wide stride-32 stage of the classification network has no
//! consumer in the landmark model and is not built.

use candle_core::{Module, Tensor};

use crate::nn::{Conv2d, ConvSpec, GroupNorm};
use crate::ops;
use crate::params::{Init, Params};
use crate::Result;

pub const STAGE_WIDTHS: [usize; 3] = [64, 128, 256];
const STAGE_BLOCKS: [usize; 3] = [3, 4, 6];

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    downsample: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, p: Params) -> Result<Self> {
        let k3 = ConvSpec::k3().no_bias().init(Init::KaimingFanOut);
        let downsample = if stride != 1 || cin != cout {
            let spec = ConvSpec::k1().no_bias().stride(stride).init(Init::KaimingFanOut);
            Some((
                Conv2d::new(cin, cout, spec, p.pp("downsample.0"))?,
                GroupNorm::new(cout, p.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(cin, cout, k3.stride(stride), p.pp("conv1"))?,
            norm1: GroupNorm::new(cout, p.pp("bn1"))?,
            conv2: Conv2d::new(cout, cout, k3, p.pp("conv2"))?,
            norm2: GroupNorm::new(cout, p.pp("bn2"))?,
            downsample,
        })
    }
}

impl Module for BasicBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let out = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let out = self.norm2.forward(&self.conv2.forward(&out)?)?;
        let shortcut = match &self.downsample {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        (out + shortcut)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct ResidualEncoder {
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
}

/// Stride-4, stride-8 and stride-16 stage outputs.
pub struct ResidualFeatures {
    pub s4: Tensor,
    pub s8: Tensor,
    pub s16: Tensor,
}

impl ResidualEncoder {
    pub fn new(in_channels: usize, p: Params) -> Result<Self> {
        let stem_spec = ConvSpec { kernel: 7, stride: 2, padding: 3, bias: false, init: Init::KaimingFanOut };
        let mut stages = Vec::new();
        let mut cin = 64;
        for (i, (&width, &blocks)) in STAGE_WIDTHS.iter().zip(&STAGE_BLOCKS).enumerate() {
            let stage_p = p.pp(format!("layer{}", i + 1));
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(cin, width, stride, stage_p.pp(b.to_string()))?);
                cin = width;
            }
            stages.push(stage);
        }
        Ok(Self {
            stem: Conv2d::new(in_channels, 64, stem_spec, p.pp("conv1"))?,
            stem_norm: GroupNorm::new(64, p.pp("bn1"))?,
            stages,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<ResidualFeatures> {
        let x = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let mut x = ops::max_pool2d(&x, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            outs.push(x.clone());
        }
        let s16 = outs.pop().expect("three stages");
        let s8 = outs.pop().expect("three stages");
        let s4 = outs.pop().expect("three stages");
        Ok(ResidualFeatures { s4, s8, s16 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn stage_shapes_and_depth() -> Result<()> {
        let store = ParamStore::new(DType::F32, 1);
        let enc = ResidualEncoder::new(3, store.root().pp("rgb"))?;
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu)?;
        let f = enc.forward(&x)?;
        assert_eq!(f.s4.dims4()?, (1, 64, 16, 16));
        assert_eq!(f.s8.dims4()?, (1, 128, 8, 8));
        assert_eq!(f.s16.dims4()?, (1, 256, 4, 4));
        // stem + 2 convs per block over 13 blocks = 27 weighted conv layers;
        // with the 6 convs of the omitted final stage this is the 34-layer layout.
        let convs = store
            .names()
            .iter()
            .filter(|n| n.ends_with(".weight") && (n.contains(".conv") || n.ends_with("rgb.conv1.weight")))
            .count();
        assert_eq!(convs, 27);
        Ok(())
    }
}

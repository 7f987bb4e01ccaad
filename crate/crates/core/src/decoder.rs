//! Convolutional decoder from the stride-16 fused feature to per-class logits.

use candle_core::{Module, Tensor};

use crate::encoders::FeatureMap;
use crate::nn::{sigmoid, Conv2d, ConvNormAct, ConvSpec};
use crate::ops;
use crate::params::Params;
use crate::{Error, Result};

/// Per-class probabilities and logits at input resolution, `[B, 3, H, W]`,
/// plus the auxiliary anatomic map `[B, 1, H, W]` when that branch is active.
#[derive(Debug, Clone)]
pub struct LandmarkPrediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub anatomic_prob: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<ConvNormAct>,
    head: Conv2d,
}

/// Skip strides consumed by the first two stages, in order.
const SKIP_STRIDES: [usize; 2] = [8, 4];

impl Decoder {
    /// `skip_widths` are the channel counts of the stride-8 and stride-4 skips.
    pub fn new(channels: usize, skip_widths: [usize; 2], p: Params) -> Result<Self> {
        if channels < 8 || !channels.is_multiple_of(8) {
            return Err(Error::Config(format!("decoder width {channels} must be a positive multiple of 8")));
        }
        let widths = [channels / 2, channels / 4, channels / 8];
        let inputs = [channels + skip_widths[0], widths[0] + skip_widths[1], widths[1]];
        let stages = (0..3)
            .map(|i| ConvNormAct::new(inputs[i], widths[i], ConvSpec::k3(), p.pp(format!("stage{}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(widths[2], 3, ConvSpec::k1(), p.pp("head"))?;
        Ok(Self { stages, head })
    }

    /// Returns logits `[B, 3, size, size]`.
    pub fn forward(&self, x: &Tensor, skips: &[FeatureMap], size: usize) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let (_, _, h, w) = x.dims4()?;
            x = ops::resize_bilinear(&x, 2 * h, 2 * w)?;
            if let Some(&stride) = SKIP_STRIDES.get(i) {
                let skip = skips
                    .iter()
                    .find(|f| f.stride == stride)
                    .ok_or_else(|| Error::Wiring(format!("decoder needs a stride-{stride} skip feature")))?;
                if skip.data.dims()[2..] != x.dims()[2..] {
                    return Err(Error::Wiring(format!(
                        "stride-{stride} skip is {:?}, decoder stage is {:?}",
                        skip.data.dims(),
                        x.dims()
                    )));
                }
                x = Tensor::cat(&[&x, &skip.data], 1)?;
            }
            x = stage.forward(&x)?;
        }
        Ok(ops::resize_bilinear(&self.head.forward(&x)?, size, size)?)
    }

    pub fn predict(&self, x: &Tensor, skips: &[FeatureMap], size: usize) -> Result<LandmarkPrediction> {
        let logits = self.forward(x, skips, size)?;
        let probs = sigmoid(&logits)?;
        Ok(LandmarkPrediction { logits, probs, anatomic_prob: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn skips(b: usize, s: usize) -> Vec<FeatureMap> {
        let dev = Device::Cpu;
        vec![
            FeatureMap { data: Tensor::rand(0f32, 1.0, (b, 64, 4 * s, 4 * s), &dev).unwrap(), stride: 4 },
            FeatureMap { data: Tensor::rand(0f32, 1.0, (b, 128, 2 * s, 2 * s), &dev).unwrap(), stride: 8 },
        ]
    }

    #[test]
    fn output_shape_and_range() -> Result<()> {
        let store = ParamStore::new(DType::F32, 5);
        let dec = Decoder::new(64, [128, 64], store.root())?;
        let x = Tensor::rand(0f32, 1.0, (2, 64, 4, 4), &Device::Cpu)?;
        let pred = dec.predict(&x, &skips(2, 4), 64)?;
        assert_eq!(pred.probs.dims(), &[2, 3, 64, 64]);
        let p = pred.probs.flatten_all()?.to_vec1::<f32>()?;
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        Ok(())
    }

    #[test]
    fn missing_skip_is_a_wiring_error() -> Result<()> {
        let store = ParamStore::new(DType::F32, 5);
        let dec = Decoder::new(64, [128, 64], store.root())?;
        let x = Tensor::rand(0f32, 1.0, (1, 64, 4, 4), &Device::Cpu)?;
        let only_s4 = vec![skips(1, 4).remove(0)];
        assert!(matches!(dec.forward(&x, &only_s4, 64), Err(Error::Wiring(_))));
        Ok(())
    }
}

//! Small layer building blocks shared by the encoders, fusion and decoder.

use candle_core::{Module, Tensor, D};

use crate::ops::{self, Conv2dParams};
use crate::params::{Init, Params};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    params: Conv2dParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn k1() -> Self {
        Self { kernel: 1, stride: 1, padding: 0, bias: true, init: Init::FanInUniform }
    }

    pub fn k3() -> Self {
        Self { kernel: 3, stride: 1, padding: 1, bias: true, init: Init::FanInUniform }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn no_bias(self) -> Self {
        Self { bias: false, ..self }
    }

    pub fn init(self, init: Init) -> Self {
        Self { init, ..self }
    }
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, p: Params) -> Result<Self> {
        let weight = p.get(&[cout, cin, spec.kernel, spec.kernel], "weight", spec.init)?;
        let bias = if spec.bias {
            let bound = 1.0 / ((cin * spec.kernel * spec.kernel) as f64).sqrt();
            let init = match spec.init {
                Init::FanInUniform => Init::Uniform(bound),
                _ => Init::Zeros,
            };
            Some(p.get(&[cout], "bias", init)?)
        } else {
            None
        };
        Ok(Self { weight, bias, params: Conv2dParams { stride: spec.stride, padding: spec.padding } })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.params)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Largest group count ≤ 32 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=32.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, p: Params) -> Result<Self> {
        Ok(Self {
            gamma: p.get(&[channels], "weight", Init::Ones)?,
            beta: p.get(&[channels], "bias", Init::Zeros)?,
            groups: default_groups(channels),
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        ops::group_norm(x, &self.gamma, &self.beta, self.groups, 1e-5)
    }
}

/// Convolution → group norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, p: Params) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(cin, cout, spec, p.pp("conv"))?,
            norm: GroupNorm::new(cout, p.pp("norm"))?,
        })
    }
}

impl Module for ConvNormAct {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)?.relu()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(din: usize, dout: usize, p: Params) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: p.get(&[dout, din], "weight", Init::Uniform(bound))?,
            bias: p.get(&[dout], "bias", Init::Uniform(bound))?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (dout, din) = self.weight.dims2()?;
        let mut shape = x.dims().to_vec();
        let rows = x.elem_count() / din;
        let y = x.reshape((rows, din))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        *shape.last_mut().expect("non-scalar input") = dout;
        y.reshape(shape)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, p: Params) -> Result<Self> {
        Ok(Self {
            gamma: p.get(&[dim], "weight", Init::Ones)?,
            beta: p.get(&[dim], "bias", Init::Zeros)?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(default_groups(256), 32);
        assert_eq!(default_groups(8), 8);
        assert_eq!(default_groups(1), 1);
        assert_eq!(default_groups(96), 32);
        assert_eq!(default_groups(40), 20);
    }
}

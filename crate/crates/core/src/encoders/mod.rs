//! RGB and depth feature extraction.
//!
//! The default pairing runs a trainable residual encoder on RGB and a frozen
//! transformer encoder on depth. Both streams end in a trainable 1×1 neck that
//! projects to a shared width at stride 16, so the fusion stages always see
//! equal `[C, S, S]` maps. The backbone per stream is swappable for the
//! backbone ablation.

pub mod attention;
pub mod resnet;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ConvSpec};
use crate::ops;
use crate::params::{ParamStore, Params};
use crate::{Error, Result};

pub use attention::{AttentionConfig, AttentionEncoder};
pub use resnet::ResidualEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scale::Toy),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected toy|paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Residual,
    Attention,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" | "cnn" => Ok(Backbone::Residual),
            "attention" | "sam" => Ok(Backbone::Attention),
            other => Err(Error::Config(format!("unknown backbone `{other}` (expected residual|attention)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneAssignment {
    pub rgb: Backbone,
    pub depth: Backbone,
}

impl Default for BackboneAssignment {
    fn default() -> Self {
        Self { rgb: Backbone::Residual, depth: Backbone::Attention }
    }
}

impl BackboneAssignment {
    /// The four rows of the backbone ablation, default pairing last.
    pub fn table() -> [(&'static str, BackboneAssignment); 4] {
        use Backbone::*;
        [
            ("Dual CNN", BackboneAssignment { rgb: Residual, depth: Residual }),
            ("Dual SAM", BackboneAssignment { rgb: Attention, depth: Attention }),
            ("SAM+CNN", BackboneAssignment { rgb: Attention, depth: Residual }),
            ("CNN+SAM", BackboneAssignment { rgb: Residual, depth: Attention }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub scale: Scale,
    pub resolution: usize,
    pub common_width: usize,
    pub depth_encoder: AttentionConfig,
    pub pretrained_depth_weights: Option<PathBuf>,
    pub backbones: BackboneAssignment,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            scale: Scale::Toy,
            resolution: 256,
            common_width: 256,
            depth_encoder: AttentionConfig::toy(),
            pretrained_depth_weights: None,
            backbones: BackboneAssignment::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            scale: Scale::Paper,
            resolution: 1024,
            common_width: 256,
            depth_encoder: AttentionConfig::paper(),
            pretrained_depth_weights: None,
            backbones: BackboneAssignment::default(),
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Toy => Self::toy(),
            Scale::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.depth_encoder.validate()?;
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            return Err(Error::Config(format!("resolution {} must be a positive multiple of 16", self.resolution)));
        }
        if !self.resolution.is_multiple_of(self.depth_encoder.patch) || self.resolution / self.depth_encoder.patch != self.resolution / 16 {
            return Err(Error::Config(format!(
                "patch {} must divide resolution {} and give a stride-16 grid",
                self.depth_encoder.patch, self.resolution
            )));
        }
        if self.common_width == 0 {
            return Err(Error::Config("common_width must be positive".into()));
        }
        Ok(())
    }
}

/// A batched feature map `[B, C, S, S]` with its stride in input pixels.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn size(&self) -> usize {
        self.data.dims()[2]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBundle {
    /// Strides 4, 8 and 16; the last is F_rgb at `common_width` channels.
    pub rgb_features: Vec<FeatureMap>,
    pub depth_feature: FeatureMap,
    pub common_width: usize,
}

impl EncoderBundle {
    pub fn rgb(&self) -> &FeatureMap {
        self.rgb_features.last().expect("stride-16 feature")
    }

    pub fn skip(&self, stride: usize) -> Option<&FeatureMap> {
        self.rgb_features.iter().find(|f| f.stride == stride)
    }
}

#[derive(Debug, Clone)]
enum RgbStream {
    Residual { trunk: ResidualEncoder, neck: Conv2d },
    Attention { encoder: Arc<AttentionEncoder>, neck: Conv2d, skip8: Conv2d, skip4: Conv2d },
}

#[derive(Debug, Clone)]
enum DepthStream {
    Residual { trunk: ResidualEncoder, neck: Conv2d },
    Attention { encoder: Arc<AttentionEncoder>, neck: Conv2d },
}

/// Both encoder streams of the model.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    rgb: RgbStream,
    depth: DepthStream,
    cfg: EncoderConfig,
}

impl DualEncoder {
    /// Builds the encoders under `p` (normally the `encoders` prefix). If
    /// pretrained attention weights are configured they are preloaded into
    /// `store` before the frozen encoder is created.
    pub fn new(cfg: &EncoderConfig, store: &ParamStore, p: Params) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.common_width;
        let needs_attention =
            cfg.backbones.rgb == Backbone::Attention || cfg.backbones.depth == Backbone::Attention;
        let attention = if needs_attention {
            let ap = p.pp("attention").freeze(cfg.depth_encoder.frozen);
            if let Some(path) = &cfg.pretrained_depth_weights {
                let weights = attention::load_sam_weights(path, ap.prefix(), &cfg.depth_encoder, cfg.resolution)?;
                store.preload(weights);
            }
            let enc = AttentionEncoder::new(&cfg.depth_encoder, cfg.resolution, ap.clone())?;
            if cfg.pretrained_depth_weights.is_some() {
                store.check_loaded()?;
                let missing = store.not_preloaded(ap.prefix());
                if !missing.is_empty() {
                    return Err(Error::Load(format!("weight file lacks: {}", missing.join(", "))));
                }
            }
            Some(Arc::new(enc))
        } else {
            None
        };
        let d = cfg.depth_encoder.embed_dim;
        let k1 = ConvSpec::k1();
        let rgb = match cfg.backbones.rgb {
            Backbone::Residual => RgbStream::Residual {
                trunk: ResidualEncoder::new(3, p.pp("rgb.residual"))?,
                neck: Conv2d::new(resnet::STAGE_WIDTHS[2], c, k1, p.pp("rgb.neck"))?,
            },
            Backbone::Attention => RgbStream::Attention {
                encoder: attention.clone().expect("attention encoder built"),
                neck: Conv2d::new(d, c, k1, p.pp("rgb.neck"))?,
                skip8: Conv2d::new(d, resnet::STAGE_WIDTHS[1], k1, p.pp("rgb.skip8"))?,
                skip4: Conv2d::new(d, resnet::STAGE_WIDTHS[0], k1, p.pp("rgb.skip4"))?,
            },
        };
        let depth = match cfg.backbones.depth {
            Backbone::Residual => DepthStream::Residual {
                trunk: ResidualEncoder::new(3, p.pp("depth.residual"))?,
                neck: Conv2d::new(resnet::STAGE_WIDTHS[2], c, k1, p.pp("depth.neck"))?,
            },
            Backbone::Attention => DepthStream::Attention {
                encoder: attention.expect("attention encoder built"),
                neck: Conv2d::new(d, c, k1, p.pp("depth.neck"))?,
            },
        };
        Ok(Self { rgb, depth, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let (b, c, h, w) = x
            .dims4()
            .map_err(|_| Error::Shape(format!("{what} input must be [B, {channels}, H, W], got {:?}", x.dims())))?;
        if c != channels || h != w || h != self.cfg.resolution {
            return Err(Error::Shape(format!(
                "{what} input must be [B, {channels}, {r}, {r}], got {:?}",
                x.dims(),
                r = self.cfg.resolution
            )));
        }
        Ok(b)
    }

    /// Stride-4, stride-8 and stride-16 RGB features; the last is F_rgb.
    pub fn encode_rgb(&self, rgb: &Tensor) -> Result<Vec<FeatureMap>> {
        self.check_input(rgb, 3, "rgb")?;
        let (s4, s8, s16) = match &self.rgb {
            RgbStream::Residual { trunk, neck } => {
                let f = trunk.forward(rgb)?;
                (f.s4, f.s8, neck.forward(&f.s16)?)
            }
            RgbStream::Attention { encoder, neck, skip8, skip4 } => {
                let tokens = encoder.forward(rgb)?;
                let g = tokens.dims()[2];
                (
                    ops::resize_bilinear(&skip4.forward(&tokens)?, 4 * g, 4 * g)?,
                    ops::resize_bilinear(&skip8.forward(&tokens)?, 2 * g, 2 * g)?,
                    neck.forward(&tokens)?,
                )
            }
        };
        Ok(vec![
            FeatureMap { data: s4, stride: 4 },
            FeatureMap { data: s8, stride: 8 },
            FeatureMap { data: s16, stride: 16 },
        ])
    }

    /// F_d at stride 16. Single-channel depth is replicated to three channels.
    pub fn encode_depth(&self, depth: &Tensor) -> Result<FeatureMap> {
        self.check_input(depth, 1, "depth")?;
        let x = depth.repeat((1, 3, 1, 1))?;
        let data = match &self.depth {
            DepthStream::Residual { trunk, neck } => neck.forward(&trunk.forward(&x)?.s16)?,
            DepthStream::Attention { encoder, neck } => neck.forward(&encoder.forward(&x)?)?,
        };
        Ok(FeatureMap { data, stride: 16 })
    }

    pub fn encode(&self, rgb: &Tensor, depth: &Tensor) -> Result<EncoderBundle> {
        let rgb_features = self.encode_rgb(rgb)?;
        let depth_feature = self.encode_depth(depth)?;
        Ok(EncoderBundle { rgb_features, depth_feature, common_width: self.cfg.common_width })
    }
}

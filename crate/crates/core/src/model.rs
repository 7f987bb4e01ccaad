//! The full landmark detector and its training objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, LandmarkPrediction};
use crate::encoders::{resnet, BackboneAssignment, DualEncoder, EncoderConfig, Scale};
use crate::fusion::{AnatomicHead, AugmentedFeature, Bfu, ConcatFusion, Sga};
use crate::losses::{self, Lambdas, LossReport};
use crate::params::ParamStore;
use crate::prompt_geometry::{
    self, AttentionMode, ClassActivatedFeatures, GeometricPrompts, MaskPooling, Similarity,
};
use crate::{Error, Result};

/// Module switches. With everything off the model is the plain dual-encoder
/// baseline: concatenated streams straight into the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub bfu: bool,
    pub dpe: bool,
    pub cl: bool,
    pub sga: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub const fn full() -> Self {
        Self { bfu: true, dpe: true, cl: true, sga: true }
    }

    pub const fn baseline() -> Self {
        Self { bfu: false, dpe: false, cl: false, sga: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cl && !self.dpe {
            return Err(Error::Config("the contrastive prompt loss requires the prompt embedding (dpe)".into()));
        }
        Ok(())
    }

    /// The seven rows of the key-design ablation.
    pub fn table() -> [(&'static str, Ablation); 7] {
        let row = |bfu, dpe, cl, sga| Ablation { bfu, dpe, cl, sga };
        [
            ("M.1", row(false, false, false, false)),
            ("M.2", row(true, false, false, false)),
            ("M.3", row(true, true, false, false)),
            ("M.4", row(true, false, false, true)),
            ("M.5", row(true, true, true, false)),
            ("M.6", row(false, true, true, true)),
            ("Ours", row(true, true, true, true)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ablation: Ablation,
    pub se_reduction: usize,
    pub attention_mode: AttentionMode,
}

impl ModelConfig {
    pub fn for_scale(scale: Scale) -> Self {
        Self {
            encoder: EncoderConfig::for_scale(scale),
            ablation: Ablation::full(),
            se_reduction: match scale {
                Scale::Toy => 8,
                Scale::Paper => 16,
            },
            attention_mode: AttentionMode::Sigmoid,
        }
    }

    pub fn with_backbones(mut self, backbones: BackboneAssignment) -> Self {
        self.encoder.backbones = backbones;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ablation.validate()
    }
}

/// Settings of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub tau: f64,
    pub lambdas: Lambdas,
    pub similarity: Similarity,
    pub mask_pooling: MaskPooling,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambdas: Lambdas::default(),
            similarity: Similarity::Cosine,
            mask_pooling: MaskPooling::Any,
        }
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Bfu(Bfu),
    Concat(ConcatFusion),
}

/// Everything a forward pass produces that the objective or diagnostics need.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: LandmarkPrediction,
    /// Depth feature `F_d`, `[B, C, S, S]`.
    pub f_d: Tensor,
    pub fused: Tensor,
    pub class_features: Option<ClassActivatedFeatures>,
    pub augmented: Option<AugmentedFeature>,
    /// `[3, C]` when the prompt embedding is active.
    pub prompts: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LandmarkModel {
    encoder: DualEncoder,
    prompts: Option<GeometricPrompts>,
    fusion: Fusion,
    sga: Option<(Sga, AnatomicHead)>,
    decoder: Decoder,
    cfg: ModelConfig,
}

impl LandmarkModel {
    pub fn new(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let c = cfg.encoder.common_width;
        let encoder = DualEncoder::new(&cfg.encoder, store, root.pp("encoders"))?;
        let ab = cfg.ablation;
        let prompts = if ab.dpe { Some(GeometricPrompts::new(c, root.pp("prompt"))?) } else { None };
        let fusion = if ab.bfu {
            Fusion::Bfu(Bfu::new(c, cfg.se_reduction, root.pp("fusion.bfu"))?)
        } else {
            Fusion::Concat(ConcatFusion::new(c, root.pp("fusion.concat"))?)
        };
        let sga = if ab.sga {
            Some((Sga::new(c, root.pp("fusion.sga"))?, AnatomicHead::new(c, root.pp("anatomic_head"))?))
        } else {
            None
        };
        let decoder = Decoder::new(c, [resnet::STAGE_WIDTHS[1], resnet::STAGE_WIDTHS[0]], root.pp("decoder"))?;
        Ok(Self { encoder, prompts, fusion, sga, decoder, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn resolution(&self) -> usize {
        self.cfg.encoder.resolution
    }

    /// `rgb: [B, 3, H, W]`, `depth: [B, 1, H, W]`.
    pub fn forward(&self, rgb: &Tensor, depth: &Tensor) -> Result<ForwardOutput> {
        let size = self.resolution();
        let bundle = self.encoder.encode(rgb, depth)?;
        let f_rgb = &bundle.rgb().data;
        let f_d = bundle.depth_feature.data.clone();

        let (class_features, prompts) = match &self.prompts {
            Some(p) => {
                let cf = prompt_geometry::prompt_attention(&f_d, p, self.cfg.attention_mode)?;
                (Some(cf), Some(p.matrix()?))
            }
            None => (None, None),
        };
        // prompts without SGA: fusion takes the mean of the class blocks
        let depth_in = match (&class_features, &self.sga) {
            (Some(cf), None) => cf.features.mean(1)?,
            _ => f_d.clone(),
        };
        let fused = match &self.fusion {
            Fusion::Bfu(b) => b.fuse(f_rgb, &depth_in)?,
            Fusion::Concat(c) => c.fuse(f_rgb, &depth_in)?,
        };

        let (decoder_input, augmented, anatomic_prob) = match &self.sga {
            Some((sga, head)) => {
                let blocks: [Tensor; 3] = match &class_features {
                    Some(cf) => [cf.class(0)?, cf.class(1)?, cf.class(2)?],
                    None => [f_d.clone(), f_d.clone(), f_d.clone()],
                };
                let aug = sga.augment(&blocks, &fused)?;
                let anatomic = head.forward(&aug.f_ana, size)?;
                (aug.decoder_input.clone(), Some(aug), Some(anatomic))
            }
            None => (fused.clone(), None, None),
        };

        let mut prediction = self.decoder.predict(&decoder_input, &bundle.rgb_features, size)?;
        prediction.anatomic_prob = anatomic_prob;
        Ok(ForwardOutput { prediction, f_d, fused, class_features, augmented, prompts })
    }

    /// Composite loss for one batch. `masks: [B, 3, H, W]`, `present` one triple per frame.
    pub fn objective(
        &self,
        out: &ForwardOutput,
        masks: &Tensor,
        present: &[[bool; 3]],
        obj: &Objective,
    ) -> Result<(Tensor, LossReport)> {
        let masks = masks.to_dtype(out.prediction.logits.dtype())?;
        let seg = losses::segmentation_loss(&out.prediction.logits, &masks)?;
        let zero = seg.seg.zeros_like()?;
        let (cl, cl_skipped) = match (&out.prompts, self.cfg.ablation.cl) {
            (Some(p), true) => {
                let refs = prompt_geometry::reference_embeddings(&out.f_d, &masks, present, obj.mask_pooling)?;
                let c = prompt_geometry::contrastive_prompt_loss(p, &refs, obj.tau, obj.similarity)?;
                (c.loss, c.skipped)
            }
            _ => (zero.clone(), true),
        };
        let ana = match &out.prediction.anatomic_prob {
            Some(a) => losses::anatomic_loss(a, &masks)?,
            None => zero,
        };
        let total = losses::total_loss(&seg.seg, &cl, &ana, obj.lambdas)?;
        let report = LossReport::new(&total, &seg, &cl, &ana, obj.lambdas, cl_skipped)?;
        Ok((total, report))
    }
}

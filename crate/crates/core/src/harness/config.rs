//! Training configuration and its `key=value` text form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SynthConfig;
use crate::encoders::{Backbone, BackboneAssignment, Scale};
use crate::losses::Lambdas;
use crate::model::{Ablation, ModelConfig, Objective};
use crate::prompt_geometry::{AttentionMode, MaskPooling, Similarity};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Generated on the fly; validation frames use `seed + 1`.
    Synthetic { train: SynthConfig, val_count: usize },
    /// A directory in the manifest layout.
    Directory { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scale: Scale,
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_floor: f64,
    pub tau: f64,
    pub lambdas: Lambdas,
    pub seed: u64,
    pub ablation: Ablation,
    pub backbones: BackboneAssignment,
    pub dataset: DatasetSource,
    pub augment: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub out_dir: PathBuf,
    pub depth_weights: Option<PathBuf>,
    pub se_reduction: usize,
    pub attention_mode: AttentionMode,
    pub similarity: Similarity,
    pub mask_pooling: MaskPooling,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let model = ModelConfig::for_scale(scale);
        let resolution = model.encoder.resolution;
        Self {
            scale,
            resolution,
            epochs: 60,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 3e-5,
            lr_floor: 1e-6,
            tau: 0.07,
            lambdas: Lambdas::default(),
            seed: 0,
            ablation: Ablation::full(),
            backbones: BackboneAssignment::default(),
            dataset: DatasetSource::Synthetic {
                train: SynthConfig { seed: 42, count: 200, resolution, ..SynthConfig::default() },
                val_count: 40,
            },
            augment: true,
            max_steps: None,
            out_dir: PathBuf::from("runs/default"),
            depth_weights: None,
            se_reduction: model.se_reduction,
            attention_mode: AttentionMode::default(),
            similarity: Similarity::default(),
            mask_pooling: MaskPooling::default(),
            eval_every: 1,
        }
    }

    pub fn toy() -> Self {
        Self::for_scale(Scale::Toy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.eval_every < 1 {
            return Err(Error::Config("epochs, batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr > self.lr_floor && self.lr_floor > 0.0) {
            return Err(Error::Config(format!("need lr > lr_floor > 0, got {} and {}", self.lr, self.lr_floor)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        if let DatasetSource::Synthetic { train, .. } = &self.dataset {
            train.validate()?;
        }
        self.model()?.validate()
    }

    /// The architecture this configuration trains.
    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::for_scale(self.scale).with_ablation(self.ablation).with_backbones(self.backbones);
        m.encoder.resolution = self.resolution;
        m.encoder.pretrained_depth_weights = self.depth_weights.clone();
        m.se_reduction = self.se_reduction;
        m.attention_mode = self.attention_mode;
        Ok(m)
    }

    pub fn objective(&self) -> Objective {
        Objective { tau: self.tau, lambdas: self.lambdas, similarity: self.similarity, mask_pooling: self.mask_pooling }
    }

    /// Reads a `key=value` file over the defaults of its `scale` (toy if unset).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let pairs = parse_pairs(&text)?;
        let scale = match pairs.iter().find(|(k, _)| k == "scale") {
            Some((_, v)) => v.parse()?,
            None => Scale::Toy,
        };
        let mut cfg = Self::for_scale(scale);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` setting. Nested fields use dots.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scale" => {
                let scale: Scale = v.parse()?;
                if scale != self.scale {
                    let keep = self.clone();
                    *self = Self::for_scale(scale);
                    self.seed = keep.seed;
                    self.out_dir = keep.out_dir;
                }
            }
            "resolution" => {
                self.resolution = num(key, v)?;
                if let DatasetSource::Synthetic { train, .. } = &mut self.dataset {
                    train.resolution = self.resolution;
                }
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "lr_floor" => self.lr_floor = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "lambdas.seg" => self.lambdas.seg = num(key, v)?,
            "lambdas.cl" => self.lambdas.cl = num(key, v)?,
            "lambdas.ana" => self.lambdas.ana = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "ablation.bfu" => self.ablation.bfu = flag(key, v)?,
            "ablation.dpe" => self.ablation.dpe = flag(key, v)?,
            "ablation.cl" => self.ablation.cl = flag(key, v)?,
            "ablation.sga" => self.ablation.sga = flag(key, v)?,
            "ablation" => self.ablation = ablation_row(v)?,
            "backbones" => self.backbones = backbone_row(v)?,
            "backbones.rgb" => self.backbones.rgb = v.parse::<Backbone>()?,
            "backbones.depth" => self.backbones.depth = v.parse::<Backbone>()?,
            "dataset.path" => self.dataset = DatasetSource::Directory { root: PathBuf::from(v) },
            "dataset.synthetic.seed" => synth(self)?.seed = num(key, v)?,
            "dataset.synthetic.count" => synth(self)?.count = num(key, v)?,
            "dataset.synthetic.curve_thickness_px" => synth(self)?.curve_thickness_px = num(key, v)?,
            "dataset.synthetic.deformation_amplitude" => synth(self)?.deformation_amplitude = num(key, v)?,
            "dataset.synthetic.val_count" => {
                synth(self)?;
                if let DatasetSource::Synthetic { val_count, .. } = &mut self.dataset {
                    *val_count = num(key, v)?;
                }
            }
            "augment" => self.augment = flag(key, v)?,
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(num(key, v)?) },
            "out_dir" => self.out_dir = PathBuf::from(v),
            "depth_weights" => self.depth_weights = if v == "none" { None } else { Some(PathBuf::from(v)) },
            "se_reduction" => self.se_reduction = num(key, v)?,
            "attention_mode" => self.attention_mode = word(key, v)?,
            "similarity" => self.similarity = word(key, v)?,
            "mask_pooling" => self.mask_pooling = word(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }
}

fn synth(cfg: &mut TrainConfig) -> Result<&mut SynthConfig> {
    if !matches!(cfg.dataset, DatasetSource::Synthetic { .. }) {
        let resolution = cfg.resolution;
        cfg.dataset = DatasetSource::Synthetic { train: SynthConfig { resolution, ..SynthConfig::default() }, val_count: 0 };
    }
    match &mut cfg.dataset {
        DatasetSource::Synthetic { train, .. } => Ok(train),
        DatasetSource::Directory { .. } => unreachable!(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn word<T: DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_lowercase()))
        .map_err(|_| Error::Config(format!("`{key}`: unknown value `{v}`")))
}

/// Accepts a row name of the key-design table (`M.1` … `M.6`, `Ours`).
fn ablation_row(v: &str) -> Result<Ablation> {
    Ablation::table()
        .into_iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(v))
        .map(|(_, a)| a)
        .ok_or_else(|| Error::Config(format!("unknown ablation row `{v}`")))
}

/// Accepts `rgb+depth` pairs such as `cnn+sam`.
fn backbone_row(v: &str) -> Result<BackboneAssignment> {
    let (rgb, depth) = v
        .split_once('+')
        .ok_or_else(|| Error::Config(format!("backbones must look like `cnn+sam`, got `{v}`")))?;
    Ok(BackboneAssignment { rgb: rgb.trim().parse()?, depth: depth.trim().parse()? })
}

/// Splits `key=value` lines; `#` starts a comment. Later keys override earlier ones
/// but keep their original position.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match seen.get(&k) {
            Some(&i) => out[i].1 = v,
            None => {
                seen.insert(k.clone(), out.len());
                out.push((k, v));
            }
        }
    }
    Ok(out)
}

/// SHA-256 of the architecture a configuration builds. Weight paths and
/// optimisation settings do not contribute.
pub fn arch_hash(model: &ModelConfig) -> Result<String> {
    let mut m = model.clone();
    m.encoder.pretrained_depth_weights = None;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&m)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = TrainConfig::toy();
        assert_eq!((c.epochs, c.batch_size, c.resolution), (60, 4, 256));
        assert_eq!((c.lr, c.weight_decay, c.lr_floor, c.tau), (1e-4, 3e-5, 1e-6, 0.07));
        assert_eq!(TrainConfig::for_scale(Scale::Paper).resolution, 1024);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn file_values_and_overrides() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# toy run\nepochs = 3\nablation.sga=false\nbackbones=sam+cnn\nsimilarity=dot\ndataset.synthetic.count=12\nepochs=5\n",
        )?;
        let mut c = TrainConfig::from_file(&path)?;
        assert_eq!(c.epochs, 5);
        assert!(!c.ablation.sga);
        assert_eq!(c.backbones, BackboneAssignment { rgb: Backbone::Attention, depth: Backbone::Residual });
        assert_eq!(c.similarity, Similarity::Dot);
        c.set("lr", "3e-4")?;
        assert_eq!(c.lr, 3e-4);
        c.set("ablation", "M.1")?;
        assert_eq!(c.ablation, Ablation::baseline());
        assert!(matches!(c.set("nonsense", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("epochs", "many"), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut c = TrainConfig::toy();
        c.lr_floor = c.lr;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::toy();
        c.ablation = Ablation { dpe: false, ..Ablation::full() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_architecture_only() -> Result<()> {
        let a = TrainConfig::toy();
        let mut b = a.clone();
        b.lr = 1e-3;
        b.seed = 9;
        assert_eq!(arch_hash(&a.model()?)?, arch_hash(&b.model()?)?);
        b.ablation.sga = false;
        assert_ne!(arch_hash(&a.model()?)?, arch_hash(&b.model()?)?);
        Ok(())
    }
}

//! Ablation grids: module switches and backbone pairings.

use std::fmt::Write as _;

use super::config::{DatasetSource, TrainConfig};
use super::evaluate::evaluate_model;
use super::train::{load_frames, Trainer};
use crate::dataset::Split;
use crate::encoders::{Backbone, BackboneAssignment};
use crate::metrics::MetricsReport;
use crate::model::Ablation;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
    pub backbones: BackboneAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// The seven module-switch rows.
    Design,
    /// The four backbone pairings.
    Backbones,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "design" => Ok(Grid::Design),
            "backbones" => Ok(Grid::Backbones),
            _ => Err(Error::Config(format!("unknown grid `{s}` (expected design or backbones)"))),
        }
    }
}

impl Grid {
    pub fn variants(self, base: &TrainConfig) -> Vec<Variant> {
        match self {
            Grid::Design => Ablation::table()
                .into_iter()
                .map(|(name, ablation)| Variant { name: name.into(), ablation, backbones: base.backbones })
                .collect(),
            Grid::Backbones => BackboneAssignment::table()
                .into_iter()
                .map(|(name, backbones)| Variant { name: name.into(), ablation: base.ablation, backbones })
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: Result<MetricsReport>,
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Trains and evaluates every variant under one seed. A failing row is
/// recorded and the rest continue. Directory datasets are scored on their test
/// split, synthetic ones on the validation frames.
pub fn ablate(base: &TrainConfig, variants: &[Variant]) -> Vec<AblationRow> {
    let eval_split = match base.dataset {
        DatasetSource::Directory { .. } => Split::Test,
        DatasetSource::Synthetic { .. } => Split::Val,
    };
    variants
        .iter()
        .map(|v| {
            let result = (|| {
                let mut cfg = base.clone();
                cfg.ablation = v.ablation;
                cfg.backbones = v.backbones;
                cfg.out_dir = base.out_dir.join(slug(&v.name));
                let trainer = Trainer::new(&cfg)?;
                let summary = trainer.fit()?;
                let (model, _, _) = super::checkpoint::load_model(
                    summary.best_checkpoint.as_deref().unwrap_or(&summary.last_checkpoint),
                    Some(&cfg.model()?),
                )?;
                let frames = load_frames(&cfg, eval_split)?;
                evaluate_model(&model, &frames, cfg.batch_size, 0.5)
            })();
            if let Err(e) = &result {
                log::error!("variant {} failed: {e}", v.name);
            }
            AblationRow { variant: v.clone(), result }
        })
        .collect()
}

fn tick(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        " "
    }
}

fn backbone_name(b: Backbone) -> &'static str {
    match b {
        Backbone::Residual => "CNN",
        Backbone::Attention => "SAM",
    }
}

/// Plain-text comparison table: switch columns, then DSC, IoU and Assd.
pub fn render_table(rows: &[AblationRow], grid: Grid) -> String {
    let mut s = String::new();
    match grid {
        Grid::Design => {
            let _ = writeln!(s, "{:<6} {:^4} {:^4} {:^4} {:^4} {:>8} {:>8} {:>8}", "", "BFU", "DPE", "L_cl", "SGA", "DSC↑", "IoU↑", "Assd↓");
        }
        Grid::Backbones => {
            let _ = writeln!(s, "{:<10} {:<5} {:<5} {:>8} {:>8} {:>8}", "", "RGB", "Depth", "DSC↑", "IoU↑", "Assd↓");
        }
    }
    for row in rows {
        let v = &row.variant;
        let metrics = match &row.result {
            Ok(r) => format!("{:>8.2} {:>8.2} {:>8.2}", r.mean_dsc, r.mean_iou, r.mean_assd),
            Err(e) => format!("failed: {e}"),
        };
        let _ = match grid {
            Grid::Design => writeln!(
                s,
                "{:<6} {:^4} {:^4} {:^4} {:^4} {metrics}",
                v.name,
                tick(v.ablation.bfu),
                tick(v.ablation.dpe),
                tick(v.ablation.cl),
                tick(v.ablation.sga)
            ),
            Grid::Backbones => writeln!(
                s,
                "{:<10} {:<5} {:<5} {metrics}",
                v.name,
                backbone_name(v.backbones.rgb),
                backbone_name(v.backbones.depth)
            ),
        };
    }
    s
}

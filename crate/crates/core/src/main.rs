use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geoprompt::dataset::{self, Split, SynthConfig};
use geoprompt::harness::ablate::{self, Grid};
use geoprompt::harness::{evaluate, predict, train, TrainConfig};
use geoprompt::{Error, Result};

#[derive(Parser)]
#[command(name = "geoprompt", version, about = "Liver landmark detection on RGB-D laparoscopic frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set ablation.sga=false` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory with manifest.json
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::toy(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("scale", self.scale.clone());
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("lr", self.lr.map(|v| v.to_string()));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("dataset.path", self.data.as_ref().map(|p| p.display().to_string()));
        flag("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the on-disk layout
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        val: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        thickness: usize,
    },
    /// Train a model
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Require the checkpoint to match the architecture of this configuration
        #[command(flatten)]
        expect: ConfigArgs,
    },
    /// Train and evaluate an ablation grid
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `design` (module switches) or `backbones`
        #[arg(long, default_value = "design")]
        grid: String,
        /// Only run the named rows (comma separated)
        #[arg(long)]
        rows: Option<String>,
    },
    /// Write probability maps and overlays for a directory of images
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of precomputed 16-bit depth maps named like the images
        #[arg(long)]
        depth: Option<PathBuf>,
    },
}

fn gen_synth(out: &std::path::Path, seed: u64, counts: [usize; 3], resolution: usize, thickness: usize) -> Result<()> {
    let total: usize = counts.iter().sum();
    let cfg = SynthConfig { seed, count: total.max(1), resolution, curve_thickness_px: thickness, ..SynthConfig::default() };
    let mut frames = Vec::with_capacity(total);
    let mut index = 0;
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for k in 0..n {
            let mut f = dataset::generate_synthetic(&cfg, index)?;
            f.patient_id = format!("{split}-p{:03}", k / 5);
            frames.push((f, split));
            index += 1;
        }
    }
    let manifest = dataset::write_dataset(out, &frames)?;
    let counts = manifest.counts();
    println!(
        "wrote {} frames to {} (train {}, val {}, test {})",
        total,
        out.display(),
        counts[&Split::Train],
        counts[&Split::Val],
        counts[&Split::Test]
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { out, seed, train, val, test, resolution, thickness } => {
            gen_synth(&out, seed, [train, val, test], resolution, thickness)
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summary = train(&cfg)?;
            println!("trained {} steps; last checkpoint {}", summary.steps, summary.last_checkpoint.display());
            if let Some(best) = &summary.best_checkpoint {
                println!("best val DSC {:.2} at {}", summary.best_val_dsc.unwrap_or(f64::NAN), best.display());
            }
            if let Some(v) = &summary.final_val {
                println!("{v}");
            }
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, split, expect } => {
            let split: Split = split.parse()?;
            let wanted = if expect.config.is_some() || !expect.sets.is_empty() {
                Some(expect.resolve()?.model()?)
            } else {
                None
            };
            let report = evaluate::evaluate_checkpoint(&ckpt, split, wanted.as_ref())?;
            println!("{report}");
            Ok(())
        }
        Command::Ablate { cfg, grid, rows } => {
            let base = cfg.resolve()?;
            let grid: Grid = grid.parse()?;
            let mut variants = grid.variants(&base);
            if let Some(rows) = rows {
                let wanted: Vec<&str> = rows.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                variants.retain(|v| wanted.iter().any(|w| w.eq_ignore_ascii_case(&v.name)));
            }
            let results = ablate::ablate(&base, &variants);
            let table = ablate::render_table(&results, grid);
            std::fs::create_dir_all(&base.out_dir)?;
            std::fs::write(base.out_dir.join("ablation.txt"), &table)?;
            println!("{table}");
            Ok(())
        }
        Command::Predict { checkpoint: ckpt, images, out, depth } => {
            let summary = predict::predict_checkpoint(&ckpt, &images, &out, depth.as_deref())?;
            println!("wrote {} overlays to {}; skipped {}", summary.written.len(), out.display(), summary.skipped.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

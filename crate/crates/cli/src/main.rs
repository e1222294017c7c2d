use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ctvseg::harness::{self, AblationKind, Checkpoint, ExperimentConfig, LmWeights};
use ctvseg::objective::{gradcheck_total_loss, LossWeights};
use ctvseg::phantom::{read_volume, write_dataset, write_volume, ClinicalRecord, GridSpec, Manifest, VolumeData};
use ctvseg::textenc::Vocabulary;
use diffcore::{gradcheck, OpKind};

const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_SEEDS: u64 = 5;

#[derive(Parser)]
#[command(name = "ctvseg", version, about = "Text-conditioned 3D target-volume segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with a manifest.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid extent as HxWxS.
        #[arg(long, default_value = "64x64x32")]
        grid: String,
        /// Voxel spacing in mm as h,w,s.
        #[arg(long, default_value = "1,1,3")]
        spacing: String,
    },
    /// Train a model and write its checkpoint plus `<out>.loss`, and for text
    /// variants without `lm_checkpoint` the pretrained `<out>.lm` and `<out>.vocab`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume given its clinical record.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest and write the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one comparative study.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every differentiable operation and the loss against finite differences.
    Gradcheck,
}

/// Config through the experiment parser so errors carry the right exit code.
fn grid_spec(grid: &str, spacing: &str) -> Result<GridSpec> {
    let mut c = ExperimentConfig::default();
    c.set("grid", grid)?;
    c.set("spacing", spacing)?;
    Ok(c.grid_spec())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    PathBuf::from(format!("{}.{ext}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { n, out, seed, grid, spacing } => {
            let spec = grid_spec(&grid, &spacing)?;
            let manifest = write_dataset(&out, n, seed, &spec)?;
            println!("wrote {n} phantoms, manifest {}", manifest.display());
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::read(&config)?;
            let lm = if cfg.variant.uses_lm() { Some(LmWeights::obtain(&cfg)?) } else { None };
            let cases = harness::train::training_cases(&cfg)?;
            let outcome = harness::train::<f32>(&cfg, &cases, lm.as_ref())?;
            outcome.checkpoint.save(&out)?;
            let log_path = sibling(&out, "loss");
            std::fs::write(&log_path, harness::train::render_log(&outcome.log)).with_context(|| format!("writing {}", log_path.display()))?;
            if let (Some(lm), None) = (&lm, &cfg.lm_checkpoint) {
                // keep the pretrained model so later configs can point `lm_checkpoint` at it
                lm.lm.write_checkpoint(&lm.store, &sibling(&out, "lm"))?;
                Vocabulary::clinical().write(&sibling(&out, "vocab"))?;
            }
            println!("trained {} steps, final epoch loss {:.6}", outcome.checkpoint.step, outcome.log.last().copied().unwrap_or(f64::NAN));
        }
        Command::Infer { ckpt, volume, record, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let vol = read_volume(&volume)?.into_intensity()?;
            let text = std::fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
            let rec = ClinicalRecord::parse_file(&text).map_err(anyhow::Error::from)?;
            let prompt = ck.model.render(&rec, &ck.config.omit);
            let mask = harness::sliding_window_infer(&ck.model, &vol, &prompt, ck.config.patch)?;
            write_volume(&out, &VolumeData::Mask(mask))?;
        }
        Command::Eval { ckpt, manifest, report } => {
            let ck = load_checkpoint(&ckpt)?;
            let cases = Manifest::read(&manifest)?.load()?;
            let r = harness::evaluate(&ck.model, &cases, &ck.config.omit, ck.config.patch, ck.config.seed)?;
            r.write(&report)?;
            println!("dice {:.4} [{:.4}, {:.4}] over {} cases", r.dice.mean, r.dice.low, r.dice.high, r.cases.len());
        }
        Command::Ablate { kind, config, out } => {
            let kind: AblationKind = kind.parse()?;
            let cfg = ExperimentConfig::read(&config)?;
            print!("{}", harness::run_ablation(kind, &cfg, &out)?);
        }
        Command::Gradcheck => {
            let mut failed = Vec::new();
            for kind in OpKind::ALL {
                let worst = (0..GRADCHECK_SEEDS).map(|s| gradcheck(kind, s)).collect::<Result<Vec<_>, _>>()?.into_iter().fold(0.0, f64::max);
                println!("{kind:<16} {worst:.3e}");
                if worst >= GRADCHECK_TOLERANCE {
                    failed.push(kind.to_string());
                }
            }
            let worst = (0..GRADCHECK_SEEDS).map(|s| gradcheck_total_loss(s, LossWeights::default())).collect::<Result<Vec<_>, _>>()?.into_iter().fold(0.0, f64::max);
            println!("{:<16} {worst:.3e}", "TotalLoss");
            if worst >= GRADCHECK_TOLERANCE {
                failed.push("TotalLoss".into());
            }
            if !failed.is_empty() {
                bail!(ctvseg::Error::Degenerate(format!("gradient check above {GRADCHECK_TOLERANCE:e}: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Maps library errors to 2 (config), 3 (data) or 4 (numeric); anything else is a data error.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<ctvseg::Error>()) {
        return e.exit_code() as u8;
    }
    if err.chain().any(|c| c.downcast_ref::<diffcore::DiffError>().is_some()) {
        return 4;
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fovguide::datagen::SceneConfig;
use fovguide::ig2d::{load_guide, pixel_accuracy, save_guide, train_guide, GuideMode};
use fovguide::pipeline::{
    evaluate, generate_dataset, read_dataset, run_ablation, train_student, write_dataset, Checkpoint, RunConfig,
    Supervision, Toggles,
};
use fovguide::Error;

#[derive(Parser)]
#[command(
    name = "fovguide",
    version,
    about = "Image-guided LiDAR segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Extra configuration entries, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> fovguide::Result<()> {
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`{kv}` is not of the form key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training frames.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fully label this fraction of the training frames.
        #[arg(long, conflicts_with = "scribble")]
        semi: Option<f64>,
        /// Scribble-label this fraction of every training frame.
        #[arg(long)]
        scribble: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the frozen 2D guide on source images and target scribbles.
    TrainGuide {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip target adaptation.
        #[arg(long)]
        source_only: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the 3D student.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        guide: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of mt, ig, cl, fovmix (or `none`).
        #[arg(long)]
        toggles: Option<String>,
        /// Continue from a saved student instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a student on the evaluation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Fully supervised mIoU for the relative score.
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Train every component combination and write the comparison tables.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Trained guide; one is trained in-process when absent.
        #[arg(long)]
        guide: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn run(cli: Cli) -> fovguide::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            frames,
            seed,
            semi,
            scribble,
            overrides,
        } => {
            let mut cfg = RunConfig::default();
            overrides.apply(&mut cfg)?;
            cfg.seed = seed;
            cfg.train_frames = frames;
            if let Some(r) = semi {
                cfg.supervision = Supervision::Semi(r);
            } else if let Some(b) = scribble {
                cfg.supervision = Supervision::Weak(b);
            }
            cfg.validate()?;
            let data = generate_dataset(&cfg, &SceneConfig::default())?;
            write_dataset(&out, &data, &cfg)?;
            println!(
                "wrote {} train, {} source and {} eval frames to {}",
                data.train.len(),
                data.source.len(),
                data.eval.len(),
                out.display()
            );
        }
        Command::TrainGuide {
            data,
            out,
            source_only,
            overrides,
        } => {
            let (data, mut cfg) = read_dataset(&data)?;
            overrides.apply(&mut cfg)?;
            if source_only {
                cfg.guide_adapt = false;
            }
            let gc = cfg.guide_config();
            let mode = gc.mode;
            let trained = train_guide(&data.source, &data.train, data.num_classes(), &gc)?;
            save_guide(&out, &trained.model)?;
            let acc = pixel_accuracy(&trained.model, &data.eval)?;
            let mode = if mode == GuideMode::Adapt {
                "adapted"
            } else {
                "source-only"
            };
            println!("{mode} guide saved to {}; eval pixel accuracy {acc:.4}", out.display());
        }
        Command::TrainStudent {
            data,
            guide,
            out,
            toggles,
            resume,
            overrides,
        } => {
            let (data, mut cfg) = read_dataset(&data)?;
            if let Some(t) = &toggles {
                cfg.toggles = t.parse::<Toggles>()?;
            }
            overrides.apply(&mut cfg)?;
            let guide = guide.map(load_guide).transpose()?;
            let ckpt = match resume {
                Some(path) => {
                    let prev = Checkpoint::load(path)?;
                    let until = cfg.steps;
                    fovguide::pipeline::continue_training(prev, &data, guide.as_ref(), until)?
                }
                None => train_student(&cfg, &data, guide.as_ref())?,
            };
            ckpt.save(&out)?;
            let last = ckpt.history.last().map_or(f64::NAN, |b| b.total);
            println!(
                "{} student trained for {} steps (final loss {last:.4}), saved to {}",
                ckpt.config.toggles.label(),
                ckpt.step,
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            report,
            reference,
        } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let (data, _) = read_dataset(&data)?;
            let rep = evaluate(&ckpt, &data, reference)?;
            fs::write(&report, rep.to_key_value())?;
            println!("mIoU {:.4}, report written to {}", rep.miou, report.display());
        }
        Command::Ablate {
            data,
            out,
            seeds,
            guide,
            overrides,
        } => {
            let (data, mut cfg) = read_dataset(&data)?;
            overrides.apply(&mut cfg)?;
            let guide = match guide {
                Some(p) => load_guide(p)?,
                None => train_guide(&data.source, &data.train, data.num_classes(), &cfg.guide_config())?.model,
            };
            let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let rep = run_ablation(
                &cfg,
                &data,
                Some(&guide),
                &Toggles::ablation_rows(),
                &seeds,
                |row, seed, r| eprintln!("{row:<18} seed {seed}: mIoU {:.4}", r.miou),
            )?;
            let text = format!("{}\n{}", rep.to_table(), rep.to_split_table());
            fs::write(&out, &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Io(_) => (3, "io"),
        Error::Format { .. } => (3, "format"),
        Error::Config(_) => (4, "config"),
        Error::Diverged { .. } | Error::NonFiniteLoss { .. } => (5, "divergence"),
        _ => (1, "error"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            eprintln!("fovguide: {category}: {e}");
            ExitCode::from(code)
        }
    }
}

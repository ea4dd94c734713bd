use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posediff::commands::{self, SceneSelection};
use posediff::config::{RunConfig, SEED_ENV};
use posediff::error::CliError;
use posediff_core::denoiser::Objective;

#[derive(Parser, Debug)]
#[command(name = "posediff", version, about = "Camera pose estimation by geometry-guided diffusion")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the file and the POSEDIFF_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    guidance: GuidanceFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GuidanceFlags {
    /// Sampson clamp threshold (normalized image units); `inf` disables clamping.
    #[arg(long, global = true, allow_negative_numbers = true)]
    ggs_eps: Option<f64>,
    /// Cap on the update norm relative to the mean's norm.
    #[arg(long, global = true, allow_negative_numbers = true)]
    ggs_alpha: Option<f64>,
    #[arg(long, global = true)]
    ggs_iters: Option<usize>,
    /// Guide only the final this-many reverse steps.
    #[arg(long, global = true)]
    ggs_last_steps: Option<usize>,
    /// Plain DDPM sampling.
    #[arg(long, global = true)]
    no_ggs: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ObjectiveArg {
    Diffusion,
    Regression,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Split {
    Test,
    Train,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Defaults to `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Train a denoiser on the training split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
    },
    /// Sample camera poses for dataset scenes.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene name; repeatable. Overrides `--split`.
        #[arg(long)]
        scene: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction file, or a directory of them (a sample output directory works).
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory or a single camera file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw accuracy figures from report CSVs.
    Plot {
        /// `LABEL=PATH` or just `PATH` (label from the parent directory); repeatable.
        #[arg(long = "report", required = true)]
        reports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let g = &cli.guidance;
    let sec = &mut cfg.guidance;
    if let Some(v) = g.ggs_eps {
        sec.epsilon = v;
    }
    if let Some(v) = g.ggs_alpha {
        sec.alpha = v;
    }
    if let Some(v) = g.ggs_iters {
        sec.ggs_iters = v;
    }
    if let Some(v) = g.ggs_last_steps {
        sec.guided_last_steps = v;
    }
    if g.no_ggs {
        sec.enabled = false;
    }
    match &cli.command {
        Command::Synth { n_scenes: Some(n), .. } => cfg.data.n_scenes = *n,
        Command::Train { steps, objective, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(o) = objective {
                cfg.train.objective = match o {
                    ObjectiveArg::Diffusion => Objective::Diffusion,
                    ObjectiveArg::Regression => Objective::Regression,
                };
            }
        }
        _ => {}
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn report_arg(s: &str) -> (String, PathBuf) {
    if let Some((label, path)) = s.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let p = PathBuf::from(s);
    let label = p
        .parent()
        .and_then(|d| d.file_name())
        .and_then(|d| d.to_str())
        .unwrap_or(s)
        .to_string();
    (label, p)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    let out_or = |o: &Option<PathBuf>| o.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let data_or = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| cfg.data.dir.clone());
    match &cli.command {
        Command::Synth { out, .. } => {
            commands::synth(&cfg, &data_or(out))?;
        }
        Command::Train { data, out, .. } => {
            let s = commands::train(&cfg, &data_or(data), &out_or(out))?;
            log::info!("trained {} steps, loss {:.5} -> {:.5}", s.steps, s.initial_loss, s.final_loss);
        }
        Command::Sample {
            checkpoint,
            data,
            scene,
            split,
            out,
        } => {
            let sel = if !scene.is_empty() {
                SceneSelection::Named(scene.clone())
            } else {
                match split {
                    Split::Test => SceneSelection::Test,
                    Split::Train => SceneSelection::Train,
                    Split::All => SceneSelection::All,
                }
            };
            let s = commands::sample(&cfg, checkpoint, &data_or(data), &sel, &out_or(out))?;
            log::info!("sampled {} scenes", s.len());
        }
        Command::Eval { pred, gt, out } => {
            let r = commands::eval(&cfg, pred, gt, &out_or(out))?;
            println!(
                "mARE {:.2}  mATE {:.2}  mRRE {:.2}  mRTE {:.2}",
                r.are.mean_accuracy * 100.0,
                r.ate.mean_accuracy * 100.0,
                r.rre.mean_accuracy * 100.0,
                r.rte.mean_accuracy * 100.0
            );
        }
        Command::Plot { reports, out } => {
            let reports: Vec<(String, PathBuf)> = reports.iter().map(|r| report_arg(r)).collect();
            for p in commands::plot(&cfg, &reports, &out_or(out))? {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": { "kind": e.kind(), "code": e.exit_code(), "message": e.to_string() }
            });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

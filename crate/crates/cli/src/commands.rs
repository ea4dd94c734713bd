//! The five subcommands. Each takes a finalized [`RunConfig`], writes its
//! artifacts plus a copy of the effective config, and is deterministic for a
//! fixed seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use posediff_core::denoiser::{self, load_checkpoint, save_checkpoint, DenoiserParams, Objective};
use posediff_core::diffusion::{DiffusionSchedule, GaussianNoise, PoseTuple};
use posediff_core::evalkit::{scene_errors, MetricReport, SceneErrors};
use posediff_core::guidance::{guided_ddpm_sample, regression_predict, total_sampson, TraceRow};
use posediff_core::io::{self, DatasetManifest};
use posediff_core::scenegen::{generate_dataset, scene_seed, Dataset, SceneRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const TRACES_DIR: &str = "traces";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest, CliError> {
    let d = &cfg.data;
    let ds = generate_dataset(d.n_scenes, &d.distribution, cfg.seed, d.train_ratio)?;
    let m = io::write_dataset(out, &ds, &d.distribution, cfg.seed, d.train_ratio)?;
    cfg.echo_into(out)?;
    log::info!("wrote {} scenes ({} train / {} test) to {}", ds.scenes.len(), ds.train.len(), ds.test.len(), out.display());
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub objective: Objective,
    pub param_count: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn check_embed_dim(cfg: &RunConfig, scenes: &[SceneRecord]) -> Result<(), CliError> {
    let want = cfg.denoiser.embed_dim;
    if let Some(s) = scenes.iter().find(|s| s.conditioning.iter().any(|c| c.len() != want)) {
        return Err(CliError::Config(format!(
            "denoiser.embed_dim = {want} but scene {} carries embeddings of width {}",
            s.name,
            s.conditioning.first().map_or(0, |c| c.len())
        )));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let (ds, _) = io::read_dataset(data_dir)?;
    let scenes = ds.train_scenes();
    if scenes.is_empty() {
        return Err(CliError::Data(format!("{} has no training scenes", data_dir.display())));
    }
    check_embed_dim(cfg, &scenes)?;
    let schedule = cfg.schedule.build()?;
    let init = DenoiserParams::init(cfg.denoiser, cfg.seed)?;
    let outcome = denoiser::train(init, &scenes, &schedule, &cfg.train)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    save_checkpoint(&ckpt, &outcome.params, &cfg.schedule, cfg.train.objective)?;
    let mut csv = String::from("step,loss\n");
    for (k, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{k},{l}\n"));
    }
    io::write_text(&out.join(LOSS_CURVE_FILE), &csv)?;
    cfg.echo_into(out)?;
    let summary = TrainSummary {
        objective: cfg.train.objective,
        param_count: outcome.params.param_count(),
        steps: outcome.losses.len(),
        initial_loss: outcome.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        checkpoint: ckpt,
    };
    io::write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Which scenes of a dataset to sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SceneSelection {
    Test,
    Train,
    All,
    Named(Vec<String>),
}

fn select<'a>(ds: &'a Dataset, sel: &SceneSelection) -> Result<Vec<(usize, &'a SceneRecord)>, CliError> {
    let idx: Vec<usize> = match sel {
        SceneSelection::Test => ds.test.clone(),
        SceneSelection::Train => ds.train.clone(),
        SceneSelection::All => (0..ds.scenes.len()).collect(),
        SceneSelection::Named(names) => names
            .iter()
            .map(|n| {
                ds.scenes
                    .iter()
                    .position(|s| &s.name == n)
                    .ok_or_else(|| CliError::Data(format!("no scene named {n:?}")))
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(idx.into_iter().map(|k| (k, &ds.scenes[k])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSummary {
    pub scene: String,
    pub guided: bool,
    pub sampson_final: f64,
}

pub struct SampleOutput {
    pub scene: String,
    pub poses: PoseTuple,
    pub trace: Vec<TraceRow>,
}

/// Samples one scene; the noise stream depends only on the seed and the
/// scene's dataset index.
pub fn sample_scene(
    cfg: &RunConfig,
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    objective: Objective,
    index: usize,
    scene: &SceneRecord,
) -> Result<SampleOutput, CliError> {
    let guidance = cfg.guidance.active();
    let (poses, trace) = match objective {
        Objective::Diffusion => {
            let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index)));
            let run = guided_ddpm_sample(
                params,
                schedule,
                &scene.conditioning,
                &scene.matches,
                guidance.as_ref(),
                &mut noise,
            )?;
            (run.poses, run.trace)
        }
        Objective::Regression => {
            let eps = cfg.guidance.epsilon;
            let raw = regression_predict(params, schedule, &scene.conditioning, &scene.matches, None)?;
            let poses = match &guidance {
                Some(g) => regression_predict(params, schedule, &scene.conditioning, &scene.matches, Some(g))?,
                None => raw.clone(),
            };
            let row = TraceRow {
                t: schedule.steps(),
                sampson_raw: total_sampson(&raw.to_flat(), &scene.matches, eps),
                sampson_used: total_sampson(&poses.to_flat(), &scene.matches, eps),
                guided: guidance.as_ref().is_some_and(|g| !g.is_noop() && !scene.matches.is_empty()),
            };
            (poses, vec![row])
        }
    };
    Ok(SampleOutput {
        scene: scene.name.clone(),
        poses,
        trace,
    })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("t,sampson_raw,sampson_used,guided\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.t, r.sampson_raw, r.sampson_used, r.guided as u8));
    }
    s
}

pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    selection: &SceneSelection,
    out: &Path,
) -> Result<Vec<SampleSummary>, CliError> {
    let (params, manifest) = load_checkpoint(checkpoint)?;
    if manifest.schedule != cfg.schedule {
        log::warn!("config schedule differs from the checkpoint's; using the checkpoint's");
    }
    let schedule = manifest.schedule.build()?;
    let (ds, _) = io::read_dataset(data_dir)?;
    let chosen = select(&ds, selection)?;
    if chosen.is_empty() {
        return Err(CliError::Data("no scenes selected".into()));
    }
    let scenes: Vec<SceneRecord> = chosen.iter().map(|(_, s)| (*s).clone()).collect();
    if let Some(s) = scenes.iter().find(|s| s.conditioning.iter().any(|c| c.len() != manifest.embed_dim)) {
        return Err(CliError::Data(format!("scene {} does not match the checkpoint's embedding width", s.name)));
    }
    let outputs: Vec<SampleOutput> = chosen
        .par_iter()
        .map(|(k, s)| sample_scene(cfg, &params, &schedule, manifest.objective, *k, s))
        .collect::<Result<_, _>>()?;
    let mut summary = Vec::with_capacity(outputs.len());
    for o in &outputs {
        io::write_cameras(&out.join(PREDICTIONS_DIR).join(format!("{}.json", o.scene)), &o.poses)?;
        io::write_text(&out.join(TRACES_DIR).join(format!("{}.csv", o.scene)), &trace_csv(&o.trace))?;
        summary.push(SampleSummary {
            scene: o.scene.clone(),
            guided: o.trace.iter().any(|r| r.guided),
            sampson_final: o.trace.last().map_or(0.0, |r| r.sampson_used),
        });
    }
    io::write_json(&out.join("samples.json"), &summary)?;
    cfg.echo_into(out)?;
    Ok(summary)
}

/// Ground truth for evaluation: a dataset directory or one camera file.
fn gt_map(gt: &Path) -> Result<BTreeMap<String, PoseTuple>, CliError> {
    if gt.is_dir() {
        let (ds, _) = io::read_dataset(gt)?;
        Ok(ds.scenes.into_iter().map(|s| (s.name, s.ground_truth)).collect())
    } else {
        Ok(BTreeMap::from([(stem(gt)?, io::read_cameras(gt)?)]))
    }
}

fn stem(p: &Path) -> Result<String, CliError> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Data(format!("bad file name {}", p.display())))
}

fn prediction_files(pred: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !pred.is_dir() {
        return Ok(vec![pred.to_path_buf()]);
    }
    let dir = if pred.join(PREDICTIONS_DIR).is_dir() {
        pred.join(PREDICTIONS_DIR)
    } else {
        pred.to_path_buf()
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no prediction files in {}", dir.display())));
    }
    Ok(files)
}

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<MetricReport, CliError> {
    let gts = gt_map(gt)?;
    let files = prediction_files(pred)?;
    let single = files.len() == 1 && gts.len() == 1;
    let jobs: Vec<(String, PoseTuple, &PoseTuple)> = files
        .iter()
        .map(|f| {
            let name = stem(f)?;
            let truth = if single {
                gts.values().next()
            } else {
                gts.get(&name)
            }
            .ok_or_else(|| CliError::Data(format!("no ground truth for prediction {name:?}")))?;
            Ok((name, io::read_cameras(f)?, truth))
        })
        .collect::<Result<_, CliError>>()?;
    let scenes: Vec<SceneErrors> = jobs
        .par_iter()
        .map(|(name, p, g)| scene_errors(name, p, g))
        .collect::<Result<_, _>>()?;
    let report = MetricReport::from_scenes(scenes, &cfg.eval);
    io::write_json(&out.join(REPORT_JSON), &report)?;
    io::write_text(&out.join(REPORT_CSV), &report.to_csv(&cfg.eval))?;
    cfg.echo_into(out)?;
    Ok(report)
}

/// `reports` pairs a legend label with a report CSV.
pub fn plot(cfg: &RunConfig, reports: &[(String, PathBuf)], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if reports.is_empty() {
        return Err(CliError::Config("plot needs at least one report".into()));
    }
    let series = reports
        .iter()
        .map(|(label, path)| {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let rows = plot::parse_report_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok((label.clone(), rows))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let a = out.join("accuracy_vs_threshold.svg");
    let b = out.join("accuracy_vs_frames.svg");
    io::write_text(&a, &plot::accuracy_vs_threshold(&series))?;
    io::write_text(&b, &plot::accuracy_vs_frames(&series))?;
    cfg.echo_into(out)?;
    Ok(vec![a, b])
}

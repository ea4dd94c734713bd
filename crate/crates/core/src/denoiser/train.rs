use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, DenoiserError, DenoiserParams, LossAndGrad, Objective, TrainingExample};
use crate::diffusion::{DiffusionSchedule, GaussianNoise};
use crate::scenegen::SceneRecord;

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Scenes per step; each draws its own step, frame subset and pivot.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (passes over the dataset's scene count) before the ten-fold decay.
    pub lr_decay_epochs: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 5e-4,
            lr_decay_epochs: 30.0,
            min_frames: 3,
            max_frames: 20,
            objective: Objective::Diffusion,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// One batch element: which scene, frames, pivot, step and noise stream.
struct Draw {
    scene: usize,
    frames: Vec<usize>,
    pivot: usize,
    t: usize,
    noise_seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, dataset: &[SceneRecord], cfg: &TrainConfig, steps: usize) -> Draw {
    let scene = rng.random_range(0..dataset.len());
    let n = dataset[scene].n_frames();
    let hi = cfg.max_frames.min(n).max(2.min(n));
    let lo = cfg.min_frames.min(hi).max(1);
    let k = rng.random_range(lo..=hi);
    let mut idx: Vec<usize> = (0..n).collect();
    for s in 0..k {
        let j = rng.random_range(s..n);
        idx.swap(s, j);
    }
    let mut frames = idx[..k].to_vec();
    frames.sort_unstable();
    Draw {
        scene,
        pivot: rng.random_range(0..k),
        frames,
        t: rng.random_range(1..=steps),
        noise_seed: rng.random(),
    }
}

fn example(d: &Draw, dataset: &[SceneRecord]) -> Result<TrainingExample, DenoiserError> {
    let s = &dataset[d.scene];
    let poses = s.ground_truth.select(&d.frames);
    let cond = d.frames.iter().map(|&f| s.conditioning[f].clone()).collect();
    TrainingExample::new(&poses, cond, d.pivot)
}

fn batch_loss(
    params: &DenoiserParams,
    draws: &[Draw],
    dataset: &[SceneRecord],
    schedule: &DiffusionSchedule,
    objective: Objective,
) -> Result<Vec<LossAndGrad>, DenoiserError> {
    draws
        .par_iter()
        .map(|d| {
            let ex = example(d, dataset)?;
            let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(d.noise_seed));
            diffusion_loss(params, &ex, d.t, schedule, objective, &mut noise)
        })
        .collect()
}

/// Fits the denoiser with Adam; per batch element a uniform step `t`, a
/// random frame subset and a fresh pivot are drawn.
pub fn train(
    init: DenoiserParams,
    dataset: &[SceneRecord],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome, DenoiserError> {
    if dataset.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(DenoiserError::Config("batch_size must be positive".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.n_frames() < 2) {
        return Err(DenoiserError::Shape(format!("scene {} has fewer than 2 frames", s.name)));
    }
    let mut params = init;
    let mut adam = Adam::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let mut grad = vec![0.0; params.param_count()];
    for step in 0..config.steps {
        let draws: Vec<Draw> = (0..config.batch_size)
            .map(|_| draw(&mut rng, dataset, config, schedule.steps()))
            .collect();
        let parts = batch_loss(&params, &draws, dataset, schedule, config.objective).map_err(|e| match e {
            DenoiserError::NonFinite { detail, .. } => DenoiserError::NonFinite { step, detail },
            other => other,
        })?;
        grad.fill(0.0);
        let mut loss = 0.0;
        let w = 1.0 / parts.len() as f64;
        for p in &parts {
            loss += w * p.loss;
            for (g, v) in grad.iter_mut().zip(&p.grad) {
                *g += w * v;
            }
        }
        if !loss.is_finite() {
            return Err(DenoiserError::NonFinite {
                step,
                detail: format!("batch loss {loss}"),
            });
        }
        if loss > DIVERGENCE_LOSS {
            return Err(DenoiserError::Diverged { step, loss });
        }
        losses.push(loss);
        let epoch = (step * config.batch_size) as f64 / dataset.len() as f64;
        let lr = if epoch >= config.lr_decay_epochs {
            0.1 * config.learning_rate
        } else {
            config.learning_rate
        };
        adam.update(params.values_mut(), &grad, lr);
        if !params.is_finite() {
            return Err(DenoiserError::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.6} lr {lr:e}");
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean loss over `draws` seeded batch elements; the same seed always
/// evaluates the same (scene, frames, pivot, t, noise) tuples.
pub fn evaluation_loss(
    params: &DenoiserParams,
    dataset: &[SceneRecord],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    draws: usize,
    seed: u64,
) -> Result<f64, DenoiserError> {
    if dataset.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds: Vec<Draw> = (0..draws)
        .map(|_| draw(&mut rng, dataset, config, schedule.steps()))
        .collect();
    let parts = batch_loss(params, &ds, dataset, schedule, config.objective)?;
    Ok(parts.iter().map(|p| p.loss).sum::<f64>() / parts.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::denoiser::DenoiserConfig;
    use crate::scenegen::{generate_scene, SceneSpec};

    fn scene(n_frames: usize, embed_dim: usize) -> SceneRecord {
        let mut s = generate_scene(&SceneSpec {
            n_frames,
            seed: 21,
            ..SceneSpec::default()
        })
        .unwrap();
        for c in s.conditioning.iter_mut() {
            c.truncate(embed_dim);
        }
        s
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = tiny_config();
        let init = DenoiserParams::init(cfg, 1).unwrap();
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap();
        let tc = TrainConfig {
            steps: 5,
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(init.clone(), &[scene(4, cfg.embed_dim)], &sched, &tc).unwrap();
        assert_eq!(out.params.values(), init.values());
        assert_eq!(out.losses.len(), 5);
    }

    #[test]
    fn seeded_training_is_repeatable() {
        let cfg = tiny_config();
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap();
        let tc = TrainConfig {
            steps: 20,
            batch_size: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let data = [scene(5, cfg.embed_dim)];
        let a = train(DenoiserParams::init(cfg, 1).unwrap(), &data, &sched, &tc).unwrap();
        let b = train(DenoiserParams::init(cfg, 1).unwrap(), &data, &sched, &tc).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn empty_dataset_rejected() {
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap();
        let p = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        assert!(matches!(
            train(p, &[], &sched, &TrainConfig::default()),
            Err(DenoiserError::EmptyDataset)
        ));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut a = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        a.update(&mut p, &[1.0, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }
}

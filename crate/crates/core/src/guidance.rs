//! Geometry-guided sampling.
//!
//! The guidance density is `log p(I | x) = -Σ_{(i,j)} e_ij(x_i, x_j) + const`,
//! a product of exponentials over pairwise robust Sampson errors. During the
//! last few reverse-diffusion steps the predicted mean is nudged along
//! `∇ log p` for a fixed number of iterations, with the strength chosen so
//! that every update is at most `alpha · ‖mean‖` long.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiserError, DenoiserParams};
use crate::diffusion::{ddpm_sample_flat, DiffusionError, DiffusionSchedule, MeanHook, NoiseSource, PoseTuple};
use crate::geometry::epipolar::{evaluate_raw, gradient_params};
use crate::geometry::{CorrespondenceSet, GeometryError, CAMERA_DIM, DEFAULT_SAMPSON_EPSILON};

/// Frame used as the coordinate anchor at inference.
pub const INFERENCE_PIVOT: usize = 0;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("correspondence set ({i}, {j}) references a frame outside 0..{frames}")]
    PairIndex { i: usize, j: usize, frames: usize },
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Sampson clamp ε.
    pub epsilon: f64,
    /// Update cap as a multiple of the current mean's norm.
    pub alpha: f64,
    /// Gradient iterations per guided step.
    pub ggs_iters: usize,
    /// Guidance is applied for `t <= guided_last_steps`.
    pub guided_last_steps: usize,
    /// Fixed strength `s`; the cap still applies. `None` uses the cap alone.
    pub strength: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_SAMPSON_EPSILON,
            alpha: 1e-4,
            ggs_iters: 100,
            guided_last_steps: 10,
            strength: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.epsilon > 0.0) {
            return Err(GuidanceError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(GuidanceError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if let Some(s) = self.strength {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(GuidanceError::Config(format!("strength must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.alpha == 0.0 || self.ggs_iters == 0 || self.guided_last_steps == 0 || self.strength == Some(0.0)
    }
}

fn check_pairs(n_frames: usize, matches: &[CorrespondenceSet]) -> Result<(), GuidanceError> {
    for m in matches {
        if m.i >= n_frames || m.j >= n_frames {
            return Err(GuidanceError::PairIndex {
                i: m.i,
                j: m.j,
                frames: n_frames,
            });
        }
        m.validate()?;
    }
    Ok(())
}

fn block(flat: &[f64], k: usize) -> [f64; CAMERA_DIM] {
    std::array::from_fn(|c| flat[k * CAMERA_DIM + c])
}

/// `Σ e_ij` over all correspondence sets for a flat pose block.
pub fn total_sampson(flat: &[f64], matches: &[CorrespondenceSet], epsilon: f64) -> f64 {
    matches
        .iter()
        .map(|m| evaluate_raw(&block(flat, m.i), &block(flat, m.j), m, epsilon).total)
        .sum()
}

/// `log p(I | x)` up to an additive constant.
pub fn log_guidance_density(
    poses: &PoseTuple,
    matches: &[CorrespondenceSet],
    epsilon: f64,
) -> Result<f64, GuidanceError> {
    if !(epsilon > 0.0) {
        return Err(GeometryError::InvalidEpsilon(epsilon).into());
    }
    check_pairs(poses.len(), matches)?;
    Ok(-total_sampson(&poses.to_flat(), matches, epsilon))
}

/// `∇_x log p(I | x)` on the flat block, with the pivot's extrinsic entries zeroed.
pub fn log_density_gradient(flat: &[f64], matches: &[CorrespondenceSet], epsilon: f64, pivot: usize) -> Vec<f64> {
    let mut g = vec![0.0; flat.len()];
    for m in matches {
        let pg = gradient_params(&block(flat, m.i), &block(flat, m.j), m, epsilon);
        for c in 0..CAMERA_DIM {
            g[m.i * CAMERA_DIM + c] -= pg.cam_i[c];
            g[m.j * CAMERA_DIM + c] -= pg.cam_j[c];
        }
    }
    if pivot * CAMERA_DIM < g.len() {
        // Gauge fixing: the pivot's rotation and translation stay put; its focal may move.
        for c in 1..CAMERA_DIM {
            g[pivot * CAMERA_DIM + c] = 0.0;
        }
    }
    g
}

/// Result of one guided-mean refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedMean {
    pub mean: Vec<f64>,
    /// Updates actually applied.
    pub iterations: usize,
    /// Largest `‖Δ‖ / (alpha · ‖mean‖)` seen; at most 1.
    pub max_cap_ratio: f64,
    /// Guidance stopped early on a non-finite gradient.
    pub skipped: bool,
}

/// Runs `ggs_iters` guidance iterations starting at `raw_mean`.
///
/// The gradient is evaluated at the current (updated) mean. `x_t` is
/// accepted for interface symmetry with the sampler hook; the mean alone is
/// adjusted.
pub fn guided_mean(
    raw_mean: &[f64],
    _x_t: &[f64],
    matches: &[CorrespondenceSet],
    config: &GuidanceConfig,
    pivot: usize,
) -> GuidedMean {
    let mut mean = raw_mean.to_vec();
    let mut out = GuidedMean {
        mean: Vec::new(),
        iterations: 0,
        max_cap_ratio: 0.0,
        skipped: false,
    };
    if matches.is_empty() || config.is_noop() {
        out.mean = mean;
        return out;
    }
    for _ in 0..config.ggs_iters {
        let g = log_density_gradient(&mean, matches, config.epsilon, pivot);
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !g_norm.is_finite() {
            log::warn!("non-finite guidance gradient; guidance skipped for this step");
            out.skipped = true;
            break;
        }
        if g_norm == 0.0 {
            break;
        }
        let cap = config.alpha * mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let capped = cap / g_norm;
        let s = match config.strength {
            Some(s) => s.min(capped),
            None => capped,
        };
        if s == 0.0 {
            break;
        }
        for (m, gv) in mean.iter_mut().zip(&g) {
            *m += s * gv;
        }
        if cap > 0.0 {
            out.max_cap_ratio = out.max_cap_ratio.max(s * g_norm / cap);
        }
        out.iterations += 1;
    }
    out.mean = mean;
    out
}

/// One row of the per-step Sampson trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    /// Total Sampson error of the denoiser's mean.
    pub sampson_raw: f64,
    /// Total Sampson error of the mean actually used (after guidance).
    pub sampson_used: f64,
    /// At least one guidance update was applied at this step.
    pub guided: bool,
}

struct GuidanceHook<'a> {
    matches: &'a [CorrespondenceSet],
    config: Option<&'a GuidanceConfig>,
    trace_epsilon: f64,
    pivot: usize,
    trace: Vec<TraceRow>,
}

impl MeanHook for GuidanceHook<'_> {
    fn adjust(&mut self, t: usize, x_t: &[f64], mean: &mut [f64]) {
        let raw = total_sampson(mean, self.matches, self.trace_epsilon);
        let mut row = TraceRow {
            t,
            sampson_raw: raw,
            sampson_used: raw,
            guided: false,
        };
        if let Some(cfg) = self.config {
            if t <= cfg.guided_last_steps {
                let g = guided_mean(mean, x_t, self.matches, cfg, self.pivot);
                mean.copy_from_slice(&g.mean);
                row.guided = g.iterations > 0;
                row.sampson_used = total_sampson(mean, self.matches, self.trace_epsilon);
            }
        }
        self.trace.push(row);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub poses: PoseTuple,
    pub trace: Vec<TraceRow>,
}

/// DDPM sampling of one scene; for `t <= guided_last_steps` each mean is
/// replaced by its guided refinement. `guidance = None` gives plain sampling
/// (the trace is still recorded, with the default clamp).
pub fn guided_ddpm_sample<N: NoiseSource + ?Sized>(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    conditioning: &[Vec<f64>],
    matches: &[CorrespondenceSet],
    guidance: Option<&GuidanceConfig>,
    noise: &mut N,
) -> Result<SampleRun, GuidanceError> {
    let n = conditioning.len();
    check_pairs(n, matches)?;
    if let Some(cfg) = guidance {
        cfg.validate()?;
    }
    let total = schedule.steps();
    let mut failure: Option<DenoiserError> = None;
    let denoise = |x: &[f64], t: usize| match params.denoise(x, t, total, conditioning, INFERENCE_PIVOT) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            vec![f64::NAN; x.len()]
        }
    };
    let mut hook = GuidanceHook {
        matches,
        config: guidance,
        trace_epsilon: guidance.map_or(DEFAULT_SAMPSON_EPSILON, |g| g.epsilon),
        pivot: INFERENCE_PIVOT,
        trace: Vec::with_capacity(total),
    };
    let flat = ddpm_sample_flat(denoise, schedule, n * CAMERA_DIM, noise, &mut hook);
    if let Some(e) = failure {
        return Err(e.into());
    }
    let poses = PoseTuple::from_flat_normalized(&flat?)?;
    Ok(SampleRun {
        poses,
        trace: hook.trace,
    })
}

/// Direct-regression prediction: one forward pass from zero poses at `t = T`.
/// With guidance, the single predicted mean gets one guided refinement
/// (`ggs_iters` iterations), the same treatment each sampled mean gets.
pub fn regression_predict(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    conditioning: &[Vec<f64>],
    matches: &[CorrespondenceSet],
    guidance: Option<&GuidanceConfig>,
) -> Result<PoseTuple, GuidanceError> {
    let n = conditioning.len();
    check_pairs(n, matches)?;
    let zeros = vec![0.0; n * CAMERA_DIM];
    let mut mean = params.denoise(&zeros, schedule.steps(), schedule.steps(), conditioning, INFERENCE_PIVOT)?;
    if let Some(cfg) = guidance {
        cfg.validate()?;
        if cfg.guided_last_steps > 0 {
            mean = guided_mean(&mean, &zeros, matches, cfg, INFERENCE_PIVOT).mean;
        }
    }
    Ok(PoseTuple::from_flat_normalized(&mean)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::pivot_normalize;
    use crate::scenegen::{generate_scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scene(seed: u64) -> crate::scenegen::SceneRecord {
        generate_scene(&SceneSpec {
            n_frames: 3,
            seed,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn normalized_gt(s: &crate::scenegen::SceneRecord) -> Vec<f64> {
        pivot_normalize(&s.ground_truth, 0).unwrap().0.to_flat()
    }

    #[test]
    fn density_is_zero_at_consistent_poses() {
        let s = scene(1);
        let v = log_guidance_density(&s.ground_truth, &s.matches, 10.0).unwrap();
        assert!(v.abs() < 1e-8);
    }

    #[test]
    fn density_counts_clamped_terms() {
        let s = scene(2);
        let mut flat = normalized_gt(&s);
        flat[CAMERA_DIM + 5] += 2.0;
        let poses = PoseTuple::from_flat(&flat).unwrap();
        let tiny = 1e-9;
        let clamped = log_guidance_density(&poses, &s.matches, tiny).unwrap();
        let n_affected: usize = s.matches.iter().filter(|m| m.i == 1 || m.j == 1).map(|m| m.len()).sum();
        // every correspondence touching frame 1 is clamped at ε; the rest are exact
        assert!((clamped + n_affected as f64 * tiny).abs() < 1e-12);
    }

    #[test]
    fn bad_pair_index_is_error() {
        let s = scene(3);
        let poses = s.ground_truth.select(&[0, 1]);
        assert!(matches!(
            log_guidance_density(&poses, &s.matches, 10.0),
            Err(GuidanceError::PairIndex { .. })
        ));
    }

    #[test]
    fn zero_gradient_leaves_mean_exact() {
        let s = scene(4);
        let gt = normalized_gt(&s);
        let g = guided_mean(&gt, &gt, &s.matches, &GuidanceConfig::default(), 0);
        // the gradient is round-off here, so each step is bounded by the cap
        let cfg = GuidanceConfig::default();
        let norm = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
        let moved = g.mean.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(moved <= cfg.ggs_iters as f64 * cfg.alpha * norm * (1.0 + 1e-9));
        let g = guided_mean(&gt, &gt, &[], &GuidanceConfig::default(), 0);
        assert_eq!(g.mean, gt);
        let off = GuidanceConfig {
            alpha: 0.0,
            ..GuidanceConfig::default()
        };
        let mut perturbed = gt.clone();
        perturbed[CAMERA_DIM + 2] += 0.1;
        assert_eq!(guided_mean(&perturbed, &gt, &s.matches, &off, 0).mean, perturbed);
    }

    #[test]
    fn updates_respect_cap_and_reduce_error() {
        let mut reductions = Vec::new();
        for seed in 0..10 {
            let s = scene(100 + seed);
            let gt = normalized_gt(&s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let start: Vec<f64> = gt
                .iter()
                .enumerate()
                .map(|(k, v)| if k >= CAMERA_DIM { v + noise.sample(&mut rng) } else { *v })
                .collect();
            let cfg = GuidanceConfig::default();
            let g = guided_mean(&start, &start, &s.matches, &cfg, 0);
            assert!(g.max_cap_ratio <= 1.0 + 1e-12);
            let before = total_sampson(&start, &s.matches, cfg.epsilon);
            let after = total_sampson(&g.mean, &s.matches, cfg.epsilon);
            reductions.push(after / before);
        }
        let mean: f64 = reductions.iter().sum::<f64>() / reductions.len() as f64;
        assert!(mean < 1.0, "{reductions:?}");
    }

    #[test]
    fn pivot_extrinsics_frozen() {
        let s = scene(7);
        let mut flat = normalized_gt(&s);
        flat[CAMERA_DIM + 6] += 0.2;
        let g = guided_mean(&flat, &flat, &s.matches, &GuidanceConfig::default(), 0);
        assert_eq!(&g.mean[1..CAMERA_DIM], &flat[1..CAMERA_DIM]);
        assert_ne!(&g.mean[CAMERA_DIM..], &flat[CAMERA_DIM..]);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { epsilon: f64::INFINITY, ..Default::default() }.validate().is_ok());
        assert!(GuidanceConfig { alpha: 0.0, ..Default::default() }.is_noop());
    }
}

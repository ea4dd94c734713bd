//! Variance schedule, closed-form forward noising and the DDPM reverse
//! sampler over flat pose-tuple blocks.
//!
//! The reverse step follows the "predict the clean tuple, then re-noise"
//! form: `x_{t-1} ~ N(√ᾱ_{t-1} D(x_t, t), (1 - ᾱ_{t-1}) I)` with `ᾱ_0 = 1`,
//! so the final step returns the predicted mean without noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, CAMERA_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("denoiser produced a non-finite value at step {t}")]
    NonFinite { t: usize },
    #[error("denoiser returned {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("flat block of length {0} is not a whole number of cameras")]
    BadBlockLength(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Parameters of a linear β schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, DiffusionError> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// β_t, α_t = 1 - β_t and ᾱ_t = Π_{i≤t} α_i for t = 1..=T (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly interpolated β from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps < 2 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "require 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check(t).map(|k| self.beta[k])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check(t).map(|k| self.alpha[k])
    }

    /// ᾱ_t for `t` in `0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t).map(|k| self.alpha_bar[k])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Whether the terminal marginal is close enough to `N(0, I)` (ᾱ_T ≤ 1e-3).
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bar.last().is_some_and(|a| *a <= 1e-3)
    }
}

/// Source of standard-normal draws. Lets tests switch noise off entirely.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;

    fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }
}

/// Gaussian noise drawn from any `rand` generator.
pub struct GaussianNoise<R>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    fn standard_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }
}

/// Deterministic mode: every draw is zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

/// One forward transition `x_t ~ N(√(1-β_t) x_{t-1}, β_t I)`.
pub fn diffuse_step<N: NoiseSource + ?Sized>(
    x_prev: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &mut N,
) -> Result<Vec<f64>, DiffusionError> {
    let beta = schedule.beta(t)?;
    let keep = (1.0 - beta).sqrt();
    let spread = beta.sqrt();
    Ok(x_prev
        .iter()
        .map(|x| keep * x + spread * noise.standard_normal())
        .collect())
}

/// Closed-form marginal draw `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) z`.
pub fn noise_sample<N: NoiseSource + ?Sized>(
    x0: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &mut N,
) -> Result<Vec<f64>, DiffusionError> {
    let ab = schedule.alpha_bar(schedule.check(t).map(|_| t)?)?;
    let keep = ab.sqrt();
    let spread = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .map(|x| keep * x + spread * noise.standard_normal())
        .collect())
}

/// Ordered cameras of one scene.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseTuple {
    pub cameras: Vec<Camera>,
}

impl PoseTuple {
    pub fn new(cameras: Vec<Camera>) -> Self {
        Self { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Row-major N×8 parameter block.
    pub fn to_flat(&self) -> Vec<f64> {
        self.cameras.iter().flat_map(|c| c.to_params()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, DiffusionError> {
        if flat.len() % CAMERA_DIM != 0 {
            return Err(DiffusionError::BadBlockLength(flat.len()));
        }
        Ok(Self::new(
            flat.chunks_exact(CAMERA_DIM).map(Camera::from_params).collect(),
        ))
    }

    /// Decode and project every quaternion onto the unit sphere (`w >= 0`).
    pub fn from_flat_normalized(flat: &[f64]) -> Result<Self, DiffusionError> {
        let raw = Self::from_flat(flat)?;
        let cameras = raw
            .cameras
            .iter()
            .map(|c| c.normalized())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(cameras))
    }

    pub fn select(&self, frames: &[usize]) -> Self {
        Self::new(frames.iter().map(|&k| self.cameras[k]).collect())
    }
}

/// Intercepts each reverse step's predicted mean before it is re-noised.
pub trait MeanHook {
    fn adjust(&mut self, t: usize, x_t: &[f64], mean: &mut [f64]);
}

/// Leaves every mean untouched.
pub struct NoHook;

impl MeanHook for NoHook {
    fn adjust(&mut self, _t: usize, _x_t: &[f64], _mean: &mut [f64]) {}
}

/// Reverse-diffusion loop on a flat block of `dim` values.
///
/// `denoise(x_t, t)` predicts the clean block; conditioning is captured by
/// the closure.
pub fn ddpm_sample_flat<D, N, H>(
    mut denoise: D,
    schedule: &DiffusionSchedule,
    dim: usize,
    noise: &mut N,
    hook: &mut H,
) -> Result<Vec<f64>, DiffusionError>
where
    D: FnMut(&[f64], usize) -> Vec<f64>,
    N: NoiseSource + ?Sized,
    H: MeanHook + ?Sized,
{
    let mut x = vec![0.0; dim];
    noise.fill(&mut x);
    for t in (1..=schedule.steps()).rev() {
        let mut mean = denoise(&x, t);
        if mean.len() != dim {
            return Err(DiffusionError::ShapeMismatch {
                expected: dim,
                got: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { t });
        }
        hook.adjust(t, &x, &mut mean);
        let ab_prev = schedule.alpha_bar(t - 1)?;
        if t == 1 {
            x = mean;
        } else {
            let keep = ab_prev.sqrt();
            let spread = (1.0 - ab_prev).sqrt();
            for (xv, m) in x.iter_mut().zip(mean.iter()) {
                *xv = keep * m + spread * noise.standard_normal();
            }
        }
    }
    Ok(x)
}

/// Plain DDPM sampling of an `n_frames` pose tuple, decoded into valid cameras.
pub fn ddpm_sample<D, N>(
    denoise: D,
    schedule: &DiffusionSchedule,
    n_frames: usize,
    noise: &mut N,
) -> Result<PoseTuple, DiffusionError>
where
    D: FnMut(&[f64], usize) -> Vec<f64>,
    N: NoiseSource + ?Sized,
{
    let flat = ddpm_sample_flat(denoise, schedule, n_frames * CAMERA_DIM, noise, &mut NoHook)?;
    PoseTuple::from_flat_normalized(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_schedule_products() {
        let s = DiffusionSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_reaches_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 100);
        // Reference product computed independently: ᾱ_100 ≈ 2.13997e-5.
        assert!((s.alpha_bar(100).unwrap() - 2.139966547611152e-05).abs() < 1e-12);
        assert!(s.reaches_noise());
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(DiffusionSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn deterministic_noise_sample_is_mean() {
        let s = DiffusionSchedule::linear(2, 0.5, 0.5).unwrap();
        let x = noise_sample(&[1.0], 2, &s, &mut ZeroNoise).unwrap();
        assert_eq!(x, vec![0.5]);
        assert!(matches!(
            noise_sample(&[1.0], 3, &s, &mut ZeroNoise),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
        assert!(noise_sample(&[1.0], 0, &s, &mut ZeroNoise).is_err());
    }

    #[test]
    fn constant_denoiser_without_noise_returns_constant() {
        let s = ScheduleConfig::default().build().unwrap();
        let c: Vec<f64> = (0..16).map(|k| 0.1 * k as f64 + 0.05).collect();
        let out = ddpm_sample_flat(|_, _| c.clone(), &s, 16, &mut ZeroNoise, &mut NoHook).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = DiffusionSchedule::linear(20, 1e-3, 0.3).unwrap();
        let run = |seed| {
            let mut n = GaussianNoise(ChaCha8Rng::seed_from_u64(seed));
            ddpm_sample_flat(|x, t| x.iter().map(|v| 0.5 * v + t as f64 * 1e-3).collect(), &s, 16, &mut n, &mut NoHook)
                .unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn non_finite_denoiser_aborts_with_step() {
        let s = DiffusionSchedule::linear(5, 0.1, 0.2).unwrap();
        let err = ddpm_sample_flat(
            |_, t| if t == 3 { vec![f64::NAN; 8] } else { vec![0.0; 8] },
            &s,
            8,
            &mut ZeroNoise,
            &mut NoHook,
        )
        .unwrap_err();
        assert_eq!(err, DiffusionError::NonFinite { t: 3 });
    }

    #[test]
    fn sampled_tuple_is_valid() {
        let s = DiffusionSchedule::linear(10, 0.01, 0.5).unwrap();
        let mut n = GaussianNoise(ChaCha8Rng::seed_from_u64(1));
        let poses = ddpm_sample(|x, _| x.to_vec(), &s, 3, &mut n).unwrap();
        assert_eq!(poses.len(), 3);
        for c in &poses.cameras {
            assert!((c.extrinsics.rotation.norm() - 1.0).abs() < 1e-9);
            assert!(c.extrinsics.rotation.w >= 0.0);
            assert!(c.intrinsics.focal() > 0.0);
        }
    }

    #[test]
    fn flat_block_length_checked() {
        assert!(PoseTuple::from_flat(&[0.0; 7]).is_err());
    }
}

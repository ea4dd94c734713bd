//! Conditional denoiser: a set transformer over per-frame tokens that
//! predicts the clean pose tuple from a noisy one.
//!
//! Each frame contributes one token `cat(x_t^i, time(t), ψ(I^i), pivot^i)`.
//! Tokens pass through an input projection, pre-norm self-attention blocks
//! and an 8-wide output head. There is no positional encoding over frames,
//! so the network is equivariant to frame permutations.

mod checkpoint;
pub(crate) mod nn;
mod train;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{noise_sample, DiffusionError, DiffusionSchedule, NoiseSource, PoseTuple};
use crate::geometry::{Camera, Extrinsics, CAMERA_DIM};
use nn::{gelu, gelu_backward, Allocator, AttentionCache, LayerNorm, LayerNormCache, Linear, SelfAttention};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT_VERSION};
pub use train::{evaluation_loss, train, TrainConfig, TrainOutcome};

/// Version of the token concatenation order `[pose | time | scene | pivot]`.
pub const TOKEN_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid denoiser config: {0}")]
    Config(String),
    #[error("pivot {pivot} out of range for {frames} frames")]
    BadPivot { pivot: usize, frames: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 4,
            heads: 4,
            ff_width: 512,
            time_dim: 32,
            embed_dim: crate::conditioning::DEFAULT_EMBED_DIM,
        }
    }
}

impl DenoiserConfig {
    pub fn token_dim(&self) -> usize {
        CAMERA_DIM + self.time_dim + self.embed_dim + 1
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.ff_width == 0 {
            return bad("width, heads and ff_width must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.time_dim % 2 != 0 {
            return bad("time_dim must be even");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: DMatrix<f64>,
    z: DMatrix<f64>,
    u: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Architecture {
    input: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    /// Per-step gate on a skip path from the noisy pose to the output.
    skip_gate: Linear,
    param_count: usize,
}

impl Architecture {
    fn new(cfg: &DenoiserConfig) -> (Self, Allocator) {
        let mut a = Allocator::default();
        let input = Linear::new(&mut a, "input", cfg.token_dim(), cfg.width);
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut a, &format!("block{l}.ln1"), cfg.width),
                attn: SelfAttention::new(&mut a, &format!("block{l}.attn"), cfg.width, cfg.heads),
                ln2: LayerNorm::new(&mut a, &format!("block{l}.ln2"), cfg.width),
                ff1: Linear::new(&mut a, &format!("block{l}.ff1"), cfg.width, cfg.ff_width),
                ff2: Linear::new(&mut a, &format!("block{l}.ff2"), cfg.ff_width, cfg.width),
            })
            .collect();
        let final_ln = LayerNorm::new(&mut a, "final_ln", cfg.width);
        let head = Linear::new(&mut a, "head", cfg.width, CAMERA_DIM);
        let skip_gate = Linear::new(&mut a, "skip_gate", cfg.time_dim, CAMERA_DIM);
        let param_count = a.next;
        (
            Self {
                input,
                blocks,
                final_ln,
                head,
                skip_gate,
                param_count,
            },
            a,
        )
    }
}

struct ForwardCache {
    tokens: DMatrix<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_h: DMatrix<f64>,
}

/// Weights of the denoiser, stored in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    arch: Architecture,
    values: Vec<f64>,
}

/// One frame's input to the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameToken {
    pub noisy_pose: [f64; CAMERA_DIM],
    pub time_embed: Vec<f64>,
    pub scene_embed: Vec<f64>,
    pub pivot_flag: bool,
}

/// Sinusoidal encoding of `t / T`.
pub fn time_embedding(t: usize, total_steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = 1000.0 * t as f64 / total_steps.max(1) as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((s * w).sin());
        out.push((s * w).cos());
    }
    out
}

impl DenoiserParams {
    /// Random initialization: scaled Gaussian weights, unit norm gains, zero biases.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (arch, alloc) = Architecture::new(&config);
        let mut values = vec![0.0; arch.param_count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, spec) in &alloc.specs {
            let slot = spec.slice_mut(&mut values);
            if name.ends_with(".gamma") {
                slot.fill(1.0);
            } else if name.ends_with(".weight") && !name.starts_with("skip_gate") {
                let mut std = 1.0 / (spec.rows as f64).sqrt();
                if name.starts_with("head") {
                    std *= 0.1;
                }
                for v in slot.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
            }
        }
        Ok(Self {
            config,
            arch,
            values,
        })
    }

    pub fn from_values(config: DenoiserConfig, values: Vec<f64>) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (arch, _) = Architecture::new(&config);
        if values.len() != arch.param_count {
            return Err(DenoiserError::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count,
                values.len()
            )));
        }
        Ok(Self {
            config,
            arch,
            values,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn token_matrix(&self, tokens: &[FrameToken]) -> Result<DMatrix<f64>, DenoiserError> {
        if tokens.is_empty() {
            return Err(DenoiserError::Shape("need at least one frame token".into()));
        }
        let cfg = &self.config;
        let mut m = DMatrix::zeros(tokens.len(), cfg.token_dim());
        for (r, tok) in tokens.iter().enumerate() {
            if tok.time_embed.len() != cfg.time_dim || tok.scene_embed.len() != cfg.embed_dim {
                return Err(DenoiserError::Shape(format!(
                    "token {r}: time/scene widths {}/{} but model expects {}/{}",
                    tok.time_embed.len(),
                    tok.scene_embed.len(),
                    cfg.time_dim,
                    cfg.embed_dim
                )));
            }
            let row = tok
                .noisy_pose
                .iter()
                .chain(&tok.time_embed)
                .chain(&tok.scene_embed)
                .copied()
                .chain(std::iter::once(if tok.pivot_flag { 1.0 } else { 0.0 }));
            for (c, v) in row.enumerate() {
                m[(r, c)] = v;
            }
        }
        Ok(m)
    }

    fn forward_cached(&self, tokens: DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let p = &self.values;
        let mut x = self.arch.input.forward(p, &tokens);
        let mut caches = Vec::with_capacity(self.arch.blocks.len());
        for b in &self.arch.blocks {
            let (h1, ln1) = b.ln1.forward(p, &x);
            let (a, attn) = b.attn.forward(p, &h1);
            x += a;
            let (h2, ln2) = b.ln2.forward(p, &x);
            let z = b.ff1.forward(p, &h2);
            let u = gelu(&z);
            x += b.ff2.forward(p, &u);
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                z,
                u,
            });
        }
        let (final_h, final_ln) = self.arch.final_ln.forward(p, &x);
        let mut out = self.arch.head.forward(p, &final_h);
        let gate = self.arch.skip_gate.forward(p, &self.time_columns(&tokens));
        out += gate.component_mul(&tokens.columns(0, CAMERA_DIM));
        (
            out,
            ForwardCache {
                tokens,
                blocks: caches,
                final_ln,
                final_h,
            },
        )
    }

    fn time_columns(&self, tokens: &DMatrix<f64>) -> DMatrix<f64> {
        tokens.columns(CAMERA_DIM, self.config.time_dim).into_owned()
    }

    fn backward(&self, cache: &ForwardCache, dout: &DMatrix<f64>, grad: &mut [f64]) {
        let p = &self.values;
        let dgate = dout.component_mul(&cache.tokens.columns(0, CAMERA_DIM));
        self.arch
            .skip_gate
            .backward(p, grad, &self.time_columns(&cache.tokens), &dgate);
        let dh = self.arch.head.backward(p, grad, &cache.final_h, dout);
        let mut dx = self.arch.final_ln.backward(p, grad, &cache.final_ln, &dh);
        for (b, c) in self.arch.blocks.iter().zip(&cache.blocks).rev() {
            let du = b.ff2.backward(p, grad, &c.u, &dx);
            let dz = gelu_backward(&c.z, &du);
            let dh2 = b.ff1.backward(p, grad, &c.h2, &dz);
            dx += b.ln2.backward(p, grad, &c.ln2, &dh2);
            let dh1 = b.attn.backward(p, grad, &c.attn, &dx);
            dx += b.ln1.backward(p, grad, &c.ln1, &dh1);
        }
        self.arch.input.backward(p, grad, &cache.tokens, &dx);
    }

    /// `μ_{t-1}`: one predicted 8-vector per input frame.
    pub fn forward(&self, tokens: &[FrameToken]) -> Result<Vec<[f64; CAMERA_DIM]>, DenoiserError> {
        let m = self.token_matrix(tokens)?;
        let (out, _) = self.forward_cached(m);
        Ok(rows(&out))
    }

    /// Builds tokens for a flat noisy block and returns the flat prediction.
    pub fn denoise(
        &self,
        x_t: &[f64],
        t: usize,
        total_steps: usize,
        conditioning: &[Vec<f64>],
        pivot: usize,
    ) -> Result<Vec<f64>, DenoiserError> {
        let tokens = build_tokens(x_t, t, total_steps, conditioning, pivot, self.config.time_dim)?;
        Ok(self.forward(&tokens)?.into_iter().flatten().collect())
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<[f64; CAMERA_DIM]> {
    (0..m.nrows())
        .map(|r| std::array::from_fn(|c| m[(r, c)]))
        .collect()
}

pub fn build_tokens(
    x_t: &[f64],
    t: usize,
    total_steps: usize,
    conditioning: &[Vec<f64>],
    pivot: usize,
    time_dim: usize,
) -> Result<Vec<FrameToken>, DenoiserError> {
    let n = conditioning.len();
    if x_t.len() != n * CAMERA_DIM {
        return Err(DenoiserError::Shape(format!(
            "pose block has {} values for {n} frames",
            x_t.len()
        )));
    }
    if pivot >= n {
        return Err(DenoiserError::BadPivot { pivot, frames: n });
    }
    let time = time_embedding(t, total_steps, time_dim);
    Ok(conditioning
        .iter()
        .enumerate()
        .map(|(i, emb)| FrameToken {
            noisy_pose: std::array::from_fn(|c| x_t[i * CAMERA_DIM + c]),
            time_embed: time.clone(),
            scene_embed: emb.clone(),
            pivot_flag: i == pivot,
        })
        .collect())
}

/// What the network is trained to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Denoise `x_t ~ q(x_t | x_0)` at a random step.
    #[default]
    Diffusion,
    /// Single forward pass from zero poses at `t = T`.
    Regression,
}

/// A canonicalized scene ready for the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// Pivot-normalized ground truth, flat N×8, quaternions with `w >= 0`.
    pub x0: Vec<f64>,
    pub conditioning: Vec<Vec<f64>>,
    pub pivot: usize,
}

impl TrainingExample {
    pub fn new(poses: &PoseTuple, conditioning: Vec<Vec<f64>>, pivot: usize) -> Result<Self, DenoiserError> {
        if poses.len() != conditioning.len() {
            return Err(DenoiserError::Shape(format!(
                "{} cameras but {} conditioning rows",
                poses.len(),
                conditioning.len()
            )));
        }
        let (norm, _) = pivot_normalize(poses, pivot)?;
        Ok(Self {
            x0: norm.to_flat(),
            conditioning,
            pivot,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `mean ‖D(x_t, t, I) - x_0‖²` over frames and the 8 parameters, with its
/// gradient with respect to every weight.
pub fn diffusion_loss<N: NoiseSource + ?Sized>(
    params: &DenoiserParams,
    example: &TrainingExample,
    t: usize,
    schedule: &DiffusionSchedule,
    objective: Objective,
    noise: &mut N,
) -> Result<LossAndGrad, DenoiserError> {
    let (x_t, t) = match objective {
        Objective::Diffusion => (noise_sample(&example.x0, t, schedule, noise)?, t),
        Objective::Regression => (vec![0.0; example.x0.len()], schedule.steps()),
    };
    loss_at(params, example, &x_t, t, schedule.steps())
}

pub(crate) fn loss_at(
    params: &DenoiserParams,
    example: &TrainingExample,
    x_t: &[f64],
    t: usize,
    total_steps: usize,
) -> Result<LossAndGrad, DenoiserError> {
    let tokens = build_tokens(x_t, t, total_steps, &example.conditioning, example.pivot, params.config.time_dim)?;
    let m = params.token_matrix(&tokens)?;
    let (out, cache) = params.forward_cached(m);
    let n = out.nrows();
    let count = (n * CAMERA_DIM) as f64;
    let mut dout = DMatrix::zeros(n, CAMERA_DIM);
    let mut loss = 0.0;
    for r in 0..n {
        for c in 0..CAMERA_DIM {
            let diff = out[(r, c)] - example.x0[r * CAMERA_DIM + c];
            loss += diff * diff;
            dout[(r, c)] = 2.0 * diff / count;
        }
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(DenoiserError::NonFinite {
            step: t,
            detail: "loss evaluated to a non-finite value".into(),
        });
    }
    let mut grad = vec![0.0; params.param_count()];
    params.backward(&cache, &dout, &mut grad);
    Ok(LossAndGrad { loss, grad })
}

/// Diagnostics from [`pivot_normalize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PivotNormalization {
    /// Median translation norm that was divided out (1 when degenerate).
    pub scale: f64,
    /// All pivot-relative translations were zero.
    pub degenerate: bool,
}

/// Expresses every extrinsic relative to `pivot` (`g_i ∘ g_pivot^{-1}`) and
/// divides translations by the median nonzero translation norm. Intrinsics
/// are unchanged; quaternions come out unit-norm with `w >= 0`.
pub fn pivot_normalize(poses: &PoseTuple, pivot: usize) -> Result<(PoseTuple, PivotNormalization), DenoiserError> {
    if pivot >= poses.len() {
        return Err(DenoiserError::BadPivot {
            pivot,
            frames: poses.len(),
        });
    }
    let inv = poses.cameras[pivot].extrinsics.inverse();
    let mut rel: Vec<Extrinsics> = poses
        .cameras
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if k == pivot {
                Extrinsics::identity()
            } else {
                c.extrinsics.compose(&inv)
            }
        })
        .collect();
    let mut norms: Vec<f64> = rel
        .iter()
        .map(|g| g.translation.norm())
        .filter(|n| *n > 0.0)
        .collect();
    let info = if norms.is_empty() {
        PivotNormalization {
            scale: 1.0,
            degenerate: true,
        }
    } else {
        norms.sort_by(|a, b| a.total_cmp(b));
        let m = norms.len();
        let median = if m % 2 == 1 {
            norms[m / 2]
        } else {
            0.5 * (norms[m / 2 - 1] + norms[m / 2])
        };
        PivotNormalization {
            scale: median,
            degenerate: false,
        }
    };
    for g in rel.iter_mut() {
        g.translation /= info.scale;
        g.rotation = g.rotation.normalized().unwrap_or_default().canonical();
    }
    let cameras = poses
        .cameras
        .iter()
        .zip(rel)
        .map(|(c, g)| Camera::new(c.intrinsics, g))
        .collect();
    Ok((PoseTuple::new(cameras), info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ZeroNoise;
    use crate::geometry::{Intrinsics, Quaternion};
    use nalgebra::Vector3;

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ff_width: 16,
            time_dim: 4,
            embed_dim: 4,
        }
    }

    fn tokens(n: usize, cfg: &DenoiserConfig, seed: u64) -> Vec<FrameToken> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        (0..n)
            .map(|i| FrameToken {
                noisy_pose: std::array::from_fn(|_| g()),
                time_embed: time_embedding(7, 100, cfg.time_dim),
                scene_embed: (0..cfg.embed_dim).map(|_| g()).collect(),
                pivot_flag: i == 0,
            })
            .collect()
    }

    #[test]
    fn tiny_network_is_under_a_thousand_parameters() {
        let p = DenoiserParams::init(tiny_config(), 0).unwrap();
        assert!(p.param_count() <= 1000, "{}", p.param_count());
        let default = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        assert!(default.param_count() > 500_000);
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = DenoiserConfig {
            width: 16,
            layers: 2,
            heads: 4,
            ff_width: 32,
            time_dim: 8,
            embed_dim: 6,
        };
        let p = DenoiserParams::init(cfg, 3).unwrap();
        let toks = tokens(5, &cfg, 9);
        let out = p.forward(&toks).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<FrameToken> = perm.iter().map(|&k| toks[k].clone()).collect();
        let out_p = p.forward(&permuted).unwrap();
        for (r, &k) in perm.iter().enumerate() {
            for c in 0..CAMERA_DIM {
                assert!((out_p[r][c] - out[k][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_and_default_init_are_finite() {
        let cfg = DenoiserConfig::default();
        let p = DenoiserParams::init(cfg, 1).unwrap();
        let out = p.forward(&tokens(1, &cfg, 2)).unwrap();
        assert!(out[0].iter().all(|v| v.is_finite()));
        let out = p.forward(&tokens(6, &cfg, 3)).unwrap();
        let norm: f64 = out.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm <= 1e3, "{norm}");
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny_config();
        let p = DenoiserParams::init(cfg, 1).unwrap();
        assert!(p.forward(&[]).is_err());
        let mut t = tokens(2, &cfg, 1);
        t[1].scene_embed.push(0.0);
        assert!(matches!(p.forward(&t), Err(DenoiserError::Shape(_))));
        assert!(DenoiserParams::from_values(cfg, vec![0.0; 3]).is_err());
        let bad = DenoiserConfig { heads: 3, ..cfg };
        assert!(DenoiserParams::init(bad, 0).is_err());
    }

    fn two_frame_example(cfg: &DenoiserConfig) -> TrainingExample {
        let poses = PoseTuple::new(vec![
            Camera::new(Intrinsics::from_focal(1.5), Extrinsics::identity()),
            Camera::new(
                Intrinsics::from_focal(1.3),
                Extrinsics::new(
                    Quaternion::from_axis_angle(&Vector3::y(), 0.4),
                    Vector3::new(-1.0, 0.1, 0.3),
                ),
            ),
        ]);
        let cond = vec![vec![0.3; cfg.embed_dim], vec![-0.2; cfg.embed_dim]];
        TrainingExample::new(&poses, cond, 0).unwrap()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut p = DenoiserParams::init(cfg, 4).unwrap();
        let ex = two_frame_example(&cfg);
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap();
        let x_t: Vec<f64> = ex.x0.iter().enumerate().map(|(k, v)| 0.8 * v + 0.05 * k as f64).collect();
        let lg = loss_at(&p, &ex, &x_t, 5, sched.steps()).unwrap();
        let h = 1e-5;
        for k in 0..p.param_count() {
            let orig = p.values[k];
            p.values[k] = orig + h;
            let fp = loss_at(&p, &ex, &x_t, 5, sched.steps()).unwrap().loss;
            p.values[k] = orig - h;
            let fm = loss_at(&p, &ex, &x_t, 5, sched.steps()).unwrap().loss;
            p.values[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = lg.grad[k];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-8,
                "param {k}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        // A network whose head emits zeros, evaluated against zero targets.
        let cfg = tiny_config();
        let mut p = DenoiserParams::init(cfg, 2).unwrap();
        p.values.fill(0.0);
        let ex = TrainingExample {
            x0: vec![0.0; 16],
            conditioning: vec![vec![0.0; cfg.embed_dim]; 2],
            pivot: 0,
        };
        let sched = DiffusionSchedule::linear(10, 1e-3, 0.3).unwrap();
        let lg = diffusion_loss(&p, &ex, 3, &sched, Objective::Diffusion, &mut ZeroNoise).unwrap();
        assert_eq!(lg.loss, 0.0);
    }

    fn random_scene(seed: u64, n: usize) -> PoseTuple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        PoseTuple::new(
            (0..n)
                .map(|_| {
                    Camera::new(
                        Intrinsics::from_log_focal(0.3 * g()),
                        Extrinsics::new(
                            Quaternion::new(g(), g(), g(), g()).normalized().unwrap(),
                            Vector3::new(g(), g(), g()),
                        ),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn pivot_becomes_identity() {
        let poses = random_scene(1, 4);
        let (n, info) = pivot_normalize(&poses, 2).unwrap();
        assert!(!info.degenerate);
        let piv = n.cameras[2].extrinsics;
        assert_eq!(piv.rotation, Quaternion::identity());
        assert_eq!(piv.translation, Vector3::zeros());
        for (a, b) in n.cameras.iter().zip(&poses.cameras) {
            assert_eq!(a.intrinsics, b.intrinsics);
        }
        assert!(pivot_normalize(&poses, 4).is_err());
    }

    #[test]
    fn pure_translation_pair_scales_to_unit() {
        let poses = PoseTuple::new(vec![
            Camera::default(),
            Camera::new(Intrinsics::default(), Extrinsics::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 2.0))),
        ]);
        let (n, info) = pivot_normalize(&poses, 0).unwrap();
        assert_eq!(info.scale, 2.0);
        assert_eq!(n.cameras[1].extrinsics.translation, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn all_zero_translations_flagged() {
        let poses = PoseTuple::new(vec![Camera::default(), Camera::default()]);
        let (_, info) = pivot_normalize(&poses, 1).unwrap();
        assert!(info.degenerate);
        assert_eq!(info.scale, 1.0);
    }

    #[test]
    fn pivot_normalize_idempotent() {
        for seed in 0..10 {
            let poses = random_scene(seed, 5);
            let (once, _) = pivot_normalize(&poses, 1).unwrap();
            let (twice, info) = pivot_normalize(&once, 1).unwrap();
            assert!((info.scale - 1.0).abs() < 1e-12);
            let a = once.to_flat();
            let b = twice.to_flat();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_embedding_width_and_range() {
        let e = time_embedding(50, 100, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e, time_embedding(51, 100, 32));
    }
}

//! Per-frame scene conditioning `ψ(I^i)`.
//!
//! The denoiser only sees a fixed-width vector per frame. [`SceneEmbedder`]
//! is the plug point; [`KeypointStatsEmbedder`] derives that vector from the
//! frame's projected keypoints (visible fraction, mean, covariance, third
//! moments and a few anchor points) passed through a fixed random linear map.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default conditioning width.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// Number of identifiable anchor points whose projections enter the features.
pub const ANCHOR_POINTS: usize = 4;

const FEATURE_DIM: usize = 1 + 2 + 3 + 4 + 3 * ANCHOR_POINTS;
const PROJECTION_SEED: u64 = 0x5eed_0f_ca3e;

pub trait SceneEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// `observations[k]` is the projection of scene point `k` in this frame,
    /// or `None` when the point is not visible.
    fn embed(&self, observations: &[Option<[f64; 2]>]) -> Vec<f64>;
}

#[derive(Clone, Debug)]
pub struct KeypointStatsEmbedder {
    projection: DMatrix<f64>,
}

impl Default for KeypointStatsEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl KeypointStatsEmbedder {
    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let projection = DMatrix::from_fn(FEATURE_DIM, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { projection }
    }

    /// Raw statistics before the linear map.
    pub fn features(observations: &[Option<[f64; 2]>]) -> Vec<f64> {
        let mut f = vec![0.0; FEATURE_DIM];
        let visible: Vec<[f64; 2]> = observations.iter().flatten().copied().collect();
        let n = visible.len();
        if !observations.is_empty() {
            f[0] = n as f64 / observations.len() as f64;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            let mx = visible.iter().map(|p| p[0]).sum::<f64>() * inv;
            let my = visible.iter().map(|p| p[1]).sum::<f64>() * inv;
            f[1] = mx;
            f[2] = my;
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            let (mut m30, mut m21, mut m12, mut m03) = (0.0, 0.0, 0.0, 0.0);
            for p in &visible {
                let dx = p[0] - mx;
                let dy = p[1] - my;
                sxx += dx * dx;
                sxy += dx * dy;
                syy += dy * dy;
                m30 += dx * dx * dx;
                m21 += dx * dx * dy;
                m12 += dx * dy * dy;
                m03 += dy * dy * dy;
            }
            // Covariances are tiny in normalized units; rescale to O(1).
            f[3] = 4.0 * sxx * inv;
            f[4] = 4.0 * sxy * inv;
            f[5] = 4.0 * syy * inv;
            f[6] = 8.0 * m30 * inv;
            f[7] = 8.0 * m21 * inv;
            f[8] = 8.0 * m12 * inv;
            f[9] = 8.0 * m03 * inv;
        }
        for a in 0..ANCHOR_POINTS {
            let base = 10 + 3 * a;
            if let Some(Some(p)) = observations.get(a) {
                f[base] = p[0];
                f[base + 1] = p[1];
                f[base + 2] = 1.0;
            }
        }
        f
    }
}

impl SceneEmbedder for KeypointStatsEmbedder {
    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn embed(&self, observations: &[Option<[f64; 2]>]) -> Vec<f64> {
        let f = Self::features(observations);
        (0..self.dim())
            .map(|c| {
                self.projection
                    .column(c)
                    .iter()
                    .zip(f.iter())
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }
}

//! Synthetic multi-view scenes with exact projections.
//!
//! Two trajectory families are provided: `orbit` puts cameras on a sphere
//! around an anisotropic point cloud and points them at its centroid
//! (turn-table captures); `linear` moves a forward-looking camera along a
//! line through a box of points with small heading jitter (fly-through
//! captures). Noiseless, outlier-free scenes satisfy every epipolar
//! constraint exactly and serve as the oracle for geometry and guidance.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{KeypointStatsEmbedder, SceneEmbedder};
use crate::diffusion::PoseTuple;
use crate::geometry::{project, Camera, CorrespondenceSet, Extrinsics, Intrinsics, Quaternion};

const MAX_POINT_ATTEMPTS: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place point {point} in at least two frames after {attempts} attempts")]
    VisibilityUnattainable { point: usize, attempts: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    Orbit,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_frames: usize,
    pub trajectory: Trajectory,
    pub n_points: usize,
    pub focal_range: (f64, f64),
    /// Per-coordinate Gaussian noise on matches, in normalized image units.
    pub match_noise_sigma: f64,
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_frames: 5,
            trajectory: Trajectory::Orbit,
            n_points: 64,
            focal_range: (1.2, 2.0),
            match_noise_sigma: 0.0,
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.n_frames < 2 {
            return bad(format!("n_frames must be >= 2, got {}", self.n_frames));
        }
        if self.n_points < 8 {
            return bad(format!("n_points must be >= 8, got {}", self.n_points));
        }
        let (lo, hi) = self.focal_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("focal range ({lo}, {hi}) is not a positive interval"));
        }
        if !(self.match_noise_sigma >= 0.0 && self.match_noise_sigma.is_finite()) {
            return bad(format!("match noise sigma {} must be >= 0", self.match_noise_sigma));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier rate {} must lie in [0, 1)", self.outlier_rate));
        }
        Ok(())
    }
}

/// One training / evaluation unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub name: String,
    pub spec: SceneSpec,
    #[serde(rename = "cameras", with = "camera_list")]
    pub ground_truth: PoseTuple,
    /// Per-frame conditioning vectors.
    #[serde(rename = "embeddings")]
    pub conditioning: Vec<Vec<f64>>,
    #[serde(rename = "pairs")]
    pub matches: Vec<CorrespondenceSet>,
    /// Parallel to `matches`: `true` marks a corrupted correspondence.
    pub outlier_masks: Vec<Vec<bool>>,
    pub points: Vec<[f64; 3]>,
}

mod camera_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &PoseTuple, s: S) -> Result<S::Ok, S::Error> {
        p.cameras.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PoseTuple, D::Error> {
        Vec::<Camera>::deserialize(d).map(PoseTuple::new)
    }
}

impl SceneRecord {
    pub fn n_frames(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn total_matches(&self) -> usize {
        self.matches.iter().map(|m| m.len()).sum()
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_masks.iter().flatten().filter(|m| **m).count()
    }

    /// Restriction to a subset of frames; pair indices are remapped.
    pub fn select_frames(&self, frames: &[usize]) -> SceneRecord {
        let remap = |k: usize| frames.iter().position(|&f| f == k);
        let mut matches = Vec::new();
        let mut masks = Vec::new();
        for (m, mask) in self.matches.iter().zip(&self.outlier_masks) {
            if let (Some(a), Some(b)) = (remap(m.i), remap(m.j)) {
                matches.push(CorrespondenceSet {
                    i: a,
                    j: b,
                    ..m.clone()
                });
                masks.push(mask.clone());
            }
        }
        SceneRecord {
            name: self.name.clone(),
            spec: SceneSpec {
                n_frames: frames.len(),
                ..self.spec.clone()
            },
            ground_truth: self.ground_truth.select(frames),
            conditioning: frames.iter().map(|&k| self.conditioning[k].clone()).collect(),
            matches,
            outlier_masks: masks,
            points: self.points.clone(),
        }
    }
}

/// World-to-camera extrinsics of a camera at `center` looking at `target`
/// with world `+z` up (camera axes: x right, y down, z forward).
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Extrinsics {
    let forward = (target - center).normalize();
    let up = Vector3::z();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::x());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let q = Quaternion::from_rotation_matrix(&r).canonical();
    Extrinsics::new(q, -(r * center))
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

struct Layout {
    cameras: Vec<Camera>,
    sample_point: Box<dyn Fn(&mut ChaCha8Rng) -> Vector3<f64>>,
}

fn orbit_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Layout {
    let axes = Vector3::new(
        rng.random_range(0.4..1.2),
        rng.random_range(0.4..1.2),
        rng.random_range(0.3..0.9),
    );
    let radius = rng.random_range(3.5..5.0);
    let elevation = rng.random_range(10f64..35.0).to_radians();
    let start = rng.random_range(0.0..2.0 * PI);
    let span = rng.random_range(90f64..300.0).to_radians();
    let n = spec.n_frames;
    let mut azimuths: Vec<f64> = (0..n)
        .map(|k| start + span * k as f64 / (n - 1) as f64 + normal(rng, 4f64.to_radians()))
        .collect();
    // frames of a capture arrive in arbitrary order
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        azimuths.swap(k, j);
    }
    let cameras = azimuths
        .iter()
        .map(|az| {
            let el = elevation + normal(rng, 4f64.to_radians());
            let r = radius * (1.0 + normal(rng, 0.05));
            let c = Vector3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin());
            let f = rng.random_range(spec.focal_range.0..=spec.focal_range.1);
            Camera::new(Intrinsics::from_focal(f), look_at(&c, &Vector3::zeros()))
        })
        .collect();
    Layout {
        cameras,
        sample_point: Box::new(move |rng| {
            Vector3::new(
                normal(rng, axes.x),
                normal(rng, axes.y),
                normal(rng, axes.z),
            )
        }),
    }
}

fn linear_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Layout {
    let heading = rng.random_range(0.0..2.0 * PI);
    let forward = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let lateral = Vector3::new(-heading.sin(), heading.cos(), 0.0);
    let travel = rng.random_range(1.5..3.0);
    let n = spec.n_frames;
    let mut cameras: Vec<Camera> = (0..n)
        .map(|k| {
            let s = travel * k as f64 / (n - 1) as f64;
            let c = forward * s + lateral * normal(rng, 0.1) + Vector3::z() * normal(rng, 0.05);
            let yaw = normal(rng, 5f64.to_radians());
            let pitch = normal(rng, 2f64.to_radians());
            let dir = forward * yaw.cos() + lateral * yaw.sin() + Vector3::z() * pitch.sin();
            let f = rng.random_range(spec.focal_range.0..=spec.focal_range.1);
            Camera::new(Intrinsics::from_focal(f), look_at(&c, &(c + dir)))
        })
        .collect();
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        cameras.swap(k, j);
    }
    Layout {
        cameras,
        sample_point: Box::new(move |rng| {
            let depth = rng.random_range(5.0..12.0);
            let side = rng.random_range(-3.5..3.5);
            let height = rng.random_range(-1.5..1.5);
            forward * depth + lateral * side + Vector3::z() * height
        }),
    }
}

fn observe(cameras: &[Camera], p: &Vector3<f64>) -> Vec<Option<[f64; 2]>> {
    cameras
        .iter()
        .map(|c| match project(c, p) {
            Ok(x) if x.x.abs() <= 1.0 && x.y.abs() <= 1.0 => Some([x.x, x.y]),
            _ => None,
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneRecord, SceneError> {
    generate_scene_with(spec, &KeypointStatsEmbedder::default())
}

pub fn generate_scene_with(spec: &SceneSpec, embedder: &dyn SceneEmbedder) -> Result<SceneRecord, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = match spec.trajectory {
        Trajectory::Orbit => orbit_layout(spec, &mut rng),
        Trajectory::Linear => linear_layout(spec, &mut rng),
    };
    let cameras = layout.cameras;

    let mut points = Vec::with_capacity(spec.n_points);
    let mut observations = Vec::with_capacity(spec.n_points);
    for k in 0..spec.n_points {
        let mut placed = false;
        for _ in 0..MAX_POINT_ATTEMPTS {
            let p = (layout.sample_point)(&mut rng);
            let obs = observe(&cameras, &p);
            if obs.iter().flatten().count() >= 2 {
                points.push([p.x, p.y, p.z]);
                observations.push(obs);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::VisibilityUnattainable {
                point: k,
                attempts: MAX_POINT_ATTEMPTS,
            });
        }
    }

    let n = cameras.len();
    let conditioning = (0..n)
        .map(|f| {
            let frame_obs: Vec<Option<[f64; 2]>> = observations.iter().map(|o| o[f]).collect();
            embedder.embed(&frame_obs)
        })
        .collect();

    let mut matches = Vec::new();
    let mut outlier_masks = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut pi = Vec::new();
            let mut pj = Vec::new();
            let mut mask = Vec::new();
            for obs in &observations {
                let (Some(a), Some(b)) = (obs[i], obs[j]) else {
                    continue;
                };
                let sigma = spec.match_noise_sigma;
                let a = [a[0] + normal(&mut rng, sigma), a[1] + normal(&mut rng, sigma)];
                let mut b = [b[0] + normal(&mut rng, sigma), b[1] + normal(&mut rng, sigma)];
                let outlier = spec.outlier_rate > 0.0 && rng.random_bool(spec.outlier_rate);
                if outlier {
                    b = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                }
                pi.push(a);
                pj.push(b);
                mask.push(outlier);
            }
            if !pi.is_empty() {
                matches.push(CorrespondenceSet {
                    i,
                    j,
                    points_i: pi,
                    points_j: pj,
                });
                outlier_masks.push(mask);
            }
        }
    }

    Ok(SceneRecord {
        name: format!("scene_{:016x}", spec.seed),
        spec: spec.clone(),
        ground_truth: PoseTuple::new(cameras),
        conditioning,
        matches,
        outlier_masks,
        points,
    })
}

/// Distribution from which per-scene specs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDistribution {
    pub trajectory: Trajectory,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    pub n_points: usize,
    pub focal_range: (f64, f64),
    pub match_noise_sigma: f64,
    pub outlier_rate: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            trajectory: Trajectory::Orbit,
            frames: (5, 8),
            n_points: 64,
            focal_range: (1.2, 2.0),
            match_noise_sigma: 0.0,
            outlier_rate: 0.0,
        }
    }
}

impl SceneDistribution {
    pub fn spec_for(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let (lo, hi) = self.frames;
        SceneSpec {
            n_frames: rng.random_range(lo..=hi.max(lo)),
            trajectory: self.trajectory,
            n_points: self.n_points,
            focal_range: self.focal_range,
            match_noise_sigma: self.match_noise_sigma,
            outlier_rate: self.outlier_rate,
            seed,
        }
    }
}

/// Independent per-scene seed derived from the dataset seed and scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn train_scenes(&self) -> Vec<SceneRecord> {
        self.train.iter().map(|&k| self.scenes[k].clone()).collect()
    }

    pub fn test_scenes(&self) -> Vec<SceneRecord> {
        self.test.iter().map(|&k| self.scenes[k].clone()).collect()
    }
}

/// Deterministic split of `n` indices: a seeded shuffle, first `round(ratio·n)` train.
pub fn split_indices(n: usize, train_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5111_7000);
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        idx.swap(k, j);
    }
    let n_train = ((n as f64) * train_ratio.clamp(0.0, 1.0)).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn generate_dataset(
    n_scenes: usize,
    distribution: &SceneDistribution,
    seed: u64,
    train_ratio: f64,
) -> Result<Dataset, SceneError> {
    if n_scenes < 2 {
        return Err(SceneError::InvalidSpec(format!(
            "a dataset needs at least 2 scenes, got {n_scenes}"
        )));
    }
    let embedder = KeypointStatsEmbedder::default();
    let scenes = (0..n_scenes)
        .into_par_iter()
        .map(|k| {
            let mut s = generate_scene_with(&distribution.spec_for(scene_seed(seed, k)), &embedder)?;
            s.name = format!("scene_{k:04}");
            Ok(s)
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    let (train, test) = split_indices(n_scenes, train_ratio, seed);
    Ok(Dataset { scenes, train, test })
}

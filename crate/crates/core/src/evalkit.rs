//! Pose-accuracy metrics.
//!
//! * ARE: geodesic angle between predicted and ground-truth rotations.
//! * ATE: optical-center distance after one least-squares similarity
//!   aligning predicted centers to ground truth.
//! * RRE / RTE: relative-rotation angle error and angle between relative
//!   translation directions over all ordered pairs; both are invariant to
//!   the global coordinate frame.
//!
//! Threshold accuracies are fractions of cameras (or pairs) under each
//! threshold; the `m`-prefixed summaries average those accuracies over the
//! threshold list.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::PoseTuple;
use crate::geometry::{Camera, Extrinsics, Quaternion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction has {pred} frames but ground truth has {gt}")]
    FrameCount { pred: usize, gt: usize },
}

/// Geodesic angle (degrees) between two rotation matrices,
/// `2^{-1/2} ‖log(R* Rᵀ)‖_F`.
pub fn are(r: &Matrix3<f64>, r_star: &Matrix3<f64>) -> f64 {
    let d = r_star * r.transpose();
    let cos = 0.5 * (d.trace() - 1.0);
    let sin = 0.5
        * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    sin.atan2(cos).to_degrees()
}

/// Least-squares similarity `c* ≈ s Q c + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation_matrix() * p) + Vector3::from(self.translation)
    }

    /// Camera extrinsics after moving the world by this similarity: centers
    /// map through it and orientations rotate by `Q`.
    pub fn apply_to_camera(&self, cam: &Camera) -> Camera {
        let q = self.rotation_matrix();
        let r = cam.extrinsics.rotation_matrix() * q.transpose();
        let c = self.apply(&cam.extrinsics.center());
        let t = -(r * c);
        Camera::new(
            cam.intrinsics,
            Extrinsics::new(Quaternion::from_rotation_matrix(&r).canonical(), t),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub aligned: PoseTuple,
    pub similarity: Similarity,
    /// `Σ ‖s Q c_i + b - c*_i‖²` at the optimum.
    pub residual: f64,
    /// The centers were degenerate and no alignment was applied.
    pub skipped: bool,
}

/// Closed-form least-squares similarity between point sets (Umeyama).
pub fn fit_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Similarity> {
    let n = src.len();
    if n == 0 || n != dst.len() {
        return None;
    }
    let inv = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() * inv;
    if !(var_s > 1e-18) {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov *= inv;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rot = u * sign * v_t;
    let sv = svd.singular_values;
    let trace_ds = sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)];
    let scale = trace_ds / var_s;
    let b = mu_d - scale * rot * mu_s;
    Some(Similarity {
        scale,
        rotation: std::array::from_fn(|r| std::array::from_fn(|c| rot[(r, c)])),
        translation: b.into(),
    })
}

fn centers(p: &PoseTuple) -> Vec<Vector3<f64>> {
    p.cameras.iter().map(|c| c.extrinsics.center()).collect()
}

fn check_counts(pred: &PoseTuple, gt: &PoseTuple) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::FrameCount {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Aligns predicted optical centers to ground truth with one similarity and
/// applies it to every predicted camera.
pub fn similarity_align(pred: &PoseTuple, gt: &PoseTuple) -> Result<Alignment, EvalError> {
    check_counts(pred, gt)?;
    let src = centers(pred);
    let dst = centers(gt);
    let Some(sim) = fit_similarity(&src, &dst) else {
        let residual = src.iter().zip(&dst).map(|(a, b)| (a - b).norm_squared()).sum();
        return Ok(Alignment {
            aligned: pred.clone(),
            similarity: Similarity::identity(),
            residual,
            skipped: true,
        });
    };
    let residual = src
        .iter()
        .zip(&dst)
        .map(|(a, b)| (sim.apply(a) - b).norm_squared())
        .sum();
    let aligned = PoseTuple::new(pred.cameras.iter().map(|c| sim.apply_to_camera(c)).collect());
    Ok(Alignment {
        aligned,
        similarity: sim,
        residual,
        skipped: false,
    })
}

/// Per-frame center distance; `pred_aligned` should already be aligned.
pub fn ate(pred_aligned: &PoseTuple, gt: &PoseTuple) -> Result<Vec<f64>, EvalError> {
    check_counts(pred_aligned, gt)?;
    Ok(centers(pred_aligned)
        .iter()
        .zip(centers(gt))
        .map(|(a, b)| (a - b).norm())
        .collect())
}

/// Per-frame rotation angle error in degrees.
pub fn are_per_frame(pred: &PoseTuple, gt: &PoseTuple) -> Result<Vec<f64>, EvalError> {
    check_counts(pred, gt)?;
    Ok(pred
        .cameras
        .iter()
        .zip(&gt.cameras)
        .map(|(p, g)| are(&p.extrinsics.rotation_matrix(), &g.extrinsics.rotation_matrix()))
        .collect())
}

fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

/// `ARE(R_i R_jᵀ, R*_i R*_jᵀ)` over all ordered pairs, degrees.
pub fn rre(pred: &PoseTuple, gt: &PoseTuple) -> Result<Vec<f64>, EvalError> {
    check_counts(pred, gt)?;
    let rp: Vec<_> = pred.cameras.iter().map(|c| c.extrinsics.rotation_matrix()).collect();
    let rg: Vec<_> = gt.cameras.iter().map(|c| c.extrinsics.rotation_matrix()).collect();
    Ok(ordered_pairs(pred.len())
        .map(|(i, j)| are(&(rp[i] * rp[j].transpose()), &(rg[i] * rg[j].transpose())))
        .collect())
}

/// Relative translation `t_ij` of `g_i ∘ g_j^{-1}`.
fn relative_translation(cams: &[Camera], i: usize, j: usize) -> Vector3<f64> {
    cams[i].extrinsics.compose(&cams[j].extrinsics.inverse()).translation
}

/// Pair angles between relative translation directions, degrees.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RteResult {
    pub errors: Vec<f64>,
    /// Pairs dropped for a zero-length relative translation.
    pub excluded: usize,
}

pub fn rte(pred: &PoseTuple, gt: &PoseTuple) -> Result<RteResult, EvalError> {
    check_counts(pred, gt)?;
    let mut out = RteResult::default();
    for (i, j) in ordered_pairs(pred.len()) {
        let a = relative_translation(&pred.cameras, i, j);
        let b = relative_translation(&gt.cameras, i, j);
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            out.excluded += 1;
            continue;
        }
        let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
        out.errors.push(cos.acos().to_degrees());
    }
    Ok(out)
}

/// Scene scale used to express ATE thresholds: RMS distance of the
/// ground-truth centers from their centroid.
pub fn scene_scale(gt: &PoseTuple) -> f64 {
    let c = centers(gt);
    let mu = c.iter().sum::<Vector3<f64>>() / c.len().max(1) as f64;
    (c.iter().map(|p| (p - mu).norm_squared()).sum::<f64>() / c.len().max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Degrees, for ARE, RRE and RTE.
    pub angle_deg: Vec<f64>,
    /// Fractions of scene scale, for ATE.
    pub ate_fraction: Vec<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            angle_deg: vec![5.0, 10.0, 15.0, 30.0],
            ate_fraction: vec![0.1, 0.25, 0.5, 1.0],
        }
    }
}

/// Raw per-frame / per-pair errors of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneErrors {
    pub name: String,
    pub n_frames: usize,
    pub scale: f64,
    pub are_deg: Vec<f64>,
    /// Center distances divided by `scale`.
    pub ate_rel: Vec<f64>,
    pub rre_deg: Vec<f64>,
    pub rte_deg: Vec<f64>,
    pub rte_excluded: usize,
    pub alignment_skipped: bool,
}

impl SceneErrors {
    pub fn mean_are(&self) -> f64 {
        mean(&self.are_deg)
    }
    pub fn mean_ate(&self) -> f64 {
        mean(&self.ate_rel)
    }
    pub fn mean_rre(&self) -> f64 {
        mean(&self.rre_deg)
    }
    pub fn mean_rte(&self) -> f64 {
        mean(&self.rte_deg)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// All four metrics for one scene. ARE and ATE use the similarity-aligned
/// prediction; RRE and RTE use it as given.
pub fn scene_errors(name: &str, pred: &PoseTuple, gt: &PoseTuple) -> Result<SceneErrors, EvalError> {
    let al = similarity_align(pred, gt)?;
    let scale = scene_scale(gt);
    let denom = if scale > 0.0 { scale } else { 1.0 };
    let r = rte(pred, gt)?;
    Ok(SceneErrors {
        name: name.to_string(),
        n_frames: gt.len(),
        scale,
        are_deg: are_per_frame(&al.aligned, gt)?,
        ate_rel: ate(&al.aligned, gt)?.into_iter().map(|d| d / denom).collect(),
        rre_deg: rre(pred, gt)?,
        rte_deg: r.errors,
        rte_excluded: r.excluded,
        alignment_skipped: al.skipped,
    })
}

fn accuracy(errors: &[f64], tau: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| **e <= tau).count() as f64 / errors.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAccuracy {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Accuracy averaged over thresholds.
    pub mean_accuracy: f64,
    /// Raw mean error (degrees, or scale fractions for ATE).
    pub mean_error: f64,
}

impl MetricAccuracy {
    fn new(errors: &[f64], thresholds: &[f64]) -> Self {
        let accuracy: Vec<f64> = thresholds.iter().map(|t| accuracy(errors, *t)).collect();
        Self {
            thresholds: thresholds.to_vec(),
            mean_accuracy: mean(&accuracy),
            accuracy,
            mean_error: mean(errors),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub are: MetricAccuracy,
    pub ate: MetricAccuracy,
    pub rre: MetricAccuracy,
    pub rte: MetricAccuracy,
    pub scenes: Vec<SceneErrors>,
}

impl MetricReport {
    /// Pools every scene's raw errors before thresholding.
    pub fn from_scenes(scenes: Vec<SceneErrors>, thresholds: &Thresholds) -> Self {
        let pool = |f: fn(&SceneErrors) -> &Vec<f64>| -> Vec<f64> {
            scenes.iter().flat_map(|s| f(s).iter().copied()).collect()
        };
        Self {
            are: MetricAccuracy::new(&pool(|s| &s.are_deg), &thresholds.angle_deg),
            ate: MetricAccuracy::new(&pool(|s| &s.ate_rel), &thresholds.ate_fraction),
            rre: MetricAccuracy::new(&pool(|s| &s.rre_deg), &thresholds.angle_deg),
            rte: MetricAccuracy::new(&pool(|s| &s.rte_deg), &thresholds.angle_deg),
            scenes,
        }
    }

    pub fn m_are(&self) -> f64 {
        self.are.mean_accuracy
    }
    pub fn m_ate(&self) -> f64 {
        self.ate.mean_accuracy
    }
    pub fn m_rre(&self) -> f64 {
        self.rre.mean_accuracy
    }
    pub fn m_rte(&self) -> f64 {
        self.rte.mean_accuracy
    }

    /// Flat CSV: one row per scene, metric and threshold.
    pub fn to_csv(&self, thresholds: &Thresholds) -> String {
        let mut out = String::from("scene,n_frames,metric,threshold,accuracy\n");
        for s in &self.scenes {
            let rows: [(&str, &Vec<f64>, &Vec<f64>); 4] = [
                ("ARE", &s.are_deg, &thresholds.angle_deg),
                ("ATE", &s.ate_rel, &thresholds.ate_fraction),
                ("RRE", &s.rre_deg, &thresholds.angle_deg),
                ("RTE", &s.rte_deg, &thresholds.angle_deg),
            ];
            for (metric, errs, taus) in rows {
                for tau in taus {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        s.name,
                        s.n_frames,
                        metric,
                        tau,
                        accuracy(errs, *tau)
                    ));
                }
            }
        }
        out
    }
}

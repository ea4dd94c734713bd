//! Randomized property checks across module boundaries.

use nalgebra::{Matrix3, Vector3};
use posediff_core::denoiser::{
    diffusion_loss, pivot_normalize, DenoiserConfig, DenoiserParams, Objective, TrainingExample,
};
use posediff_core::diffusion::{DiffusionSchedule, GaussianNoise, PoseTuple};
use posediff_core::evalkit::{are, fit_similarity, rre, rte, Similarity};
use posediff_core::geometry::{
    fundamental_matrix, project, sampson_error, sampson_gradient, Camera, Extrinsics, Quaternion,
    CAMERA_DIM,
};
use posediff_core::scenegen::{generate_scene, SceneRecord, SceneSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, n_frames: usize, noise: f64) -> SceneRecord {
    generate_scene(&SceneSpec {
        n_frames,
        n_points: 24,
        match_noise_sigma: noise,
        seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> Extrinsics {
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let angle = rng.random_range(-3.0..3.0);
    let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    Extrinsics::new(Quaternion::from_axis_angle(&axis, angle), t)
}

/// World frame change `x' = H x`: every world-to-camera map becomes `g ∘ H⁻¹`.
fn change_world(poses: &PoseTuple, h: &Extrinsics) -> PoseTuple {
    let inv = h.inverse();
    PoseTuple::new(
        poses
            .cameras
            .iter()
            .map(|c| Camera::new(c.intrinsics, c.extrinsics.compose(&inv)))
            .collect(),
    )
}

fn flip_sign(c: &Camera) -> Camera {
    Camera::new(c.intrinsics, Extrinsics::new(-c.extrinsics.rotation, c.extrinsics.translation))
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quaternion_sign_does_not_change_geometry(seed in 0u64..10_000) {
        let s = scene(seed, 3, 0.01);
        let (a, b) = (s.ground_truth.cameras[0], s.ground_truth.cameras[1]);
        let (na, nb) = (flip_sign(&a), flip_sign(&b));
        let f = fundamental_matrix(&a, &b).unwrap();
        let nf = fundamental_matrix(&na, &nb).unwrap();
        prop_assert!((f - nf).abs().max() <= 1e-12 * f.abs().max().max(1.0));
        let m = &s.matches[0];
        let e = sampson_error(&a, &b, m, 10.0).unwrap();
        let ne = sampson_error(&na, &nb, m, 10.0).unwrap();
        prop_assert!(close(e, ne, 1e-12, 1e-15));
        let p = Vector3::from(s.points[0]);
        let x = project(&a, &p).unwrap();
        let nx = project(&na, &p).unwrap();
        prop_assert!((x - nx).norm() <= 1e-12);
        prop_assert!(are(&a.extrinsics.rotation_matrix(), &na.extrinsics.rotation_matrix()) <= 1e-6);
        let flipped = PoseTuple::new(s.ground_truth.cameras.iter().map(flip_sign).collect());
        let r = rre(&flipped, &s.ground_truth).unwrap();
        prop_assert!(r.iter().all(|v| *v <= 1e-6));
        let (pn, _) = pivot_normalize(&s.ground_truth, 0).unwrap();
        let (fpn, _) = pivot_normalize(&flipped, 0).unwrap();
        for (u, v) in pn.to_flat().iter().zip(fpn.to_flat()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn pivot_normalize_ignores_world_frame(seed in 0u64..10_000, pivot in 0usize..4) {
        let s = scene(seed, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let moved = change_world(&s.ground_truth, &random_rigid(&mut rng));
        let (a, _) = pivot_normalize(&s.ground_truth, pivot).unwrap();
        let (b, _) = pivot_normalize(&moved, pivot).unwrap();
        for (u, v) in a.to_flat().iter().zip(b.to_flat()) {
            prop_assert!((u - v).abs() <= 1e-9, "{u} vs {v}");
        }
    }

    #[test]
    fn relative_metrics_are_gauge_invariant(seed in 0u64..10_000) {
        let gt = scene(seed, 5, 0.0).ground_truth;
        let pred = scene(seed + 1, 5, 0.0).ground_truth;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moved = change_world(&pred, &random_rigid(&mut rng));
        let (r0, r1) = (rre(&pred, &gt).unwrap(), rre(&moved, &gt).unwrap());
        let (t0, t1) = (rte(&pred, &gt).unwrap(), rte(&moved, &gt).unwrap());
        for (a, b) in r0.iter().zip(&r1).chain(t0.errors.iter().zip(&t1.errors)) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn similarity_fit_recovers_and_is_optimal(seed in 0u64..10_000, n in 3usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let h = random_rigid(&mut rng);
        let truth = Similarity {
            scale: rng.random_range(0.2..5.0),
            rotation: to_rows(&h.rotation_matrix()),
            translation: h.translation.into(),
        };
        let clean: Vec<Vector3<f64>> = src.iter().map(|p| truth.apply(p)).collect();
        let fit = fit_similarity(&src, &clean).unwrap();
        prop_assert!((fit.scale - truth.scale).abs() <= 1e-9 * truth.scale);
        prop_assert!((fit.rotation_matrix() - h.rotation_matrix()).abs().max() <= 1e-9);

        // With noise the fit must beat the generating similarity and nearby perturbations of the fit.
        let noisy: Vec<Vector3<f64>> = clean
            .iter()
            .map(|p| p + Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.2)
            .collect();
        let fit = fit_similarity(&src, &noisy).unwrap();
        let cost = |s: &Similarity| src.iter().zip(&noisy).map(|(a, b)| (s.apply(a) - b).norm_squared()).sum::<f64>();
        let best = cost(&fit);
        prop_assert!(best <= cost(&truth) + 1e-12);
        for k in 0..7 {
            let mut p = fit;
            let d = 1e-3;
            match k {
                0 => p.scale *= 1.0 + d,
                1..=3 => p.translation[k - 1] += d,
                _ => {
                    let mut axis = Vector3::zeros();
                    axis[k - 4] = 1.0;
                    let r = Quaternion::from_axis_angle(&axis, d).to_rotation_matrix() * fit.rotation_matrix();
                    p.rotation = to_rows(&r);
                }
            }
            prop_assert!(best <= cost(&p) + 1e-12);
        }
    }
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sampson_gradient_matches_central_differences(seed in 0u64..100_000, jitter in 0.0f64..0.3) {
        let s = scene(seed, 2, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Move away from the exact solution so the gradient is not trivially zero.
        let mut pa = s.ground_truth.cameras[0].to_params();
        let mut pb = s.ground_truth.cameras[1].to_params();
        for v in pa.iter_mut().chain(pb.iter_mut()) {
            *v += jitter * (rng.random::<f64>() - 0.5);
        }
        let m = &s.matches[0];
        let eps = f64::INFINITY;
        let g = sampson_gradient(&Camera::from_params(&pa), &Camera::from_params(&pb), m, eps).unwrap();
        let f = |a: &[f64; CAMERA_DIM], b: &[f64; CAMERA_DIM]| {
            sampson_error(&Camera::from_params(a), &Camera::from_params(b), m, eps).unwrap()
        };
        let scale = g.norm().max(1e-6);
        for k in 0..2 * CAMERA_DIM {
            let h = 1e-6;
            let (mut ap, mut bp, mut am, mut bm) = (pa, pb, pa, pb);
            if k < CAMERA_DIM {
                ap[k] += h;
                am[k] -= h;
            } else {
                bp[k - CAMERA_DIM] += h;
                bm[k - CAMERA_DIM] -= h;
            }
            let fd = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * h);
            let an = if k < CAMERA_DIM { g.cam_i[k] } else { g.cam_j[k - CAMERA_DIM] };
            prop_assert!(close(an, fd, 1e-3, 1e-6 * scale), "param {k}: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn loss_gradient_matches_central_differences(seed in 0u64..100_000, t in 1usize..=20) {
        let cfg = DenoiserConfig { width: 8, layers: 1, heads: 2, ff_width: 12, time_dim: 4, embed_dim: 5 };
        let mut params = DenoiserParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Bring zero-initialized tensors to life so every path is exercised.
        for v in params.values_mut() {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
        let n = rng.random_range(2..5);
        let poses = scene(seed, n, 0.0).ground_truth;
        let cond: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let ex = TrainingExample::new(&poses, cond, rng.random_range(0..n)).unwrap();
        let schedule = DiffusionSchedule::linear(20, 1e-4, 0.2).unwrap();
        let eval = |p: &DenoiserParams| {
            let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(seed));
            diffusion_loss(p, &ex, t, &schedule, Objective::Diffusion, &mut noise).unwrap()
        };
        let base = eval(&params);
        let gmax = base.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..6 {
            let k = rng.random_range(0..params.param_count());
            let h = 1e-5;
            let mut plus = params.clone();
            plus.values_mut()[k] += h;
            let mut minus = params.clone();
            minus.values_mut()[k] -= h;
            let fd = (eval(&plus).loss - eval(&minus).loss) / (2.0 * h);
            prop_assert!(close(base.grad[k], fd, 1e-3, 1e-7 * gmax.max(1e-3)), "weight {k}: analytic {} fd {fd}", base.grad[k]);
        }
    }
}

#[test]
fn noiseless_scenes_satisfy_epipolar_constraints() {
    for seed in 0..50 {
        let s = scene(seed, 4, 0.0);
        for m in &s.matches {
            let e = sampson_error(&s.ground_truth.cameras[m.i], &s.ground_truth.cameras[m.j], m, 10.0).unwrap();
            assert!(e <= 1e-8, "scene {seed} pair ({}, {}): {e}", m.i, m.j);
        }
    }
}

use nalgebra::Matrix3;

use super::dual::{Dual, Scalar};
use super::{rotation_from_quat, Camera, CorrespondenceSet, GeometryError, CAMERA_DIM};

/// Number of differentiable parameters in a camera pair.
const PAIR_DIM: usize = 2 * CAMERA_DIM;

/// Relative denominator below which a correspondence is treated as lying on
/// both epipoles.
const DENOMINATOR_FLOOR: f64 = 1e-24;

/// `F = K_j^{-T} [t_ij]_x R_ij K_i^{-1}` from two raw 8-vectors, with
/// `g_ij = g_j ∘ g_i^{-1}`. Quaternions are normalized inside, so the result
/// depends only on the rotation they represent.
pub(crate) fn fundamental_generic<S: Scalar>(a: &[S; 8], b: &[S; 8]) -> [[S; 3]; 3] {
    let rot = |p: &[S; 8]| {
        let n = (p[1] * p[1] + p[2] * p[2] + p[3] * p[3] + p[4] * p[4]).sqrt();
        rotation_from_quat(p[1] / n, p[2] / n, p[3] / n, p[4] / n)
    };
    let ri = rot(a);
    let rj = rot(b);
    let ti = [a[5], a[6], a[7]];
    let tj = [b[5], b[6], b[7]];

    // R_ij = R_j R_iᵀ
    let mut rij = [[S::cst(0.0); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rij[r][c] = rj[r][0] * ri[c][0] + rj[r][1] * ri[c][1] + rj[r][2] * ri[c][2];
        }
    }
    // t_ij = t_j - R_ij t_i
    let mut tij = [S::cst(0.0); 3];
    for r in 0..3 {
        tij[r] = tj[r] - (rij[r][0] * ti[0] + rij[r][1] * ti[1] + rij[r][2] * ti[2]);
    }
    let zero = S::cst(0.0);
    let skew = [
        [zero, -tij[2], tij[1]],
        [tij[2], zero, -tij[0]],
        [-tij[1], tij[0], zero],
    ];
    let mut e = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            e[r][c] = skew[r][0] * rij[0][c] + skew[r][1] * rij[1][c] + skew[r][2] * rij[2][c];
        }
    }
    // Principal points sit at the origin, so K^{-1} = diag(1/f, 1/f, 1).
    let inv_fi = S::cst(1.0) / a[0].exp();
    let inv_fj = S::cst(1.0) / b[0].exp();
    let ki = [inv_fi, inv_fi, S::cst(1.0)];
    let kj = [inv_fj, inv_fj, S::cst(1.0)];
    let mut f = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            f[r][c] = kj[r] * e[r][c] * ki[c];
        }
    }
    f
}

fn to_matrix(f: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| f[r][c])
}

/// Fundamental matrix mapping points of image `i` to epipolar lines in image `j`.
pub fn fundamental_matrix(cam_i: &Camera, cam_j: &Camera) -> Result<Matrix3<f64>, GeometryError> {
    let a = cam_i.to_params();
    let b = cam_j.to_params();
    let rel = cam_j.extrinsics.compose(&cam_i.extrinsics.inverse());
    let scale = 1.0 + cam_i.extrinsics.translation.norm() + cam_j.extrinsics.translation.norm();
    if rel.translation.norm() <= 1e-12 * scale {
        return Err(GeometryError::DegenerateGeometry(0, 1));
    }
    Ok(to_matrix(&fundamental_generic(&a, &b)))
}

/// Unclamped Sampson term for one correspondence, or `None` when the
/// denominator vanishes.
pub fn sampson_term(f: &Matrix3<f64>, p_i: &[f64; 2], p_j: &[f64; 2]) -> Option<f64> {
    let f = [
        [f[(0, 0)], f[(0, 1)], f[(0, 2)]],
        [f[(1, 0)], f[(1, 1)], f[(1, 2)]],
        [f[(2, 0)], f[(2, 1)], f[(2, 2)]],
    ];
    let floor = DENOMINATOR_FLOOR * frob2(&f);
    term_parts(&f, p_i, p_j, floor).map(|t| t.value)
}

fn frob2(f: &[[f64; 3]; 3]) -> f64 {
    f.iter().flatten().map(|v| v * v).sum()
}

struct TermParts {
    value: f64,
    residual: f64,
    denom: f64,
    line_j: [f64; 2],
    line_i: [f64; 2],
}

#[inline]
fn term_parts(f: &[[f64; 3]; 3], p_i: &[f64; 2], p_j: &[f64; 2], floor: f64) -> Option<TermParts> {
    let pi = [p_i[0], p_i[1], 1.0];
    let pj = [p_j[0], p_j[1], 1.0];
    // a = F p̃_i (epipolar line in image j), b = Fᵀ p̃_j
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for r in 0..3 {
        a[r] = f[r][0] * pi[0] + f[r][1] * pi[1] + f[r][2] * pi[2];
        b[r] = f[0][r] * pj[0] + f[1][r] * pj[1] + f[2][r] * pj[2];
    }
    let residual = pj[0] * a[0] + pj[1] * a[1] + pj[2] * a[2];
    let denom = a[0] * a[0] + a[1] * a[1] + b[0] * b[0] + b[1] * b[1];
    if !(denom > floor) {
        return None;
    }
    Some(TermParts {
        value: residual * residual / denom,
        residual,
        denom,
        line_j: [a[0], a[1]],
        line_i: [b[0], b[1]],
    })
}

/// Outcome of a robust Sampson evaluation over one correspondence set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampsonEval {
    /// `Σ_k min(d_k, ε)` over usable correspondences.
    pub total: f64,
    /// Correspondences whose term hit the clamp.
    pub clamped: usize,
    /// Correspondences skipped for a vanishing denominator.
    pub skipped: usize,
}

fn check_inputs(corr: &CorrespondenceSet, epsilon: f64) -> Result<(), GeometryError> {
    if !(epsilon > 0.0) {
        return Err(GeometryError::InvalidEpsilon(epsilon));
    }
    corr.validate()
}

fn evaluate_params(a: &[f64; 8], b: &[f64; 8], corr: &CorrespondenceSet, epsilon: f64) -> SampsonEval {
    let f = fundamental_generic(a, b);
    let floor = DENOMINATOR_FLOOR * frob2(&f);
    let mut eval = SampsonEval::default();
    for (pi, pj) in corr.iter() {
        match term_parts(&f, pi, pj, floor) {
            Some(t) if t.value >= epsilon => {
                eval.total += epsilon;
                eval.clamped += 1;
            }
            Some(t) => eval.total += t.value,
            None => eval.skipped += 1,
        }
    }
    eval
}

/// Robust Sampson error `e_ij = Σ_k min(d_k, ε)` with diagnostics.
///
/// The per-correspondence term squares the algebraic residual,
/// `d_k = (p̃_jᵀ F p̃_i)² / ((F p̃_i)_1² + (F p̃_i)_2² + (Fᵀ p̃_j)_1² + (Fᵀ p̃_j)_2²)`,
/// which makes it a nonnegative first-order geometric distance.
pub fn sampson_evaluate(
    cam_i: &Camera,
    cam_j: &Camera,
    corr: &CorrespondenceSet,
    epsilon: f64,
) -> Result<SampsonEval, GeometryError> {
    check_inputs(corr, epsilon)?;
    Ok(evaluate_params(&cam_i.to_params(), &cam_j.to_params(), corr, epsilon))
}

pub fn sampson_error(
    cam_i: &Camera,
    cam_j: &Camera,
    corr: &CorrespondenceSet,
    epsilon: f64,
) -> Result<f64, GeometryError> {
    sampson_evaluate(cam_i, cam_j, corr, epsilon).map(|e| e.total)
}

/// Sampson error of a pair together with its gradient with respect to both
/// cameras' 8-vector parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGradient {
    pub eval: SampsonEval,
    pub cam_i: [f64; CAMERA_DIM],
    pub cam_j: [f64; CAMERA_DIM],
}

impl PairGradient {
    pub fn norm(&self) -> f64 {
        self.cam_i
            .iter()
            .chain(self.cam_j.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient on raw parameter blocks; the caller validates inputs.
///
/// The adjoint of `F` is accumulated analytically over correspondences and
/// then pulled back through the camera-to-`F` map, whose 9×16 Jacobian is
/// obtained with forward-mode duals.
pub(crate) fn gradient_params(
    a: &[f64; 8],
    b: &[f64; 8],
    corr: &CorrespondenceSet,
    epsilon: f64,
) -> PairGradient {
    let mut da = [Dual::<PAIR_DIM>::constant(0.0); 8];
    let mut db = [Dual::<PAIR_DIM>::constant(0.0); 8];
    for k in 0..8 {
        da[k] = Dual::variable(a[k], k);
        db[k] = Dual::variable(b[k], CAMERA_DIM + k);
    }
    let fd = fundamental_generic(&da, &db);
    let f: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| fd[r][c].v));
    let floor = DENOMINATOR_FLOOR * frob2(&f);

    let mut eval = SampsonEval::default();
    let mut adj = [[0.0; 3]; 3];
    for (p_i, p_j) in corr.iter() {
        let Some(t) = term_parts(&f, p_i, p_j, floor) else {
            eval.skipped += 1;
            continue;
        };
        if t.value >= epsilon {
            eval.total += epsilon;
            eval.clamped += 1;
            continue;
        }
        eval.total += t.value;
        let pi = [p_i[0], p_i[1], 1.0];
        let pj = [p_j[0], p_j[1], 1.0];
        // d = r²/D: ∂d/∂F_mn = 2r/D ∂r/∂F_mn - r²/D² ∂D/∂F_mn
        let c_r = 2.0 * t.residual / t.denom;
        let c_d = t.value / t.denom;
        for m in 0..3 {
            for n in 0..3 {
                let mut dd = 0.0;
                if m < 2 {
                    dd += 2.0 * t.line_j[m] * pi[n];
                }
                if n < 2 {
                    dd += 2.0 * t.line_i[n] * pj[m];
                }
                adj[m][n] += c_r * pj[m] * pi[n] - c_d * dd;
            }
        }
    }

    let mut grad = [0.0; PAIR_DIM];
    for m in 0..3 {
        for n in 0..3 {
            let w = adj[m][n];
            if w == 0.0 {
                continue;
            }
            for (g, d) in grad.iter_mut().zip(fd[m][n].d.iter()) {
                *g += w * d;
            }
        }
    }
    PairGradient {
        eval,
        cam_i: std::array::from_fn(|k| grad[k]),
        cam_j: std::array::from_fn(|k| grad[CAMERA_DIM + k]),
    }
}

pub(crate) fn evaluate_raw(
    a: &[f64; 8],
    b: &[f64; 8],
    corr: &CorrespondenceSet,
    epsilon: f64,
) -> SampsonEval {
    evaluate_params(a, b, corr, epsilon)
}

/// `∂e_ij/∂(params_i, params_j)`; clamped terms contribute nothing.
pub fn sampson_gradient(
    cam_i: &Camera,
    cam_j: &Camera,
    corr: &CorrespondenceSet,
    epsilon: f64,
) -> Result<PairGradient, GeometryError> {
    check_inputs(corr, epsilon)?;
    Ok(gradient_params(&cam_i.to_params(), &cam_j.to_params(), corr, epsilon))
}

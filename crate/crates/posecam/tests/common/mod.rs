//! Shared acceptance-test oracles, independent of the library's alignment
//! implementation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rotvec_to_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*w), angle).into_inner()
}

/// Residual stack for Sim(3) parameters theta = [log s, w(3), t(3)].
fn residuals(theta: &[f64; 7], src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> DVector<f64> {
    let s = theta[0].exp();
    let r = rotvec_to_matrix(&Vector3::new(theta[1], theta[2], theta[3]));
    let t = Vector3::new(theta[4], theta[5], theta[6]);
    let mut out = DVector::zeros(3 * src.len());
    for (i, (p, g)) in src.iter().zip(dst).enumerate() {
        let e = s * r * p + t - g;
        out[3 * i] = e.x;
        out[3 * i + 1] = e.y;
        out[3 * i + 2] = e.z;
    }
    out
}

fn cost(theta: &[f64; 7], src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    residuals(theta, src, dst).norm_squared()
}

/// Levenberg–Marquardt with a central-difference Jacobian from one start.
fn lm_from(mut theta: [f64; 7], src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let m = 3 * src.len();
    let mut lambda = 1e-3;
    let mut best = cost(&theta, src, dst);
    for _ in 0..200 {
        let r0 = residuals(&theta, src, dst);
        let h = 1e-6;
        let mut jac = DMatrix::zeros(m, 7);
        for k in 0..7 {
            let mut plus = theta;
            let mut minus = theta;
            plus[k] += h;
            minus[k] -= h;
            let dr = (residuals(&plus, src, dst) - residuals(&minus, src, dst)) / (2.0 * h);
            jac.set_column(k, &dr);
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r0;
        let mut improved = false;
        for _ in 0..25 {
            let mut lhs = jtj.clone();
            for d in 0..7 {
                lhs[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(delta) = lhs.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = theta;
            for d in 0..7 {
                cand[d] += delta[d];
            }
            let c = cost(&cand, src, dst);
            if c < best {
                theta = cand;
                best = c;
                lambda = (lambda * 0.3).max(1e-14);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    best
}

/// Direct-numerical-minimization ATE: the RMSE of `s R p + t − g` minimized
/// over all of Sim(3) by multi-start Levenberg–Marquardt. Shares nothing
/// with the closed-form Umeyama path.
pub fn ate_oracle(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    assert_eq!(src.len(), dst.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0xa7e);
    let mut best = f64::INFINITY;
    for start in 0..8 {
        let theta = if start == 0 {
            [0.0; 7]
        } else {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ]
        };
        best = best.min(lm_from(theta, src, dst));
    }
    (best / src.len() as f64).sqrt()
}

//! Training objective: total loss and the weighted, trajectory-normalized,
//! scale-resolved pose loss.
//!
//! The translation term is divided by the sequence-averaged consecutive frame
//! distance of the ground truth so scenes of very different physical scale
//! contribute comparable gradients. Non-metric samples resolve their scale
//! ambiguity through the closed-form least-squares factor `s*`, which is
//! treated as a constant under differentiation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::{PoseEncoding, Trajectory};

/// Static-trajectory cutoff for the normalizer `d̄`, in scene units.
pub const DEGENERATE_D_BAR_EPS: f64 = 1e-8;
/// Cutoff on the `s*` denominator below which the fallback `s* = 1` is used.
pub const DEGENERATE_SCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_t: f64,
    pub w_r: f64,
    pub w_f: f64,
    pub lambda_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_t: 1.0,
            w_r: 1.0,
            w_f: 1.0,
            lambda_pose: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_t", self.w_t),
            ("w_r", self.w_r),
            ("w_f", self.w_f),
            ("lambda_pose", self.lambda_pose),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PoseCamError::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The pose loss value together with its per-component terms and the scale
/// quantities that produced it.
#[derive(Debug, Clone, Copy)]
pub struct PoseLossBreakdown {
    pub total: f64,
    pub translation_term: f64,
    pub rotation_term: f64,
    pub fov_term: f64,
    pub d_bar: f64,
    pub s_star: f64,
    /// Set when the `s*` denominator was degenerate and the fallback was used.
    pub scale_degenerate: bool,
}

/// `d̄`: mean Euclidean distance between consecutive ground-truth camera
/// positions.
pub fn mean_consecutive_distance(gt: &Trajectory) -> Result<f64> {
    let t = gt.translations();
    d_bar_of_translations(&t)
}

pub(crate) fn d_bar_of_translations(t: &[Vector3<f64>]) -> Result<f64> {
    if t.len() < 2 {
        return Err(PoseCamError::InvalidInput(format!(
            "need at least 2 poses for d_bar, got {}",
            t.len()
        )));
    }
    let sum: f64 = t.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let d_bar = sum / (t.len() - 1) as f64;
    if d_bar < DEGENERATE_D_BAR_EPS {
        return Err(PoseCamError::DegenerateTrajectory(format!(
            "static trajectory: d_bar = {d_bar:e}"
        )));
    }
    Ok(d_bar)
}

/// Closed-form least-squares scale `s* = Σ t̂·t / Σ t̂·t̂`.
///
/// Returns `(s_star, degenerate)`; a near-zero denominator (all-zero
/// prediction) falls back to `s* = 1` with the flag set.
pub fn ls_scale(pred_t: &[Vector3<f64>], gt_t: &[Vector3<f64>]) -> Result<(f64, bool)> {
    if pred_t.len() != gt_t.len() || pred_t.is_empty() {
        return Err(PoseCamError::InvalidInput(format!(
            "ls_scale length mismatch: {} vs {}",
            pred_t.len(),
            gt_t.len()
        )));
    }
    let num: f64 = pred_t.iter().zip(gt_t).map(|(p, g)| p.dot(g)).sum();
    let den: f64 = pred_t.iter().map(|p| p.dot(p)).sum();
    if den < DEGENERATE_SCALE_EPS {
        return Ok((1.0, true));
    }
    Ok((num / den, false))
}

fn l1_3(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs()
}

/// Weighted L1 pose loss over a sequence of predicted and ground-truth pose
/// encodings.
///
/// Ground truth is expected in first-frame coordinates; its quaternions are
/// canonicalized here, so the loss is exactly invariant to the gt
/// hemisphere. With `metric` set, `s*` is pinned to 1 so absolute scale is
/// supervised; otherwise `s*` comes from [`ls_scale`].
pub fn pose_loss(
    pred: &[PoseEncoding],
    gt: &[PoseEncoding],
    weights: &LossWeights,
    metric: bool,
) -> Result<PoseLossBreakdown> {
    if pred.len() != gt.len() {
        return Err(PoseCamError::InvalidInput(format!(
            "pose_loss length mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(PoseCamError::InvalidInput(format!(
            "pose_loss needs at least 2 frames, got {n}"
        )));
    }
    let gt_t: Vec<Vector3<f64>> = gt.iter().map(|g| g.t).collect();
    let pred_t: Vec<Vector3<f64>> = pred.iter().map(|p| p.t).collect();
    let d_bar = d_bar_of_translations(&gt_t)?;
    let (s_star, scale_degenerate) = if metric {
        (1.0, false)
    } else {
        ls_scale(&pred_t, &gt_t)?
    };

    let mut trans = 0.0;
    let mut rot = 0.0;
    let mut fov = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        trans += l1_3(&(p.t * s_star), &g.t) / d_bar;
        let pq = p.q.as_array();
        // canonicalization makes the loss exactly invariant to the gt
        // hemisphere; a no-op for already-canonical ground truth
        let gq = crate::geom::canonicalize_quat(&g.q)?.as_array();
        rot += pq.iter().zip(gq).map(|(a, b)| (a - b).abs()).sum::<f64>();
        fov += (p.f_h - g.f_h).abs() + (p.f_w - g.f_w).abs();
    }
    let nf = n as f64;
    let translation_term = weights.w_t * trans / nf;
    let rotation_term = weights.w_r * rot / nf;
    let fov_term = weights.w_f * fov / nf;
    Ok(PoseLossBreakdown {
        total: translation_term + rotation_term + fov_term,
        translation_term,
        rotation_term,
        fov_term,
        d_bar,
        s_star,
        scale_degenerate,
    })
}

/// Total objective: next-token-prediction loss plus `λ_pose` times the pose
/// loss.
pub fn total_loss(ntp: f64, pose: f64, weights: &LossWeights) -> f64 {
    ntp + weights.lambda_pose * pose
}

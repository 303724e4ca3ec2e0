//! Sim(3) trajectory alignment and the ATE / RPE evaluation metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{PoseCamError, Result};
use crate::geom::{quat_to_rotmat, relative_pose, RigidPose, Trajectory};

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Sim3Transform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajMetrics {
    /// RMSE of aligned translation residuals, scene units.
    pub ate: f64,
    /// RMSE of relative-translation error magnitudes, scene units.
    pub rpe_trans: f64,
    /// RMSE (or mean, by flag) of relative-rotation error angles, degrees.
    pub rpe_rot: f64,
}

/// How RPE rotation angles are aggregated across frame pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotAggregate {
    #[default]
    Rmse,
    Mean,
}

/// Least-squares similarity alignment of `src` onto `dst` (Umeyama's
/// closed-form solution via the SVD of the cross-covariance).
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Transform> {
    if src.len() != dst.len() {
        return Err(PoseCamError::InvalidInput(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(PoseCamError::AlignmentDegenerate(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mu_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / nf;

    let mut sigma = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        sigma += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    sigma /= nf;
    var_src /= nf;

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or_else(|| PoseCamError::Numerical("SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| PoseCamError::Numerical("SVD failed".into()))?;
    let d = svd.singular_values;

    // Collinear point sets leave the rotation underdetermined: the
    // cross-covariance then has rank <= 1.
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(PoseCamError::AlignmentDegenerate(
            "points are (near-)collinear".into(),
        ));
    }

    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (d[0] * s_diag.x + d[1] * s_diag.y + d[2] * s_diag.z) / var_src;
    if !(scale > 0.0) {
        return Err(PoseCamError::AlignmentDegenerate(format!(
            "nonpositive scale {scale}"
        )));
    }
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(Sim3Transform {
        scale,
        rotation,
        translation,
    })
}

fn check_matched(pred: &Trajectory, gt: &Trajectory) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(PoseCamError::InvalidInput(format!(
            "trajectory length mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Absolute trajectory error: Sim(3)-aligns predicted positions to ground
/// truth, then returns the RMSE of residual norms.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_matched(pred, gt)?;
    let p = pred.translations();
    let g = gt.translations();
    let t = umeyama_sim3(&p, &g)?;
    let mse: f64 = p
        .iter()
        .zip(&g)
        .map(|(pi, gi)| (t.apply(pi) - gi).norm_squared())
        .sum::<f64>()
        / p.len() as f64;
    Ok(mse.sqrt())
}

/// Rotation angle of a rotation matrix, radians.
fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Relative pose error over frame pairs `(i, i+delta)`.
///
/// Predicted translations are rescaled by the Sim(3) scale from the ATE
/// alignment before pairwise differencing; relative poses themselves cancel
/// any global rigid offset.
pub fn rpe(
    pred: &Trajectory,
    gt: &Trajectory,
    delta: usize,
    rot_agg: RotAggregate,
) -> Result<(f64, f64)> {
    check_matched(pred, gt)?;
    if delta == 0 {
        return Err(PoseCamError::InvalidInput("delta must be >= 1".into()));
    }
    let n = pred.len();
    if n < delta + 1 {
        return Err(PoseCamError::InvalidInput(format!(
            "trajectory too short for delta {delta}: {n} frames"
        )));
    }
    let scale = umeyama_sim3(&pred.translations(), &gt.translations())?.scale;
    let scaled_pose = |p: &RigidPose| RigidPose::new(p.rotation, p.translation * scale);

    let mut trans_sq = 0.0;
    let mut rot_sq = 0.0;
    let mut rot_sum = 0.0;
    let pairs = n - delta;
    for i in 0..pairs {
        let rel_pred = relative_pose(&scaled_pose(pred.pose(i)), &scaled_pose(pred.pose(i + delta)))?;
        let rel_gt = relative_pose(gt.pose(i), gt.pose(i + delta))?;
        let err = relative_pose(&rel_gt, &rel_pred)?;
        trans_sq += err.translation.norm_squared();
        let ang = rotation_angle(&quat_to_rotmat(&err.rotation)?).to_degrees();
        rot_sq += ang * ang;
        rot_sum += ang;
    }
    let pf = pairs as f64;
    let rpe_trans = (trans_sq / pf).sqrt();
    let rpe_rot = match rot_agg {
        RotAggregate::Rmse => (rot_sq / pf).sqrt(),
        RotAggregate::Mean => rot_sum / pf,
    };
    Ok((rpe_trans, rpe_rot))
}

/// Pose-benchmark frame selection protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    /// First 90 frames with temporal stride 3 (ScanNet / TUM-dynamic style).
    Strided,
    /// All frames (Sintel style: filtering happens at the sequence level).
    AllFrames,
}

/// Frame indices to evaluate for a sequence of `total_frames` under the given
/// protocol.
pub fn eval_frame_protocol(total_frames: usize, protocol: EvalProtocol) -> Vec<usize> {
    match protocol {
        EvalProtocol::Strided => (0..total_frames.min(90)).step_by(3).collect(),
        EvalProtocol::AllFrames => (0..total_frames).collect(),
    }
}

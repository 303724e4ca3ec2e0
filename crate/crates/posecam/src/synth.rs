//! Synthetic world generator: smooth random camera trajectories, pose-derived
//! frame features, and direction-QA labels.
//!
//! Features encode the absolute (world-frame) pose of their own frame, so
//! recovering first-frame-relative targets requires reasoning across frames
//! rather than reading any single frame.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};
use crate::geom::{
    canonicalize_quat, to_first_frame_coords, PoseEncoding, Quat, RigidPose, Trajectory,
};

/// Fixed camera intrinsics used for every synthetic scene, radians.
pub const SYNTH_FOV_H: f64 = 1.0;
pub const SYNTH_FOV_W: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Arc,
    RandomWalk,
}

/// Direction-QA answers, ordered `+x, -x, +y, -y` (the deterministic
/// tie-break order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaAnswer {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl QaAnswer {
    pub fn token_id(&self) -> usize {
        match self {
            QaAnswer::PlusX => 0,
            QaAnswer::MinusX => 1,
            QaAnswer::PlusY => 2,
            QaAnswer::MinusY => 3,
        }
    }

    pub fn from_token_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(QaAnswer::PlusX),
            1 => Some(QaAnswer::MinusX),
            2 => Some(QaAnswer::PlusY),
            3 => Some(QaAnswer::MinusY),
            _ => None,
        }
    }
}

/// One synthetic scene: a world-frame trajectory and pose-derived features.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub trajectory: Trajectory,
    /// Row-major `(n_frames * K) x H`.
    pub frame_features: Vec<f64>,
    pub tokens_per_frame: usize,
    pub hidden_dim: usize,
    pub metric: bool,
    pub qa_label: QaAnswer,
    pub noise_sigma: f64,
}

/// Smooth trajectory with bounded per-step rotation and per-step translation
/// of roughly `step_scale`.
pub fn gen_trajectory<R: Rng>(
    kind: TrajectoryKind,
    n_frames: usize,
    step_scale: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if n_frames < 2 {
        return Err(PoseCamError::InvalidInput("need at least 2 frames".into()));
    }
    if !(step_scale > 0.0) {
        return Err(PoseCamError::InvalidInput("step_scale must be > 0".into()));
    }
    let poses = match kind {
        TrajectoryKind::Line => {
            // random heading in the xy plane, identity rotation
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
            (0..n_frames)
                .map(|i| {
                    (
                        i as f64,
                        RigidPose::from_translation(dir * (step_scale * i as f64)),
                    )
                })
                .collect()
        }
        TrajectoryKind::Arc => {
            // quarter circle: 90 degrees of total heading change, camera yaw
            // following the tangent
            let total = std::f64::consts::FRAC_PI_2;
            let dtheta = total / (n_frames - 1) as f64;
            let radius = step_scale / (2.0 * (dtheta / 2.0).sin());
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..n_frames)
                .map(|i| {
                    let a = phase + dtheta * i as f64;
                    let t = Vector3::new(radius * a.cos(), radius * a.sin(), 0.0);
                    let yaw = a - phase;
                    (i as f64, RigidPose::new(Quat::from_axis_angle(Vector3::z(), yaw), t))
                })
                .collect()
        }
        TrajectoryKind::RandomWalk => {
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            let mut pitch = 0.0f64;
            let mut pos = Vector3::zeros();
            let mut yaw_total = 0.0f64;
            let mut out = Vec::with_capacity(n_frames);
            for i in 0..n_frames {
                out.push((
                    i as f64,
                    RigidPose::new(Quat::from_axis_angle(Vector3::z(), yaw_total), pos),
                ));
                // bounded per-step rotation (< 30 degrees)
                let turn = rng.random_range(-0.4..0.4);
                heading += turn;
                yaw_total += turn;
                pitch = (pitch + rng.random_range(-0.1..0.1)).clamp(-0.3, 0.3);
                let step = step_scale * rng.random_range(0.7..1.3);
                pos += Vector3::new(
                    heading.cos() * pitch.cos(),
                    heading.sin() * pitch.cos(),
                    pitch.sin(),
                ) * step;
            }
            out
        }
    };
    Trajectory::new(poses)
}

/// Per-token fixed random affine maps from the 10-vector
/// `[t, q, f_h, f_w, 1]` of a frame's absolute pose into feature space.
fn projection_maps(projection_seed: u64, tokens_per_frame: usize, hidden_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
    (0..tokens_per_frame)
        .map(|_| {
            (0..10 * hidden_dim)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect()
        })
        .collect()
}

/// Renders `(n_frames * K) x H` features; frame i's features depend only on
/// the absolute pose of frame i, plus Gaussian noise of scale `noise_sigma`.
pub fn render_features<R: Rng>(
    traj: &Trajectory,
    tokens_per_frame: usize,
    hidden_dim: usize,
    projection_seed: u64,
    noise_sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    let maps = projection_maps(projection_seed, tokens_per_frame, hidden_dim);
    let n = traj.len();
    let mut out = Vec::with_capacity(n * tokens_per_frame * hidden_dim);
    for (_, pose) in traj.poses() {
        let q = pose.rotation;
        let input = [
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            q.w,
            q.x,
            q.y,
            q.z,
            SYNTH_FOV_H,
            SYNTH_FOV_W,
            1.0,
        ];
        for map in &maps {
            for j in 0..hidden_dim {
                let mut acc = 0.0;
                for (i, x) in input.iter().enumerate() {
                    acc += x * map[i * hidden_dim + j];
                }
                if noise_sigma > 0.0 {
                    // Box-Muller
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    acc += noise_sigma
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Dominant net camera displacement direction, expressed in the first
/// camera's frame; ties break in the listed `+x, -x, +y, -y` order.
pub fn qa_label(traj: &Trajectory) -> Result<QaAnswer> {
    if traj.len() < 2 {
        return Err(PoseCamError::InvalidInput("need at least 2 frames".into()));
    }
    let rel = to_first_frame_coords(traj)?;
    let d = rel.pose(rel.len() - 1).translation;
    let scores = [d.x, -d.x, d.y, -d.y];
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(QaAnswer::from_token_id(best).unwrap())
}

/// Minimum net in-plane displacement for a scene to carry a meaningful
/// direction label, relative to step_scale.
const MIN_NET_DISPLACEMENT: f64 = 0.1;

/// Generates a full scene, regenerating the trajectory until the net
/// displacement supports an unambiguous direction label.
pub fn gen_scene<R: Rng>(
    kind: TrajectoryKind,
    n_frames: usize,
    step_scale: f64,
    tokens_per_frame: usize,
    hidden_dim: usize,
    projection_seed: u64,
    noise_sigma: f64,
    metric: bool,
    rng: &mut R,
) -> Result<SynthScene> {
    let trajectory = loop {
        let t = gen_trajectory(kind, n_frames, step_scale, rng)?;
        let rel = to_first_frame_coords(&t)?;
        let d = rel.pose(rel.len() - 1).translation;
        if d.x.abs().max(d.y.abs()) >= MIN_NET_DISPLACEMENT * step_scale {
            break t;
        }
    };
    let frame_features = render_features(
        &trajectory,
        tokens_per_frame,
        hidden_dim,
        projection_seed,
        noise_sigma,
        rng,
    );
    let qa = qa_label(&trajectory)?;
    Ok(SynthScene {
        trajectory,
        frame_features,
        tokens_per_frame,
        hidden_dim,
        metric,
        qa_label: qa,
        noise_sigma,
    })
}

impl SynthScene {
    /// Features of the given frames, gathered into `(len * K) x H` row-major
    /// order.
    pub fn gather_features(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let k = self.tokens_per_frame;
        let h = self.hidden_dim;
        let n = self.trajectory.len();
        let mut out = Vec::with_capacity(indices.len() * k * h);
        for &i in indices {
            if i >= n {
                return Err(PoseCamError::InvalidInput(format!(
                    "frame index {i} out of range"
                )));
            }
            out.extend_from_slice(&self.frame_features[i * k * h..(i + 1) * k * h]);
        }
        Ok(out)
    }

    /// Ground-truth pose encodings for the given frames, in the coordinate
    /// system of the first selected frame, quaternions canonicalized.
    pub fn gt_encodings(&self, indices: &[usize]) -> Result<Vec<PoseEncoding>> {
        let sub = self.trajectory.subsample(indices)?;
        let rel = to_first_frame_coords(&sub)?;
        rel.poses()
            .iter()
            .map(|(_, p)| {
                Ok(PoseEncoding::new(
                    p.translation,
                    canonicalize_quat(&p.rotation.normalized()?)?,
                    SYNTH_FOV_H,
                    SYNTH_FOV_W,
                ))
            })
            .collect()
    }

    /// QA label of the sub-trajectory selected by `indices`.
    pub fn qa_label_for(&self, indices: &[usize]) -> Result<QaAnswer> {
        qa_label(&self.trajectory.subsample(indices)?)
    }
}

//! Quaternion, rigid-pose and pose-encoding algebra.
//!
//! Quaternion component order is `(w, x, y, z)` everywhere in memory; file
//! formats that store `(qx qy qz qw)` are converted at the I/O boundary.
//! `RigidPose` is camera-to-world: it maps camera-frame points into the
//! reference frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PoseCamError, Result};

/// Rotation quaternion, components ordered `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quat::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::identity();
        }
        let half = 0.5 * angle;
        let s = half.sin() / n;
        Quat::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if n == 0.0 {
            return Err(PoseCamError::InvalidInput("zero quaternion".into()));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        Quat::new(
            self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        )
    }

    /// Multiplicative inverse (conjugate over squared norm); valid for any
    /// nonzero quaternion.
    pub fn inverse(&self) -> Result<Quat> {
        let n2 = self.norm_squared();
        if n2 == 0.0 {
            return Err(PoseCamError::InvalidInput("zero quaternion".into()));
        }
        let c = self.conjugate();
        Ok(Quat::new(c.w / n2, c.x / n2, c.y / n2, c.z / n2))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn neg(&self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Picks the `w >= 0` hemisphere representative of `{q, -q}`.
///
/// At `w == 0` the sign is chosen so the first nonzero of `(x, y, z)` is
/// positive, making the result deterministic.
pub fn canonicalize_quat(q: &Quat) -> Result<Quat> {
    if q.norm_squared() == 0.0 {
        return Err(PoseCamError::InvalidInput("zero quaternion".into()));
    }
    if q.w > 0.0 {
        return Ok(*q);
    }
    if q.w < 0.0 {
        return Ok(q.neg());
    }
    // w == 0: tie rule on the vector part.
    for c in [q.x, q.y, q.z] {
        if c > 0.0 {
            return Ok(*q);
        }
        if c < 0.0 {
            return Ok(q.neg());
        }
    }
    unreachable!("nonzero quaternion with all-zero components");
}

/// Scale-invariant quaternion-to-rotation conversion.
///
/// Uses the `1 / ||q||^2` normalization so any nonzero quaternion maps to a
/// proper rotation matrix.
pub fn quat_to_rotmat(q: &Quat) -> Result<Matrix3<f64>> {
    let n2 = q.norm_squared();
    if n2 == 0.0 {
        return Err(PoseCamError::InvalidInput("zero quaternion".into()));
    }
    let s = 2.0 / n2;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok(Matrix3::new(
        1.0 - s * (y * y + z * z),
        s * (x * y - w * z),
        s * (x * z + w * y),
        s * (x * y + w * z),
        1.0 - s * (x * x + z * z),
        s * (y * z - w * x),
        s * (x * z - w * y),
        s * (y * z + w * x),
        1.0 - s * (x * x + y * y),
    ))
}

/// Camera-to-world rigid pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Quat, translation: Vector3<f64>) -> Self {
        RigidPose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidPose::new(Quat::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidPose::new(Quat::identity(), t)
    }

    pub fn rotate_vec(&self, v: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(quat_to_rotmat(&self.rotation)? * v)
    }

    /// Composition `self ∘ rhs`: apply `rhs` first, then `self`.
    pub fn compose(&self, rhs: &RigidPose) -> Result<RigidPose> {
        Ok(RigidPose::new(
            self.rotation.mul(&rhs.rotation),
            self.rotate_vec(&rhs.translation)? + self.translation,
        ))
    }

    pub fn inverse(&self) -> Result<RigidPose> {
        let rot_inv = self.rotation.inverse()?;
        let r_inv = quat_to_rotmat(&rot_inv)?;
        Ok(RigidPose::new(rot_inv, -(r_inv * self.translation)))
    }
}

/// `a⁻¹ ∘ b`: the motion taking pose `a` to pose `b`.
pub fn relative_pose(a: &RigidPose, b: &RigidPose) -> Result<RigidPose> {
    a.inverse()?.compose(b)
}

/// The 9-D per-frame camera target: translation, quaternion, and the
/// horizontal/vertical field-of-view in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEncoding {
    pub t: Vector3<f64>,
    pub q: Quat,
    pub f_h: f64,
    pub f_w: f64,
}

impl PoseEncoding {
    pub fn new(t: Vector3<f64>, q: Quat, f_h: f64, f_w: f64) -> Self {
        PoseEncoding { t, q, f_h, f_w }
    }

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.t.x, self.t.y, self.t.z, self.q.w, self.q.x, self.q.y, self.q.z, self.f_h,
            self.f_w,
        ]
    }

    pub fn from_array(a: &[f64; 9]) -> Self {
        PoseEncoding {
            t: Vector3::new(a[0], a[1], a[2]),
            q: Quat::new(a[3], a[4], a[5], a[6]),
            f_h: a[7],
            f_w: a[8],
        }
    }
}

/// Ordered sequence of timestamped camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<(f64, RigidPose)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, RigidPose)>) -> Result<Self> {
        if poses.is_empty() {
            return Err(PoseCamError::InvalidInput(
                "trajectory must contain at least one pose".into(),
            ));
        }
        for w in poses.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PoseCamError::Format(format!(
                    "timestamps not strictly increasing: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Trajectory { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[(f64, RigidPose)] {
        &self.poses
    }

    pub fn pose(&self, i: usize) -> &RigidPose {
        &self.poses[i].1
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.poses.iter().map(|(t, _)| *t)
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|(_, p)| p.translation).collect()
    }

    /// Keeps only the poses at the given (sorted, in-range) frame indices.
    pub fn subsample(&self, indices: &[usize]) -> Result<Trajectory> {
        let poses = indices
            .iter()
            .map(|&i| {
                self.poses.get(i).copied().ok_or_else(|| {
                    PoseCamError::InvalidInput(format!("frame index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(poses)
    }
}

/// Re-expresses every pose in the coordinate system of the first camera:
/// output pose i is `(pose_1)⁻¹ ∘ pose_i`.
pub fn to_first_frame_coords(traj: &Trajectory) -> Result<Trajectory> {
    let first_inv = traj.pose(0).inverse()?;
    let poses = traj
        .poses()
        .iter()
        .map(|(ts, p)| Ok((*ts, first_inv.compose(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).amax() < tol
    }

    #[test]
    fn canonicalize_flips_negative_w() {
        let q = Quat::new(-0.5, 0.5, 0.5, 0.5);
        let c = canonicalize_quat(&q).unwrap();
        assert_eq!(c, Quat::new(0.5, -0.5, -0.5, -0.5));
    }

    #[test]
    fn canonicalize_identity_noop() {
        let q = Quat::identity();
        assert_eq!(canonicalize_quat(&q).unwrap(), q);
    }

    #[test]
    fn canonicalize_w_zero_tie_rule() {
        let q = Quat::new(0.0, 0.0, 0.0, -1.0);
        assert_eq!(canonicalize_quat(&q).unwrap(), Quat::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn canonicalize_zero_quaternion_errors() {
        assert!(canonicalize_quat(&Quat::new(0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rotmat_identity() {
        let r = quat_to_rotmat(&Quat::identity()).unwrap();
        assert!(mat_close(&r, &Matrix3::identity(), 1e-15));
        // scale invariance
        let r2 = quat_to_rotmat(&Quat::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(mat_close(&r2, &Matrix3::identity(), 1e-15));
    }

    #[test]
    fn rotmat_z_180() {
        // Oracle: axis-angle 180 degrees about z is diag(-1,-1,1).
        let r = quat_to_rotmat(&Quat::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert!(mat_close(&r, &expected, 1e-15));
    }

    #[test]
    fn rotmat_matches_axis_angle_oracle() {
        // Rodrigues formula as the independent route.
        let axis = Vector3::new(0.3, -0.5, 0.81).normalize();
        let angle = 1.234_f64;
        let q = Quat::from_axis_angle(axis, angle);
        let k = Matrix3::new(
            0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
        );
        let rodrigues = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        let r = quat_to_rotmat(&q).unwrap();
        assert!(mat_close(&r, &rodrigues, 1e-12));
    }

    #[test]
    fn first_frame_coords_translations() {
        let traj = Trajectory::new(vec![
            (0.0, RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
            (1.0, RigidPose::from_translation(Vector3::new(3.0, 0.0, 0.0))),
        ])
        .unwrap();
        let out = to_first_frame_coords(&traj).unwrap();
        assert_abs_diff_eq!(out.pose(0).translation, Vector3::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            out.pose(1).translation,
            Vector3::new(2.0, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn first_frame_coords_identity_first_pose_unchanged() {
        let traj = Trajectory::new(vec![
            (0.0, RigidPose::identity()),
            (
                1.0,
                RigidPose::new(
                    Quat::from_axis_angle(Vector3::z(), 0.5),
                    Vector3::new(1.0, 2.0, 3.0),
                ),
            ),
        ])
        .unwrap();
        let out = to_first_frame_coords(&traj).unwrap();
        assert_eq!(out, traj);
    }

    #[test]
    fn first_frame_coords_identical_poses_become_identity() {
        let p = RigidPose::new(
            Quat::from_axis_angle(Vector3::x(), 0.7),
            Vector3::new(4.0, 5.0, 6.0),
        );
        let traj = Trajectory::new(vec![(0.0, p), (1.0, p)]).unwrap();
        let out = to_first_frame_coords(&traj).unwrap();
        for (_, pose) in out.poses() {
            assert_abs_diff_eq!(pose.translation, Vector3::zeros(), epsilon = 1e-12);
            let r = quat_to_rotmat(&pose.rotation).unwrap();
            assert!(mat_close(&r, &Matrix3::identity(), 1e-12));
        }
    }

    #[test]
    fn relative_pose_basics() {
        let p = RigidPose::new(
            Quat::from_axis_angle(Vector3::y(), 0.3),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let rel = relative_pose(&p, &p).unwrap();
        assert_abs_diff_eq!(rel.translation, Vector3::zeros(), epsilon = 1e-12);

        let b = RigidPose::new(
            Quat::from_axis_angle(Vector3::z(), 1.1),
            Vector3::new(0.0, 1.0, 2.0),
        );
        let rel = relative_pose(&RigidPose::identity(), &b).unwrap();
        assert_abs_diff_eq!(rel.translation, b.translation, epsilon = 1e-12);

        let a = RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let c = RigidPose::from_translation(Vector3::new(1.0, 1.0, 0.0));
        let rel = relative_pose(&a, &c).unwrap();
        assert_abs_diff_eq!(rel.translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn trajectory_rejects_non_increasing_timestamps() {
        assert!(Trajectory::new(vec![
            (1.0, RigidPose::identity()),
            (1.0, RigidPose::identity()),
        ])
        .is_err());
        assert!(Trajectory::new(vec![]).is_err());
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter_map("nonzero", |(w, x, y, z)| {
                let q = Quat::new(w, x, y, z);
                (q.norm() > 1e-3).then_some(q)
            })
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent_and_rotation_preserving(q in arb_quat()) {
            let c = canonicalize_quat(&q).unwrap();
            let cc = canonicalize_quat(&c).unwrap();
            prop_assert_eq!(c, cc);
            let r1 = quat_to_rotmat(&q).unwrap();
            let r2 = quat_to_rotmat(&c).unwrap();
            prop_assert!(mat_close(&r1, &r2, 1e-12));
        }

        #[test]
        fn rotmat_scale_invariant(q in arb_quat(), c in prop::sample::select(vec![-3.0, -0.5, 0.1, 2.0, 7.5])) {
            let scaled = Quat::new(q.w * c, q.x * c, q.y * c, q.z * c);
            let r1 = quat_to_rotmat(&q).unwrap();
            let r2 = quat_to_rotmat(&scaled).unwrap();
            prop_assert!(mat_close(&r1, &r2, 1e-12));
        }

        #[test]
        fn rotmat_is_proper_rotation(q in arb_quat()) {
            let r = quat_to_rotmat(&q).unwrap();
            prop_assert!(mat_close(&(r.transpose() * r), &Matrix3::identity(), 1e-9));
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn relative_pose_roundtrip(
            qa in arb_quat(), qb in arb_quat(),
            ta in prop::array::uniform3(-5.0f64..5.0),
            tb in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let a = RigidPose::new(qa.normalized().unwrap(), Vector3::from(ta));
            let b = RigidPose::new(qb.normalized().unwrap(), Vector3::from(tb));
            let rel = relative_pose(&a, &b).unwrap();
            let back = a.compose(&rel).unwrap();
            prop_assert!((back.translation - b.translation).norm() < 1e-12);
            let rb = quat_to_rotmat(&b.rotation).unwrap();
            let rback = quat_to_rotmat(&back.rotation).unwrap();
            prop_assert!(mat_close(&rb, &rback, 1e-12));
        }
    }

    #[test]
    fn to_first_frame_coords_idempotent() {
        let traj = Trajectory::new(vec![
            (
                0.0,
                RigidPose::new(
                    Quat::from_axis_angle(Vector3::x(), 0.4),
                    Vector3::new(1.0, 2.0, 3.0),
                ),
            ),
            (
                1.0,
                RigidPose::new(
                    Quat::from_axis_angle(Vector3::z(), -0.9),
                    Vector3::new(-1.0, 0.5, 2.0),
                ),
            ),
        ])
        .unwrap();
        let once = to_first_frame_coords(&traj).unwrap();
        let twice = to_first_frame_coords(&once).unwrap();
        for ((_, a), (_, b)) in once.poses().iter().zip(twice.poses()) {
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
    }
}

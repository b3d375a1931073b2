//! Pinhole cameras, camera-to-world poses and ray generation.
//!
//! Cameras look down `-z` in their own frame with `+y` up, the convention of
//! the synthetic-scene transform files.

use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }

    pub fn y(self) -> f64 {
        self.0[1]
    }

    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        Vec3([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3([
            [c0.0[0], c1.0[0], c2.0[0]],
            [c0.0[1], c1.0[1], c2.0[1]],
            [c0.0[2], c1.0[2], c2.0[2]],
        ])
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    /// Largest entry of `|M^T M - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mtm = self.transpose().mul_mat(self);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((mtm.0[i][j] - target).abs());
            }
        }
        worst
    }

    /// Rotation of `angle` radians about the unit `axis` (Rodrigues).
    pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let [x, y, z] = axis.0;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3([
            [c + t * x * x, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, c + t * y * y, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, c + t * z * z],
        ])
    }

    /// Geodesic distance in radians between two rotations.
    pub fn angle_between(&self, other: &Mat3) -> f64 {
        let rel = self.transpose().mul_mat(other);
        ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, focal: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image extent must be >= 1, got {width}x{height}"
            )));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::invalid(format!(
                "focal length must be > 0, got {focal}"
            )));
        }
        Ok(Self {
            width,
            height,
            focal,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Pinhole intrinsics from a horizontal field of view.
pub fn intrinsics_from_fov(
    camera_angle_x: f64,
    width: usize,
    height: usize,
) -> Result<CameraIntrinsics> {
    if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
        return Err(Error::invalid(format!(
            "camera_angle_x must lie in (0, pi), got {camera_angle_x}"
        )));
    }
    let focal = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
    CameraIntrinsics::new(width, height, focal)
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub const POSE_TOLERANCE: f64 = 1e-9;

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    /// Validates that `rotation` is a proper rotation within [`POSE_TOLERANCE`].
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Pose {
            rotation,
            translation,
        };
        pose.validate(POSE_TOLERANCE)?;
        Ok(pose)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let err = self.rotation.orthonormality_error();
        let det = self.rotation.determinant();
        if !(err <= tol) || !((det - 1.0).abs() <= tol) || !self.translation.is_finite() {
            return Err(Error::invalid(format!(
                "pose rotation is not a proper rotation (orthonormality error {err:e}, det {det})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` resolving the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
        let forward = (target - eye).normalized();
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            // up parallel to the viewing direction; pick any perpendicular
            let alt = if forward.z().abs() < 0.9 {
                Vec3::new(0.0, 0.0, 1.0)
            } else {
                Vec3::new(1.0, 0.0, 0.0)
            };
            right = forward.cross(alt);
        }
        let right = right.normalized();
        let back = -forward;
        let cam_up = back.cross(right);
        Pose {
            rotation: Mat3::from_columns(right, cam_up, back),
            translation: eye,
        }
    }

    /// Upper 3x4 of a row-major 4x4 camera-to-world matrix.
    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Pose {
        Pose {
            rotation: Mat3([
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ]),
            translation: Vec3([m[0][3], m[1][3], m[2][3]]),
        }
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation.0;
        let t = &self.translation.0;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Gram-Schmidt on the rotation columns.
    pub fn orthonormalized(&self) -> Pose {
        let c0 = self.rotation.column(0).normalized();
        let c1 = self.rotation.column(1);
        let c1 = (c1 - c0 * c0.dot(c1)).normalized();
        let c2 = c0.cross(c1);
        Pose {
            rotation: Mat3::from_columns(c0, c1, c2),
            translation: self.translation,
        }
    }

    /// World-space direction the camera looks along.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Source pixel, when the ray comes from an image.
    pub pixel: Option<(f64, f64)>,
}

/// Camera-frame direction through pixel `(px, py)`, not normalized.
pub fn camera_direction(intr: &CameraIntrinsics, px: f64, py: f64) -> Vec3 {
    Vec3::new(
        (px + 0.5 - intr.width as f64 * 0.5) / intr.focal,
        -(py + 0.5 - intr.height as f64 * 0.5) / intr.focal,
        -1.0,
    )
}

pub fn pixel_to_ray(intr: &CameraIntrinsics, pose: &Pose, px: f64, py: f64) -> Ray {
    let d = pose
        .rotation
        .mul_vec(camera_direction(intr, px, py))
        .normalized();
    Ray {
        origin: pose.translation,
        direction: d,
        pixel: Some((px, py)),
    }
}

/// Uniformly distributed unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Random rotation with a uniform axis and an angle uniform in
/// `[-max_angle, max_angle]` degrees.
pub fn random_small_rotation<R: Rng + ?Sized>(max_angle_deg: f64, rng: &mut R) -> Mat3 {
    let axis = random_unit_vector(rng);
    let u: f64 = rng.random_range(-1.0..=1.0);
    Mat3::axis_angle(axis, u * max_angle_deg.to_radians())
}

/// Rotates the camera about its own center; the translation is untouched.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose, max_angle_deg: f64, rng: &mut R) -> Pose {
    let delta = random_small_rotation(max_angle_deg.max(0.0), rng);
    Pose {
        rotation: pose.rotation.mul_mat(&delta),
        translation: pose.translation,
    }
}

/// Default angle for [`JitterReaim`].
pub const DEFAULT_UNSEEN_ANGLE: f64 = 30.0;

/// Source of camera poses for rays without ground truth.
pub trait UnseenPoseSampler {
    fn sample(&self, train_poses: &[Pose], rng: &mut dyn rand::RngCore) -> Pose;
}

/// Orbits a random training camera about the scene origin by a random
/// rotation of up to `max_angle_deg`, then aims it back at the origin.
/// The camera-to-origin distance is preserved.
#[derive(Clone, Copy, Debug)]
pub struct JitterReaim {
    pub max_angle_deg: f64,
}

impl Default for JitterReaim {
    fn default() -> Self {
        Self {
            max_angle_deg: DEFAULT_UNSEEN_ANGLE,
        }
    }
}

impl UnseenPoseSampler for JitterReaim {
    fn sample(&self, train_poses: &[Pose], rng: &mut dyn rand::RngCore) -> Pose {
        assert!(
            !train_poses.is_empty(),
            "unseen-pose sampler needs a training pose"
        );
        let base = train_poses[rng.random_range(0..train_poses.len())];
        let delta = random_small_rotation(self.max_angle_deg, rng);
        let eye = delta.mul_vec(base.translation);
        let up = delta.mul_vec(base.rotation.column(1));
        Pose::look_at(eye, Vec3::ZERO, up)
    }
}

pub fn sample_unseen_pose<R: rand::RngCore>(
    train_poses: &[Pose],
    max_angle_deg: f64,
    rng: &mut R,
) -> Result<Pose> {
    if train_poses.is_empty() {
        return Err(Error::invalid(
            "sample_unseen_pose needs at least one training pose",
        ));
    }
    Ok(JitterReaim { max_angle_deg }.sample(train_poses, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        for k in 0..3 {
            assert!((a.0[k] - b.0[k]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn focal_from_fov() {
        let i = intrinsics_from_fov(std::f64::consts::FRAC_PI_2, 800, 800).unwrap();
        assert!((i.focal - 400.0).abs() < 1e-9);
        let i = intrinsics_from_fov(std::f64::consts::FRAC_PI_3, 400, 400).unwrap();
        assert!((i.focal - 200.0 / (std::f64::consts::PI / 6.0).tan()).abs() < 1e-12);
        assert!((i.focal - 346.4102).abs() < 1e-4);
        let i = intrinsics_from_fov(std::f64::consts::FRAC_PI_2, 1, 1).unwrap();
        assert!((i.focal - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fov_out_of_range_rejected() {
        assert!(intrinsics_from_fov(0.0, 10, 10).is_err());
        assert!(intrinsics_from_fov(std::f64::consts::PI, 10, 10).is_err());
        assert!(intrinsics_from_fov(-0.3, 10, 10).is_err());
    }

    #[test]
    fn center_pixel_looks_down_minus_z() {
        let intr = CameraIntrinsics::new(5, 5, 3.0).unwrap();
        let r = pixel_to_ray(&intr, &Pose::IDENTITY, 2.0, 2.0);
        assert_vec_close(r.direction, Vec3::new(0.0, 0.0, -1.0), 1e-15);
        assert_eq!(r.origin, Vec3::ZERO);
    }

    #[test]
    fn one_focal_right_is_45_degrees() {
        let intr = CameraIntrinsics::new(5, 5, 3.0).unwrap();
        let r = pixel_to_ray(&intr, &Pose::IDENTITY, 2.0 + 3.0, 2.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_vec_close(r.direction, Vec3::new(s, 0.0, -s), 1e-15);
    }

    #[test]
    fn half_turn_about_y_flips_view() {
        let intr = CameraIntrinsics::new(5, 5, 3.0).unwrap();
        let pose = Pose::new(
            Mat3::axis_angle(Vec3::new(0.0, 1.0, 0.0), std::f64::consts::PI),
            Vec3::ZERO,
        )
        .unwrap();
        let r = pixel_to_ray(&intr, &pose, 2.0, 2.0);
        assert_vec_close(r.direction, Vec3::new(0.0, 0.0, 1.0), 1e-12);
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose::look_at(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
        );
        let p = perturb_pose(&pose, 0.0, &mut rng);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.rotation.0[i][j] - pose.rotation.0[i][j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn perturbation_angle_bounded_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = Pose::look_at(
            Vec3::new(0.0, -4.0, 1.0),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
        );
        let mut max_seen = 0.0f64;
        let mut min_seen = f64::INFINITY;
        for _ in 0..10_000 {
            let p = perturb_pose(&pose, 5.0, &mut rng);
            let angle = pose.rotation.angle_between(&p.rotation).to_degrees();
            assert!(angle <= 5.0 + 1e-9);
            assert_eq!(p.translation, pose.translation);
            assert!(p.validate(1e-9).is_ok());
            max_seen = max_seen.max(angle);
            min_seen = min_seen.min(angle);
        }
        assert!(max_seen > 4.9, "largest angle {max_seen}");
        assert!(min_seen < 0.1, "smallest angle {min_seen}");
    }

    fn inward_poses() -> Vec<Pose> {
        [
            Vec3::new(4.0, 0.0, 1.0),
            Vec3::new(0.0, 4.0, 1.5),
            Vec3::new(-4.0, 0.0, 0.5),
            Vec3::new(0.0, -4.0, 2.0),
        ]
        .into_iter()
        .map(|e| Pose::look_at(e, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)))
        .collect()
    }

    #[test]
    fn unseen_sampler_degenerate_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Not aimed at the origin: re-aiming must fix that.
        let pose = Pose::look_at(
            Vec3::new(0.0, 0.0, 4.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        );
        let s = sample_unseen_pose(&[pose], 0.0, &mut rng).unwrap();
        assert!((s.translation.norm() - 4.0).abs() < 1e-9);
        assert_vec_close(s.translation, pose.translation, 1e-12);
        assert_vec_close(s.forward(), Vec3::new(0.0, 0.0, -1.0), 1e-12);
    }

    #[test]
    fn unseen_sampler_preserves_distance_and_aim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses = inward_poses();
        for _ in 0..1000 {
            let s = sample_unseen_pose(&poses, DEFAULT_UNSEEN_ANGLE, &mut rng).unwrap();
            let dist = s.translation.norm();
            assert!(poses
                .iter()
                .any(|p| (p.translation.norm() - dist).abs() < 1e-9));
            let to_origin = (-s.translation).normalized();
            let angle = s
                .forward()
                .dot(to_origin)
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            assert!(angle < 1.0);
            assert!(s.validate(1e-9).is_ok());
        }
    }

    #[test]
    fn empty_pose_set_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_unseen_pose(&[], 10.0, &mut rng).is_err());
    }

    #[test]
    fn unit_directions_for_many_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let intr = CameraIntrinsics::new(64, 48, 55.0).unwrap();
        for _ in 0..100_000 {
            let pose = Pose {
                rotation: random_small_rotation(180.0, &mut rng),
                translation: random_unit_vector(&mut rng) * 3.0,
            };
            let px = rng.random_range(0.0..64.0);
            let py = rng.random_range(0.0..48.0);
            let r = pixel_to_ray(&intr, &pose, px, py);
            assert!((r.direction.norm() - 1.0).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn perturbation_keeps_rotation_proper(seed in any::<u64>(), angle in 0.0f64..45.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Pose { rotation: random_small_rotation(180.0, &mut rng), translation: Vec3::new(1.0, 2.0, 3.0) };
            let p = perturb_pose(&base, angle, &mut rng);
            prop_assert!(p.rotation.orthonormality_error() <= 1e-9);
            prop_assert!((p.rotation.determinant() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn ray_generation_is_rotation_equivariant(seed in any::<u64>(), px in 0.0f64..32.0, py in 0.0f64..32.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let intr = CameraIntrinsics::new(32, 32, 20.0).unwrap();
            let pose = Pose { rotation: random_small_rotation(180.0, &mut rng), translation: Vec3::new(0.5, -1.0, 2.0) };
            let local = pixel_to_ray(&intr, &Pose::IDENTITY, px, py);
            let world = pixel_to_ray(&intr, &pose, px, py);
            let mapped = pose.rotation.mul_vec(local.direction);
            for k in 0..3 {
                prop_assert!((mapped.0[k] - world.direction.0[k]).abs() < 1e-12);
            }
            prop_assert_eq!(world.origin, pose.translation);
        }
    }
}

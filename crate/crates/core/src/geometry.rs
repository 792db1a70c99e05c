//! Rigid transforms, pinhole projection and rotation metrics shared by the
//! detectors, the pose solver and the synthetic scene generator.
//!
//! All geometry is computed in double precision. Rotations are stored as
//! 3x3 matrices and re-orthonormalized (polar decomposition) after any
//! numerical construction, since least-squares solvers emit matrices that
//! are only approximately orthonormal.

use nalgebra as na;
use serde::{Deserialize, Serialize};

pub type Vec3 = na::Vector3<f64>;
pub type Mat3 = na::Matrix3<f64>;
/// A 3D point in meters.
pub type Point3 = na::Point3<f64>;
/// A pixel position (u, v) in image coordinates.
pub type Pixel2 = na::Point2<f64>;

/// Points closer to the camera plane than this are treated as behind it.
pub const Z_MIN: f64 = 1e-6;

/// Rigid camera pose mapping map-frame coordinates to camera coordinates:
/// `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSE3 {
    rotation: Mat3,
    translation: Vec3,
}

impl PoseSE3 {
    /// Builds a pose, projecting `rotation` back onto SO(3).
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Applies the pose: world point to camera frame.
    pub fn transform(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `compose(a, b)` maps `x` to `a(b(x))`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn invert(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3::new(rt, -(rt * self.translation))
    }

    /// Camera center in the map frame (`-R^T t`).
    pub fn camera_center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Row-major `[R | t]` flattening (12 values), the trajectory file layout.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let rotation = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vec3::new(v[3], v[7], v[11]);
        PoseSE3::new(rotation, translation)
    }
}

/// Projects a (possibly non-orthonormal) matrix onto SO(3) via SVD.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = na::SVD::new(*m, true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to land on a proper rotation.
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive: fx={} fy={}", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(format!("principal point cx={} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(format!("principal point cy={} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    pub fn contains(&self, px: &Pixel2) -> bool {
        px.x >= 0.0 && px.x <= self.width as f64 - 1.0 && px.y >= 0.0 && px.y <= self.height as f64 - 1.0
    }
}

/// Projects a world point through `pose` and `k`. Returns `None` when the
/// point is behind the camera (`z_cam <= Z_MIN`); callers skip those.
pub fn project(point: &Point3, pose: &PoseSE3, k: &CameraIntrinsics) -> Option<Pixel2> {
    let pc = pose.transform(point);
    if pc.z <= Z_MIN {
        return None;
    }
    Some(Pixel2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// World point that projects to `px` at camera depth `depth`.
pub fn back_project(px: &Pixel2, depth: f64, pose: &PoseSE3, k: &CameraIntrinsics) -> Point3 {
    let pc = Vec3::new(
        (px.x - k.cx) / k.fx * depth,
        (px.y - k.cy) / k.fy * depth,
        depth,
    );
    let inv = pose.invert();
    Point3::from(inv.rotation * pc + inv.translation)
}

/// Geodesic angle between two rotations in degrees:
/// `arccos((trace(Ra^T Rb) - 1) / 2)` with the cosine clamped to [-1, 1].
///
/// Evaluated as `atan2(sin, cos)` using the skew part of the relative
/// rotation for the sine; equal to the arccos form in exact arithmetic but
/// well-conditioned near 0 and 180 degrees, where arccos loses ~8 digits.
pub fn rotation_error_deg(ra: &Mat3, rb: &Mat3) -> f64 {
    let m = ra.transpose() * rb;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm()
        / 2.0;
    s.atan2(c).to_degrees()
}

pub fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pose of a camera sitting at `center` looking along `forward` (world frame),
/// with image x to the right and image y downward relative to world `up`.
pub fn look_at_pose(center: &Point3, forward: &Vec3, up: &Vec3) -> PoseSE3 {
    let z = forward.normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let translation = -(rotation * center.coords);
    PoseSE3::new(rotation, translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn max_abs(m: &Mat3) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn project_identity_on_axis() {
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 2, height: 2 };
        let px = project(&Point3::new(0.0, 0.0, 1.0), &PoseSE3::identity(), &k).unwrap();
        assert_abs_diff_eq!(px.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 2, height: 2 };
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &PoseSE3::identity(), &k).is_none());
    }

    #[test]
    fn project_hand_computed() {
        let k = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 64.0, width: 128, height: 128 };
        let px = project(&Point3::new(2.0, 1.0, 4.0), &PoseSE3::identity(), &k).unwrap();
        assert_abs_diff_eq!(px.x, 114.0, epsilon = 1e-12);
        assert_abs_diff_eq!(px.y, 89.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_error_examples() {
        let i = Mat3::identity();
        assert_abs_diff_eq!(rotation_error_deg(&i, &i), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rotation_error_deg(&i, &rot_z(90.0)), 90.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rotation_error_deg(&rot_x(10.0), &rot_x(17.0)), 7.0, epsilon = 1e-9);
    }

    #[test]
    fn compose_examples() {
        let p = PoseSE3::new(rot_z(30.0), Vec3::new(1.0, 0.0, 0.0));
        let q = PoseSE3::identity().compose(&p);
        assert!(max_abs(&(q.rotation - p.rotation)) < 1e-12);

        let a = PoseSE3::new(rot_z(30.0), Vec3::new(1.0, 0.0, 0.0));
        let b = PoseSE3::new(rot_z(60.0), Vec3::zeros());
        let c = a.compose(&b);
        assert!(max_abs(&(c.rotation - rot_z(90.0))) < 1e-12);
    }

    #[test]
    fn orthonormalize_recovers_rotation() {
        let noisy = rot_z(33.0) * 1.001 + Mat3::new(0.0, 1e-4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let r = orthonormalize(&noisy);
        assert!(max_abs(&(r.transpose() * r - Mat3::identity())) < 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (
            -180.0f64..180.0,
            -89.0f64..89.0,
            -180.0f64..180.0,
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_map(|(a, b, c, t)| {
                PoseSE3::new(rot_z(a) * rot_y(b) * rot_x(c), Vec3::new(t[0], t[1], t[2]))
            })
    }

    proptest! {
        #[test]
        fn invert_round_trip(p in arb_pose()) {
            let e = p.invert().compose(&p);
            prop_assert!(max_abs(&(e.rotation - Mat3::identity())) <= 1e-9);
            prop_assert!(e.translation.amax() <= 1e-9);
        }

        #[test]
        fn projection_back_projection_consistent(
            p in arb_pose(),
            u in 1.0f64..511.0,
            v in 1.0f64..383.0,
            d in 0.5f64..80.0,
        ) {
            let k = CameraIntrinsics { fx: 320.0, fy: 320.0, cx: 256.0, cy: 192.0, width: 512, height: 384 };
            let world = back_project(&Pixel2::new(u, v), d, &p, &k);
            let px = project(&world, &p, &k).unwrap();
            prop_assert!((px.x - u).abs() <= 1e-9);
            prop_assert!((px.y - v).abs() <= 1e-9);
        }

        #[test]
        fn rotation_error_symmetric(a in arb_pose(), b in arb_pose()) {
            let e1 = rotation_error_deg(a.rotation(), b.rotation());
            let e2 = rotation_error_deg(b.rotation(), a.rotation());
            prop_assert!((e1 - e2).abs() < 1e-7);
            prop_assert!(rotation_error_deg(a.rotation(), a.rotation()) < 1e-7);
        }
    }
}

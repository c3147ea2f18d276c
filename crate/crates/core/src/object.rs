//! Object primitives, their signed distance functions and bounding-box keypoints.

use nalgebra::{Isometry3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply, Pose};

pub const NUM_KEYPOINTS: usize = 8;
pub const CONTEXT_DIM: usize = 3 * NUM_KEYPOINTS;

/// Sign pattern of the canonical corner ordering: bottom face counterclockwise
/// from (−x, −y), then the top face in the same order.
pub const CORNER_SIGNS: [[f64; 3]; NUM_KEYPOINTS] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Cuboid,
    Cylinder,
    Cone,
    Sphere,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::Cuboid,
        ObjectKind::Cylinder,
        ObjectKind::Cone,
        ObjectKind::Sphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Cuboid => "cuboid",
            ObjectKind::Cylinder => "cylinder",
            ObjectKind::Cone => "cone",
            ObjectKind::Sphere => "sphere",
        }
    }

    /// Number of meaningful entries in `ObjectSpec::dims`.
    pub fn dim_count(self) -> usize {
        match self {
            ObjectKind::Cuboid => 3,
            ObjectKind::Cylinder | ObjectKind::Cone => 2,
            ObjectKind::Sphere => 1,
        }
    }
}

/// Geometry of a primitive in its own frame, centered on its bounding box.
///
/// `dims` holds (dx, dy, dz) for cuboids, (radius, height) for cylinders and
/// cones (cone apex points to +z), and (radius) for spheres; unused entries
/// are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ObjectKind,
    pub dims: [f64; 3],
}

impl Shape {
    pub fn half_extents(&self) -> Vector3<f64> {
        let d = self.dims;
        match self.kind {
            ObjectKind::Cuboid => Vector3::new(d[0], d[1], d[2]) * 0.5,
            ObjectKind::Cylinder | ObjectKind::Cone => Vector3::new(d[0], d[0], d[1] * 0.5),
            ObjectKind::Sphere => Vector3::repeat(d[0]),
        }
    }

    /// Signed distance from a point in the object frame to the surface.
    pub fn sdf_local(&self, p: &Vector3<f64>) -> f64 {
        let d = self.dims;
        match self.kind {
            ObjectKind::Cuboid => {
                let h = self.half_extents();
                let q = p.abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            ObjectKind::Cylinder => {
                let q = Vector2::new(p.xy().norm() - d[0], p.z.abs() - d[1] * 0.5);
                q.x.max(q.y).min(0.0) + q.map(|v| v.max(0.0)).norm()
            }
            ObjectKind::Cone => capped_cone_sdf(p, d[1] * 0.5, d[0], 0.0),
            ObjectKind::Sphere => p.norm() - d[0],
        }
    }

    /// Outward unit normal of the distance field at `p` (object frame).
    pub fn normal_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        const EPS: f64 = 1e-6;
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[k] += EPS;
            b[k] -= EPS;
            g[k] = self.sdf_local(&a) - self.sdf_local(&b);
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::z()
        }
    }
}

/// Exact distance to a cone frustum with axis z, half height `h`, bottom
/// radius `r1` and top radius `r2`.
fn capped_cone_sdf(p: &Vector3<f64>, h: f64, r1: f64, r2: f64) -> f64 {
    let q = Vector2::new(p.xy().norm(), p.z);
    let k1 = Vector2::new(r2, h);
    let k2 = Vector2::new(r2 - r1, 2.0 * h);
    let cap_r = if q.y < 0.0 { r1 } else { r2 };
    let ca = Vector2::new(q.x - q.x.min(cap_r), q.y.abs() - h);
    let t = ((k1 - q).dot(&k2) / k2.norm_squared()).clamp(0.0, 1.0);
    let cb = q - k1 + k2 * t;
    let s = if cb.x < 0.0 && ca.y < 0.0 { -1.0 } else { 1.0 };
    s * ca.norm_squared().min(cb.norm_squared()).sqrt()
}

/// An object instance: primitive, physical parameters and placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub dims: [f64; 3],
    /// kg
    pub mass: f64,
    /// Coulomb friction coefficient between fingertips and object.
    pub friction: f64,
    pub pose: Pose,
}

impl ObjectSpec {
    pub fn new(kind: ObjectKind, dims: [f64; 3], pose: Pose) -> Self {
        ObjectSpec {
            kind,
            dims,
            mass: 0.2,
            friction: 1.0,
            pose,
        }
    }

    pub fn cuboid(dx: f64, dy: f64, dz: f64, pose: Pose) -> Self {
        Self::new(ObjectKind::Cuboid, [dx, dy, dz], pose)
    }

    pub fn cylinder(radius: f64, height: f64, pose: Pose) -> Self {
        Self::new(ObjectKind::Cylinder, [radius, height, 0.0], pose)
    }

    pub fn cone(radius: f64, height: f64, pose: Pose) -> Self {
        Self::new(ObjectKind::Cone, [radius, height, 0.0], pose)
    }

    pub fn sphere(radius: f64, pose: Pose) -> Self {
        Self::new(ObjectKind::Sphere, [radius, 0.0, 0.0], pose)
    }

    pub fn shape(&self) -> Shape {
        Shape {
            kind: self.kind,
            dims: self.dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.dim_count();
        if self.dims[..n].iter().any(|&d| !(d > 0.0)) {
            return Err(Error::input(format!("{} dimensions must be positive", self.kind.name())));
        }
        if !(self.mass > 0.0) {
            return Err(Error::input("object mass must be positive"));
        }
        if !(self.friction >= 0.0) {
            return Err(Error::input("object friction must be non-negative"));
        }
        self.pose.validate()
    }

    /// Height of the bounding box (m).
    pub fn height(&self) -> f64 {
        2.0 * self.shape().half_extents().z
    }
}

/// Signed distance from a world-frame point to a shape placed at `pose`.
pub fn sdf_world(shape: &Shape, pose: &Isometry3<f64>, p: &Vector3<f64>) -> f64 {
    let local = pose.inverse_transform_point(&(*p).into()).coords;
    shape.sdf_local(&local)
}

/// Outward world-frame normal of a placed shape at `p`.
pub fn normal_world(shape: &Shape, pose: &Isometry3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let local = pose.inverse_transform_point(&(*p).into()).coords;
    pose.rotation * shape.normal_local(&local)
}

/// The eight bounding-box corners forming the 24-dimensional context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub corners: [Vector3<f64>; NUM_KEYPOINTS],
}

impl Keypoints {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != CONTEXT_DIM {
            return Err(Error::Dimension {
                what: "keypoint context",
                expected: CONTEXT_DIM,
                got: v.len(),
            });
        }
        Ok(Keypoints {
            corners: std::array::from_fn(|i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])),
        })
    }

    pub fn to_array(&self) -> [f64; CONTEXT_DIM] {
        let mut out = [0.0; CONTEXT_DIM];
        for (i, c) in self.corners.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(c.as_slice());
        }
        out
    }

    /// Mean of the four top-face corners: the palm approach target.
    pub fn top_face_center(&self) -> Vector3<f64> {
        self.corners[4..].iter().sum::<Vector3<f64>>() / 4.0
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.corners.iter().sum::<Vector3<f64>>() / NUM_KEYPOINTS as f64
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Keypoints {
        Keypoints {
            corners: self.corners.map(|c| c + t),
        }
    }

    /// Applies a rigid transform to every corner.
    pub fn transformed(&self, iso: &Isometry3<f64>) -> Keypoints {
        Keypoints {
            corners: self.corners.map(|c| apply(iso, &c)),
        }
    }

    /// Center and axis-angle orientation recovered from the box edges; the
    /// reduced object description used by the pose-context ablation.
    pub fn center_pose_vector(&self) -> [f64; 6] {
        let c = self.centroid();
        let ex = (self.corners[1] - self.corners[0]) + (self.corners[2] - self.corners[3]);
        let ey = (self.corners[3] - self.corners[0]) + (self.corners[2] - self.corners[1]);
        let rot = frame_from_edges(&ex, &ey);
        let aa = rot.scaled_axis();
        [c.x, c.y, c.z, aa.x, aa.y, aa.z]
    }
}

fn frame_from_edges(ex: &Vector3<f64>, ey: &Vector3<f64>) -> nalgebra::UnitQuaternion<f64> {
    use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
    let x = ex.try_normalize(1e-12).unwrap_or_else(Vector3::x);
    let y_raw = ey - x * x.dot(ey);
    let y = y_raw.try_normalize(1e-12).unwrap_or_else(|| x.cross(&Vector3::z()).normalize());
    let z = x.cross(&y);
    let m = Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Bounding-box corners of the object at its pose, in canonical order.
pub fn compute_keypoints(spec: &ObjectSpec) -> Keypoints {
    let h = spec.shape().half_extents();
    let iso = spec.pose.isometry_unchecked();
    Keypoints {
        corners: CORNER_SIGNS.map(|s| apply(&iso, &Vector3::new(s[0] * h.x, s[1] * h.y, s[2] * h.z))),
    }
}

/// Independent zero-mean Gaussian perturbation of every keypoint coordinate.
pub fn add_keypoint_noise<R: Rng + ?Sized>(k: &Keypoints, sigma: f64, rng: &mut R) -> Result<Keypoints> {
    if !(sigma >= 0.0) {
        return Err(Error::input(format!("keypoint noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(*k);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::input(e.to_string()))?;
    Ok(Keypoints {
        corners: k.corners.map(|c| c + Vector3::from_fn(|_, _| normal.sample(rng))),
    })
}

/// Shifts all keypoints by one Gaussian translation (a biased pose estimate).
/// Returns the shifted keypoints and the offset.
pub fn add_pose_offset<R: Rng + ?Sized>(k: &Keypoints, sigma: f64, rng: &mut R) -> Result<(Keypoints, Vector3<f64>)> {
    if !(sigma >= 0.0) {
        return Err(Error::input(format!("pose offset sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok((*k, Vector3::zeros()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::input(e.to_string()))?;
    let off = Vector3::from_fn(|_, _| normal.sample(rng));
    Ok((Keypoints { corners: k.corners.map(|c| c + off) }, off))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_rotation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_cube_corners() {
        let k = compute_keypoints(&ObjectSpec::cuboid(1.0, 1.0, 1.0, Pose::identity()));
        for (c, s) in k.corners.iter().zip(CORNER_SIGNS) {
            assert_eq!(*c, Vector3::new(s[0], s[1], s[2]) * 0.5);
        }
        assert_eq!(k.top_face_center(), Vector3::new(0.0, 0.0, 0.5));
    }

    #[test]
    fn cylinder_corners() {
        let k = compute_keypoints(&ObjectSpec::cylinder(0.03, 0.10, Pose::identity()));
        for (c, s) in k.corners.iter().zip(CORNER_SIGNS) {
            assert_relative_eq!(c.x, s[0] * 0.03, epsilon = 1e-15);
            assert_relative_eq!(c.y, s[1] * 0.03, epsilon = 1e-15);
            assert_relative_eq!(c.z, s[2] * 0.05, epsilon = 1e-15);
        }
    }

    #[test]
    fn posed_cuboid_matches_per_corner_transform() {
        let pose = Pose::new(Vector3::new(0.5, 0.0, 0.03), yaw_rotation(std::f64::consts::FRAC_PI_2));
        let spec = ObjectSpec::cuboid(0.04, 0.10, 0.06, pose);
        let k = compute_keypoints(&spec);
        let (c, s) = (pose.orientation.w, pose.orientation.k);
        // rotation about z by θ with cos θ = c²−s², sin θ = 2cs
        let (ct, st) = (c * c - s * s, 2.0 * c * s);
        for (corner, sg) in k.corners.iter().zip(CORNER_SIGNS) {
            let local = [sg[0] * 0.02, sg[1] * 0.05, sg[2] * 0.03];
            let expect = Vector3::new(
                ct * local[0] - st * local[1] + 0.5,
                st * local[0] + ct * local[1],
                local[2] + 0.03,
            );
            assert!((corner - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_negative_rejected() {
        let k = compute_keypoints(&ObjectSpec::cuboid(0.1, 0.1, 0.1, Pose::identity()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_keypoint_noise(&k, 0.0, &mut rng).unwrap(), k);
        assert!(add_keypoint_noise(&k, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let k = compute_keypoints(&ObjectSpec::cuboid(0.1, 0.1, 0.1, Pose::identity()));
        let a = add_keypoint_noise(&k, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_keypoint_noise(&k, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_sample_std() {
        let k = compute_keypoints(&ObjectSpec::cuboid(0.1, 0.1, 0.1, Pose::identity()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let d = add_keypoint_noise(&k, 0.001, &mut rng).unwrap().corners[2].y - k.corners[2].y;
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!((std - 0.001).abs() < 0.05 * 0.001, "std {std}");
    }

    #[test]
    fn sdf_primitives_on_axes() {
        let cube = ObjectSpec::cuboid(0.05, 0.05, 0.05, Pose::identity()).shape();
        assert_relative_eq!(cube.sdf_local(&Vector3::new(1.0, 0.0, 0.0)), 0.975, epsilon = 1e-12);
        assert_relative_eq!(cube.sdf_local(&Vector3::zeros()), -0.025, epsilon = 1e-12);
        let cyl = ObjectSpec::cylinder(0.03, 0.1, Pose::identity()).shape();
        assert_relative_eq!(cyl.sdf_local(&Vector3::new(0.05, 0.0, 0.0)), 0.02, epsilon = 1e-12);
        assert_relative_eq!(cyl.sdf_local(&Vector3::new(0.0, 0.0, 0.08)), 0.03, epsilon = 1e-12);
        let sph = ObjectSpec::sphere(0.04, Pose::identity()).shape();
        assert_relative_eq!(sph.sdf_local(&Vector3::new(0.0, 0.1, 0.0)), 0.06, epsilon = 1e-12);
        let cone = ObjectSpec::cone(0.04, 0.1, Pose::identity()).shape();
        // below the base center
        assert_relative_eq!(cone.sdf_local(&Vector3::new(0.0, 0.0, -0.07)), 0.02, epsilon = 1e-12);
        // above the apex
        assert_relative_eq!(cone.sdf_local(&Vector3::new(0.0, 0.0, 0.08)), 0.03, epsilon = 1e-12);
        // outward along the slant normal from the mid-height surface point
        let (r, h) = (0.04f64, 0.1f64);
        let slant = Vector2::new(h, r).normalize();
        let surface = Vector3::new(r * 0.5, 0.0, 0.0);
        let p = surface + Vector3::new(slant.x, 0.0, slant.y) * 0.01;
        assert_relative_eq!(cone.sdf_local(&p), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn normals_point_outward() {
        let cube = ObjectSpec::cuboid(0.05, 0.05, 0.05, Pose::identity()).shape();
        let n = cube.normal_local(&Vector3::new(0.05, 0.0, 0.0));
        assert_relative_eq!(n.x, 1.0, epsilon = 1e-6);
        let sph = ObjectSpec::sphere(0.04, Pose::identity()).shape();
        let n = sph.normal_local(&Vector3::new(0.0, 0.0, -0.05));
        assert_relative_eq!(n.z, -1.0, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn keypoints_are_sign_patterns_in_object_frame(
            dx in 0.03f64..0.12, dy in 0.03f64..0.12, dz in 0.03f64..0.12,
            x in -0.1f64..0.1, y in -0.1f64..0.1, yaw in -3.0f64..3.0,
        ) {
            let pose = Pose::new(Vector3::new(x, y, dz / 2.0), yaw_rotation(yaw));
            let spec = ObjectSpec::cuboid(dx, dy, dz, pose);
            let k = compute_keypoints(&spec);
            let iso = pose.isometry().unwrap();
            for (c, s) in k.corners.iter().zip(CORNER_SIGNS) {
                let local = iso.inverse_transform_point(&(*c).into()).coords;
                prop_assert!((local - Vector3::new(s[0] * dx, s[1] * dy, s[2] * dz) * 0.5).norm() < 1e-12);
            }
            // opposite edges have equal length
            let e = |a: usize, b: usize| (k.corners[a] - k.corners[b]).norm();
            prop_assert!((e(0, 1) - e(3, 2)).abs() < 1e-12);
            prop_assert!((e(0, 3) - e(1, 2)).abs() < 1e-12);
            prop_assert!((e(0, 4) - e(2, 6)).abs() < 1e-12);
        }

        #[test]
        fn center_pose_vector_recovers_yaw(yaw in -1.0f64..1.0) {
            let pose = Pose::new(Vector3::new(0.01, -0.02, 0.04), yaw_rotation(yaw));
            let k = compute_keypoints(&ObjectSpec::cuboid(0.05, 0.08, 0.08, pose));
            let v = k.center_pose_vector();
            prop_assert!((v[0] - 0.01).abs() < 1e-12 && (v[2] - 0.04).abs() < 1e-12);
            prop_assert!((v[5] - yaw).abs() < 1e-9);
        }
    }
}

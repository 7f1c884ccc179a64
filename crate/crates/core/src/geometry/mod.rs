//! Rigid transforms, pinhole projection, oriented boxes, PnP and depth
//! backprojection.
//!
//! Camera frames follow the usual vision convention: +X right, +Y down,
//! +Z forward. Pixel `(u, v)` refers to the center of column `u`, row `v`.
//!
//! Viewing angles are measured in the object frame, where +X is the object's
//! front and +Z is up. Azimuth 0 looks at the front and increases
//! counter-clockwise seen from above; elevation is the camera's angle above
//! the object's horizontal plane.

mod pnp;

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use thiserror::Error;

pub use pnp::{solve_pnp, PnpOptions};

/// Tolerance for orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid box dimensions {0:?}")]
    InvalidDims([f64; 3]),
    #[error("point {index} is behind the camera (depth {depth})")]
    BehindCamera { index: usize, depth: f64 },
    #[error("need at least {need} correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("point/pixel count mismatch: {points} vs {pixels}")]
    CountMismatch { points: usize, pixels: usize },
    #[error("degenerate point configuration (singular value ratio {0:.3e})")]
    Degenerate(f64),
    #[error("pose refinement did not converge; reprojection rms {rms:.4} px")]
    NotConverged { rms: f64 },
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
}

/// Rotation plus translation: `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(0));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        invert_transform(self)
    }
}

pub fn invert_transform(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidRotation(f64::INFINITY));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    let det = (r.determinant() - 1.0).abs();
    let dev = ortho.max(det);
    if dev > ROTATION_TOLERANCE {
        return Err(GeometryError::InvalidRotation(dev));
    }
    Ok(())
}

/// Rotation about +Z by `deg` degrees.
pub fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic angle in radians between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    // atan2 keeps precision for tiny angles where acos would not.
    let axis = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let s = axis.norm() / 2.0;
    let c = (d.trace() - 1.0) / 2.0;
    s.atan2(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }

    /// Projects a camera-frame point.
    pub fn project(&self, p: &Point3<f64>) -> Point2<f64> {
        Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, px: &Point2<f64>) -> Point2<f64> {
        Point2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn contains(&self, px: &Point2<f64>) -> bool {
        px.x >= -0.5 && px.y >= -0.5 && px.x < self.width as f64 - 0.5 && px.y < self.height as f64 - 0.5
    }
}

/// Oriented 3D box in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox3D {
    pub center: Point3<f64>,
    dims: Vector3<f64>,
    orientation: Matrix3<f64>,
}

impl Bbox3D {
    pub fn new(center: Point3<f64>, dims: Vector3<f64>, orientation: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return Err(GeometryError::InvalidDims([dims.x, dims.y, dims.z]));
        }
        check_rotation(&orientation)?;
        Ok(Self {
            center,
            dims,
            orientation,
        })
    }

    pub fn dims(&self) -> &Vector3<f64> {
        &self.dims
    }

    pub fn orientation(&self) -> &Matrix3<f64> {
        &self.orientation
    }

    /// Object frame to world frame.
    pub fn object_to_world(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.orientation,
            translation: self.center.coords,
        }
    }
}

/// Corner signs, x varying fastest: `+++, -++, +-+, --+, ++-, -+-, +--, ---`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
    [-1.0, -1.0, -1.0],
];

/// Box corners in the object frame, in [`CORNER_SIGNS`] order.
pub fn object_corners(dims: &Vector3<f64>) -> [Point3<f64>; 8] {
    CORNER_SIGNS.map(|s| Point3::new(s[0] * dims.x / 2.0, s[1] * dims.y / 2.0, s[2] * dims.z / 2.0))
}

/// World-frame corners `c + R X_i`, in [`CORNER_SIGNS`] order.
pub fn bbox_corners(b: &Bbox3D) -> [Point3<f64>; 8] {
    let t = b.object_to_world();
    object_corners(&b.dims).map(|p| t.apply(&p))
}

/// Projects world points through a world-to-camera transform.
pub fn project_points(
    points: &[Point3<f64>],
    world_to_camera: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<Vec<Point2<f64>>, GeometryError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let pc = world_to_camera.apply(p);
            if !(pc.z > 0.0) {
                return Err(GeometryError::BehindCamera { index, depth: pc.z });
            }
            Ok(k.project(&pc))
        })
        .collect()
}

/// Row-major depth map in meters. Zero or non-finite entries are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "depth buffer size");
        Self { width, height, data }
    }

    pub fn at(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }
}

/// Backprojects every valid pixel to the world frame, row-major order.
pub fn backproject_depth(depth: &DepthImage, k: &CameraIntrinsics, camera_to_world: &RigidTransform) -> Vec<Point3<f64>> {
    let mut out = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v) as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let pc = Point3::new((u as f64 - k.cx) * d / k.fx, (v as f64 - k.cy) * d / k.fy, d);
            out.push(camera_to_world.apply(&pc));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewAngles {
    /// Degrees in `[0, 360)`.
    pub azimuth: f64,
    /// Degrees in `[-90, 90]`.
    pub elevation: f64,
}

impl ViewAngles {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: wrap_degrees(azimuth),
            elevation: elevation.clamp(-90.0, 90.0),
        }
    }

    /// Unit vector from the object toward the camera, object frame.
    pub fn direction(&self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.to_radians().sin_cos();
        let (se, ce) = self.elevation.to_radians().sin_cos();
        Vector3::new(ca * ce, sa * ce, se)
    }
}

/// Wraps into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Object-to-camera rotation for a camera looking at the object origin from
/// the given viewing angles, with no roll.
///
/// Rows are the camera's right, down and forward axes in object coordinates.
pub fn azel_to_rotation(a: &ViewAngles) -> Matrix3<f64> {
    let d = a.direction();
    let f = -d;
    let (sa, ca) = a.azimuth.to_radians().sin_cos();
    let r = Vector3::new(-sa, ca, 0.0);
    let down = f.cross(&r);
    Matrix3::from_rows(&[r.transpose(), down.transpose(), f.transpose()])
}

/// Inverse of [`azel_to_rotation`] up to roll. At the poles the azimuth is 0.
pub fn rotation_to_azel(r: &Matrix3<f64>) -> ViewAngles {
    let d = -Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let horiz = d.x.hypot(d.y);
    let elevation = d.z.atan2(horiz).to_degrees();
    let azimuth = if horiz < 1e-12 {
        0.0
    } else {
        wrap_degrees(d.y.atan2(d.x).to_degrees())
    };
    ViewAngles { azimuth, elevation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_inverts_to_identity() {
        let t = RigidTransform::identity().inverse();
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn inverse_of_turn_and_shift() {
        let t = RigidTransform::new(rot_z(90.0), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let inv = invert_transform(&t);
        assert_relative_eq!(*inv.rotation(), rot_z(-90.0), epsilon = 1e-12);
        assert_relative_eq!(*inv.translation(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            RigidTransform::new(m, Vector3::zeros()),
            Err(GeometryError::InvalidRotation(_))
        ));
    }

    #[test]
    fn first_corner_is_half_dims() {
        let b = Bbox3D::new(Point3::origin(), Vector3::new(2.0, 4.0, 6.0), Matrix3::identity()).unwrap();
        let c = bbox_corners(&b);
        assert_eq!(c[0], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(c[1], Point3::new(-1.0, 2.0, 3.0));
        assert_eq!(c[7], Point3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn offset_unit_cube() {
        let b = Bbox3D::new(Point3::new(1.0, 1.0, 1.0), Vector3::new(2.0, 2.0, 2.0), Matrix3::identity()).unwrap();
        for p in bbox_corners(&b) {
            for v in p.iter() {
                assert!(*v == 0.0 || *v == 2.0);
            }
        }
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(Bbox3D::new(Point3::origin(), Vector3::new(1.0, 0.0, 1.0), Matrix3::identity()).is_err());
    }

    #[test]
    fn pinhole_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let t = RigidTransform::identity();
        let px = project_points(&[Point3::new(0.0, 0.0, 2.0), Point3::new(1.0, 0.0, 2.0)], &t, &k).unwrap();
        assert_eq!(px[0], Point2::new(64.0, 64.0));
        assert_eq!(px[1], Point2::new(114.0, 64.0));
        let err = project_points(&[Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, -1.0)], &t, &k).unwrap_err();
        assert_eq!(err, GeometryError::BehindCamera { index: 1, depth: -1.0 });
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn center_pixel_backprojects_on_axis() {
        let k = CameraIntrinsics::new(50.0, 50.0, 1.0, 1.0, 3, 3).unwrap();
        let mut data = vec![0.0; 9];
        data[4] = 2.0;
        let pts = backproject_depth(&DepthImage::new(3, 3, data), &k, &RigidTransform::identity());
        assert_eq!(pts, vec![Point3::new(0.0, 0.0, 2.0)]);
    }

    #[test]
    fn constant_depth_plane_keeps_forward_distance() {
        let k = CameraIntrinsics::new(40.0, 40.0, 7.5, 5.5, 16, 12).unwrap();
        let pose = RigidTransform::new(rot_z(30.0), Vector3::new(0.5, -1.0, 2.0)).unwrap();
        let pts = backproject_depth(&DepthImage::new(16, 12, vec![3.0; 192]), &k, &pose);
        assert_eq!(pts.len(), 192);
        let forward = pose.rotation() * Vector3::z();
        for p in pts {
            assert_relative_eq!((p.coords - pose.translation()).dot(&forward), 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn frontal_view_is_zero_zero() {
        // Camera on the +X axis looking back along -X, +Z up in the image.
        let frontal = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0);
        let a = rotation_to_azel(&frontal);
        assert_eq!((a.azimuth, a.elevation), (0.0, 0.0));
        assert_relative_eq!(azel_to_rotation(&ViewAngles::new(0.0, 0.0)), frontal, epsilon = 1e-15);
    }

    #[test]
    fn turntable_quarter_turn_is_ninety() {
        // Turning the object -90 degrees about its vertical axis shows its
        // left side (+Y) to a camera that stays put.
        let frontal = azel_to_rotation(&ViewAngles::new(0.0, 0.0));
        let turned = frontal * rot_z(-90.0);
        let a = rotation_to_azel(&turned);
        assert_relative_eq!(a.azimuth, 90.0, epsilon = 1e-12);
        assert_relative_eq!(a.elevation, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn elevated_view_looks_down() {
        let r = azel_to_rotation(&ViewAngles::new(0.0, 30.0));
        let forward = Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
        assert!(forward.z < 0.0);
        check_rotation(&r).unwrap();
    }

    #[test]
    fn poles_report_zero_azimuth() {
        let a = rotation_to_azel(&azel_to_rotation(&ViewAngles::new(123.0, 90.0)));
        assert_eq!(a.azimuth, 0.0);
        assert_relative_eq!(a.elevation, 90.0, epsilon = 1e-12);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_degrees(360.0), 0.0);
        assert_eq!(wrap_degrees(-1.0), 359.0);
        assert!(wrap_degrees(-1e-18) < 360.0);
    }

    #[test]
    fn small_geodesic_angles_are_precise() {
        let a = rot_z(0.0);
        let b = rot_z(1e-7f64.to_degrees());
        assert_relative_eq!(rotation_angle_between(&a, &b), 1e-7, max_relative = 1e-6);
    }
}

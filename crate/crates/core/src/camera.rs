//! Pinhole cameras with Brown-Conrady distortion, projection and two-view triangulation.

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point3, RowVector4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::is_rotation;

/// A 3D point in world coordinates, meters.
pub type Point3D = Point3<f64>;

/// Points closer than this to the camera plane are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-9;
/// Tolerance for `R^T R = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Rays closer than this many radians are parallel.
pub const PARALLEL_RAY_TOLERANCE: f64 = 1e-9;

const UNDISTORT_MAX_ITERATIONS: usize = 20;
const UNDISTORT_TOLERANCE: f64 = 1e-10;
const UNDISTORT_FAILURE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point is behind camera `{camera}` (depth {depth:e} m)")]
    BehindCamera { camera: String, depth: f64 },
    #[error("undistortion did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("degenerate two-view geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid camera `{name}`: {reason}")]
    InvalidCamera { name: String, reason: String },
    #[error("at least one view is required")]
    NoViews,
    #[error("failed to parse camera file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CameraError>;

/// Brown-Conrady coefficients in OpenCV order `(k1, k2, p1, p2, k3)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    pub fn from_array(c: [f64; 5]) -> Self {
        Self { k1: c[0], k2: c[1], p1: c[2], p2: c[3], k3: c[4] }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|c| *c == 0.0)
    }

    /// Maps an ideal normalized image point to its distorted position.
    pub fn distort(&self, p: Vector2<f64>) -> Vector2<f64> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        Vector2::new(x * radial + dx, y * radial + dy)
    }

    /// Inverts [`Distortion::distort`] by fixed-point iteration.
    pub fn undistort(&self, distorted: Vector2<f64>) -> Result<Vector2<f64>> {
        if self.is_zero() {
            return Ok(distorted);
        }
        let mut p = distorted;
        let mut residual = f64::INFINITY;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let (x, y) = (p.x, p.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            p = Vector2::new((distorted.x - dx) / radial, (distorted.y - dy) / radial);
            residual = (self.distort(p) - distorted).norm();
            if !residual.is_finite() {
                break;
            }
            if residual < UNDISTORT_TOLERANCE {
                return Ok(p);
            }
        }
        if residual.is_finite() && residual <= UNDISTORT_FAILURE {
            Ok(p)
        } else {
            Err(CameraError::NoConvergence { residual })
        }
    }
}

/// A 2D keypoint in pixels with a detector confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointObservation {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

impl KeypointObservation {
    pub fn new(u: f64, v: f64, confidence: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&confidence));
        Self { u, v, confidence }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Calibrated pinhole camera. `r` and `t` map world points into the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    name: String,
    image_size: (u32, u32),
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    distortion: Distortion,
}

impl CameraModel {
    pub fn new(
        name: impl Into<String>,
        image_size: (u32, u32),
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        distortion: Distortion,
    ) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: &str| CameraError::InvalidCamera { name: name.clone(), reason: reason.to_string() };
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 || k[(1, 0)] != 0.0 {
            return Err(invalid("K must be upper triangular with K[2][2] = 1"));
        }
        if !is_rotation(&r, ROTATION_TOLERANCE) {
            return Err(invalid("R is not orthonormal with determinant +1"));
        }
        if !t.iter().chain(k.iter()).all(|v| v.is_finite()) || !distortion.to_array().iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| invalid("K is singular"))?;
        Ok(Self { name, image_size, k, k_inv, r, t, distortion })
    }

    /// Convenience constructor for an undistorted camera with zero skew.
    pub fn pinhole(
        name: impl Into<String>,
        image_size: (u32, u32),
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        r: Matrix3<f64>,
        t: Vector3<f64>,
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(name, image_size, k, r, t, Distortion::default())
    }

    /// Builds a camera at world position `center` looking at `target`, with `up` roughly
    /// mapping to the negative image v direction.
    pub fn look_at(
        name: impl Into<String>,
        image_size: (u32, u32),
        intrinsics: (f64, f64, f64, f64),
        center: Point3D,
        target: Point3D,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let forward = (target - center).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(CameraError::InvalidCamera {
                name,
                reason: "up vector is parallel to the viewing direction".into(),
            });
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * center.coords);
        Self::pinhole(name, image_size, intrinsics, r, t)
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn distortion(&self) -> Distortion {
        self.distortion
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3D {
        Point3::from(-(self.r.transpose() * self.t))
    }

    /// The 3x4 extrinsic matrix `[R | t]`.
    pub fn extrinsic(&self) -> Matrix3x4<f64> {
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        e.set_column(3, &self.t);
        e
    }

    pub fn to_camera_frame(&self, p: &Point3D) -> Vector3<f64> {
        self.r * p.coords + self.t
    }

    /// Whether a pixel lies inside `[0, w) x [0, h)`.
    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_size.0 as f64 && v < self.image_size.1 as f64
    }

    fn normalized_to_pixel(&self, p: Vector2<f64>) -> Vector2<f64> {
        let h = self.k * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(h.x, h.y)
    }

    fn pixel_to_normalized(&self, u: f64, v: f64) -> Vector2<f64> {
        let h = self.k_inv * Vector3::new(u, v, 1.0);
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    /// Backprojected viewing ray of an undistorted pixel, world frame, unit length.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let n = self.pixel_to_normalized(u, v);
        (self.r.transpose() * Vector3::new(n.x, n.y, 1.0)).normalize()
    }

    pub fn to_file(&self) -> CameraFile {
        let flat = |m: &Matrix3<f64>| -> Vec<f64> { (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)])).collect() };
        CameraFile {
            name: self.name.clone(),
            image_size: [self.image_size.0, self.image_size.1],
            k: flat(&self.k),
            r: flat(&self.r),
            t: self.t.iter().copied().collect(),
            distortion: Some(self.distortion.to_array().to_vec()),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: CameraFile = serde_json::from_str(s)?;
        file.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("camera serializes")
    }
}

/// On-disk calibration layout. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFile {
    pub name: String,
    pub image_size: [u32; 2],
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<Vec<f64>>,
}

impl CameraFile {
    pub fn into_model(self) -> Result<CameraModel> {
        let invalid = |reason: String| CameraError::InvalidCamera { name: self.name.clone(), reason };
        if self.k.len() != 9 || self.r.len() != 9 || self.t.len() != 3 {
            return Err(invalid(format!(
                "expected 9/9/3 values for K/R/t, got {}/{}/{}",
                self.k.len(),
                self.r.len(),
                self.t.len()
            )));
        }
        let distortion = match &self.distortion {
            None => Distortion::default(),
            Some(d) if d.len() == 5 => Distortion::from_array([d[0], d[1], d[2], d[3], d[4]]),
            Some(d) => return Err(invalid(format!("expected 5 distortion values, got {}", d.len()))),
        };
        let k = Matrix3::from_row_slice(&self.k);
        let r = Matrix3::from_row_slice(&self.r);
        let t = Vector3::from_column_slice(&self.t);
        CameraModel::new(self.name.clone(), (self.image_size[0], self.image_size[1]), k, r, t, distortion)
    }
}

/// Perspective projection with distortion. The returned confidence is 1.
pub fn project_point(cam: &CameraModel, p: &Point3D) -> Result<KeypointObservation> {
    let pc = cam.to_camera_frame(p);
    if pc.z <= MIN_DEPTH {
        return Err(CameraError::BehindCamera { camera: cam.name.clone(), depth: pc.z });
    }
    let ideal = Vector2::new(pc.x / pc.z, pc.y / pc.z);
    let px = cam.normalized_to_pixel(cam.distortion.distort(ideal));
    Ok(KeypointObservation::new(px.x, px.y, 1.0))
}

/// Returns the ideal (distortion-free) pixel whose distorted image is `obs`.
pub fn undistort_point(cam: &CameraModel, obs: &KeypointObservation) -> Result<KeypointObservation> {
    if cam.distortion.is_zero() {
        return Ok(*obs);
    }
    let distorted = cam.pixel_to_normalized(obs.u, obs.v);
    let ideal = cam.distortion.undistort(distorted)?;
    let px = cam.normalized_to_pixel(ideal);
    Ok(KeypointObservation { u: px.x, v: px.y, confidence: obs.confidence })
}

/// Linear (DLT) triangulation of one point seen by two calibrated cameras.
///
/// Observations must already be undistorted. Rows are built in normalized image
/// coordinates and scaled to unit norm before the SVD; the solution is the right
/// singular vector of the smallest singular value.
pub fn triangulate_pair(
    cam_a: &CameraModel,
    obs_a: &KeypointObservation,
    cam_b: &CameraModel,
    obs_b: &KeypointObservation,
) -> Result<Point3D> {
    let (ca, cb) = (cam_a.center(), cam_b.center());
    let scale = 1.0_f64.max(ca.coords.norm()).max(cb.coords.norm());
    if (ca - cb).norm() <= 1e-12 * scale {
        return Err(CameraError::DegenerateGeometry("camera centers coincide".into()));
    }
    let (ra, rb) = (cam_a.ray_direction(obs_a.u, obs_a.v), cam_b.ray_direction(obs_b.u, obs_b.v));
    let angle = ra.cross(&rb).norm().atan2(ra.dot(&rb));
    if angle.abs() < PARALLEL_RAY_TOLERANCE {
        return Err(CameraError::DegenerateGeometry("viewing rays are parallel".into()));
    }

    let mut system = Matrix4::zeros();
    for (view, (cam, obs)) in [(cam_a, obs_a), (cam_b, obs_b)].into_iter().enumerate() {
        let n = cam.pixel_to_normalized(obs.u, obs.v);
        let e = cam.extrinsic();
        let (r0, r1, r2) = (e.row(0), e.row(1), e.row(2));
        let rows: [RowVector4<f64>; 2] = [r2 * n.x - r0, r2 * n.y - r1];
        for (i, row) in rows.iter().enumerate() {
            system.set_row(2 * view + i, &(row / row.norm()));
        }
    }

    let svd = system.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("four singular values");
    let h = v_t.row(smallest);
    if h[3].abs() < 1e-14 {
        return Err(CameraError::DegenerateGeometry("point at infinity".into()));
    }
    Ok(Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Root-mean-square pixel distance between observations and the projection of `p`.
pub fn reprojection_error(views: &[(&CameraModel, KeypointObservation)], p: &Point3D) -> Result<f64> {
    if views.is_empty() {
        return Err(CameraError::NoViews);
    }
    let mut sum = 0.0;
    for (cam, obs) in views {
        let proj = project_point(cam, p)?;
        sum += (proj.pixel() - obs.pixel()).norm_squared();
    }
    Ok((sum / views.len() as f64).sqrt())
}

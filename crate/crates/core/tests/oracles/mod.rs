//! Independent reference implementations used by the property and acceptance tests.

#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use kinebench::body::{BodyModelArchive, BodyParams};
use kinebench::camera::{project_point, CameraModel, Point3D};
use kinebench::formats::xyz_channels;
use kinebench::signal::TimeSeries;
use kinebench::skeletal::{solve_ik_trajectory, IkOptions, IkReport, ScaleSet, SkeletalModel};
use nalgebra::{DMatrix, Matrix3, Point3, Rotation3, Vector3};
use rand::Rng;

pub fn toy_archive() -> BodyModelArchive {
    serde_json::from_str(include_str!("../../data/toy_body.json")).unwrap()
}

fn axis_angle(w: &[f64]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::new(w[0], w[1], w[2])).into_inner()
}

/// Per-vertex skinning loop: `sum_j w_vj * G_j * (x_v - J_j)`.
pub fn brute_force_lbs(a: &BodyModelArchive, p: &BodyParams) -> Vec<Vector3<f64>> {
    let (nv, nj) = (a.vertex_count, a.joint_count);
    let ns = p.beta.len();
    let mut shaped = vec![Vector3::zeros(); nv];
    for v in 0..nv {
        for c in 0..3 {
            let mut x = a.template[3 * v + c];
            for s in 0..ns {
                x += a.shape_dirs[(3 * v + c) * ns + s] * p.beta[s];
            }
            shaped[v][c] = x;
        }
    }
    let mut joints = vec![Vector3::zeros(); nj];
    for j in 0..nj {
        for v in 0..nv {
            joints[j] += shaped[v] * a.joint_regressor[j * nv + v];
        }
    }
    let rots: Vec<Matrix3<f64>> = (0..nj).map(|j| axis_angle(&p.theta[3 * j..3 * j + 3])).collect();

    let mut posed = shaped.clone();
    if !a.pose_dirs.is_empty() {
        let mut feats = Vec::new();
        for r in &rots[1..] {
            for i in 0..3 {
                for k in 0..3 {
                    feats.push(r[(i, k)] - if i == k { 1.0 } else { 0.0 });
                }
            }
        }
        let nf = feats.len();
        for v in 0..nv {
            for c in 0..3 {
                for f in 0..nf {
                    posed[v][c] += a.pose_dirs[(3 * v + c) * nf + f] * feats[f];
                }
            }
        }
    }

    fn world(
        j: usize,
        a: &BodyModelArchive,
        rots: &[Matrix3<f64>],
        joints: &[Vector3<f64>],
    ) -> (Matrix3<f64>, Vector3<f64>) {
        let parent = a.parents[j];
        if parent < 0 {
            return (rots[j], joints[j]);
        }
        let (pr, pt) = world(parent as usize, a, rots, joints);
        (pr * rots[j], pr * (joints[j] - joints[parent as usize]) + pt)
    }
    let g: Vec<_> = (0..nj).map(|j| world(j, a, &rots, &joints)).collect();

    (0..nv)
        .map(|v| {
            let mut out = Vector3::zeros();
            for j in 0..nj {
                let w = a.skin_weights[v * nj + j];
                out += w * (g[j].0 * (posed[v] - joints[j]) + g[j].1);
            }
            out + p.translation
        })
        .collect()
}

/// Dual-pass magnitude of an order-`n` digital Butterworth low-pass designed with a
/// prewarped bilinear transform: `1 / (1 + (tan(pi f / fs) / tan(pi fc / fs))^(2n))`.
pub fn butterworth_dual_pass_gain(order: usize, cutoff: f64, rate: f64, f: f64) -> f64 {
    let r = (PI * f / rate).tan() / (PI * cutoff / rate).tan();
    1.0 / (1.0 + r.powi(2 * order as i32))
}

/// Least-squares amplitude of the `f` Hz sinusoid in `x[range]`.
pub fn sinusoid_amplitude(x: &[f64], rate: f64, f: f64, range: std::ops::Range<usize>) -> f64 {
    let (mut ss, mut sc, mut cc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in range {
        let w = 2.0 * PI * f * i as f64 / rate;
        let (s, c) = w.sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        xs += x[i] * s;
        xc += x[i] * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    a.hypot(b)
}

/// Two cameras viewing `point` from 2-6 m with a baseline of at least 10 degrees,
/// both with the point at depth in [0.5, 10] m.
pub struct TriangulationCase {
    pub cam_a: CameraModel,
    pub cam_b: CameraModel,
    pub point: Point3D,
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_camera<R: Rng>(rng: &mut R, name: &str, point: &Point3D) -> Option<CameraModel> {
    let center = point + random_unit(rng) * rng.random_range(2.0..6.0);
    let target = point + random_unit(rng) * rng.random_range(0.0..0.5);
    let f = rng.random_range(600.0..2500.0);
    let (w, h) = (1920u32, 1080u32);
    let cx = 960.0 + rng.random_range(-30.0..30.0);
    let cy = 540.0 + rng.random_range(-30.0..30.0);
    let up = random_unit(rng);
    let cam =
        CameraModel::look_at(name, (w, h), (f, f * rng.random_range(0.98..1.02), cx, cy), center, target, up).ok()?;
    let z = cam.to_camera_frame(point).z;
    (0.5..=10.0).contains(&z).then_some(cam)
}

pub fn triangulation_case<R: Rng>(rng: &mut R) -> TriangulationCase {
    loop {
        let point = Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (Some(cam_a), Some(cam_b)) = (random_camera(rng, "a", &point), random_camera(rng, "b", &point)) else {
            continue;
        };
        let (ra, rb) = ((point - cam_a.center()).normalize(), (point - cam_b.center()).normalize());
        if ra.dot(&rb).clamp(-1.0, 1.0).acos() < 10f64.to_radians() {
            continue;
        }
        if project_point(&cam_a, &point).is_err() || project_point(&cam_b, &point).is_err() {
            continue;
        }
        return TriangulationCase { cam_a, cam_b, point };
    }
}

/// Random pose drawn from the central 80% of each rotational range, with the root
/// inside a 2 m x 0.6 m x 2 m box. Keeps clear of joint limits and of the Z-X-Y
/// singularity at +-90 degrees list.
pub fn random_pose<R: Rng>(model: &SkeletalModel, rng: &mut R) -> Vec<f64> {
    model
        .coordinates()
        .iter()
        .map(|c| match c.name.as_str() {
            "pelvis_tx" | "pelvis_tz" => rng.random_range(-1.0..1.0),
            "pelvis_ty" => rng.random_range(0.6..1.2),
            _ => {
                let (lo, hi) = c.range.unwrap_or((-PI / 2.0, PI / 2.0));
                let m = 0.1 * (hi - lo);
                rng.random_range(lo + m..hi - m)
            }
        })
        .collect()
}

/// Solves a single frame of marker targets through the trajectory entry point.
pub fn solve_markers(model: &SkeletalModel, scales: &ScaleSet, markers: &[Vector3<f64>]) -> IkReport {
    let data = markers.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let ts = TimeSeries::new(60.0, xyz_channels(&model.marker_names()), data).unwrap();
    solve_ik_trajectory(model, scales, &ts, &IkOptions::default()).unwrap()
}

/// Central differences of marker positions with step `h`, stacked 3 rows per marker.
fn central_jacobian(model: &SkeletalModel, scales: &ScaleSet, q: &[f64], h: f64) -> DMatrix<f64> {
    let m = model.markers().len();
    let mut jac = DMatrix::zeros(3 * m, q.len());
    for k in 0..q.len() {
        let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
        qp[k] += h;
        qm[k] -= h;
        let (pp, pm) = (model.marker_positions(scales, &qp), model.marker_positions(scales, &qm));
        for i in 0..m {
            for c in 0..3 {
                jac[(3 * i + c, k)] = (pp[i][c] - pm[i][c]) / (2.0 * h);
            }
        }
    }
    jac
}

/// Richardson-extrapolated central-difference Jacobian, error O(h^4).
pub fn richardson_jacobian(model: &SkeletalModel, scales: &ScaleSet, q: &[f64], h: f64) -> DMatrix<f64> {
    let coarse = central_jacobian(model, scales, q, h);
    let fine = central_jacobian(model, scales, q, h / 2.0);
    (fine * 4.0 - coarse) / 3.0
}

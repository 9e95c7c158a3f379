//! Weighted least-squares inverse kinematics: Levenberg-Marquardt on marker
//! distances with a central-difference Jacobian.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{Coordinate, JointAngleTrajectory, JointKind, Result, ScaleSet, SkeletalError, SkeletalModel};
use crate::camera::Point3D;
use crate::rotation::{euler_zxy_from_matrix, zxy_axes};
use crate::signal::TimeSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct IkOptions {
    pub max_iterations: usize,
    /// Central-difference step, radians or meters.
    pub fd_step: f64,
    pub step_tolerance: f64,
    /// Absolute objective decrease (m^2) below which an accepted step ends the solve.
    pub objective_tolerance: f64,
    pub initial_damping: f64,
    /// Offset applied to each root rotation for the first-frame multi-start.
    pub multi_start_offset: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            fd_step: 1e-6,
            step_tolerance: 1e-8,
            objective_tolerance: 1e-12,
            initial_damping: 1e-3,
            multi_start_offset: 30f64.to_radians(),
        }
    }
}

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-15;

/// Target positions aligned with the model's marker list. `None` drops the term.
#[derive(Debug, Clone, PartialEq)]
pub struct IkTargets {
    pub positions: Vec<Option<Vector3<f64>>>,
    pub weights: Vec<f64>,
}

impl IkTargets {
    /// Targets for every model marker, using the model's marker weights.
    pub fn from_positions(model: &SkeletalModel, positions: Vec<Option<Vector3<f64>>>) -> Result<Self> {
        if positions.len() != model.markers().len() {
            return Err(SkeletalError::DimensionMismatch(format!(
                "expected {} marker targets, got {}",
                model.markers().len(),
                positions.len()
            )));
        }
        Ok(Self { positions, weights: model.markers().iter().map(|m| m.weight).collect() })
    }

    /// Targets from a name -> point map; model markers absent from the map are dropped.
    pub fn from_named(model: &SkeletalModel, named: &HashMap<String, Point3D>) -> Self {
        Self {
            positions: model.markers().iter().map(|m| named.get(&m.name).map(|p| p.coords)).collect(),
            weights: model.markers().iter().map(|m| m.weight).collect(),
        }
    }

    fn active(&self) -> Vec<usize> {
        (0..self.positions.len())
            .filter(|&i| self.weights[i] > 0.0 && self.positions[i].is_some_and(|p| p.iter().all(|v| v.is_finite())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration or damping limit reached; `q` is the best iterate found.
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    /// Model units: radians and meters.
    pub q: Vec<f64>,
    /// Weighted RMS marker distance, meters.
    pub residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

struct Problem<'a> {
    model: &'a SkeletalModel,
    scales: &'a ScaleSet,
    active: Vec<usize>,
    targets: Vec<Vector3<f64>>,
    sqrt_w: Vec<f64>,
    weight_sum: f64,
}

impl<'a> Problem<'a> {
    fn new(model: &'a SkeletalModel, scales: &'a ScaleSet, targets: &IkTargets) -> Result<Self> {
        if targets.positions.len() != model.markers().len() || targets.weights.len() != model.markers().len() {
            return Err(SkeletalError::DimensionMismatch("targets do not match the model's markers".into()));
        }
        if scales.len() != model.segments().len() {
            return Err(SkeletalError::DimensionMismatch("scale set does not match the model".into()));
        }
        let active = targets.active();
        let points: Vec<Vector3<f64>> = active.iter().map(|&i| targets.positions[i].unwrap()).collect();
        if points.len() < 4 || collinear(&points) {
            return Err(SkeletalError::TooFewMarkers(points.len()));
        }
        let sqrt_w = active.iter().map(|&i| targets.weights[i].sqrt()).collect();
        let weight_sum = active.iter().map(|&i| targets.weights[i]).sum();
        Ok(Self { model, scales, active, targets: points, sqrt_w, weight_sum })
    }

    fn residuals(&self, q: &[f64]) -> DVector<f64> {
        let x = self.model.marker_positions(self.scales, q);
        let mut r = DVector::zeros(3 * self.active.len());
        for (k, &i) in self.active.iter().enumerate() {
            let e = (x[i] - self.targets[k]) * self.sqrt_w[k];
            r.fixed_rows_mut::<3>(3 * k).copy_from(&e);
        }
        r
    }

    fn jacobian(&self, q: &[f64], h: f64) -> DMatrix<f64> {
        let n = q.len();
        let mut jac = DMatrix::zeros(3 * self.active.len(), n);
        let mut qp = q.to_vec();
        for c in 0..n {
            qp[c] = q[c] + h;
            let plus = self.residuals(&qp);
            qp[c] = q[c] - h;
            let minus = self.residuals(&qp);
            qp[c] = q[c];
            jac.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        jac
    }

    fn rms(&self, objective: f64) -> f64 {
        (objective / self.weight_sum).sqrt()
    }

    fn solve(&self, q_init: &[f64], opts: &IkOptions) -> IkSolution {
        let n = q_init.len();
        let mut q = DVector::from_column_slice(q_init);
        let mut r = self.residuals(q.as_slice());
        let mut f = r.norm_squared();
        let mut trace = vec![f];
        let mut lambda = opts.initial_damping;
        let mut status = SolveStatus::NotConverged;
        let mut iterations = 0;
        let mut jac = self.jacobian(q.as_slice(), opts.fd_step);

        while iterations < opts.max_iterations {
            iterations += 1;
            let jt = jac.transpose();
            let mut a = &jt * &jac;
            for i in 0..n {
                a[(i, i)] += lambda;
            }
            let g = &jt * &r;
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    break;
                }
                continue;
            };
            let step = chol.solve(&(-g));
            if step.norm() < opts.step_tolerance {
                status = SolveStatus::Converged;
                break;
            }
            let q_new = &q + &step;
            let r_new = self.residuals(q_new.as_slice());
            let f_new = r_new.norm_squared();
            if f_new < f {
                let decrease = f - f_new;
                q = q_new;
                r = r_new;
                f = f_new;
                trace.push(f);
                lambda = (lambda / 10.0).max(MIN_DAMPING);
                if decrease < opts.objective_tolerance {
                    status = SolveStatus::Converged;
                    break;
                }
                jac = self.jacobian(q.as_slice(), opts.fd_step);
            } else {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    break;
                }
            }
        }

        IkSolution {
            q: q.as_slice().to_vec(),
            residual: self.rms(f),
            objective: f,
            iterations,
            status,
            objective_trace: trace,
        }
    }
}

fn collinear(points: &[Vector3<f64>]) -> bool {
    let p0 = points[0];
    let Some(p1) = points.iter().copied().max_by(|a, b| (a - p0).norm().total_cmp(&(b - p0).norm())) else {
        return true;
    };
    let dir = p1 - p0;
    if dir.norm() < 1e-9 {
        return true;
    }
    let dir = dir.normalize();
    points.iter().all(|p| (p - p0).cross(&dir).norm() < 1e-9)
}

/// Solves one frame from `q_init` (model units).
pub fn solve_ik_frame(
    model: &SkeletalModel,
    scales: &ScaleSet,
    targets: &IkTargets,
    q_init: &[f64],
    opts: &IkOptions,
) -> Result<IkSolution> {
    if q_init.len() != model.coordinates().len() {
        return Err(SkeletalError::DimensionMismatch(format!(
            "expected {} initial coordinates, got {}",
            model.coordinates().len(),
            q_init.len()
        )));
    }
    if q_init.iter().any(|v| !v.is_finite()) {
        return Err(SkeletalError::InvalidArgument("initial coordinates must be finite".into()));
    }
    let mut solution = Problem::new(model, scales, targets)?.solve(q_init, opts);
    canonicalize_angles(model, &mut solution.q, q_init);
    Ok(solution)
}

fn range_violation(c: &Coordinate, v: f64) -> f64 {
    c.range.map_or(0.0, |(lo, hi)| (lo - v).max(0.0) + (v - hi).max(0.0))
}

/// The 2*pi shift of `v` that violates the range least, then lies nearest `reference`.
fn best_wrap(c: &Coordinate, v: f64, reference: f64) -> (f64, f64, f64) {
    use std::f64::consts::TAU;
    let near = |anchor: f64| v - TAU * ((v - anchor) / TAU).round();
    let mid = c.range.map_or(reference, |(lo, hi)| 0.5 * (lo + hi));
    [near(mid) - TAU, near(mid), near(mid) + TAU, near(reference)]
        .into_iter()
        .map(|w| (w, range_violation(c, w), (w - reference).abs()))
        .min_by(|a, b| better(a.1, a.2, b.1, b.2))
        .expect("non-empty")
}

fn better(viol_a: f64, dist_a: f64, viol_b: f64, dist_b: f64) -> std::cmp::Ordering {
    if (viol_a - viol_b).abs() > 1e-12 {
        viol_a.total_cmp(&viol_b)
    } else {
        dist_a.total_cmp(&dist_b)
    }
}

/// Replaces rotational coordinates by the equivalent representation that respects
/// the coordinate ranges best, preferring the one nearest `reference`. Three-axis
/// joints with orthogonal axes also admit the alias `(a + pi, pi - b, c + pi)`.
fn canonicalize_angles(model: &SkeletalModel, q: &mut [f64], reference: &[f64]) {
    use std::f64::consts::PI;
    let coords = model.coordinates();
    for seg in model.segments() {
        let triple = match &seg.joint {
            JointKind::Free => Some((zxy_axes(), &seg.coordinates[..3])),
            JointKind::Ball { axes } => Some((*axes, &seg.coordinates[..])),
            JointKind::Hinge { .. } => None,
        };
        let orthogonal =
            |axes: &[nalgebra::Unit<Vector3<f64>>; 3]| (0..3).all(|i| axes[i].dot(&axes[(i + 1) % 3]).abs() < 1e-9);
        match triple {
            Some((axes, idx)) if orthogonal(&axes) => {
                let [a, b, c] = [q[idx[0]], q[idx[1]], q[idx[2]]];
                let best = [[a, b, c], [a + PI, PI - b, c + PI]]
                    .into_iter()
                    .map(|cand| {
                        let w: Vec<_> =
                            idx.iter().zip(cand).map(|(&i, v)| best_wrap(&coords[i], v, reference[i])).collect();
                        let viol: f64 = w.iter().map(|x| x.1).sum();
                        let dist: f64 = w.iter().map(|x| x.2).sum();
                        (w, viol, dist)
                    })
                    .min_by(|x, y| better(x.1, x.2, y.1, y.2))
                    .expect("two candidates");
                for (&i, w) in idx.iter().zip(best.0) {
                    q[i] = w.0;
                }
            }
            _ => {
                for &i in &seg.coordinates {
                    if coords[i].is_rotational() {
                        q[i] = best_wrap(&coords[i], q[i], reference[i]).0;
                    }
                }
            }
        }
    }
}

/// Central-difference Jacobian of the weighted residual vector (3 rows per active
/// marker, in model marker order) with respect to `q`.
pub fn marker_jacobian(
    model: &SkeletalModel,
    scales: &ScaleSet,
    targets: &IkTargets,
    q: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    Ok(Problem::new(model, scales, targets)?.jacobian(q, step))
}

/// Result of solving a whole marker sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct IkReport {
    pub trajectory: JointAngleTrajectory,
    /// Frames whose solve hit the iteration or damping limit.
    pub not_converged: Vec<usize>,
    /// `(frame, coordinate)` pairs whose solution lies outside the coordinate range.
    pub bound_violations: Vec<(usize, String)>,
    /// Accepted-step objective trace of every frame.
    pub objective_traces: Vec<Vec<f64>>,
}

/// Neutral start with the root translated onto the target centroid.
fn neutral_start(model: &SkeletalModel, scales: &ScaleSet, targets: &IkTargets) -> Vec<f64> {
    let mut q = vec![0.0; model.coordinates().len()];
    let neutral = model.marker_positions(scales, &q);
    let active = targets.active();
    if active.is_empty() {
        return q;
    }
    let mut shift = Vector3::zeros();
    for &i in &active {
        shift += targets.positions[i].unwrap() - neutral[i];
    }
    shift /= active.len() as f64;
    let root = model.root_coordinates();
    for k in 0..3 {
        q[root[3 + k]] = shift[k];
    }
    q
}

/// Neutral limbs with the root placed by a rigid fit of the root segment's markers
/// onto their targets. `None` when fewer than three non-collinear root markers are seen.
fn registered_start(model: &SkeletalModel, scales: &ScaleSet, targets: &IkTargets) -> Option<Vec<f64>> {
    let mut q = vec![0.0; model.coordinates().len()];
    let root = model.root();
    let origin = model.segment_transforms(scales, &q)[root].translation;
    let neutral = model.marker_positions(scales, &q);
    let (local, seen): (Vec<_>, Vec<_>) = targets
        .active()
        .into_iter()
        .filter(|&i| model.markers()[i].segment == root)
        .map(|i| (neutral[i] - origin, targets.positions[i].unwrap()))
        .unzip();
    if local.len() < 3 || collinear(&local) {
        return None;
    }
    let n = local.len() as f64;
    let lc = local.iter().sum::<Vector3<f64>>() / n;
    let sc = seen.iter().sum::<Vector3<f64>>() / n;
    let cov = local.iter().zip(&seen).fold(Matrix3::zeros(), |acc, (l, s)| acc + (s - sc) * (l - lc).transpose());
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let t = sc - r * lc - origin;
    let angles = euler_zxy_from_matrix(&r);
    let c = model.root_coordinates();
    for k in 0..3 {
        q[c[k]] = angles[k];
        q[c[3 + k]] = t[k];
    }
    Some(q)
}

fn targets_at_frame(
    model: &SkeletalModel,
    series: &TimeSeries,
    channels: &[Option<[usize; 3]>],
    frame: usize,
) -> IkTargets {
    let row = series.frame(frame);
    let positions = channels
        .iter()
        .map(|c| {
            c.and_then(|[x, y, z]| {
                let p = Vector3::new(row[x], row[y], row[z]);
                p.iter().all(|v| v.is_finite()).then_some(p)
            })
        })
        .collect();
    IkTargets { positions, weights: model.markers().iter().map(|m| m.weight).collect() }
}

/// Channel triplet `{name}.x/.y/.z` of each model marker, if present.
pub fn marker_channels(model: &SkeletalModel, series: &TimeSeries) -> Vec<Option<[usize; 3]>> {
    model
        .markers()
        .iter()
        .map(|m| {
            let x = series.channel_index(&format!("{}.x", m.name))?;
            let y = series.channel_index(&format!("{}.y", m.name))?;
            let z = series.channel_index(&format!("{}.z", m.name))?;
            Some([x, y, z])
        })
        .collect()
}

/// Re-solves once from the solution clamped into the coordinate ranges and keeps
/// the lower objective. Escapes flipped-limb minima; a pose that is truly out of
/// range keeps its original solution.
fn retry_in_range(
    model: &SkeletalModel,
    scales: &ScaleSet,
    targets: &IkTargets,
    solution: IkSolution,
    opts: &IkOptions,
) -> Result<IkSolution> {
    let coords = model.coordinates();
    if coords.iter().zip(&solution.q).all(|(c, v)| c.in_range(*v)) {
        return Ok(solution);
    }
    let clamped: Vec<f64> =
        coords.iter().zip(&solution.q).map(|(c, v)| c.range.map_or(*v, |(lo, hi)| v.clamp(lo, hi))).collect();
    let retry = solve_ik_frame(model, scales, targets, &clamped, opts)?;
    Ok(if retry.objective < solution.objective { retry } else { solution })
}

/// Solves every frame of a 3D marker series (channels `name.x`, `name.y`, `name.z`,
/// meters). The first frame keeps the best of several starts: neutral, each root
/// rotation offset both ways, and a rigid fit of the root markers. Later frames are
/// warm-started from the previous solution.
pub fn solve_ik_trajectory(
    model: &SkeletalModel,
    scales: &ScaleSet,
    marker_series: &TimeSeries,
    opts: &IkOptions,
) -> Result<IkReport> {
    let mut trajectory = JointAngleTrajectory::for_model(model, marker_series.rate(), 0.0);
    let mut report = IkReport {
        trajectory: trajectory.clone(),
        not_converged: Vec::new(),
        bound_violations: Vec::new(),
        objective_traces: Vec::new(),
    };
    let channels = marker_channels(model, marker_series);
    let mut previous: Option<Vec<f64>> = None;

    for frame in 0..marker_series.frame_count() {
        let targets = targets_at_frame(model, marker_series, &channels, frame);
        let at_frame = |e: SkeletalError| SkeletalError::AtFrame { frame, source: Box::new(e) };
        let solution = match &previous {
            Some(q) => solve_ik_frame(model, scales, &targets, q, opts).map_err(at_frame)?,
            None => {
                let base = neutral_start(model, scales, &targets);
                let mut starts = vec![base.clone()];
                for &c in &model.root_coordinates()[..3] {
                    for sign in [1.0, -1.0] {
                        let mut s = base.clone();
                        s[c] += sign * opts.multi_start_offset;
                        starts.push(s);
                    }
                }
                starts.extend(registered_start(model, scales, &targets));
                let mut best: Option<IkSolution> = None;
                for s in &starts {
                    let sol = solve_ik_frame(model, scales, &targets, s, opts).map_err(at_frame)?;
                    if best.as_ref().is_none_or(|b| sol.objective < b.objective) {
                        best = Some(sol);
                    }
                }
                best.expect("at least one start")
            }
        };

        let solution = retry_in_range(model, scales, &targets, solution, opts).map_err(at_frame)?;
        if solution.status == SolveStatus::NotConverged {
            report.not_converged.push(frame);
        }
        for (c, v) in model.coordinates().iter().zip(&solution.q) {
            if !c.in_range(*v) {
                report.bound_violations.push((frame, c.name.clone()));
            }
        }
        trajectory.push_frame(&JointAngleTrajectory::to_report_units(model, &solution.q), Some(solution.residual));
        report.objective_traces.push(solution.objective_trace.clone());
        previous = Some(solution.q);
    }
    report.trajectory = trajectory;
    Ok(report)
}

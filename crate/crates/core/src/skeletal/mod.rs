//! Kinematic chain of rigid segments with markers, the coordinate set used by the
//! benchmark, and the joint-angle trajectory type produced by inverse kinematics.
//!
//! Conventions: y is up, x is forward and z points to the subject's right. Free and
//! ball joints rotate with intrinsic Z-X-Y sequences, so for the pelvis the three
//! rotational coordinates are tilt, list and rotation, and for hips and lumbar they
//! are flexion/extension, adduction/bending and axial rotation.

mod ik;
mod scaling;

pub use ik::{
    marker_channels, marker_jacobian, solve_ik_frame, solve_ik_trajectory, IkOptions, IkReport, IkSolution, IkTargets,
    SolveStatus,
};
pub use scaling::{scale_model, ScaleSet, ScalingPair, MAX_SCALE, MIN_SCALE};

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Point3D;
use crate::rotation::{axis_rotation, intrinsic_sequence, zxy_axes, RigidTransform};

/// Tolerance on hinge-axis length.
pub const AXIS_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SkeletalError {
    #[error("failed to parse skeletal model: {0}")]
    Parse(String),
    #[error("invalid skeletal model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coordinate `{name}` = {value} is outside [{min}, {max}]")]
    CoordinateOutOfBounds { name: String, value: f64, min: f64, max: f64 },
    #[error("marker `{0}` is missing")]
    MissingMarker(String),
    #[error("model distance between `{0}` and `{1}` is zero")]
    ZeroDefaultDistance(String, String),
    #[error("scale {scale} for segment `{segment}` is outside [0.5, 2.0]")]
    ScaleOutOfRange { segment: String, scale: f64 },
    #[error("only {0} usable marker targets; at least 4 non-collinear are required")]
    TooFewMarkers(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<SkeletalError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SkeletalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateUnit {
    #[serde(rename = "rad")]
    Radians,
    #[serde(rename = "m")]
    Meters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub name: String,
    pub unit: CoordinateUnit,
    pub range: Option<(f64, f64)>,
}

impl Coordinate {
    pub fn is_rotational(&self) -> bool {
        self.unit == CoordinateUnit::Radians
    }

    pub fn in_range(&self, value: f64) -> bool {
        self.range.is_none_or(|(lo, hi)| value >= lo && value <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JointKind {
    /// Three rotations (Z-X-Y) then three translations in the parent frame.
    Free,
    /// Three intrinsic rotations about the given axes.
    Ball {
        axes: [Unit<Vector3<f64>>; 3],
    },
    Hinge {
        axis: Unit<Vector3<f64>>,
    },
}

impl JointKind {
    pub fn dof(&self) -> usize {
        match self {
            JointKind::Free => 6,
            JointKind::Ball { .. } => 3,
            JointKind::Hinge { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub parent: Option<usize>,
    /// Joint location in the parent frame, meters, before scaling.
    pub offset: Vector3<f64>,
    pub joint_name: String,
    pub joint: JointKind,
    /// Indices into the model's coordinate list, in joint order.
    pub coordinates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub name: String,
    pub segment: usize,
    pub offset: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SkeletalModel {
    name: String,
    segments: Vec<Segment>,
    coordinates: Vec<Coordinate>,
    markers: Vec<Marker>,
    scaling_pairs: Vec<ScalingPair>,
    // parents before children
    order: Vec<usize>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ModelFile {
    #[serde(default)]
    name: String,
    segments: Vec<SegmentFile>,
    joints: Vec<JointFile>,
    coordinates: Vec<CoordinateFile>,
    markers: Vec<MarkerFile>,
    #[serde(default)]
    scaling_pairs: Vec<ScalingPairFile>,
}

#[derive(Debug, Deserialize, Serialize)]
struct SegmentFile {
    name: String,
    parent: Option<String>,
    offset: [f64; 3],
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum JointType {
    Free,
    Ball,
    Hinge,
}

#[derive(Debug, Deserialize, Serialize)]
struct JointFile {
    name: String,
    segment: String,
    #[serde(rename = "type")]
    kind: JointType,
    coordinates: Vec<String>,
    #[serde(default)]
    axes: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    axis: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CoordinateFile {
    name: String,
    unit: CoordinateUnit,
    #[serde(default)]
    range: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize, Serialize)]
struct MarkerFile {
    name: String,
    segment: String,
    offset: [f64; 3],
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize, Serialize)]
struct ScalingPairFile {
    segment: String,
    markers: Vec<[String; 2]>,
}

fn unit_axis(v: [f64; 3], what: &str) -> Result<Unit<Vector3<f64>>> {
    let v = Vector3::from(v);
    if (v.norm() - 1.0).abs() > AXIS_NORM_TOLERANCE {
        return Err(SkeletalError::InvalidModel(format!("{what} axis {v:?} is not unit length")));
    }
    Ok(Unit::new_unchecked(v))
}

impl SkeletalModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| SkeletalError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// The bundled lower-body + lumbar model with 21 coordinates and 35 markers.
    pub fn default_benchmark() -> Self {
        Self::from_json_str(include_str!("../../data/default_skeleton.json")).expect("bundled model is valid")
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        let invalid = |m: String| SkeletalError::InvalidModel(m);

        let mut seg_index = HashMap::new();
        for (i, s) in file.segments.iter().enumerate() {
            if seg_index.insert(s.name.clone(), i).is_some() {
                return Err(invalid(format!("duplicate segment `{}`", s.name)));
            }
        }
        let mut coord_index = HashMap::new();
        let mut coordinates = Vec::with_capacity(file.coordinates.len());
        for (i, c) in file.coordinates.iter().enumerate() {
            if coord_index.insert(c.name.clone(), i).is_some() {
                return Err(invalid(format!("duplicate coordinate `{}`", c.name)));
            }
            let range = match c.range {
                Some([lo, hi]) if lo <= hi => Some((lo, hi)),
                Some(r) => return Err(invalid(format!("coordinate `{}` has inverted range {r:?}", c.name))),
                None => None,
            };
            coordinates.push(Coordinate { name: c.name.clone(), unit: c.unit, range });
        }

        let mut joints: Vec<Option<(String, JointKind, Vec<usize>)>> = vec![None; file.segments.len()];
        let mut coord_used = vec![false; coordinates.len()];
        for j in &file.joints {
            let &seg = seg_index
                .get(&j.segment)
                .ok_or_else(|| invalid(format!("joint `{}` refers to unknown segment `{}`", j.name, j.segment)))?;
            if joints[seg].is_some() {
                return Err(invalid(format!("segment `{}` has more than one joint", j.segment)));
            }
            let kind = match j.kind {
                JointType::Free => JointKind::Free,
                JointType::Ball => JointKind::Ball {
                    axes: match j.axes {
                        Some(a) => [unit_axis(a[0], &j.name)?, unit_axis(a[1], &j.name)?, unit_axis(a[2], &j.name)?],
                        None => zxy_axes(),
                    },
                },
                JointType::Hinge => JointKind::Hinge {
                    axis: unit_axis(
                        j.axis.ok_or_else(|| invalid(format!("hinge `{}` has no axis", j.name)))?,
                        &j.name,
                    )?,
                },
            };
            if j.coordinates.len() != kind.dof() {
                return Err(invalid(format!(
                    "joint `{}` needs {} coordinates, got {}",
                    j.name,
                    kind.dof(),
                    j.coordinates.len()
                )));
            }
            let mut idx = Vec::with_capacity(kind.dof());
            for (k, c) in j.coordinates.iter().enumerate() {
                let &ci = coord_index
                    .get(c)
                    .ok_or_else(|| invalid(format!("joint `{}` uses unknown coordinate `{c}`", j.name)))?;
                if std::mem::replace(&mut coord_used[ci], true) {
                    return Err(invalid(format!("coordinate `{c}` is used by two joints")));
                }
                let expected = match kind {
                    JointKind::Free if k >= 3 => CoordinateUnit::Meters,
                    _ => CoordinateUnit::Radians,
                };
                if coordinates[ci].unit != expected {
                    return Err(invalid(format!("coordinate `{c}` of joint `{}` has the wrong unit", j.name)));
                }
                idx.push(ci);
            }
            joints[seg] = Some((j.name.clone(), kind, idx));
        }
        if let Some(i) = coord_used.iter().position(|u| !u) {
            return Err(invalid(format!("coordinate `{}` is not used by any joint", coordinates[i].name)));
        }

        let mut segments = Vec::with_capacity(file.segments.len());
        for (s, joint) in file.segments.iter().zip(joints) {
            let parent = match &s.parent {
                None => None,
                Some(p) => Some(
                    *seg_index
                        .get(p)
                        .ok_or_else(|| invalid(format!("segment `{}` has unknown parent `{p}`", s.name)))?,
                ),
            };
            let (joint_name, joint, coords) =
                joint.ok_or_else(|| invalid(format!("segment `{}` has no joint", s.name)))?;
            segments.push(Segment {
                name: s.name.clone(),
                parent,
                offset: Vector3::from(s.offset),
                joint_name,
                joint,
                coordinates: coords,
            });
        }
        let order = segment_order(&segments)?;

        let mut markers = Vec::with_capacity(file.markers.len());
        let mut marker_names = HashMap::new();
        for m in &file.markers {
            let &segment = seg_index
                .get(&m.segment)
                .ok_or_else(|| invalid(format!("marker `{}` on unknown segment `{}`", m.name, m.segment)))?;
            if !(m.weight >= 0.0 && m.weight.is_finite()) {
                return Err(invalid(format!("marker `{}` has invalid weight {}", m.name, m.weight)));
            }
            if marker_names.insert(m.name.clone(), markers.len()).is_some() {
                return Err(invalid(format!("duplicate marker `{}`", m.name)));
            }
            markers.push(Marker { name: m.name.clone(), segment, offset: Vector3::from(m.offset), weight: m.weight });
        }

        let mut scaling_pairs = Vec::new();
        for p in file.scaling_pairs {
            if !seg_index.contains_key(&p.segment) {
                return Err(invalid(format!("scaling pairs refer to unknown segment `{}`", p.segment)));
            }
            for [a, b] in p.markers {
                scaling_pairs.push(ScalingPair { segment: p.segment.clone(), marker_a: a, marker_b: b });
            }
        }

        Ok(Self { name: file.name, segments, coordinates, markers, scaling_pairs, order })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn coordinates(&self) -> &[Coordinate] {
        &self.coordinates
    }

    pub fn coordinate_names(&self) -> Vec<String> {
        self.coordinates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn coordinate_index(&self, name: &str) -> Option<usize> {
        self.coordinates.iter().position(|c| c.name == name)
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn marker_names(&self) -> Vec<String> {
        self.markers.iter().map(|m| m.name.clone()).collect()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Default scaling marker pairs bundled with the model file.
    pub fn scaling_pairs(&self) -> &[ScalingPair] {
        &self.scaling_pairs
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Root free-joint coordinates, rotations first: tilt, list, rotation, tx, ty, tz.
    pub fn root_coordinates(&self) -> &[usize] {
        &self.segments[self.root()].coordinates
    }

    /// Segment indices with parents listed before children.
    pub fn segment_order(&self) -> &[usize] {
        &self.order
    }

    /// Replaces the weight of named markers.
    pub fn set_marker_weights(&mut self, weights: &HashMap<String, f64>) -> Result<()> {
        for (name, w) in weights {
            let i = self.marker_index(name).ok_or_else(|| SkeletalError::MissingMarker(name.clone()))?;
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(SkeletalError::InvalidArgument(format!("weight for `{name}` must be >= 0")));
            }
            self.markers[i].weight = *w;
        }
        Ok(())
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.coordinates.len() {
            return Err(SkeletalError::DimensionMismatch(format!(
                "expected {} coordinates, got {}",
                self.coordinates.len(),
                q.len()
            )));
        }
        Ok(())
    }

    fn check_scales(&self, scales: &ScaleSet) -> Result<()> {
        if scales.len() != self.segments.len() {
            return Err(SkeletalError::DimensionMismatch(format!(
                "expected {} segment scales, got {}",
                self.segments.len(),
                scales.len()
            )));
        }
        Ok(())
    }

    fn joint_transform(&self, seg: &Segment, scale_parent: f64, q: &[f64]) -> RigidTransform {
        let c = &seg.coordinates;
        let origin = seg.offset * scale_parent;
        match &seg.joint {
            JointKind::Free => RigidTransform::new(
                intrinsic_sequence(&zxy_axes(), [q[c[0]], q[c[1]], q[c[2]]]),
                origin + Vector3::new(q[c[3]], q[c[4]], q[c[5]]),
            ),
            JointKind::Ball { axes } => {
                RigidTransform::new(intrinsic_sequence(axes, [q[c[0]], q[c[1]], q[c[2]]]), origin)
            }
            JointKind::Hinge { axis } => RigidTransform::new(axis_rotation(axis, q[c[0]]), origin),
        }
    }

    /// World transform of every segment frame. No bounds or length checks.
    pub fn segment_transforms(&self, scales: &ScaleSet, q: &[f64]) -> Vec<RigidTransform> {
        let mut world = vec![RigidTransform::identity(); self.segments.len()];
        for &s in &self.order {
            let seg = &self.segments[s];
            world[s] = match seg.parent {
                None => self.joint_transform(seg, 1.0, q),
                Some(p) => world[p].compose(&self.joint_transform(seg, scales.get(p), q)),
            };
        }
        world
    }

    /// Marker world positions in model order, without bounds checking.
    pub fn marker_positions(&self, scales: &ScaleSet, q: &[f64]) -> Vec<Vector3<f64>> {
        let world = self.segment_transforms(scales, q);
        self.markers.iter().map(|m| world[m.segment].apply(&(m.offset * scales.get(m.segment)))).collect()
    }
}

fn segment_order(segments: &[Segment]) -> Result<Vec<usize>> {
    let roots: Vec<usize> = (0..segments.len()).filter(|&i| segments[i].parent.is_none()).collect();
    if roots.len() != 1 {
        return Err(SkeletalError::InvalidModel(format!("expected exactly one root segment, found {}", roots.len())));
    }
    if segments[roots[0]].joint != JointKind::Free {
        return Err(SkeletalError::InvalidModel("root segment must have a free joint".into()));
    }
    let mut children = vec![Vec::new(); segments.len()];
    for (i, s) in segments.iter().enumerate() {
        if let Some(p) = s.parent {
            children[p].push(i);
        }
    }
    let mut order = Vec::with_capacity(segments.len());
    let mut queue = std::collections::VecDeque::from([roots[0]]);
    while let Some(s) = queue.pop_front() {
        order.push(s);
        queue.extend(children[s].iter().copied());
    }
    if order.len() != segments.len() {
        return Err(SkeletalError::InvalidModel("segment graph is not a tree".into()));
    }
    Ok(order)
}

/// World positions of all markers, checking `q` length and hinge bounds.
pub fn fk_markers(model: &SkeletalModel, scales: &ScaleSet, q: &[f64]) -> Result<Vec<(String, Point3D)>> {
    model.check_q(q)?;
    model.check_scales(scales)?;
    for seg in &model.segments {
        if let JointKind::Hinge { .. } = seg.joint {
            let c = &model.coordinates[seg.coordinates[0]];
            let value = q[seg.coordinates[0]];
            if let Some((min, max)) = c.range.filter(|_| !c.in_range(value)) {
                return Err(SkeletalError::CoordinateOutOfBounds { name: c.name.clone(), value, min, max });
            }
        }
    }
    Ok(model
        .markers
        .iter()
        .zip(model.marker_positions(scales, q))
        .map(|(m, p)| (m.name.clone(), Point3::from(p)))
        .collect())
}

/// Joint coordinates over time. Rotations are stored in degrees, translations in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngleTrajectory {
    pub rate: f64,
    pub start_time: f64,
    pub names: Vec<String>,
    pub rotational: Vec<bool>,
    /// Row-major, frames x coordinates.
    pub values: Vec<f64>,
    /// Per-frame RMS marker residual in meters; empty when unknown (e.g. parsed files).
    pub residuals: Vec<f64>,
}

impl JointAngleTrajectory {
    pub fn new(rate: f64, start_time: f64, names: Vec<String>, rotational: Vec<bool>) -> Self {
        Self { rate, start_time, names, rotational, values: Vec::new(), residuals: Vec::new() }
    }

    pub fn coordinate_count(&self) -> usize {
        self.names.len()
    }

    pub fn frame_count(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.values.len() / self.names.len()
        }
    }

    pub fn time(&self, frame: usize) -> f64 {
        self.start_time + frame as f64 / self.rate
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.frame_count().saturating_sub(1))
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        let n = self.names.len();
        &self.values[frame * n..(frame + 1) * n]
    }

    pub fn push_frame(&mut self, values: &[f64], residual: Option<f64>) {
        assert_eq!(values.len(), self.names.len(), "frame width must match coordinate count");
        self.values.extend_from_slice(values);
        if let Some(r) = residual {
            self.residuals.push(r);
        }
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let n = self.names.len();
        self.values.iter().skip(c).step_by(n).copied().collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.names.iter().position(|n| n == name).map(|c| self.column(c))
    }

    /// Converts a model-unit frame (radians) to reporting units (degrees).
    pub fn to_report_units(model: &SkeletalModel, q: &[f64]) -> Vec<f64> {
        model.coordinates().iter().zip(q).map(|(c, v)| if c.is_rotational() { v.to_degrees() } else { *v }).collect()
    }

    /// Converts a reporting-unit frame back to model units.
    pub fn to_model_units(model: &SkeletalModel, values: &[f64]) -> Vec<f64> {
        model
            .coordinates()
            .iter()
            .zip(values)
            .map(|(c, v)| if c.is_rotational() { v.to_radians() } else { *v })
            .collect()
    }

    /// Empty trajectory with the model's coordinate columns.
    pub fn for_model(model: &SkeletalModel, rate: f64, start_time: f64) -> Self {
        Self::new(
            rate,
            start_time,
            model.coordinate_names(),
            model.coordinates().iter().map(Coordinate::is_rotational).collect(),
        )
    }
}

//! SMPL-style blend body model: shape and pose blend shapes, joint regression,
//! forward kinematics and linear blend skinning.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Point3D;
use crate::rotation::{rodrigues, RigidTransform};

/// Tolerance on skinning and regressor row sums.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("failed to parse body model: {0}")]
    Parse(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid kinematic tree: {0}")]
    InvalidTree(String),
    #[error("vertex index {index} out of range for {count} vertices")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("duplicate keypoint name `{0}` in vertex subset")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BodyError>;

/// On-disk archive layout. All arrays are flat and row-major; `shape_dirs` and
/// `pose_dirs` are `V x 3 x S` and `V x 3 x 9(J-1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyModelArchive {
    pub vertex_count: usize,
    pub joint_count: usize,
    pub template: Vec<f64>,
    pub shape_dirs: Vec<f64>,
    #[serde(default)]
    pub pose_dirs: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub skin_weights: Vec<f64>,
    pub parents: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct BlendBodyModel {
    template: Vec<Vector3<f64>>,
    shape_count: usize,
    shape_dirs: Vec<f64>,
    pose_dirs: Vec<f64>,
    joint_regressor: DMatrix<f64>,
    skin_weights: DMatrix<f64>,
    parents: Vec<Option<usize>>,
    // parents before children
    order: Vec<usize>,
}

impl BlendBodyModel {
    pub fn from_archive(a: BodyModelArchive) -> Result<Self> {
        let (v, j) = (a.vertex_count, a.joint_count);
        let mismatch = |what: &str, got: usize, want: usize| {
            BodyError::DimensionMismatch(format!("{what}: expected {want} values, got {got}"))
        };
        if v == 0 || j == 0 {
            return Err(BodyError::DimensionMismatch("vertex and joint counts must be positive".into()));
        }
        if a.template.len() != 3 * v {
            return Err(mismatch("template", a.template.len(), 3 * v));
        }
        if !a.shape_dirs.len().is_multiple_of(3 * v) {
            return Err(BodyError::DimensionMismatch(format!(
                "shape_dirs length {} is not a multiple of 3V = {}",
                a.shape_dirs.len(),
                3 * v
            )));
        }
        let pose_len = 3 * v * 9 * (j - 1);
        if !a.pose_dirs.is_empty() && a.pose_dirs.len() != pose_len {
            return Err(mismatch("pose_dirs", a.pose_dirs.len(), pose_len));
        }
        if a.joint_regressor.len() != j * v {
            return Err(mismatch("joint_regressor", a.joint_regressor.len(), j * v));
        }
        if a.skin_weights.len() != v * j {
            return Err(mismatch("skin_weights", a.skin_weights.len(), v * j));
        }
        if a.parents.len() != j {
            return Err(mismatch("parents", a.parents.len(), j));
        }
        let all =
            a.template.iter().chain(&a.shape_dirs).chain(&a.pose_dirs).chain(&a.joint_regressor).chain(&a.skin_weights);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(BodyError::Parse("non-finite value in archive".into()));
        }

        let skin_weights = DMatrix::from_row_slice(v, j, &a.skin_weights);
        for (row, w) in skin_weights.row_iter().enumerate() {
            if w.iter().any(|x| *x < 0.0) {
                return Err(BodyError::InvalidWeights(format!("skin weight row {row} has a negative entry")));
            }
            let s = w.sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(BodyError::InvalidWeights(format!("skin weight row {row} sums to {s}")));
            }
        }
        let joint_regressor = DMatrix::from_row_slice(j, v, &a.joint_regressor);
        for (row, w) in joint_regressor.row_iter().enumerate() {
            let s = w.sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(BodyError::InvalidWeights(format!("joint regressor row {row} sums to {s}")));
            }
        }

        let parents = parse_parents(&a.parents)?;
        let order = topological_order(&parents)?;
        let template = a.template.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        Ok(Self {
            template,
            shape_count: a.shape_dirs.len() / (3 * v),
            shape_dirs: a.shape_dirs,
            pose_dirs: a.pose_dirs,
            joint_regressor,
            skin_weights,
            parents,
            order,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let archive: BodyModelArchive = serde_json::from_str(s).map_err(|e| BodyError::Parse(e.to_string()))?;
        Self::from_archive(archive)
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_count
    }

    pub fn has_pose_correctives(&self) -> bool {
        !self.pose_dirs.is_empty()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn skin_weights(&self) -> &DMatrix<f64> {
        &self.skin_weights
    }

    pub fn joint_regressor(&self) -> &DMatrix<f64> {
        &self.joint_regressor
    }

    /// Template plus the shape blend offsets for `beta`.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        let s = self.shape_count;
        self.template
            .iter()
            .enumerate()
            .map(|(v, base)| {
                let mut p = *base;
                for c in 0..3 {
                    let dirs = &self.shape_dirs[(v * 3 + c) * s..(v * 3 + c + 1) * s];
                    p[c] += dirs.iter().zip(beta).map(|(d, b)| d * b).sum::<f64>();
                }
                p
            })
            .collect()
    }

    /// Rest-pose joint locations regressed from `vertices`.
    pub fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.joint_regressor
            .row_iter()
            .map(|w| w.iter().zip(vertices).fold(Vector3::zeros(), |acc, (wi, v)| acc + v * *wi))
            .collect()
    }

    fn check_params(&self, params: &BodyParams) -> Result<()> {
        if params.beta.len() != self.shape_count {
            return Err(BodyError::DimensionMismatch(format!(
                "beta has {} components, model has {}",
                params.beta.len(),
                self.shape_count
            )));
        }
        if params.theta.len() != 3 * self.joint_count() {
            return Err(BodyError::DimensionMismatch(format!(
                "theta has {} values, expected {}",
                params.theta.len(),
                3 * self.joint_count()
            )));
        }
        if params.beta.iter().chain(&params.theta).chain(params.translation.iter()).any(|x| !x.is_finite()) {
            return Err(BodyError::DimensionMismatch("non-finite body parameter".into()));
        }
        Ok(())
    }

    fn joint_rotations(&self, params: &BodyParams) -> Vec<Matrix3<f64>> {
        params.theta.chunks_exact(3).map(|w| rodrigues(&Vector3::new(w[0], w[1], w[2]))).collect()
    }

    /// World transforms of each joint before the global translation is applied.
    fn chain(&self, rest_joints: &[Vector3<f64>], rotations: &[Matrix3<f64>]) -> Vec<RigidTransform> {
        let mut world = vec![RigidTransform::identity(); self.joint_count()];
        for &j in &self.order {
            match self.parents[j] {
                None => world[j] = RigidTransform::new(rotations[j], rest_joints[j]),
                Some(p) => {
                    let local = RigidTransform::new(rotations[j], rest_joints[j] - rest_joints[p]);
                    world[j] = world[p].compose(&local);
                }
            }
        }
        world
    }
}

fn parse_parents(raw: &[i64]) -> Result<Vec<Option<usize>>> {
    let j = raw.len();
    raw.iter()
        .enumerate()
        .map(|(i, &p)| match (i, p) {
            (0, p) if p < 0 => Ok(None),
            (0, _) => Err(BodyError::InvalidTree("joint 0 must be the root (parent -1)".into())),
            (_, p) if p < 0 => {
                Err(BodyError::InvalidTree(format!("joint {i} has no parent; only joint 0 may be a root")))
            }
            (_, p) if p as usize >= j || p as usize == i => {
                Err(BodyError::InvalidTree(format!("joint {i} has invalid parent {p}")))
            }
            (_, p) => Ok(Some(p as usize)),
        })
        .collect()
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    for (j, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(j);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        return Err(BodyError::InvalidTree("parent array contains a cycle".into()));
    }
    Ok(order)
}

/// Loads and validates a JSON body-model archive.
pub fn load_body_model(path: impl AsRef<Path>) -> Result<BlendBodyModel> {
    BlendBodyModel::from_json_str(&std::fs::read_to_string(path)?)
}

/// Shape coefficients, per-joint axis-angle rotations and root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default = "zero_translation", with = "vec3")]
    pub translation: Vector3<f64>,
}

fn zero_translation() -> Vector3<f64> {
    Vector3::zeros()
}

mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

impl BodyParams {
    /// Zero shape, zero pose, zero translation.
    pub fn rest(model: &BlendBodyModel) -> Self {
        Self {
            beta: vec![0.0; model.shape_count()],
            theta: vec![0.0; 3 * model.joint_count()],
            translation: Vector3::zeros(),
        }
    }

    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::new(self.theta[3 * joint], self.theta[3 * joint + 1], self.theta[3 * joint + 2])
    }

    pub fn set_joint_rotation(&mut self, joint: usize, w: Vector3<f64>) {
        self.theta[3 * joint..3 * joint + 3].copy_from_slice(w.as_slice());
    }
}

/// World transform of every joint: rotation about the regressed rest location,
/// composed along the parent chain, then shifted by the global translation.
pub fn fk_joint_transforms(model: &BlendBodyModel, params: &BodyParams) -> Result<Vec<RigidTransform>> {
    model.check_params(params)?;
    let joints = model.regress_joints(&model.shaped_vertices(&params.beta));
    let world = model.chain(&joints, &model.joint_rotations(params));
    Ok(world.into_iter().map(|g| RigidTransform::new(g.rotation, g.translation + params.translation)).collect())
}

/// Posed mesh vertices in world coordinates via linear blend skinning.
pub fn pose_mesh(model: &BlendBodyModel, params: &BodyParams) -> Result<Vec<Point3D>> {
    model.check_params(params)?;
    let mut rest = model.shaped_vertices(&params.beta);
    let joints = model.regress_joints(&rest);
    let rotations = model.joint_rotations(params);

    if model.has_pose_correctives() {
        let features: Vec<f64> = rotations[1..]
            .iter()
            .flat_map(|r| {
                let d = r - Matrix3::identity();
                (0..3).flat_map(move |i| (0..3).map(move |k| d[(i, k)]))
            })
            .collect();
        let p = features.len();
        for (v, x) in rest.iter_mut().enumerate() {
            for c in 0..3 {
                let dirs = &model.pose_dirs[(v * 3 + c) * p..(v * 3 + c + 1) * p];
                x[c] += dirs.iter().zip(&features).map(|(d, f)| d * f).sum::<f64>();
            }
        }
    }

    // all skinning transforms are the identity; skinning is exact because rows sum to one
    if rotations.iter().all(|r| *r == Matrix3::identity()) {
        return Ok(rest.iter().map(|x| Point3::from(x + params.translation)).collect());
    }

    // skinning transforms G_j * T(-J_j), flattened to [R | t] rows for a single product with W
    let world = model.chain(&joints, &rotations);
    let jc = model.joint_count();
    let mut stacked = DMatrix::zeros(jc, 12);
    for (j, g) in world.iter().enumerate() {
        let t = g.translation - g.rotation * joints[j];
        for r in 0..3 {
            for c in 0..3 {
                stacked[(j, 4 * r + c)] = g.rotation[(r, c)];
            }
            stacked[(j, 4 * r + 3)] = t[r];
        }
    }
    let blended = &model.skin_weights * stacked;

    Ok(rest
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let m = blended.row(v);
            let out = Vector3::new(
                m[0] * x.x + m[1] * x.y + m[2] * x.z + m[3],
                m[4] * x.x + m[5] * x.y + m[6] * x.z + m[7],
                m[8] * x.x + m[9] * x.y + m[10] * x.z + m[11],
            );
            Point3::from(out + params.translation)
        })
        .collect())
}

/// Named vertex indices used as keypoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexSubset {
    entries: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubsetEntry {
    name: String,
    index: usize,
}

impl VertexSubset {
    pub fn new(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(BodyError::DuplicateName(name.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: Vec<SubsetEntry> = serde_json::from_str(s).map_err(|e| BodyError::Parse(e.to_string()))?;
        Self::new(raw.into_iter().map(|e| (e.name, e.index)).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let raw: Vec<SubsetEntry> =
            self.entries.iter().map(|(name, index)| SubsetEntry { name: name.clone(), index: *index }).collect();
        serde_json::to_string_pretty(&raw).expect("subset serializes")
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenates two subsets, keeping order; names must stay unique.
    pub fn concat(&self, other: &VertexSubset) -> Result<VertexSubset> {
        VertexSubset::new(self.entries.iter().chain(&other.entries).cloned().collect())
    }
}

/// Picks the subset's vertices in subset order.
pub fn select_vertices(vertices: &[Point3D], subset: &VertexSubset) -> Result<Vec<(String, Point3D)>> {
    subset
        .entries
        .iter()
        .map(|(name, index)| {
            vertices
                .get(*index)
                .map(|p| (name.clone(), *p))
                .ok_or(BodyError::IndexOutOfRange { index: *index, count: vertices.len() })
        })
        .collect()
}

/// The 24-vertex, 3-joint chain model bundled for tests and demos.
pub fn toy_model() -> BlendBodyModel {
    BlendBodyModel::from_json_str(include_str!("../data/toy_body.json")).expect("bundled toy model is valid")
}

/// Six-marker subset of the toy model.
pub fn toy_subset() -> VertexSubset {
    VertexSubset::from_json_str(include_str!("../data/toy_subset.json")).expect("bundled toy subset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn toy_archive() -> BodyModelArchive {
        serde_json::from_str(include_str!("../data/toy_body.json")).unwrap()
    }

    #[test]
    fn toy_model_loads() {
        let m = toy_model();
        assert_eq!((m.vertex_count(), m.joint_count(), m.shape_count()), (24, 3, 2));
        assert!(m.has_pose_correctives());
        assert_eq!(m.parents(), &[None, Some(0), Some(1)]);
    }

    #[test]
    fn skin_row_not_summing_to_one() {
        let mut a = toy_archive();
        a.skin_weights[0] = 0.8;
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::InvalidWeights(_))));
    }

    #[test]
    fn regressor_row_not_summing_to_one() {
        let mut a = toy_archive();
        a.joint_regressor[0] = 0.5;
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::InvalidWeights(_))));
    }

    #[test]
    fn truncated_archive() {
        let text = include_str!("../data/toy_body.json");
        let err = BlendBodyModel::from_json_str(&text[..text.len() / 2]).unwrap_err();
        assert!(matches!(err, BodyError::Parse(_)));
    }

    #[test]
    fn dimension_checks() {
        let mut a = toy_archive();
        a.joint_regressor.pop();
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::DimensionMismatch(_))));
        let mut a = toy_archive();
        a.pose_dirs.truncate(10);
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::DimensionMismatch(_))));
        let mut a = toy_archive();
        a.pose_dirs.clear();
        assert!(!BlendBodyModel::from_archive(a).unwrap().has_pose_correctives());
    }

    #[test]
    fn cyclic_parents_rejected() {
        let mut a = toy_archive();
        a.parents = vec![-1, 2, 1];
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::InvalidTree(_))));
        let mut a = toy_archive();
        a.parents = vec![0, 0, 1];
        assert!(matches!(BlendBodyModel::from_archive(a), Err(BodyError::InvalidTree(_))));
    }

    #[test]
    fn zero_pose_transforms_are_translations() {
        let m = toy_model();
        let params = BodyParams::rest(&m);
        let joints = m.regress_joints(m.template());
        for (g, j) in fk_joint_transforms(&m, &params).unwrap().iter().zip(&joints) {
            assert_eq!(g.rotation, Matrix3::identity());
            assert!((g.translation - j).norm() < 1e-15);
        }
    }

    #[test]
    fn root_quarter_turn_moves_child_offset() {
        let m = toy_model();
        let joints = m.regress_joints(m.template());
        let mut params = BodyParams::rest(&m);
        params.set_joint_rotation(0, Vector3::new(0.0, 0.0, FRAC_PI_2));
        let g = fk_joint_transforms(&m, &params).unwrap();
        let d = (joints[1] - joints[0]).x;
        let rel = g[1].translation - g[0].translation;
        assert!((rel - Vector3::new(0.0, d, 0.0)).norm() < 1e-12, "{rel:?}");
    }

    #[test]
    fn translation_shifts_all_joints() {
        let m = toy_model();
        let mut params = BodyParams::rest(&m);
        params.translation = Vector3::new(0.0, 0.0, 1.0);
        let joints = m.regress_joints(m.template());
        for (g, j) in fk_joint_transforms(&m, &params).unwrap().iter().zip(&joints) {
            assert!((g.translation - (j + Vector3::z())).norm() < 1e-15);
        }
    }

    #[test]
    fn rest_pose_is_template() {
        let m = toy_model();
        let mesh = pose_mesh(&m, &BodyParams::rest(&m)).unwrap();
        for (p, t) in mesh.iter().zip(m.template()) {
            assert_eq!(p.coords, *t);
        }
    }

    #[test]
    fn wrong_param_lengths() {
        let m = toy_model();
        let mut params = BodyParams::rest(&m);
        params.theta.push(0.0);
        assert!(matches!(pose_mesh(&m, &params), Err(BodyError::DimensionMismatch(_))));
        let mut params = BodyParams::rest(&m);
        params.beta.clear();
        assert!(matches!(fk_joint_transforms(&m, &params), Err(BodyError::DimensionMismatch(_))));
    }

    #[test]
    fn select_vertices_cases() {
        let mesh: Vec<Point3D> = (0..6890).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let subset = VertexSubset::new((0..35).map(|i| (format!("m{i}"), i * 190)).collect()).unwrap();
        let picked = select_vertices(&mesh, &subset).unwrap();
        assert_eq!(picked.len(), 35);
        assert_eq!(picked[3], ("m3".to_string(), Point3::new(570.0, 0.0, 0.0)));

        let empty = VertexSubset::new(vec![]).unwrap();
        assert!(select_vertices(&mesh, &empty).unwrap().is_empty());

        let bad = VertexSubset::new(vec![("x".into(), 6890)]).unwrap();
        assert!(matches!(select_vertices(&mesh, &bad), Err(BodyError::IndexOutOfRange { index: 6890, count: 6890 })));
    }

    #[test]
    fn subset_rejects_duplicate_names() {
        let err = VertexSubset::new(vec![("a".into(), 1), ("a".into(), 2)]).unwrap_err();
        assert!(matches!(err, BodyError::DuplicateName(_)));
    }

    #[test]
    fn params_json_roundtrip() {
        let m = toy_model();
        let mut p = BodyParams::rest(&m);
        p.translation = Vector3::new(0.1, -0.2, 3.0);
        p.theta[4] = 0.25;
        let back: BodyParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}

//! Synthetic 2D keypoint labels from a posed body model, COCO export, and the
//! balanced multi-dataset batch sampler.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::body::{pose_mesh, select_vertices, BlendBodyModel, BodyError, BodyParams, VertexSubset};
use crate::camera::{project_point, CameraError, CameraModel};
use crate::formats::write_atomic;

pub const DEFAULT_BBOX_MARGIN: f64 = 0.1;

pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no keypoint is in front of the camera and inside the image")]
    NoVisibleKeypoints,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Ordered, unique keypoint names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointSchema {
    names: Vec<String>,
}

impl KeypointSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(SynthError::SchemaMismatch(format!("duplicate keypoint name `{dup}`")));
        }
        Ok(Self { names })
    }

    pub fn coco17() -> Self {
        Self { names: COCO_KEYPOINTS.iter().map(|s| s.to_string()).collect() }
    }

    /// The 17 COCO keypoints followed by the subset's names.
    pub fn coco_with_subset(subset: &VertexSubset) -> Result<Self> {
        Self::new(COCO_KEYPOINTS.iter().map(|s| s.to_string()).chain(subset.names().map(String::from)).collect())
    }

    pub fn from_subset(subset: &VertexSubset) -> Self {
        Self { names: subset.names().map(String::from).collect() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Visibility {
    NotLabeled = 0,
    Occluded = 1,
    Visible = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedKeypoint {
    pub u: f64,
    pub v: f64,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub keypoints: Vec<AnnotatedKeypoint>,
    pub num_visible: usize,
}

impl AnnotationRecord {
    /// Prepends `n` unlabeled keypoints, e.g. COCO body joints the generator does not produce.
    pub fn with_leading_unlabeled(mut self, n: usize) -> Self {
        let pad = (0..n).map(|_| AnnotatedKeypoint { u: 0.0, v: 0.0, visibility: Visibility::NotLabeled });
        self.keypoints.splice(0..0, pad);
        self
    }
}

/// Poses the body, projects the subset's vertices and labels each one visible when
/// it lies in front of the camera and inside the image. Points behind the camera
/// are reported at (0, 0). The box spans the visible keypoints, grown by `margin`
/// of its size and clipped to the image.
pub fn annotate_frame(
    model: &BlendBodyModel,
    params: &BodyParams,
    subset: &VertexSubset,
    cam: &CameraModel,
    image_id: u64,
    margin: f64,
) -> Result<AnnotationRecord> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(SynthError::InvalidArgument(format!("margin must be non-negative, got {margin}")));
    }
    let vertices = pose_mesh(model, params)?;
    let points = select_vertices(&vertices, subset)?;
    let keypoints: Vec<AnnotatedKeypoint> = points
        .iter()
        .map(|(_, p)| match project_point(cam, p) {
            Ok(obs) => {
                let visibility =
                    if cam.contains_pixel(obs.u, obs.v) { Visibility::Visible } else { Visibility::Occluded };
                AnnotatedKeypoint { u: obs.u, v: obs.v, visibility }
            }
            Err(_) => AnnotatedKeypoint { u: 0.0, v: 0.0, visibility: Visibility::Occluded },
        })
        .collect();

    let visible: Vec<&AnnotatedKeypoint> = keypoints.iter().filter(|k| k.visibility == Visibility::Visible).collect();
    if visible.is_empty() {
        return Err(SynthError::NoVisibleKeypoints);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in &visible {
        x0 = x0.min(k.u);
        y0 = y0.min(k.v);
        x1 = x1.max(k.u);
        y1 = y1.max(k.v);
    }
    let (gx, gy) = (0.5 * margin * (x1 - x0), 0.5 * margin * (y1 - y0));
    let (w, h) = cam.image_size();
    let (x0, y0) = ((x0 - gx).max(0.0), (y0 - gy).max(0.0));
    let (x1, y1) = ((x1 + gx).min(w as f64), (y1 + gy).min(h as f64));

    Ok(AnnotationRecord { image_id, bbox: [x0, y0, x1 - x0, y1 - y0], num_visible: visible.len(), keypoints })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// Writes floats with exactly two decimals so output bytes depend only on the values.
struct FixedFloat;

impl serde_json::ser::Formatter for FixedFloat {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        let s = format!("{value:.2}");
        writer.write_all(if s == "-0.00" { b"0.00" } else { s.as_bytes() })
    }
}

/// COCO keypoint JSON with sorted keys and two-decimal pixel values.
pub fn coco_json_string(records: &[AnnotationRecord], schema: &KeypointSchema, images: &[ImageInfo]) -> Result<String> {
    let mut annotations = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.keypoints.len() != schema.len() {
            return Err(SynthError::SchemaMismatch(format!(
                "record {i} has {} keypoints, schema has {}",
                r.keypoints.len(),
                schema.len()
            )));
        }
        let flat: Vec<Value> =
            r.keypoints.iter().flat_map(|k| [json!(k.u), json!(k.v), json!(k.visibility as u8)]).collect();
        annotations.push(json!({
            "id": i as u64 + 1,
            "image_id": r.image_id,
            "category_id": 1,
            "iscrowd": 0,
            "bbox": r.bbox.to_vec(),
            "area": r.bbox[2] * r.bbox[3],
            "num_keypoints": r.num_visible,
            "keypoints": flat,
        }));
    }
    let doc = json!({
        "images": images,
        "annotations": annotations,
        "categories": [{
            "id": 1,
            "name": "person",
            "supercategory": "person",
            "keypoints": schema.names(),
            "skeleton": [],
        }],
    });
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloat);
    doc.serialize(&mut ser).expect("in-memory serialization");
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn write_coco_annotations(
    records: &[AnnotationRecord],
    schema: &KeypointSchema,
    images: &[ImageInfo],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = coco_json_string(records, schema, images)?;
    write_atomic(path, text.as_bytes()).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: String,
    pub camera: String,
    pub params: BodyParams,
}

/// Frames to label. Camera paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cameras: BTreeMap<String, String>,
    pub frames: Vec<ManifestFrame>,
}

impl DatasetManifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_str(&text)
    }

    /// Loads every referenced camera, resolving paths against `base_dir`.
    pub fn load_cameras(&self, base_dir: &Path) -> Result<HashMap<String, CameraModel>> {
        self.cameras.iter().map(|(name, file)| Ok((name.clone(), CameraModel::load(base_dir.join(file))?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub records: Vec<AnnotationRecord>,
    /// Manifest frames without any visible keypoint.
    pub skipped: Vec<usize>,
}

/// Labels every manifest frame in parallel. `leading_unlabeled` pads each record
/// at the front so it matches a schema whose tail is the subset.
pub fn annotate_manifest(
    model: &BlendBodyModel,
    subset: &VertexSubset,
    manifest: &DatasetManifest,
    cameras: &HashMap<String, CameraModel>,
    margin: f64,
    leading_unlabeled: usize,
) -> Result<AnnotationSet> {
    let results: Vec<Result<Option<(ImageInfo, AnnotationRecord)>>> = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let cam = cameras
                .get(&frame.camera)
                .ok_or_else(|| SynthError::InvalidArgument(format!("frame {i}: unknown camera `{}`", frame.camera)))?;
            let id = i as u64 + 1;
            match annotate_frame(model, &frame.params, subset, cam, id, margin) {
                Ok(r) => {
                    let (width, height) = cam.image_size();
                    let info = ImageInfo { id, file_name: frame.image.clone(), width, height };
                    Ok(Some((info, r.with_leading_unlabeled(leading_unlabeled))))
                }
                Err(SynthError::NoVisibleKeypoints) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut set = AnnotationSet { images: Vec::new(), records: Vec::new(), skipped: Vec::new() };
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some((info, record)) => {
                set.images.push(info);
                set.records.push(record);
            }
            None => {
                log::warn!("manifest frame {i} has no visible keypoints; skipped");
                set.skipped.push(i);
            }
        }
    }
    Ok(set)
}

/// A sequence of `(dataset_index, sample_index)` draws grouped into batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub dataset_sizes: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub entries: Vec<(usize, usize)>,
}

impl BatchSchedule {
    pub fn batches(&self) -> impl Iterator<Item = &[(usize, usize)]> {
        self.entries.chunks(self.batch_size)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,dataset_index,sample_index\n");
        for (i, (d, s)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{},{d},{s}\n", i / self.batch_size));
        }
        out
    }
}

/// Round-robin over datasets; each dataset walks a seeded random permutation of
/// its indices that is reshuffled every time it is exhausted.
pub fn balanced_batch_schedule(
    dataset_sizes: &[usize],
    batch_size: usize,
    seed: u64,
    num_batches: usize,
) -> Result<BatchSchedule> {
    if dataset_sizes.is_empty() {
        return Err(SynthError::InvalidArgument("no datasets".into()));
    }
    if batch_size == 0 {
        return Err(SynthError::InvalidArgument("batch size must be at least 1".into()));
    }
    if let Some(d) = dataset_sizes.iter().position(|&n| n == 0) {
        return Err(SynthError::InvalidArgument(format!("dataset {d} is empty")));
    }

    struct Cursor {
        rng: ChaCha8Rng,
        order: Vec<usize>,
        next: usize,
    }
    let mut cursors: Vec<Cursor> = dataset_sizes
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            Cursor { rng, order: (0..n).collect(), next: n }
        })
        .collect();

    let total = batch_size * num_batches;
    let mut entries = Vec::with_capacity(total);
    for k in 0..total {
        let d = k % dataset_sizes.len();
        let c = &mut cursors[d];
        if c.next == c.order.len() {
            c.order.shuffle(&mut c.rng);
            c.next = 0;
        }
        entries.push((d, c.order[c.next]));
        c.next += 1;
    }
    Ok(BatchSchedule { dataset_sizes: dataset_sizes.to_vec(), batch_size, seed, entries })
}

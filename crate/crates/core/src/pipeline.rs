//! End-to-end trial processing: 2D keypoints from two calibrated cameras to joint
//! angles, scored against ground truth, with TRC/MOT/CSV/SVG artifacts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::camera::{triangulate_pair, undistort_point, CameraModel, KeypointObservation, Point3D};
use crate::formats::{self, export_trc, ingest_keypoints, parse_mot, read_trc, write_atomic, write_mot, xyz_channels};
use crate::metrics::{joint_angle_rmse, RmseReport};
use crate::signal::{butterworth_lowpass_zero_phase, fill_gaps, TimeSeries, DEFAULT_FILTER_ORDER};
use crate::skeletal::{
    scale_model, solve_ik_trajectory, IkOptions, IkReport, JointAngleTrajectory, ScaleSet, ScalingPair, SkeletalError,
    SkeletalModel,
};
use crate::synth::KeypointSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    GapFill,
    Undistort,
    Filter,
    Triangulate,
    Scale,
    InverseKinematics,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::GapFill => "gap-fill",
            Stage::Undistort => "undistort",
            Stage::Filter => "filter",
            Stage::Triangulate => "triangulate",
            Stage::Scale => "scale",
            Stage::InverseKinematics => "inverse-kinematics",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("trial `{trial}`, {stage} stage: {message}")]
    Stage { trial: String, stage: Stage, message: String },
}

impl PipelineError {
    /// Process exit code: 2 for validation failures, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage_err(trial: &str, stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError + '_ {
    move |e| PipelineError::Stage { trial: trial.to_string(), stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub cutoff_hz: f64,
    pub filter_order: usize,
    /// Longest interior gap, in frames, filled by interpolation.
    pub max_gap: usize,
    pub confidence_threshold: f64,
    pub marker_weights: BTreeMap<String, f64>,
    /// JSON list of keypoint names (or `{"name", ...}` objects); defaults to the model's markers.
    pub keypoint_schema: Option<PathBuf>,
    /// Skeletal model JSON; defaults to the bundled benchmark model.
    pub skeletal_model: Option<PathBuf>,
    /// Defaults to the model's own pairs.
    pub scaling_pairs: Option<Vec<ScalingPair>>,
    /// Length of the opening window averaged for scaling when no static trial is given.
    pub static_window_s: f64,
    pub allow_extreme_scales: bool,
    pub max_iterations: usize,
    pub output_dir: PathBuf,
    /// Concurrent trials; 0 uses one worker per core.
    pub workers: usize,
    pub plots: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cutoff_hz: 30.0,
            filter_order: DEFAULT_FILTER_ORDER,
            max_gap: 10,
            confidence_threshold: formats::DEFAULT_CONFIDENCE_THRESHOLD,
            marker_weights: BTreeMap::new(),
            keypoint_schema: None,
            skeletal_model: None,
            scaling_pairs: None,
            static_window_s: 0.5,
            allow_extreme_scales: false,
            max_iterations: 100,
            output_dir: PathBuf::from("out"),
            workers: 0,
            plots: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| PipelineError::Validation(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz.is_finite()) {
            return bad(format!("cutoff_hz must be positive, got {}", self.cutoff_hz));
        }
        if ![2, 4, 6].contains(&self.filter_order) {
            return bad(format!("filter_order must be 2, 4 or 6, got {}", self.filter_order));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad(format!("confidence_threshold must lie in [0, 1], got {}", self.confidence_threshold));
        }
        if !(self.static_window_s > 0.0) {
            return bad(format!("static_window_s must be positive, got {}", self.static_window_s));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        for p in self.keypoint_schema.iter().chain(&self.skeletal_model) {
            if !p.is_file() {
                return bad(format!("file not found: {}", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraInput {
    pub camera: PathBuf,
    pub keypoints: PathBuf,
    /// Frame of this camera's file that lines up with output frame 0.
    #[serde(default)]
    pub frame_offset: i64,
}

/// One trial on disk. Relative paths are resolved against the bundle file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialBundle {
    pub trial: String,
    #[serde(default)]
    pub subject: Option<String>,
    pub fps: f64,
    pub cameras: Vec<CameraInput>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// TRC of a neutral standing trial used for scaling instead of the opening window.
    #[serde(default)]
    pub static_trc: Option<PathBuf>,
}

impl TrialBundle {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let mut bundle: TrialBundle =
            serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut bundle.cameras {
            resolve(&mut c.camera);
            resolve(&mut c.keypoints);
        }
        bundle.ground_truth.as_mut().map(resolve);
        bundle.static_trc.as_mut().map(resolve);
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Validation(format!("trial `{}`: {m}", self.trial)));
        if self.trial.is_empty() || self.trial.contains(['/', '\\']) {
            return bad("trial id must be a non-empty file name".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.cameras.len() < 2 {
            return bad(format!("at least 2 cameras are required, got {}", self.cameras.len()));
        }
        let files = self
            .cameras
            .iter()
            .flat_map(|c| [&c.camera, &c.keypoints])
            .chain(&self.ground_truth)
            .chain(&self.static_trc);
        for f in files {
            if !f.is_file() {
                return bad(format!("file not found: {}", f.display()));
            }
        }
        Ok(())
    }
}

/// Model, schema and scaling pairs resolved from a configuration.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub config: PipelineConfig,
    pub model: SkeletalModel,
    pub schema: KeypointSchema,
    pub pairs: Vec<ScalingPair>,
}

fn load_schema(path: &Path) -> Result<KeypointSchema> {
    let invalid = |m: String| PipelineError::Validation(format!("{}: {m}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    let names = v
        .as_array()
        .ok_or_else(|| invalid("expected a JSON list".into()))?
        .iter()
        .map(|e| {
            e.as_str()
                .or_else(|| e.get("name").and_then(Value::as_str))
                .map(String::from)
                .ok_or_else(|| invalid("entries must be names or objects with a name".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    KeypointSchema::new(names).map_err(|e| invalid(e.to_string()))
}

impl PipelineContext {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut model = match &config.skeletal_model {
            Some(p) => {
                SkeletalModel::load(p).map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))?
            }
            None => SkeletalModel::default_benchmark(),
        };
        let weights: HashMap<String, f64> = config.marker_weights.iter().map(|(k, v)| (k.clone(), *v)).collect();
        model.set_marker_weights(&weights).map_err(|e| PipelineError::Validation(e.to_string()))?;
        let schema = match &config.keypoint_schema {
            Some(p) => load_schema(p)?,
            None => KeypointSchema::new(model.marker_names()).expect("model marker names are unique"),
        };
        let pairs = config.scaling_pairs.clone().unwrap_or_else(|| model.scaling_pairs().to_vec());
        Ok(Self { config, model, schema, pairs })
    }

    fn ik_options(&self) -> IkOptions {
        IkOptions { max_iterations: self.config.max_iterations, ..IkOptions::default() }
    }
}

/// One camera's calibration and raw keypoint series (`name.u/.v/.conf`).
#[derive(Debug, Clone)]
pub struct CameraStream {
    pub camera: CameraModel,
    pub keypoints: TimeSeries,
    pub frame_offset: i64,
}

/// A trial held in memory.
#[derive(Debug, Clone)]
pub struct TrialInputs {
    pub trial: String,
    pub streams: Vec<CameraStream>,
    pub ground_truth: Option<JointAngleTrajectory>,
    /// Neutral-trial markers (`name.x/.y/.z`) for scaling.
    pub static_markers: Option<TimeSeries>,
}

impl TrialInputs {
    pub fn load(bundle: &TrialBundle, ctx: &PipelineContext) -> Result<Self> {
        bundle.validate()?;
        let err = stage_err(&bundle.trial, Stage::Ingest);
        let mut streams = Vec::with_capacity(bundle.cameras.len());
        for c in &bundle.cameras {
            let camera = CameraModel::load(&c.camera).map_err(|e| PipelineError::Validation(e.to_string()))?;
            let keypoints = ingest_keypoints(&c.keypoints, &ctx.schema, ctx.config.confidence_threshold)
                .map_err(|e| err(&format!("{}: {e}", c.keypoints.display())))?;
            if (keypoints.rate() - bundle.fps).abs() > 1e-9 * bundle.fps {
                return Err(PipelineError::Validation(format!(
                    "{}: file fps {} differs from trial fps {}",
                    c.keypoints.display(),
                    keypoints.rate(),
                    bundle.fps
                )));
            }
            streams.push(CameraStream { camera, keypoints, frame_offset: c.frame_offset });
        }
        let ground_truth = bundle
            .ground_truth
            .as_ref()
            .map(|p| parse_mot(p, Some(&ctx.model)).map_err(|e| err(&format!("{}: {e}", p.display()))))
            .transpose()?;
        let static_markers = bundle
            .static_trc
            .as_ref()
            .map(|p| read_trc(p).map_err(|e| err(&format!("{}: {e}", p.display()))))
            .transpose()?;
        Ok(Self { trial: bundle.trial.clone(), streams, ground_truth, static_markers })
    }
}

fn shift_frames(ts: &TimeSeries, offset: i64) -> TimeSeries {
    let n = ts.frame_count() as i64;
    let len = (n - offset).max(0) as usize;
    let width = ts.channels().len();
    let mut data = vec![f64::NAN; len * width];
    for f in 0..len {
        let src = f as i64 + offset;
        if (0..n).contains(&src) {
            data[f * width..(f + 1) * width].copy_from_slice(ts.frame(src as usize));
        }
    }
    TimeSeries::new(ts.rate(), ts.channels().to_vec(), data).expect("shape preserved")
}

/// Gap fill, undistort and zero-phase filter one camera's pixel channels. Samples
/// that stay missing after gap filling are bridged for filtering and then
/// restored as NaN.
fn prepare_camera(
    trial: &str,
    stream: &CameraStream,
    schema: &KeypointSchema,
    config: &PipelineConfig,
) -> Result<TimeSeries> {
    let shifted = shift_frames(&stream.keypoints, stream.frame_offset);
    let pixel_idx: Vec<usize> = schema
        .names()
        .iter()
        .flat_map(|n| [format!("{n}.u"), format!("{n}.v")])
        .map(|c| shifted.channel_index(&c).expect("ingested series carries every schema channel"))
        .collect();
    let pixel_cols: Vec<Vec<f64>> = pixel_idx.iter().map(|&c| shifted.column(c)).collect();
    let pixel_names: Vec<String> = pixel_idx.iter().map(|&c| shifted.channels()[c].clone()).collect();
    let pixels = TimeSeries::from_columns(shifted.rate(), pixel_names, &pixel_cols).expect("equal columns");

    let filled = fill_gaps(&pixels, config.max_gap).map_err(|e| stage_err(trial, Stage::GapFill)(&e))?;
    for g in &filled.unfilled {
        log::warn!("{trial}/{}: {} frames missing from frame {} exceed max_gap", stream.camera.name(), g.len, g.start);
    }
    let mut series = filled.series;

    let width = series.channels().len();
    let mut data = Vec::with_capacity(series.frame_count() * width);
    let mut failed = 0usize;
    for f in 0..series.frame_count() {
        let row = series.frame(f);
        for k in 0..width / 2 {
            let (u, v) = (row[2 * k], row[2 * k + 1]);
            if u.is_nan() || v.is_nan() {
                data.extend([f64::NAN, f64::NAN]);
                continue;
            }
            match undistort_point(&stream.camera, &KeypointObservation::new(u, v, 1.0)) {
                Ok(o) => data.extend([o.u, o.v]),
                Err(_) => {
                    failed += 1;
                    data.extend([f64::NAN, f64::NAN]);
                }
            }
        }
    }
    if failed > 0 {
        log::warn!("{trial}/{}: {failed} keypoints failed to undistort", stream.camera.name());
    }
    series = TimeSeries::new(series.rate(), series.channels().to_vec(), data).expect("shape preserved");

    if series.frame_count() < 2 {
        return Ok(series);
    }
    let missing: Vec<bool> =
        (0..series.frame_count()).flat_map(|f| series.frame(f).to_vec()).map(f64::is_nan).collect();
    let bridged = fill_gaps(&series, usize::MAX).map_err(|e| stage_err(trial, Stage::Filter)(&e))?.series;
    let smooth = butterworth_lowpass_zero_phase(&bridged, config.cutoff_hz, config.filter_order)
        .map_err(|e| stage_err(trial, Stage::Filter)(&e))?;
    let data = (0..smooth.frame_count())
        .flat_map(|f| smooth.frame(f).to_vec())
        .zip(missing)
        .map(|(v, m)| if m { f64::NAN } else { v })
        .collect();
    Ok(TimeSeries::new(smooth.rate(), smooth.channels().to_vec(), data).expect("shape preserved"))
}

/// Triangulates every keypoint of every frame from the first two cameras. Points
/// missing in either view, or with degenerate geometry, are NaN.
fn triangulate_series(schema: &KeypointSchema, cams: [&CameraModel; 2], views: [&TimeSeries; 2]) -> TimeSeries {
    let frames = views[0].frame_count().min(views[1].frame_count());
    let k = schema.len();
    let rows: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let (a, b) = (views[0].frame(f), views[1].frame(f));
            let mut row = Vec::with_capacity(3 * k);
            for j in 0..k {
                let oa = KeypointObservation::new(a[2 * j], a[2 * j + 1], 1.0);
                let ob = KeypointObservation::new(b[2 * j], b[2 * j + 1], 1.0);
                let p = if [oa.u, oa.v, ob.u, ob.v].iter().any(|v| v.is_nan()) {
                    None
                } else {
                    triangulate_pair(cams[0], &oa, cams[1], &ob).ok()
                };
                match p {
                    Some(p) => row.extend([p.x, p.y, p.z]),
                    None => row.extend([f64::NAN; 3]),
                }
            }
            row
        })
        .collect();
    TimeSeries::new(views[0].rate(), xyz_channels(schema.names()), rows.concat()).expect("shape from schema")
}

/// Mean of per-frame scale factors over `frames`. Frames lacking any marker a
/// scaling pair needs are skipped.
fn window_scales(
    model: &SkeletalModel,
    pairs: &[ScalingPair],
    markers: &TimeSeries,
    frames: std::ops::Range<usize>,
) -> std::result::Result<ScaleSet, SkeletalError> {
    let names = formats::marker_triplets(markers.channels()).unwrap_or_default();
    let mut sum = vec![0.0; model.segments().len()];
    let mut used = 0usize;
    let mut last_err = None;
    for f in frames {
        let row = markers.frame(f);
        let named: HashMap<String, Point3D> = names
            .iter()
            .enumerate()
            .filter(|(m, _)| row[3 * m..3 * m + 3].iter().all(|v| v.is_finite()))
            .map(|(m, n)| (n.clone(), Point3D::new(row[3 * m], row[3 * m + 1], row[3 * m + 2])))
            .collect();
        match scale_model(model, &named, pairs) {
            Ok(s) => {
                sum.iter_mut().zip(s.factors()).for_each(|(a, b)| *a += b);
                used += 1;
            }
            Err(e) => last_err = Some(e),
        }
    }
    if used == 0 {
        return Err(last_err.unwrap_or(SkeletalError::InvalidArgument("empty scaling window".into())));
    }
    ScaleSet::from_factors(model, sum.into_iter().map(|v| v / used as f64).collect())
}

/// In-memory result of one trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: String,
    /// Triangulated markers (`name.x/.y/.z`, meters), NaN where unavailable.
    pub markers: TimeSeries,
    pub scales: ScaleSet,
    pub ik: IkReport,
    pub rmse: Option<RmseReport>,
    pub ground_truth: Option<JointAngleTrajectory>,
}

/// Runs every stage except writing files.
pub fn process_trial(inputs: &TrialInputs, ctx: &PipelineContext) -> Result<TrialResult> {
    let trial = inputs.trial.as_str();
    if inputs.streams.len() < 2 {
        return Err(PipelineError::Validation(format!(
            "trial `{trial}`: at least 2 cameras are required, got {}",
            inputs.streams.len()
        )));
    }
    if inputs.streams.len() > 2 {
        log::info!("{trial}: triangulating from the first two of {} cameras", inputs.streams.len());
    }
    let views: Vec<TimeSeries> = inputs
        .streams
        .par_iter()
        .take(2)
        .map(|s| prepare_camera(trial, s, &ctx.schema, &ctx.config))
        .collect::<Result<_>>()?;

    let markers =
        triangulate_series(&ctx.schema, [&inputs.streams[0].camera, &inputs.streams[1].camera], [&views[0], &views[1]]);

    let scale = stage_err(trial, Stage::Scale);
    let scales = match &inputs.static_markers {
        Some(s) => window_scales(&ctx.model, &ctx.pairs, s, 0..s.frame_count()),
        None => {
            let window = ((ctx.config.static_window_s * markers.rate()).round() as usize).max(1);
            window_scales(&ctx.model, &ctx.pairs, &markers, 0..window.min(markers.frame_count()))
        }
    }
    .map_err(|e| scale(&e))?;
    scales.validate(ctx.config.allow_extreme_scales).map_err(|e| scale(&e))?;

    let ik = solve_ik_trajectory(&ctx.model, &scales, &markers, &ctx.ik_options())
        .map_err(|e| stage_err(trial, Stage::InverseKinematics)(&e))?;
    if !ik.not_converged.is_empty() {
        log::warn!("{trial}: {} frames hit the IK iteration limit", ik.not_converged.len());
    }

    let rmse = match &inputs.ground_truth {
        Some(gt) => {
            let coords: Vec<String> =
                ctx.model.coordinate_names().into_iter().filter(|c| gt.names.contains(c)).collect();
            if coords.is_empty() {
                return Err(stage_err(trial, Stage::Evaluate)(&"ground truth shares no coordinate with the model"));
            }
            Some(
                joint_angle_rmse(trial, &ik.trajectory, gt, Some(&coords))
                    .map_err(|e| stage_err(trial, Stage::Evaluate)(&e))?,
            )
        }
        None => None,
    };

    Ok(TrialResult { trial: trial.to_string(), markers, scales, ik, rmse, ground_truth: inputs.ground_truth.clone() })
}

/// Trial summary returned after artifacts are written.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: String,
    pub trajectory: JointAngleTrajectory,
    pub rmse: Option<RmseReport>,
    pub scales: ScaleSet,
    pub not_converged: Vec<usize>,
    pub artifacts: Vec<PathBuf>,
}

fn write_text(trial: &str, path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| stage_err(trial, Stage::Write)(&format!("{}: {e}", path.display())))
}

/// Writes `markers.trc`, `ik.mot`, `residuals.csv`, `scales.csv`, `rmse.csv` (with
/// ground truth) and per-coordinate SVG plots into `dir`.
pub fn write_artifacts(result: &TrialResult, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    let trial = result.trial.as_str();
    let werr = stage_err(trial, Stage::Write);
    std::fs::create_dir_all(dir).map_err(|e| werr(&format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();

    let names = formats::marker_triplets(result.markers.channels()).map_err(|e| werr(&e))?;
    let keep: Vec<usize> = (0..names.len())
        .filter(|&m| (0..3).all(|a| result.markers.column(3 * m + a).iter().any(|v| v.is_finite())))
        .collect();
    if keep.len() < names.len() {
        log::warn!("{trial}: {} markers were never triangulated and are left out of the TRC", names.len() - keep.len());
    }
    let cols: Vec<Vec<f64>> =
        keep.iter().flat_map(|&m| (0..3).map(move |a| 3 * m + a)).map(|c| result.markers.column(c)).collect();
    let kept_names: Vec<&str> = keep.iter().map(|&m| names[m].as_str()).collect();
    let trc_series =
        TimeSeries::from_columns(result.markers.rate(), xyz_channels(&kept_names), &cols).expect("equal columns");
    let trc_series = if trc_series.frame_count() == 0 {
        trc_series
    } else {
        fill_gaps(&trc_series, usize::MAX).map_err(|e| werr(&e))?.series
    };
    let p = dir.join("markers.trc");
    export_trc(&trc_series, &p).map_err(|e| werr(&e))?;
    written.push(p);

    let p = dir.join("ik.mot");
    write_mot(&result.ik.trajectory, &p).map_err(|e| werr(&e))?;
    written.push(p);

    let traj = &result.ik.trajectory;
    let mut csv = String::from("frame,time,residual_m,converged\n");
    for (f, r) in traj.residuals.iter().enumerate() {
        let ok = !result.ik.not_converged.contains(&f);
        let _ = writeln!(csv, "{f},{:.6},{r:.9},{ok}", traj.time(f));
    }
    let p = dir.join("residuals.csv");
    write_text(trial, &p, &csv)?;
    written.push(p);

    let mut csv = String::from("segment,scale\n");
    for (s, k) in result.scales.iter() {
        let _ = writeln!(csv, "{s},{k:.6}");
    }
    let p = dir.join("scales.csv");
    write_text(trial, &p, &csv)?;
    written.push(p);

    if let Some(r) = &result.rmse {
        let p = dir.join("rmse.csv");
        write_text(trial, &p, &r.to_csv())?;
        written.push(p);
    }

    if plots {
        let plot_dir = dir.join("plots");
        std::fs::create_dir_all(&plot_dir).map_err(|e| werr(&format!("{}: {e}", plot_dir.display())))?;
        for (c, name) in traj.names.iter().enumerate() {
            let unit = if traj.rotational[c] { "deg" } else { "m" };
            let pred: Vec<(f64, f64)> =
                traj.column(c).into_iter().enumerate().map(|(f, v)| (traj.time(f), v)).collect();
            let gt: Option<Vec<(f64, f64)>> = result.ground_truth.as_ref().and_then(|g| {
                g.column_by_name(name).map(|col| col.into_iter().enumerate().map(|(f, v)| (g.time(f), v)).collect())
            });
            let p = plot_dir.join(format!("{name}.svg"));
            write_text(trial, &p, &waveform_svg(&format!("{trial}: {name} ({unit})"), &pred, gt.as_deref()))?;
            written.push(p);
        }
    }
    Ok(written)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of a predicted waveform, with the ground truth when available.
pub fn waveform_svg(title: &str, pred: &[(f64, f64)], gt: Option<&[(f64, f64)]>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 30.0;
    const B: f64 = 40.0;
    let all = pred.iter().chain(gt.unwrap_or(&[])).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let polyline = |pts: &[(f64, f64)], color: &str| {
        let mut s = format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"");
        for (i, &(x, y)) in pts.iter().filter(|p| p.1.is_finite()).enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", sx(x), sy(y));
        }
        s.push_str("\"/>\n");
        s
    };

    let mut svg =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{L}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        xml_escape(title)
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{L}\" y=\"{T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - L - R,
        H - T - B
    );
    for (v, y) in [(y1, sy(y1)), (y0, sy(y0))] {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>",
            L - 6.0,
            y + 4.0
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{v:.2} s</text>",
            H - B + 16.0
        );
    }
    if let Some(g) = gt {
        svg.push_str(&polyline(g, "#222222"));
    }
    svg.push_str(&polyline(pred, "#1f77b4"));
    svg.push_str("</svg>\n");
    svg
}

/// Loads, processes and writes one trial into `config.output_dir/<trial>`.
pub fn run_pipeline(bundle: &TrialBundle, ctx: &PipelineContext) -> Result<TrialOutcome> {
    let inputs = TrialInputs::load(bundle, ctx)?;
    let result = process_trial(&inputs, ctx)?;
    let artifacts = write_artifacts(&result, &ctx.config.output_dir.join(&result.trial), ctx.config.plots)?;
    Ok(TrialOutcome {
        trial: result.trial,
        trajectory: result.ik.trajectory,
        rmse: result.rmse,
        scales: result.scales,
        not_converged: result.ik.not_converged,
        artifacts,
    })
}

#[derive(Debug)]
pub struct BatchOutcome {
    /// In bundle order.
    pub trials: Vec<Result<TrialOutcome>>,
    /// All trial RMSEs, written to `rmse_report.csv` when any trial had ground truth.
    pub summary: Option<RmseReport>,
}

/// Runs trials concurrently on a pool of `config.workers` threads.
pub fn run_many(bundles: &[TrialBundle], ctx: &PipelineContext) -> Result<BatchOutcome> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = bundles.iter().find(|b| !seen.insert(b.trial.as_str())) {
        return Err(PipelineError::Validation(format!("duplicate trial id `{}`", dup.trial)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers)
        .build()
        .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
    let trials: Vec<Result<TrialOutcome>> = pool.install(|| bundles.par_iter().map(|b| run_pipeline(b, ctx)).collect());

    let mut summary: Option<RmseReport> = None;
    for r in trials.iter().flatten().filter_map(|t| t.rmse.clone()) {
        match &mut summary {
            None => summary = Some(r),
            Some(s) => {
                if let Err(e) = s.merge(r) {
                    log::warn!("summary skips a trial: {e}");
                }
            }
        }
    }
    if let Some(s) = &summary {
        std::fs::create_dir_all(&ctx.config.output_dir)
            .map_err(|e| stage_err("*", Stage::Write)(&format!("{}: {e}", ctx.config.output_dir.display())))?;
        write_text("*", &ctx.config.output_dir.join("rmse_report.csv"), &s.to_csv())?;
    }
    Ok(BatchOutcome { trials, summary })
}

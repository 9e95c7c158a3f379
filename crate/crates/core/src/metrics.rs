//! Benchmark scores: PCK on 2D keypoints, whole-waveform joint-angle RMSE, and the
//! leaderboard built from per-model RMSE reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde_json::Value;
use thiserror::Error;

use crate::signal::{grid_len, interpolate_uniform};
use crate::skeletal::JointAngleTrajectory;

pub const DEFAULT_PCK_THRESHOLDS: [f64; 3] = [0.05, 0.1, 0.2];

/// Leaderboard columns as (label, coordinate base name). Side-specific
/// coordinates are stored as `{base}_r` / `{base}_l`.
pub const BENCHMARK_COLUMNS: [(&str, &str); 12] = [
    ("Pelvis Tilt", "pelvis_tilt"),
    ("Pelvis List", "pelvis_list"),
    ("Pelvis Rotation", "pelvis_rotation"),
    ("Hip Flexion", "hip_flexion"),
    ("Hip Adduction", "hip_adduction"),
    ("Hip Rotation", "hip_rotation"),
    ("Knee Flexion", "knee_angle"),
    ("Ankle Flexion", "ankle_angle"),
    ("Subtalar", "subtalar_angle"),
    ("Lumbar Extension", "lumbar_extension"),
    ("Lumbar Bending", "lumbar_bending"),
    ("Lumbar Rotation", "lumbar_rotation"),
];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no visible ground-truth keypoints to evaluate")]
    EmptyEvaluation,
    #[error("coordinate mismatch: {0}")]
    CoordinateMismatch(String),
    #[error("trajectories do not overlap in time")]
    NoOverlap,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Ground-truth keypoint with COCO visibility (2 = visible).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtKeypoint {
    pub u: f64,
    pub v: f64,
    pub visibility: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub thresholds: Vec<f64>,
    /// Fraction of counted keypoints within each threshold.
    pub pck: Vec<f64>,
    /// `[threshold][keypoint]`; NaN where a keypoint is never visible.
    pub per_keypoint: Vec<Vec<f64>>,
    pub counted: usize,
}

/// A keypoint is correct at `tau` when its error is at most `tau * max(bbox_w, bbox_h)`.
/// Only ground-truth keypoints with visibility 2 are counted.
pub fn pck(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<GtKeypoint>],
    bboxes: &[[f64; 4]],
    thresholds: &[f64],
) -> Result<PckReport> {
    if pred.len() != gt.len() || gt.len() != bboxes.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predictions, {} ground-truth sets, {} boxes",
            pred.len(),
            gt.len(),
            bboxes.len()
        )));
    }
    if thresholds.iter().any(|t| !(*t >= 0.0)) {
        return Err(MetricsError::InvalidArgument("thresholds must be non-negative".into()));
    }
    let k = gt.first().map_or(0, Vec::len);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() || g.len() != k {
            return Err(MetricsError::LengthMismatch(format!(
                "instance {i}: {} predicted vs {} ground-truth keypoints (expected {k})",
                p.len(),
                g.len()
            )));
        }
    }

    let mut correct = vec![vec![0usize; k]; thresholds.len()];
    let mut counted = vec![0usize; k];
    for ((p, g), b) in pred.iter().zip(gt).zip(bboxes) {
        let scale = b[2].max(b[3]);
        for (j, (pp, gg)) in p.iter().zip(g).enumerate() {
            if gg.visibility != 2 {
                continue;
            }
            counted[j] += 1;
            let err = (pp[0] - gg.u).hypot(pp[1] - gg.v);
            for (t, &tau) in thresholds.iter().enumerate() {
                if err <= tau * scale {
                    correct[t][j] += 1;
                }
            }
        }
    }
    let total: usize = counted.iter().sum();
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(PckReport {
        thresholds: thresholds.to_vec(),
        pck: correct.iter().map(|c| c.iter().sum::<usize>() as f64 / total as f64).collect(),
        per_keypoint: correct
            .iter()
            .map(|c| {
                c.iter().zip(&counted).map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 }).collect()
            })
            .collect(),
        counted: total,
    })
}

/// `(image_id, flat keypoints, bbox)` per annotation.
type CocoInstance = (u64, Vec<f64>, Option<[f64; 4]>);

fn coco_instances(doc: &Value) -> Result<Vec<CocoInstance>> {
    let list = match doc {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("annotations")
            .and_then(Value::as_array)
            .ok_or_else(|| MetricsError::Parse("missing `annotations` array".into()))?,
        _ => return Err(MetricsError::Parse("expected a COCO document or result list".into())),
    };
    list.iter()
        .map(|a| {
            let image_id =
                a["image_id"].as_u64().ok_or_else(|| MetricsError::Parse("annotation without image_id".into()))?;
            let kps = a["keypoints"]
                .as_array()
                .ok_or_else(|| MetricsError::Parse("annotation without keypoints".into()))?
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| MetricsError::Parse("non-numeric keypoint value".into())))
                .collect::<Result<Vec<f64>>>()?;
            if kps.len() % 3 != 0 {
                return Err(MetricsError::Parse("keypoint array length is not a multiple of 3".into()));
            }
            let bbox = a["bbox"].as_array().and_then(|b| {
                let v: Vec<f64> = b.iter().filter_map(Value::as_f64).collect();
                (v.len() == 4).then(|| [v[0], v[1], v[2], v[3]])
            });
            Ok((image_id, kps, bbox))
        })
        .collect()
}

/// PCK between two COCO keypoint files (predictions may also be a bare result list),
/// pairing annotations by image id and order within the image. Boxes come from the
/// ground truth.
pub fn pck_from_coco(pred_json: &str, gt_json: &str, thresholds: &[f64]) -> Result<PckReport> {
    let parse = |s: &str| serde_json::from_str::<Value>(s).map_err(|e| MetricsError::Parse(e.to_string()));
    let pred = coco_instances(&parse(pred_json)?)?;
    let gt = coco_instances(&parse(gt_json)?)?;

    let mut by_image: HashMap<u64, Vec<&Vec<f64>>> = HashMap::new();
    for (id, kps, _) in &pred {
        by_image.entry(*id).or_default().push(kps);
    }
    let mut used: HashMap<u64, usize> = HashMap::new();
    let (mut p_sets, mut g_sets, mut boxes) = (Vec::new(), Vec::new(), Vec::new());
    for (id, kps, bbox) in &gt {
        let slot = used.entry(*id).or_insert(0);
        let p = by_image
            .get(id)
            .and_then(|v| v.get(*slot))
            .ok_or_else(|| MetricsError::LengthMismatch(format!("no prediction for image {id}")))?;
        *slot += 1;
        let bbox = bbox.ok_or_else(|| MetricsError::Parse(format!("ground truth for image {id} has no bbox")))?;
        p_sets.push(p.chunks(3).map(|c| [c[0], c[1]]).collect());
        g_sets.push(kps.chunks(3).map(|c| GtKeypoint { u: c[0], v: c[1], visibility: c[2] as u8 }).collect());
        boxes.push(bbox);
    }
    pck(&p_sets, &g_sets, &boxes, thresholds)
}

impl PckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,pck\n");
        for (t, p) in self.thresholds.iter().zip(&self.pck) {
            let _ = writeln!(out, "{t:.2},{p:.4}");
        }
        out
    }
}

/// RMSE of one trial, per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRmse {
    pub trial: String,
    pub rmse: Vec<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub coordinates: Vec<String>,
    pub rotational: Vec<bool>,
    pub trials: Vec<TrialRmse>,
}

impl RmseReport {
    pub fn new(coordinates: Vec<String>, rotational: Vec<bool>) -> Self {
        Self { coordinates, rotational, trials: Vec::new() }
    }

    /// Appends the trials of `other`, which must cover the same coordinates.
    pub fn merge(&mut self, other: RmseReport) -> Result<()> {
        if other.coordinates != self.coordinates {
            return Err(MetricsError::CoordinateMismatch("reports cover different coordinates".into()));
        }
        self.trials.extend(other.trials);
        Ok(())
    }

    /// Mean over trials of each coordinate's RMSE.
    pub fn per_coordinate_mean(&self) -> Vec<f64> {
        let n = self.trials.len() as f64;
        (0..self.coordinates.len()).map(|c| self.trials.iter().map(|t| t.rmse[c]).sum::<f64>() / n).collect()
    }

    /// Mean of the rotational per-coordinate means, in degrees.
    pub fn overall_mean(&self) -> f64 {
        let means = self.per_coordinate_mean();
        let rot: Vec<f64> = means.iter().zip(&self.rotational).filter(|(_, r)| **r).map(|(m, _)| *m).collect();
        rot.iter().sum::<f64>() / rot.len() as f64
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.trials {
            t.rmse.iter_mut().for_each(|v| *v *= k);
        }
        out
    }

    /// One row per trial and coordinate: degrees at 2 decimals, meters at 6.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,coordinate,unit,rmse\n");
        for t in &self.trials {
            for ((name, rot), v) in self.coordinates.iter().zip(&self.rotational).zip(&t.rmse) {
                if *rot {
                    let _ = writeln!(out, "{},{name},deg,{v:.2}", t.trial);
                } else {
                    let _ = writeln!(out, "{},{name},m,{v:.6}", t.trial);
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MetricsError::Parse("empty report".into()))?;
        if header.trim() != "trial,coordinate,unit,rmse" {
            return Err(MetricsError::Parse(format!("unexpected header `{header}`")));
        }
        let mut report = RmseReport::new(Vec::new(), Vec::new());
        let mut trials: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let [trial, coord, unit, value] = cells[..] else {
                return Err(MetricsError::Parse(format!("expected 4 fields in `{line}`")));
            };
            let value: f64 = value.parse().map_err(|_| MetricsError::Parse(format!("invalid number `{value}`")))?;
            if !report.coordinates.iter().any(|c| c == coord) {
                report.coordinates.push(coord.to_string());
                report.rotational.push(unit == "deg");
            }
            match trials.iter_mut().find(|(t, _)| t == trial) {
                Some((_, m)) => {
                    m.insert(coord.to_string(), value);
                }
                None => trials.push((trial.to_string(), BTreeMap::from([(coord.to_string(), value)]))),
            }
        }
        for (trial, values) in trials {
            let rmse = report
                .coordinates
                .iter()
                .map(|c| {
                    values
                        .get(c)
                        .copied()
                        .ok_or_else(|| MetricsError::CoordinateMismatch(format!("trial `{trial}` lacks `{c}`")))
                })
                .collect::<Result<_>>()?;
            report.trials.push(TrialRmse { trial, rmse, frames: 0 });
        }
        Ok(report)
    }
}

/// Whole-waveform RMSE per coordinate. Both trajectories are linearly resampled to
/// the lower of their two rates over their common time span. `coordinates` selects
/// the compared columns (present in both); `None` requires identical coordinate sets.
pub fn joint_angle_rmse(
    trial: &str,
    pred: &JointAngleTrajectory,
    gt: &JointAngleTrajectory,
    coordinates: Option<&[String]>,
) -> Result<RmseReport> {
    let names: Vec<String> = match coordinates {
        Some(c) => c.to_vec(),
        None => {
            let mut a = pred.names.clone();
            let mut b = gt.names.clone();
            a.sort();
            b.sort();
            if a != b {
                return Err(MetricsError::CoordinateMismatch(format!(
                    "prediction has {:?}, ground truth has {:?}",
                    pred.names, gt.names
                )));
            }
            gt.names.clone()
        }
    };
    let locate = |t: &JointAngleTrajectory, n: &str, what: &str| {
        t.names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| MetricsError::CoordinateMismatch(format!("`{n}` missing from {what}")))
    };
    let pairs: Vec<(usize, usize)> = names
        .iter()
        .map(|n| Ok((locate(pred, n, "prediction")?, locate(gt, n, "ground truth")?)))
        .collect::<Result<_>>()?;
    let rotational = pairs.iter().map(|&(_, g)| gt.rotational[g]).collect();

    if pred.frame_count() == 0 || gt.frame_count() == 0 {
        return Err(MetricsError::NoOverlap);
    }
    let rate = pred.rate.min(gt.rate);
    let t0 = pred.start_time.max(gt.start_time);
    let t1 = pred.end_time().min(gt.end_time());
    if t1 < t0 - 1e-9 {
        return Err(MetricsError::NoOverlap);
    }
    let n = grid_len((t1 - t0).max(0.0), rate);
    let times: Vec<f64> = (0..n).map(|k| t0 + k as f64 / rate).collect();

    let rmse = pairs
        .iter()
        .map(|&(p, g)| {
            let (pc, gc) = (pred.column(p), gt.column(g));
            let sq: f64 = times
                .iter()
                .map(|&t| {
                    let d = interpolate_uniform(&pc, pred.rate, pred.start_time, t)
                        - interpolate_uniform(&gc, gt.rate, gt.start_time, t);
                    d * d
                })
                .sum();
            (sq / n as f64).sqrt()
        })
        .collect();
    Ok(RmseReport {
        coordinates: names,
        rotational,
        trials: vec![TrialRmse { trial: trial.to_string(), rmse, frames: n }],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub model: String,
    pub values: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    pub columns: Vec<String>,
    pub rows: Vec<LeaderboardRow>,
}

fn column_value(means: &HashMap<&str, f64>, base: &str) -> Result<f64> {
    if let Some(v) = means.get(base) {
        return Ok(*v);
    }
    match (means.get(format!("{base}_r").as_str()), means.get(format!("{base}_l").as_str())) {
        (Some(r), Some(l)) => Ok(0.5 * (r + l)),
        _ => Err(MetricsError::CoordinateMismatch(format!("no `{base}` or `{base}_r`/`{base}_l` coordinates"))),
    }
}

fn raw_columns(means: &HashMap<&str, f64>) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (_, base) in BENCHMARK_COLUMNS {
        if let Some(v) = means.get(base) {
            out.push((base.to_string(), *v));
            continue;
        }
        for side in ["r", "l"] {
            let name = format!("{base}_{side}");
            let v = means
                .get(name.as_str())
                .ok_or_else(|| MetricsError::CoordinateMismatch(format!("missing `{name}`")))?;
            out.push((name, *v));
        }
    }
    Ok(out)
}

/// Scores each model by the unweighted mean of the benchmark columns (left and
/// right averaged first unless `lr_average` is false, in which case every
/// side-specific coordinate is its own column). Ranked ascending, ties by name.
pub fn leaderboard_aggregate(reports: &[(String, RmseReport)], lr_average: bool) -> Result<Leaderboard> {
    if reports.is_empty() {
        return Err(MetricsError::InvalidArgument("no reports".into()));
    }
    let mut reference: Vec<String> = reports[0].1.coordinates.clone();
    reference.sort();
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (model, report) in reports {
        let mut coords = report.coordinates.clone();
        coords.sort();
        if coords != reference {
            return Err(MetricsError::CoordinateMismatch(format!(
                "report for `{model}` covers a different coordinate set"
            )));
        }
        if report.trials.is_empty() {
            return Err(MetricsError::InvalidArgument(format!("report for `{model}` has no trials")));
        }
        let means_vec = report.per_coordinate_mean();
        let means: HashMap<&str, f64> = report.coordinates.iter().map(String::as_str).zip(means_vec).collect();
        let (labels, values): (Vec<String>, Vec<f64>) = if lr_average {
            BENCHMARK_COLUMNS
                .iter()
                .map(|(label, base)| Ok((label.to_string(), column_value(&means, base)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip()
        } else {
            raw_columns(&means)?.into_iter().unzip()
        };
        columns.get_or_insert(labels);
        let score = values.iter().sum::<f64>() / values.len() as f64;
        rows.push(LeaderboardRow { rank: 0, model: model.clone(), values, score });
    }
    rows.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.model.cmp(&b.model)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Leaderboard { columns: columns.unwrap_or_default(), rows })
}

/// Leaderboard built directly from per-column values, e.g. transcribed table rows.
pub fn leaderboard_from_columns(models: &[(String, Vec<f64>)]) -> Result<Leaderboard> {
    let mut rows = Vec::new();
    for (model, values) in models {
        if values.len() != BENCHMARK_COLUMNS.len() {
            return Err(MetricsError::CoordinateMismatch(format!(
                "`{model}` has {} values, expected {}",
                values.len(),
                BENCHMARK_COLUMNS.len()
            )));
        }
        let score = values.iter().sum::<f64>() / values.len() as f64;
        rows.push(LeaderboardRow { rank: 0, model: model.clone(), values: values.clone(), score });
    }
    rows.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.model.cmp(&b.model)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(Leaderboard { columns: BENCHMARK_COLUMNS.iter().map(|(l, _)| l.to_string()).collect(), rows })
}

impl Leaderboard {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Rank | Model |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str(" Mean |\n|---:|:---|");
        for _ in &self.columns {
            out.push_str("---:|");
        }
        out.push_str("---:|\n");
        for r in &self.rows {
            let _ = write!(out, "| {} | {} |", r.rank, r.model);
            for v in &r.values {
                let _ = write!(out, " {v:.2} |");
            }
            let _ = writeln!(out, " {:.2} |", r.score);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,model");
        for c in &self.columns {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",mean\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.rank, r.model);
            for v in &r.values {
                let _ = write!(out, ",{v:.2}");
            }
            let _ = writeln!(out, ",{:.2}", r.score);
        }
        out
    }
}

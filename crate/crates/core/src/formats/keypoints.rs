//! Per-camera 2D keypoint prediction files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_err, read_text, write_file, FormatError, Result};
use crate::signal::TimeSeries;
use crate::synth::KeypointSchema;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub index: usize,
    /// `[u, v, confidence]` per schema entry.
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub fps: f64,
    pub schema: Vec<String>,
    pub frames: Vec<KeypointFrame>,
}

impl KeypointFile {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("keypoint file serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_json_string())
    }
}

/// Converts a prediction file into a series with channels `name.u`, `name.v`,
/// `name.conf` for each schema keypoint. Pixels with confidence below `threshold`,
/// and frames absent from the file, become NaN.
pub fn ingest_keypoints_str(text: &str, schema: &KeypointSchema, threshold: f64) -> Result<TimeSeries> {
    let file: KeypointFile = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    if !(file.fps > 0.0 && file.fps.is_finite()) {
        return Err(parse_err(0, format!("fps must be positive, got {}", file.fps)));
    }
    let columns: Vec<usize> = schema
        .names()
        .iter()
        .map(|n| {
            file.schema
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| FormatError::SchemaMismatch(format!("keypoint `{n}` missing from prediction file")))
        })
        .collect::<Result<_>>()?;

    let frame_count = file.frames.iter().map(|f| f.index + 1).max().unwrap_or(0);
    let width = 3 * columns.len();
    let mut data = vec![f64::NAN; frame_count * width];
    let mut seen = vec![false; frame_count];
    for frame in &file.frames {
        if std::mem::replace(&mut seen[frame.index], true) {
            return Err(parse_err(0, format!("duplicate frame index {}", frame.index)));
        }
        if frame.keypoints.len() != file.schema.len() {
            return Err(FormatError::SchemaMismatch(format!(
                "frame {} has {} keypoints, schema has {}",
                frame.index,
                frame.keypoints.len(),
                file.schema.len()
            )));
        }
        let row = &mut data[frame.index * width..(frame.index + 1) * width];
        for (k, &src) in columns.iter().enumerate() {
            let [u, v, conf] = frame.keypoints[src];
            if conf >= threshold {
                row[3 * k] = u;
                row[3 * k + 1] = v;
            }
            row[3 * k + 2] = conf;
        }
    }
    let channels = schema.names().iter().flat_map(|n| ["u", "v", "conf"].map(|a| format!("{n}.{a}"))).collect();
    TimeSeries::new(file.fps, channels, data).map_err(|e| FormatError::InvalidSeries(e.to_string()))
}

pub fn ingest_keypoints(path: impl AsRef<Path>, schema: &KeypointSchema, threshold: f64) -> Result<TimeSeries> {
    ingest_keypoints_str(&read_text(path.as_ref())?, schema, threshold)
}

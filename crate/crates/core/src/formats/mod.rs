//! File interop: OpenSim TRC/MOT, keypoint prediction JSON, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub mod keypoints;
pub mod mot;
pub mod trc;

pub use keypoints::{
    ingest_keypoints, ingest_keypoints_str, KeypointFile, KeypointFrame, DEFAULT_CONFIDENCE_THRESHOLD,
};
pub use mot::{parse_mot, parse_mot_str, write_mot, write_mot_string};
pub use trc::{export_trc, read_trc, read_trc_str, trc_string};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("series contains NaN in channel `{0}`")]
    ContainsNaN(String),
    #[error("missing time column")]
    MissingTimeColumn,
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, FormatError>;

pub(crate) fn parse_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse { line, message: message.into() }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `contents` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp =
        dir.join(format!(".{file_name}.{}.{}.tmp", std::process::id(), TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes()).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

/// Marker names of a series whose channels are consecutive `name.x`, `name.y`, `name.z` triplets.
pub fn marker_triplets(channels: &[String]) -> Result<Vec<String>> {
    if !channels.len().is_multiple_of(3) {
        return Err(FormatError::InvalidSeries(format!("{} channels are not xyz triplets", channels.len())));
    }
    channels
        .chunks(3)
        .map(|c| {
            let name = c[0]
                .strip_suffix(".x")
                .ok_or_else(|| FormatError::InvalidSeries(format!("expected an `.x` channel, found `{}`", c[0])))?;
            if c[1] != format!("{name}.y") || c[2] != format!("{name}.z") {
                return Err(FormatError::InvalidSeries(format!("channels of `{name}` are not in x, y, z order")));
            }
            Ok(name.to_string())
        })
        .collect()
}

/// Channel names `name.x`, `name.y`, `name.z` for each marker.
pub fn xyz_channels<S: AsRef<str>>(names: &[S]) -> Vec<String> {
    names.iter().flat_map(|n| ["x", "y", "z"].map(|a| format!("{}.{a}", n.as_ref()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn triplets() {
        let ch = xyz_channels(&["A", "B"]);
        assert_eq!(marker_triplets(&ch).unwrap(), vec!["A", "B"]);
        let bad: Vec<String> = vec!["A.x".into(), "A.z".into(), "A.y".into()];
        assert!(marker_triplets(&bad).is_err());
    }
}

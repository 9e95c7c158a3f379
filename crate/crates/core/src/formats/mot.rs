//! OpenSim MOT/STO coordinate files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{parse_err, read_text, write_file, FormatError, Result};
use crate::skeletal::{JointAngleTrajectory, SkeletalModel};

const TRANSLATION_SUFFIXES: [&str; 3] = ["_tx", "_ty", "_tz"];

/// Renders a trajectory (degrees and meters) as MOT text with `inDegrees=yes`.
pub fn write_mot_string(traj: &JointAngleTrajectory, name: &str) -> String {
    let frames = traj.frame_count();
    let mut out = String::new();
    let _ = writeln!(out, "{name}");
    out.push_str("version=1\n");
    let _ = writeln!(out, "nRows={frames}");
    let _ = writeln!(out, "nColumns={}", traj.coordinate_count() + 1);
    out.push_str("inDegrees=yes\nendheader\n");
    out.push_str("time");
    for n in &traj.names {
        let _ = write!(out, "\t{n}");
    }
    out.push('\n');
    for f in 0..frames {
        let _ = write!(out, "{:.10}", traj.time(f));
        for v in traj.frame(f) {
            let _ = write!(out, "\t{v:.10}");
        }
        out.push('\n');
    }
    out
}

pub fn write_mot(traj: &JointAngleTrajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or("coordinates");
    write_file(path, &write_mot_string(traj, name))
}

fn is_rotational(name: &str, model: Option<&SkeletalModel>) -> bool {
    if let Some(i) = model.and_then(|m| m.coordinate_index(name)) {
        return model.unwrap().coordinates()[i].is_rotational();
    }
    !TRANSLATION_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Parses MOT text. Rotational columns (per `model` when it knows the column, else
/// any column not ending in `_tx`, `_ty` or `_tz`) are converted to degrees when
/// the file has `inDegrees=no`.
pub fn parse_mot_str(text: &str, model: Option<&SkeletalModel>) -> Result<JointAngleTrajectory> {
    let mut lines = text.lines().enumerate();
    let mut header: HashMap<String, String> = HashMap::new();
    let mut saw_end = false;
    for (_, line) in lines.by_ref() {
        let line = line.trim();
        if line.eq_ignore_ascii_case("endheader") {
            saw_end = true;
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    if !saw_end {
        return Err(parse_err(text.lines().count(), "missing `endheader`"));
    }
    let in_degrees = match header.get("indegrees").map(|s| s.to_ascii_lowercase()) {
        Some(v) if v == "yes" => true,
        Some(v) if v == "no" => false,
        Some(v) => return Err(parse_err(0, format!("invalid inDegrees value `{v}`"))),
        None => return Err(parse_err(0, "missing `inDegrees` header key")),
    };

    let (col_line, columns) = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l.split('\t').map(|s| s.trim().to_string()).collect::<Vec<_>>()),
            None => return Err(FormatError::MissingTimeColumn),
        }
    };
    if !columns.first().is_some_and(|c| c.eq_ignore_ascii_case("time")) {
        return Err(FormatError::MissingTimeColumn);
    }
    let names: Vec<String> = columns[1..].to_vec();
    let rotational: Vec<bool> = names.iter().map(|n| is_rotational(n, model)).collect();

    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split_whitespace()
            .map(|c| c.parse::<f64>().map_err(|_| parse_err(i + 1, format!("invalid number `{c}`"))))
            .collect::<Result<_>>()?;
        if cells.len() != columns.len() {
            return Err(parse_err(
                i + 1,
                format!("expected {} values, found {} (header at line {col_line})", columns.len(), cells.len()),
            ));
        }
        times.push(cells[0]);
        for (v, &rot) in cells[1..].iter().zip(&rotational) {
            values.push(if rot && !in_degrees { v.to_degrees() } else { *v });
        }
    }

    let rate = match times.len() {
        0 | 1 => header.get("datarate").and_then(|v| v.parse::<f64>().ok()).filter(|r| *r > 0.0).unwrap_or(1.0),
        n => {
            let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
            if !(dt > 0.0) {
                return Err(parse_err(col_line, "time column is not increasing"));
            }
            for (k, w) in times.windows(2).enumerate() {
                if ((w[1] - w[0]) - dt).abs() > 0.01 * dt {
                    return Err(parse_err(col_line + k + 2, "time column is not uniformly sampled"));
                }
            }
            1.0 / dt
        }
    };
    let mut traj = JointAngleTrajectory::new(rate, times.first().copied().unwrap_or(0.0), names, rotational);
    traj.values = values;
    Ok(traj)
}

pub fn parse_mot(path: impl AsRef<Path>, model: Option<&SkeletalModel>) -> Result<JointAngleTrajectory> {
    parse_mot_str(&read_text(path.as_ref())?, model)
}

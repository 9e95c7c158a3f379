//! Motion Analysis TRC marker files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{marker_triplets, parse_err, read_text, write_file, xyz_channels, FormatError, Result};
use crate::signal::TimeSeries;

const HEADER_KEYS: [&str; 8] = [
    "DataRate",
    "CameraRate",
    "NumFrames",
    "NumMarkers",
    "Units",
    "OrigDataRate",
    "OrigDataStartFrame",
    "OrigNumFrames",
];

/// Renders a series of `name.x/.y/.z` channels (meters) as TRC text.
pub fn trc_string(markers: &TimeSeries, name: &str) -> Result<String> {
    let names = marker_triplets(markers.channels())?;
    if let Some(c) = (0..markers.channels().len()).find(|&c| markers.column(c).iter().any(|v| v.is_nan())) {
        return Err(FormatError::ContainsNaN(markers.channels()[c].clone()));
    }
    let frames = markers.frame_count();
    let rate = markers.rate();
    let mut out = String::new();
    let _ = writeln!(out, "PathFileType\t4\t(X/Y/Z)\t{name}");
    out.push_str(&HEADER_KEYS.join("\t"));
    out.push('\n');
    let _ = writeln!(out, "{rate:.2}\t{rate:.2}\t{frames}\t{}\tm\t{rate:.2}\t1\t{frames}", names.len());

    out.push_str("Frame#\tTime");
    for n in &names {
        let _ = write!(out, "\t{n}\t\t");
    }
    out.push('\n');
    out.push('\t');
    for i in 1..=names.len() {
        let _ = write!(out, "\tX{i}\tY{i}\tZ{i}");
    }
    out.push_str("\n\n");

    for f in 0..frames {
        let _ = write!(out, "{}\t{:.6}", f + 1, f as f64 / rate);
        for v in markers.frame(f) {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_trc(markers: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("markers.trc");
    write_file(path, &trc_string(markers, name)?)
}

/// Parses TRC text into `name.x/.y/.z` channels in meters. Empty cells become NaN.
pub fn read_trc_str(text: &str) -> Result<TimeSeries> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 5 {
        return Err(parse_err(lines.len(), "truncated TRC header"));
    }
    if !lines[0].starts_with("PathFileType") {
        return Err(parse_err(1, "missing PathFileType line"));
    }
    let keys: Vec<&str> = lines[1].split('\t').map(str::trim).collect();
    let values: Vec<&str> = lines[2].split('\t').map(str::trim).collect();
    let header: HashMap<&str, &str> = keys.iter().copied().zip(values.iter().copied()).collect();
    let rate: f64 = header
        .get("DataRate")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(3, "missing or invalid DataRate"))?;
    let unit_scale = match header.get("Units").copied().unwrap_or("m") {
        "m" => 1.0,
        "cm" => 0.01,
        "mm" => 0.001,
        other => return Err(parse_err(3, format!("unsupported units `{other}`"))),
    };

    let name_cells: Vec<&str> = lines[3].split('\t').map(str::trim).collect();
    if name_cells.first() != Some(&"Frame#") {
        return Err(parse_err(4, "expected a `Frame#` column"));
    }
    let names: Vec<&str> = name_cells.iter().skip(2).copied().filter(|s| !s.is_empty()).collect();
    let channels = xyz_channels(&names);

    let mut data = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(5) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let mut row = vec![f64::NAN; channels.len()];
        for (k, cell) in cells.iter().skip(2).take(channels.len()).enumerate() {
            let cell = cell.trim();
            if !cell.is_empty() {
                let v: f64 = cell.parse().map_err(|_| parse_err(i + 1, format!("invalid number `{cell}`")))?;
                row[k] = v * unit_scale;
            }
        }
        data.extend(row);
    }
    TimeSeries::new(rate, channels, data).map_err(|e| FormatError::InvalidSeries(e.to_string()))
}

pub fn read_trc(path: impl AsRef<Path>) -> Result<TimeSeries> {
    read_trc_str(&read_text(path.as_ref())?)
}

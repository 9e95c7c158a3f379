//! Temporal processing of keypoint and marker waveforms: gap filling, zero-phase
//! Butterworth low-pass filtering and linear resampling.

use rayon::prelude::*;
use thiserror::Error;

/// Cutoffs at or above this fraction of Nyquist are clamped to it.
pub const NYQUIST_CLAMP: f64 = 0.99;
/// Default order of each filter pass.
pub const DEFAULT_FILTER_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("channel `{0}` has no valid samples")]
    AllMissing(String),
    #[error("cutoff {cutoff} Hz is above the Nyquist frequency {nyquist} Hz")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },
    #[error("channel `{0}` contains NaN samples")]
    ContainsNaN(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Uniformly sampled multichannel series. Missing samples are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    rate: f64,
    channels: Vec<String>,
    // row-major, frames x channels
    data: Vec<f64>,
}

impl TimeSeries {
    pub fn new(rate: f64, channels: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(SignalError::InvalidArgument(format!("rate must be positive, got {rate}")));
        }
        if channels.is_empty() && !data.is_empty() {
            return Err(SignalError::InvalidArgument("data without channels".into()));
        }
        if !channels.is_empty() && !data.len().is_multiple_of(channels.len()) {
            return Err(SignalError::InvalidArgument(format!(
                "{} values do not divide into {} channels",
                data.len(),
                channels.len()
            )));
        }
        Ok(Self { rate, channels, data })
    }

    /// Builds a series from per-channel columns of equal length.
    pub fn from_columns(rate: f64, channels: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if channels.len() != columns.len() {
            return Err(SignalError::InvalidArgument("channel/column count mismatch".into()));
        }
        let frames = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != frames) {
            return Err(SignalError::InvalidArgument("columns differ in length".into()));
        }
        let mut data = Vec::with_capacity(frames * columns.len());
        for f in 0..frames {
            data.extend(columns.iter().map(|c| c[f]));
        }
        Self::new(rate, channels, data)
    }

    pub fn empty(rate: f64, channels: Vec<String>) -> Result<Self> {
        Self::new(rate, channels, Vec::new())
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn frame_count(&self) -> usize {
        if self.channels.is_empty() {
            0
        } else {
            self.data.len() / self.channels.len()
        }
    }

    pub fn duration(&self) -> f64 {
        self.frame_count().saturating_sub(1) as f64 / self.rate
    }

    pub fn get(&self, frame: usize, channel: usize) -> f64 {
        self.data[frame * self.channels.len() + channel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        let n = self.channels.len();
        &self.data[frame * n..(frame + 1) * n]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        let n = self.channels.len();
        self.data.iter().skip(channel).step_by(n).copied().collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.channels.len()).map(|c| self.column(c)).collect()
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    fn first_nan_channel(&self) -> Option<&str> {
        let n = self.channels.len();
        self.data.iter().position(|v| v.is_nan()).map(|i| self.channels[i % n].as_str())
    }

    /// Applies `f` to every column, in parallel, keeping channel order.
    fn map_columns<F>(&self, rate: f64, f: F) -> Result<TimeSeries>
    where
        F: Fn(&str, Vec<f64>) -> Result<Vec<f64>> + Sync,
    {
        let columns: Vec<Vec<f64>> = (0..self.channels.len())
            .into_par_iter()
            .map(|c| f(&self.channels[c], self.column(c)))
            .collect::<Result<_>>()?;
        TimeSeries::from_columns(rate, self.channels.clone(), &columns)
    }
}

/// A run of missing samples that was too long to interpolate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gap {
    pub channel: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapFill {
    pub series: TimeSeries,
    /// Interior gaps longer than `max_gap`, left as NaN.
    pub unfilled: Vec<Gap>,
}

/// Linearly interpolates interior gaps of at most `max_gap` frames and holds the
/// nearest valid value across leading and trailing gaps.
pub fn fill_gaps(ts: &TimeSeries, max_gap: usize) -> Result<GapFill> {
    let mut unfilled = Vec::new();
    let mut columns = Vec::with_capacity(ts.channels.len());
    for (c, name) in ts.channels.iter().enumerate() {
        let mut col = ts.column(c);
        if col.is_empty() {
            columns.push(col);
            continue;
        }
        let valid: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
        let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
            return Err(SignalError::AllMissing(name.clone()));
        };
        let (head, tail) = (col[first], col[last]);
        col[..first].fill(head);
        col[last + 1..].fill(tail);
        for w in valid.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = b - a - 1;
            if len == 0 {
                continue;
            }
            if len > max_gap {
                unfilled.push(Gap { channel: name.clone(), start: a + 1, len });
                continue;
            }
            let (va, vb) = (col[a], col[b]);
            for i in a + 1..b {
                let s = (i - a) as f64 / (b - a) as f64;
                col[i] = va + (vb - va) * s;
            }
        }
        columns.push(col);
    }
    Ok(GapFill { series: TimeSeries::from_columns(ts.rate, ts.channels.clone(), &columns)?, unfilled })
}

/// One second-order section in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Group delay at DC, in samples.
    fn dc_delay(&self) -> f64 {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        (b1 + 2.0 * b2) / (b0 + b1 + b2) - (a1 + 2.0 * a2) / (1.0 + a1 + a2)
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        // steady state for the ramp through the first two samples; every section
        // has unit DC gain, so a ramp leaves delayed by the DC group delay
        let slope = if x.len() > 1 { x[1] - x0 } else { 0.0 };
        let lag = slope * self.dc_delay();
        let (x1, y0) = (x0 + slope, x0 - lag);
        let y1 = x1 - lag;
        let mut z1 = y0 - self.b[0] * x0;
        let mut z2 = y1 - self.b[0] * x1 - self.b[1] * x0 + self.a[0] * y0;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass designed by the bilinear transform with prewarping.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthLowpass {
    order: usize,
    cutoff: f64,
    rate: f64,
    sections: Vec<Biquad>,
}

impl ButterworthLowpass {
    /// `order` must be 2, 4 or 6; `cutoff` must lie strictly inside `(0, rate / 2)`.
    pub fn design(order: usize, cutoff: f64, rate: f64) -> Result<Self> {
        if ![2, 4, 6].contains(&order) {
            return Err(SignalError::InvalidArgument(format!("filter order must be 2, 4 or 6, got {order}")));
        }
        if !(rate > 0.0) {
            return Err(SignalError::InvalidArgument(format!("rate must be positive, got {rate}")));
        }
        let nyquist = rate / 2.0;
        if !(cutoff > 0.0) {
            return Err(SignalError::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
        }
        if cutoff >= nyquist {
            return Err(SignalError::CutoffAboveNyquist { cutoff, nyquist });
        }
        let k = (std::f64::consts::PI * cutoff / rate).tan();
        let k2 = k * k;
        let sections = (0..order / 2)
            .map(|i| {
                // analog prototype section s^2 + c s + 1
                let c = 2.0 * (std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64).sin();
                let norm = 1.0 + c * k + k2;
                let b0 = k2 / norm;
                Biquad { b: [b0, 2.0 * b0, b0], a: [2.0 * (k2 - 1.0) / norm, (1.0 - c * k + k2) / norm] }
            })
            .collect();
        Ok(Self { order, cutoff, rate, sections })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Single causal pass, initialised at the steady state of the ramp through the first two samples.
    pub fn filter(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Forward then time-reversed pass over an odd-reflected extension of `x`.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * self.order).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    /// Magnitude of one pass at `freq` Hz, evaluated on the unit circle.
    pub fn magnitude(&self, freq: f64) -> f64 {
        use std::f64::consts::PI;
        let w = 2.0 * PI * freq / self.rate;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        self.sections
            .iter()
            .map(|s| {
                let num = (s.b[0] + s.b[1] * z1.0 + s.b[2] * z2.0, s.b[1] * z1.1 + s.b[2] * z2.1);
                let den = (1.0 + s.a[0] * z1.0 + s.a[1] * z2.0, s.a[0] * z1.1 + s.a[1] * z2.1);
                (num.0.hypot(num.1)) / (den.0.hypot(den.1))
            })
            .product()
    }
}

/// Effective cutoff after the near-Nyquist clamp.
pub fn effective_cutoff(cutoff: f64, rate: f64) -> Result<f64> {
    let nyquist = rate / 2.0;
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(SignalError::InvalidArgument(format!("cutoff must be positive, got {cutoff}")));
    }
    if cutoff > nyquist {
        return Err(SignalError::CutoffAboveNyquist { cutoff, nyquist });
    }
    let limit = NYQUIST_CLAMP * nyquist;
    if cutoff >= limit {
        log::warn!("cutoff {cutoff} Hz is at the Nyquist edge of {rate} Hz data; clamping to {limit} Hz");
        return Ok(limit);
    }
    Ok(cutoff)
}

/// Zero-phase low-pass of every channel.
///
/// A cutoff between 0.99 x Nyquist and Nyquist is clamped to 0.99 x Nyquist with a
/// warning; above Nyquist it is an error.
pub fn butterworth_lowpass_zero_phase(ts: &TimeSeries, cutoff: f64, order: usize) -> Result<TimeSeries> {
    if let Some(ch) = ts.first_nan_channel() {
        return Err(SignalError::ContainsNaN(ch.to_string()));
    }
    let cutoff = effective_cutoff(cutoff, ts.rate)?;
    let filter = ButterworthLowpass::design(order, cutoff, ts.rate)?;
    ts.map_columns(ts.rate, |_, col| Ok(filter.filtfilt(&col)))
}

/// Linear interpolation of uniformly sampled `values` (first sample at `start`) at `t`.
/// Times outside the record are clamped to the end samples.
pub fn interpolate_uniform(values: &[f64], rate: f64, start: f64, t: f64) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let s = ((t - start) * rate).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 1);
    if i + 1 >= n {
        return values[n - 1];
    }
    let frac = s - i as f64;
    if frac == 0.0 {
        values[i]
    } else {
        values[i] + (values[i + 1] - values[i]) * frac
    }
}

/// Number of samples of a grid at `new_rate` that fits inside `duration` seconds.
pub fn grid_len(duration: f64, new_rate: f64) -> usize {
    (duration * new_rate + 1e-9).floor() as usize + 1
}

/// Resamples onto a uniform grid at `new_rate` spanning the original duration.
pub fn resample_linear(ts: &TimeSeries, new_rate: f64) -> Result<TimeSeries> {
    if !(new_rate > 0.0 && new_rate.is_finite()) {
        return Err(SignalError::InvalidArgument(format!("rate must be positive, got {new_rate}")));
    }
    if let Some(ch) = ts.first_nan_channel() {
        return Err(SignalError::ContainsNaN(ch.to_string()));
    }
    if ts.frame_count() == 0 {
        return TimeSeries::empty(new_rate, ts.channels.clone());
    }
    if new_rate == ts.rate {
        return Ok(ts.clone());
    }
    let len = grid_len(ts.duration(), new_rate);
    let rate = ts.rate;
    ts.map_columns(new_rate, |_, col| {
        Ok((0..len).map(|k| interpolate_uniform(&col, rate, 0.0, k as f64 / new_rate)).collect())
    })
}

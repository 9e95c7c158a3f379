use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Result, SkeletalError, SkeletalModel};
use crate::camera::Point3D;

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

/// Two markers whose distance measures one segment's size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingPair {
    pub segment: String,
    pub marker_a: String,
    pub marker_b: String,
}

/// Uniform scale factor per segment, in model segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    segments: Vec<String>,
    factors: Vec<f64>,
}

impl ScaleSet {
    pub fn uniform(model: &SkeletalModel, factor: f64) -> Self {
        let segments: Vec<String> = model.segments().iter().map(|s| s.name.clone()).collect();
        let factors = vec![factor; segments.len()];
        Self { segments, factors }
    }

    pub fn from_factors(model: &SkeletalModel, factors: Vec<f64>) -> Result<Self> {
        if factors.len() != model.segments().len() {
            return Err(SkeletalError::DimensionMismatch(format!(
                "expected {} scale factors, got {}",
                model.segments().len(),
                factors.len()
            )));
        }
        let segments = model.segments().iter().map(|s| s.name.clone()).collect();
        Ok(Self { segments, factors })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn get(&self, segment: usize) -> f64 {
        self.factors[segment]
    }

    pub fn by_name(&self, name: &str) -> Option<f64> {
        self.segments.iter().position(|s| s == name).map(|i| self.factors[i])
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.segments.iter().map(String::as_str).zip(self.factors.iter().copied())
    }

    /// Multiplies every factor by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self { segments: self.segments.clone(), factors: self.factors.iter().map(|f| f * k).collect() }
    }

    /// Rejects non-positive factors, and factors outside `[MIN_SCALE, MAX_SCALE]`
    /// unless `allow_extreme` is set.
    pub fn validate(&self, allow_extreme: bool) -> Result<()> {
        for (segment, scale) in self.iter() {
            let ok = scale > 0.0 && scale.is_finite() && (allow_extreme || (MIN_SCALE..=MAX_SCALE).contains(&scale));
            if !ok {
                return Err(SkeletalError::ScaleOutOfRange { segment: segment.to_string(), scale });
            }
        }
        Ok(())
    }
}

/// Scales each segment by the mean ratio of measured to model inter-marker distance
/// over its pairs. Model distances are taken in the neutral pose at unit scale;
/// segments without pairs inherit their parent's factor (the root defaults to 1).
pub fn scale_model(
    model: &SkeletalModel,
    static_markers: &HashMap<String, Point3D>,
    pairs: &[ScalingPair],
) -> Result<ScaleSet> {
    let unit = ScaleSet::uniform(model, 1.0);
    let neutral = model.marker_positions(&unit, &vec![0.0; model.coordinates().len()]);

    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); model.segments().len()];
    for pair in pairs {
        let seg = model
            .segment_index(&pair.segment)
            .ok_or_else(|| SkeletalError::InvalidArgument(format!("unknown segment `{}`", pair.segment)))?;
        let model_pos = |name: &str| {
            model.marker_index(name).map(|i| neutral[i]).ok_or_else(|| SkeletalError::MissingMarker(name.to_string()))
        };
        let measured = |name: &str| {
            static_markers.get(name).copied().ok_or_else(|| SkeletalError::MissingMarker(name.to_string()))
        };
        let (ma, mb) = (measured(&pair.marker_a)?, measured(&pair.marker_b)?);
        let default = (model_pos(&pair.marker_a)? - model_pos(&pair.marker_b)?).norm();
        if default == 0.0 {
            return Err(SkeletalError::ZeroDefaultDistance(pair.marker_a.clone(), pair.marker_b.clone()));
        }
        ratios[seg].push((ma - mb).norm() / default);
    }

    let mut factors = vec![1.0; model.segments().len()];
    for &s in model.segment_order() {
        let r = &ratios[s];
        factors[s] = if r.is_empty() {
            model.segments()[s].parent.map_or(1.0, |p| factors[p])
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        };
    }
    ScaleSet::from_factors(model, factors)
}

//! The per-rule answer computations, each a pure function of mask statistics.

use crate::error::QaError;
use crate::mask::{destruction_pixels, ClassCounts, Label, SemanticMask};

use super::vocab::{PercentBucket, ResilienceClass, SeverityLevel, SpatialPattern};

/// Thresholds asked about in threshold questions, in registry order.
pub const THRESHOLDS: [u32; 6] = [5, 10, 25, 50, 75, 90];

/// Destruction share above which reconstruction is needed.
pub const RECONSTRUCTION_THRESHOLD: f64 = 40.0;

/// Fraction of destruction pixels that must lie within σ of the centroid.
pub const CONCENTRATION_FRACTION: f64 = 0.7;

pub const HIGH_RESILIENCE: f64 = 0.8;
pub const MODERATE_RESILIENCE: f64 = 0.5;

/// Result of a ratio whose denominator is the building pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuildingShare<T> {
    Value(T),
    NoBuildings,
}

impl<T> BuildingShare<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> BuildingShare<U> {
        match self {
            BuildingShare::Value(v) => BuildingShare::Value(f(v)),
            BuildingShare::NoBuildings => BuildingShare::NoBuildings,
        }
    }
}

/// `⌊100 · N_l / N_total⌋`.
pub fn percent_of_total(counts: &ClassCounts, label: Label) -> u32 {
    debug_assert!(counts.n_total > 0);
    (100 * counts.get(label) / counts.n_total) as u32
}

/// `⌊100 · N_l / N_building⌋` for a building label.
pub fn percent_of_buildings(counts: &ClassCounts, label: Label) -> BuildingShare<u32> {
    debug_assert!(label.is_building());
    match counts.n_building() {
        0 => BuildingShare::NoBuildings,
        nb => BuildingShare::Value((100 * counts.get(label) / nb) as u32),
    }
}

/// Share of building pixels (any state) in the whole scene, floored.
pub fn building_share_of_total(counts: &ClassCounts) -> u32 {
    (100 * counts.n_building() / counts.n_total) as u32
}

pub fn bucket(percent: u32) -> PercentBucket {
    debug_assert!(percent <= 100);
    PercentBucket::new((percent / 10).min(9) as u8).expect("decile below 10")
}

pub fn severity_level(os: f64) -> SeverityLevel {
    if os <= 0.0 {
        SeverityLevel::NoDamage
    } else if os < 10.0 {
        SeverityLevel::Minor
    } else if os < 30.0 {
        SeverityLevel::Moderate
    } else if os < 60.0 {
        SeverityLevel::Severe
    } else {
        SeverityLevel::Extensive
    }
}

/// How σ is derived from the centroid distances in the spatial rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Population standard deviation of the distances.
    #[default]
    DistanceStd,
    /// Root-mean-square distance from the centroid.
    RmsRadius,
}

pub fn spatial_pattern(mask: &SemanticMask, mode: SigmaMode) -> SpatialPattern {
    let pixels = destruction_pixels(mask);
    if pixels.is_empty() {
        return SpatialPattern::NoDestruction;
    }
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x as f64, sy + p.y as f64));
    let (cx, cy) = (sx / n, sy / n);
    let dists: Vec<f64> = pixels
        .iter()
        .map(|p| ((p.x as f64 - cx).powi(2) + (p.y as f64 - cy).powi(2)).sqrt())
        .collect();
    let sigma = match mode {
        SigmaMode::DistanceStd => {
            let mean = dists.iter().sum::<f64>() / n;
            (dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
        SigmaMode::RmsRadius => (dists.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
    };
    let within = dists.iter().filter(|&&d| d < sigma).count();
    if within as f64 / n > CONCENTRATION_FRACTION {
        SpatialPattern::ConcentratedInOneArea
    } else {
        SpatialPattern::SpreadThroughout
    }
}

/// Intact share of building pixels, `N_1 / (N_1 + N_2 + N_3)`.
pub fn resilience_ratio(counts: &ClassCounts) -> BuildingShare<f64> {
    match counts.n_building() {
        0 => BuildingShare::NoBuildings,
        nb => BuildingShare::Value(counts.n_intact as f64 / nb as f64),
    }
}

pub fn resilience_class(ratio: f64) -> ResilienceClass {
    if ratio >= HIGH_RESILIENCE {
        ResilienceClass::High
    } else if ratio >= MODERATE_RESILIENCE {
        ResilienceClass::Moderate
    } else {
        ResilienceClass::Low
    }
}

/// Yes/No answer to "is destruction beyond threshold `t`".
///
/// For the low thresholds (5, 10) the question asks whether destruction
/// stays *below* `t`; for the rest whether it *exceeds* `t`. Both are strict.
pub fn threshold_answer(percent: f64, t: u32) -> Result<bool, QaError> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(QaError::PercentOutOfRange(percent));
    }
    match t {
        5 | 10 => Ok(percent < t as f64),
        25 | 50 | 75 | 90 => Ok(percent > t as f64),
        other => Err(QaError::UnsupportedThreshold(other)),
    }
}

pub fn needs_reconstruction(percent: f64) -> bool {
    percent > RECONSTRUCTION_THRESHOLD
}

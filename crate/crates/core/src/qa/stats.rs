use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::QaError;

use super::{severity_level, AnswerToken, QaItem, QuestionCategory, SpatialPattern};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryTotal {
    pub category: QuestionCategory,
    pub count: usize,
}

/// Corpus-level distribution summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub total_questions: usize,
    /// One entry per category, in schedule order.
    pub category_totals: Vec<CategoryTotal>,
    /// Frequencies of the five severity levels, summing to one.
    pub severity_frequencies: [f64; 5],
    /// `max f / min f`; `None` when some severity level never occurs.
    pub imbalance_ratio: Option<f64>,
    /// Fractions of concentrated / spread / no-destruction scenes.
    pub spatial_frequencies: [f64; 3],
    /// Fraction of scenes where reconstruction is needed.
    pub reconstruction_fraction: f64,
}

/// `max(f) / min(f)`, undefined when any frequency is zero.
pub fn imbalance_ratio(frequencies: &[f64]) -> Option<f64> {
    let max = frequencies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = frequencies.iter().copied().fold(f64::INFINITY, f64::min);
    (!frequencies.is_empty() && min > 0.0).then(|| max / min)
}

/// Summarizes a generated corpus.
///
/// Severity frequencies come from `severities` (per-image destruction
/// percentages) when given, otherwise from each image's severity-level answer.
pub fn dataset_stats(items: &[QaItem], severities: Option<&[f64]>) -> Result<DatasetStats, QaError> {
    if items.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    let images: BTreeSet<&str> = items.iter().map(|i| i.image_id.as_str()).collect();

    let mut totals = [0usize; 8];
    let mut level_counts = [0usize; 5];
    let mut spatial_counts = [0usize; 3];
    let mut reconstruction = [0usize; 2];
    for item in items {
        totals[item.category.index()] += 1;
        match (item.template_id.as_str(), item.answer) {
            ("sv_level", AnswerToken::Severity(level)) if severities.is_none() => {
                level_counts[level.index()] += 1
            }
            ("sp_pattern", AnswerToken::Spatial(p)) => {
                let idx = SpatialPattern::ALL.iter().position(|&q| q == p).unwrap();
                spatial_counts[idx] += 1;
            }
            ("rc_reconstruction", a) => reconstruction[usize::from(a != AnswerToken::Yes)] += 1,
            _ => {}
        }
    }
    if let Some(values) = severities {
        for &os in values {
            if !(0.0..=100.0).contains(&os) {
                return Err(QaError::PercentOutOfRange(os));
            }
            level_counts[severity_level(os).index()] += 1;
        }
    }

    let severity_frequencies = normalize(&level_counts);
    let spatial = normalize(&spatial_counts);
    let recon_total = reconstruction[0] + reconstruction[1];
    Ok(DatasetStats {
        images: images.len(),
        total_questions: items.len(),
        category_totals: QuestionCategory::ALL
            .iter()
            .map(|&c| CategoryTotal {
                category: c,
                count: totals[c.index()],
            })
            .collect(),
        imbalance_ratio: imbalance_ratio(&severity_frequencies),
        severity_frequencies,
        spatial_frequencies: spatial,
        reconstruction_fraction: if recon_total == 0 {
            0.0
        } else {
            reconstruction[0] as f64 / recon_total as f64
        },
    })
}

fn normalize<const K: usize>(counts: &[usize; K]) -> [f64; K] {
    let total: usize = counts.iter().sum();
    let mut out = [0.0; K];
    if total > 0 {
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

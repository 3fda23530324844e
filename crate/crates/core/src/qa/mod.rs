//! Rule-based question/answer generation from a semantic change mask.
//!
//! Every mask yields exactly 40 items, one per registry template, with
//! answers computed from pixel statistics alone.

mod registry;
mod rules;
mod stats;
mod vocab;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::{count_labels, destruction_percentage, ClassCounts, Label, SemanticMask};

pub use registry::{registry, template_index, AnswerRule, QaTemplate, REGISTRY_VERSION};
pub use rules::{
    bucket, building_share_of_total, needs_reconstruction, percent_of_buildings,
    percent_of_total, resilience_class, resilience_ratio, severity_level, spatial_pattern,
    threshold_answer, BuildingShare, SigmaMode, CONCENTRATION_FRACTION, HIGH_RESILIENCE,
    MODERATE_RESILIENCE, RECONSTRUCTION_THRESHOLD, THRESHOLDS,
};
pub use stats::{dataset_stats, imbalance_ratio, CategoryTotal, DatasetStats};
pub use vocab::{
    AnswerToken, AnswerVocabulary, PercentBucket, ResilienceClass, ResponseLevel, SeverityLevel,
    SpatialPattern, UnknownToken,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    DamageDetection,
    Quantitative,
    Comparative,
    Severity,
    Spatial,
    Contextual,
    Threshold,
    RecoveryAssessment,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 8] = [
        QuestionCategory::DamageDetection,
        QuestionCategory::Quantitative,
        QuestionCategory::Comparative,
        QuestionCategory::Severity,
        QuestionCategory::Spatial,
        QuestionCategory::Contextual,
        QuestionCategory::Threshold,
        QuestionCategory::RecoveryAssessment,
    ];

    /// Questions per image in each category, indexed like [`Self::ALL`].
    pub const SCHEDULE: [usize; 8] = [6, 8, 6, 4, 2, 4, 6, 4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn per_image(self) -> usize {
        Self::SCHEDULE[self.index()]
    }

    pub fn key(self) -> &'static str {
        match self {
            QuestionCategory::DamageDetection => "damage_detection",
            QuestionCategory::Quantitative => "quantitative",
            QuestionCategory::Comparative => "comparative",
            QuestionCategory::Severity => "severity",
            QuestionCategory::Spatial => "spatial",
            QuestionCategory::Contextual => "contextual",
            QuestionCategory::Threshold => "threshold",
            QuestionCategory::RecoveryAssessment => "recovery_assessment",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            QuestionCategory::DamageDetection => "Damage Detection",
            QuestionCategory::Quantitative => "Quantitative",
            QuestionCategory::Comparative => "Comparative",
            QuestionCategory::Severity => "Severity",
            QuestionCategory::Spatial => "Spatial",
            QuestionCategory::Contextual => "Contextual",
            QuestionCategory::Threshold => "Threshold",
            QuestionCategory::RecoveryAssessment => "Recovery Assessment",
        }
    }
}

impl fmt::Display for QuestionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for QuestionCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| format!("unknown question category {s:?}"))
    }
}

/// One generated question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub image_id: String,
    pub template_id: String,
    pub category: QuestionCategory,
    pub question: String,
    pub answer: AnswerToken,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenConfig {
    pub sigma: SigmaMode,
}

/// Everything the answer rules read from one mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFacts {
    pub counts: ClassCounts,
    /// Unfloored destruction share in percent.
    pub destruction: f64,
    pub spatial: SpatialPattern,
}

impl SceneFacts {
    pub fn from_mask(mask: &SemanticMask, config: &GenConfig) -> Self {
        let counts = count_labels(mask);
        Self {
            counts,
            destruction: destruction_percentage(&counts),
            spatial: spatial_pattern(mask, config.sigma),
        }
    }

    pub fn severity(&self) -> SeverityLevel {
        severity_level(self.destruction)
    }
}

fn share_token(share: BuildingShare<u32>) -> AnswerToken {
    match share {
        BuildingShare::Value(p) => AnswerToken::Percent(bucket(p)),
        BuildingShare::NoBuildings => AnswerToken::NoBuildings,
    }
}

/// Evaluates one rule against the scene.
pub fn answer(rule: AnswerRule, facts: &SceneFacts) -> AnswerToken {
    use AnswerToken as A;
    let c = &facts.counts;
    let os = facts.destruction;
    match rule {
        AnswerRule::Presence(l) => A::yes_no(c.get(l) > 0),
        AnswerRule::AnyBuilding => A::yes_no(c.n_building() > 0),
        AnswerRule::AnyDestruction => A::yes_no(c.n_destruction() > 0),
        AnswerRule::AllIntact => A::yes_no(c.n_intact > 0 && c.n_destruction() == 0),
        AnswerRule::ShareOfScene(l) => A::Percent(bucket(percent_of_total(c, l))),
        AnswerRule::ShareOfBuildings(l) => share_token(percent_of_buildings(c, l)),
        AnswerRule::BuildingFootprint => A::Percent(bucket(building_share_of_total(c))),
        AnswerRule::DominantDestruction => {
            if c.n_damaged > c.n_destroyed {
                A::Damaged
            } else {
                A::Destroyed
            }
        }
        AnswerRule::IntactVersusAffected => {
            if c.n_intact > c.n_destruction() {
                A::Intact
            } else {
                A::Affected
            }
        }
        AnswerRule::MoreThan(a, b) => A::yes_no(c.get(a) > c.get(b)),
        AnswerRule::AffectedExceedsIntact => A::yes_no(c.n_destruction() > c.n_intact),
        AnswerRule::SeverityLevel => A::Severity(severity_level(os)),
        AnswerRule::WidelyAffected => A::yes_no(os >= 30.0),
        AnswerRule::CatastrophicallyAffected => A::yes_no(os >= 60.0),
        AnswerRule::AffectedAreaBucket => A::Percent(bucket(os.floor() as u32)),
        AnswerRule::SpatialPattern => A::Spatial(facts.spatial),
        AnswerRule::Concentrated => {
            A::yes_no(facts.spatial == SpatialPattern::ConcentratedInOneArea)
        }
        AnswerRule::ResilienceClass => match resilience_ratio(c) {
            BuildingShare::Value(r) => A::Resilience(resilience_class(r)),
            BuildingShare::NoBuildings => A::NoBuildings,
        },
        AnswerRule::MajorityIntact => match resilience_ratio(c) {
            BuildingShare::Value(r) => A::yes_no(r > 0.5),
            BuildingShare::NoBuildings => A::NoBuildings,
        },
        AnswerRule::BuildingsPresent => A::yes_no(c.n_building() > 0),
        AnswerRule::IntactBuildingBucket => share_token(percent_of_buildings(c, Label::Intact)),
        AnswerRule::Threshold(t) => {
            A::yes_no(threshold_answer(os, t).expect("registry thresholds are valid"))
        }
        AnswerRule::ReconstructionNeeded | AnswerRule::EmergencyServices => {
            A::yes_no(needs_reconstruction(os))
        }
        AnswerRule::Habitable => A::yes_no(!needs_reconstruction(os)),
        AnswerRule::ResponseLevel => A::Response(if needs_reconstruction(os) {
            ResponseLevel::Major
        } else {
            ResponseLevel::Minor
        }),
    }
}

fn items_for(facts: &SceneFacts, image_id: &str, category: Option<QuestionCategory>) -> Vec<QaItem> {
    registry()
        .iter()
        .filter(|t| category.is_none_or(|c| t.category == c))
        .map(|t| QaItem {
            image_id: image_id.to_string(),
            template_id: t.template_id.clone(),
            category: t.category,
            question: t.question.clone(),
            answer: answer(t.rule, facts),
        })
        .collect()
}

/// Items of one category for a single scene, in registry order.
pub fn generate_category(
    mask: &SemanticMask,
    image_id: &str,
    category: QuestionCategory,
    config: &GenConfig,
) -> Vec<QaItem> {
    items_for(&SceneFacts::from_mask(mask, config), image_id, Some(category))
}

/// All 40 items for one scene with the default configuration.
pub fn generate_all(mask: &SemanticMask, image_id: &str) -> Vec<QaItem> {
    generate_all_with(mask, image_id, &GenConfig::default())
}

pub fn generate_all_with(mask: &SemanticMask, image_id: &str, config: &GenConfig) -> Vec<QaItem> {
    items_for(&SceneFacts::from_mask(mask, config), image_id, None)
}

/// Generates a whole corpus in parallel.
///
/// Output is sorted by image id, then registry order, regardless of the
/// thread pool size.
pub fn generate_corpus<'a, I>(scenes: I, config: &GenConfig) -> Vec<QaItem>
where
    I: IntoParallelIterator<Item = (&'a str, &'a SemanticMask)>,
{
    let mut per_image: Vec<(String, Vec<QaItem>)> = scenes
        .into_par_iter()
        .map(|(id, mask)| (id.to_string(), generate_all_with(mask, id, config)))
        .collect();
    per_image.sort_by(|a, b| a.0.cmp(&b.0));
    per_image.into_iter().flat_map(|(_, items)| items).collect()
}

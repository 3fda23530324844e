//! The fixed 40-question schedule.
//!
//! Template ids are stable across wording changes; golden files key on them.

use std::sync::OnceLock;

use crate::mask::Label;

use super::rules::THRESHOLDS;
use super::QuestionCategory;

/// Version tag of the template wording, bumped whenever a question text changes.
pub const REGISTRY_VERSION: &str = "1";

/// Which rule produces a template's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerRule {
    /// Yes iff `N_l > 0`.
    Presence(Label),
    /// Yes iff any building pixel exists.
    AnyBuilding,
    /// Yes iff `N_2 + N_3 > 0`.
    AnyDestruction,
    /// Yes iff there are intact buildings and nothing damaged or destroyed.
    AllIntact,
    /// Bucket of `⌊100 · N_l / N_total⌋`.
    ShareOfScene(Label),
    /// Bucket of `⌊100 · N_l / N_building⌋`, or the no-buildings token.
    ShareOfBuildings(Label),
    /// Bucket of `⌊100 · N_building / N_total⌋`.
    BuildingFootprint,
    /// Damaged iff `N_2 > N_3`, otherwise Destroyed.
    DominantDestruction,
    /// Intact iff `N_1 > N_2 + N_3`, otherwise Affected.
    IntactVersusAffected,
    /// Yes iff `N_a > N_b`.
    MoreThan(Label, Label),
    /// Yes iff `N_2 + N_3 > N_1`.
    AffectedExceedsIntact,
    SeverityLevel,
    /// Yes iff destruction share ≥ 30 (the severe boundary).
    WidelyAffected,
    /// Yes iff destruction share ≥ 60 (the extensive boundary).
    CatastrophicallyAffected,
    /// Bucket of the floored destruction share.
    AffectedAreaBucket,
    SpatialPattern,
    Concentrated,
    ResilienceClass,
    /// Yes iff the intact share of buildings exceeds one half.
    MajorityIntact,
    BuildingsPresent,
    IntactBuildingBucket,
    Threshold(u32),
    ReconstructionNeeded,
    EmergencyServices,
    Habitable,
    ResponseLevel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaTemplate {
    pub template_id: String,
    pub category: QuestionCategory,
    pub question: String,
    pub rule: AnswerRule,
}

fn t(id: &str, category: QuestionCategory, question: &str, rule: AnswerRule) -> QaTemplate {
    QaTemplate {
        template_id: id.to_string(),
        category,
        question: question.to_string(),
        rule,
    }
}

fn build() -> Vec<QaTemplate> {
    use AnswerRule as R;
    use Label::*;
    use QuestionCategory as C;

    let mut v = vec![
        t("dd_intact", C::DamageDetection, "Are there any intact buildings in the scene?", R::Presence(Intact)),
        t("dd_damaged", C::DamageDetection, "Are there any damaged buildings in the scene?", R::Presence(Damaged)),
        t("dd_destroyed", C::DamageDetection, "Are there any destroyed buildings in the scene?", R::Presence(Destroyed)),
        t("dd_buildings", C::DamageDetection, "Are any buildings visible in the scene?", R::AnyBuilding),
        t("dd_evidence", C::DamageDetection, "Is there any evidence of structural damage?", R::AnyDestruction),
        t("dd_all_intact", C::DamageDetection, "Are all buildings in the scene intact?", R::AllIntact),
        t("qt_intact_scene", C::Quantitative, "What percentage of the image is covered by intact buildings?", R::ShareOfScene(Intact)),
        t("qt_damaged_scene", C::Quantitative, "What percentage of the image is covered by damaged buildings?", R::ShareOfScene(Damaged)),
        t("qt_destroyed_scene", C::Quantitative, "What percentage of the image is covered by destroyed buildings?", R::ShareOfScene(Destroyed)),
        t("qt_background_scene", C::Quantitative, "What percentage of the image is background?", R::ShareOfScene(Background)),
        t("qt_intact_buildings", C::Quantitative, "What percentage of the buildings are intact?", R::ShareOfBuildings(Intact)),
        t("qt_damaged_buildings", C::Quantitative, "What percentage of the buildings are damaged?", R::ShareOfBuildings(Damaged)),
        t("qt_destroyed_buildings", C::Quantitative, "What percentage of the buildings are destroyed?", R::ShareOfBuildings(Destroyed)),
        t("qt_building_footprint", C::Quantitative, "What percentage of the image is covered by buildings?", R::BuildingFootprint),
        t("cp_dominant", C::Comparative, "Which destruction type is dominant, damaged or destroyed?", R::DominantDestruction),
        t("cp_intact_vs_affected", C::Comparative, "Are intact or affected areas more prevalent?", R::IntactVersusAffected),
        t("cp_damaged_gt_destroyed", C::Comparative, "Are there more damaged than destroyed buildings?", R::MoreThan(Damaged, Destroyed)),
        t("cp_intact_gt_damaged", C::Comparative, "Are there more intact than damaged buildings?", R::MoreThan(Intact, Damaged)),
        t("cp_intact_gt_destroyed", C::Comparative, "Are there more intact than destroyed buildings?", R::MoreThan(Intact, Destroyed)),
        t("cp_affected_gt_intact", C::Comparative, "Does the affected area exceed the intact area?", R::AffectedExceedsIntact),
        t("sv_level", C::Severity, "What is the overall severity of the damage?", R::SeverityLevel),
        t("sv_widely", C::Severity, "Is the area widely affected?", R::WidelyAffected),
        t("sv_catastrophic", C::Severity, "Is the area catastrophically affected?", R::CatastrophicallyAffected),
        t("sv_extent", C::Severity, "What share of the area is affected by damage?", R::AffectedAreaBucket),
        t("sp_pattern", C::Spatial, "How is the destruction distributed across the image?", R::SpatialPattern),
        t("sp_concentrated", C::Spatial, "Is the destruction concentrated in one area?", R::Concentrated),
        t("cx_resilience", C::Contextual, "How resilient were the structures in this area?", R::ResilienceClass),
        t("cx_majority_intact", C::Contextual, "Did most buildings remain intact?", R::MajorityIntact),
        t("cx_buildings_present", C::Contextual, "Does the area contain built structures?", R::BuildingsPresent),
        t("cx_intact_share", C::Contextual, "What proportion of structures withstood the disaster?", R::IntactBuildingBucket),
    ];

    for &th in &THRESHOLDS {
        let question = if th <= 10 {
            format!("Is the destruction below {th}% of the area?")
        } else {
            format!("Does the destruction exceed {th}% of the area?")
        };
        v.push(QaTemplate {
            template_id: format!("th_{th:02}"),
            category: C::Threshold,
            question,
            rule: R::Threshold(th),
        });
    }

    v.extend([
        t("rc_reconstruction", C::RecoveryAssessment, "Does the area need reconstruction?", R::ReconstructionNeeded),
        t("rc_emergency", C::RecoveryAssessment, "Are emergency services required in this area?", R::EmergencyServices),
        t("rc_habitable", C::RecoveryAssessment, "Is the area still habitable?", R::Habitable),
        t("rc_response", C::RecoveryAssessment, "What scale of recovery response is required?", R::ResponseLevel),
    ]);
    v
}

/// The 40 templates in emission order.
pub fn registry() -> &'static [QaTemplate] {
    static REGISTRY: OnceLock<Vec<QaTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(build)
}

/// Position of a template id in the registry.
pub fn template_index(template_id: &str) -> Option<usize> {
    registry().iter().position(|t| t.template_id == template_id)
}

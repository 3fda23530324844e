//! Semantic damage masks, rule-based change-detection question generation,
//! and scoring of predicted answers.

pub mod error;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod qa;

pub use error::{DataError, EvalError, MaskError, QaError};
pub use mask::{
    count_labels, destruction_percentage, destruction_pixels, ClassCounts, Label, PixelCoord,
    SemanticMask,
};
pub use metrics::{score, ConfusionMatrix, EvalReport, PredictionSet};
pub use qa::{generate_all, AnswerToken, AnswerVocabulary, QaItem, QuestionCategory};

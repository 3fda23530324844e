//! Scoring of predicted answers against gold QA items.
//!
//! OA is exact-match accuracy, AA the unweighted mean of per-category
//! accuracies, and precision/recall/F1 are macro-averaged over every answer
//! class that appears in the gold or predicted answers.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::EvalError;
use crate::qa::{AnswerToken, AnswerVocabulary, QaItem, QuestionCategory};

/// Describes the F1 averaging; written into every report.
pub const F1_AVERAGING: &str = "macro over answer classes with nonzero gold or predicted support";

fn key_string(image_id: &str, template_id: &str) -> String {
    format!("{image_id}/{template_id}")
}

/// Predicted answer per `(image_id, template_id)`.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    answers: HashMap<(String, String), AnswerToken>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        image_id: impl Into<String>,
        template_id: impl Into<String>,
        answer: AnswerToken,
    ) -> Result<(), EvalError> {
        let key = (image_id.into(), template_id.into());
        if self.answers.contains_key(&key) {
            return Err(EvalError::DuplicateKey(key_string(&key.0, &key.1)));
        }
        self.answers.insert(key, answer);
        Ok(())
    }

    /// Uses each item's own answer as the prediction.
    pub fn from_items(items: &[QaItem]) -> Result<Self, EvalError> {
        let mut set = Self::new();
        for it in items {
            set.insert(it.image_id.clone(), it.template_id.clone(), it.answer)?;
        }
        Ok(set)
    }

    pub fn get(&self, image_id: &str, template_id: &str) -> Option<AnswerToken> {
        self.answers
            .get(&(image_id.to_string(), template_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    fn check_keys(&self, gold: &[QaItem]) -> Result<(), EvalError> {
        let mut seen = HashSet::with_capacity(gold.len());
        let mut missing = Vec::new();
        for it in gold {
            let key = (it.image_id.clone(), it.template_id.clone());
            if !seen.insert(key.clone()) {
                return Err(EvalError::DuplicateKey(key_string(&key.0, &key.1)));
            }
            if !self.answers.contains_key(&key) {
                missing.push(key_string(&key.0, &key.1));
            }
        }
        let mut extra: Vec<String> = self
            .answers
            .keys()
            .filter(|k| !seen.contains(*k))
            .map(|k| key_string(&k.0, &k.1))
            .collect();
        if missing.is_empty() && extra.is_empty() {
            return Ok(());
        }
        missing.sort();
        extra.sort();
        Err(EvalError::KeyMismatch { missing, extra })
    }
}

/// Square count matrix; rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Macro-averaged precision, recall and F1 plus the per-class F1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(class, f1)` for every class with support.
    pub per_class_f1: Vec<(usize, f64)>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(classes);
        for (g, p) in pairs {
            m.add(g, p);
        }
        m
    }

    pub fn add(&mut self, gold: usize, predicted: usize) {
        self.counts[gold * self.classes + predicted] += 1;
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&g| g != class)
            .map(|g| self.get(g, class))
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.get(class, p))
            .sum()
    }

    pub fn true_negatives(&self, class: usize) -> u64 {
        self.total()
            - self.true_positives(class)
            - self.false_positives(class)
            - self.false_negatives(class)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        correct as f64 / total as f64
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes)
            .all(|g| (0..self.classes).all(|p| g == p || self.get(g, p) == 0))
    }

    /// Per-class scores averaged over classes with gold or predicted support.
    /// A zero denominator yields 0 for that class.
    pub fn macro_scores(&self) -> MacroScores {
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut f1_sum = 0.0;
        let mut per_class_f1 = Vec::new();
        for c in 0..self.classes {
            let tp = self.true_positives(c) as f64;
            let fp = self.false_positives(c) as f64;
            let fneg = self.false_negatives(c) as f64;
            if tp + fp + fneg == 0.0 {
                continue;
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            precision += p;
            recall += r;
            f1_sum += f1;
            per_class_f1.push((c, f1));
        }
        let k = per_class_f1.len().max(1) as f64;
        MacroScores {
            precision: precision / k,
            recall: recall / k,
            f1: f1_sum / k,
            per_class_f1,
        }
    }
}

/// A float written with exactly four decimals in JSON.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Fixed4(pub f64);

impl Serialize for Fixed4 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.4}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

/// Scores for one evaluation run. Fields serialize in sorted key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub average_accuracy: Fixed4,
    pub f1_averaging: &'static str,
    pub items: usize,
    pub macro_f1: Fixed4,
    pub macro_precision: Fixed4,
    pub macro_recall: Fixed4,
    pub overall_accuracy: Fixed4,
    pub per_category_accuracy: BTreeMap<String, Fixed4>,
    pub per_class_f1: BTreeMap<String, Fixed4>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Tally {
    confusion: ConfusionMatrix,
    correct: [u64; 8],
    seen: [u64; 8],
}

impl Tally {
    fn new(classes: usize) -> Self {
        Self {
            confusion: ConfusionMatrix::new(classes),
            correct: [0; 8],
            seen: [0; 8],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.confusion = self.confusion.merge(&other.confusion);
        for i in 0..8 {
            self.correct[i] += other.correct[i];
            self.seen[i] += other.seen[i];
        }
        self
    }
}

fn tally(gold: &[QaItem], preds: &PredictionSet) -> Result<Tally, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    preds.check_keys(gold)?;
    let vocab = AnswerVocabulary::standard();
    let classes = vocab.len();
    Ok(gold
        .par_iter()
        .fold(
            || Tally::new(classes),
            |mut t, it| {
                let p = preds
                    .get(&it.image_id, &it.template_id)
                    .expect("keys checked");
                t.confusion.add(vocab.index_of(it.answer), vocab.index_of(p));
                let c = it.category.index();
                t.seen[c] += 1;
                t.correct[c] += u64::from(p == it.answer);
                t
            },
        )
        .reduce(|| Tally::new(classes), Tally::merge))
}

fn category_accuracies(t: &Tally) -> BTreeMap<QuestionCategory, f64> {
    QuestionCategory::ALL
        .iter()
        .filter(|c| t.seen[c.index()] > 0)
        .map(|&c| (c, t.correct[c.index()] as f64 / t.seen[c.index()] as f64))
        .collect()
}

/// Accuracy within each question category that has at least one item.
pub fn per_category_breakdown(
    gold: &[QaItem],
    preds: &PredictionSet,
) -> Result<BTreeMap<QuestionCategory, f64>, EvalError> {
    Ok(category_accuracies(&tally(gold, preds)?))
}

pub fn score(gold: &[QaItem], preds: &PredictionSet) -> Result<EvalReport, EvalError> {
    let t = tally(gold, preds)?;
    let per_cat = category_accuracies(&t);
    let aa = per_cat.values().sum::<f64>() / per_cat.len() as f64;
    let scores = t.confusion.macro_scores();
    let vocab = AnswerVocabulary::standard();
    Ok(EvalReport {
        average_accuracy: Fixed4(aa),
        f1_averaging: F1_AVERAGING,
        items: gold.len(),
        macro_f1: Fixed4(scores.f1),
        macro_precision: Fixed4(scores.precision),
        macro_recall: Fixed4(scores.recall),
        overall_accuracy: Fixed4(t.confusion.accuracy()),
        per_category_accuracy: per_cat
            .into_iter()
            .map(|(c, a)| (c.key().to_string(), Fixed4(a)))
            .collect(),
        per_class_f1: scores
            .per_class_f1
            .into_iter()
            .map(|(c, f)| (vocab.tokens()[c].to_string(), Fixed4(f)))
            .collect(),
    })
}

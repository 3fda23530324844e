//! Training loop for the toy model on the synthetic task.

use std::collections::BTreeMap;
use std::time::Instant;

use cdvqa_core::metrics::score;
use cdvqa_core::{AnswerVocabulary, PredictionSet, QaItem};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{KernelError, ModelError};
use crate::kernel::gradcheck::relative_error;
use crate::model::{Fusion, ModelConfig, Query, SceneInput, TextModeSetting, ToyModel, ToyWeights};
use crate::nn::{Adam, AdamConfig, Linear, Parameters};
use crate::task::{majority_baseline, Sample, Split, SyntheticTask, TaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub task: TaskConfig,
    /// Refuse to train unless every parameter group passes a finite-difference check.
    pub gradcheck_gate: bool,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
            model: ModelConfig::new(AnswerVocabulary::standard().len()),
            task: TaskConfig {
                seed,
                ..TaskConfig::default()
            },
            gradcheck_gate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelCheckOptions {
    /// Smooth elements checked per parameter group.
    pub per_group: usize,
    pub step: f64,
    pub threshold: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Candidates drawn per group before giving up, as a multiple of `per_group`.
    pub attempts: usize,
    /// Multiplies every analytic gradient; used to confirm failures are caught.
    pub fault: Option<f64>,
    pub seed: u64,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            per_group: 2,
            step: 1e-5,
            threshold: 1e-4,
            floor: 1e-5,
            attempts: 8,
            fault: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub groups: usize,
    pub elements: usize,
    /// Candidates whose central differences at `step` and `step / 2` disagreed
    /// (a ReLU or max-pool switch inside the stencil) and were redrawn.
    pub skipped: usize,
    pub step: f64,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub worst_group: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Groups that ran out of smooth candidates.
    pub unverified: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldoutScores {
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub macro_f1: f64,
    pub per_category_accuracy: BTreeMap<String, f64>,
    /// How often each answer was predicted.
    pub predicted_answers: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub fusion: Fusion,
    pub layers: usize,
    pub text: TextModeSetting,
    pub parameters: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub gradcheck: Option<GateReport>,
    /// Mean training-set loss before the first update.
    pub initial_loss: f64,
    /// Mean training-set loss after the last epoch (evaluation mode).
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub heldout: HeldoutScores,
    pub majority_answer: String,
    pub majority_baseline_accuracy: f64,
    pub beats_baseline: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub with_text: TrainReport,
    pub without_text: TrainReport,
    /// Held-out OA with text minus held-out OA without.
    pub text_gap: f64,
}

fn scene_input(model: &ToyModel, split: &Split, i: usize) -> SceneInput {
    let s = &split.scenes[i];
    SceneInput {
        height: s.mask.height(),
        width: s.mask.width(),
        pre: s.pre.clone(),
        post: s.post.clone(),
        description: model.description_ids(&s.description),
    }
}

/// Scenes referenced by `samples` (each once) plus one query per sample.
fn assemble(model: &ToyModel, split: &Split, samples: &[&Sample]) -> (Vec<SceneInput>, Vec<Query>) {
    let mut local = BTreeMap::new();
    let mut scenes = Vec::new();
    let queries = samples
        .iter()
        .map(|s| {
            let idx = *local.entry(s.scene).or_insert_with(|| {
                scenes.push(scene_input(model, split, s.scene));
                scenes.len() - 1
            });
            Query {
                scene: idx,
                question: model.question_ids(&s.item.question),
            }
        })
        .collect();
    (scenes, queries)
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode logits for every sample, in order.
fn predict_split(model: &ToyModel, split: &Split, samples: &[Sample]) -> Result<Vec<f64>, ModelError> {
    let mut logits = Vec::with_capacity(samples.len() * model.config.vocab);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (scenes, queries) = assemble(model, split, &refs);
        logits.extend(model.predict(&scenes, &queries)?);
    }
    Ok(logits)
}

fn mean_loss(model: &ToyModel, split: &Split) -> Result<f64, ModelError> {
    let logits = predict_split(model, split, &split.samples)?;
    let gold: Vec<usize> = split.samples.iter().map(|s| s.gold).collect();
    Ok(crate::model::batch_cross_entropy(&logits, &gold, model.config.vocab)?.0)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

fn evaluate(model: &ToyModel, split: &Split) -> Result<HeldoutScores, ModelError> {
    let vocab = AnswerVocabulary::standard();
    let logits = predict_split(model, split, &split.samples)?;
    let mut preds = PredictionSet::new();
    let mut predicted_answers = BTreeMap::new();
    let gold: Vec<QaItem> = split.samples.iter().map(|s| s.item.clone()).collect();
    for (s, row) in split.samples.iter().zip(logits.chunks(model.config.vocab)) {
        let token = vocab.token(argmax(row)).expect("head width equals vocabulary size");
        *predicted_answers.entry(token.to_string()).or_insert(0) += 1;
        preds
            .insert(s.item.image_id.clone(), s.item.template_id.clone(), token)
            .map_err(|e| ModelError::Config(e.to_string()))?;
    }
    let report = score(&gold, &preds).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(HeldoutScores {
        overall_accuracy: report.overall_accuracy.0,
        average_accuracy: report.average_accuracy.0,
        macro_f1: report.macro_f1.0,
        per_category_accuracy: report.per_category_accuracy.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
        predicted_answers,
    })
}

/// Finite-difference check of random elements of every trainable group of
/// `model` on the given batch.
pub fn gradcheck_model(
    model: &ToyModel,
    scenes: &[SceneInput],
    queries: &[Query],
    gold: &[usize],
    opts: &ModelCheckOptions,
) -> Result<GateReport, ModelError> {
    let mut probe = model.clone();
    let (logits, cache) = probe.forward(scenes, queries, true)?;
    let (_, grad) = crate::model::batch_cross_entropy(&logits, gold, model.config.vocab)?;
    let mut analytic = model.backward(&cache, &grad).flatten();
    if let Some(f) = opts.fault {
        analytic.iter_mut().for_each(|g| *g *= f);
    }
    let base = model.weights.flatten();
    let loss_at = |i: usize, d: f64| -> Result<f64, ModelError> {
        let mut w: ToyWeights = model.weights.clone();
        let mut pos = 0;
        w.visit_mut(&mut |_, t| {
            if i >= pos && i < pos + t.len() {
                t[i - pos] = base[i] + d;
            }
            pos += t.len();
        });
        model.loss_for(&w, scenes, queries, gold)
    };
    let central = |i: usize, h: f64| -> Result<f64, ModelError> { Ok((loss_at(i, h)? - loss_at(i, -h)?) / (2.0 * h)) };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GateReport {
        groups: 0,
        elements: 0,
        skipped: 0,
        step: opts.step,
        threshold: opts.threshold,
        max_rel_error: 0.0,
        worst_group: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        unverified: Vec::new(),
        passed: false,
    };
    let mut offset = 0;
    for (name, len) in model.weights.groups() {
        report.groups += 1;
        let want = opts.per_group.min(len);
        let candidates = index::sample(&mut rng, len, (want * opts.attempts.max(1)).min(len)).into_vec();
        let mut checked = 0;
        for k in candidates {
            if checked == want {
                break;
            }
            let i = offset + k;
            let numeric = central(i, opts.step)?;
            let half = central(i, opts.step / 2.0)?;
            if relative_error(numeric, half, opts.floor) > opts.threshold {
                report.skipped += 1;
                continue;
            }
            checked += 1;
            let err = relative_error(analytic[i], numeric, opts.floor);
            if err > report.max_rel_error || report.worst_group.is_empty() {
                report.max_rel_error = err;
                report.worst_group = name.clone();
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
        }
        report.elements += checked;
        if checked < want {
            report.unverified.push(name);
        }
        offset += len;
    }
    report.passed = report.unverified.is_empty() && report.max_rel_error <= opts.threshold;
    Ok(report)
}

const GATE_SIZE: usize = 32;
const GATE_REDRAWS: u64 = 4;

/// Gradient check of a reduced-size copy of the configured model.
///
/// The output layer is randomized so that every upstream group receives a
/// nonzero gradient, and the head biases are jittered so no ReLU starts
/// exactly at its kink. The batch is redrawn while some group lacks smooth
/// elements.
fn gate(config: &TrainConfig) -> Result<GateReport, ModelError> {
    gate_with(config, &ModelCheckOptions::default())
}

fn gate_with(config: &TrainConfig, opts: &ModelCheckOptions) -> Result<GateReport, ModelError> {
    let model_config = ModelConfig {
        channels: 4,
        state: 3,
        head_hidden: 8,
        embed_buckets: 64,
        ..config.model.clone()
    };
    let mut model = ToyModel::new(model_config, config.seed ^ 0x9e37)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7f4a);
    model.weights.head_out = Linear::random(model.config.head_hidden, model.config.vocab, &mut rng);
    for b in model.weights.question_fc.b.iter_mut().chain(&mut model.weights.head_hidden.b) {
        *b = rng.random_range(-0.1..0.1);
    }
    let mut skipped = 0;
    let mut report = None;
    for redraw in 0..GATE_REDRAWS {
        let task = SyntheticTask::generate(TaskConfig {
            seed: config.seed.wrapping_add(redraw.wrapping_mul(0x9e37_79b9)),
            size: GATE_SIZE.max(model.config.downsample() * 2),
            train_scenes: 2,
            heldout_scenes: 0,
            train_samples: 6,
        });
        let refs: Vec<&Sample> = task.train.samples.iter().collect();
        let (scenes, queries) = assemble(&model, &task.train, &refs);
        let gold: Vec<usize> = task.train.samples.iter().map(|s| s.gold).collect();
        let opts = ModelCheckOptions {
            seed: rng.random(),
            ..*opts
        };
        let mut r = gradcheck_model(&model, &scenes, &queries, &gold, &opts)?;
        skipped += r.skipped;
        r.skipped = skipped;
        let done = r.unverified.is_empty();
        report = Some(r);
        if done {
            break;
        }
    }
    Ok(report.expect("at least one draw"))
}

/// Trains on the synthetic task and scores the held-out split.
pub fn train_toy(config: &TrainConfig) -> Result<TrainReport, ModelError> {
    let start = Instant::now();
    let gradcheck = if config.gradcheck_gate {
        let g = gate(config)?;
        if !g.passed {
            return Err(ModelError::GradCheck(format!(
                "{} relative error {:.3e}",
                g.worst_group, g.max_rel_error
            )));
        }
        Some(g)
    } else {
        None
    };

    let task = SyntheticTask::generate(config.task.clone());
    if task.train.samples.is_empty() || task.heldout.samples.is_empty() {
        return Err(ModelError::Config("both splits need samples".into()));
    }
    let mut model = ToyModel::new(config.model.clone(), config.seed)?;
    let mut opt = Adam::new(config.adam, model.weights.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);

    let initial_loss = mean_loss(&model, &task.train)?;
    let mut order: Vec<usize> = (0..task.train.samples.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.adam.lr_at(epoch);
        let mut total = 0.0;
        for (step, idx) in order.chunks(batch).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &task.train.samples[i]).collect();
            let (scenes, queries) = assemble(&model, &task.train, &samples);
            let gold: Vec<usize> = samples.iter().map(|s| s.gold).collect();
            let (loss, _, grads) = match model.loss_and_grads(&scenes, &queries, &gold) {
                Ok(out) => out,
                Err(ModelError::Kernel(KernelError::NonPositiveDelta { value, .. })) if !value.is_finite() => {
                    return Err(ModelError::Diverged { epoch, step, loss: value });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(ModelError::Diverged { epoch, step, loss });
            }
            opt.step(&mut model.weights, &grads, lr);
            step_losses.push(loss);
            total += loss * samples.len() as f64;
        }
        epoch_losses.push(total / order.len() as f64);
    }

    let final_loss = mean_loss(&model, &task.train)?;
    if !final_loss.is_finite() {
        return Err(ModelError::Diverged {
            epoch: config.epochs,
            step: 0,
            loss: final_loss,
        });
    }
    let heldout = evaluate(&model, &task.heldout)?;
    let vocab = AnswerVocabulary::standard();
    let (majority, baseline) = majority_baseline(&task.heldout.samples, vocab.len());
    Ok(TrainReport {
        seed: config.seed,
        epochs: config.epochs,
        fusion: config.model.fusion,
        layers: config.model.layers,
        text: config.model.text_mode,
        parameters: model.weights.param_count(),
        train_samples: task.train.samples.len(),
        heldout_samples: task.heldout.samples.len(),
        gradcheck,
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        epoch_losses,
        step_losses,
        beats_baseline: heldout.overall_accuracy > baseline,
        heldout,
        majority_answer: vocab.token(majority).map(|t| t.to_string()).unwrap_or_default(),
        majority_baseline_accuracy: baseline,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `config` with and without the description input.
pub fn train_with_ablation(config: &TrainConfig) -> Result<AblationReport, ModelError> {
    let mut with = config.clone();
    with.model.text_mode = TextModeSetting::Use;
    let mut without = config.clone();
    without.model.text_mode = TextModeSetting::Ablate;
    let with_text = train_toy(&with)?;
    let without_text = train_toy(&without)?;
    Ok(AblationReport {
        text_gap: with_text.heldout.overall_accuracy - without_text.heldout.overall_accuracy,
        with_text,
        without_text,
    })
}

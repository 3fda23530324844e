//! Acceptance checks. Each criterion prints one PASS/FAIL line; the target
//! exits nonzero if any criterion fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use cdvqa_core::metrics::PredictionSet;
use cdvqa_core::qa::{
    dataset_stats, generate_corpus, imbalance_ratio, severity_level, threshold_answer, GenConfig,
    SeverityLevel,
};
use cdvqa_core::{generate_all, score, AnswerToken, QaItem, QuestionCategory, SemanticMask};
use common::{cdvqa, oracle_answers, path_str, random_mask, write_corpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcssm::bench::scan_bench;
use tcssm::kernel::gradcheck::gradcheck;
use tcssm::kernel::{
    change_scan_fast, change_scan_ref, max_relative_error, predict_params, BlockWeights,
    DeltaMode, Discretization, FusionInputs, ScanConfig, ScanDims, ScanParams, StreamPair,
    TextMode,
};
use tcssm::nn::cross_entropy;
use tcssm::train::{train_with_ablation, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ScanConfig {
    ScanConfig {
        delta_mode: [DeltaMode::Mean, DeltaMode::Pre, DeltaMode::Post][rng.random_range(0..3)],
        discretization: if rng.random() {
            Discretization::Euler
        } else {
            Discretization::ExactZoh
        },
    }
}

fn schedule() -> Outcome {
    const M: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masks: Vec<(String, SemanticMask)> = (0..M)
        .map(|i| {
            let (w, h, codes) = random_mask(&mut rng, 8, 32);
            (format!("img{i:05}"), SemanticMask::from_codes(w, h, &codes).unwrap())
        })
        .collect();
    let start = Instant::now();
    let items = generate_corpus(masks.iter().map(|(id, m)| (id.as_str(), m)).collect::<Vec<_>>(), &GenConfig::default());
    let elapsed = start.elapsed();

    let mut per_cat = [0usize; 8];
    for it in &items {
        per_cat[it.category.index()] += 1;
    }
    let expected: Vec<usize> = [6, 8, 6, 4, 2, 4, 6, 4].iter().map(|k| k * M).collect();

    let full = 54_224usize;
    let table = [
        (QuestionCategory::Quantitative, 433_792),
        (QuestionCategory::DamageDetection, 325_344),
        (QuestionCategory::Comparative, 325_344),
        (QuestionCategory::Threshold, 325_344),
        (QuestionCategory::Severity, 216_896),
        (QuestionCategory::Contextual, 216_896),
        (QuestionCategory::RecoveryAssessment, 216_896),
        (QuestionCategory::Spatial, 108_448),
    ];
    let table_ok = table.iter().all(|&(c, n)| c.per_image() * full == n)
        && QuestionCategory::ALL.iter().map(|c| c.per_image() * full).sum::<usize>() == 2_168_960;

    check(
        items.len() == 40 * M
            && per_cat.to_vec() == expected
            && table_ok
            && elapsed < Duration::from_secs(5),
        format!(
            "{} records, per-category {:?}, full-corpus totals match: {table_ok}, {:.2}s",
            items.len(),
            per_cat,
            elapsed.as_secs_f64()
        ),
    )
}

fn imbalance() -> Outcome {
    let ir = imbalance_ratio(&[0.18, 0.22, 0.28, 0.21, 0.11]).unwrap_or(f64::NAN);
    check((ir - 2.55).abs() <= 0.01, format!("IR = {ir:.4}"))
}

fn rule_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0usize;
    let mut mismatches = Vec::new();
    for k in 0..500 {
        let (w, h, codes) = random_mask(&mut rng, 8, 128);
        let mask = SemanticMask::from_codes(w, h, &codes).unwrap();
        let expected = oracle_answers(w, &codes);
        let items = generate_all(&mask, "m");
        if items.len() != expected.len() {
            mismatches.push(format!("mask {k}: {} items", items.len()));
            continue;
        }
        for it in items {
            compared += 1;
            let got = it.answer.to_string();
            if expected.get(&it.template_id) != Some(&got) {
                mismatches.push(format!("mask {k} {}: got {got}, want {:?}", it.template_id, expected.get(&it.template_id)));
            }
        }
    }
    check(
        mismatches.is_empty() && compared == 500 * 40,
        format!("{compared} answers compared, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    )
}

fn severity_boundaries() -> Outcome {
    use SeverityLevel::*;
    let cases = [
        (0.0, NoDamage),
        (5.0, Minor),
        (10.0, Moderate),
        (29.9, Moderate),
        (30.0, Severe),
        (59.9, Severe),
        (60.0, Extensive),
        (100.0, Extensive),
    ];
    let wrong: Vec<_> = cases
        .iter()
        .filter(|(os, want)| severity_level(*os) != *want)
        .map(|(os, _)| *os)
        .collect();
    check(wrong.is_empty(), format!("{} boundary values, wrong at {wrong:?}", cases.len()))
}

fn threshold_asymmetry() -> Outcome {
    let mut wrong = Vec::new();
    for t in [5u32, 10, 25, 50, 75, 90] {
        for p in 0..=100u32 {
            let want = if t <= 10 { p < t } else { p > t };
            let got = threshold_answer(p as f64, t).ok();
            if got != Some(want) || (p == t && got != Some(false)) {
                wrong.push((t, p));
            }
        }
    }
    check(wrong.is_empty(), format!("606 (T, p) pairs, wrong {wrong:?}"))
}

fn scan_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let dims = if case == 0 {
            ScanDims::new(4, 4096, 16, 16).unwrap()
        } else {
            ScanDims::new(
                rng.random_range(1..=4),
                rng.random_range(1..=4096),
                rng.random_range(1..=16),
                rng.random_range(1..=16),
            )
            .unwrap()
        };
        let config = random_config(&mut rng);
        let params = ScanParams::random(dims, &mut rng);
        let pair = StreamPair::random(dims, &mut rng);
        let r = change_scan_ref(&pair, &params, &config).map_err(|e| e.to_string())?;
        let f = change_scan_fast(&pair, &params, &config).map_err(|e| e.to_string())?;
        worst = worst
            .max(max_relative_error(&f.y, &r.y))
            .max(max_relative_error(&f.y_prime, &r.y_prime))
            .max(max_relative_error(&f.h_last, &r.h_last));
    }
    let bench = scan_bench(ScanDims::new(1, 4096, 16, 16).unwrap(), 0, 3, tcssm::kernel::DEFAULT_CHUNK, 1)
        .map_err(|e| e.to_string())?;
    check(
        worst <= 1e-10,
        format!(
            "200 cases, max rel error {worst:.2e}; one-core time ratio fast/ref at L=4096 = {:.3} (reported, target <= 0.5)",
            bench.time_ratio
        ),
    )
}

fn gradient_check() -> Outcome {
    let dims = ScanDims::new(1, 8, 3, 4).unwrap();
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for seed in 0..10 {
        let r = gradcheck(dims, seed).map_err(|e| e.to_string())?;
        if !r.passed || r.min_abs_drive < 1e-3 {
            failed.push(seed);
        }
        for g in &r.groups {
            if g.max_rel_error > worst.0 {
                worst = (g.max_rel_error, g.name.clone());
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failed.is_empty() && worst.0 <= 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "10 seeds, worst {} at {:.2e}, failed seeds {failed:?}, {:.2}s",
            worst.1,
            worst.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn nullity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut nonzero = 0usize;
    for _ in 0..50 {
        let dims = ScanDims::new(
            rng.random_range(1..=3),
            rng.random_range(1..=64),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        )
        .unwrap();
        let config = random_config(&mut rng);
        let weights = BlockWeights::random_tied(dims.channels, dims.state, &mut rng);
        let f_pre: Vec<f64> = (0..dims.token_len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let inputs = FusionInputs {
            f_post: f_pre.clone(),
            f_pre,
            f_text: (0..dims.batch * dims.channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let p = predict_params(dims, &inputs, &weights, TextMode::Use).map_err(|e| e.to_string())?;
        for out in [
            change_scan_ref(&p.pair, &p.params, &config).map_err(|e| e.to_string())?,
            change_scan_fast(&p.pair, &p.params, &config).map_err(|e| e.to_string())?,
        ] {
            let inf = out.y.iter().chain(&out.y_prime).fold(0.0f64, |m, v| m.max(v.abs()));
            if inf != 0.0 {
                nonzero += 1;
            }
        }
    }
    check(nonzero == 0, format!("50 configurations, {nonzero} outputs with nonzero norm"))
}

fn metrics() -> Outcome {
    use AnswerToken::*;
    let gold_answers = [Yes, Yes, No, No, Intact];
    let pred_answers = [Yes, No, No, No, Intact];
    let gold: Vec<QaItem> = gold_answers
        .iter()
        .enumerate()
        .map(|(i, &answer)| QaItem {
            image_id: "img".into(),
            template_id: format!("t{i}"),
            category: QuestionCategory::DamageDetection,
            question: String::new(),
            answer,
        })
        .collect();
    let mut preds = PredictionSet::new();
    for (i, &a) in pred_answers.iter().enumerate() {
        preds.insert("img", format!("t{i}"), a).map_err(|e| e.to_string())?;
    }
    let r = score(&gold, &preds).map_err(|e| e.to_string())?;
    let oa = r.overall_accuracy.0;
    let f1 = r.macro_f1.0;
    let hand_f1 = (2.0 / 3.0 + 0.8 + 1.0) / 3.0;
    let (ce, _) = cross_entropy(&[0.0; 62], 17);
    check(
        (oa - 0.8).abs() < 1e-12
            && (f1 - 0.8222).abs() <= 1e-4
            && (f1 - hand_f1).abs() < 1e-12
            && (ce - 62f64.ln()).abs() <= 1e-6,
        format!("OA {oa:.4}, macro-F1 {f1:.4}, uniform loss over 62 classes {ce:.6} (ln 62 = {:.6})", 62f64.ln()),
    )
}

fn toy_learning() -> Outcome {
    let start = Instant::now();
    let r = train_with_ablation(&TrainConfig::new(0)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let w = &r.with_text;
    let ok = w.heldout.overall_accuracy > w.majority_baseline_accuracy
        && w.final_loss < 0.8 * w.initial_loss
        && w.gradcheck.as_ref().is_some_and(|g| g.passed)
        && Duration::from_secs_f64(w.seconds) < Duration::from_secs(600)
        && r.without_text.final_loss.is_finite();
    check(
        ok,
        format!(
            "held-out OA {:.4} vs majority {:.4}, loss {:.4} -> {:.4} (ratio {:.3}), {:.0}s; without text OA {:.4}, gap {:+.4}; paired total {:.0}s",
            w.heldout.overall_accuracy,
            w.majority_baseline_accuracy,
            w.initial_loss,
            w.final_loss,
            w.loss_ratio,
            w.seconds,
            r.without_text.heldout.overall_accuracy,
            r.text_gap,
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let masks: Vec<_> = (0..24).map(|_| random_mask(&mut rng, 8, 64)).collect();
    let manifest = write_corpus(dir.path(), &masks);

    let gold = dir.path().join("gold.jsonl");
    let o = cdvqa(&["generate", "--manifest", path_str(&manifest), "--out", path_str(&gold)]);
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let pred = dir.path().join("pred.jsonl");
    let flipped: String = fs::read_to_string(&gold)
        .map_err(|e| e.to_string())?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i % 7 == 0 {
                l.replace("\"Yes\"", "\"No\"") + "\n"
            } else {
                l.to_string() + "\n"
            }
        })
        .collect();
    fs::write(&pred, flipped).map_err(|e| e.to_string())?;

    let mut gens = Vec::new();
    let mut evals = Vec::new();
    for threads in ["1", "4"] {
        let qa = dir.path().join(format!("qa{threads}.jsonl"));
        let report = dir.path().join(format!("report{threads}.json"));
        let g = cdvqa(&["--threads", threads, "generate", "--manifest", path_str(&manifest), "--out", path_str(&qa)]);
        let e = cdvqa(&[
            "--threads",
            threads,
            "eval",
            "--gold",
            path_str(&gold),
            "--pred",
            path_str(&pred),
            "--report",
            path_str(&report),
        ]);
        if !g.status.success() || !e.status.success() {
            return Err("subcommand failed".into());
        }
        gens.push(fs::read(&qa).map_err(|e| e.to_string())?);
        evals.push(fs::read(&report).map_err(|e| e.to_string())?);
    }
    let stats = dataset_stats(
        &cdvqa_core::io::load_qa_jsonl(&gold).map_err(|e| e.to_string())?,
        None,
    )
    .map_err(|e| e.to_string())?;
    check(
        gens[0] == gens[1] && evals[0] == evals[1] && stats.total_questions == 24 * 40,
        format!(
            "generate {} bytes identical: {}, eval {} bytes identical: {}",
            gens[0].len(),
            gens[0] == gens[1],
            evals[0].len(),
            evals[0] == evals[1]
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("schedule invariant", schedule),
        ("imbalance ratio", imbalance),
        ("rule oracles", rule_oracle),
        ("severity boundaries", severity_boundaries),
        ("threshold asymmetry", threshold_asymmetry),
        ("scan oracle equivalence", scan_equivalence),
        ("gradient verification", gradient_check),
        ("equal-stream nullity", nullity),
        ("metrics", metrics),
        ("toy learning", toy_learning),
        ("determinism", determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failures.push(i + 1);
            }
        }
    }
    if failures.is_empty() {
        println!("all {} criteria passed", criteria.len());
    } else {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}

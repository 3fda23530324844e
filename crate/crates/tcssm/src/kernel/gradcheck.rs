//! Central finite-difference verification of the analytic scan backward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::KernelError;
use crate::nn::Parameters;

use super::{
    change_drive, change_scan_backward, change_scan_ref, predict_params, predict_params_backward,
    BlockWeights, FusionInputs, ScanConfig, ScanDims, ScanParams, StreamPair, TextMode,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error per group.
    pub threshold: f64,
    /// Inputs are redrawn until every `|v|` is at least this large.
    pub margin: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Multiplies every analytic gradient; used to confirm failures are caught.
    pub fault: Option<f64>,
    pub config: ScanConfig,
    /// Also check the parameter-prediction block and its inputs.
    pub include_block: bool,
    pub max_resamples: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            margin: 1e-3,
            floor: 1e-6,
            fault: None,
            config: ScanConfig::default(),
            include_block: true,
            max_resamples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    /// `[B, L, D, N]`
    pub dims: [usize; 4],
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    /// Draws rejected by the margin condition before the checked one.
    pub resamples: usize,
    pub min_abs_drive: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn compare(name: String, analytic: &[f64], numeric: &[f64], opts: &GradcheckOptions) -> GroupReport {
    let scale = opts.fault.unwrap_or(1.0);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a * scale;
        max_rel = max_rel.max(relative_error(a, *n, opts.floor));
        max_abs = max_abs.max((a - n).abs());
    }
    GroupReport {
        name,
        elements: analytic.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel <= opts.threshold,
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn min_abs(v: &[f64]) -> f64 {
    v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `loss` along each coordinate of `values`.
fn numeric_grad(values: &mut [f64], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = loss(values);
        values[i] = orig - h;
        let down = loss(values);
        values[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

struct ScanCase {
    pair: StreamPair,
    params: ScanParams,
    gy: Vec<f64>,
    gyp: Vec<f64>,
}

impl ScanCase {
    fn loss(&self, config: &ScanConfig) -> f64 {
        let out = change_scan_ref(&self.pair, &self.params, config).expect("validated case");
        dot(&self.gy, &out.y) + dot(&self.gyp, &out.y_prime)
    }
}

fn check_scan(
    dims: ScanDims,
    rng: &mut ChaCha8Rng,
    opts: &GradcheckOptions,
) -> Result<(Vec<GroupReport>, usize, f64), KernelError> {
    let mut resamples = 0;
    let (mut case, margin) = loop {
        let params = ScanParams::random(dims, rng);
        let pair = StreamPair::random(dims, rng);
        let m = min_abs(&change_drive(&pair, &params, &opts.config)?);
        let gy = normal_vec(rng, dims.token_len());
        let gyp = normal_vec(rng, dims.token_len());
        if m >= opts.margin || resamples >= opts.max_resamples {
            break (ScanCase { pair, params, gy, gyp }, m);
        }
        resamples += 1;
    };
    let cfg = opts.config;
    let analytic = change_scan_backward(&case.pair, &case.params, &cfg, &case.gy, &case.gyp)?;
    let h = opts.step;

    let mut reports = Vec::new();
    for (name, grad) in analytic.groups() {
        let mut values = match name {
            "x" => case.pair.x.clone(),
            "x_prime" => case.pair.x_prime.clone(),
            other => case
                .params
                .groups_mut()
                .into_iter()
                .find(|(n, _)| *n == other)
                .map(|(_, v)| v.clone())
                .expect("every scan group has parameters"),
        };
        let numeric = numeric_grad(&mut values, h, |v| {
            let saved = set_scan_group(&mut case, name, v.to_vec());
            let l = case.loss(&cfg);
            set_scan_group(&mut case, name, saved);
            l
        });
        reports.push(compare(format!("scan.{name}"), grad, &numeric, opts));
    }
    Ok((reports, resamples, margin))
}

fn set_scan_group(case: &mut ScanCase, name: &str, values: Vec<f64>) -> Vec<f64> {
    let slot = match name {
        "x" => &mut case.pair.x,
        "x_prime" => &mut case.pair.x_prime,
        other => case
            .params
            .groups_mut()
            .into_iter()
            .find(|(n, _)| *n == other)
            .map(|(_, v)| v)
            .expect("known group"),
    };
    std::mem::replace(slot, values)
}

struct BlockCase {
    dims: ScanDims,
    inputs: FusionInputs,
    weights: BlockWeights,
    gy: Vec<f64>,
    gyp: Vec<f64>,
}

impl BlockCase {
    fn loss(&self, inputs: &FusionInputs, weights: &BlockWeights, config: &ScanConfig) -> f64 {
        let p = predict_params(self.dims, inputs, weights, TextMode::Use).expect("validated case");
        let out = change_scan_ref(&p.pair, &p.params, config).expect("validated case");
        dot(&self.gy, &out.y) + dot(&self.gyp, &out.y_prime)
    }
}

fn check_block(
    dims: ScanDims,
    rng: &mut ChaCha8Rng,
    opts: &GradcheckOptions,
) -> Result<(Vec<GroupReport>, usize, f64), KernelError> {
    let cfg = opts.config;
    let mut resamples = 0;
    let (case, margin) = loop {
        let weights = BlockWeights::random(dims.channels, dims.state, rng);
        let inputs = FusionInputs {
            f_pre: normal_vec(rng, dims.token_len()),
            f_post: normal_vec(rng, dims.token_len()),
            f_text: normal_vec(rng, dims.batch * dims.channels),
        };
        let p = predict_params(dims, &inputs, &weights, TextMode::Use)?;
        let m = min_abs(&change_drive(&p.pair, &p.params, &cfg)?);
        let gy = normal_vec(rng, dims.token_len());
        let gyp = normal_vec(rng, dims.token_len());
        if m >= opts.margin || resamples >= opts.max_resamples {
            break (
                BlockCase {
                    dims,
                    inputs,
                    weights,
                    gy,
                    gyp,
                },
                m,
            );
        }
        resamples += 1;
    };

    let p = predict_params(dims, &case.inputs, &case.weights, TextMode::Use)?;
    let sg = change_scan_backward(&p.pair, &p.params, &cfg, &case.gy, &case.gyp)?;
    let mut wg = case.weights.zeros_like();
    let fg = predict_params_backward(&case.inputs, &case.weights, &p.cache, &sg, &mut wg);
    let h = opts.step;
    let mut reports = Vec::new();

    let mut analytic_w: Vec<(String, Vec<f64>)> = Vec::new();
    wg.visit(&mut |n, v| analytic_w.push((n.to_string(), v.to_vec())));
    let mut offset = 0;
    let flat = case.weights.flatten();
    for (name, grad) in &analytic_w {
        let range = offset..offset + grad.len();
        offset += grad.len();
        let mut values = flat[range.clone()].to_vec();
        let numeric = numeric_grad(&mut values, h, |v| {
            let mut w = case.weights.clone();
            let mut pos = 0;
            w.visit_mut(&mut |_, t| {
                let r = pos..pos + t.len();
                if r == range {
                    t.copy_from_slice(v);
                }
                pos += t.len();
            });
            case.loss(&case.inputs, &w, &cfg)
        });
        reports.push(compare(format!("block.{name}"), grad, &numeric, opts));
    }

    for (name, grad) in [("f_pre", &fg.f_pre), ("f_post", &fg.f_post), ("f_text", &fg.f_text)] {
        let mut values = match name {
            "f_pre" => case.inputs.f_pre.clone(),
            "f_post" => case.inputs.f_post.clone(),
            _ => case.inputs.f_text.clone(),
        };
        let numeric = numeric_grad(&mut values, h, |v| {
            let mut inputs = case.inputs.clone();
            match name {
                "f_pre" => inputs.f_pre = v.to_vec(),
                "f_post" => inputs.f_post = v.to_vec(),
                _ => inputs.f_text = v.to_vec(),
            }
            case.loss(&inputs, &case.weights, &cfg)
        });
        reports.push(compare(format!("block.{name}"), grad, &numeric, opts));
    }
    Ok((reports, resamples, margin))
}

/// Checks every scan gradient group (and, by default, the prediction block)
/// against central finite differences at a random draw for `seed`.
pub fn gradcheck(dims: ScanDims, seed: u64) -> Result<GradcheckReport, KernelError> {
    gradcheck_with(dims, seed, &GradcheckOptions::default())
}

pub fn gradcheck_with(
    dims: ScanDims,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut groups, mut resamples, mut margin) = check_scan(dims, &mut rng, opts)?;
    if opts.include_block {
        let (g, r, m) = check_block(dims, &mut rng, opts)?;
        groups.extend(g);
        resamples += r;
        margin = margin.min(m);
    }
    let passed = margin >= opts.margin && groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        dims: [dims.batch, dims.len, dims.channels, dims.state],
        seed,
        step: opts.step,
        threshold: opts.threshold,
        resamples,
        min_abs_drive: margin,
        groups,
        passed,
    })
}

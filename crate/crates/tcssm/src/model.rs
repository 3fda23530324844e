//! End-to-end toy change-QA model.
//!
//! Two CNN encoders turn the pre- and post-event images into token grids, a
//! stack of text-conditioned change-scan blocks mixes them, and the pooled
//! scan outputs are fused with a question embedding before an MLP head.
//! Token streams are RMS-normalized on entry to each block; the pooled vector
//! passes through a batch norm and a ReLU projection before fusion.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::ModelError;
use crate::kernel::{
    change_scan_backward, change_scan_fast, predict_params, predict_params_backward, BlockWeights,
    FusionInputs, PredictionCache, ScanConfig, ScanDims, ScanParams, StreamPair, TextMode,
};
use crate::nn::{
    cross_entropy, rms_norm, rms_norm_backward, visit_child, visit_child_mut, BatchNorm, BnCache, BnStats,
    Cnn, CnnCache, HashedEmbedder, Linear, LinearCache, Parameters, RmsCache,
};

/// How the pooled visual vector `v` and the question vector `q` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `v ⊙ q`
    #[default]
    Mul,
    /// `v + q`
    Sum,
    /// `v − q`
    Sub,
    /// `[v; q]`
    Concat,
    /// `(v − q) / ‖v − q‖₂`
    Nsub,
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [Fusion::Mul, Fusion::Sum, Fusion::Sub, Fusion::Concat, Fusion::Nsub];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Mul => "mul",
            Fusion::Sum => "sum",
            Fusion::Sub => "sub",
            Fusion::Concat => "concat",
            Fusion::Nsub => "nsub",
        }
    }

    pub fn output_dim(self, d: usize) -> usize {
        if self == Fusion::Concat {
            2 * d
        } else {
            d
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fusion::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ModelError::Config(format!("unknown fusion mode {s:?}")))
    }
}

const NSUB_EPS: f64 = 1e-12;

/// Combines `v` and `q` under `mode`.
pub fn fuse(mode: Fusion, v: &[f64], q: &[f64]) -> Vec<f64> {
    match mode {
        Fusion::Mul => v.iter().zip(q).map(|(a, b)| a * b).collect(),
        Fusion::Sum => v.iter().zip(q).map(|(a, b)| a + b).collect(),
        Fusion::Sub => v.iter().zip(q).map(|(a, b)| a - b).collect(),
        Fusion::Concat => v.iter().chain(q).copied().collect(),
        Fusion::Nsub => {
            let u: Vec<f64> = v.iter().zip(q).map(|(a, b)| a - b).collect();
            let r = (u.iter().map(|x| x * x).sum::<f64>() + NSUB_EPS).sqrt();
            u.iter().map(|x| x / r).collect()
        }
    }
}

/// `(∂/∂v, ∂/∂q)` of `⟨g, fuse(v, q)⟩`.
pub fn fuse_backward(mode: Fusion, v: &[f64], q: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match mode {
        Fusion::Mul => (
            g.iter().zip(q).map(|(g, q)| g * q).collect(),
            g.iter().zip(v).map(|(g, v)| g * v).collect(),
        ),
        Fusion::Sum => (g.to_vec(), g.to_vec()),
        Fusion::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
        Fusion::Concat => (g[..v.len()].to_vec(), g[v.len()..].to_vec()),
        Fusion::Nsub => {
            let u: Vec<f64> = v.iter().zip(q).map(|(a, b)| a - b).collect();
            let r = (u.iter().map(|x| x * x).sum::<f64>() + NSUB_EPS).sqrt();
            let n: Vec<f64> = u.iter().map(|x| x / r).collect();
            let proj: f64 = n.iter().zip(g).map(|(a, b)| a * b).sum();
            let gu: Vec<f64> = g.iter().zip(&n).map(|(g, n)| (g - n * proj) / r).collect();
            let gq = gu.iter().map(|x| -x).collect();
            (gu, gq)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Token width `D`.
    pub channels: usize,
    /// State size `N`.
    pub state: usize,
    pub layers: usize,
    pub vocab: usize,
    pub fusion: Fusion,
    pub head_hidden: usize,
    pub embed_buckets: usize,
    /// Encoder channel plan, input first.
    pub cnn_channels: Vec<usize>,
    pub text_mode: TextModeSetting,
    #[serde(skip)]
    pub scan: ScanConfig,
}

/// Serializable mirror of [`TextMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TextModeSetting {
    #[default]
    Use,
    Ablate,
}

impl From<TextModeSetting> for TextMode {
    fn from(m: TextModeSetting) -> Self {
        match m {
            TextModeSetting::Use => TextMode::Use,
            TextModeSetting::Ablate => TextMode::Ablate,
        }
    }
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            channels: 32,
            state: 8,
            layers: 2,
            vocab,
            fusion: Fusion::Mul,
            head_hidden: 256,
            embed_buckets: 1024,
            cnn_channels: vec![3, 16, 32, 64, 128],
            text_mode: TextModeSetting::Use,
            scan: ScanConfig::default(),
        }
    }

    /// Input sides must be divisible by `2^blocks`.
    pub fn downsample(&self) -> usize {
        1 << (self.cnn_channels.len() - 1)
    }
}

/// Trainable tensors of the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub cnn_pre: Cnn,
    pub cnn_post: Cnn,
    pub proj_pre: Linear,
    pub proj_post: Linear,
    pub description: HashedEmbedder,
    pub blocks: Vec<BlockWeights>,
    /// Normalizes the pooled scan vector across the batch.
    pub pooled_bn: BatchNorm,
    pub visual_fc: Linear,
    pub question: HashedEmbedder,
    pub question_fc: Linear,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl Parameters for ToyWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        visit_child("cnn_pre", &self.cnn_pre, f);
        visit_child("cnn_post", &self.cnn_post, f);
        visit_child("proj_pre", &self.proj_pre, f);
        visit_child("proj_post", &self.proj_post, f);
        visit_child("description", &self.description, f);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("tcssm{i}"), b, f);
        }
        visit_child("pooled_bn", &self.pooled_bn, f);
        visit_child("visual_fc", &self.visual_fc, f);
        visit_child("question", &self.question, f);
        visit_child("question_fc", &self.question_fc, f);
        visit_child("head_hidden", &self.head_hidden, f);
        visit_child("head_out", &self.head_out, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("cnn_pre", &mut self.cnn_pre, f);
        visit_child_mut("cnn_post", &mut self.cnn_post, f);
        visit_child_mut("proj_pre", &mut self.proj_pre, f);
        visit_child_mut("proj_post", &mut self.proj_post, f);
        visit_child_mut("description", &mut self.description, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("tcssm{i}"), b, f);
        }
        visit_child_mut("pooled_bn", &mut self.pooled_bn, f);
        visit_child_mut("visual_fc", &mut self.visual_fc, f);
        visit_child_mut("question", &mut self.question, f);
        visit_child_mut("question_fc", &mut self.question_fc, f);
        visit_child_mut("head_hidden", &mut self.head_hidden, f);
        visit_child_mut("head_out", &mut self.head_out, f);
    }
}

/// Batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub pre: Vec<[BnStats; 2]>,
    pub post: Vec<[BnStats; 2]>,
    pub pooled: BnStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub weights: ToyWeights,
    pub state: ModelState,
}

/// One image pair with its description, pre-tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub height: usize,
    pub width: usize,
    /// `(3, H, W)`
    pub pre: Vec<f64>,
    /// `(1, H, W)`; replicated to three channels.
    pub post: Vec<f64>,
    pub description: Vec<usize>,
}

/// One question about scene `scene` of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub scene: usize,
    pub question: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    norm_pre: RmsCache,
    norm_post: RmsCache,
    inputs: FusionInputs,
    pred: PredictionCache,
    params: ScanParams,
    pair: StreamPair,
}

/// Everything [`ToyModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: ScanDims,
    grid: (usize, usize),
    queries: Vec<Query>,
    descriptions: Vec<Vec<usize>>,
    cnn_pre: CnnCache,
    cnn_post: CnnCache,
    proj_pre: LinearCache,
    proj_post: LinearCache,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    pooled_bn: BnCache,
    v_fc: LinearCache,
    v: Vec<f64>,
    q_pre: Vec<f64>,
    q_fc: LinearCache,
    q: Vec<f64>,
    fc_hidden: LinearCache,
    hidden: Vec<f64>,
    fc_out: LinearCache,
}

impl ForwardCache {
    /// Token mean of `y + y'` from the last block, `(scenes, D)`, before the
    /// batch norm.
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.layers == 0 || config.channels == 0 || config.state == 0 || config.vocab == 0 {
            return Err(ModelError::Config("layers, channels, state and vocab must be positive".into()));
        }
        if config.cnn_channels.len() < 2 || config.cnn_channels[0] != 3 {
            return Err(ModelError::Config("encoder plan must start at 3 channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.channels;
        let cnn_pre = Cnn::random(&config.cnn_channels, &mut rng);
        let cnn_post = Cnn::random(&config.cnn_channels, &mut rng);
        let c_out = cnn_pre.out_channels();
        let weights = ToyWeights {
            proj_pre: Linear::random(c_out, d, &mut rng),
            proj_post: Linear::random(c_out, d, &mut rng),
            description: HashedEmbedder::random(config.embed_buckets, d, &mut rng),
            blocks: (0..config.layers)
                .map(|_| BlockWeights::random(d, config.state, &mut rng))
                .collect(),
            pooled_bn: BatchNorm::new(d),
            // Unit bias: most of `v` starts active.
            visual_fc: Linear {
                b: vec![1.0; d],
                ..Linear::random(d, d, &mut rng)
            },
            question: HashedEmbedder::random(config.embed_buckets, d, &mut rng),
            question_fc: Linear::random(d, d, &mut rng),
            head_hidden: Linear::random(config.fusion.output_dim(d), config.head_hidden, &mut rng),
            head_out: Linear::zeros(config.head_hidden, config.vocab),
            cnn_pre,
            cnn_post,
        };
        let state = ModelState {
            pre: weights.cnn_pre.new_stats(),
            post: weights.cnn_post.new_stats(),
            pooled: BnStats::new(d),
        };
        Ok(Self { config, weights, state })
    }

    /// Makes every post-event weight equal to its pre-event counterpart.
    pub fn tie_streams(&mut self) {
        let w = &mut self.weights;
        w.cnn_post = w.cnn_pre.clone();
        w.proj_post = w.proj_pre.clone();
        for b in &mut w.blocks {
            b.post = b.pre.clone();
        }
        self.state.post = self.state.pre.clone();
    }

    pub fn question_ids(&self, text: &str) -> Vec<usize> {
        self.weights.question.token_ids(text)
    }

    pub fn description_ids(&self, text: &str) -> Vec<usize> {
        self.weights.description.token_ids(text)
    }

    /// Logits `(queries, vocab)`. `train` selects batch statistics in the
    /// encoders and updates the running averages.
    pub fn forward(
        &mut self,
        scenes: &[SceneInput],
        queries: &[Query],
        train: bool,
    ) -> Result<(Vec<f64>, ForwardCache), ModelError> {
        let mut state = self.state.clone();
        let out = forward_with(&self.config, &self.weights, &mut state, scenes, queries, train)?;
        self.state = state;
        Ok(out)
    }

    /// Mean cross-entropy of `queries` against `gold`, with weight gradients.
    pub fn loss_and_grads(
        &mut self,
        scenes: &[SceneInput],
        queries: &[Query],
        gold: &[usize],
    ) -> Result<(f64, Vec<f64>, ToyWeights), ModelError> {
        let (logits, cache) = self.forward(scenes, queries, true)?;
        let (loss, grad) = batch_cross_entropy(&logits, gold, self.config.vocab)?;
        let grads = backward(&self.config, &self.weights, &cache, &grad);
        Ok((loss, logits, grads))
    }

    /// Training-mode mean loss under `weights`, leaving the running
    /// statistics untouched.
    pub fn loss_for(
        &self,
        weights: &ToyWeights,
        scenes: &[SceneInput],
        queries: &[Query],
        gold: &[usize],
    ) -> Result<f64, ModelError> {
        let mut state = self.state.clone();
        let (logits, _) = forward_with(&self.config, weights, &mut state, scenes, queries, true)?;
        Ok(batch_cross_entropy(&logits, gold, self.config.vocab)?.0)
    }

    /// Evaluation-mode logits using the running statistics.
    pub fn predict(&self, scenes: &[SceneInput], queries: &[Query]) -> Result<Vec<f64>, ModelError> {
        let mut state = self.state.clone();
        Ok(forward_with(&self.config, &self.weights, &mut state, scenes, queries, false)?.0)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> ToyWeights {
        backward(&self.config, &self.weights, cache, grad_logits)
    }
}

/// Mean loss and its gradient with respect to the logits.
pub fn batch_cross_entropy(logits: &[f64], gold: &[usize], vocab: usize) -> Result<(f64, Vec<f64>), ModelError> {
    if logits.len() != gold.len() * vocab {
        return Err(ModelError::Shape {
            what: "logits",
            expected: gold.len() * vocab,
            actual: logits.len(),
        });
    }
    let scale = 1.0 / gold.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &g) in logits.chunks(vocab).zip(gold) {
        if g >= vocab {
            return Err(ModelError::GoldIndex { index: g, classes: vocab });
        }
        let (l, gr) = cross_entropy(row, g);
        total += l;
        grad.extend(gr.into_iter().map(|v| v * scale));
    }
    Ok((total * scale, grad))
}

/// `(N, C, h, w)` feature maps to `(N, h·w, C)` tokens.
fn to_tokens(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            for t in 0..hw {
                out[(i * hw + t) * c + ch] = x[(i * c + ch) * hw + t];
            }
        }
    }
    out
}

fn from_tokens(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            for t in 0..hw {
                out[(i * c + ch) * hw + t] = x[(i * hw + t) * c + ch];
            }
        }
    }
    out
}

fn forward_with(
    config: &ModelConfig,
    w: &ToyWeights,
    state: &mut ModelState,
    scenes: &[SceneInput],
    queries: &[Query],
    train: bool,
) -> Result<(Vec<f64>, ForwardCache), ModelError> {
    let s = scenes.len();
    let first = scenes.first().ok_or(ModelError::Config("empty batch".into()))?;
    let (h, wd) = (first.height, first.width);
    let k = config.downsample();
    if h == 0 || wd == 0 || h % k != 0 || wd % k != 0 {
        return Err(ModelError::ImageSize { height: h, width: wd });
    }
    let hw = h * wd;
    let mut pre = Vec::with_capacity(s * 3 * hw);
    let mut post = Vec::with_capacity(s * 3 * hw);
    for sc in scenes {
        if sc.height != h || sc.width != wd {
            return Err(ModelError::ImageSize {
                height: sc.height,
                width: sc.width,
            });
        }
        if sc.pre.len() != 3 * hw {
            return Err(ModelError::Shape {
                what: "pre image",
                expected: 3 * hw,
                actual: sc.pre.len(),
            });
        }
        if sc.post.len() != hw {
            return Err(ModelError::Shape {
                what: "post image",
                expected: hw,
                actual: sc.post.len(),
            });
        }
        pre.extend_from_slice(&sc.pre);
        for _ in 0..3 {
            post.extend_from_slice(&sc.post);
        }
    }
    for q in queries {
        if q.scene >= s {
            return Err(ModelError::Shape {
                what: "query scene index",
                expected: s,
                actual: q.scene,
            });
        }
    }

    let (fp, cnn_pre) = w.cnn_pre.forward(&pre, s, h, wd, &mut state.pre, train);
    let (fq, cnn_post) = w.cnn_post.forward(&post, s, h, wd, &mut state.post, train);
    let c_out = w.cnn_pre.out_channels();
    let grid = (h / k, wd / k);
    let l = grid.0 * grid.1;
    let d = config.channels;
    let dims = ScanDims::new(s, l, d, config.state)?;
    let (mut f_pre, proj_pre) = w.proj_pre.forward(&to_tokens(&fp, s, c_out, l), s * l);
    let (mut f_post, proj_post) = w.proj_post.forward(&to_tokens(&fq, s, c_out, l), s * l);

    let descriptions: Vec<Vec<usize>> = scenes.iter().map(|sc| sc.description.clone()).collect();
    let f_text: Vec<f64> = descriptions.iter().flat_map(|ids| w.description.embed_ids(ids)).collect();

    let mode: TextMode = config.text_mode.into();
    let mut layers = Vec::with_capacity(w.blocks.len());
    let mut last = None;
    for block in &w.blocks {
        let (n_pre, norm_pre) = rms_norm(&f_pre, d);
        let (n_post, norm_post) = rms_norm(&f_post, d);
        let inputs = FusionInputs {
            f_pre: n_pre,
            f_post: n_post,
            f_text: f_text.clone(),
        };
        let p = predict_params(dims, &inputs, block, mode)?;
        let out = change_scan_fast(&p.pair, &p.params, &config.scan)?;
        for (f, y) in f_pre.iter_mut().zip(&out.y) {
            *f += y;
        }
        for (f, y) in f_post.iter_mut().zip(&out.y_prime) {
            *f += y;
        }
        layers.push(LayerCache {
            norm_pre,
            norm_post,
            inputs,
            pred: p.cache,
            params: p.params,
            pair: p.pair,
        });
        last = Some(out);
    }
    let last = last.expect("at least one layer");
    let mut pooled = vec![0.0; s * d];
    let inv_l = 1.0 / l as f64;
    for si in 0..s {
        for t in 0..l {
            for c in 0..d {
                let i = (si * l + t) * d + c;
                pooled[si * d + c] += (last.y[i] + last.y_prime[i]) * inv_l;
            }
        }
    }

    let (pooled_norm, pooled_bn) = w.pooled_bn.forward(&pooled, s, 1, &mut state.pooled, train);
    let (mut v, v_fc) = w.visual_fc.forward(&pooled_norm, s);
    v.iter_mut().for_each(|x| *x = x.max(0.0));

    let nq = queries.len();
    let q_pre: Vec<f64> = queries.iter().flat_map(|q| w.question.embed_ids(&q.question)).collect();
    let (mut q, q_fc) = w.question_fc.forward(&q_pre, nq);
    q.iter_mut().for_each(|v| *v = v.max(0.0));
    let fused: Vec<f64> = queries
        .iter()
        .enumerate()
        .flat_map(|(i, qu)| {
            fuse(
                config.fusion,
                &v[qu.scene * d..(qu.scene + 1) * d],
                &q[i * d..(i + 1) * d],
            )
        })
        .collect();
    let (mut hidden, fc_hidden) = w.head_hidden.forward(&fused, nq);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let (logits, fc_out) = w.head_out.forward(&hidden, nq);

    Ok((
        logits,
        ForwardCache {
            dims,
            grid,
            queries: queries.to_vec(),
            descriptions,
            cnn_pre,
            cnn_post,
            proj_pre,
            proj_post,
            layers,
            pooled,
            pooled_bn,
            v_fc,
            v,
            q_pre,
            q_fc,
            q,
            fc_hidden,
            hidden,
            fc_out,
        },
    ))
}

fn backward(config: &ModelConfig, w: &ToyWeights, cache: &ForwardCache, grad_logits: &[f64]) -> ToyWeights {
    let mut g = w.zeros_like();
    let dims = cache.dims;
    let (s, l, d) = (dims.batch, dims.len, dims.channels);
    let nq = cache.queries.len();

    let mut gh = w.head_out.backward(&cache.fc_out, grad_logits, &mut g.head_out);
    for (gv, hv) in gh.iter_mut().zip(&cache.hidden) {
        if *hv <= 0.0 {
            *gv = 0.0;
        }
    }
    let g_fused = w.head_hidden.backward(&cache.fc_hidden, &gh, &mut g.head_hidden);
    let fd = config.fusion.output_dim(d);
    let mut g_v = vec![0.0; s * d];
    let mut g_q = vec![0.0; nq * d];
    for (i, qu) in cache.queries.iter().enumerate() {
        let v = &cache.v[qu.scene * d..(qu.scene + 1) * d];
        let (gv, gq) = fuse_backward(config.fusion, v, &cache.q[i * d..(i + 1) * d], &g_fused[i * fd..(i + 1) * fd]);
        for (acc, x) in g_v[qu.scene * d..(qu.scene + 1) * d].iter_mut().zip(&gv) {
            *acc += x;
        }
        g_q[i * d..(i + 1) * d].copy_from_slice(&gq);
    }
    for (gv, qv) in g_q.iter_mut().zip(&cache.q) {
        if *qv <= 0.0 {
            *gv = 0.0;
        }
    }
    let g_qpre = w.question_fc.backward(&cache.q_fc, &g_q, &mut g.question_fc);
    for (i, qu) in cache.queries.iter().enumerate() {
        w.question.backward(&qu.question, &g_qpre[i * d..(i + 1) * d], &mut g.question);
    }
    debug_assert_eq!(cache.q_pre.len(), nq * d);

    for (gv, vv) in g_v.iter_mut().zip(&cache.v) {
        if *vv <= 0.0 {
            *gv = 0.0;
        }
    }
    let g_norm = w.visual_fc.backward(&cache.v_fc, &g_v, &mut g.visual_fc);
    let g_pooled = w.pooled_bn.backward(&cache.pooled_bn, s, 1, &g_norm, &mut g.pooled_bn);
    // Pooled vector is the token mean of y + y' from the last block.
    let inv_l = 1.0 / l as f64;
    let mut g_y = vec![0.0; s * l * d];
    for si in 0..s {
        for t in 0..l {
            for c in 0..d {
                g_y[(si * l + t) * d + c] = g_pooled[si * d + c] * inv_l;
            }
        }
    }
    let mut g_y_prime = g_y.clone();
    let mut g_fpre = vec![0.0; s * l * d];
    let mut g_fpost = vec![0.0; s * l * d];
    let mut g_text = vec![0.0; s * d];
    for (k, (block, lc)) in w.blocks.iter().zip(&cache.layers).enumerate().rev() {
        if k + 1 < w.blocks.len() {
            // f_{k+1} = f_k + y_k: the residual carries the downstream gradient to y_k.
            g_y = g_fpre.clone();
            g_y_prime = g_fpost.clone();
        }
        let sg = change_scan_backward(&lc.pair, &lc.params, &config.scan, &g_y, &g_y_prime)
            .expect("shapes fixed by the forward pass");
        let fg = predict_params_backward(&lc.inputs, block, &lc.pred, &sg, &mut g.blocks[k]);
        for (acc, x) in g_fpre.iter_mut().zip(rms_norm_backward(&lc.norm_pre, &fg.f_pre)) {
            *acc += x;
        }
        for (acc, x) in g_fpost.iter_mut().zip(rms_norm_backward(&lc.norm_post, &fg.f_post)) {
            *acc += x;
        }
        for (acc, x) in g_text.iter_mut().zip(&fg.f_text) {
            *acc += x;
        }
    }
    for (si, ids) in cache.descriptions.iter().enumerate() {
        w.description.backward(ids, &g_text[si * d..(si + 1) * d], &mut g.description);
    }

    let c_out = w.cnn_pre.out_channels();
    let g_tok_pre = w.proj_pre.backward(&cache.proj_pre, &g_fpre, &mut g.proj_pre);
    let g_tok_post = w.proj_post.backward(&cache.proj_post, &g_fpost, &mut g.proj_post);
    let hw = cache.grid.0 * cache.grid.1;
    w.cnn_pre.backward(&cache.cnn_pre, &from_tokens(&g_tok_pre, s, c_out, hw), &mut g.cnn_pre);
    w.cnn_post.backward(&cache.cnn_post, &from_tokens(&g_tok_post, s, c_out, hw), &mut g.cnn_post);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            state: 3,
            layers: 2,
            vocab: 7,
            head_hidden: 8,
            embed_buckets: 32,
            cnn_channels: vec![3, 4, 4],
            ..ModelConfig::new(7)
        }
    }

    fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SceneInput {
        SceneInput {
            height: h,
            width: w,
            pre: (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
            post: (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
            description: vec![1, 5, 9],
        }
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        let mut m = ToyModel::new(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scenes = vec![scene(&mut rng, 8, 8), scene(&mut rng, 8, 8)];
        let queries = vec![
            Query { scene: 0, question: vec![1, 2] },
            Query { scene: 1, question: vec![3] },
            Query { scene: 1, question: vec![] },
        ];
        let (logits, _) = m.forward(&scenes, &queries, true).unwrap();
        assert_eq!(logits.len(), 3 * 7);
        let (loss, _) = batch_cross_entropy(&logits, &[0, 3, 6], 7).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = ToyModel::new(tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scenes = vec![scene(&mut rng, 6, 8)];
        let q = vec![Query { scene: 0, question: vec![] }];
        assert!(matches!(m.forward(&scenes, &q, true), Err(ModelError::ImageSize { .. })));
        let scenes = vec![scene(&mut rng, 8, 8)];
        let q = vec![Query { scene: 2, question: vec![] }];
        assert!(m.forward(&scenes, &q, true).is_err());
        assert!(matches!(
            batch_cross_entropy(&[0.0; 7], &[7], 7),
            Err(ModelError::GoldIndex { index: 7, classes: 7 })
        ));
        assert!(ToyModel::new(ModelConfig { layers: 0, ..tiny_config() }, 0).is_err());
    }

    #[test]
    fn identical_images_with_tied_weights_give_zero_scan_vector() {
        let mut m = ToyModel::new(tiny_config(), 3).unwrap();
        m.tie_streams();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sc = scene(&mut rng, 8, 8);
        let gray: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        sc.post = gray.clone();
        sc.pre = gray.iter().chain(&gray).chain(&gray).copied().collect();
        let (_, cache) = m.forward(&[sc], &[Query { scene: 0, question: vec![4] }], true).unwrap();
        assert!(cache.pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_fusion_zero_question_annihilates() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(fuse(Fusion::Mul, &v, &[0.0; 3]), vec![0.0; 3]);
        assert_eq!(fuse(Fusion::Concat, &v, &[1.0; 3]).len(), 6);
        let n = fuse(Fusion::Nsub, &v, &[1.0, 1.0, 1.0]);
        assert!((n.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_backward_matches_differences() {
        let v = [0.3, -1.2, 0.8];
        let q = [0.5, 0.1, -0.7];
        let h = 1e-6;
        for mode in Fusion::ALL {
            let g: Vec<f64> = (0..mode.output_dim(3)).map(|i| 0.5 - i as f64 * 0.3).collect();
            let f = |v: &[f64], q: &[f64]| -> f64 { fuse(mode, v, q).iter().zip(&g).map(|(a, b)| a * b).sum() };
            let (gv, gq) = fuse_backward(mode, &v, &q, &g);
            for i in 0..3 {
                let mut up = v;
                up[i] += h;
                let mut dn = v;
                dn[i] -= h;
                assert!(((f(&up, &q) - f(&dn, &q)) / (2.0 * h) - gv[i]).abs() < 1e-8, "{mode} v{i}");
                let mut up = q;
                up[i] += h;
                let mut dn = q;
                dn[i] -= h;
                assert!(((f(&v, &up) - f(&v, &dn)) / (2.0 * h) - gq[i]).abs() < 1e-8, "{mode} q{i}");
            }
        }
    }

    #[test]
    fn fusion_names_round_trip() {
        for m in Fusion::ALL {
            assert_eq!(m.name().parse::<Fusion>().unwrap(), m);
        }
        assert!("hadamard".parse::<Fusion>().is_err());
    }
}

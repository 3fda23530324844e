use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::KernelError;
use crate::linalg::gemm;
use crate::nn::{sigmoid, silu, silu_grad, softplus, softplus_inverse, visit_child, visit_child_mut, Parameters};

use super::{check_len, default_a_log, ScanDims, ScanGrads, ScanParams, StreamPair};

/// Visual token features of both dates plus a pooled description vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    /// `(B, L, D)`
    pub f_pre: Vec<f64>,
    pub f_post: Vec<f64>,
    /// `(B, D)`, broadcast over `L`.
    pub f_text: Vec<f64>,
}

/// Whether the description participates in the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TextMode {
    #[default]
    Use,
    /// The fused term is dropped entirely so `G = F` and no gradient reaches `f_text`.
    Ablate,
}

/// Projections for one date: `G → (b, c, δ)` and `F → x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub channels: usize,
    pub state: usize,
    /// `(D, N)`
    pub w_b: Vec<f64>,
    /// `(D, N)`
    pub w_c: Vec<f64>,
    /// `(D, D)`
    pub w_delta: Vec<f64>,
    /// `(D)`
    pub delta_bias: Vec<f64>,
    /// `(D, D)`
    pub w_x: Vec<f64>,
    /// `(D, 3)` depthwise taps at offsets −1, 0, +1.
    pub conv_w: Vec<f64>,
    /// `(D)`
    pub conv_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub pre: StreamWeights,
    pub post: StreamWeights,
    /// `(D, N)`
    pub a_log: Vec<f64>,
}

impl StreamWeights {
    /// Scaled-normal projections; the step bias is drawn so `softplus(bias)`
    /// is log-uniform in `[0.01, 0.1]`.
    pub fn random<R: Rng>(channels: usize, state: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    scale * z
                })
                .collect()
        };
        let inv = 1.0 / (channels as f64).sqrt();
        let w_b = normal(channels * state, inv);
        let w_c = normal(channels * state, inv);
        let w_delta = normal(channels * channels, 0.1 * inv);
        let w_x = normal(channels * channels, inv);
        let conv_w = normal(channels * 3, 1.0 / 3f64.sqrt());
        let delta_bias = (0..channels)
            .map(|_| softplus_inverse(rng.random_range(0.01f64.ln()..0.1f64.ln()).exp()))
            .collect();
        Self {
            channels,
            state,
            w_b,
            w_c,
            w_delta,
            delta_bias,
            w_x,
            conv_w,
            conv_b: vec![0.0; channels],
        }
    }
}

impl BlockWeights {
    pub fn random<R: Rng>(channels: usize, state: usize, rng: &mut R) -> Self {
        let pre = StreamWeights::random(channels, state, rng);
        let post = StreamWeights::random(channels, state, rng);
        Self {
            pre,
            post,
            a_log: default_a_log(channels, state),
        }
    }

    /// Post-event projections identical to the pre-event ones.
    pub fn random_tied<R: Rng>(channels: usize, state: usize, rng: &mut R) -> Self {
        let pre = StreamWeights::random(channels, state, rng);
        Self {
            post: pre.clone(),
            pre,
            a_log: default_a_log(channels, state),
        }
    }

    pub fn channels(&self) -> usize {
        self.pre.channels
    }

    pub fn state(&self) -> usize {
        self.pre.state
    }
}

impl Parameters for StreamWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_b", &self.w_b);
        f("w_c", &self.w_c);
        f("w_delta", &self.w_delta);
        f("delta_bias", &self.delta_bias);
        f("w_x", &self.w_x);
        f("conv_w", &self.conv_w);
        f("conv_b", &self.conv_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w_b", &mut self.w_b);
        f("w_c", &mut self.w_c);
        f("w_delta", &mut self.w_delta);
        f("delta_bias", &mut self.delta_bias);
        f("w_x", &mut self.w_x);
        f("conv_w", &mut self.conv_w);
        f("conv_b", &mut self.conv_b);
    }
}

impl Parameters for BlockWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        visit_child("pre", &self.pre, f);
        visit_child("post", &self.post, f);
        f("a_log", &self.a_log);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("pre", &mut self.pre, f);
        visit_child_mut("post", &mut self.post, f);
        f("a_log", &mut self.a_log);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StreamCache {
    /// `G`, `(B·L, D)`
    g: Vec<f64>,
    /// pre-softplus step, `(B·L, D)`
    delta_raw: Vec<f64>,
    /// `F · W_x`, `(B·L, D)`
    z: Vec<f64>,
    /// conv output before SiLU, `(B·L, D)`
    s: Vec<f64>,
}

/// Intermediates kept for [`predict_params_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCache {
    dims: ScanDims,
    mode: TextMode,
    pre: StreamCache,
    post: StreamCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub params: ScanParams,
    pub pair: StreamPair,
    pub cache: PredictionCache,
}

/// Gradients with respect to the fusion inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub f_pre: Vec<f64>,
    pub f_post: Vec<f64>,
    pub f_text: Vec<f64>,
}

fn stream_forward(
    dims: ScanDims,
    w: &StreamWeights,
    f: &[f64],
    g: Vec<f64>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, StreamCache) {
    let (rows, nd, ns, nl) = (dims.batch * dims.len, dims.channels, dims.state, dims.len);
    let mut b = vec![0.0; rows * ns];
    let mut c = vec![0.0; rows * ns];
    let mut delta_raw = vec![0.0; rows * nd];
    gemm(rows, nd, ns, &g, false, &w.w_b, false, &mut b, false);
    gemm(rows, nd, ns, &g, false, &w.w_c, false, &mut c, false);
    gemm(rows, nd, nd, &g, false, &w.w_delta, false, &mut delta_raw, false);
    for row in delta_raw.chunks_mut(nd) {
        for (v, bias) in row.iter_mut().zip(&w.delta_bias) {
            *v += bias;
        }
    }
    let delta = delta_raw.iter().map(|&v| softplus(v)).collect();

    let mut z = vec![0.0; rows * nd];
    gemm(rows, nd, nd, f, false, &w.w_x, false, &mut z, false);
    let mut s = vec![0.0; rows * nd];
    for bi in 0..dims.batch {
        for t in 0..nl {
            for d in 0..nd {
                let mut acc = w.conv_b[d];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < nl {
                        acc += w.conv_w[d * 3 + k] * z[(bi * nl + src as usize) * nd + d];
                    }
                }
                s[(bi * nl + t) * nd + d] = acc;
            }
        }
    }
    let x = s.iter().map(|&v| silu(v)).collect();
    (
        x,
        b,
        c,
        delta,
        StreamCache {
            g,
            delta_raw,
            z,
            s,
        },
    )
}

/// Text-conditioned scan parameters and stream tokens for both dates.
///
/// `fused = F_pre ⊙ F_post ⊙ F_text`, `G = fused + F` per date; `b`, `c` and
/// the step are linear maps of `G` and `x = SiLU(conv₃(F W_x))`.
pub fn predict_params(
    dims: ScanDims,
    inputs: &FusionInputs,
    weights: &BlockWeights,
    mode: TextMode,
) -> Result<Prediction, KernelError> {
    check_len("f_pre", &inputs.f_pre, dims.token_len())?;
    check_len("f_post", &inputs.f_post, dims.token_len())?;
    check_len("f_text", &inputs.f_text, dims.batch * dims.channels)?;
    check_len("a_log", &weights.a_log, dims.a_len())?;
    for w in [&weights.pre, &weights.post] {
        check_len("w_b", &w.w_b, dims.a_len())?;
        check_len("w_c", &w.w_c, dims.a_len())?;
        check_len("w_delta", &w.w_delta, dims.channels * dims.channels)?;
        check_len("delta_bias", &w.delta_bias, dims.channels)?;
        check_len("w_x", &w.w_x, dims.channels * dims.channels)?;
        check_len("conv_w", &w.conv_w, dims.channels * 3)?;
        check_len("conv_b", &w.conv_b, dims.channels)?;
    }
    let (nl, nd) = (dims.len, dims.channels);
    let mut g_pre = inputs.f_pre.clone();
    let mut g_post = inputs.f_post.clone();
    if mode == TextMode::Use {
        for (i, (gp, gq)) in g_pre.iter_mut().zip(g_post.iter_mut()).enumerate() {
            let (bi, d) = (i / (nl * nd), i % nd);
            let fused = inputs.f_pre[i] * inputs.f_post[i] * inputs.f_text[bi * nd + d];
            *gp += fused;
            *gq += fused;
        }
    }
    let (x, b, c, delta, pre) = stream_forward(dims, &weights.pre, &inputs.f_pre, g_pre);
    let (x_prime, b_prime, c_prime, delta_prime, post) =
        stream_forward(dims, &weights.post, &inputs.f_post, g_post);
    Ok(Prediction {
        params: ScanParams {
            dims,
            a_log: weights.a_log.clone(),
            delta,
            delta_prime,
            b,
            b_prime,
            c,
            c_prime,
        },
        pair: StreamPair { x, x_prime },
        cache: PredictionCache {
            dims,
            mode,
            pre,
            post,
        },
    })
}

/// Returns the gradient with respect to `F` and `G` for one stream, writing
/// weight gradients into `gw`.
#[allow(clippy::too_many_arguments)]
fn stream_backward(
    dims: ScanDims,
    w: &StreamWeights,
    cache: &StreamCache,
    f: &[f64],
    g_x: &[f64],
    g_b: &[f64],
    g_c: &[f64],
    g_delta: &[f64],
    gw: &mut StreamWeights,
) -> (Vec<f64>, Vec<f64>) {
    let (rows, nd, ns, nl) = (dims.batch * dims.len, dims.channels, dims.state, dims.len);

    let g_raw: Vec<f64> = g_delta
        .iter()
        .zip(&cache.delta_raw)
        .map(|(g, r)| g * sigmoid(*r))
        .collect();
    gemm(nd, rows, ns, &cache.g, true, g_b, false, &mut gw.w_b, true);
    gemm(nd, rows, ns, &cache.g, true, g_c, false, &mut gw.w_c, true);
    gemm(nd, rows, nd, &cache.g, true, &g_raw, false, &mut gw.w_delta, true);
    for row in g_raw.chunks(nd) {
        for (acc, v) in gw.delta_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut g_g = vec![0.0; rows * nd];
    gemm(rows, ns, nd, g_b, false, &w.w_b, true, &mut g_g, true);
    gemm(rows, ns, nd, g_c, false, &w.w_c, true, &mut g_g, true);
    gemm(rows, nd, nd, &g_raw, false, &w.w_delta, true, &mut g_g, true);

    let g_s: Vec<f64> = g_x
        .iter()
        .zip(&cache.s)
        .map(|(g, s)| g * silu_grad(*s))
        .collect();
    let mut g_z = vec![0.0; rows * nd];
    for bi in 0..dims.batch {
        for t in 0..nl {
            for d in 0..nd {
                let gs = g_s[(bi * nl + t) * nd + d];
                gw.conv_b[d] += gs;
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < nl {
                        let zi = (bi * nl + src as usize) * nd + d;
                        gw.conv_w[d * 3 + k] += gs * cache.z[zi];
                        g_z[zi] += gs * w.conv_w[d * 3 + k];
                    }
                }
            }
        }
    }
    gemm(nd, rows, nd, f, true, &g_z, false, &mut gw.w_x, true);
    let mut g_f = vec![0.0; rows * nd];
    gemm(rows, nd, nd, &g_z, false, &w.w_x, true, &mut g_f, false);
    (g_f, g_g)
}

/// Chains scan gradients back through [`predict_params`].
///
/// Weight gradients are accumulated into `weight_grads` (which must have the
/// same layout as `weights`); the `a_log` scan gradient is added as well.
pub fn predict_params_backward(
    inputs: &FusionInputs,
    weights: &BlockWeights,
    cache: &PredictionCache,
    scan_grads: &ScanGrads,
    weight_grads: &mut BlockWeights,
) -> FusionGrads {
    let dims = cache.dims;
    let (nl, nd) = (dims.len, dims.channels);
    for (acc, g) in weight_grads.a_log.iter_mut().zip(&scan_grads.a_log) {
        *acc += g;
    }
    let (mut f_pre, g_pre) = stream_backward(
        dims,
        &weights.pre,
        &cache.pre,
        &inputs.f_pre,
        &scan_grads.x,
        &scan_grads.b,
        &scan_grads.c,
        &scan_grads.delta,
        &mut weight_grads.pre,
    );
    let (mut f_post, g_post) = stream_backward(
        dims,
        &weights.post,
        &cache.post,
        &inputs.f_post,
        &scan_grads.x_prime,
        &scan_grads.b_prime,
        &scan_grads.c_prime,
        &scan_grads.delta_prime,
        &mut weight_grads.post,
    );
    let mut f_text = vec![0.0; dims.batch * nd];
    for i in 0..dims.token_len() {
        f_pre[i] += g_pre[i];
        f_post[i] += g_post[i];
        if cache.mode == TextMode::Use {
            let (bi, d) = (i / (nl * nd), i % nd);
            let text = inputs.f_text[bi * nd + d];
            let g_fused = g_pre[i] + g_post[i];
            f_pre[i] += g_fused * inputs.f_post[i] * text;
            f_post[i] += g_fused * inputs.f_pre[i] * text;
            f_text[bi * nd + d] += g_fused * inputs.f_pre[i] * inputs.f_post[i];
        }
    }
    FusionGrads {
        f_pre,
        f_post,
        f_text,
    }
}

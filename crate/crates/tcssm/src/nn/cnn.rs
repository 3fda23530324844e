//! Convolutional encoder: blocks of `[conv3×3 → BN → ReLU] × 2 → maxpool 2×2`.
//!
//! Tensors are `(N, C, H, W)` row-major.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::linalg::gemm;

use super::{visit_child, visit_child_mut, Parameters};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// 3×3 convolution, stride 1, zero padding 1, no bias (batch norm follows).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    /// `(cout, cin · 9)`
    pub w: Vec<f64>,
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    pub fn random<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let scale = (2.0 / (cin * 9) as f64).sqrt();
        let w = (0..cout * cin * 9)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect();
        Self { cin, cout, w }
    }

    pub fn forward(&self, x: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let (hw, k) = (h * w, self.cin * 9);
        assert_eq!(x.len(), n * self.cin * hw);
        let mut y = vec![0.0; n * self.cout * hw];
        y.par_chunks_mut(self.cout * hw)
            .zip(x.par_chunks(self.cin * hw))
            .for_each(|(yi, xi)| {
                let col = im2col(xi, self.cin, h, w);
                gemm(self.cout, k, hw, &self.w, false, &col, false, yi, false);
            });
        y
    }

    /// Accumulates `∂/∂w` into `grads` and returns `∂/∂x`.
    pub fn backward(&self, x: &[f64], n: usize, h: usize, w: usize, gy: &[f64], grads: &mut Conv2d) -> Vec<f64> {
        let (hw, k) = (h * w, self.cin * 9);
        let parts: Vec<(Vec<f64>, Vec<f64>)> = x
            .par_chunks(self.cin * hw)
            .zip(gy.par_chunks(self.cout * hw))
            .map(|(xi, gi)| {
                let col = im2col(xi, self.cin, h, w);
                let mut gw = vec![0.0; self.cout * k];
                gemm(self.cout, hw, k, gi, false, &col, true, &mut gw, false);
                let mut gcol = vec![0.0; k * hw];
                gemm(k, self.cout, hw, &self.w, true, gi, false, &mut gcol, false);
                (gw, col2im(&gcol, self.cin, h, w))
            })
            .collect();
        let mut gx = Vec::with_capacity(n * self.cin * hw);
        for (gw, gxi) in parts {
            for (acc, v) in grads.w.iter_mut().zip(&gw) {
                *acc += v;
            }
            gx.extend(gxi);
        }
        gx
    }
}

impl Parameters for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", &self.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", &mut self.w);
    }
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Running statistics used in evaluation mode; not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    /// In training mode normalizes with batch statistics and updates `stats`.
    pub fn forward(&self, x: &[f64], n: usize, hw: usize, stats: &mut BnStats, train: bool) -> (Vec<f64>, BnCache) {
        let c = self.gamma.len();
        let m = (n * hw) as f64;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for i in 0..n {
                    s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mean = s / m;
                let mut v = 0.0;
                for i in 0..n {
                    v += x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .map(|a| (a - mean) * (a - mean))
                        .sum::<f64>();
                }
                let var = v / m;
                let unbiased = if m > 1.0 { v / (m - 1.0) } else { var };
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    xhat[j] = (x[j] - mean) * is;
                    y[j] = self.gamma[ch] * xhat[j] + self.beta[ch];
                }
            }
        }
        (y, BnCache { xhat, inv_std, train })
    }

    pub fn backward(&self, cache: &BnCache, n: usize, hw: usize, gy: &[f64], grads: &mut BatchNorm) -> Vec<f64> {
        let c = self.gamma.len();
        let m = (n * hw) as f64;
        let mut gx = vec![0.0; gy.len()];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    sum_g += gy[j];
                    sum_gx += gy[j] * cache.xhat[j];
                }
            }
            grads.gamma[ch] += sum_gx;
            grads.beta[ch] += sum_g;
            let k = self.gamma[ch] * cache.inv_std[ch];
            for i in 0..n {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    gx[j] = if cache.train {
                        k * (gy[j] - sum_g / m - cache.xhat[j] * sum_gx / m)
                    } else {
                        k * gy[j]
                    };
                }
            }
        }
        gx
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockCache {
    n: usize,
    h: usize,
    w: usize,
    input: Vec<f64>,
    bn1: BnCache,
    act1: Vec<f64>,
    bn2: BnCache,
    act2: Vec<f64>,
    argmax: Vec<usize>,
}

impl ConvBlock {
    pub fn random<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::random(cin, cout, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv2d::random(cout, cout, rng),
            bn2: BatchNorm::new(cout),
        }
    }

    fn forward(
        &self,
        x: &[f64],
        n: usize,
        h: usize,
        w: usize,
        stats: &mut [BnStats; 2],
        train: bool,
    ) -> (Vec<f64>, BlockCache) {
        let hw = h * w;
        let c = self.conv1.cout;
        let z1 = self.conv1.forward(x, n, h, w);
        let (mut a1, bn1) = self.bn1.forward(&z1, n, hw, &mut stats[0], train);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let z2 = self.conv2.forward(&a1, n, h, w);
        let (mut a2, bn2) = self.bn2.forward(&z2, n, hw, &mut stats[1], train);
        a2.iter_mut().for_each(|v| *v = v.max(0.0));

        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * hw;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * y + dy) * w + 2 * xx + dx;
                        if a2[j] > a2[best] {
                            best = j;
                        }
                    }
                    let o = plane * oh * ow + y * ow + xx;
                    out[o] = a2[best];
                    argmax[o] = best;
                }
            }
        }
        (
            out,
            BlockCache {
                n,
                h,
                w,
                input: x.to_vec(),
                bn1,
                act1: a1,
                bn2,
                act2: a2,
                argmax,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, gout: &[f64], grads: &mut ConvBlock) -> Vec<f64> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let hw = h * w;
        let mut g2 = vec![0.0; cache.act2.len()];
        for (g, &j) in gout.iter().zip(&cache.argmax) {
            g2[j] += g;
        }
        for (g, a) in g2.iter_mut().zip(&cache.act2) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let gz2 = self.bn2.backward(&cache.bn2, n, hw, &g2, &mut grads.bn2);
        let mut g1 = self.conv2.backward(&cache.act1, n, h, w, &gz2, &mut grads.conv2);
        for (g, a) in g1.iter_mut().zip(&cache.act1) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let gz1 = self.bn1.backward(&cache.bn1, n, hw, &g1, &mut grads.bn1);
        self.conv1.backward(&cache.input, n, h, w, &gz1, &mut grads.conv1)
    }
}

impl Parameters for ConvBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        visit_child("conv1", &self.conv1, f);
        visit_child("bn1", &self.bn1, f);
        visit_child("conv2", &self.conv2, f);
        visit_child("bn2", &self.bn2, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("conv1", &mut self.conv1, f);
        visit_child_mut("bn1", &mut self.bn1, f);
        visit_child_mut("conv2", &mut self.conv2, f);
        visit_child_mut("bn2", &mut self.bn2, f);
    }
}

/// Stack of [`ConvBlock`]s; each halves the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnCache {
    blocks: Vec<BlockCache>,
}

impl Cnn {
    /// `channels` lists the plan, e.g. `[3, 16, 32, 64, 128]`.
    pub fn random<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        Self {
            blocks: channels.windows(2).map(|p| ConvBlock::random(p[0], p[1], rng)).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv2.cout)
    }

    pub fn new_stats(&self) -> Vec<[BnStats; 2]> {
        self.blocks
            .iter()
            .map(|b| [BnStats::new(b.conv1.cout), BnStats::new(b.conv2.cout)])
            .collect()
    }

    /// Returns `(N, C_out, H / 2ᵏ, W / 2ᵏ)` features.
    pub fn forward(
        &self,
        x: &[f64],
        n: usize,
        h: usize,
        w: usize,
        stats: &mut [[BnStats; 2]],
        train: bool,
    ) -> (Vec<f64>, CnnCache) {
        let mut cur = x.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, st) in self.blocks.iter().zip(stats.iter_mut()) {
            let (out, cache) = block.forward(&cur, n, ch, cw, st, train);
            caches.push(cache);
            cur = out;
            ch /= 2;
            cw /= 2;
        }
        (cur, CnnCache { blocks: caches })
    }

    pub fn backward(&self, cache: &CnnCache, gout: &[f64], grads: &mut Cnn) -> Vec<f64> {
        let mut g = gout.to_vec();
        for ((block, bc), bg) in self.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            g = block.backward(bc, &g, bg);
        }
        g
    }
}

impl Parameters for Cnn {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("block{i}"), b, f);
        }
    }
}

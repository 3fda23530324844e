use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::gemm;

use super::Parameters;

/// Fully connected layer `y = x W + b` over row-major `(rows, in)` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `(in, out)`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCache {
    rows: usize,
    x: Vec<f64>,
}

impl Linear {
    /// He-scaled normal weights, zero bias.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect();
        Self {
            inputs,
            outputs,
            w,
            b: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LinearCache) {
        assert_eq!(x.len(), rows * self.inputs);
        let mut y: Vec<f64> = self.b.iter().copied().cycle().take(rows * self.outputs).collect();
        gemm(rows, self.inputs, self.outputs, x, false, &self.w, false, &mut y, true);
        (
            y,
            LinearCache {
                rows,
                x: x.to_vec(),
            },
        )
    }

    /// Accumulates weight gradients into `grads` and returns `∂/∂x`.
    pub fn backward(&self, cache: &LinearCache, grad_y: &[f64], grads: &mut Linear) -> Vec<f64> {
        let rows = cache.rows;
        gemm(self.inputs, rows, self.outputs, &cache.x, true, grad_y, false, &mut grads.w, true);
        for row in grad_y.chunks(self.outputs) {
            for (g, v) in grads.b.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut gx = vec![0.0; rows * self.inputs];
        gemm(rows, self.outputs, self.inputs, grad_y, false, &self.w, true, &mut gx, false);
        gx
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

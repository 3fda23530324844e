use crate::error::KernelError;

use super::{check_len, check_positive, ScanDims};

/// How the input matrix is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `B̄ = δ · B`
    #[default]
    Euler,
    /// `B̄ = (δA)⁻¹ (exp(δA) − I) δB`, i.e. `expm1(δA) / A · B` for diagonal `A`.
    ExactZoh,
}

impl Discretization {
    /// Scalar factor multiplying `B` for step `delta` and eigenvalue `a`.
    #[inline]
    pub(crate) fn input_gain(self, delta: f64, a: f64) -> f64 {
        match self {
            Discretization::Euler => delta,
            Discretization::ExactZoh => (delta * a).exp_m1() / a,
        }
    }

    /// `(∂gain/∂δ, ∂gain/∂a)`
    #[inline]
    pub(crate) fn input_gain_grad(self, delta: f64, a: f64) -> (f64, f64) {
        match self {
            Discretization::Euler => (1.0, 0.0),
            Discretization::ExactZoh => {
                let e = (delta * a).exp();
                let em1 = (delta * a).exp_m1();
                (e, (delta * a * e - em1) / (a * a))
            }
        }
    }
}

/// Discretized evolution and input matrices for one stream, each `(B, L, D, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Zero-order-hold discretization of diagonal `A = −exp(a_log)`.
///
/// `a_bar = exp(δ A)`; `b_bar` is the per-element input matrix (without the
/// token value `x`), using `method` for the input term.
pub fn zoh_discretize(
    dims: ScanDims,
    a_log: &[f64],
    delta: &[f64],
    b: &[f64],
    method: Discretization,
) -> Result<Discretized, KernelError> {
    check_len("a_log", a_log, dims.a_len())?;
    check_len("delta", delta, dims.token_len())?;
    check_len("b", b, dims.proj_len())?;
    check_positive("delta", delta)?;
    let (nd, ns) = (dims.channels, dims.state);
    let total = dims.token_len() * ns;
    let mut a_bar = Vec::with_capacity(total);
    let mut b_bar = Vec::with_capacity(total);
    for bt in 0..dims.batch * dims.len {
        for d in 0..nd {
            let dt = delta[bt * nd + d];
            for n in 0..ns {
                let a = -a_log[d * ns + n].exp();
                a_bar.push((dt * a).exp());
                b_bar.push(method.input_gain(dt, a) * b[bt * ns + n]);
            }
        }
    }
    Ok(Discretized { a_bar, b_bar })
}

use rayon::prelude::*;

use crate::error::KernelError;

use super::{DeltaMode, ScanConfig, ScanGrads, ScanOutput, ScanParams, StreamPair};

/// Tokens per chunk in the blockwise scan.
pub const DEFAULT_CHUNK: usize = 256;

#[inline]
fn evolution_step(mode: DeltaMode, delta: f64, delta_prime: f64) -> f64 {
    match mode {
        DeltaMode::Mean => 0.5 * (delta + delta_prime),
        DeltaMode::Pre => delta,
        DeltaMode::Post => delta_prime,
    }
}

/// Signed pre-activation `B̄' x' − B̄ x` of the L1 drive.
#[inline]
fn drive(pre_gain: f64, b: f64, x: f64, post_gain: f64, b_prime: f64, x_prime: f64) -> f64 {
    post_gain * b_prime * x_prime - pre_gain * b * x
}

/// Signed drive `v = B̄'x' − B̄x` for every `(B, L, D, N)` element; the scan
/// consumes `|v|`.
pub fn change_drive(
    pair: &StreamPair,
    params: &ScanParams,
    config: &ScanConfig,
) -> Result<Vec<f64>, KernelError> {
    params.validate(pair)?;
    let dims = params.dims;
    let (nd, ns) = (dims.channels, dims.state);
    let disc = config.discretization;
    let mut out = Vec::with_capacity(dims.token_len() * ns);
    for bt in 0..dims.batch * dims.len {
        for d in 0..nd {
            let i = bt * nd + d;
            for n in 0..ns {
                let a = -params.a_log[d * ns + n].exp();
                let j = bt * ns + n;
                out.push(drive(
                    disc.input_gain(params.delta[i], a),
                    params.b[j],
                    pair.x[i],
                    disc.input_gain(params.delta_prime[i], a),
                    params.b_prime[j],
                    pair.x_prime[i],
                ));
            }
        }
    }
    Ok(out)
}

/// Composition of two affine maps `h ↦ a h + u`, applying `first` then `second`.
///
/// `(a₁, u₁) ∘ (a₂, u₂) = (a₁ a₂, a₂ u₁ + u₂)`; associative, so any bracketing
/// of a run of steps gives the same map.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Straight sequential evaluation of the change recurrence with `h₀ = 0`.
pub fn change_scan_ref(
    pair: &StreamPair,
    params: &ScanParams,
    config: &ScanConfig,
) -> Result<ScanOutput, KernelError> {
    params.validate(pair)?;
    let dims = params.dims;
    let (nl, nd, ns) = (dims.len, dims.channels, dims.state);
    let mut y = vec![0.0; dims.token_len()];
    let mut y_prime = vec![0.0; dims.token_len()];
    let mut h_last = vec![0.0; dims.hidden_len()];
    let disc = config.discretization;

    for b in 0..dims.batch {
        let h = &mut h_last[b * nd * ns..(b + 1) * nd * ns];
        for t in 0..nl {
            let bt = b * nl + t;
            for d in 0..nd {
                let i = bt * nd + d;
                let (dt, dtp) = (params.delta[i], params.delta_prime[i]);
                let step = evolution_step(config.delta_mode, dt, dtp);
                let mut acc = 0.0;
                let mut acc_prime = 0.0;
                for n in 0..ns {
                    let a = -params.a_log[d * ns + n].exp();
                    let j = bt * ns + n;
                    let v = drive(
                        disc.input_gain(dt, a),
                        params.b[j],
                        pair.x[i],
                        disc.input_gain(dtp, a),
                        params.b_prime[j],
                        pair.x_prime[i],
                    );
                    let k = d * ns + n;
                    h[k] = (step * a).exp() * h[k] + v.abs();
                    acc += params.c[j] * h[k];
                    acc_prime += params.c_prime[j] * h[k];
                }
                y[i] = acc;
                y_prime[i] = acc_prime;
            }
        }
    }
    Ok(ScanOutput {
        y,
        y_prime,
        h_last,
    })
}

/// Decay and drive for every step of one `(batch, channel)` lane, `(L, N)` each.
fn lane_terms(
    params: &ScanParams,
    pair: &StreamPair,
    config: &ScanConfig,
    a: &[f64],
    b: usize,
    d: usize,
    decay: &mut [f64],
    drive_abs: &mut [f64],
) {
    let dims = params.dims;
    let (nl, nd, ns) = (dims.len, dims.channels, dims.state);
    let disc = config.discretization;
    let a = &a[d * ns..(d + 1) * ns];
    for t in 0..nl {
        let bt = b * nl + t;
        let i = bt * nd + d;
        let (dt, dtp) = (params.delta[i], params.delta_prime[i]);
        let step = evolution_step(config.delta_mode, dt, dtp);
        let (x, xp) = (pair.x[i], pair.x_prime[i]);
        let bs = &params.b[bt * ns..(bt + 1) * ns];
        let bps = &params.b_prime[bt * ns..(bt + 1) * ns];
        let row = t * ns..(t + 1) * ns;
        for (((out_a, out_u), &an), (&bn, &bpn)) in decay[row.clone()]
            .iter_mut()
            .zip(&mut drive_abs[row])
            .zip(a)
            .zip(bs.iter().zip(bps))
        {
            *out_a = (step * an).exp();
            *out_u = drive(disc.input_gain(dt, an), bn, x, disc.input_gain(dtp, an), bpn, xp).abs();
        }
    }
}

/// Blockwise first-order scan over rows of width `width`: `h_t = a_t ⊙ h_{t-1} + u_t`.
///
/// Each chunk is scanned from a zero state while tracking the cumulative decay;
/// a sequential pass then threads the carry between chunks and a final pass
/// adds `decay_prefix ⊙ carry` back in.
fn chunked_linear_scan(decay: &[f64], drive: &[f64], width: usize, chunk: usize) -> Vec<f64> {
    let rows = decay.len() / width;
    let span = chunk * width;
    let mut h = drive.to_vec();
    let mut prefix = decay.to_vec();

    h.par_chunks_mut(span)
        .zip(prefix.par_chunks_mut(span))
        .for_each(|(hc, pc)| {
            let r = hc.len() / width;
            for t in 1..r {
                let (prev, cur) = hc.split_at_mut(t * width);
                let (pprev, pcur) = pc.split_at_mut(t * width);
                let prev = &prev[(t - 1) * width..];
                let pprev = &pprev[(t - 1) * width..];
                for k in 0..width {
                    // cur[k] currently holds u_t and pcur[k] holds a_t.
                    cur[k] += pcur[k] * prev[k];
                    pcur[k] *= pprev[k];
                }
            }
        });

    let n_chunks = rows.div_ceil(chunk);
    let mut carries = vec![0.0; n_chunks * width];
    for c in 1..n_chunks {
        let last = (c * chunk - 1) * width;
        for k in 0..width {
            carries[c * width + k] = prefix[last + k] * carries[(c - 1) * width + k] + h[last + k];
        }
    }

    h.par_chunks_mut(span)
        .zip(prefix.par_chunks(span))
        .enumerate()
        .skip(1)
        .for_each(|(c, (hc, pc))| {
            let carry = &carries[c * width..(c + 1) * width];
            for (hrow, prow) in hc.chunks_mut(width).zip(pc.chunks(width)) {
                for k in 0..width {
                    hrow[k] += prow[k] * carry[k];
                }
            }
        });
    h
}

/// Same recurrence as [`change_scan_ref`], evaluated lane-parallel with a
/// chunked linear scan.
pub fn change_scan_fast(
    pair: &StreamPair,
    params: &ScanParams,
    config: &ScanConfig,
) -> Result<ScanOutput, KernelError> {
    change_scan_fast_with_chunk(pair, params, config, DEFAULT_CHUNK)
}

pub fn change_scan_fast_with_chunk(
    pair: &StreamPair,
    params: &ScanParams,
    config: &ScanConfig,
    chunk: usize,
) -> Result<ScanOutput, KernelError> {
    params.validate(pair)?;
    let dims = params.dims;
    let (nl, nd, ns) = (dims.len, dims.channels, dims.state);
    let chunk = chunk.max(1);
    let a: Vec<f64> = params.a_log.iter().map(|v| -v.exp()).collect();

    let lanes: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..dims.batch * nd)
        .into_par_iter()
        .map(|lane| {
            let (b, d) = (lane / nd, lane % nd);
            let mut decay = vec![0.0; nl * ns];
            let mut drive_abs = vec![0.0; nl * ns];
            lane_terms(params, pair, config, &a, b, d, &mut decay, &mut drive_abs);
            let h = chunked_linear_scan(&decay, &drive_abs, ns, chunk);
            let mut y = vec![0.0; nl];
            let mut yp = vec![0.0; nl];
            for t in 0..nl {
                let bt = b * nl + t;
                let cs = &params.c[bt * ns..(bt + 1) * ns];
                let cps = &params.c_prime[bt * ns..(bt + 1) * ns];
                let hs = &h[t * ns..(t + 1) * ns];
                let mut acc = 0.0;
                let mut acc_prime = 0.0;
                for n in 0..ns {
                    acc += cs[n] * hs[n];
                    acc_prime += cps[n] * hs[n];
                }
                y[t] = acc;
                yp[t] = acc_prime;
            }
            (y, yp, h[(nl - 1) * ns..].to_vec())
        })
        .collect();

    let mut y = vec![0.0; dims.token_len()];
    let mut y_prime = vec![0.0; dims.token_len()];
    let mut h_last = vec![0.0; dims.hidden_len()];
    for (lane, (ly, lyp, lh)) in lanes.into_iter().enumerate() {
        let (b, d) = (lane / nd, lane % nd);
        for t in 0..nl {
            let i = (b * nl + t) * nd + d;
            y[i] = ly[t];
            y_prime[i] = lyp[t];
        }
        h_last[(b * nd + d) * ns..(b * nd + d + 1) * ns].copy_from_slice(&lh);
    }
    Ok(ScanOutput {
        y,
        y_prime,
        h_last,
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of `Σ grad_y·y + grad_y'·y'` with respect to every input.
///
/// The forward states are recomputed per lane; the hidden-state adjoint runs
/// backwards in time as `g_t = c_t gy_t + c'_t gy'_t + Ā_{t+1} ⊙ g_{t+1}`.
/// The subgradient of `|v|` at zero is taken as zero.
pub fn change_scan_backward(
    pair: &StreamPair,
    params: &ScanParams,
    config: &ScanConfig,
    grad_y: &[f64],
    grad_y_prime: &[f64],
) -> Result<ScanGrads, KernelError> {
    params.validate(pair)?;
    let dims = params.dims;
    super::check_len("grad_y", grad_y, dims.token_len())?;
    super::check_len("grad_y_prime", grad_y_prime, dims.token_len())?;
    let (nl, nd, ns) = (dims.len, dims.channels, dims.state);
    let disc = config.discretization;
    let mode = config.delta_mode;
    let a: Vec<f64> = params.a_log.iter().map(|v| -v.exp()).collect();

    let per_batch: Vec<ScanGrads> = (0..dims.batch)
        .into_par_iter()
        .map(|b| {
            let local = super::ScanDims { batch: 1, ..dims };
            let mut g = ScanGrads::zeros(local);
            let mut h = vec![0.0; nl * ns];
            let mut decay = vec![0.0; nl * ns];
            let mut v = vec![0.0; nl * ns];
            let mut adj = vec![0.0; ns];
            for d in 0..nd {
                // forward recompute for lane (b, d)
                let ad = &a[d * ns..(d + 1) * ns];
                for t in 0..nl {
                    let bt = b * nl + t;
                    let i = bt * nd + d;
                    let (dt, dtp) = (params.delta[i], params.delta_prime[i]);
                    let step = evolution_step(mode, dt, dtp);
                    for n in 0..ns {
                        let j = bt * ns + n;
                        let r = t * ns + n;
                        decay[r] = (step * ad[n]).exp();
                        v[r] = drive(
                            disc.input_gain(dt, ad[n]),
                            params.b[j],
                            pair.x[i],
                            disc.input_gain(dtp, ad[n]),
                            params.b_prime[j],
                            pair.x_prime[i],
                        );
                        let prev = if t == 0 { 0.0 } else { h[r - ns] };
                        h[r] = decay[r] * prev + v[r].abs();
                    }
                }

                adj.iter_mut().for_each(|g| *g = 0.0);
                for t in (0..nl).rev() {
                    let bt = b * nl + t;
                    let i = bt * nd + d;
                    let li = t * nd + d;
                    let (dt, dtp) = (params.delta[i], params.delta_prime[i]);
                    let step = evolution_step(mode, dt, dtp);
                    let (x, xp) = (pair.x[i], pair.x_prime[i]);
                    let (gy, gyp) = (grad_y[i], grad_y_prime[i]);
                    let mut g_dt = 0.0;
                    let mut g_dtp = 0.0;
                    let mut g_x = 0.0;
                    let mut g_xp = 0.0;
                    for n in 0..ns {
                        let j = bt * ns + n;
                        let lj = t * ns + n;
                        let r = t * ns + n;
                        let an = ad[n];
                        // adj holds Ā_{t+1} ⊙ g_{t+1} on entry.
                        let gh = adj[n] + params.c[j] * gy + params.c_prime[j] * gyp;
                        g.c[lj] += gy * h[r];
                        g.c_prime[lj] += gyp * h[r];

                        let prev = if t == 0 { 0.0 } else { h[r - ns] };
                        let g_decay = gh * prev;
                        adj[n] = decay[r] * gh;

                        // Ā = exp(step · A)
                        let g_step = g_decay * an * decay[r];
                        let mut g_a = g_decay * step * decay[r];
                        match mode {
                            DeltaMode::Mean => {
                                g_dt += 0.5 * g_step;
                                g_dtp += 0.5 * g_step;
                            }
                            DeltaMode::Pre => g_dt += g_step,
                            DeltaMode::Post => g_dtp += g_step,
                        }

                        // v = k(δ', A) b' x' − k(δ, A) b x
                        let gv = sign(v[r]) * gh;
                        let (bn, bpn) = (params.b[j], params.b_prime[j]);
                        let (k, kp) = (disc.input_gain(dt, an), disc.input_gain(dtp, an));
                        let (dk_dt, dk_da) = disc.input_gain_grad(dt, an);
                        let (dkp_dt, dkp_da) = disc.input_gain_grad(dtp, an);
                        g_xp += gv * kp * bpn;
                        g_x -= gv * k * bn;
                        g.b_prime[lj] += gv * kp * xp;
                        g.b[lj] -= gv * k * x;
                        g_dtp += gv * dkp_dt * bpn * xp;
                        g_dt -= gv * dk_dt * bn * x;
                        g_a += gv * (dkp_da * bpn * xp - dk_da * bn * x);

                        // A = −exp(a_log)
                        g.a_log[d * ns + n] += g_a * an;
                    }
                    g.x[li] = g_x;
                    g.x_prime[li] = g_xp;
                    g.delta[li] = g_dt;
                    g.delta_prime[li] = g_dtp;
                }
            }
            g
        })
        .collect();

    let mut out = ScanGrads::zeros(dims);
    let (tok, proj) = (nl * nd, nl * ns);
    for (b, g) in per_batch.iter().enumerate() {
        out.x[b * tok..(b + 1) * tok].copy_from_slice(&g.x);
        out.x_prime[b * tok..(b + 1) * tok].copy_from_slice(&g.x_prime);
        out.delta[b * tok..(b + 1) * tok].copy_from_slice(&g.delta);
        out.delta_prime[b * tok..(b + 1) * tok].copy_from_slice(&g.delta_prime);
        out.b[b * proj..(b + 1) * proj].copy_from_slice(&g.b);
        out.b_prime[b * proj..(b + 1) * proj].copy_from_slice(&g.b_prime);
        out.c[b * proj..(b + 1) * proj].copy_from_slice(&g.c);
        out.c_prime[b * proj..(b + 1) * proj].copy_from_slice(&g.c_prime);
        for (o, v) in out.a_log.iter_mut().zip(&g.a_log) {
            *o += v;
        }
    }
    Ok(out)
}

//! The toy model's forward pass against a loop-only re-implementation that
//! reads the public weight tensors directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcssm::kernel::StreamWeights;
use tcssm::model::{Fusion, ModelConfig, Query, SceneInput, TextModeSetting, ToyModel};
use tcssm::nn::{BatchNorm, Cnn, Linear};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.outputs)
        .map(|o| l.b[o] + (0..l.inputs).map(|i| x[i] * l.w[i * l.outputs + o]).sum::<f64>())
        .collect()
}

/// `maps[n][c][y][x]`
type Maps = Vec<Vec<Vec<Vec<f64>>>>;

fn conv(w: &[f64], cin: usize, cout: usize, x: &Maps) -> Maps {
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    x.iter()
        .map(|img| {
            (0..cout)
                .map(|co| {
                    (0..h)
                        .map(|y| {
                            (0..wd)
                                .map(|xx| {
                                    let mut acc = 0.0;
                                    for (ci, plane) in img.iter().enumerate().take(cin) {
                                        for ky in 0..3 {
                                            for kx in 0..3 {
                                                let (sy, sx) = (y as i64 + ky - 1, xx as i64 + kx - 1);
                                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                                    acc += w[(co * cin + ci) * 9 + (ky * 3 + kx) as usize]
                                                        * plane[sy as usize][sx as usize];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Training-mode batch norm followed by ReLU.
fn bn_relu(bn: &BatchNorm, x: &Maps) -> Maps {
    let mut out = x.clone();
    for c in 0..bn.gamma.len() {
        let vals: Vec<f64> = x.iter().flat_map(|img| img[c].iter().flatten().copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for img in out.iter_mut() {
            for row in img[c].iter_mut() {
                for v in row.iter_mut() {
                    *v = (bn.gamma[c] * (*v - mean) / (var + 1e-5).sqrt() + bn.beta[c]).max(0.0);
                }
            }
        }
    }
    out
}

fn maxpool(x: &Maps) -> Maps {
    x.iter()
        .map(|img| {
            img.iter()
                .map(|p| {
                    (0..p.len() / 2)
                        .map(|y| {
                            (0..p[0].len() / 2)
                                .map(|xx| {
                                    p[2 * y][2 * xx]
                                        .max(p[2 * y][2 * xx + 1])
                                        .max(p[2 * y + 1][2 * xx])
                                        .max(p[2 * y + 1][2 * xx + 1])
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn encoder(cnn: &Cnn, mut x: Maps) -> Maps {
    for b in &cnn.blocks {
        x = bn_relu(&b.bn1, &conv(&b.conv1.w, b.conv1.cin, b.conv1.cout, &x));
        x = bn_relu(&b.bn2, &conv(&b.conv2.w, b.conv2.cin, b.conv2.cout, &x));
        x = maxpool(&x);
    }
    x
}

/// `tokens[t][c]` in row-major spatial order.
fn tokens(img: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let (h, w) = (img[0].len(), img[0][0].len());
    (0..h * w).map(|t| img.iter().map(|p| p[t / w][t % w]).collect()).collect()
}

fn rms(row: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    row.iter().map(|v| v / (ms + 1e-6).sqrt()).collect()
}

struct Stream {
    x: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

fn stream(w: &StreamWeights, f: &[Vec<f64>], g: &[Vec<f64>]) -> Stream {
    let (d, n) = (w.channels, w.state);
    let proj = |m: &[f64], cols: usize, row: &[f64]| -> Vec<f64> {
        (0..cols).map(|o| (0..d).map(|i| row[i] * m[i * cols + o]).sum()).collect()
    };
    let z: Vec<Vec<f64>> = f.iter().map(|r| proj(&w.w_x, d, r)).collect();
    let l = f.len();
    let x = (0..l)
        .map(|t| {
            (0..d)
                .map(|ch| {
                    let mut s = w.conv_b[ch];
                    for k in 0..3 {
                        let src = t as i64 + k as i64 - 1;
                        if src >= 0 && (src as usize) < l {
                            s += w.conv_w[ch * 3 + k] * z[src as usize][ch];
                        }
                    }
                    s * sigmoid(s)
                })
                .collect()
        })
        .collect();
    Stream {
        x,
        b: g.iter().map(|r| proj(&w.w_b, n, r)).collect(),
        c: g.iter().map(|r| proj(&w.w_c, n, r)).collect(),
        delta: g
            .iter()
            .map(|r| proj(&w.w_delta, d, r).iter().zip(&w.delta_bias).map(|(v, b)| softplus(v + b)).collect())
            .collect(),
    }
}

fn embed(table: &[f64], dim: usize, ids: &[usize]) -> Vec<f64> {
    (0..dim).map(|c| ids.iter().map(|&i| table[i * dim + c]).sum()).collect()
}

fn oracle_logits(model: &ToyModel, scenes: &[SceneInput], queries: &[Query]) -> Vec<f64> {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, ns) = (cfg.channels, cfg.state);
    let (h, wd) = (scenes[0].height, scenes[0].width);
    let plane = |v: &[f64], c: usize| -> Vec<Vec<f64>> {
        (0..h).map(|y| v[c * h * wd + y * wd..c * h * wd + (y + 1) * wd].to_vec()).collect()
    };
    let pre_maps: Maps = scenes.iter().map(|s| (0..3).map(|c| plane(&s.pre, c)).collect()).collect();
    let post_maps: Maps = scenes.iter().map(|s| (0..3).map(|_| plane(&s.post, 0)).collect()).collect();
    let ep = encoder(&w.cnn_pre, pre_maps);
    let eq = encoder(&w.cnn_post, post_maps);

    let mut pooled = Vec::new();
    for si in 0..scenes.len() {
        let mut fp: Vec<Vec<f64>> = tokens(&ep[si]).iter().map(|t| linear(&w.proj_pre, t)).collect();
        let mut fq: Vec<Vec<f64>> = tokens(&eq[si]).iter().map(|t| linear(&w.proj_post, t)).collect();
        let text = embed(&w.description.table, d, &scenes[si].description);
        let l = fp.len();
        let mut last = (vec![], vec![]);
        for blk in &w.blocks {
            let np: Vec<Vec<f64>> = fp.iter().map(|r| rms(r)).collect();
            let nq: Vec<Vec<f64>> = fq.iter().map(|r| rms(r)).collect();
            let fused = |t: usize, c: usize| match cfg.text_mode {
                TextModeSetting::Use => np[t][c] * nq[t][c] * text[c],
                TextModeSetting::Ablate => 0.0,
            };
            let gp: Vec<Vec<f64>> = (0..l).map(|t| (0..d).map(|c| np[t][c] + fused(t, c)).collect()).collect();
            let gq: Vec<Vec<f64>> = (0..l).map(|t| (0..d).map(|c| nq[t][c] + fused(t, c)).collect()).collect();
            let a = stream(&blk.pre, &np, &gp);
            let b = stream(&blk.post, &nq, &gq);
            let mut y = vec![vec![0.0; d]; l];
            let mut y2 = vec![vec![0.0; d]; l];
            for c in 0..d {
                for n in 0..ns {
                    let decay = -blk.a_log[c * ns + n].exp();
                    let mut hs = 0.0;
                    for t in 0..l {
                        let step = 0.5 * (a.delta[t][c] + b.delta[t][c]);
                        let v = b.delta[t][c] * b.b[t][n] * b.x[t][c] - a.delta[t][c] * a.b[t][n] * a.x[t][c];
                        hs = (step * decay).exp() * hs + v.abs();
                        y[t][c] += a.c[t][n] * hs;
                        y2[t][c] += b.c[t][n] * hs;
                    }
                }
            }
            for t in 0..l {
                for c in 0..d {
                    fp[t][c] += y[t][c];
                    fq[t][c] += y2[t][c];
                }
            }
            last = (y, y2);
        }
        pooled.push((0..d).map(|c| (0..l).map(|t| last.0[t][c] + last.1[t][c]).sum::<f64>() / l as f64).collect::<Vec<f64>>());
    }

    let s = pooled.len() as f64;
    let bn = &w.pooled_bn;
    let normed: Vec<Vec<f64>> = {
        let mut out = pooled.clone();
        for c in 0..d {
            let mean = pooled.iter().map(|p| p[c]).sum::<f64>() / s;
            let var = pooled.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / s;
            for (o, p) in out.iter_mut().zip(&pooled) {
                o[c] = bn.gamma[c] * (p[c] - mean) / (var + 1e-5).sqrt() + bn.beta[c];
            }
        }
        out
    };
    let vis: Vec<Vec<f64>> = normed.iter().map(|p| linear(&w.visual_fc, p).iter().map(|v| v.max(0.0)).collect()).collect();

    let mut logits = Vec::new();
    for q in queries {
        let qe = embed(&w.question.table, d, &q.question);
        let qv: Vec<f64> = linear(&w.question_fc, &qe).iter().map(|v| v.max(0.0)).collect();
        let v = &vis[q.scene];
        let fused: Vec<f64> = match cfg.fusion {
            Fusion::Mul => v.iter().zip(&qv).map(|(a, b)| a * b).collect(),
            Fusion::Concat => v.iter().chain(&qv).copied().collect(),
            other => panic!("oracle does not cover {other}"),
        };
        let hidden: Vec<f64> = linear(&w.head_hidden, &fused).iter().map(|v| v.max(0.0)).collect();
        logits.extend(linear(&w.head_out, &hidden));
    }
    logits
}

fn randomize(v: &mut [f64], rng: &mut ChaCha8Rng, scale: f64) {
    v.iter_mut().for_each(|x| *x = scale * rng.random_range(-1.0..1.0));
}

fn setup(fusion: Fusion, text: TextModeSetting, seed: u64) -> (ToyModel, Vec<SceneInput>, Vec<Query>) {
    let mut cfg = ModelConfig::new(7);
    cfg.channels = 5;
    cfg.state = 3;
    cfg.head_hidden = 6;
    cfg.embed_buckets = 32;
    cfg.cnn_channels = vec![3, 4, 6];
    cfg.fusion = fusion;
    cfg.text_mode = text;
    let mut model = ToyModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let w = &mut model.weights;
    randomize(&mut w.head_out.w, &mut rng, 0.5);
    randomize(&mut w.head_out.b, &mut rng, 0.1);
    randomize(&mut w.head_hidden.b, &mut rng, 0.1);
    randomize(&mut w.question_fc.b, &mut rng, 0.1);
    randomize(&mut w.pooled_bn.beta, &mut rng, 0.2);
    for b in &mut w.blocks {
        randomize(&mut b.pre.conv_b, &mut rng, 0.1);
        randomize(&mut b.post.conv_b, &mut rng, 0.1);
    }
    for blk in w.cnn_pre.blocks.iter_mut().chain(w.cnn_post.blocks.iter_mut()) {
        randomize(&mut blk.bn1.beta, &mut rng, 0.2);
        randomize(&mut blk.bn2.gamma, &mut rng, 1.0);
    }

    let (h, wd) = (8, 12);
    let scenes: Vec<SceneInput> = (0..3)
        .map(|k| SceneInput {
            height: h,
            width: wd,
            pre: (0..3 * h * wd).map(|_| rng.random_range(0.0..1.0)).collect(),
            post: (0..h * wd).map(|_| rng.random_range(0.0..1.0)).collect(),
            description: vec![k, 7, 7 + k],
        })
        .collect();
    let queries = (0..5)
        .map(|i| Query {
            scene: i % 3,
            question: vec![i, 20, 31 - i],
        })
        .collect();
    (model, scenes, queries)
}

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 1e-3, "degenerate logits");
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-9 * scale, "{g} vs {w}");
    }
}

#[test]
fn forward_matches_loop_oracle() {
    let (mut model, scenes, queries) = setup(Fusion::Mul, TextModeSetting::Use, 3);
    let want = oracle_logits(&model, &scenes, &queries);
    let (got, _) = model.forward(&scenes, &queries, true).unwrap();
    assert_close(&got, &want);
}

#[test]
fn ablated_concat_forward_matches_loop_oracle() {
    let (mut model, scenes, queries) = setup(Fusion::Concat, TextModeSetting::Ablate, 4);
    let want = oracle_logits(&model, &scenes, &queries);
    let (got, _) = model.forward(&scenes, &queries, true).unwrap();
    assert_close(&got, &want);
}

#[test]
fn description_changes_output_only_when_used() {
    for (mode, should_change) in [(TextModeSetting::Use, true), (TextModeSetting::Ablate, false)] {
        let (mut model, mut scenes, queries) = setup(Fusion::Mul, mode, 5);
        let (a, _) = model.forward(&scenes, &queries, true).unwrap();
        scenes[0].description = vec![1, 2, 3, 4];
        let (b, _) = model.forward(&scenes, &queries, true).unwrap();
        assert_eq!(a != b, should_change);
    }
}

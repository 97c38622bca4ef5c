//! Scalar-loop single-stream diffusion-transformer reference.
//!
//! A from-scratch reimplementation of the pixel-only forward pass and its
//! Euler sampler in plain nested loops over `f64` slices — no tensor
//! machinery, no autodiff, no shared numerical kernels. It consumes the
//! same named weight arrays as the production model so the two paths can
//! be compared on identical parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

pub struct RefConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_hw: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl RefConfig {
    fn tokens(&self) -> usize {
        let g = self.image_hw / self.patch;
        g * g
    }
    fn patch_features(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

pub type Weights = HashMap<String, Vec<f64>>;

fn w<'a>(weights: &'a Weights, name: &str) -> &'a [f64] {
    weights
        .get(name)
        .unwrap_or_else(|| panic!("reference: missing weight {name}"))
}

// ─── scalar kernels ────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn gelu(x: f64) -> f64 {
    let c = 0.797_884_560_802_865_4;
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// y[r, j] = sum_k x[r, k] m[k, j] + b[j], for flat row-major slices.
fn linear(x: &[f64], rows: usize, k: usize, m: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += x[r * k + kk] * m[kk * n + j];
            }
            y[r * n + j] = acc + b[j];
        }
    }
    y
}

fn layer_norm_rows(x: &[f64], rows: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            y[r * d + i] = (row[i] - mean) * inv;
        }
    }
    y
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn time_features(t: f64) -> Vec<f64> {
    let half = 32;
    let mut out = Vec::with_capacity(2 * half);
    for i in 0..half {
        let omega = 1000f64.powf(i as f64 / (half - 1) as f64);
        out.push((omega * t).sin());
    }
    for i in 0..half {
        let omega = 1000f64.powf(i as f64 / (half - 1) as f64);
        out.push((omega * t).cos());
    }
    out
}

// ─── forward pass ──────────────────────────────────────────────────────────

/// Pixel-only forward: noisy images [B,C,H,W] flat, one time per sample,
/// one label per sample (`num_classes` = unconditional). Returns the clean
/// prediction, same layout.
pub fn forward(
    cfg: &RefConfig,
    weights: &Weights,
    z: &[f64],
    ts: &[f64],
    labels: &[usize],
) -> Vec<f64> {
    let (d, p, hw, c) = (cfg.width, cfg.patch, cfg.image_hw, cfg.channels);
    let g = hw / p;
    let tok = cfg.tokens();
    let pf = cfg.patch_features();
    let b = labels.len();
    assert_eq!(z.len(), b * c * hw * hw);
    assert_eq!(ts.len(), b);

    let mut out = vec![0.0; z.len()];
    for bi in 0..b {
        // patchify: token (gy, gx), feature (ch, py, px)
        let img = &z[bi * c * hw * hw..(bi + 1) * c * hw * hw];
        let mut patches = vec![0.0; tok * pf];
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let f = (ch * p + py) * p + px;
                            patches[(gy * g + gx) * pf + f] =
                                img[(ch * hw + gy * p + py) * hw + gx * p + px];
                        }
                    }
                }
            }
        }
        let mut h = linear(&patches, tok, pf, w(weights, "patch.w"), w(weights, "patch.b"), d);
        let pos = w(weights, "pos");
        for n in 0..tok {
            for i in 0..d {
                h[n * d + i] += pos[n * d + i];
            }
        }

        // conditioning vector: time MLP plus class row
        let tf = time_features(ts[bi]);
        let mut c1 = linear(&tf, 1, 64, w(weights, "time.pix.w1"), w(weights, "time.pix.b1"), d);
        for v in c1.iter_mut() {
            *v = silu(*v);
        }
        let mut cond = linear(&c1, 1, d, w(weights, "time.pix.w2"), w(weights, "time.pix.b2"), d);
        let table = w(weights, "class_table");
        for i in 0..d {
            cond[i] += table[labels[bi] * d + i];
        }

        for blk in 0..cfg.depth {
            let proj = linear(
                &cond,
                1,
                d,
                w(weights, &format!("blk{blk}.ada.pix.w")),
                w(weights, &format!("blk{blk}.ada.pix.b")),
                6 * d,
            );
            let m = |j: usize| &proj[j * d..(j + 1) * d];

            // attention half
            let normed = layer_norm_rows(&h, tok, d, 1e-6);
            let mut modded = vec![0.0; tok * d];
            for n in 0..tok {
                for i in 0..d {
                    modded[n * d + i] = normed[n * d + i] * (1.0 + m(1)[i]) + m(0)[i];
                }
            }
            let attn = attention(cfg, weights, blk, &modded, tok);
            for n in 0..tok {
                for i in 0..d {
                    h[n * d + i] += attn[n * d + i] * m(2)[i];
                }
            }

            // mlp half
            let normed = layer_norm_rows(&h, tok, d, 1e-6);
            let mut modded = vec![0.0; tok * d];
            for n in 0..tok {
                for i in 0..d {
                    modded[n * d + i] = normed[n * d + i] * (1.0 + m(4)[i]) + m(3)[i];
                }
            }
            let mut mid = linear(
                &modded,
                tok,
                d,
                w(weights, &format!("blk{blk}.mlp.w1")),
                w(weights, &format!("blk{blk}.mlp.b1")),
                4 * d,
            );
            for v in mid.iter_mut() {
                *v = gelu(*v);
            }
            let mlp = linear(
                &mid,
                tok,
                4 * d,
                w(weights, &format!("blk{blk}.mlp.w2")),
                w(weights, &format!("blk{blk}.mlp.b2")),
                d,
            );
            for n in 0..tok {
                for i in 0..d {
                    h[n * d + i] += mlp[n * d + i] * m(5)[i];
                }
            }
        }

        // final modulation + head
        let normed = layer_norm_rows(&h, tok, d, 1e-6);
        let proj = linear(
            &cond,
            1,
            d,
            w(weights, "final.pix.mod.w"),
            w(weights, "final.pix.mod.b"),
            2 * d,
        );
        let mut modded = vec![0.0; tok * d];
        for n in 0..tok {
            for i in 0..d {
                modded[n * d + i] = normed[n * d + i] * (1.0 + proj[d + i]) + proj[i];
            }
        }
        let head = linear(
            &modded,
            tok,
            d,
            w(weights, "final.pix.head.w"),
            w(weights, "final.pix.head.b"),
            pf,
        );
        // unpatchify
        let img_out = &mut out[bi * c * hw * hw..(bi + 1) * c * hw * hw];
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            let f = (ch * p + py) * p + px;
                            img_out[(ch * hw + gy * p + py) * hw + gx * p + px] =
                                head[(gy * g + gx) * pf + f];
                        }
                    }
                }
            }
        }
    }
    out
}

fn attention(cfg: &RefConfig, weights: &Weights, blk: usize, x: &[f64], tok: usize) -> Vec<f64> {
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = d / heads;
    let name = |part: &str| format!("blk{blk}.attn.{part}");
    let mut q = linear(x, tok, d, w(weights, &name("wq")), w(weights, &name("bq")), d);
    let k = linear(x, tok, d, w(weights, &name("wk")), w(weights, &name("bk")), d);
    let v = linear(x, tok, d, w(weights, &name("wv")), w(weights, &name("bv")), d);
    let scale = 1.0 / (dh as f64).sqrt();
    for qv in q.iter_mut() {
        *qv *= scale;
    }
    let mut ctx = vec![0.0; tok * d];
    for hd in 0..heads {
        for nq in 0..tok {
            let mut scores = vec![0.0; tok];
            for nk in 0..tok {
                let mut acc = 0.0;
                for i in 0..dh {
                    acc += q[nq * d + hd * dh + i] * k[nk * d + hd * dh + i];
                }
                scores[nk] = acc; // single stream: mask is all zeros
            }
            softmax_row(&mut scores);
            for i in 0..dh {
                let mut acc = 0.0;
                for nk in 0..tok {
                    acc += scores[nk] * v[nk * d + hd * dh + i];
                }
                ctx[nq * d + hd * dh + i] = acc;
            }
        }
    }
    linear(&ctx, tok, d, w(weights, &name("wo")), w(weights, &name("bo")), d)
}

// ─── Euler sampler ─────────────────────────────────────────────────────────

/// Uniform-grid Euler integration from noise with the clean-prediction
/// parameterization. Mirrors the production conventions: clipped
/// denominator, classifier-free guidance formed on clean predictions, and
/// the final step replaced by the prediction itself. Returns every grid
/// state including the initial noise.
pub fn sample(
    cfg: &RefConfig,
    weights: &Weights,
    labels: &[Option<usize>],
    rng: &mut ChaCha8Rng,
    steps: usize,
    t_clip: f64,
    cfg_scale: f64,
) -> Vec<Vec<f64>> {
    let b = labels.len();
    let numel = b * cfg.channels * cfg.image_hw * cfg.image_hw;
    let mut z: Vec<f64> = (0..numel)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let cond: Vec<usize> = labels
        .iter()
        .map(|l| l.unwrap_or(cfg.num_classes))
        .collect();
    let uncond = vec![cfg.num_classes; b];
    let guided = cfg_scale != 1.0 && labels.iter().any(|l| l.is_some());

    let mut states = vec![z.clone()];
    for i in 0..steps {
        let t0 = i as f64 / steps as f64;
        let t1 = (i + 1) as f64 / steps as f64;
        let ts = vec![t0; b];
        let pred_c = forward(cfg, weights, &z, &ts, &cond);
        let pred = if guided {
            let pred_u = forward(cfg, weights, &z, &ts, &uncond);
            pred_c
                .iter()
                .zip(&pred_u)
                .map(|(pc, pu)| (pc - pu) * cfg_scale + pu)
                .collect()
        } else {
            pred_c
        };
        if i + 1 == steps {
            z = pred;
        } else {
            let denom = (1.0 - t0).max(t_clip);
            let dtau = t1 - t0;
            for (zv, pv) in z.iter_mut().zip(&pred) {
                *zv += dtau * ((pv - *zv) / denom);
            }
        }
        states.push(z.clone());
    }
    states
}

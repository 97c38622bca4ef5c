//! Multi-stream diffusion-transformer backbone.
//!
//! Every active stream contributes one token grid of equal length; the
//! grids are concatenated and processed jointly by shared attention and MLP
//! weights. Per-stream identity lives entirely in the conditioning: each
//! stream has its own timestep MLP and its own zero-initialized adaptive
//! layer-norm projections, so blocks start as identities and specialize per
//! stream as training moves the modulation parameters.
//!
//! Cross-stream attention is block-triangular over the canonical stream
//! order semantic → frequency → pixel: a query may attend to its own stream
//! and any earlier (more abstract) one, never to a later one. Masking is a
//! −1e30 additive constant, which drives softmax weights to exactly zero,
//! so forbidden directions carry neither values nor gradients.
//!
//! With a single pixel stream the whole construction reduces to a plain
//! class-conditional diffusion transformer.

use crate::error::{Error, Result};
use crate::param::{Binder, Param, Visit};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Additive mask value; exp(−1e30) underflows to exactly 0.
pub const MASK_OFF: f64 = -1e30;

/// Sinusoidal timestep feature width fed to the per-stream MLPs.
pub const TIME_FEATURES: usize = 64;

const LN_EPS: f64 = 1e-6;

// ─── streams ───────────────────────────────────────────────────────────────

/// Stream identity in canonical maturity order (most abstract first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Dino,
    Fre,
    Pix,
}

impl StreamKind {
    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::Dino => "dino",
            StreamKind::Fre => "fre",
            StreamKind::Pix => "pix",
        }
    }
}

/// Geometry and capacity of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_hw: usize,
    pub channels: usize,
    /// Real classes; the embedding table gets one extra null row used for
    /// unconditional passes and label dropout.
    pub num_classes: usize,
    /// Active streams, strictly in canonical order, pixel always present.
    pub streams: Vec<StreamKind>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::invalid("backbone: width/depth/heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "backbone: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.image_hw == 0 || self.image_hw % self.patch != 0 {
            return Err(Error::invalid(format!(
                "backbone: image {} not divisible by patch {}",
                self.image_hw, self.patch
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("backbone: channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("backbone: need at least one class"));
        }
        if self.streams.is_empty() {
            return Err(Error::invalid("backbone: no streams"));
        }
        for w in self.streams.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(
                    "backbone: streams must be strictly in semantic, frequency, pixel order",
                ));
            }
        }
        if *self.streams.last().unwrap() != StreamKind::Pix {
            return Err(Error::invalid("backbone: pixel stream is required"));
        }
        Ok(())
    }

    /// Tokens per stream: one per image patch.
    pub fn tokens_per_stream(&self) -> usize {
        let g = self.image_hw / self.patch;
        g * g
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn stream_index(&self, kind: StreamKind) -> Option<usize> {
        self.streams.iter().position(|&s| s == kind)
    }
}

// ─── parameters ────────────────────────────────────────────────────────────

struct TimeMlp {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

struct Block {
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    mw1: Param,
    mb1: Param,
    mw2: Param,
    mb2: Param,
    /// Per-stream [d → 6d] modulation projections, zero-initialized.
    ada: Vec<(Param, Param)>,
}

struct StreamFinal {
    mod_w: Param,
    mod_b: Param,
    head_w: Param,
    head_b: Param,
}

/// The backbone model: all learnable parameters plus cached geometry.
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_w: Param,
    patch_b: Param,
    pos: Param,
    class_table: Param,
    time_mlps: Vec<TimeMlp>,
    blocks: Vec<Block>,
    finals: Vec<StreamFinal>,
    mask: Vec<f64>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Backbone> {
        cfg.validate()?;
        let d = cfg.width;
        let pf = cfg.patch_features();
        let std = 0.02;
        let patch_w = Param::randn("patch.w", &[pf, d], std, rng);
        let patch_b = Param::zeros("patch.b", &[d]);
        let pos = Param::randn("pos", &[cfg.tokens_per_stream(), d], std, rng);
        let class_table = Param::randn("class_table", &[cfg.num_classes + 1, d], std, rng);
        let time_mlps = cfg
            .streams
            .iter()
            .map(|s| TimeMlp {
                w1: Param::randn(format!("time.{}.w1", s.name()), &[TIME_FEATURES, d], std, rng),
                b1: Param::zeros(format!("time.{}.b1", s.name()), &[d]),
                w2: Param::randn(format!("time.{}.w2", s.name()), &[d, d], std, rng),
                b2: Param::zeros(format!("time.{}.b2", s.name()), &[d]),
            })
            .collect();
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                wq: Param::randn(format!("blk{i}.attn.wq"), &[d, d], std, rng),
                bq: Param::zeros(format!("blk{i}.attn.bq"), &[d]),
                wk: Param::randn(format!("blk{i}.attn.wk"), &[d, d], std, rng),
                bk: Param::zeros(format!("blk{i}.attn.bk"), &[d]),
                wv: Param::randn(format!("blk{i}.attn.wv"), &[d, d], std, rng),
                bv: Param::zeros(format!("blk{i}.attn.bv"), &[d]),
                wo: Param::randn(format!("blk{i}.attn.wo"), &[d, d], std, rng),
                bo: Param::zeros(format!("blk{i}.attn.bo"), &[d]),
                mw1: Param::randn(format!("blk{i}.mlp.w1"), &[d, 4 * d], std, rng),
                mb1: Param::zeros(format!("blk{i}.mlp.b1"), &[4 * d]),
                mw2: Param::randn(format!("blk{i}.mlp.w2"), &[4 * d, d], std, rng),
                mb2: Param::zeros(format!("blk{i}.mlp.b2"), &[d]),
                ada: cfg
                    .streams
                    .iter()
                    .map(|s| {
                        (
                            Param::zeros(format!("blk{i}.ada.{}.w", s.name()), &[d, 6 * d]),
                            Param::zeros(format!("blk{i}.ada.{}.b", s.name()), &[6 * d]),
                        )
                    })
                    .collect(),
            })
            .collect();
        let finals = cfg
            .streams
            .iter()
            .map(|s| {
                let head_out = match s {
                    StreamKind::Pix => pf,
                    _ => d,
                };
                StreamFinal {
                    mod_w: Param::zeros(format!("final.{}.mod.w", s.name()), &[d, 2 * d]),
                    mod_b: Param::zeros(format!("final.{}.mod.b", s.name()), &[2 * d]),
                    head_w: Param::zeros(format!("final.{}.head.w", s.name()), &[d, head_out]),
                    head_b: Param::zeros(format!("final.{}.head.b", s.name()), &[head_out]),
                }
            })
            .collect();
        let mask = build_mask(cfg.streams.len(), cfg.tokens_per_stream());
        Ok(Backbone {
            cfg,
            patch_w,
            patch_b,
            pos,
            class_table,
            time_mlps,
            blocks,
            finals,
            mask,
        })
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    pub fn patch_params(&self) -> (&Param, &Param) {
        (&self.patch_w, &self.patch_b)
    }

    // ─── token plumbing ────────────────────────────────────────────────

    /// [B,C,H,W] → [B,T,p²C], token order row-major over the patch grid,
    /// feature order (channel, row-in-patch, column-in-patch).
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.cfg.patch;
        let (b, c, h, _w) = expect_image(x, &self.cfg, "patchify")?;
        let g = h / p;
        let x6 = x.reshape(&[b, c, g, p, g, p])?;
        let perm = x6.permute(&[0, 2, 4, 1, 3, 5])?;
        perm.reshape(&[b, g * g, p * p * c])
    }

    /// Inverse of `patchify`.
    pub fn unpatchify(&self, y: &Tensor) -> Result<Tensor> {
        let p = self.cfg.patch;
        let c = self.cfg.channels;
        let hw = self.cfg.image_hw;
        let g = hw / p;
        let shape = y.shape().to_vec();
        if shape.len() != 3 || shape[1] != g * g || shape[2] != p * p * c {
            return Err(Error::invalid(format!(
                "unpatchify: expected [B,{},{}], got {:?}",
                g * g,
                p * p * c,
                shape
            )));
        }
        let b = shape[0];
        let y6 = y.reshape(&[b, g, g, c, p, p])?;
        let perm = y6.permute(&[0, 3, 1, 4, 2, 5])?;
        perm.reshape(&[b, c, hw, hw])
    }

    /// Patch-embed an image with the backbone's own (live) projection.
    pub fn embed_image(&self, binder: &mut Binder, x: &Tensor) -> Result<Tensor> {
        let w = binder.bind(&self.patch_w);
        let b = binder.bind(&self.patch_b);
        self.patchify(x)?.matmul(&w)?.add(&b)
    }

    /// Patch-embed with externally supplied projection params (e.g. a
    /// frozen snapshot of the live one).
    pub fn embed_image_with(
        &self,
        binder: &mut Binder,
        w: &Param,
        b: &Param,
        x: &Tensor,
    ) -> Result<Tensor> {
        let wt = binder.bind(w);
        let bt = binder.bind(b);
        self.patchify(x)?.matmul(&wt)?.add(&bt)
    }

    // ─── forward ───────────────────────────────────────────────────────

    /// Run the joint forward pass.
    ///
    /// `inputs` must align with the configured streams: the pixel entry is
    /// a noisy image [B,C,H,W]; auxiliary entries are token states [B,T,d].
    /// Each entry carries its own per-sample times. `labels` are class ids,
    /// with `num_classes` meaning unconditional. Returns one clean-data
    /// prediction per stream, in the input representation.
    pub fn forward(
        &self,
        binder: &mut Binder,
        inputs: &[StreamInput],
        labels: &[usize],
    ) -> Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        if inputs.len() != cfg.streams.len() {
            return Err(Error::invalid(format!(
                "forward: {} stream inputs for {} configured streams",
                inputs.len(),
                cfg.streams.len()
            )));
        }
        let t_tokens = cfg.tokens_per_stream();
        let d = cfg.width;
        let batch = labels.len();
        if batch == 0 {
            return Err(Error::invalid("forward: empty batch"));
        }
        for &l in labels {
            if l > cfg.num_classes {
                return Err(Error::invalid(format!(
                    "forward: label {l} outside 0..={}",
                    cfg.num_classes
                )));
            }
        }

        // per-stream token grids
        let mut tokens = Vec::with_capacity(inputs.len());
        for (input, &kind) in inputs.iter().zip(&cfg.streams) {
            if input.kind != kind {
                return Err(Error::invalid(format!(
                    "forward: stream order mismatch, expected {} got {}",
                    kind.name(),
                    input.kind.name()
                )));
            }
            if input.t.len() != batch {
                return Err(Error::invalid(format!(
                    "forward: {} has {} times for batch {batch}",
                    kind.name(),
                    input.t.len()
                )));
            }
            for &tv in &input.t {
                if !(0.0..=1.0).contains(&tv) {
                    return Err(Error::invalid(format!(
                        "forward: {} time {tv} outside [0, 1]",
                        kind.name()
                    )));
                }
            }
            let toks = match kind {
                StreamKind::Pix => self.embed_image(binder, &input.state)?,
                _ => {
                    let s = input.state.shape();
                    if s != [batch, t_tokens, d] {
                        return Err(Error::invalid(format!(
                            "forward: {} state must be [{batch},{t_tokens},{d}], got {s:?}",
                            kind.name()
                        )));
                    }
                    input.state.clone()
                }
            };
            if toks.shape()[0] != batch {
                return Err(Error::invalid(format!(
                    "forward: {} batch {} does not match labels {batch}",
                    kind.name(),
                    toks.shape()[0]
                )));
            }
            tokens.push(toks);
        }

        // shared positional embedding
        let pos = binder.bind(&self.pos);
        for toks in tokens.iter_mut() {
            *toks = toks.add(&pos)?;
        }

        // per-stream conditioning vectors [B,1,d]
        let class_rows = binder.bind(&self.class_table).gather_rows(labels)?;
        let mut conds = Vec::with_capacity(inputs.len());
        for (input, mlp) in inputs.iter().zip(&self.time_mlps) {
            let feats = timestep_features(&input.t);
            let ft = Tensor::constant(feats, &[batch, TIME_FEATURES]);
            let h = ft
                .matmul(&binder.bind(&mlp.w1))?
                .add(&binder.bind(&mlp.b1))?
                .silu()?;
            let emb = h
                .matmul(&binder.bind(&mlp.w2))?
                .add(&binder.bind(&mlp.b2))?;
            conds.push(emb.add(&class_rows)?.reshape(&[batch, 1, d])?);
        }

        let mut h = Tensor::concat(1, &tokens.iter().collect::<Vec<_>>())?;
        let n = cfg.streams.len() * t_tokens;
        let mask = Tensor::constant(self.mask.clone(), &[n, n]);

        for block in &self.blocks {
            // six modulation tensors per stream: shift/scale/gate for
            // attention, then for the MLP
            let mut mods = Vec::with_capacity(conds.len());
            for (cond, (aw, ab)) in conds.iter().zip(&block.ada) {
                let proj = cond
                    .matmul(&binder.bind(aw))?
                    .add(&binder.bind(ab))?;
                let mut six = Vec::with_capacity(6);
                for j in 0..6 {
                    six.push(proj.slice(2, j * d, d)?);
                }
                mods.push(six);
            }

            let normed = h.layer_norm_last(LN_EPS)?;
            let mut modded = Vec::with_capacity(conds.len());
            for (s, m) in mods.iter().enumerate() {
                let part = normed.slice(1, s * t_tokens, t_tokens)?;
                modded.push(modulate(&part, &m[0], &m[1])?);
            }
            let attn_in = Tensor::concat(1, &modded.iter().collect::<Vec<_>>())?;
            let attn_out = self.attention(binder, block, &attn_in, &mask)?;
            let mut gated = Vec::with_capacity(conds.len());
            for (s, m) in mods.iter().enumerate() {
                let part = attn_out.slice(1, s * t_tokens, t_tokens)?;
                gated.push(part.mul(&m[2])?);
            }
            h = h.add(&Tensor::concat(1, &gated.iter().collect::<Vec<_>>())?)?;

            let normed = h.layer_norm_last(LN_EPS)?;
            let mut modded = Vec::with_capacity(conds.len());
            for (s, m) in mods.iter().enumerate() {
                let part = normed.slice(1, s * t_tokens, t_tokens)?;
                modded.push(modulate(&part, &m[3], &m[4])?);
            }
            let mlp_in = Tensor::concat(1, &modded.iter().collect::<Vec<_>>())?;
            let mlp_out = mlp_in
                .matmul(&binder.bind(&block.mw1))?
                .add(&binder.bind(&block.mb1))?
                .gelu()
                .matmul(&binder.bind(&block.mw2))?
                .add(&binder.bind(&block.mb2))?;
            let mut gated = Vec::with_capacity(conds.len());
            for (s, m) in mods.iter().enumerate() {
                let part = mlp_out.slice(1, s * t_tokens, t_tokens)?;
                gated.push(part.mul(&m[5])?);
            }
            h = h.add(&Tensor::concat(1, &gated.iter().collect::<Vec<_>>())?)?;
        }

        // final norm, per-stream modulation, heads
        let normed = h.layer_norm_last(LN_EPS)?;
        let mut outputs = Vec::with_capacity(conds.len());
        for (s, (fin, cond)) in self.finals.iter().zip(&conds).enumerate() {
            let proj = cond
                .matmul(&binder.bind(&fin.mod_w))?
                .add(&binder.bind(&fin.mod_b))?;
            let shift = proj.slice(2, 0, d)?;
            let scale = proj.slice(2, d, d)?;
            let part = normed.slice(1, s * t_tokens, t_tokens)?;
            let modded = modulate(&part, &shift, &scale)?;
            let out = modded
                .matmul(&binder.bind(&fin.head_w))?
                .add(&binder.bind(&fin.head_b))?;
            let out = match cfg.streams[s] {
                StreamKind::Pix => self.unpatchify(&out)?,
                _ => out,
            };
            if !out.is_finite() {
                return Err(Error::NonFinite(format!(
                    "forward: {} output",
                    cfg.streams[s].name()
                )));
            }
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn attention(
        &self,
        binder: &mut Binder,
        block: &Block,
        x: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let d = cfg.width;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let shape = x.shape().to_vec();
        let (b, n) = (shape[0], shape[1]);
        let split = |t: Tensor| -> Result<Tensor> {
            t.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(
            x.matmul(&binder.bind(&block.wq))?
                .add(&binder.bind(&block.bq))?,
        )?
        .affine(1.0 / (dh as f64).sqrt(), 0.0);
        let k = split(
            x.matmul(&binder.bind(&block.wk))?
                .add(&binder.bind(&block.bk))?,
        )?;
        let v = split(
            x.matmul(&binder.bind(&block.wv))?
                .add(&binder.bind(&block.bv))?,
        )?;
        let kt = k.permute(&[0, 1, 3, 2])?;
        let scores = q.matmul(&kt)?.add(mask)?;
        let weights = scores.softmax_last()?;
        let ctx = weights.matmul(&v)?;
        let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        merged
            .matmul(&binder.bind(&block.wo))?
            .add(&binder.bind(&block.bo))
    }
}

/// One stream's input to the forward pass.
pub struct StreamInput {
    pub kind: StreamKind,
    pub state: Tensor,
    pub t: Vec<f64>,
}

impl Visit for Backbone {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.pos);
        f(&mut self.class_table);
        for mlp in &mut self.time_mlps {
            f(&mut mlp.w1);
            f(&mut mlp.b1);
            f(&mut mlp.w2);
            f(&mut mlp.b2);
        }
        for blk in &mut self.blocks {
            f(&mut blk.wq);
            f(&mut blk.bq);
            f(&mut blk.wk);
            f(&mut blk.bk);
            f(&mut blk.wv);
            f(&mut blk.bv);
            f(&mut blk.wo);
            f(&mut blk.bo);
            f(&mut blk.mw1);
            f(&mut blk.mb1);
            f(&mut blk.mw2);
            f(&mut blk.mb2);
            for (w, bias) in &mut blk.ada {
                f(w);
                f(bias);
            }
        }
        for fin in &mut self.finals {
            f(&mut fin.mod_w);
            f(&mut fin.mod_b);
            f(&mut fin.head_w);
            f(&mut fin.head_b);
        }
    }
}

// ─── helpers ───────────────────────────────────────────────────────────────

fn expect_image(
    x: &Tensor,
    cfg: &BackboneConfig,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_hw || s[3] != cfg.image_hw {
        return Err(Error::invalid(format!(
            "{op}: expected [B,{},{},{}], got {s:?}",
            cfg.channels, cfg.image_hw, cfg.image_hw
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// h ⊙ (1 + scale) + shift, with [B,1,d] modulators broadcast over tokens.
fn modulate(h: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    h.mul(&scale.affine(1.0, 1.0))?.add(shift)
}

/// Block mask over S streams of T tokens each: query row q (stream sq) may
/// attend key column k (stream sk) iff sk ≤ sq.
fn build_mask(streams: usize, tokens: usize) -> Vec<f64> {
    let n = streams * tokens;
    let mut m = vec![0.0; n * n];
    for q in 0..n {
        let sq = q / tokens;
        for k in 0..n {
            let sk = k / tokens;
            if sk > sq {
                m[q * n + k] = MASK_OFF;
            }
        }
    }
    m
}

/// Sinusoidal features for scalar times in [0, 1]: pairs
/// (sin ω_i t, cos ω_i t) with ω_i log-spaced from 1 to 1000. Row-major
/// [B, TIME_FEATURES].
pub fn timestep_features(ts: &[f64]) -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(ts.len() * TIME_FEATURES);
    for &t in ts {
        for i in 0..half {
            let omega = 1000f64.powf(i as f64 / (half - 1) as f64);
            out.push((omega * t).sin());
        }
        for i in 0..half {
            let omega = 1000f64.powf(i as f64 / (half - 1) as f64);
            out.push((omega * t).cos());
        }
    }
    out
}

//! Learnable wavelet packet transform.
//!
//! One even-length low-pass filter generates everything: the high-pass by
//! quadrature mirror (sign-alternated reversal), four separable 2-D kernels
//! by outer products, and a depth-L packet tree by recursive stride-2
//! analysis. Every node's coefficients pass through a soft two-sided
//! magnitude gate with its own learnable threshold. Analysis runs with
//! periodic boundary handling, which keeps the operator orthogonal for
//! orthonormal filters so the adjoint synthesis is an exact inverse; odd
//! extents are first evened by one reflected row/column.
//!
//! The filter is kept honest by penalties: low-pass DC gain √2, zero
//! high-pass DC, orthonormality across even shifts, and an L1 energy-
//! compaction term over the terminal packet coefficients.

use crate::error::{Error, Result};
use crate::tensor::{PadMode, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Default gate steepness; fixed rather than learned.
pub const DEFAULT_SHARPNESS: f64 = 10.0;

// ─── filter bank ───────────────────────────────────────────────────────────

/// An analysis filter pair generated from one low-pass prototype.
#[derive(Clone)]
pub struct FilterBank {
    h_lp: Tensor,
}

impl FilterBank {
    /// Wrap a rank-1 even-length (≥ 2) low-pass filter. The tensor may be a
    /// tape leaf, in which case everything built from the bank carries
    /// gradient back to it.
    pub fn new(h_lp: Tensor) -> Result<FilterBank> {
        let shape = h_lp.shape();
        if shape.len() != 1 || shape[0] < 2 || shape[0] % 2 != 0 {
            return Err(Error::invalid(format!(
                "filter bank: need an even-length rank-1 filter of at least 2 taps, got shape {shape:?}"
            )));
        }
        Ok(FilterBank { h_lp })
    }

    pub fn from_values(values: &[f64]) -> Result<FilterBank> {
        FilterBank::new(Tensor::constant(values.to_vec(), &[values.len()]))
    }

    /// The orthonormal Haar pair generator [1/√2, 1/√2].
    pub fn haar() -> FilterBank {
        FilterBank::from_values(&[1.0 / SQRT_2, 1.0 / SQRT_2]).unwrap()
    }

    /// Haar zero-padded to `len` taps — the standard learnable init.
    pub fn haar_padded(len: usize) -> Result<FilterBank> {
        FilterBank::new(Tensor::constant(haar_taps(len), &[len]))
    }

    pub fn len(&self) -> usize {
        self.h_lp.shape()[0]
    }

    pub fn h_lp(&self) -> &Tensor {
        &self.h_lp
    }

    /// Quadrature-mirror high-pass: h_hp[k] = (−1)^k · h_lp[K−1−k].
    pub fn h_hp(&self) -> Result<Tensor> {
        let k = self.len();
        let signs: Vec<f64> = (0..k).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        self.h_lp
            .reverse1d()?
            .mul(&Tensor::constant(signs, &[k]))
    }

    /// Separable 2-D kernels [LL, LH, HL, HH]; first letter filters rows,
    /// second filters columns. Each is K×K.
    pub fn kernels2d(&self) -> Result<[Tensor; 4]> {
        let k = self.len();
        let lp = self.h_lp.reshape(&[k, 1])?;
        let hp_flat = self.h_hp()?;
        let hp = hp_flat.reshape(&[k, 1])?;
        let lp_row = self.h_lp.reshape(&[1, k])?;
        let hp_row = hp_flat.reshape(&[1, k])?;
        Ok([
            lp.matmul(&lp_row)?,
            lp.matmul(&hp_row)?,
            hp.matmul(&lp_row)?,
            hp.matmul(&hp_row)?,
        ])
    }

    /// A 2-D kernel replicated across `channels` as a [C,K,K] tensor;
    /// gradient accumulates back into the single shared kernel.
    pub fn replicate(kernel: &Tensor, channels: usize) -> Result<Tensor> {
        let k = kernel.shape()[0];
        let one = kernel.reshape(&[1, k, k])?;
        let refs: Vec<&Tensor> = (0..channels).map(|_| &one).collect();
        Tensor::concat(0, &refs)
    }
}

fn input_channels(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().len() {
        3 => Ok(x.shape()[0]),
        4 => Ok(x.shape()[1]),
        _ => Err(Error::invalid(format!(
            "{op}: expected [C,H,W] or [B,C,H,W], got shape {:?}",
            x.shape()
        ))),
    }
}

fn spatial_hw(x: &Tensor) -> (usize, usize) {
    let s = x.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// One analysis step: the four quarter-resolution subbands [LL, LH, HL, HH].
pub fn dwt_step(x: &Tensor, bank: &FilterBank, mode: PadMode) -> Result<[Tensor; 4]> {
    let c = input_channels(x, "dwt_step")?;
    let kernels = bank.kernels2d()?;
    let mut out = Vec::with_capacity(4);
    for k2 in &kernels {
        let kc = FilterBank::replicate(k2, c)?;
        out.push(x.conv2d_depthwise_stride2(&kc, mode)?);
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

/// Adjoint synthesis from four subbands back to `out_hw`. For orthonormal
/// filters this inverts `dwt_step` exactly under periodic handling.
pub fn idwt_step(
    subbands: &[Tensor; 4],
    bank: &FilterBank,
    mode: PadMode,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    let c = input_channels(&subbands[0], "idwt_step")?;
    let kernels = bank.kernels2d()?;
    let mut acc: Option<Tensor> = None;
    for (band, k2) in subbands.iter().zip(&kernels) {
        let kc = FilterBank::replicate(k2, c)?;
        let part = band.conv2d_depthwise_stride2_transpose(&kc, mode, out_hw)?;
        acc = Some(match acc {
            None => part,
            Some(a) => a.add(&part)?,
        });
    }
    Ok(acc.unwrap())
}

// ─── packet tree ───────────────────────────────────────────────────────────

/// Result of a depth-L packet analysis.
///
/// `terminals` holds the 4^L leaf subbands in depth-first LL, LH, HL, HH
/// order (so for L = 2 the first is LL-LL and the last HH-HH). `input_hw`
/// remembers the analyzed extent so synthesis can invert odd-size halvings.
pub struct PacketTree {
    pub levels: usize,
    pub input_hw: (usize, usize),
    pub terminals: Vec<Tensor>,
}

/// Number of gated nodes in a depth-L tree: every subband produced at every
/// level, 4 + 4² + … + 4^L.
pub fn node_count(levels: usize) -> usize {
    (1..=levels).map(|l| 4usize.pow(l as u32)).sum()
}

/// Haar taps zero-padded to `len`, with the pair centered so the padded
/// filter computes the same transform as the bare two-tap filter under the
/// centered stride-2 alignment.
pub fn haar_taps(len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    let at = (len - 2) / 2;
    v[at] = 1.0 / SQRT_2;
    v[at + 1] = 1.0 / SQRT_2;
    v
}

/// Full packet analysis with optional per-node gating.
///
/// `gammas`, when given, must hold one one-element tensor per tree node in
/// depth-first order; each node's coefficients pass through the soft gate
/// before being split further. `None` analyzes ungated (identical to γ = 0
/// everywhere).
pub fn wpt_analyze_full(
    x: &Tensor,
    bank: &FilterBank,
    levels: usize,
    gammas: Option<&[Tensor]>,
    sharpness: f64,
) -> Result<PacketTree> {
    if levels == 0 {
        return Err(Error::invalid("wpt_analyze_full: levels must be >= 1"));
    }
    let (h, w) = spatial_hw(x);
    let min_extent = bank.len() * (1usize << (levels - 1));
    if h < min_extent || w < min_extent {
        return Err(Error::invalid(format!(
            "wpt_analyze_full: {h}x{w} too small for {levels} level(s) of a \
             {}-tap filter (need at least {min_extent})",
            bank.len()
        )));
    }
    if let Some(g) = gammas {
        let need = node_count(levels);
        if g.len() != need {
            return Err(Error::invalid(format!(
                "wpt_analyze_full: {} gate thresholds supplied, tree has {need} nodes",
                g.len()
            )));
        }
    }
    let mut terminals = Vec::with_capacity(4usize.pow(levels as u32));
    let mut cursor = 0usize;
    analyze_rec(
        x,
        bank,
        levels,
        gammas,
        sharpness,
        &mut cursor,
        &mut terminals,
    )?;
    Ok(PacketTree {
        levels,
        input_hw: (h, w),
        terminals,
    })
}

fn analyze_rec(
    x: &Tensor,
    bank: &FilterBank,
    remaining: usize,
    gammas: Option<&[Tensor]>,
    sharpness: f64,
    cursor: &mut usize,
    terminals: &mut Vec<Tensor>,
) -> Result<()> {
    let bands = dwt_step(x, bank, PadMode::Periodic)?;
    for band in bands.iter() {
        let gated = match gammas {
            Some(g) => {
                let gate = &g[*cursor];
                band.hard_threshold(gate, sharpness)?
            }
            None => band.clone(),
        };
        *cursor += 1;
        if remaining == 1 {
            terminals.push(gated);
        } else {
            analyze_rec(&gated, bank, remaining - 1, gammas, sharpness, cursor, terminals)?;
        }
    }
    Ok(())
}

/// Invert an (ungated) packet analysis back to the recorded input extent.
pub fn wpt_synthesize(tree: &PacketTree, bank: &FilterBank) -> Result<Tensor> {
    synth_rec(&tree.terminals, bank, tree.input_hw)
}

fn synth_rec(terms: &[Tensor], bank: &FilterBank, hw: (usize, usize)) -> Result<Tensor> {
    if terms.len() == 1 {
        return Ok(terms[0].clone());
    }
    let quarter = terms.len() / 4;
    let child_hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
    let mut children = Vec::with_capacity(4);
    for q in 0..4 {
        children.push(synth_rec(
            &terms[q * quarter..(q + 1) * quarter],
            bank,
            child_hw,
        )?);
    }
    let bands: [Tensor; 4] = [
        children.remove(0),
        children.remove(0),
        children.remove(0),
        children.remove(0),
    ];
    idwt_step(&bands, bank, PadMode::Periodic, hw)
}

/// Per-terminal total energy (sum of squares), analysis order.
pub fn band_energies(tree: &PacketTree) -> Vec<f64> {
    tree.terminals
        .iter()
        .map(|t| t.values().iter().map(|v| v * v).sum())
        .collect()
}

// ─── low-frequency extraction ──────────────────────────────────────────────

/// Low-pass reconstruction: run the LL chain down to s×s, then invert with
/// all detail bands zeroed, landing back on the input extent. Requires the
/// extent to reach `target_s` by exact repeated halving.
pub fn extract_lowfreq(x: &Tensor, bank: &FilterBank, target_s: usize) -> Result<Tensor> {
    let (h, w) = spatial_hw(x);
    if h != w {
        return Err(Error::invalid(format!(
            "extract_lowfreq: square extents required, got {h}x{w}"
        )));
    }
    if target_s == 0 || h % target_s != 0 || !(h / target_s).is_power_of_two() {
        return Err(Error::invalid(format!(
            "extract_lowfreq: {h} does not reach {target_s} by repeated halving"
        )));
    }
    let levels = (h / target_s).trailing_zeros() as usize;
    let c = input_channels(x, "extract_lowfreq")?;
    let ll_kernel = {
        let kernels = bank.kernels2d()?;
        FilterBank::replicate(&kernels[0], c)?
    };
    let mut sizes = Vec::with_capacity(levels);
    let mut cur = x.clone();
    let mut hw = (h, w);
    for _ in 0..levels {
        sizes.push(hw);
        cur = cur.conv2d_depthwise_stride2(&ll_kernel, PadMode::Periodic)?;
        hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
    }
    for &target in sizes.iter().rev() {
        cur = cur.conv2d_depthwise_stride2_transpose(&ll_kernel, PadMode::Periodic, target)?;
    }
    Ok(cur)
}

// ─── regularizers ──────────────────────────────────────────────────────────

/// |Σ h_lp − √2| — unit DC gain for the low-pass.
pub fn reg_sum(bank: &FilterBank) -> Result<Tensor> {
    Ok(bank.h_lp().sum_all().affine(1.0, -SQRT_2).abs())
}

/// |Σ h_hp| — zero DC response for the mirrored high-pass.
pub fn reg_hp(bank: &FilterBank) -> Result<Tensor> {
    Ok(bank.h_hp()?.sum_all().abs())
}

/// Orthonormality across even shifts:
/// (|Σh² − 1| + Σ_{s ∈ {2,4,…,K−2}} |Σ_k h[k]·h[k−s]|) / (K/2).
pub fn reg_ortho(bank: &FilterBank) -> Result<Tensor> {
    let k = bank.len();
    let h = bank.h_lp();
    let mut total = h.square().sum_all().affine(1.0, -1.0).abs();
    let mut shift = 2usize;
    while shift <= k - 2 {
        let left = h.slice(0, shift, k - shift)?;
        let right = h.slice(0, 0, k - shift)?;
        let corr = left.mul(&right)?.sum_all().abs();
        total = total.add(&corr)?;
        shift += 2;
    }
    let cardinality = (k / 2) as f64;
    Ok(total.affine(1.0 / cardinality, 0.0))
}

/// Energy compaction: (Σ_i ‖terminal_i‖₁) / 4^L. Sums over batch when the
/// tree was built from batched input; divide by the batch size for a
/// per-image value.
pub fn reg_sparse(tree: &PacketTree) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for t in &tree.terminals {
        let l1 = t.l1_norm();
        total = Some(match total {
            None => l1,
            Some(acc) => acc.add(&l1)?,
        });
    }
    let scale = 1.0 / tree.terminals.len() as f64;
    Ok(total
        .ok_or_else(|| Error::invalid("reg_sparse: empty tree"))?
        .affine(scale, 0.0))
}

// ─── learnable state + fitting ─────────────────────────────────────────────

/// The learnable transform: filter taps plus unconstrained gate parameters
/// (γ = softplus(ρ) keeps thresholds nonnegative).
pub struct LearnableWavelet {
    pub h_lp: Vec<f64>,
    pub rho: Vec<f64>,
    pub levels: usize,
    pub sharpness: f64,
}

/// ρ giving softplus(ρ) = γ.
pub fn rho_for_gamma(gamma: f64) -> f64 {
    // inverse softplus, stable for small γ
    (gamma.exp_m1()).ln()
}

impl LearnableWavelet {
    /// Haar-seeded filter of `filter_len` taps with near-zero thresholds.
    pub fn init(filter_len: usize, levels: usize, init_gamma: f64) -> Result<LearnableWavelet> {
        if filter_len < 2 || filter_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "wavelet init: filter length must be even and >= 2, got {filter_len}"
            )));
        }
        Ok(LearnableWavelet {
            h_lp: haar_taps(filter_len),
            rho: vec![rho_for_gamma(init_gamma); node_count(levels)],
            levels,
            sharpness: DEFAULT_SHARPNESS,
        })
    }

    /// Add seeded jitter to the taps (used to differentiate fitting seeds).
    pub fn jitter(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        for v in self.h_lp.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }

    /// Bind the filter on a tape (or as constants) and derive γ tensors.
    pub fn bind(&self, tape: Option<&Tape>) -> Result<(FilterBank, Vec<Tensor>, Tensor, Tensor)> {
        let (h, rho) = match tape {
            Some(t) => (
                t.leaf(self.h_lp.clone(), &[self.h_lp.len()]),
                t.leaf(self.rho.clone(), &[self.rho.len()]),
            ),
            None => (
                Tensor::constant(self.h_lp.clone(), &[self.h_lp.len()]),
                Tensor::constant(self.rho.clone(), &[self.rho.len()]),
            ),
        };
        let gamma_vec = rho.softplus();
        let mut gammas = Vec::with_capacity(self.rho.len());
        for i in 0..self.rho.len() {
            gammas.push(gamma_vec.slice(0, i, 1)?);
        }
        let bank = FilterBank::new(h.clone())?;
        Ok((bank, gammas, h, rho))
    }

    pub fn gamma_values(&self) -> Vec<f64> {
        self.rho
            .iter()
            .map(|&r| r.max(0.0) + (-r.abs()).exp().ln_1p())
            .collect()
    }
}

/// Knobs for the standalone fitting loop.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Quadratically decay the step size to zero across the run. The
    /// absolute-value penalties give constant-magnitude gradients near their
    /// zeros, so a fixed rate chatters instead of settling; decay anneals
    /// the chatter away.
    pub lr_decay: bool,
    pub lambda_sum: f64,
    pub lambda_hp: f64,
    pub lambda_ortho: f64,
    pub lambda_sparse: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 400,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            lr_decay: true,
            lambda_sum: 1.0,
            lambda_hp: 1.0,
            lambda_ortho: 1.0,
            lambda_sparse: 1e-3,
        }
    }
}

/// One row of the fitting trace.
#[derive(Debug, Clone)]
pub struct FitRecord {
    pub step: usize,
    pub reg_sum: f64,
    pub reg_hp: f64,
    pub reg_ortho: f64,
    pub reg_sparse: f64,
    pub total: f64,
}

/// Fit outcome plus held-out diagnostics.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub trace: Vec<FitRecord>,
    pub final_reg_sum: f64,
    pub final_reg_hp: f64,
    pub final_reg_ortho: f64,
    /// Ungated mean terminal L1 per image on the held-out set — the basis-
    /// quality number, immune to gate shrinkage.
    pub heldout_l1: f64,
    pub gammas: Vec<f64>,
}

/// Mean ungated terminal L1 per image of `images` under `bank`.
pub fn mean_terminal_l1(images: &[Tensor], bank: &FilterBank, levels: usize) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let tree = wpt_analyze_full(img, bank, levels, None, DEFAULT_SHARPNESS)?;
        total += reg_sparse(&tree)?.item();
    }
    Ok(total / images.len() as f64)
}

/// Gradient-descend the regularizer objective over minibatches of images
/// ([C,H,W] each). Optimizes taps and thresholds jointly with SGD+momentum.
pub fn fit_wavelet(
    state: &mut LearnableWavelet,
    train: &[Tensor],
    heldout: &[Tensor],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::invalid("fit_wavelet: empty training set"));
    }
    let mut mom_h = vec![0.0; state.h_lp.len()];
    let mut mom_r = vec![0.0; state.rho.len()];
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let (bank, gammas, h_leaf, rho_leaf) = state.bind(Some(&tape))?;
        let mut batch_sparse: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let img = &train[rng.gen_range(0..train.len())];
            let tree = wpt_analyze_full(img, &bank, state.levels, Some(&gammas), state.sharpness)?;
            let s = reg_sparse(&tree)?;
            batch_sparse = Some(match batch_sparse {
                None => s,
                Some(acc) => acc.add(&s)?,
            });
        }
        let sparse = batch_sparse.unwrap().affine(1.0 / cfg.batch_size as f64, 0.0);
        let rs = reg_sum(&bank)?;
        let rh = reg_hp(&bank)?;
        let ro = reg_ortho(&bank)?;
        let total = rs
            .affine(cfg.lambda_sum, 0.0)
            .add(&rh.affine(cfg.lambda_hp, 0.0))?
            .add(&ro.affine(cfg.lambda_ortho, 0.0))?
            .add(&sparse.affine(cfg.lambda_sparse, 0.0))?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("wavelet fit loss at step {step}")));
        }
        tape.backward(&total)?;
        let gh = h_leaf.grad().unwrap_or_else(|| vec![0.0; state.h_lp.len()]);
        let gr = rho_leaf.grad().unwrap_or_else(|| vec![0.0; state.rho.len()]);
        let lr = if cfg.lr_decay {
            let frac = 1.0 - step as f64 / cfg.steps as f64;
            cfg.lr * frac * frac
        } else {
            cfg.lr
        };
        for i in 0..state.h_lp.len() {
            mom_h[i] = cfg.momentum * mom_h[i] + gh[i];
            state.h_lp[i] -= lr * mom_h[i];
        }
        for i in 0..state.rho.len() {
            mom_r[i] = cfg.momentum * mom_r[i] + gr[i];
            state.rho[i] -= lr * mom_r[i];
        }
        trace.push(FitRecord {
            step,
            reg_sum: rs.item(),
            reg_hp: rh.item(),
            reg_ortho: ro.item(),
            reg_sparse: sparse.item(),
            total: total.item(),
        });
    }
    let (bank, _, _, _) = state.bind(None)?;
    let heldout_l1 = if heldout.is_empty() {
        f64::NAN
    } else {
        mean_terminal_l1(heldout, &bank, state.levels)?
    };
    Ok(FitReport {
        final_reg_sum: reg_sum(&bank)?.item(),
        final_reg_hp: reg_hp(&bank)?.item(),
        final_reg_ortho: reg_ortho(&bank)?.item(),
        heldout_l1,
        gammas: state.gamma_values(),
        trace,
    })
}

//! Flow-matching math for jointly trained streams on different clocks.
//!
//! Every stream linearly interpolates its clean target with Gaussian noise,
//! z = t·x + (1−t)·ε, but auxiliary streams read a reparameterized clock
//! τ = φ(t) that runs ahead of the pixel clock, so their content matures
//! earlier along the joint trajectory. All schedules satisfy φ(t) ≥ t,
//! φ(1) = 1, and monotonicity, with φ = identity as the synchronous case.
//!
//! The model predicts clean data; its implied velocity is
//! (x_pred − z) / max(1−t, t_clip), and the loss compares implied and true
//! velocities under the same clipped denominator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Velocity-denominator clip: below 1−t = t_clip the division is frozen.
pub const DEFAULT_T_CLIP: f64 = 0.05;

// ─── clock schedules ───────────────────────────────────────────────────────

/// Monotone clock maps τ = φ(t) with φ(t) ≥ t and φ(1) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockSchedule {
    /// φ(t) = t.
    Synchronous,
    /// φ(t) = min(1, t/b); the stream finishes at t = b, then holds.
    Cascaded { b: f64 },
    /// φ(t) = min(1, t + delta).
    LinearOffset { delta: f64 },
    /// φ(t) = s·t / (1 + (s−1)·t); accelerates early, lands exactly at 1.
    VarianceShifted { s: f64 },
}

impl ClockSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ClockSchedule::Synchronous => Ok(()),
            ClockSchedule::Cascaded { b } => {
                if b > 0.0 && b <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "cascaded clock: b must lie in (0, 1], got {b}"
                    )))
                }
            }
            ClockSchedule::LinearOffset { delta } => {
                if delta >= 0.0 && delta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "linear-offset clock: delta must be >= 0, got {delta}"
                    )))
                }
            }
            ClockSchedule::VarianceShifted { s } => {
                if s >= 1.0 && s.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "variance-shifted clock: s must be >= 1, got {s}"
                    )))
                }
            }
        }
    }

    /// Evaluate τ = φ(t) for t ∈ [0, 1].
    pub fn map(&self, t: f64) -> f64 {
        let tau = match *self {
            ClockSchedule::Synchronous => t,
            ClockSchedule::Cascaded { b } => (t / b).min(1.0),
            ClockSchedule::LinearOffset { delta } => (t + delta).min(1.0),
            ClockSchedule::VarianceShifted { s } => s * t / (1.0 + (s - 1.0) * t),
        };
        tau.min(1.0)
    }

    pub fn map_many(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.map(t)).collect()
    }
}

/// Per-sample clock draw for one pixel stream plus auxiliary schedules.
///
/// Returns [t_pix, φ_1(·), φ_2(·), …]. Coupled sampling (the default) maps
/// one shared uniform draw through every schedule; independent sampling
/// (ablation) draws a fresh uniform per auxiliary stream before mapping.
pub fn draw_clocks(
    aux: &[ClockSchedule],
    independent: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let t_pix: f64 = rng.gen_range(0.0..1.0);
    let mut out = Vec::with_capacity(1 + aux.len());
    out.push(t_pix);
    for sched in aux {
        let u = if independent { rng.gen_range(0.0..1.0) } else { t_pix };
        out.push(sched.map(u));
    }
    out
}

// ─── interpolation ─────────────────────────────────────────────────────────

fn check_times(t: &Tensor, op: &'static str) -> Result<()> {
    for &v in t.values().iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{op}: time {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// z = t·x + (1−t)·ε with `t` broadcastable against `x` (typically [B,1,1]
/// against [B,T,d], or a scalar).
pub fn interpolate(x: &Tensor, eps: &Tensor, t: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    check_times(t, "interpolate")?;
    let one_minus_t = t.affine(-1.0, 1.0);
    x.mul(t)?.add(&eps.mul(&one_minus_t)?)
}

// ─── x-prediction loss ─────────────────────────────────────────────────────

/// Clipped inverse velocity denominator 1 / max(1−t, t_clip), built as a
/// constant (times are never learned).
fn inv_denom(t: &Tensor, t_clip: f64) -> Tensor {
    let vals: Vec<f64> = t
        .values()
        .iter()
        .map(|&v| 1.0 / (1.0 - v).max(t_clip))
        .collect();
    Tensor::constant(vals, t.shape())
}

/// Squared velocity-space error of a clean-data prediction:
/// mean‖(x_pred − z)/max(1−t,c) − (x − z)/max(1−t,c)‖², optionally with a
/// per-sample weight broadcast over each sample's elements.
///
/// The z terms cancel algebraically, so this equals
/// mean‖(x_pred − x)/max(1−t,c)‖²; the subtraction is kept explicit so the
/// graph mirrors the velocity-matching form, and the cancellation is
/// asserted numerically in debug builds.
pub fn xpred_loss(
    x_pred: &Tensor,
    z: &Tensor,
    x: &Tensor,
    t: &Tensor,
    t_clip: f64,
    weights: Option<&Tensor>,
) -> Result<Tensor> {
    if x_pred.shape() != x.shape() {
        return Err(Error::Shape {
            op: "xpred_loss",
            lhs: x_pred.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if x_pred.shape() != z.shape() {
        return Err(Error::Shape {
            op: "xpred_loss",
            lhs: x_pred.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    if !(t_clip > 0.0) {
        return Err(Error::invalid(format!(
            "xpred_loss: t_clip must be positive, got {t_clip}"
        )));
    }
    check_times(t, "xpred_loss")?;
    let inv = inv_denom(t, t_clip);
    let v_model = x_pred.sub(z)?.mul(&inv)?;
    let v_true = x.sub(z)?.mul(&inv)?;
    let diff = v_model.sub(&v_true)?;
    let sq = diff.square();
    let loss = match weights {
        Some(w) => sq.mul(w)?.mean_all(),
        None => sq.mean_all(),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("xpred_loss".into()));
    }
    debug_assert!(
        {
            // flat index into `small` for element `i` of `full`, trailing-
            // dimension broadcast rules
            let bcast = |full: &[usize], small: &[usize], i: usize| -> usize {
                let mut rem = i;
                let mut idx = 0usize;
                let mut stride = 1usize;
                let offset = full.len() - small.len();
                let mut coords = vec![0usize; full.len()];
                for d in (0..full.len()).rev() {
                    coords[d] = rem % full[d];
                    rem /= full[d];
                }
                for d in (0..small.len()).rev() {
                    let c = if small[d] == 1 { 0 } else { coords[offset + d] };
                    idx += c * stride;
                    stride *= small[d];
                }
                idx
            };
            let n = x_pred.numel();
            let xp = x_pred.values();
            let xv = x.values();
            let iv = inv.values();
            let mut direct = 0.0;
            for i in 0..n {
                let d = (xp[i] - xv[i]) * iv[bcast(x_pred.shape(), inv.shape(), i)];
                let w = weights
                    .map_or(1.0, |wt| wt.values()[bcast(x_pred.shape(), wt.shape(), i)]);
                direct += w * d * d;
            }
            (direct / n as f64 - loss.item()).abs() <= 1e-10 * (1.0 + loss.item().abs())
        },
        "velocity-form loss diverged from its simplified form"
    );
    Ok(loss)
}

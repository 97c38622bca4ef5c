//! Multi-clock Euler sampling.
//!
//! Every stream starts from fresh noise and integrates the same ODE in its
//! own time: the pixel stream on the uniform grid t_i = i/N, each auxiliary
//! stream on the image of that grid under its clock. A stream whose clock
//! has already reached 1 receives zero-length steps and stays put, so
//! auxiliary streams finish early and then act purely as conditioning
//! context for the still-running pixel stream.
//!
//! The last grid step replaces the Euler update with the model's clean
//! prediction itself — the exact limit of the update when the denominator
//! is not clipped, and free of clipping bias when it is.
//!
//! Classifier-free guidance blends conditional and unconditional clean
//! predictions before the velocity is formed.

use crate::backbone::{StreamInput, StreamKind};
use crate::error::{Error, Result};
use crate::param::Binder;
use crate::tensor::Tensor;
use crate::train::Trainer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

// ─── outputs ───────────────────────────────────────────────────────────────

/// Pixel-stream states along the sampling grid: `states[i]` is the batch
/// image tensor data at grid time `grid[i]`, flattened [B,C,H,W].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub batch: usize,
    pub channels: usize,
    pub image_hw: usize,
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

pub struct SampleOutput {
    /// Final pixel batch, flattened [B,C,H,W].
    pub images: Vec<f64>,
    pub trajectory: Option<Trajectory>,
}

impl Trainer {
    /// Draw `labels.len()` samples. `Some(c)` conditions on class `c` with
    /// guidance `cfg.sample.cfg_scale`; `None` samples unconditionally.
    /// Pass `record` to keep the pixel state at every grid point.
    pub fn sample(
        &mut self,
        labels: &[Option<usize>],
        rng: &mut ChaCha8Rng,
        record: bool,
    ) -> Result<SampleOutput> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::invalid("sample: empty label list"));
        }
        let n = self.cfg.sample.steps;
        if n == 0 {
            return Err(Error::invalid("sample: steps must be >= 1"));
        }
        let c = self.dataset.channels();
        let hw = self.dataset.image_hw();
        let num_classes = self.dataset.num_classes();
        for l in labels.iter().flatten() {
            if *l >= num_classes {
                return Err(Error::invalid(format!(
                    "sample: label {l} out of range for {num_classes} classes"
                )));
            }
        }
        let streams = self.cfg.active_streams();
        let schedules = self.cfg.stream_schedules();
        let tokens = self
            .cfg
            .backbone_config(c, num_classes)
            .tokens_per_stream();
        let d = self.cfg.model.width;
        let t_clip = self.cfg.train.t_clip;
        let w = self.cfg.sample.cfg_scale;

        let cond: Vec<usize> = labels.iter().map(|l| l.unwrap_or(num_classes)).collect();
        let uncond: Vec<usize> = vec![num_classes; b];
        let guided = w != 1.0 && labels.iter().any(|l| l.is_some());

        // initial noise per stream, canonical order
        let mut zs: Vec<Tensor> = streams
            .iter()
            .map(|&kind| {
                let shape: Vec<usize> = match kind {
                    StreamKind::Pix => vec![b, c, hw, hw],
                    _ => vec![b, tokens, d],
                };
                let numel = shape.iter().product();
                let eps: Vec<f64> = (0..numel)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::constant(eps, &shape)
            })
            .collect();

        let pix = streams.len() - 1;
        let mut grid = Vec::with_capacity(n + 1);
        let mut states = Vec::with_capacity(n + 1);
        grid.push(0.0);
        if record {
            states.push(zs[pix].values().to_vec());
        }

        for i in 0..n {
            let t0 = i as f64 / n as f64;
            let t1 = (i + 1) as f64 / n as f64;
            let taus0: Vec<f64> = schedules.iter().map(|s| s.map(t0)).collect();
            let taus1: Vec<f64> = schedules.iter().map(|s| s.map(t1)).collect();

            let mut binder = Binder::new(None);
            let inputs: Vec<StreamInput> = streams
                .iter()
                .enumerate()
                .map(|(m, &kind)| StreamInput {
                    kind,
                    state: zs[m].clone(),
                    t: vec![taus0[m]; b],
                })
                .collect();
            let preds_c = self.model.backbone.forward(&mut binder, &inputs, &cond)?;
            let preds = if guided {
                let preds_u = self.model.backbone.forward(&mut binder, &inputs, &uncond)?;
                preds_c
                    .iter()
                    .zip(&preds_u)
                    .map(|(pc, pu)| {
                        // x_u + w (x_c - x_u), formed in clean-prediction space
                        pc.sub(pu)?.affine(w, 0.0).add(pu)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                preds_c
            };

            let last = i + 1 == n;
            for m in 0..streams.len() {
                if last {
                    zs[m] = preds[m].clone();
                    continue;
                }
                let dtau = taus1[m] - taus0[m];
                if dtau == 0.0 {
                    continue;
                }
                let denom = (1.0 - taus0[m]).max(t_clip);
                // z + dtau * (x_pred - z) / denom
                let v = preds[m].sub(&zs[m])?.affine(1.0 / denom, 0.0);
                zs[m] = zs[m].add(&v.affine(dtau, 0.0))?;
            }
            grid.push(t1);
            if record {
                states.push(zs[pix].values().to_vec());
            }
        }

        let images = zs[pix].values().to_vec();
        if !images.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sampled images".into()));
        }
        Ok(SampleOutput {
            images,
            trajectory: record.then(|| Trajectory {
                batch: b,
                channels: c,
                image_hw: hw,
                grid,
                states,
            }),
        })
    }
}

// ─── trajectory files ──────────────────────────────────────────────────────

const TRAJ_MAGIC: &[u8; 4] = b"FQTR";
const TRAJ_VERSION: u32 = 1;

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    if traj.states.len() != traj.grid.len() {
        return Err(Error::invalid("trajectory: states/grid length mismatch"));
    }
    let frame = traj.batch * traj.channels * traj.image_hw * traj.image_hw;
    for s in &traj.states {
        if s.len() != frame {
            return Err(Error::invalid("trajectory: frame size mismatch"));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
    for dim in [
        traj.batch,
        traj.channels,
        traj.image_hw,
        traj.grid.len(),
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &t in &traj.grid {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for s in &traj.states {
        for &v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let take = |off: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *off + n > bytes.len() {
            return Err(Error::invalid("trajectory file truncated"));
        }
        let out = bytes[*off..*off + n].to_vec();
        *off += n;
        Ok(out)
    };
    let mut off = 0;
    if take(&mut off, 4)? != TRAJ_MAGIC {
        return Err(Error::invalid("not a trajectory file"));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(&mut off, 4)?);
    if version != TRAJ_VERSION {
        return Err(Error::invalid(format!(
            "unsupported trajectory version {version}"
        )));
    }
    let batch = u32_at(take(&mut off, 4)?) as usize;
    let channels = u32_at(take(&mut off, 4)?) as usize;
    let image_hw = u32_at(take(&mut off, 4)?) as usize;
    let points = u32_at(take(&mut off, 4)?) as usize;
    if batch == 0 || channels == 0 || image_hw == 0 || points == 0 {
        return Err(Error::invalid("trajectory: zero dimension"));
    }
    let frame = batch * channels * image_hw * image_hw;
    if frame > (1 << 28) || points > (1 << 20) {
        return Err(Error::invalid("trajectory: implausible dimensions"));
    }
    let f64_at = |b: Vec<u8>| f64::from_le_bytes(b.try_into().unwrap());
    let mut grid = Vec::with_capacity(points);
    for _ in 0..points {
        grid.push(f64_at(take(&mut off, 8)?));
    }
    let mut states = Vec::with_capacity(points);
    for _ in 0..points {
        let raw = take(&mut off, frame * 8)?;
        states.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if off != bytes.len() {
        return Err(Error::invalid("trajectory: trailing bytes"));
    }
    Ok(Trajectory {
        batch,
        channels,
        image_hw,
        grid,
        states,
    })
}

// ─── spectral convergence ──────────────────────────────────────────────────

/// Per-band relative error of the evolving state against the final image,
/// measured through a one-level Haar split: `low_err[i]` is the relative
/// L2 distance of the coarse band at `grid[i]` from the coarse band of the
/// final state, `high_err[i]` the same over the three detail bands pooled.
#[derive(Debug, Clone)]
pub struct BandConvergence {
    pub grid: Vec<f64>,
    pub low_err: Vec<f64>,
    pub high_err: Vec<f64>,
}

fn haar_split(state: &[f64], b: usize, c: usize, hw: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    use crate::tensor::PadMode;
    use crate::wavelet::{dwt_step, FilterBank};
    let x = Tensor::constant(state.to_vec(), &[b, c, hw, hw]);
    let bands = dwt_step(&x, &FilterBank::haar(), PadMode::Periodic)?;
    let low = bands[0].values().to_vec();
    let mut high = Vec::with_capacity(3 * low.len());
    for band in &bands[1..] {
        high.extend_from_slice(band.values());
    }
    Ok((low, high))
}

fn rel_err(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(reference)
        .map(|(x, r)| (x - r) * (x - r))
        .sum();
    let den: f64 = reference.iter().map(|r| r * r).sum();
    (num / den.max(1e-30)).sqrt()
}

pub fn band_convergence(traj: &Trajectory) -> Result<BandConvergence> {
    if traj.states.len() < 2 {
        return Err(Error::invalid("band_convergence: need at least 2 states"));
    }
    let (b, c, hw) = (traj.batch, traj.channels, traj.image_hw);
    if hw % 2 != 0 {
        return Err(Error::invalid("band_convergence: odd image size"));
    }
    let (low_f, high_f) = haar_split(traj.states.last().unwrap(), b, c, hw)?;
    let mut low_err = Vec::with_capacity(traj.states.len());
    let mut high_err = Vec::with_capacity(traj.states.len());
    for s in &traj.states {
        let (low, high) = haar_split(s, b, c, hw)?;
        low_err.push(rel_err(&low, &low_f));
        high_err.push(rel_err(&high, &high_f));
    }
    Ok(BandConvergence {
        grid: traj.grid.clone(),
        low_err,
        high_err,
    })
}

/// First grid time at which the error stays at or below `thresh` for the
/// rest of the trajectory; 1.0 if it never settles.
pub fn convergence_time(grid: &[f64], errs: &[f64], thresh: f64) -> f64 {
    let mut settled = errs.len();
    for i in (0..errs.len()).rev() {
        if errs[i] <= thresh {
            settled = i;
        } else {
            break;
        }
    }
    grid.get(settled).copied().unwrap_or(1.0)
}

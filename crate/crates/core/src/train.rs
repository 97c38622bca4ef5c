//! Training pipeline: joint multi-stream flow matching with learned
//! frequency targets.
//!
//! Each step draws a batch, builds per-stream clean targets (pixels as-is;
//! frequency targets by low-pass reconstruction through the active basis
//! and patch embedding; semantic targets from the stand-in encoder),
//! interpolates each against fresh noise on its own clock, and descends the
//! summed velocity-space losses plus the wavelet penalties.
//!
//! Until the freeze step, frequency targets pass through the live patch
//! embedding but are fully detached — the task loss shapes neither the
//! embedding nor the filter through the target path. At the freeze step the
//! embedding is deep-copied and frozen; from then on targets flow through
//! the frozen copy, which sends task gradient into the wavelet filter while
//! the copy itself stays fixed.
//!
//! All stochastic draws come from one counter-based stream in a fixed
//! order, so runs are bit-reproducible and resumable from checkpoints.

use crate::backbone::{Backbone, StreamInput, StreamKind};
use crate::checkpoint::{Checkpoint, SavedParam};
use crate::config::{seeds, BasisKind, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::flow::{interpolate, xpred_loss, ClockSchedule};
use crate::optim::Optimizer;
use crate::param::{Binder, Param, Visit};
use crate::pyramid;
use crate::semantic::{self, SemanticSpec};
use crate::tensor::{Tape, Tensor};
use crate::wavelet::{
    extract_lowfreq, haar_taps, node_count, reg_hp, reg_ortho, reg_sparse, reg_sum,
    rho_for_gamma, wpt_analyze_full, FilterBank,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

// ─── model ─────────────────────────────────────────────────────────────────

/// Learnable wavelet state as tape-ready params.
pub struct WaveletParams {
    pub h: Param,
    pub rho: Param,
}

/// Frozen deep copy of the patch embedding used for frequency targets.
pub struct FrozenEmbed {
    pub w: Param,
    pub b: Param,
}

/// Everything learnable in a run.
pub struct Model {
    pub backbone: Backbone,
    pub wavelet: Option<WaveletParams>,
    pub frozen_embed: Option<FrozenEmbed>,
}

impl Visit for Model {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params(f);
        if let Some(w) = &mut self.wavelet {
            f(&mut w.h);
            f(&mut w.rho);
        }
        if let Some(fe) = &mut self.frozen_embed {
            f(&mut fe.w);
            f(&mut fe.b);
        }
    }
}

// ─── metrics ───────────────────────────────────────────────────────────────

/// One metrics row; `None` renders as an empty CSV cell.
#[derive(Debug, Clone, Default)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_dino: Option<f64>,
    pub loss_fre: Option<f64>,
    pub loss_pix: f64,
    pub reg_sum: Option<f64>,
    pub reg_hp: Option<f64>,
    pub reg_ortho: Option<f64>,
    pub reg_sparse: Option<f64>,
    pub t_pix_mean: f64,
    pub t_aux_mean: Option<f64>,
    pub heldout_dino: Option<f64>,
    pub heldout_fre: Option<f64>,
    pub heldout_pix: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_dino,loss_fre,loss_pix,reg_sum,reg_hp,reg_ortho,\
                                  reg_sparse,t_pix_mean,t_aux_mean,heldout_dino,heldout_fre,heldout_pix";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.loss_dino),
            cell(self.loss_fre),
            self.loss_pix,
            cell(self.reg_sum),
            cell(self.reg_hp),
            cell(self.reg_ortho),
            cell(self.reg_sparse),
            self.t_pix_mean,
            cell(self.t_aux_mean),
            cell(self.heldout_dino),
            cell(self.heldout_fre),
            cell(self.heldout_pix),
        )
    }
}

// ─── trainer ───────────────────────────────────────────────────────────────

pub struct Trainer {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub model: Model,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let dataset = Dataset::open(&cfg.data, cfg.seed)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::init(cfg.seed));
        let backbone_cfg = cfg.backbone_config(dataset.channels(), dataset.num_classes());
        let backbone = Backbone::new(backbone_cfg, &mut init_rng)?;
        let wavelet = match cfg.wavelet.basis {
            BasisKind::Learned => {
                let k = cfg.wavelet.filter_len;
                let nodes = node_count(cfg.wavelet_levels());
                Some(WaveletParams {
                    h: Param::new("wavelet.h", &[k], haar_taps(k)),
                    rho: Param::new(
                        "wavelet.rho",
                        &[nodes],
                        vec![rho_for_gamma(cfg.wavelet.init_gamma); nodes],
                    ),
                })
            }
            _ => None,
        };
        let optimizer = Optimizer::new(cfg.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(seeds::train(cfg.seed));
        Ok(Trainer {
            cfg,
            dataset,
            model: Model {
                backbone,
                wavelet,
                frozen_embed: None,
            },
            optimizer,
            rng,
            step: 0,
        })
    }

    fn semantic_spec(&self) -> SemanticSpec {
        SemanticSpec {
            channels: self.dataset.channels(),
            image_hw: self.dataset.image_hw(),
            patch: self.cfg.model.patch,
            num_classes: self.dataset.num_classes(),
            width: self.cfg.model.width,
            seed: self.cfg.seed,
        }
    }

    fn effective_lr(&self) -> f64 {
        if self.cfg.lr_decay {
            let frac = 1.0 - self.step as f64 / self.cfg.steps as f64;
            self.cfg.lr * frac * frac
        } else {
            self.cfg.lr
        }
    }

    /// The aux-target ablation's replacement target: one fixed standard-normal
    /// latent per stream, shared by every example and split, so the auxiliary
    /// branch carries no image information at all.
    fn random_latent(&self, stream_salt: u64, tokens: usize) -> Vec<f64> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seeds::aux_random(self.cfg.seed).to_le_bytes());
        key[8..16].copy_from_slice(&stream_salt.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..tokens * self.cfg.model.width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Low-pass reconstruction of a clean image batch under the configured
    /// basis. Learned basis: on-tape through `bank` so the filter can
    /// receive gradient. Fixed bases: constants.
    fn lowpass_batch(
        &self,
        images: &Tensor,
        bank: Option<&FilterBank>,
    ) -> Result<Tensor> {
        let s = self.cfg.wavelet.target_s;
        match self.cfg.wavelet.basis {
            BasisKind::Learned => extract_lowfreq(
                images,
                bank.expect("learned basis requires a bound filter"),
                s,
            ),
            BasisKind::Haar => extract_lowfreq(images, &FilterBank::haar(), s),
            BasisKind::Laplacian => {
                let shape = images.shape().to_vec();
                let (b, c, hw) = (shape[0], shape[1], shape[2]);
                let vals = images.values();
                let mut out = Vec::with_capacity(vals.len());
                for i in 0..b {
                    let img = &vals[i * c * hw * hw..(i + 1) * c * hw * hw];
                    out.extend(pyramid::lowpass(img, c, hw, s)?);
                }
                Ok(Tensor::constant(out, &shape))
            }
        }
    }

    /// Snapshot the live patch embedding into a frozen copy.
    fn freeze_aux_encoder(&mut self) {
        let (w, b) = self.model.backbone.patch_params();
        let mut fw = w.duplicate("frozen_embed.w");
        let mut fb = b.duplicate("frozen_embed.b");
        fw.frozen = true;
        fb.frozen = true;
        self.model.frozen_embed = Some(FrozenEmbed { w: fw, b: fb });
    }

    /// Run one optimization step and return its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        if self.model.frozen_embed.is_none() && self.step >= self.cfg.freeze_step() {
            self.freeze_aux_encoder();
        }
        let b = self.cfg.batch_size;
        let c = self.dataset.channels();
        let hw = self.dataset.image_hw();
        let streams = self.cfg.active_streams();
        let schedules = self.cfg.stream_schedules();
        let lambdas = self.cfg.stream_lambdas();
        let tokens = self.cfg.backbone_config(c, self.dataset.num_classes()).tokens_per_stream();
        let d = self.cfg.model.width;
        let null_label = self.dataset.num_classes();

        // 1. examples
        let train_len = self.dataset.len(Split::Train) as u64;
        let mut indices = Vec::with_capacity(b);
        let mut images = Vec::with_capacity(b * c * hw * hw);
        let mut true_labels = Vec::with_capacity(b);
        for _ in 0..b {
            let idx = self.rng.gen_range(0..train_len);
            let (vals, label) = self.dataset.example(Split::Train, idx);
            indices.push(idx);
            images.extend(vals);
            true_labels.push(label);
        }

        // 2. label dropout
        let labels: Vec<usize> = true_labels
            .iter()
            .map(|&l| {
                if self.rng.gen_range(0.0..1.0) < self.cfg.train.class_dropout {
                    null_label
                } else {
                    l
                }
            })
            .collect();

        // 3. clocks: per sample, per stream (canonical order)
        let aux_schedules: Vec<ClockSchedule> = schedules[..schedules.len() - 1].to_vec();
        let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(b); streams.len()];
        for _ in 0..b {
            let t_pix: f64 = self.rng.gen_range(0.0..1.0);
            for (m, sched) in aux_schedules.iter().enumerate() {
                let u = if self.cfg.train.independent_clocks {
                    self.rng.gen_range(0.0..1.0)
                } else {
                    t_pix
                };
                times[m].push(sched.map(u));
            }
            times[streams.len() - 1].push(t_pix);
        }

        let tape = Tape::new();
        let mut binder = Binder::new(Some(&tape));
        let x_pix = Tensor::constant(images, &[b, c, hw, hw]);

        // learned-basis bank, bound on tape
        let bank = match (&self.model.wavelet, self.cfg.wavelet.basis) {
            (Some(wp), BasisKind::Learned) => {
                Some(FilterBank::new(binder.bind(&wp.h))?)
            }
            _ => None,
        };

        // 4. per-stream targets and noisy states, canonical order
        let mut targets = Vec::with_capacity(streams.len());
        let mut zs = Vec::with_capacity(streams.len());
        let mut inputs = Vec::with_capacity(streams.len());
        for (m, &kind) in streams.iter().enumerate() {
            let (target, t_shape): (Tensor, Vec<usize>) = match kind {
                StreamKind::Pix => (x_pix.clone(), vec![b, 1, 1, 1]),
                StreamKind::Fre => {
                    let x_fre = if self.cfg.train.random_aux_latent {
                        let one = self.random_latent(0, tokens);
                        let mut vals = Vec::with_capacity(b * tokens * d);
                        for _ in 0..b {
                            vals.extend_from_slice(&one);
                        }
                        Tensor::constant(vals, &[b, tokens, d])
                    } else {
                        let lp = self.lowpass_batch(&x_pix, bank.as_ref())?;
                        match &self.model.frozen_embed {
                            Some(fe) => self
                                .model
                                .backbone
                                .embed_image_with(&mut binder, &fe.w, &fe.b, &lp)?,
                            None => self
                                .model
                                .backbone
                                .embed_image(&mut binder, &lp)?
                                .detach(),
                        }
                    };
                    (x_fre, vec![b, 1, 1])
                }
                StreamKind::Dino => {
                    let spec = self.semantic_spec();
                    let x_dino = if self.cfg.train.random_aux_latent {
                        let one = self.random_latent(1, tokens);
                        let mut vals = Vec::with_capacity(b * tokens * d);
                        for _ in 0..b {
                            vals.extend_from_slice(&one);
                        }
                        vals
                    } else {
                        let img_len = c * hw * hw;
                        let all = x_pix.values();
                        let mut vals = Vec::with_capacity(b * tokens * d);
                        for (i, &label) in true_labels.iter().enumerate() {
                            vals.extend(semantic::encode(
                                &spec,
                                &all[i * img_len..(i + 1) * img_len],
                                label,
                            )?);
                        }
                        vals
                    };
                    (Tensor::constant(x_dino, &[b, tokens, d]), vec![b, 1, 1])
                }
            };
            // 5. noise + interpolation on this stream's clock
            let numel = target.numel();
            let eps: Vec<f64> = (0..numel)
                .map(|_| self.rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps = Tensor::constant(eps, target.shape());
            let t = Tensor::constant(times[m].clone(), &t_shape);
            let z = interpolate(&target, &eps, &t)?;
            inputs.push(StreamInput {
                kind,
                state: z.clone(),
                t: times[m].clone(),
            });
            targets.push((target, t));
            zs.push(z);
        }

        // 6. forward + per-stream losses
        let preds = self.model.backbone.forward(&mut binder, &inputs, &labels)?;
        let mut total: Option<Tensor> = None;
        let mut stream_losses = Vec::with_capacity(streams.len());
        for (m, &kind) in streams.iter().enumerate() {
            let (target, t) = &targets[m];
            let weights = if kind == StreamKind::Fre && self.cfg.train.fre_loss_decay {
                let w: Vec<f64> = times[m].iter().map(|&tau| 1.0 - tau).collect();
                Some(Tensor::constant(w, &[b, 1, 1]))
            } else {
                None
            };
            let loss = xpred_loss(
                &preds[m],
                &zs[m],
                target,
                t,
                self.cfg.train.t_clip,
                weights.as_ref(),
            )?;
            stream_losses.push(loss.item());
            let weighted = loss.affine(lambdas[m], 0.0);
            total = Some(match total {
                None => weighted,
                Some(acc) => acc.add(&weighted)?,
            });
        }

        // 7. wavelet penalties (learned basis only)
        let mut regs = (None, None, None, None);
        if let (Some(bank), Some(wp)) = (&bank, &self.model.wavelet) {
            let wcfg = &self.cfg.wavelet;
            let rs = reg_sum(bank)?;
            let rh = reg_hp(bank)?;
            let ro = reg_ortho(bank)?;
            let gamma_vec = binder.bind(&wp.rho).softplus();
            let mut gammas = Vec::with_capacity(wp.rho.numel());
            for i in 0..wp.rho.numel() {
                gammas.push(gamma_vec.slice(0, i, 1)?);
            }
            let tree = wpt_analyze_full(
                &x_pix,
                bank,
                self.cfg.wavelet_levels(),
                Some(&gammas),
                wcfg.sharpness,
            )?;
            let rsp = reg_sparse(&tree)?.affine(1.0 / b as f64, 0.0);
            regs = (
                Some(rs.item()),
                Some(rh.item()),
                Some(ro.item()),
                Some(rsp.item()),
            );
            let penalty = rs
                .affine(wcfg.lambda_sum, 0.0)
                .add(&rh.affine(wcfg.lambda_hp, 0.0))?
                .add(&ro.affine(wcfg.lambda_ortho, 0.0))?
                .add(&rsp.affine(wcfg.lambda_sparse, 0.0))?;
            total = Some(match total {
                None => penalty,
                Some(acc) => acc.add(&penalty)?,
            });
        }

        let total = total.expect("at least the pixel stream is active");
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }

        // 8. backward + update
        tape.backward(&total)?;
        let grads = binder.take_grads();
        let lr = self.effective_lr();
        self.optimizer
            .step(&mut self.model, &grads, lr, self.cfg.grad_clip_opt());

        let t_pix_mean =
            times[streams.len() - 1].iter().sum::<f64>() / b as f64;
        let aux_count = (streams.len() - 1) * b;
        let t_aux_mean = (aux_count > 0).then(|| {
            times[..streams.len() - 1]
                .iter()
                .flat_map(|v| v.iter())
                .sum::<f64>()
                / aux_count as f64
        });
        let mut metrics = StepMetrics {
            step: self.step,
            loss_pix: stream_losses[streams.len() - 1],
            t_pix_mean,
            t_aux_mean,
            reg_sum: regs.0,
            reg_hp: regs.1,
            reg_ortho: regs.2,
            reg_sparse: regs.3,
            ..StepMetrics::default()
        };
        for (m, &kind) in streams.iter().enumerate() {
            match kind {
                StreamKind::Dino => metrics.loss_dino = Some(stream_losses[m]),
                StreamKind::Fre => metrics.loss_fre = Some(stream_losses[m]),
                StreamKind::Pix => {}
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Deterministic held-out evaluation: a fixed batch, fixed noise, and a
    /// fixed 8-point time grid, identical on every call. Returns mean
    /// velocity-space loss per stream (canonical order slots).
    pub fn heldout_eval(&mut self) -> Result<(Option<f64>, Option<f64>, f64)> {
        let b = self.cfg.train.eval_batch;
        let c = self.dataset.channels();
        let hw = self.dataset.image_hw();
        let streams = self.cfg.active_streams();
        let schedules = self.cfg.stream_schedules();
        let tokens = self
            .cfg
            .backbone_config(c, self.dataset.num_classes())
            .tokens_per_stream();
        let d = self.cfg.model.width;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seeds::eval(self.cfg.seed));

        let held_len = self.dataset.len(Split::Heldout) as u64;
        if held_len == 0 {
            return Err(Error::invalid(
                "heldout_eval: dataset has no held-out examples",
            ));
        }
        let mut indices = Vec::with_capacity(b);
        let mut images = Vec::with_capacity(b * c * hw * hw);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let idx = eval_rng.gen_range(0..held_len);
            let (vals, label) = self.dataset.example(Split::Heldout, idx);
            indices.push(idx);
            images.extend(vals);
            labels.push(label);
        }
        let x_pix = Tensor::constant(images, &[b, c, hw, hw]);

        // pre-draw one noise field per stream, reused across the t grid
        let mut noises = Vec::with_capacity(streams.len());
        for &kind in &streams {
            let numel = match kind {
                StreamKind::Pix => b * c * hw * hw,
                _ => b * tokens * d,
            };
            let eps: Vec<f64> = (0..numel)
                .map(|_| eval_rng.sample::<f64, _>(StandardNormal))
                .collect();
            noises.push(eps);
        }

        let mut sums = vec![0.0; streams.len()];
        const GRID: usize = 8;
        for j in 0..GRID {
            let t_pix = (j as f64 + 0.5) / GRID as f64;
            let mut binder = Binder::new(None);
            let bank = match (&self.model.wavelet, self.cfg.wavelet.basis) {
                (Some(wp), BasisKind::Learned) => Some(FilterBank::new(binder.bind(&wp.h))?),
                _ => None,
            };
            let mut inputs = Vec::with_capacity(streams.len());
            let mut targets = Vec::with_capacity(streams.len());
            let mut zs = Vec::with_capacity(streams.len());
            for (m, &kind) in streams.iter().enumerate() {
                let tau = schedules[m].map(t_pix);
                let (target, t_shape): (Tensor, Vec<usize>) = match kind {
                    StreamKind::Pix => (x_pix.clone(), vec![b, 1, 1, 1]),
                    StreamKind::Fre => {
                        let x_fre = if self.cfg.train.random_aux_latent {
                            let one = self.random_latent(0, tokens);
                            let mut vals = Vec::with_capacity(b * tokens * d);
                            for _ in 0..b {
                                vals.extend_from_slice(&one);
                            }
                            Tensor::constant(vals, &[b, tokens, d])
                        } else {
                            let lp = self.lowpass_batch(&x_pix, bank.as_ref())?;
                            match &self.model.frozen_embed {
                                Some(fe) => self.model.backbone.embed_image_with(
                                    &mut binder,
                                    &fe.w,
                                    &fe.b,
                                    &lp,
                                )?,
                                None => self.model.backbone.embed_image(&mut binder, &lp)?,
                            }
                        };
                        (x_fre, vec![b, 1, 1])
                    }
                    StreamKind::Dino => {
                        let spec = self.semantic_spec();
                        let vals = if self.cfg.train.random_aux_latent {
                            let one = self.random_latent(1, tokens);
                            let mut v = Vec::with_capacity(b * tokens * d);
                            for _ in 0..b {
                                v.extend_from_slice(&one);
                            }
                            v
                        } else {
                            let img_len = c * hw * hw;
                            let all = x_pix.values();
                            let mut v = Vec::with_capacity(b * tokens * d);
                            for (i, &label) in labels.iter().enumerate() {
                                v.extend(semantic::encode(
                                    &spec,
                                    &all[i * img_len..(i + 1) * img_len],
                                    label,
                                )?);
                            }
                            v
                        };
                        (Tensor::constant(vals, &[b, tokens, d]), vec![b, 1, 1])
                    }
                };
                let eps = Tensor::constant(noises[m].clone(), target.shape());
                let t_vals = vec![tau; b];
                let t = Tensor::constant(t_vals.clone(), &t_shape);
                let z = interpolate(&target, &eps, &t)?;
                inputs.push(StreamInput {
                    kind,
                    state: z.clone(),
                    t: t_vals,
                });
                targets.push((target, t));
                zs.push(z);
            }
            let preds = self.model.backbone.forward(&mut binder, &inputs, &labels)?;
            for m in 0..streams.len() {
                let (target, t) = &targets[m];
                let loss = xpred_loss(
                    &preds[m],
                    &zs[m],
                    target,
                    t,
                    self.cfg.train.t_clip,
                    None,
                )?;
                sums[m] += loss.item() / GRID as f64;
            }
        }

        let mut out = (None, None, 0.0);
        for (m, &kind) in streams.iter().enumerate() {
            match kind {
                StreamKind::Dino => out.0 = Some(sums[m]),
                StreamKind::Fre => out.1 = Some(sums[m]),
                StreamKind::Pix => out.2 = sums[m],
            }
        }
        Ok(out)
    }

    // ─── checkpointing ─────────────────────────────────────────────────

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        let config_text = self.cfg.to_toml()?;
        let mut params = Vec::new();
        self.model.visit_params(&mut |p| {
            params.push(SavedParam {
                name: p.name.clone(),
                frozen: p.frozen,
                shape: p.shape.clone(),
                values: p.value.clone(),
            });
        });
        let opt_state = self.optimizer.export_state(&mut self.model);
        Ok(Checkpoint {
            config_text,
            step: self.step as u64,
            rng_word_pos: self.rng.get_word_pos(),
            aux_frozen: self.model.frozen_embed.is_some(),
            opt_step: self.optimizer.step_count(),
            params,
            opt_state,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let cfg = RunConfig::from_toml(&ckpt.config_text)?;
        let mut trainer = Trainer::new(cfg)?;
        if ckpt.aux_frozen {
            trainer.freeze_aux_encoder();
        }
        let by_name: HashMap<&str, &SavedParam> =
            ckpt.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut seen: HashSet<String> = HashSet::new();
        let mut problems: Vec<String> = Vec::new();
        trainer.model.visit_params(&mut |p| {
            match by_name.get(p.name.as_str()) {
                Some(saved) if saved.shape == p.shape => {
                    p.value = saved.values.clone();
                    p.frozen = saved.frozen;
                    seen.insert(p.name.clone());
                }
                Some(saved) => problems.push(format!(
                    "{}: shape {:?} in file, {:?} in model",
                    p.name, saved.shape, p.shape
                )),
                None => problems.push(format!("{}: missing from checkpoint", p.name)),
            }
        });
        if seen.len() != ckpt.params.len() {
            for p in &ckpt.params {
                if !seen.contains(&p.name) {
                    problems.push(format!("{}: not part of this model", p.name));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        trainer
            .optimizer
            .import_state(&mut trainer.model, &ckpt.opt_state, ckpt.opt_step);
        trainer.step = ckpt.step as usize;
        trainer.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(trainer)
    }

    /// Train to completion, streaming metrics.csv / timing.csv into
    /// `out_dir` and saving a final checkpoint there.
    pub fn run(&mut self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut metrics = std::io::BufWriter::new(std::fs::File::create(
            out_dir.join("metrics.csv"),
        )?);
        let mut timing =
            std::io::BufWriter::new(std::fs::File::create(out_dir.join("timing.csv"))?);
        writeln!(metrics, "{}", METRICS_HEADER)?;
        writeln!(timing, "step,wall_ms")?;
        let eval_every = self.cfg.train.eval_every;
        while self.step < self.cfg.steps {
            let start = std::time::Instant::now();
            let mut row = self.train_step()?;
            let due = eval_every > 0
                && (self.step % eval_every == 0 || self.step == self.cfg.steps);
            if due {
                let (d, f, p) = self.heldout_eval()?;
                row.heldout_dino = d;
                row.heldout_fre = f;
                row.heldout_pix = Some(p);
            }
            writeln!(metrics, "{}", row.csv_row())?;
            writeln!(timing, "{},{}", row.step, start.elapsed().as_millis())?;
        }
        metrics.flush()?;
        timing.flush()?;
        crate::checkpoint::save(&out_dir.join("final.ckpt"), &self.to_checkpoint()?)?;
        Ok(())
    }
}

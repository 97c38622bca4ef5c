//! First-order optimizers over the `Param`/`Binder` machinery.
//!
//! State buffers are keyed by param id while running and re-keyed by name
//! for checkpoints, so resumes restore momentum exactly.

use crate::param::{Param, Visit};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Which update rule to run; hyperparameters come with the choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

enum Slot {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Optimizer instance: rule, step count, and per-param state.
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    slots: HashMap<u64, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer {
            kind,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update with learning rate `lr` to every visited param that
    /// has a gradient and is not frozen. Optionally clips the global grad
    /// norm to `clip` first.
    pub fn step(
        &mut self,
        model: &mut dyn Visit,
        grads: &HashMap<u64, Vec<f64>>,
        lr: f64,
        clip: Option<f64>,
    ) {
        let scale = match clip {
            Some(limit) => {
                // accumulate in visit order so the sum is reproducible
                let mut sq = 0.0;
                model.visit_params(&mut |p: &mut Param| {
                    if let Some(g) = grads.get(&p.id()) {
                        sq += g.iter().map(|g| g * g).sum::<f64>();
                    }
                });
                let norm = sq.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step;
        let kind = self.kind;
        let slots = &mut self.slots;
        model.visit_params(&mut |p: &mut Param| {
            if p.frozen {
                return;
            }
            let Some(g) = grads.get(&p.id()) else { return };
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    let slot = slots.entry(p.id()).or_insert_with(|| Slot::Sgd {
                        velocity: vec![0.0; p.numel()],
                    });
                    let Slot::Sgd { velocity } = slot else {
                        unreachable!("optimizer slot kind changed mid-run")
                    };
                    for i in 0..p.numel() {
                        velocity[i] = momentum * velocity[i] + scale * g[i];
                        p.value[i] -= lr * velocity[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = slots.entry(p.id()).or_insert_with(|| Slot::Adam {
                        m: vec![0.0; p.numel()],
                        v: vec![0.0; p.numel()],
                    });
                    let Slot::Adam { m, v } = slot else {
                        unreachable!("optimizer slot kind changed mid-run")
                    };
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..p.numel() {
                        let gi = scale * g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        });
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Serialize state as (param name → buffers), walking the model for the
    /// id→name mapping. Buffer order: SGD [velocity]; Adam [m, v].
    pub fn export_state(&self, model: &mut dyn Visit) -> Vec<(String, Vec<Vec<f64>>)> {
        let mut out = Vec::new();
        let slots = &self.slots;
        model.visit_params(&mut |p: &mut Param| {
            if let Some(slot) = slots.get(&p.id()) {
                let buffers = match slot {
                    Slot::Sgd { velocity } => vec![velocity.clone()],
                    Slot::Adam { m, v } => vec![m.clone(), v.clone()],
                };
                out.push((p.name.clone(), buffers));
            }
        });
        out
    }

    /// Restore state exported by `export_state` against the same model
    /// layout. Unknown names are ignored; missing ones stay zero-initialized.
    pub fn import_state(
        &mut self,
        model: &mut dyn Visit,
        state: &[(String, Vec<Vec<f64>>)],
        step: u64,
    ) {
        self.step = step;
        let by_name: HashMap<&str, &Vec<Vec<f64>>> =
            state.iter().map(|(n, b)| (n.as_str(), b)).collect();
        let kind = self.kind;
        let slots = &mut self.slots;
        model.visit_params(&mut |p: &mut Param| {
            let Some(buffers) = by_name.get(p.name.as_str()) else { return };
            let slot = match (kind, buffers.as_slice()) {
                (OptimizerKind::Sgd { .. }, [velocity]) if velocity.len() == p.numel() => {
                    Slot::Sgd {
                        velocity: velocity.clone(),
                    }
                }
                (OptimizerKind::Adam { .. }, [m, v])
                    if m.len() == p.numel() && v.len() == p.numel() =>
                {
                    Slot::Adam {
                        m: m.clone(),
                        v: v.clone(),
                    }
                }
                _ => return,
            };
            slots.insert(p.id(), slot);
        });
    }
}

//! Named learnable parameters and their per-forward tape bindings.
//!
//! A `Param` owns its values as plain `f64` storage; nothing references the
//! tape between steps. Each forward pass goes through a `Binder`, which
//! turns every touched parameter into a tape leaf exactly once (by the
//! param's unique id, so a parameter used twice shares one leaf and its
//! gradient accumulates) or into a constant when the parameter is frozen or
//! no tape is active. After backward, the binder yields a grad map keyed by
//! param id for the optimizer to consume.

use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// One learnable tensor with a stable identity and checkpoint name.
#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Param {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "param value length mismatch");
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            shape: shape.to_vec(),
            value,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Param {
        let numel = shape.iter().product();
        Param::new(name, shape, vec![0.0; numel])
    }

    pub fn full(name: impl Into<String>, shape: &[usize], fill: f64) -> Param {
        let numel = shape.iter().product();
        Param::new(name, shape, vec![fill; numel])
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Param {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let value = (0..numel).map(|_| dist.sample(rng)).collect();
        Param::new(name, shape, value)
    }

    /// Uniform(−bound, bound) init.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Param {
        let numel: usize = shape.iter().product();
        let value = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Param::new(name, shape, value)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Deep copy under a new name with a fresh id; used to freeze snapshots.
    pub fn duplicate(&self, name: impl Into<String>) -> Param {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            shape: self.shape.clone(),
            value: self.value.clone(),
            frozen: self.frozen,
        }
    }
}

/// Visitor over a model's parameters in a stable, checkpoint-defining order.
pub trait Visit {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
}

/// Per-forward binding of params to tape leaves (or constants).
pub struct Binder<'t> {
    tape: Option<&'t Tape>,
    bound: HashMap<u64, Tensor>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: Option<&'t Tape>) -> Binder<'t> {
        Binder {
            tape,
            bound: HashMap::new(),
        }
    }

    /// The tape leaf (or constant) for `p`, created on first use this pass.
    pub fn bind(&mut self, p: &Param) -> Tensor {
        if let Some(t) = self.bound.get(&p.id) {
            return t.clone();
        }
        let tensor = match self.tape {
            Some(tape) if !p.frozen => tape.leaf(p.value.clone(), &p.shape),
            _ => Tensor::constant(p.value.clone(), &p.shape),
        };
        self.bound.insert(p.id, tensor.clone());
        tensor
    }

    /// Collect accumulated leaf gradients, keyed by param id. Constants
    /// (frozen params, no-tape passes) never appear.
    pub fn take_grads(self) -> HashMap<u64, Vec<f64>> {
        let mut out = HashMap::new();
        for (id, tensor) in self.bound {
            if let Some(g) = tensor.grad() {
                out.insert(id, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ids_are_unique_and_duplicate_gets_fresh_one() {
        let a = Param::zeros("a", &[2]);
        let b = Param::zeros("b", &[2]);
        let c = a.duplicate("c");
        assert_ne!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
        assert_eq!(a.value, c.value);
    }

    #[test]
    fn binder_shares_one_leaf_per_param() {
        let tape = Tape::new();
        let p = Param::new("w", &[2], vec![3.0, 4.0]);
        let mut binder = Binder::new(Some(&tape));
        let l1 = binder.bind(&p);
        let l2 = binder.bind(&p);
        let y = l1.add(&l2).unwrap().sum_all();
        tape.backward(&y).unwrap();
        let grads = binder.take_grads();
        assert_eq!(grads[&p.id()], vec![2.0, 2.0]);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let tape = Tape::new();
        let mut p = Param::new("w", &[1], vec![5.0]);
        p.frozen = true;
        let mut binder = Binder::new(Some(&tape));
        let leaf = binder.bind(&p);
        assert!(!leaf.requires_grad());
        let live = tape.leaf(vec![2.0], &[1]);
        let y = leaf.mul(&live).unwrap().sum_all();
        tape.backward(&y).unwrap();
        assert!(binder.take_grads().is_empty());
        assert_eq!(live.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn randn_is_seeded_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = Param::randn("a", &[8], 0.02, &mut r1);
        let b = Param::randn("b", &[8], 0.02, &mut r2);
        assert_eq!(a.value, b.value);
    }
}

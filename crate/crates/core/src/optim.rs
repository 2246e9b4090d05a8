//! Trainable parameters, the parameter store, and SGD with momentum.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Gradients, NodeId, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// One trainable tensor with its same-shape momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub velocity: Vec<T>,
}

/// Ordered collection of parameters. Iteration order is registration order,
/// which keeps checkpoints and optimizer sweeps deterministic. Reads through
/// [`BoundParams::get`] are counted per parameter so tests can prove which
/// parameters a code path touches.
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    reads: Vec<AtomicU64>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            reads: Vec::new(),
        }
    }

    /// Register a parameter initialized from a zero-mean uniform distribution
    /// scaled by fan-in (all extents but the first); rank-1 parameters
    /// (biases) start at zero. The bound is sqrt(6 / fan_in), which keeps
    /// activation variance roughly constant through relu layers; anything
    /// smaller makes an 8-conv from-scratch stack vanish. The draw is seeded
    /// per name, so registration order and the presence of other parameters
    /// cannot change it.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, init_seed: u64) -> ParamId {
        let numel: usize = shape.iter().product();
        let values = if shape.len() <= 1 {
            vec![T::zero(); numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut r = rng::rng(rng::derive(init_seed, &[rng::hash_name(name)]));
            (0..numel).map(|_| T::of(r.gen_range(-bound..bound))).collect()
        };
        self.register_with(name, shape, values)
    }

    /// Register a parameter with explicit values.
    pub fn register_with(&mut self, name: &str, shape: Vec<usize>, values: Vec<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let id = self.params.len();
        let numel = values.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value: Tensor::from_vec(shape, values).expect("parameter shape/values consistent"),
            velocity: vec![T::zero(); numel],
        });
        self.by_name.insert(name.to_string(), id);
        self.reads.push(AtomicU64::new(0));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate()
    }

    /// How many times the parameter has been fetched through a binding.
    pub fn read_count(&self, id: ParamId) -> u64 {
        self.reads[id].load(Ordering::Relaxed)
    }

    pub fn reset_read_counts(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Watch every parameter on the tape once. All fetches of a parameter
    /// during the step share one leaf node, so gradients from multiple uses
    /// accumulate on it.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams<'_, T> {
        let bound = self.params.iter().map(|p| tape.watch(&p.value)).collect();
        BoundParams { store: self, bound }
    }

    /// Binding without a tape; used by inference.
    pub fn bind_frozen(&self) -> BoundParams<'_, T> {
        let bound = self.params.iter().map(|p| p.value.detached()).collect();
        BoundParams { store: self, bound }
    }

    /// One SGD step: `v <- momentum*v + (grad + weight_decay*w);
    /// w <- w - lr*v`, applied to every parameter with a gradient.
    pub fn sgd_step(
        &mut self,
        node_ids: &[Option<NodeId>],
        grads: &Gradients<T>,
        lr: T,
        momentum: T,
        weight_decay: T,
    ) -> Result<()> {
        if lr <= T::zero() {
            return Err(Error::invalid(format!("sgd: lr must be positive, got {lr}")));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::invalid(format!("sgd: momentum must be in [0, 1), got {momentum}")));
        }
        if weight_decay < T::zero() {
            return Err(Error::invalid(format!(
                "sgd: weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        for (pid, nid) in node_ids.iter().enumerate() {
            let Some(nid) = nid else { continue };
            let Some(g) = grads.by_node(*nid) else { continue };
            let param = &mut self.params[pid];
            if g.len() != param.velocity.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!(
                        "gradient has {} values, parameter {:?} has {}",
                        g.len(),
                        param.name,
                        param.velocity.len()
                    ),
                ));
            }
            let w = param.value.data_mut();
            for i in 0..g.len() {
                let v = momentum * param.velocity[i] + (g[i] + weight_decay * w[i]);
                param.velocity[i] = v;
                w[i] = w[i] - lr * v;
            }
        }
        Ok(())
    }
}

/// Per-step view of a store: parameters watched on the step's tape (or
/// detached for inference). Fetches are counted on the store.
pub struct BoundParams<'a, T> {
    store: &'a ParamStore<T>,
    bound: Vec<Tensor<T>>,
}

impl<T: Scalar> BoundParams<'_, T> {
    pub fn get(&self, id: ParamId) -> Tensor<T> {
        self.store.reads[id].fetch_add(1, Ordering::Relaxed);
        self.bound[id].clone()
    }

    /// Leaf node per parameter, aligned with param ids.
    pub fn node_ids(&self) -> Vec<Option<NodeId>> {
        self.bound.iter().map(|t| t.node()).collect()
    }
}

/// Global-norm gradient clipping over the given parameter leaves. Returns the
/// pre-clip norm; gradients are rescaled in place when it exceeds `max_norm`.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut Gradients<T>,
    node_ids: &[Option<NodeId>],
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for nid in node_ids.iter().flatten() {
        if let Some(g) = grads.by_node(*nid) {
            for v in g {
                let x = v.as_f64();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = T::of(max_norm / norm);
        for nid in node_ids.iter().flatten() {
            if let Some(g) = grads.by_node_mut(*nid) {
                for v in g.iter_mut() {
                    *v = *v * factor;
                }
            }
        }
    }
    norm
}

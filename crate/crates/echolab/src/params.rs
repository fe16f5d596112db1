//! Named parameter sets and their binding onto compute tapes.
//!
//! Parameters live outside any tape. Each forward pass binds them as leaves
//! on a fresh per-sample tape; after backward, leaf gradients are harvested
//! into a [`GradSet`] and merged into the owning [`Params`] in entry order,
//! which keeps multi-worker batches bit-deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

/// Ordered, name-addressable collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Params<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param `{name}`: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(!self.index.contains_key(name), "param `{name}` added twice");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, grad: None });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &ParamEntry<F> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param `{name}`"));
        &self.entries[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry<F> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param `{name}`"));
        &mut self.entries[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Clones the entries whose names start with `prefix` into a new set.
    pub fn clone_subset(&self, prefix: &str) -> Params<F> {
        let mut out = Params::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                out.add(&e.name, e.shape.clone(), e.data.clone());
            }
        }
        out
    }

    /// Appends all entries of `other`, keeping names unique.
    pub fn extend(&mut self, other: Params<F>) {
        for e in other.entries {
            self.add(&e.name, e.shape, e.data);
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// True when any entry has a populated gradient buffer.
    pub fn any_grad(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    /// Binds every entry as a leaf on `tape`. Trainable bindings receive
    /// gradients in backward; frozen bindings stop gradient flow exactly.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), e.shape.clone(), trainable))
            .collect();
        let index = self.index.clone();
        Binding { ids, index }
    }

    /// Adds `grads` (scaled by `scale`) into this set's gradient buffers.
    pub fn accumulate(&mut self, grads: &GradSet<F>, scale: F) {
        assert_eq!(grads.0.len(), self.entries.len(), "grad set does not match param set");
        for (e, g) in self.entries.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                let buf = e.grad.get_or_insert_with(|| vec![F::zero(); e.data.len()]);
                for (dv, &gv) in buf.iter_mut().zip(g) {
                    *dv = scale.mul_add(gv, *dv);
                }
            }
        }
    }

    /// Checksum over parameter bytes; used to assert frozen backbones.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::rng::fnv1a64(b"params");
        for e in &self.entries {
            h ^= crate::rng::fnv1a64(e.name.as_bytes());
            for v in &e.data {
                let bits = v.to_f64().unwrap().to_bits();
                for b in bits.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Converts precision (used to serialize f64 verification runs as f32).
    pub fn convert<G: Scalar>(&self) -> Params<G> {
        let mut out = Params::new();
        for e in &self.entries {
            let data = e.data.iter().map(|&v| lit::<G>(v.to_f64().unwrap())).collect();
            out.add(&e.name, e.shape.clone(), data);
        }
        out
    }
}

/// Mapping from parameter names to leaf ids on one tape.
pub struct Binding {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn id(&self, name: &str) -> TensorId {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown bound param `{name}`"));
        self.ids[i]
    }

    /// Collects leaf gradients from `tape` in entry order.
    pub fn harvest<F: Scalar>(&self, tape: &Tape<F>) -> GradSet<F> {
        GradSet(self.ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect())
    }
}

/// Per-entry gradient buffers aligned with a `Params`' entry order.
pub struct GradSet<F>(Vec<Option<Vec<F>>>);

impl<F: Scalar> GradSet<F> {
    pub fn merge(&mut self, other: &GradSet<F>) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, &y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// Exponential moving average: `target <- m*target + (1-m)*source`, matched
/// by name. Every target entry must exist in `source` with the same shape.
pub fn ema_update<F: Scalar>(target: &mut Params<F>, source: &Params<F>, momentum: F) -> Result<()> {
    let one_m = F::one() - momentum;
    for e in target.entries.iter_mut() {
        let i = *source
            .index
            .get(&e.name)
            .ok_or_else(|| Error::invalid(format!("ema_update: source lacks param `{}`", e.name)))?;
        let src = &source.entries[i];
        if src.shape != e.shape {
            return Err(Error::ShapeMismatch {
                name: e.name.clone(),
                left: e.shape.clone(),
                right: src.shape.clone(),
            });
        }
        for (t, &s) in e.data.iter_mut().zip(&src.data) {
            *t = momentum.mul_add(*t, one_m * s);
        }
    }
    Ok(())
}

/// Truncated-normal init (std `std`, resampled beyond 2 std).
pub fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller; ChaCha gives platform-stable uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            out.push(lit::<F>(z * std));
        }
    }
    out
}

pub fn zeros<F: Scalar>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

pub fn ones<F: Scalar>(n: usize) -> Vec<F> {
    vec![F::one(); n]
}

//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every tensor of a model, in registration order. Names are hierarchical
/// (`vision.adapter0.w_down`) and unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: ParamTensor) -> Result<ParamId> {
        if self.by_name.contains_key(&p.name) {
            return Err(Error::config(format!("duplicate parameter name {}", p.name)));
        }
        self.by_name.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites data of parameters whose names match, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, model expects {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.data.clone_from(&src.data);
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Seeded Gaussian initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `n` draws from a zero-mean Gaussian with the given variance.
    pub fn gaussian(&mut self, n: usize, variance: f64) -> Vec<f64> {
        let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
        (0..n).map(|_| normal.sample(&mut self.rng)).collect()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], variance: f64, trainable: bool) -> ParamTensor {
        let n = shape.iter().product();
        ParamTensor::new(name, shape, self.gaussian(n, variance), trainable).expect("shape matches draw count")
    }
}

/// Lazily places store tensors on a tape. Trainable tensors become
/// gradient-tracking leaves when `track` is set; everything else enters as a
/// constant.
pub struct Binder<'a> {
    store: &'a ParamStore,
    tape: &'a Tape,
    track: bool,
    vars: RefCell<Vec<Option<Var>>>,
    overrides: Vec<(ParamId, usize, f64)>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, tape: &'a Tape, track: bool) -> Self {
        Binder {
            store,
            tape,
            track,
            vars: RefCell::new(vec![None; store.len()]),
            overrides: Vec::new(),
        }
    }

    /// Binds element `index` of `id` as `value` instead of the stored one,
    /// without copying the store.
    pub fn with_override(mut self, id: ParamId, index: usize, value: f64) -> Self {
        self.overrides.push((id, index, value));
        self
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let mut data = p.data.clone();
        for &(oid, i, value) in &self.overrides {
            if oid == id {
                data[i] = value;
            }
        }
        let v = self.tape.leaf(data, &p.shape, self.track && p.trainable);
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable tensor. Tensors that never reached
    /// the loss get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = &self.store.params[i];
                if !(self.track && p.trainable) {
                    return None;
                }
                let g = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
                Some((ParamId(i), g))
            })
            .collect()
    }
}

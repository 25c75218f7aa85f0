//! Named parameter storage and the per-step graph context that binds stored
//! parameters onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{relative_error, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters in declaration order. The order is part of the checkpoint
/// format, so models must register parameters deterministically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].trainable).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.params[id.0].trainable).collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    /// SHA-256 over names, shapes and raw bytes of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces all values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match model ({})",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// A tape plus lazily-bound parameter leaves for one forward/backward pass.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grad_mask: Vec<bool>,
}

impl<'a> Ctx<'a> {
    /// Gradients for trainable parameters only.
    pub fn train(store: &'a ParamStore) -> Self {
        let mask = store.params.iter().map(|p| p.trainable).collect();
        Self::with_mask(store, mask)
    }

    /// No gradients at all.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_mask(store, vec![false; store.len()])
    }

    /// Gradients for exactly the listed parameters, trainable or not.
    pub fn with_grads_for(store: &'a ParamStore, ids: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in ids {
            mask[id.0] = true;
        }
        Self::with_mask(store, mask)
    }

    fn with_mask(store: &'a ParamStore, grad_mask: Vec<bool>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            grad_mask,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a stored parameter, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.set_requires_grad(self.grad_mask[id.0]);
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).item()
    }

    /// Gradient of `id` after `backward`, zero-filled if the parameter was
    /// bound but not reached, `None` if it was never bound.
    pub fn grad(&self, id: ParamId) -> Option<Vec<f64>> {
        let v = self.bound[id.0]?;
        Some(
            self.tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.tape.value(v).len()]),
        )
    }
}

/// Finite-difference check of `f`'s gradient with respect to the listed
/// stored parameters. Returns the largest relative error (see
/// [`relative_error`]).
pub fn grad_check_params<F>(store: &ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut ctx = Ctx::with_grads_for(store, ids);
        let loss = f(&mut ctx)?;
        ctx.tape.backward(loss)?;
        ids.iter()
            .map(|&id| ctx.grad(id).unwrap_or_else(|| vec![0.0; store.get(id).len()]))
            .collect()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::eval(s);
        let loss = f(&mut ctx)?;
        Ok(ctx.scalar(loss))
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (j, &g) in grads.iter().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(g, (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite uniform bound");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches generated data")
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches generated data")
}

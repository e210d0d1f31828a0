//! Named parameter storage, tape binding, and first-order optimizers.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Ordered name -> tensor map holding all trainable parameters of a model.
/// BTreeMap keeps iteration (and therefore update order) deterministic.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Sum a list of gradient maps entry-wise, in index order, so the result
    /// does not depend on how work was split across threads.
    pub fn sum_grads(mut maps: Vec<GradMap>) -> GradMap {
        let mut total = GradMap::new();
        for map in maps.drain(..) {
            for (name, g) in map {
                match total.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                            *a += b;
                        }
                    }
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        total
    }
}

/// Places parameters from a store onto a tape as leaves, remembering which
/// leaf belongs to which name so gradients can be collected afterwards.
pub struct Binding<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'t> Binding<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Binding {
            tape,
            store,
            vars: BTreeMap::new(),
        }
    }

    /// Leaf var for the named parameter, created once per tape.
    pub fn bind(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(t.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient map covering every bound parameter; parameters the loss never
    /// touched get explicit zeros.
    pub fn grad_map(&self, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in &self.vars {
            let shape = self
                .store
                .get(name)
                .expect("bound from store")
                .shape
                .clone();
            out.insert(name.clone(), grads.of(*var, &shape));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Moment {
    m: Tensor,
    v: Tensor,
}

/// Plain SGD or Adam. State persists between calls, keyed by parameter name.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        state: BTreeMap<String, Moment>,
    },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient entry. Parameters
    /// without an entry are left untouched (their gradient was zero).
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NanGradient(name.clone()));
            }
            if !params.contains(name) {
                return Err(Error::invalid(format!(
                    "optimizer: gradient for unknown parameter `{name}`"
                )));
            }
        }
        match self {
            Optimizer::Sgd => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    for (p, &g) in p.data.iter_mut().zip(g.data.iter()) {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                state,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    let slot = state.entry(name.clone()).or_insert_with(|| Moment {
                        m: Tensor::zeros(&p.shape),
                        v: Tensor::zeros(&p.shape),
                    });
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        slot.m.data[i] = *beta1 * slot.m.data[i] + (1.0 - *beta1) * gi;
                        slot.v.data[i] = *beta2 * slot.v.data[i] + (1.0 - *beta2) * gi * gi;
                        let mhat = slot.m.data[i] / bc1;
                        let vhat = slot.v.data[i] / bc2;
                        p.data[i] -= lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_on_quadratic() {
        // f(x) = x^2 at x=1, grad 2, lr 0.1 -> 0.8
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut grads = GradMap::new();
        grads.insert("x".into(), Tensor::scalar(2.0));
        let mut opt = Optimizer::sgd();
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.get("x").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.5));
        let mut grads = GradMap::new();
        grads.insert("x".into(), Tensor::scalar(0.0));
        let mut opt = Optimizer::adam();
        for _ in 0..5 {
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        assert_eq!(store.get("x").unwrap().item(), 3.5);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // 200 steps on f(x) = x^2 from x=1 reaches |x| < 1e-3.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut opt = Optimizer::adam();
        for _ in 0..200 {
            let x = store.get("x").unwrap().item();
            let mut grads = GradMap::new();
            grads.insert("x".into(), Tensor::scalar(2.0 * x));
            opt.step(&mut store, &grads, 0.05).unwrap();
        }
        let x = store.get("x").unwrap().item();
        assert!(x.abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("w.bad", Tensor::scalar(1.0));
        let mut grads = GradMap::new();
        grads.insert("w.bad".into(), Tensor::scalar(f64::NAN));
        let mut opt = Optimizer::adam();
        let err = opt.step(&mut store, &grads, 0.1).unwrap_err().to_string();
        assert!(err.contains("w.bad"), "{err}");
    }
}

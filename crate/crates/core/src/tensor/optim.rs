use std::collections::HashMap;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{DuplexError, Result};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Insertion-ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        let grad = Matrix::zeros(value.rows(), value.cols());
        match self.index.get(&name) {
            Some(&i) => self.params[i] = Param { name, value, grad },
            None => {
                self.index.insert(name.clone(), self.params.len());
                self.params.push(Param { name, value, grad });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds the tape's gradients into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| DuplexError::config(format!("missing parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Next step with an internally tracked counter.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let t = self.t + 1;
        self.step_at(params, t)
    }

    /// One update at explicit step `t` (1-based), then zeroes the gradients.
    pub fn step_at(&mut self, params: &mut ParamStore, t: u64) -> Result<()> {
        if t == 0 {
            return Err(DuplexError::config("Adam step counter must be >= 1"));
        }
        if self.m.len() != params.len() {
            self.m = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
            self.v = self.m.clone();
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for ((p, m), v) in params.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        self.t = t;
        params.zero_grads();
        Ok(())
    }
}

use std::collections::HashMap;

use indexmap::IndexMap;

use super::{invalid, Graph, Result, Tensor, TensorError, Var};

/// Named trainable tensors in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return invalid("ParamStore::insert", format!("duplicate parameter `{name}`"));
        }
        self.params.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `g` as a gradient-tracking leaf.
    pub fn attach(&self, g: &mut Graph) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
            .collect()
    }

    /// Adds the leaf gradients from a finished backward pass into the
    /// parameters' own buffers. Parameters that received no gradient get
    /// an explicit zero buffer.
    pub fn accumulate_from(&mut self, g: &Graph, vars: &IndexMap<String, Var>) {
        for (name, t) in self.params.iter_mut() {
            let Some(&v) = vars.get(name) else { continue };
            match g.grad(v) {
                Some(gr) => t.accumulate_grad(gr),
                None => t.accumulate_grad(&vec![0.0; t.len()]),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for t in self.params.values_mut() {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        norm
    }

    fn grad_of<'a>(name: &str, t: &'a Tensor) -> Result<&'a [f64]> {
        t.grad()
            .ok_or_else(|| TensorError::MissingGradient(name.to_string()))
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return invalid("Sgd::new", format!("lr={lr} momentum={momentum}"));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        })
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.params.iter() {
            ParamStore::grad_of(name, t)?;
        }
        for (name, t) in params.params.iter_mut() {
            let g = t.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in t.data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
            t.grad = Some(vec![0.0; g.len()]);
        }
        Ok(())
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let ok = lr >= 0.0
            && (0.0..1.0).contains(&beta1)
            && (0.0..1.0).contains(&beta2)
            && eps > 0.0;
        if !ok {
            return invalid(
                "Adam::new",
                format!("lr={lr} beta1={beta1} beta2={beta2} eps={eps}"),
            );
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        })
    }

    /// `lr` with the usual defaults `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn with_lr(lr: f64) -> Result<Self> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.params.iter() {
            ParamStore::grad_of(name, t)?;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, t) in params.params.iter_mut() {
            let g = t.grad.take().expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.grad = Some(vec![0.0; g.len()]);
        }
        Ok(())
    }
}

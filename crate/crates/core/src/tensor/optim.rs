use std::collections::HashMap;

use super::{axpy, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor together with its ADAM moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter {name}")));
        }
        tensor.requires_grad = true;
        let n = tensor.numel();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            tensor,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds externally computed gradients into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                match &mut p.tensor.grad {
                    Some(buf) => axpy(1.0, g, buf),
                    None => p.tensor.grad = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }
}

/// Per-parameter gradient buffers produced by one tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads(Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn new(n: usize) -> Self {
        ParamGrads(vec![None; n])
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        if self.0.len() <= id.0 {
            self.0.resize(id.0 + 1, None);
        }
        match &mut self.0[id.0] {
            Some(buf) => axpy(1.0, g, buf),
            slot => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.0.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// ADAM hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }
}

/// Applies one bias-corrected ADAM update to every parameter holding a
/// gradient, then clears all gradients.
pub fn adam_step(store: &mut ParamStore, opt: &Adam) {
    for p in store.iter_mut() {
        let Some(g) = p.tensor.grad.take() else { continue };
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for i in 0..g.len() {
            p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
            p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = p.m[i] / c1;
            let vhat = p.v[i] / c2;
            p.tensor.data[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_matches_hand_formula() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.5)).unwrap();
        let g = 0.3;
        store.get_mut(id).tensor.grad = Some(vec![g]);
        let opt = Adam::with_lr(1e-2);
        adam_step(&mut store, &opt);

        // m = 0.1 g, v = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2.
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = 0.5 - 1e-2 * mhat / (vhat.sqrt() + 1e-8);
        let p = store.get(id);
        assert!((p.tensor.data[0] - expected).abs() < 1e-15);
        // Step magnitude is ~lr regardless of the gradient scale.
        assert!(((0.5 - p.tensor.data[0]) - 1e-2).abs() < 1e-9);
        assert!(p.tensor.grad.is_none());
        assert_eq!(p.step, 1);
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        adam_step(&mut store, &Adam::default());
        assert_eq!(store.get(id).tensor.data, vec![1.0, 2.0]);
        assert_eq!(store.get(id).step, 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(1.0)).is_err());
    }
}

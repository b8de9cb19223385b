use std::collections::BTreeMap;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Named parameters with a per-entry trainable flag. Ordered by name so that
/// iteration, serialization and optimizer updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Vars for every parameter of a store, recorded in one graph.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, tensor);
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(Tensor::requires_grad)
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                *t = std::mem::replace(t, Tensor::scalar(0.0)).with_requires_grad(flag);
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable("", false);
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.set_grad(None).expect("clearing a gradient cannot fail");
        }
    }

    /// Record every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t)))
                .collect(),
        }
    }

    /// Copy gradients from `g` into trainable parameters. Trainable parameters
    /// the loss never reached receive an all-zero gradient.
    pub fn pull_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad = bound
                .try_get(name)
                .and_then(|v| g.grad(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(Some(grad))?;
        }
        Ok(())
    }

    /// Accumulate gradients into already-populated grads (used for mini-batches).
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let gr = bound.try_get(name).and_then(|v| g.grad(v));
            let n = t.numel();
            match t.data_and_grad_mut().1 {
                Some(acc) => {
                    if let Some(gr) = gr {
                        acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                None => {
                    let fresh = gr.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
                    t.set_grad(Some(fresh))?;
                }
            }
        }
        Ok(())
    }

    /// Little-endian bytes of every parameter, in name order. Used for
    /// byte-level immutability checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.params {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Graph, Scalar, Tensor, Var};

/// Named parameter tensors in insertion order. Names are dotted paths whose
/// first segment is the parameter group (`"mlp.fc1.w"` belongs to `"mlp"`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Adds a tensor and returns its slot. Panics on duplicate names; those
    /// are programming errors in model construction.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn at(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn at_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self.names.iter().map(|n| group_of(n).to_string()).collect();
        out.dedup();
        out.sort();
        out.dedup();
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf. Tensors for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| g.leaf(t.clone(), trainable(n)))
            .collect()
    }

    /// Collects leaf gradients in slot order after a backward pass.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
        vars.iter().map(|&v| g.grad(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Appends every tensor of `other` under its own name.
    pub fn merge(&mut self, other: &ParamSet<T>) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    /// The tensors of one parameter group, names unchanged.
    pub fn group(&self, group: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if group_of(n) == group {
                out.insert(n, t.clone());
            }
        }
        out
    }
}

/// Parameters bound into a graph, looked up by name.
pub struct Bound<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    pub fn new(
        g: &mut Graph<T>,
        params: &'p ParamSet<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = params.bind(g, trainable);
        Bound { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let slot = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// AdamW with decoupled weight decay, bias correction and per-group
/// learning rates. Frozen groups are skipped entirely, state included.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    group_lr: BTreeMap<String, f64>,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            group_lr: BTreeMap::new(),
            state: BTreeMap::new(),
        }
    }

    pub fn with_group_lr(mut self, group: &str, lr: f64) -> Self {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    pub fn lr_for(&self, group: &str) -> f64 {
        self.group_lr.get(group).copied().unwrap_or(self.config.lr)
    }

    pub fn state(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// One update. `grads[i]` belongs to slot `i`; a missing gradient counts
    /// as zero for trainable slots.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        frozen: impl Fn(&str) -> bool,
    ) {
        let c = self.config;
        for slot in 0..params.len() {
            let name = params.name(slot).to_string();
            let group = group_of(&name);
            if frozen(group) {
                continue;
            }
            let lr = self.lr_for(group);
            let tensor = params.at_mut(slot);
            let n = tensor.numel();
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let grad = grads.get(slot).and_then(|g| g.as_ref());
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64c());
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let theta = p.to_f64c();
                let next = theta - lr * c.weight_decay * theta - lr * mhat / (vhat.sqrt() + c.eps);
                *p = T::lit(next);
            }
        }
    }
}

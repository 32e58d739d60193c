use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Lazily places parameters on a graph, once each, and collects their
/// gradients after the backward pass.
pub struct Binder<'g, 'p> {
    graph: &'g Graph,
    store: &'p ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: bool,
}

impl<'g, 'p> Binder<'g, 'p> {
    pub fn new(graph: &'g Graph, store: &'p ParamStore, trainable: bool) -> Self {
        Binder {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[i] {
            return Ok(v);
        }
        let value = self.store.values[i].clone();
        let v = if self.trainable {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        vars[i] = Some(v);
        Ok(v)
    }

    /// Gradient per stored parameter; `None` for parameters this graph never touched.
    pub fn gradients(&self) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| v.grad()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the last two axes.
    Xavier,
    Normal(f64),
    Constant(f64),
}

/// 64-bit FNV-1a, used to give every parameter its own random stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Initializes a parameter from `(seed, name)` alone, so adding or removing
/// other parameters never changes its value.
pub fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Constant(c) => vec![c; n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [.., a, b] => (*a, *b),
                [a] => (*a, *a),
                [] => (1, 1),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let a = init_tensor(7, "enc.1.attn.q.0", &[4, 2], Init::Xavier);
        let b = init_tensor(7, "enc.1.attn.q.0", &[4, 2], Init::Xavier);
        let c = init_tensor(8, "enc.1.attn.q.0", &[4, 2], Init::Xavier);
        let d = init_tensor(7, "enc.1.attn.k.0", &[4, 2], Init::Xavier);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn binder_reuses_one_leaf_per_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2])).unwrap();
        store.insert("unused", Tensor::ones(&[2])).unwrap();
        assert!(store.insert("w", Tensor::ones(&[1])).is_err());
        let g = Graph::new();
        let b = Binder::new(&g, &store, true);
        let w1 = b.param("w").unwrap();
        let w2 = b.param("w").unwrap();
        let loss = w1.mul(w2).unwrap().sum_all().unwrap();
        g.backward(loss).unwrap();
        let grads = b.gradients();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0, 2.0]);
        assert!(grads[1].is_none());
        assert!(b.param("missing").is_err());
    }
}

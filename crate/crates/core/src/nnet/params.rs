use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Classical,
    /// Circuit rotation angles, in radians.
    Quantum,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Classical => "classical",
            ParamKind::Quantum => "quantum",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameter set. Iteration order is the lexicographic path order,
/// which is also the checkpoint payload order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Param>,
}

/// Per-path gradients, same keys as the [`ModelParams`] they came from.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, kind: ParamKind, value: Tensor) {
        self.map.insert(path.into(), Param { kind, value });
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.map
            .get(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.map
            .values()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|p| p.value.all_finite())
    }

    /// Adds a weight tensor drawn from a normal with `std`, truncated at 2σ.
    pub fn init_truncated_normal<R: Rng + ?Sized>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.insert(path, ParamKind::Classical, Tensor::new(shape, data).expect("sized"));
    }

    pub fn init_const(&mut self, path: impl Into<String>, shape: &[usize], v: f64) {
        self.insert(path, ParamKind::Classical, Tensor::full(shape, v));
    }
}

/// Lazily places parameters on a graph as leaves, once per path.
pub struct Binder<'a> {
    params: &'a ModelParams,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, path: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(path) {
            return Ok(*v);
        }
        let p = self.params.get(path)?;
        let v = g.param(p.value.clone());
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter of the set; parameters that were never
    /// bound, or received no gradient, get zeros.
    pub fn collect(&self, grads: &Gradients) -> ParamGrads {
        self.params
            .iter()
            .map(|(path, p)| {
                let g = self
                    .vars
                    .get(path)
                    .and_then(|v| grads.get(*v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()]);
                (path.clone(), g)
            })
            .collect()
    }
}

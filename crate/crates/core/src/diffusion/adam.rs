use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nnet::{ModelParams, ParamGrads, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.99,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        for (name, b) in [("train.adam_beta1", self.beta1), ("train.adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("{b} is outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates keyed by parameter path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

const STEP_KEY: &str = "adam.t";

impl AdamState {
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(STEP_KEY.to_string(), Tensor::scalar(self.t as f64));
        for (prefix, map) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (k, v) in map {
                out.insert(format!("{prefix}{k}"), Tensor::new(&[v.len()], v.clone()).expect("1-d"));
            }
        }
        out
    }

    pub fn from_tensors(state: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut s = AdamState::default();
        for (k, t) in state {
            if k == STEP_KEY {
                let v = t.data().first().copied().unwrap_or(-1.0);
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::invalid(format!("bad optimizer step count {v}")));
                }
                s.t = v as u64;
            } else if let Some(p) = k.strip_prefix("adam.m.") {
                s.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = k.strip_prefix("adam.v.") {
                s.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(s)
    }
}

/// One bias-corrected Adam update over every parameter, classical and
/// quantum alike. Nothing is written if any updated value is non-finite.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let mut staged = Vec::with_capacity(params.len());
    for (path, p) in params.iter() {
        let g = grads
            .get(path)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{path}`")))?;
        if g.len() != p.value.len() {
            return Err(Error::shape("adam_step", format!("`{path}`: {} grads for {} values", g.len(), p.value.len())));
        }
        let mut m = state.m.get(path).cloned().unwrap_or_else(|| vec![0.0; g.len()]);
        let mut v = state.v.get(path).cloned().unwrap_or_else(|| vec![0.0; g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(Error::shape("adam_step", format!("optimizer state for `{path}` has the wrong size")));
        }
        let mut next = p.value.data().to_vec();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            next[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            if !next[i].is_finite() {
                return Err(Error::Numerical(format!("non-finite update for `{path}`[{i}]")));
            }
        }
        staged.push((path.clone(), next, m, v));
    }
    for (path, next, m, v) in staged {
        params.get_mut(&path)?.value.data_mut().copy_from_slice(&next);
        state.m.insert(path.clone(), m);
        state.v.insert(path, v);
    }
    state.t = t;
    Ok(())
}

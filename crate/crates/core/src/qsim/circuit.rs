use std::f64::consts::{FRAC_PI_2, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ansatz::{build_ansatz, AnsatzGate, AnsatzSpec};
use super::plan::{Plan, PlanState};
use super::state::{angle_encode, Gate, Statevector};
use crate::error::{Error, Result};

/// How gradients of circuit outputs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradMethod {
    /// Reverse sweep over the gate list (one forward and one backward pass).
    #[default]
    #[serde(rename = "adjoint")]
    Adjoint,
    /// Shifted-circuit evaluations, two or four per angle.
    #[serde(rename = "parameter_shift")]
    ParameterShift,
}

/// A built ansatz ready for repeated evaluation: angle encoding, the gate
/// list, then Pauli-Z readout on every qubit.
#[derive(Debug, Clone)]
pub struct Circuit {
    spec: AnsatzSpec,
    gates: Vec<AnsatzGate>,
    plan: Plan,
}

/// Jacobian rows indexed by output qubit.
pub type Jacobian = Vec<Vec<f64>>;

impl Circuit {
    pub fn new(spec: AnsatzSpec) -> Result<Self> {
        let gates = build_ansatz(&spec)?;
        let plan = Plan::new(spec.n_qubits, &gates);
        Ok(Self { spec, gates, plan })
    }

    pub fn spec(&self) -> &AnsatzSpec {
        &self.spec
    }

    pub fn gates(&self) -> &[AnsatzGate] {
        &self.gates
    }

    pub fn n_qubits(&self) -> usize {
        self.spec.n_qubits
    }

    pub fn parameter_count(&self) -> usize {
        self.gates.len()
    }

    pub fn dim(&self) -> usize {
        1 << self.spec.n_qubits
    }

    pub fn check_inputs(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::shape(
                "run_circuit",
                format!(
                    "{} ansatz on {} qubits x {} layers has {} angles, got {}",
                    self.spec.family,
                    self.spec.n_qubits,
                    self.spec.n_layers,
                    self.parameter_count(),
                    params.len()
                ),
            ));
        }
        if x.len() != self.n_qubits() {
            return Err(Error::shape(
                "angle_encode",
                format!("expected {} inputs, got {}", self.n_qubits(), x.len()),
            ));
        }
        if let Some(bad) = params.iter().chain(x).find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite circuit input {bad}")));
        }
        Ok(())
    }

    /// Final statevector for inputs `x` (used directly as Rx angles), built
    /// gate by gate on the full register.
    pub fn final_state(&self, params: &[f64], x: &[f64]) -> Result<Statevector> {
        self.check_inputs(params, x)?;
        let mut state = angle_encode(x)?;
        for g in &self.gates {
            let targets = match g.control {
                Some(c) => vec![c, g.target],
                None => vec![g.target],
            };
            state.apply(&Gate::rotation(g.kind, &targets, params[g.slot]))?;
        }
        Ok(state)
    }

    /// Per-qubit `⟨Z⟩` after encoding `x` and applying the ansatz.
    pub fn run(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(params, x)?;
        Ok(self.run_unchecked(params, x))
    }

    /// Unchecked forward pass; `out` receives `⟨Z_q⟩` per qubit.
    pub(crate) fn forward_with(&self, params: &[f64], x: &[f64], st: &mut PlanState, out: &mut [f64]) {
        self.plan.forward(params, x, st);
        self.plan.readout(st, out);
    }

    /// Unchecked adjoint pass: re-runs the forward pass and accumulates
    /// `dL/dθ` and `dL/dx` for `L = Σ_q cot_q ⟨Z_q⟩`.
    pub(crate) fn adjoint_with(
        &self,
        params: &[f64],
        x: &[f64],
        cot: &[f64],
        st: &mut PlanState,
        gp: &mut [f64],
        gx: &mut [f64],
    ) {
        self.plan.forward(params, x, st);
        self.plan.adjoint(params, cot, st, gp, gx);
    }

    /// Vector-Jacobian product of the readout: returns `(dL/dθ, dL/dx)` for
    /// `L = Σ_i cotangent_i ⟨Z_i⟩`.
    pub fn vjp(
        &self,
        method: GradMethod,
        params: &[f64],
        x: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(params, x)?;
        if cotangent.len() != self.n_qubits() {
            return Err(Error::shape(
                "circuit vjp",
                format!("cotangent has {} entries, expected {}", cotangent.len(), self.n_qubits()),
            ));
        }
        let mut gp = vec![0.0; self.parameter_count()];
        let mut gx = vec![0.0; self.n_qubits()];
        match method {
            GradMethod::Adjoint => {
                let mut st = PlanState::default();
                self.adjoint_with(params, x, cotangent, &mut st, &mut gp, &mut gx);
            }
            GradMethod::ParameterShift => {
                let jp = self.parameter_shift_jacobian(params, x)?;
                let jx = self.parameter_shift_input_jacobian(params, x)?;
                for (i, &c) in cotangent.iter().enumerate() {
                    for (g, j) in gp.iter_mut().zip(&jp[i]) {
                        *g += c * j;
                    }
                    for (g, j) in gx.iter_mut().zip(&jx[i]) {
                        *g += c * j;
                    }
                }
            }
        }
        Ok((gp, gx))
    }

/// Exact `∂⟨Z_i⟩/∂θ_k` by the parameter-shift rule.
    ///
    /// Single-qubit rotations use `½[f(θ+π/2) − f(θ−π/2)]`. Controlled
    /// rotations have a three-level generator spectrum `{0, ±½}`, for which the
    /// two-term rule is biased; they use the four-term rule with shifts
    /// `π/2, 3π/2` and weights `(√2 ± 1)/(4√2)`.
    pub fn parameter_shift_jacobian(&self, params: &[f64], x: &[f64]) -> Result<Jacobian> {
        self.check_inputs(params, x)?;
        let columns: Vec<Vec<f64>> = (0..self.parameter_count())
            .into_par_iter()
            .map(|k| {
                let mut shifted = params.to_vec();
                let mut eval = |delta: f64| {
                    shifted[k] = params[k] + delta;
                    self.run_unchecked(&shifted, x)
                };
                if self.gates[k].kind.is_controlled() {
                    four_term(&mut eval)
                } else {
                    two_term(&mut eval)
                }
            })
            .collect();
        Ok(transpose(&columns, self.n_qubits()))
    }

    /// Exact `∂⟨Z_i⟩/∂x_j` with respect to the encoding angles, by the
    /// two-term shift rule on each encoding Rx.
    pub fn parameter_shift_input_jacobian(&self, params: &[f64], x: &[f64]) -> Result<Jacobian> {
        self.check_inputs(params, x)?;
        let columns: Vec<Vec<f64>> = (0..x.len())
            .into_par_iter()
            .map(|j| {
                let mut shifted = x.to_vec();
                two_term(&mut |delta: f64| {
                    shifted[j] = x[j] + delta;
                    self.run_unchecked(params, &shifted)
                })
            })
            .collect();
        Ok(transpose(&columns, self.n_qubits()))
    }

    fn run_unchecked(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_qubits()];
        self.forward_with(params, x, &mut PlanState::default(), &mut out);
        out
    }
}

fn two_term(eval: &mut dyn FnMut(f64) -> Vec<f64>) -> Vec<f64> {
    let plus = eval(FRAC_PI_2);
    let minus = eval(-FRAC_PI_2);
    plus.iter().zip(&minus).map(|(p, m)| 0.5 * (p - m)).collect()
}

fn four_term(eval: &mut dyn FnMut(f64) -> Vec<f64>) -> Vec<f64> {
    let c_near = (SQRT_2 + 1.0) / (4.0 * SQRT_2);
    let c_far = (SQRT_2 - 1.0) / (4.0 * SQRT_2);
    let p1 = eval(FRAC_PI_2);
    let m1 = eval(-FRAC_PI_2);
    let p3 = eval(3.0 * FRAC_PI_2);
    let m3 = eval(-3.0 * FRAC_PI_2);
    (0..p1.len())
        .map(|i| c_near * (p1[i] - m1[i]) - c_far * (p3[i] - m3[i]))
        .collect()
}

fn transpose(columns: &[Vec<f64>], rows: usize) -> Jacobian {
    (0..rows)
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect()
}

/// Angle-encodes `x`, applies the ansatz with `params`, and returns `⟨Z_i⟩`
/// for every qubit.
pub fn run_circuit(spec: &AnsatzSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Circuit::new(*spec)?.run(params, x)
}

/// Parameter-shift Jacobian `J[i][k] = ∂⟨Z_i⟩/∂θ_k`.
pub fn parameter_shift_grad(spec: &AnsatzSpec, params: &[f64], x: &[f64]) -> Result<Jacobian> {
    Circuit::new(*spec)?.parameter_shift_jacobian(params, x)
}

//! Dense statevector simulation: gates, angle encoding, variational ansatz
//! templates, Pauli-Z readout, and exact circuit gradients.

mod ansatz;
mod circuit;
mod plan;
mod state;

pub use ansatz::{build_ansatz, AnsatzFamily, AnsatzGate, AnsatzSpec};
pub use circuit::{parameter_shift_grad, run_circuit, Circuit, GradMethod, Jacobian};
pub use state::{angle_encode, apply_gate, expectation_z, Gate, GateKind, Statevector};

pub(crate) use plan::PlanState;

/// Maps an unbounded activation into `(-π, π)` before Rx encoding.
#[inline]
pub fn scale_input(v: f64) -> f64 {
    2.0 * v.atan()
}

/// Derivative of [`scale_input`].
#[inline]
pub fn scale_input_grad(v: f64) -> f64 {
    2.0 / (1.0 + v * v)
}

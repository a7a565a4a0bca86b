use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Dense statevector over `n_qubits` qubits.
///
/// Qubit 0 is the most significant bit of the basis index, so the amplitude
/// layout matches the Kronecker product `q0 ⊗ q1 ⊗ … ⊗ q(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl Statevector {
    /// The all-zero computational basis state `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > 24 {
            return Err(Error::invalid(format!(
                "qubit count must be in 1..=24, got {n_qubits}"
            )));
        }
        let mut amplitudes = vec![ZERO; 1 << n_qubits];
        amplitudes[0] = ONE;
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Builds a state from raw amplitudes. The vector must have power-of-two
    /// length and unit norm (to 1e-10).
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::invalid(format!(
                "amplitude count {len} is not a power of two >= 2"
            )));
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("state norm {norm} is not 1")));
        }
        Ok(Self {
            n_qubits: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Bit mask selecting `qubit` in a basis index.
    #[inline]
    pub(crate) fn mask(&self, qubit: usize) -> usize {
        1 << (self.n_qubits - 1 - qubit)
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            Err(Error::OutOfRange {
                what: "qubit register",
                index: qubit,
                size: self.n_qubits,
            })
        } else {
            Ok(())
        }
    }

    /// Applies `gate` in place.
    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.n_qubits)?;
        let t = &gate.targets;
        match gate.kind {
            GateKind::Swap => {
                let (ma, mb) = (self.mask(t[0]), self.mask(t[1]));
                swap_kernel(&mut self.amplitudes, ma, mb);
            }
            GateKind::Cnot | GateKind::CRx | GateKind::CRz => {
                let m = gate.kind.single_qubit_matrix(gate.angle);
                let (mc, mt) = (self.mask(t[0]), self.mask(t[1]));
                apply_2x2(&mut self.amplitudes, &m, mt, mc);
            }
            _ => {
                let m = gate.kind.single_qubit_matrix(gate.angle);
                let mt = self.mask(t[0]);
                apply_2x2(&mut self.amplitudes, &m, mt, 0);
            }
        }
        Ok(())
    }

    /// Exact `⟨Z⟩` on `qubit`, computed from the amplitudes.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(expectation_z_unchecked(&self.amplitudes, self.mask(qubit)))
    }

    /// `⟨Z_i⟩` for every qubit in one sweep over the amplitudes.
    pub fn expectation_z_all(&self) -> Vec<f64> {
        let n = self.n_qubits;
        let mut out = vec![0.0; n];
        for (idx, a) in self.amplitudes.iter().enumerate() {
            let p = a.norm_sqr();
            for (q, o) in out.iter_mut().enumerate() {
                if idx & (1 << (n - 1 - q)) == 0 {
                    *o += p;
                } else {
                    *o -= p;
                }
            }
        }
        out
    }
}

/// Applies the free function form of [`Statevector::apply`], returning a new state.
pub fn apply_gate(state: &Statevector, gate: &Gate) -> Result<Statevector> {
    let mut out = state.clone();
    out.apply(gate)?;
    Ok(out)
}

/// Free function form of [`Statevector::expectation_z`].
pub fn expectation_z(state: &Statevector, qubit: usize) -> Result<f64> {
    state.expectation_z(qubit)
}

/// Angle encoding `⊗_i Rx(x_i)|0⟩`. Angles are used as given; any scaling is
/// the caller's responsibility.
pub fn angle_encode(x: &[f64]) -> Result<Statevector> {
    if x.is_empty() {
        return Err(Error::invalid("angle encoding needs at least one value"));
    }
    let mut state = Statevector::zero(x.len())?;
    encode_product_state(x, &mut state.amplitudes);
    Ok(state)
}

/// Writes `⊗_i Rx(x_i)|0⟩` into `out` (length `2^x.len()`).
fn encode_product_state(x: &[f64], out: &mut [Complex64]) {
    debug_assert_eq!(out.len(), 1 << x.len());
    out[0] = ONE;
    let mut len = 1;
    for &angle in x {
        let (s, c) = (angle * 0.5).sin_cos();
        let one = Complex64::new(0.0, -s);
        // expand in place from the back so earlier entries are still unread
        for k in (0..len).rev() {
            let a = out[k];
            out[2 * k] = a * c;
            out[2 * k + 1] = a * one;
        }
        len *= 2;
    }
}

#[inline]
pub(crate) fn expectation_z_unchecked(amps: &[Complex64], mask: usize) -> f64 {
    amps.iter()
        .enumerate()
        .map(|(i, a)| {
            let p = a.norm_sqr();
            if i & mask == 0 {
                p
            } else {
                -p
            }
        })
        .sum()
}

/// Applies a 2×2 matrix to the target bit `mt`, restricted to basis states
/// whose control bits `mc` are all set (`mc == 0` means uncontrolled).
#[inline]
fn apply_2x2(amps: &mut [Complex64], m: &[Complex64; 4], mt: usize, mc: usize) {
    let dim = amps.len();
    let mut base = 0;
    while base < dim {
        for i in base..base + mt {
            if i & mc != mc {
                continue;
            }
            let j = i | mt;
            let (a, b) = (amps[i], amps[j]);
            amps[i] = m[0] * a + m[1] * b;
            amps[j] = m[2] * a + m[3] * b;
        }
        base += 2 * mt;
    }
}

fn swap_kernel(amps: &mut [Complex64], ma: usize, mb: usize) {
    for i in 0..amps.len() {
        // visit each (…1…0…) index once and swap it with (…0…1…)
        if i & ma != 0 && i & mb == 0 {
            amps.swap(i, (i & !ma) | mb);
        }
    }
}

/// Gate kinds of the simulator's gate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    X,
    Y,
    Z,
    H,
    Rx,
    Ry,
    Rz,
    Cnot,
    Swap,
    CRx,
    CRz,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::Cnot | GateKind::Swap | GateKind::CRx | GateKind::CRz => 2,
            _ => 1,
        }
    }

    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            GateKind::Rx | GateKind::Ry | GateKind::Rz | GateKind::CRx | GateKind::CRz
        )
    }

    pub fn is_controlled(self) -> bool {
        matches!(self, GateKind::Cnot | GateKind::CRx | GateKind::CRz)
    }

    /// The 2×2 block acting on the (target) qubit, row-major. For controlled
    /// kinds this is the block applied when the control is `|1⟩`. SWAP has no
    /// such block and yields the identity.
    pub fn single_qubit_matrix(self, angle: Option<f64>) -> [Complex64; 4] {
        let theta = angle.unwrap_or(0.0);
        let (s, c) = (theta * 0.5).sin_cos();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = |v: f64| Complex64::new(v, 0.0);
        match self {
            GateKind::X | GateKind::Cnot => [ZERO, ONE, ONE, ZERO],
            GateKind::Y => [ZERO, -I, I, ZERO],
            GateKind::Z => [ONE, ZERO, ZERO, -ONE],
            GateKind::H => [r(h), r(h), r(h), r(-h)],
            GateKind::Rx | GateKind::CRx => {
                [r(c), Complex64::new(0.0, -s), Complex64::new(0.0, -s), r(c)]
            }
            GateKind::Ry => [r(c), r(-s), r(s), r(c)],
            GateKind::Rz | GateKind::CRz => [
                Complex64::new(c, -s),
                ZERO,
                ZERO,
                Complex64::new(c, s),
            ],
            GateKind::Swap => [ONE, ZERO, ZERO, ONE],
        }
    }
}

/// A gate bound to qubits and, for rotation kinds, an angle in radians.
///
/// For two-qubit kinds `targets` is `[control, target]` (SWAP is symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    pub angle: Option<f64>,
}

impl Gate {
    pub fn new(kind: GateKind, targets: &[usize]) -> Self {
        Self {
            kind,
            targets: targets.to_vec(),
            angle: None,
        }
    }

    pub fn rotation(kind: GateKind, targets: &[usize], angle: f64) -> Self {
        Self {
            kind,
            targets: targets.to_vec(),
            angle: Some(angle),
        }
    }

    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.targets.len() != self.kind.arity() {
            return Err(Error::invalid(format!(
                "{:?} expects {} qubit(s), got {}",
                self.kind,
                self.kind.arity(),
                self.targets.len()
            )));
        }
        for &q in &self.targets {
            if q >= n_qubits {
                return Err(Error::OutOfRange {
                    what: "qubit register",
                    index: q,
                    size: n_qubits,
                });
            }
        }
        if self.targets.len() == 2 && self.targets[0] == self.targets[1] {
            return Err(Error::invalid(format!(
                "{:?} needs distinct qubits, got {:?}",
                self.kind, self.targets
            )));
        }
        match (self.kind.is_parameterized(), self.angle) {
            (true, None) => Err(Error::invalid(format!("{:?} is missing its angle", self.kind))),
            (true, Some(a)) if !a.is_finite() => {
                Err(Error::invalid(format!("{:?} angle {a} is not finite", self.kind)))
            }
            _ => Ok(()),
        }
    }

    /// The full unitary on the gate's own qubits: 2×2 for single-qubit kinds,
    /// 4×4 (first listed qubit most significant) for two-qubit kinds.
    pub fn matrix(&self) -> Vec<Vec<Complex64>> {
        let m = self.kind.single_qubit_matrix(self.angle);
        match self.kind.arity() {
            1 => vec![vec![m[0], m[1]], vec![m[2], m[3]]],
            _ if self.kind == GateKind::Swap => {
                let mut u = vec![vec![ZERO; 4]; 4];
                u[0][0] = ONE;
                u[1][2] = ONE;
                u[2][1] = ONE;
                u[3][3] = ONE;
                u
            }
            _ => {
                let mut u = vec![vec![ZERO; 4]; 4];
                u[0][0] = ONE;
                u[1][1] = ONE;
                u[2][2] = m[0];
                u[2][3] = m[1];
                u[3][2] = m[2];
                u[3][3] = m[3];
                u
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn basis(n: usize, idx: usize) -> Statevector {
        let mut amps = vec![ZERO; 1 << n];
        amps[idx] = ONE;
        Statevector::from_amplitudes(amps).unwrap()
    }

    #[test]
    fn hadamard_creates_equal_superposition() {
        let s = apply_gate(&basis(1, 0), &Gate::new(GateKind::H, &[0])).unwrap();
        assert!((s.amplitudes()[0].re - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((s.amplitudes()[1].re - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(s.expectation_z(0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cnot_flips_target_when_control_set() {
        let s = apply_gate(&basis(2, 0b10), &Gate::new(GateKind::Cnot, &[0, 1])).unwrap();
        assert_eq!(s.amplitudes()[0b11], ONE);
        let s = apply_gate(&basis(2, 0b00), &Gate::new(GateKind::Cnot, &[0, 1])).unwrap();
        assert_eq!(s.amplitudes()[0b00], ONE);
    }

    #[test]
    fn rx_pi_maps_zero_to_one_with_phase() {
        let s = apply_gate(&basis(1, 0), &Gate::rotation(GateKind::Rx, &[0], PI)).unwrap();
        let a1 = s.amplitudes()[1];
        assert!((a1.norm() - 1.0).abs() < 1e-15);
        assert!((a1.im + 1.0).abs() < 1e-15);
    }

    #[test]
    fn swap_exchanges_qubits() {
        let s = apply_gate(&basis(3, 0b100), &Gate::new(GateKind::Swap, &[0, 2])).unwrap();
        assert_eq!(s.amplitudes()[0b001], ONE);
    }

    #[test]
    fn rejects_bad_gates() {
        let mut s = basis(2, 0);
        assert!(s.apply(&Gate::new(GateKind::X, &[2])).is_err());
        assert!(s.apply(&Gate::new(GateKind::Rx, &[0])).is_err());
        assert!(s.apply(&Gate::new(GateKind::Cnot, &[1, 1])).is_err());
        assert!(s.apply(&Gate::new(GateKind::Cnot, &[1])).is_err());
        assert!(s.expectation_z(5).is_err());
    }

    #[test]
    fn angle_encoding_readout() {
        let s = angle_encode(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.expectation_z_all(), vec![1.0, 1.0, 1.0]);
        let s = angle_encode(&[PI]).unwrap();
        assert!((s.expectation_z(0).unwrap() + 1.0).abs() < 1e-15);
        let s = angle_encode(&[PI / 2.0]).unwrap();
        assert!(s.expectation_z(0).unwrap().abs() < 1e-15);
        // dense oracle: [cos(x/2), -i sin(x/2)] gives |a|^2 - |b|^2 = cos x
        let x = 0.7_f64;
        let (a, b) = ((x / 2.0).cos(), (x / 2.0).sin());
        let z = angle_encode(&[x]).unwrap().expectation_z(0).unwrap();
        assert!((z - (a * a - b * b)).abs() < 1e-15);
        assert!((z - 0.764_842_187_284_488_4).abs() < 1e-15);
    }

    #[test]
    fn angle_encoding_matches_sequential_rx() {
        let xs = [0.3, -1.2, 2.5, 0.9];
        let mut s = Statevector::zero(4).unwrap();
        for (q, &x) in xs.iter().enumerate() {
            s.apply(&Gate::rotation(GateKind::Rx, &[q], x)).unwrap();
        }
        let e = angle_encode(&xs).unwrap();
        for (a, b) in s.amplitudes().iter().zip(e.amplitudes()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn matrices_are_unitary() {
        let kinds = [
            GateKind::X,
            GateKind::Y,
            GateKind::Z,
            GateKind::H,
            GateKind::Rx,
            GateKind::Ry,
            GateKind::Rz,
            GateKind::Cnot,
            GateKind::Swap,
            GateKind::CRx,
            GateKind::CRz,
        ];
        for kind in kinds {
            let targets: Vec<usize> = (0..kind.arity()).collect();
            let gate = Gate {
                kind,
                targets,
                angle: kind.is_parameterized().then_some(0.913),
            };
            let u = gate.matrix();
            let d = u.len();
            for r in 0..d {
                for c in 0..d {
                    let dot: Complex64 = (0..d).map(|k| u[k][r].conj() * u[k][c]).sum();
                    let expect = if r == c { ONE } else { ZERO };
                    assert!((dot - expect).norm() < 1e-12, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn involutions_restore_state() {
        let start = angle_encode(&[0.4, 1.1, -0.6]).unwrap();
        for gate in [
            Gate::new(GateKind::H, &[1]),
            Gate::new(GateKind::Cnot, &[2, 0]),
            Gate::new(GateKind::Swap, &[0, 2]),
        ] {
            let mut s = start.clone();
            s.apply(&gate).unwrap();
            s.apply(&gate).unwrap();
            for (a, b) in s.amplitudes().iter().zip(start.amplitudes()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }
}

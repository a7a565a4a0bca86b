//! Cluster-factorized execution of an ansatz.
//!
//! The encoded input is a product state, and an entangling gate only couples
//! the two clusters of qubits it touches. A [`Plan`] replays the gate list
//! symbolically once, recording when clusters must be merged (Kronecker
//! product) so that every gate acts on the smallest state that contains its
//! qubits. The reverse sweep splits the adjoint vector back at each merge by
//! contracting it with the partner cluster's forward state.

use num_complex::Complex64;

use super::ansatz::AnsatzGate;
use super::state::GateKind;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone)]
enum Step {
    /// Gate `gate` of the ansatz acting on `cluster` with local bit masks.
    Gate {
        cluster: usize,
        axis: Axis,
        slot: usize,
        mt: usize,
        mc: usize,
    },
    /// `out = kron(hi, lo)`; `hi` and `lo` are retired.
    Merge { hi: usize, lo: usize, out: usize },
}

#[derive(Debug, Clone)]
struct ClusterInfo {
    /// Qubits, most significant first.
    qubits: Vec<usize>,
}

/// Precomputed execution schedule for one gate list on `n` qubits.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    n_qubits: usize,
    clusters: Vec<ClusterInfo>,
    steps: Vec<Step>,
    /// Live clusters at the end, and for each qubit `(cluster, bit mask)`.
    finals: Vec<usize>,
    readout: Vec<(usize, usize)>,
}

/// Reusable buffers for [`Plan::forward`] / [`Plan::adjoint`].
#[derive(Debug, Default)]
pub(crate) struct PlanState {
    psi: Vec<Vec<Complex64>>,
    lam: Vec<Vec<Complex64>>,
}

impl Plan {
    pub fn new(n_qubits: usize, gates: &[AnsatzGate]) -> Self {
        let mut clusters: Vec<ClusterInfo> = (0..n_qubits)
            .map(|q| ClusterInfo { qubits: vec![q] })
            .collect();
        let mut owner: Vec<usize> = (0..n_qubits).collect();
        let mut steps = Vec::new();
        let local_mask = |info: &ClusterInfo, q: usize| {
            let pos = info.qubits.iter().position(|&x| x == q).expect("owned");
            1usize << (info.qubits.len() - 1 - pos)
        };
        for g in gates {
            if let Some(c) = g.control {
                let (a, b) = (owner[c], owner[g.target]);
                if a != b {
                    let (hi, lo) = (a.min(b), a.max(b));
                    let mut qubits = clusters[hi].qubits.clone();
                    qubits.extend_from_slice(&clusters[lo].qubits);
                    let out = clusters.len();
                    for &q in &qubits {
                        owner[q] = out;
                    }
                    clusters.push(ClusterInfo { qubits });
                    steps.push(Step::Merge { hi, lo, out });
                }
            }
            let cluster = owner[g.target];
            let info = &clusters[cluster];
            let axis = match g.kind {
                GateKind::Rx | GateKind::CRx => Axis::X,
                GateKind::Ry => Axis::Y,
                GateKind::Rz | GateKind::CRz => Axis::Z,
                other => unreachable!("ansatz emits rotations only, got {other:?}"),
            };
            steps.push(Step::Gate {
                cluster,
                axis,
                slot: g.slot,
                mt: local_mask(info, g.target),
                mc: g.control.map_or(0, |c| local_mask(info, c)),
            });
        }
        let mut finals: Vec<usize> = owner.clone();
        finals.sort_unstable();
        finals.dedup();
        let readout = (0..n_qubits)
            .map(|q| (owner[q], local_mask(&clusters[owner[q]], q)))
            .collect();
        Self {
            n_qubits,
            clusters,
            steps,
            finals,
            readout,
        }
    }

    fn reset(&self, st: &mut PlanState) {
        st.psi.resize_with(self.clusters.len(), Vec::new);
        st.lam.resize_with(self.clusters.len(), Vec::new);
    }

    /// Encodes `x` and applies every gate. Leaves final cluster states in `st`.
    pub fn forward(&self, params: &[f64], x: &[f64], st: &mut PlanState) {
        self.reset(st);
        for (q, &angle) in x.iter().enumerate() {
            let (s, c) = (0.5 * angle).sin_cos();
            let v = &mut st.psi[q];
            v.clear();
            v.extend_from_slice(&[Complex64::new(c, 0.0), Complex64::new(0.0, -s)]);
        }
        for step in &self.steps {
            match *step {
                Step::Gate {
                    cluster,
                    axis,
                    slot,
                    mt,
                    mc,
                } => rotate(&mut st.psi[cluster], axis, params[slot], mt, mc),
                Step::Merge { hi, lo, out } => {
                    let mut dst = std::mem::take(&mut st.psi[out]);
                    kron_into(&st.psi[hi], &st.psi[lo], &mut dst);
                    st.psi[out] = dst;
                }
            }
        }
    }

    /// `⟨Z_q⟩` for every qubit from the final cluster states.
    pub fn readout(&self, st: &PlanState, out: &mut [f64]) {
        for (q, o) in out.iter_mut().enumerate().take(self.n_qubits) {
            let (c, m) = self.readout[q];
            *o = z_expect(&st.psi[c], m);
        }
    }

    /// Reverse sweep for `L = Σ_q cot_q ⟨Z_q⟩`, accumulating into `gp`
    /// (per slot) and `gx` (per encoding angle). Requires a preceding
    /// [`Plan::forward`] on the same `st`; the forward states are consumed.
    pub fn adjoint(
        &self,
        params: &[f64],
        cot: &[f64],
        st: &mut PlanState,
        gp: &mut [f64],
        gx: &mut [f64],
    ) {
        // λ = O_F ψ_F per final cluster, O_F = Σ_{q ∈ F} cot_q Z_q
        for &f in &self.finals {
            let psi = &st.psi[f];
            let mut weights = vec![0.0; psi.len()];
            for q in 0..self.n_qubits {
                let (c, m) = self.readout[q];
                if c != f || cot[q] == 0.0 {
                    continue;
                }
                for (i, w) in weights.iter_mut().enumerate() {
                    if i & m == 0 {
                        *w += cot[q];
                    } else {
                        *w -= cot[q];
                    }
                }
            }
            let lam = &mut st.lam[f];
            lam.clear();
            lam.extend(psi.iter().zip(&weights).map(|(p, w)| p * w));
        }
        for step in self.steps.iter().rev() {
            match *step {
                Step::Gate {
                    cluster,
                    axis,
                    slot,
                    mt,
                    mc,
                } => {
                    let (psi, lam) = (&mut st.psi[cluster], &mut st.lam[cluster]);
                    gp[slot] += generator_overlap(lam, psi, axis, mt, mc);
                    rotate(psi, axis, -params[slot], mt, mc);
                    rotate(lam, axis, -params[slot], mt, mc);
                }
                Step::Merge { hi, lo, out } => {
                    // ψ_out has been rewound to ψ_hi ⊗ ψ_lo; split λ_out
                    let lam_out = std::mem::take(&mut st.lam[out]);
                    let (dh, dl) = (st.psi[hi].len(), st.psi[lo].len());
                    let mut lam_hi = std::mem::take(&mut st.lam[hi]);
                    let mut lam_lo = std::mem::take(&mut st.lam[lo]);
                    lam_hi.clear();
                    lam_hi.resize(dh, ZERO);
                    lam_lo.clear();
                    lam_lo.resize(dl, ZERO);
                    let (ph, pl) = (&st.psi[hi], &st.psi[lo]);
                    for a in 0..dh {
                        let row = &lam_out[a * dl..(a + 1) * dl];
                        let mut acc = ZERO;
                        for (r, p) in row.iter().zip(pl) {
                            acc += r * p.conj();
                        }
                        lam_hi[a] = acc;
                        let pa = ph[a].conj();
                        for (l, r) in lam_lo.iter_mut().zip(row) {
                            *l += pa * r;
                        }
                    }
                    st.lam[hi] = lam_hi;
                    st.lam[lo] = lam_lo;
                    st.lam[out] = lam_out;
                }
            }
        }
        // leaves: single-qubit clusters holding Rx(x_q)|0⟩
        for (q, g) in gx.iter_mut().enumerate().take(self.n_qubits) {
            *g += generator_overlap(&st.lam[q], &st.psi[q], Axis::X, 1, 0);
        }
    }
}

fn kron_into(hi: &[Complex64], lo: &[Complex64], out: &mut Vec<Complex64>) {
    out.clear();
    out.reserve(hi.len() * lo.len());
    for a in hi {
        out.extend(lo.iter().map(|b| a * b));
    }
}

#[inline]
fn z_expect(amps: &[Complex64], m: usize) -> f64 {
    let mut acc = 0.0;
    let mut base = 0;
    while base < amps.len() {
        let zero: f64 = amps[base..base + m].iter().map(|a| a.norm_sqr()).sum();
        let one: f64 = amps[base + m..base + 2 * m].iter().map(|a| a.norm_sqr()).sum();
        acc += zero - one;
        base += 2 * m;
    }
    acc
}

/// Calls `f(i, j)` for every index pair differing only in target bit `mt`
/// (`i` has it clear) whose control bit `mc` is set (`mc == 0`: all pairs).
#[inline(always)]
fn for_pairs(dim: usize, mt: usize, mc: usize, mut f: impl FnMut(usize, usize)) {
    if mc == 0 {
        let mut base = 0;
        while base < dim {
            for i in base..base + mt {
                f(i, i | mt);
            }
            base += 2 * mt;
        }
    } else {
        let (lo, hi) = if mt < mc { (mt, mc) } else { (mc, mt) };
        let mut outer = 0;
        while outer < dim {
            let mut mid = outer;
            while mid < outer + hi {
                for i in mid..mid + lo {
                    let i = i | mc;
                    f(i, i | mt);
                }
                mid += 2 * lo;
            }
            outer += 2 * hi;
        }
    }
}

/// Applies `exp(-iθP/2)` (P = X, Y or Z) on bit `mt`, controlled on `mc`.
#[inline]
fn rotate(amps: &mut [Complex64], axis: Axis, theta: f64, mt: usize, mc: usize) {
    let (s, c) = (0.5 * theta).sin_cos();
    let dim = amps.len();
    match axis {
        Axis::X => for_pairs(dim, mt, mc, |i, j| {
            let (a, b) = (amps[i], amps[j]);
            // [c, -is; -is, c]
            amps[i] = Complex64::new(c * a.re + s * b.im, c * a.im - s * b.re);
            amps[j] = Complex64::new(c * b.re + s * a.im, c * b.im - s * a.re);
        }),
        Axis::Y => for_pairs(dim, mt, mc, |i, j| {
            let (a, b) = (amps[i], amps[j]);
            amps[i] = a * c - b * s;
            amps[j] = a * s + b * c;
        }),
        Axis::Z => {
            let (p0, p1) = (Complex64::new(c, -s), Complex64::new(c, s));
            for_pairs(dim, mt, mc, |i, j| {
                amps[i] *= p0;
                amps[j] *= p1;
            })
        }
    }
}

/// `Im⟨λ|Π_c P_t|ψ⟩`, the derivative kernel of the adjoint method.
#[inline]
fn generator_overlap(lam: &[Complex64], psi: &[Complex64], axis: Axis, mt: usize, mc: usize) -> f64 {
    let mut acc = 0.0;
    let dim = psi.len();
    match axis {
        // Im(conj(li) pj + conj(lj) pi)
        Axis::X => for_pairs(dim, mt, mc, |i, j| {
            let (li, lj, pi, pj) = (lam[i], lam[j], psi[i], psi[j]);
            acc += li.re * pj.im - li.im * pj.re + lj.re * pi.im - lj.im * pi.re;
        }),
        // Im(i (conj(lj) pi - conj(li) pj)) = Re(conj(lj) pi - conj(li) pj)
        Axis::Y => for_pairs(dim, mt, mc, |i, j| {
            let (li, lj, pi, pj) = (lam[i], lam[j], psi[i], psi[j]);
            acc += lj.re * pi.re + lj.im * pi.im - li.re * pj.re - li.im * pj.im;
        }),
        // Im(conj(li) pi - conj(lj) pj)
        Axis::Z => for_pairs(dim, mt, mc, |i, j| {
            let (li, lj, pi, pj) = (lam[i], lam[j], psi[i], psi[j]);
            acc += li.re * pi.im - li.im * pi.re - lj.re * pj.im + lj.im * pj.re;
        }),
    }
    acc
}

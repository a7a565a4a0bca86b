use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::{Gate, GateKind};
use crate::error::{Error, Result};

/// Trainable circuit templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnsatzFamily {
    /// Hierarchical: intra-channel controlled rotations, then inter-channel.
    #[serde(rename = "hqconv")]
    HQConv,
    /// Flat: a CRz ring over all qubits followed by a CRx ring.
    #[serde(rename = "fqconv")]
    FQConv,
    /// Rx, Ry, Rz on every qubit, no entanglement.
    #[serde(rename = "only_rotations")]
    OnlyRotations,
}

impl AnsatzFamily {
    pub const ALL: [AnsatzFamily; 3] = [
        AnsatzFamily::HQConv,
        AnsatzFamily::FQConv,
        AnsatzFamily::OnlyRotations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnsatzFamily::HQConv => "hqconv",
            AnsatzFamily::FQConv => "fqconv",
            AnsatzFamily::OnlyRotations => "only_rotations",
        }
    }
}

impl fmt::Display for AnsatzFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnsatzFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hqconv" => Ok(AnsatzFamily::HQConv),
            "fqconv" => Ok(AnsatzFamily::FQConv),
            "only_rotations" | "onlyrotations" => Ok(AnsatzFamily::OnlyRotations),
            other => Err(Error::invalid(format!("unsupported ansatz family `{other}`"))),
        }
    }
}

/// Declarative description of a variational circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsatzSpec {
    pub family: AnsatzFamily,
    pub n_qubits: usize,
    pub n_layers: usize,
}

/// One gate of a built ansatz whose angle is read from `slot` of the
/// parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnsatzGate {
    pub kind: GateKind,
    pub control: Option<usize>,
    pub target: usize,
    pub slot: usize,
}

impl AnsatzGate {
    pub fn bind(&self, angles: &[f64]) -> Gate {
        let targets: Vec<usize> = self.control.into_iter().chain([self.target]).collect();
        Gate::rotation(self.kind, &targets, angles[self.slot])
    }
}

impl AnsatzSpec {
    pub fn new(family: AnsatzFamily, n_qubits: usize, n_layers: usize) -> Result<Self> {
        let spec = Self {
            family,
            n_qubits,
            n_layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("ansatz needs at least one layer"));
        }
        if self.n_qubits == 0 || self.n_qubits > 20 {
            return Err(Error::invalid(format!(
                "ansatz qubit count {} outside 1..=20",
                self.n_qubits
            )));
        }
        match self.family {
            AnsatzFamily::HQConv | AnsatzFamily::FQConv if self.n_qubits % 3 != 0 => {
                Err(Error::invalid(format!(
                    "{} needs a qubit count divisible by 3 (one group per channel), got {}",
                    self.family, self.n_qubits
                )))
            }
            _ => Ok(()),
        }
    }

    /// Qubits per channel group for the channel-structured families.
    pub fn group_size(&self) -> usize {
        self.n_qubits / 3
    }

    pub fn parameter_count(&self) -> usize {
        build_ansatz(self).map(|g| g.len()).unwrap_or(0)
    }

    /// Draws initial angles uniformly from `[-0.1, 0.1]`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.parameter_count())
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect()
    }
}

/// Expands a spec into its ordered gate list. Every gate owns one fresh
/// parameter slot, so slot `k` is the `k`-th gate.
///
/// Qubit `q = g*c + s` belongs to channel `c ∈ {0,1,2}` at spatial position
/// `s < g`, where `g = n_qubits / 3`.
pub fn build_ansatz(spec: &AnsatzSpec) -> Result<Vec<AnsatzGate>> {
    spec.validate()?;
    let n = spec.n_qubits;
    let mut gates = Vec::new();
    let mut push = |kind, control, target| {
        let slot = gates.len();
        gates.push(AnsatzGate {
            kind,
            control,
            target,
            slot,
        });
    };
    for _ in 0..spec.n_layers {
        match spec.family {
            AnsatzFamily::HQConv => {
                let g = spec.group_size();
                // block A: halving strides inside each channel group
                for c in 0..3 {
                    let mut r = g / 2;
                    while r >= 1 {
                        for s in 0..r {
                            let (ctl, tgt) = (g * c + s, g * c + s + r);
                            push(GateKind::CRz, Some(ctl), tgt);
                            push(GateKind::CRx, Some(ctl), tgt);
                        }
                        r /= 2;
                    }
                }
                // block B: same spatial position across neighbouring channels
                for c in 0..2 {
                    for s in 0..g {
                        let (ctl, tgt) = (g * c + s, g * (c + 1) + s);
                        push(GateKind::CRz, Some(ctl), tgt);
                        push(GateKind::CRx, Some(ctl), tgt);
                    }
                }
            }
            AnsatzFamily::FQConv => {
                for kind in [GateKind::CRz, GateKind::CRx] {
                    for t in 0..n {
                        push(kind, Some(t), (t + 1) % n);
                    }
                }
            }
            AnsatzFamily::OnlyRotations => {
                for q in 0..n {
                    push(GateKind::Rx, None, q);
                    push(GateKind::Ry, None, q);
                    push(GateKind::Rz, None, q);
                }
            }
        }
    }
    Ok(gates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_rotations_counts() {
        let one = AnsatzSpec::new(AnsatzFamily::OnlyRotations, 12, 1).unwrap();
        assert_eq!(one.parameter_count(), 36);
        let two = AnsatzSpec::new(AnsatzFamily::OnlyRotations, 12, 2).unwrap();
        assert_eq!(two.parameter_count(), 72);
    }

    #[test]
    fn hqconv_slot_count_from_emitted_gates() {
        let spec = AnsatzSpec::new(AnsatzFamily::HQConv, 12, 1).unwrap();
        let gates = build_ansatz(&spec).unwrap();
        // count slots independently: every distinct slot id used by a gate
        let mut slots: Vec<usize> = gates.iter().map(|g| g.slot).collect();
        slots.sort_unstable();
        slots.dedup();
        assert_eq!(slots.len(), gates.len());
        // 3 groups x 3 pairs x 2 rotations + 2 x 4 cross-channel pairs x 2 rotations
        assert_eq!(slots.len(), 34);
        assert_eq!(spec.parameter_count(), 34);
        assert_eq!(
            AnsatzSpec::new(AnsatzFamily::HQConv, 12, 2)
                .unwrap()
                .parameter_count(),
            68
        );
    }

    #[test]
    fn hqconv_block_a_stays_inside_channel() {
        let spec = AnsatzSpec::new(AnsatzFamily::HQConv, 12, 1).unwrap();
        let gates = build_ansatz(&spec).unwrap();
        let pairs: Vec<(usize, usize)> = gates
            .iter()
            .step_by(2)
            .map(|g| (g.control.unwrap(), g.target))
            .collect();
        assert_eq!(&pairs[..3], &[(0, 2), (1, 3), (0, 1)]);
        for &(c, t) in &pairs[..9] {
            assert_eq!(c / 4, t / 4);
        }
        for &(c, t) in &pairs[9..] {
            assert_eq!(t, c + 4);
        }
        // CRz precedes CRx within each block
        assert!(gates
            .chunks(2)
            .all(|p| p[0].kind == GateKind::CRz && p[1].kind == GateKind::CRx));
    }

    #[test]
    fn fqconv_ring() {
        let spec = AnsatzSpec::new(AnsatzFamily::FQConv, 12, 1).unwrap();
        let gates = build_ansatz(&spec).unwrap();
        assert_eq!(gates.len(), 24);
        assert!(gates[..12].iter().all(|g| g.kind == GateKind::CRz));
        assert!(gates[12..].iter().all(|g| g.kind == GateKind::CRx));
        assert_eq!((gates[11].control, gates[11].target), (Some(11), 0));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(AnsatzSpec::new(AnsatzFamily::HQConv, 4, 1).is_err());
        assert!(AnsatzSpec::new(AnsatzFamily::FQConv, 12, 0).is_err());
        assert!(AnsatzSpec::new(AnsatzFamily::OnlyRotations, 1, 1).is_ok());
        assert!("banana".parse::<AnsatzFamily>().is_err());
        assert_eq!("HQConv".parse::<AnsatzFamily>().unwrap(), AnsatzFamily::HQConv);
    }

    #[test]
    fn init_params_in_range() {
        use rand::SeedableRng;
        let spec = AnsatzSpec::new(AnsatzFamily::HQConv, 12, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let p = spec.init_params(&mut rng);
        assert_eq!(p.len(), 68);
        assert!(p.iter().all(|v| v.abs() <= 0.1));
    }
}

//! Quanvolution: variational circuits applied patch-wise to feature maps, and
//! the residual blocks that host them.

mod blocks;
mod layer;

pub use blocks::{
    init_q_resnet_block, init_quan_resnet_block, q_resnet_block, quan_resnet_block,
};
pub use layer::{quanvolve, QuantumLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsim::{AnsatzFamily, AnsatzSpec};

/// Channels encoded together in one circuit.
pub const CHANNEL_GROUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuanvConfig {
    pub patch_size: usize,
    /// Patch step; equal to `patch_size` for non-overlapping patches.
    pub stride: usize,
    pub family: AnsatzFamily,
    pub n_layers: usize,
}

impl Default for QuanvConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            stride: 2,
            family: AnsatzFamily::HQConv,
            n_layers: 1,
        }
    }
}

impl QuanvConfig {
    pub fn n_qubits(&self) -> usize {
        self.patch_size * self.patch_size * CHANNEL_GROUP
    }

    pub fn ansatz(&self) -> Result<AnsatzSpec> {
        self.validate()?;
        AnsatzSpec::new(self.family, self.n_qubits(), self.n_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.patch_size;
        if k == 0 || self.stride == 0 {
            return Err(Error::config("quanv.patch_size", "patch size and stride must be positive"));
        }
        if self.stride > k || k % self.stride != 0 {
            return Err(Error::config(
                "quanv.stride",
                format!("stride {} must divide patch size {k}", self.stride),
            ));
        }
        if self.n_layers == 0 {
            return Err(Error::config("quanv.n_layers", "at least one layer is required"));
        }
        if self.n_qubits() > 12 {
            return Err(Error::config(
                "quanv.patch_size",
                format!("{k}x{k}x3 patches need {} qubits; at most 12 are supported", self.n_qubits()),
            ));
        }
        Ok(())
    }

    /// Checks an `H×W×C` feature map against this layer.
    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        self.validate()?;
        let (k, s) = (self.patch_size, self.stride);
        if h < k || w < k || h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "quanvolve",
                format!("{h}x{w} map does not tile with {k}x{k} patches at stride {s}"),
            ));
        }
        if c == 0 || c % CHANNEL_GROUP != 0 {
            return Err(Error::shape(
                "quanvolve",
                format!("{c} channels is not a multiple of {CHANNEL_GROUP}"),
            ));
        }
        Ok(())
    }
}

/// Hybrid bottleneck block settings. The circuit always acts on one 2×2×3
/// block, so it has 12 qubits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    /// Fraction of channels routed through circuits, rounded down to a
    /// multiple of 3.
    pub rho: f64,
    pub family: AnsatzFamily,
    pub n_layers: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            rho: 0.2,
            family: AnsatzFamily::HQConv,
            n_layers: 1,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("bottleneck.rho", format!("{} is outside [0, 1]", self.rho)));
        }
        if self.n_layers == 0 {
            return Err(Error::config("bottleneck.n_layers", "at least one layer is required"));
        }
        Ok(())
    }

    /// `⌊rho·C/3⌋·3`.
    pub fn quantum_channels(&self, channels: usize) -> usize {
        let groups = (self.rho * channels as f64 / CHANNEL_GROUP as f64 + 1e-9).floor() as usize;
        (groups * CHANNEL_GROUP).min(channels / CHANNEL_GROUP * CHANNEL_GROUP)
    }

    /// The patch layer applied to the 2×2 bottleneck map.
    pub fn quanv(&self) -> QuanvConfig {
        QuanvConfig {
            patch_size: 2,
            stride: 2,
            family: self.family,
            n_layers: self.n_layers,
        }
    }
}

//! Class-conditioned U-Net noise predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{conv, init_conv, init_linear, init_norm, init_res_block, linear, norm, res_block, ResBlockShape, INIT_STD};
use super::embedding::sinusoidal;
use super::graph::{Graph, Var};
use super::params::{Binder, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::qsim::GradMethod;
use crate::quanv::{
    init_q_resnet_block, init_quan_resnet_block, q_resnet_block, quan_resnet_block, BottleneckConfig,
    QuantumLayer, QuanvConfig,
};

/// Where circuits are inserted into the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantumPosition {
    /// Purely classical.
    #[default]
    None,
    /// Quanvolution in the first encoder level, plus the hybrid bottleneck.
    P1Encoder,
    /// Quanvolution in the second encoder level, plus the hybrid bottleneck.
    P2Deeper,
    /// Hybrid bottleneck only.
    BottleneckOnly,
}

impl QuantumPosition {
    /// Encoder level hosting the quanvolution block.
    pub fn quanv_level(self) -> Option<usize> {
        match self {
            QuantumPosition::P1Encoder => Some(0),
            QuantumPosition::P2Deeper => Some(1),
            QuantumPosition::None | QuantumPosition::BottleneckOnly => None,
        }
    }
}

impl std::str::FromStr for QuantumPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "p1_encoder" => Ok(Self::P1Encoder),
            "p2_deeper" => Ok(Self::P2Deeper),
            "bottleneck_only" => Ok(Self::BottleneckOnly),
            other => Err(Error::invalid(format!("unknown quantum position `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
    pub quantum_position: QuantumPosition,
    /// Adds 3 input channels carrying a previous estimate of `x₀`.
    pub self_condition: bool,
    pub grad_method: GradMethod,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            base_channels: 12,
            channel_multipliers: vec![1, 2],
            res_blocks_per_level: 1,
            time_embed_dim: 32,
            num_classes: 4,
            quantum_position: QuantumPosition::None,
            self_condition: false,
            grad_method: GradMethod::Adjoint,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.levels()
    }

    pub fn emb_dim(&self) -> usize {
        2 * self.time_embed_dim
    }

    fn input_channels(&self) -> usize {
        if self.self_condition {
            2 * self.in_channels
        } else {
            self.in_channels
        }
    }

    /// Structural checks independent of the quantum settings.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 {
            return Err(Error::config("model.in_channels", "only RGB (3 channels) is supported"));
        }
        if self.base_channels == 0 || self.base_channels % 3 != 0 {
            return Err(Error::config(
                "model.base_channels",
                format!("{} is not a positive multiple of 3", self.base_channels),
            ));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::config("model.channel_multipliers", "need one or more positive multipliers"));
        }
        let div = 1usize << self.levels();
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::config(
                "model.image_size",
                format!("{} is not divisible by 2^{} = {div}", self.image_size, self.levels()),
            ));
        }
        if self.res_blocks_per_level == 0 {
            return Err(Error::config("model.res_blocks_per_level", "must be at least 1"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("model.time_embed_dim", "must be even and positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        Ok(())
    }
}

/// The denoiser `ε_θ(x_t, t, y)`: configuration plus compiled circuits.
/// Parameters live in a separate [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    timesteps: usize,
    bottleneck_cfg: BottleneckConfig,
    quanv: Option<QuantumLayer>,
    bottleneck: Option<QuantumLayer>,
}

impl Denoiser {
    pub fn new(
        cfg: DenoiserConfig,
        quanv_cfg: QuanvConfig,
        bottleneck_cfg: BottleneckConfig,
        timesteps: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if timesteps == 0 {
            return Err(Error::config("schedule.timesteps", "must be at least 1"));
        }
        let mut quanv = None;
        let mut bottleneck = None;
        if let Some(level) = cfg.quantum_position.quanv_level() {
            if level >= cfg.levels() {
                return Err(Error::config(
                    "model.quantum_position",
                    format!("{:?} needs encoder level {level}, model has {}", cfg.quantum_position, cfg.levels()),
                ));
            }
            let s = cfg.level_size(level);
            quanv_cfg
                .check_input(s, s, cfg.level_channels(level))
                .map_err(|e| Error::config("quanv", e.to_string()))?;
            quanv = Some(QuantumLayer::new(quanv_cfg, cfg.grad_method)?);
        }
        if cfg.quantum_position != QuantumPosition::None {
            bottleneck_cfg.validate()?;
            let c = cfg.level_channels(cfg.levels() - 1);
            if bottleneck_cfg.quantum_channels(c) > 0 {
                if cfg.bottleneck_size() != 2 {
                    return Err(Error::config(
                        "bottleneck.rho",
                        format!(
                            "hybrid bottleneck needs a 2x2 map, image_size {} gives {}x{}",
                            cfg.image_size,
                            cfg.bottleneck_size(),
                            cfg.bottleneck_size()
                        ),
                    ));
                }
                bottleneck = Some(QuantumLayer::new(bottleneck_cfg.quanv(), cfg.grad_method)?);
            }
        }
        Ok(Self {
            cfg,
            timesteps,
            bottleneck_cfg,
            quanv,
            bottleneck,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn is_hybrid(&self) -> bool {
        self.quanv.is_some() || self.bottleneck.is_some()
    }

    pub fn set_grad_method(&mut self, method: GradMethod) {
        for layer in self.quanv.iter_mut().chain(self.bottleneck.iter_mut()) {
            layer.set_grad_method(method);
        }
    }

    fn quanv_at(&self, level: usize, block: usize) -> Option<&QuantumLayer> {
        (block == 0 && self.cfg.quantum_position.quanv_level() == Some(level))
            .then_some(self.quanv.as_ref())
            .flatten()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let cfg = &self.cfg;
        let e = cfg.emb_dim();
        let mut p = ModelParams::new();
        init_linear(&mut p, "time.fc1", cfg.time_embed_dim, e, rng);
        init_linear(&mut p, "time.fc2", e, e, rng);
        p.init_truncated_normal("class_emb", &[cfg.num_classes, e], INIT_STD, rng);
        init_conv(&mut p, "conv_in", 3, cfg.input_channels(), cfg.level_channels(0), rng);
        for l in 0..cfg.levels() {
            let c = cfg.level_channels(l);
            for i in 0..cfg.res_blocks_per_level {
                let prefix = format!("enc.{l}.{i}");
                match self.quanv_at(l, i) {
                    Some(layer) => init_quan_resnet_block(&mut p, &prefix, c, e, layer, rng),
                    None => {
                        let shape = ResBlockShape {
                            cin: c,
                            cout: c,
                            emb_dim: e,
                            conv1: true,
                        };
                        init_res_block(&mut p, &prefix, shape, rng)
                    }
                }
            }
            if l + 1 < cfg.levels() && cfg.level_channels(l + 1) != c {
                init_conv(&mut p, &format!("down.{l}"), 1, c, cfg.level_channels(l + 1), rng);
            }
        }
        let cmid = cfg.level_channels(cfg.levels() - 1);
        init_q_resnet_block(&mut p, "mid", cmid, e, &self.bottleneck_cfg, self.bottleneck.as_ref(), rng);
        let mut prev = cmid;
        for l in (0..cfg.levels()).rev() {
            let c = cfg.level_channels(l);
            for i in 0..cfg.res_blocks_per_level {
                let cin = if i == 0 { prev + c } else { c };
                let shape = ResBlockShape {
                    cin,
                    cout: c,
                    emb_dim: e,
                    conv1: true,
                };
                init_res_block(&mut p, &format!("dec.{l}.{i}"), shape, rng);
            }
            prev = c;
        }
        init_norm(&mut p, "out.norm", prev);
        p.init_const("out.conv.w", &[3, 3, prev, cfg.in_channels], 0.0);
        p.init_const("out.conv.b", &[cfg.in_channels], 0.0);
        p
    }

    /// Confirms that `params` has exactly the paths, kinds and shapes this
    /// model creates.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let want = self.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        for (path, p) in want.iter() {
            let got = params
                .get(path)
                .map_err(|_| Error::invalid(format!("parameter `{path}` is missing for this model configuration")))?;
            if got.kind != p.kind || got.value.shape() != p.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{path}` is {} {:?}, model expects {} {:?}",
                    got.kind.name(),
                    got.value.shape(),
                    p.kind.name(),
                    p.value.shape()
                )));
            }
        }
        if let Some((extra, _)) = params.iter().find(|(k, _)| !want.contains(k)) {
            return Err(Error::invalid(format!("parameter `{extra}` does not belong to this model configuration")));
        }
        Ok(())
    }

    fn check_batch(&self, x_t: &Tensor, t: &[usize], y: &[usize], self_cond: Option<&Tensor>) -> Result<usize> {
        let (b, h, w, c) = x_t.nhwc()?;
        let s = self.cfg.image_size;
        if (h, w, c) != (s, s, self.cfg.in_channels) {
            return Err(Error::shape(
                "denoiser",
                format!("x_t is {:?}, model expects [B,{s},{s},{}]", x_t.shape(), self.cfg.in_channels),
            ));
        }
        if t.len() != b || y.len() != b {
            return Err(Error::shape(
                "denoiser",
                format!("batch of {b} with {} steps and {} labels", t.len(), y.len()),
            ));
        }
        if let Some(&bad) = t.iter().find(|&&v| v == 0 || v > self.timesteps) {
            return Err(Error::OutOfRange {
                what: "diffusion step",
                index: bad,
                size: self.timesteps + 1,
            });
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= self.cfg.num_classes) {
            return Err(Error::OutOfRange {
                what: "class labels",
                index: bad,
                size: self.cfg.num_classes,
            });
        }
        if let Some(sc) = self_cond {
            if sc.shape() != x_t.shape() {
                return Err(Error::shape(
                    "denoiser",
                    format!("self-conditioning input {:?} vs x_t {:?}", sc.shape(), x_t.shape()),
                ));
            }
        }
        Ok(b)
    }

    /// Records the forward pass on `g` and returns `ε̂: [B,H,W,3]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        self_cond: Option<&Tensor>,
    ) -> Result<Var> {
        let bs = self.check_batch(x_t, t, y, self_cond)?;
        let cfg = &self.cfg;
        let temb: Vec<f64> = t
            .iter()
            .flat_map(|&s| sinusoidal(s as f64, cfg.time_embed_dim))
            .collect();
        let temb = g.constant(Tensor::new(&[bs, cfg.time_embed_dim], temb)?);
        let e = linear(g, b, "time.fc1", temb)?;
        let e = g.silu(e);
        let e = linear(g, b, "time.fc2", e)?;
        let table = b.var(g, "class_emb")?;
        let c = g.embed_lookup(table, y)?;
        let emb = g.add(e, c)?;
        let emb_act = g.silu(emb);

        let mut h = g.constant(x_t.clone());
        if cfg.self_condition {
            let sc = match self_cond {
                Some(sc) => sc.clone(),
                None => Tensor::zeros(x_t.shape()),
            };
            let sc = g.constant(sc);
            h = g.concat_channels(h, sc)?;
        }
        h = conv(g, b, "conv_in", h)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            for i in 0..cfg.res_blocks_per_level {
                let prefix = format!("enc.{l}.{i}");
                h = match self.quanv_at(l, i) {
                    Some(layer) => quan_resnet_block(g, b, &prefix, h, emb_act, Some(layer))?,
                    None => res_block(g, b, &prefix, h, emb_act)?,
                };
            }
            skips.push(h);
            h = g.downsample_avg(h)?;
            let down = format!("down.{l}");
            if b.params().contains(&format!("{down}.w")) {
                h = conv(g, b, &down, h)?;
            }
        }
        h = q_resnet_block(g, b, "mid", h, emb_act, &self.bottleneck_cfg, self.bottleneck.as_ref())?;
        for l in (0..cfg.levels()).rev() {
            h = g.upsample_nearest(h)?;
            h = g.concat_channels(h, skips[l])?;
            for i in 0..cfg.res_blocks_per_level {
                h = res_block(g, b, &format!("dec.{l}.{i}"), h, emb_act)?;
            }
        }
        h = norm(g, b, "out.norm", h)?;
        h = g.silu(h);
        conv(g, b, "out.conv", h)
    }

    /// Forward-only evaluation; also returns the number of circuit runs.
    pub fn predict(
        &self,
        params: &ModelParams,
        x_t: &Tensor,
        t: &[usize],
        y: &[usize],
        self_cond: Option<&Tensor>,
    ) -> Result<(Tensor, u64)> {
        let mut g = Graph::inference();
        let mut b = Binder::new(params);
        let out = self.forward(&mut g, &mut b, x_t, t, y, self_cond)?;
        let evals = g.circuit_evals();
        Ok((g.value(out).clone(), evals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(pos: QuantumPosition, rho: f64) -> Denoiser {
        let cfg = DenoiserConfig {
            quantum_position: pos,
            ..Default::default()
        };
        let bott = BottleneckConfig {
            rho,
            ..Default::default()
        };
        Denoiser::new(cfg, QuanvConfig::default(), bott, 100).unwrap()
    }

    fn randomize_output(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        for v in params.get_mut("out.conv.w").unwrap().value.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new(&[n, 8, 8, 3], (0..n * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pos in [QuantumPosition::None, QuantumPosition::P1Encoder, QuantumPosition::P2Deeper, QuantumPosition::BottleneckOnly] {
            let m = model(pos, 0.5);
            let p = m.init_params(&mut rng);
            let x = batch(&mut rng, 2);
            let (out, _) = m.predict(&p, &x, &[1, 100], &[0, 3], None).unwrap();
            assert_eq!(out.shape(), [2, 8, 8, 3]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn classical_model_runs_no_circuits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = model(QuantumPosition::None, 0.5);
        let p = m.init_params(&mut rng);
        assert_eq!(p.count(ParamKind::Quantum), 0);
        let (_, evals) = m.predict(&p, &batch(&mut rng, 2), &[3, 4], &[1, 2], None).unwrap();
        assert_eq!(evals, 0);
        assert!(!m.is_hybrid());
    }

    #[test]
    fn hybrid_circuit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // p1: 16 patches x 4 groups; bottleneck rho 0.5 of 24 -> 12 channels -> 4 groups
        let m = model(QuantumPosition::P1Encoder, 0.5);
        let p = m.init_params(&mut rng);
        assert_eq!(p.count(ParamKind::Quantum), 68);
        let (_, evals) = m.predict(&p, &batch(&mut rng, 2), &[3, 4], &[1, 2], None).unwrap();
        assert_eq!(evals, 2 * (64 + 4));
        // p2: 4 patches x 8 groups
        let m = model(QuantumPosition::P2Deeper, 0.0);
        let p = m.init_params(&mut rng);
        let (_, evals) = m.predict(&p, &batch(&mut rng, 1), &[3], &[1], None).unwrap();
        assert_eq!(evals, 32);
    }

    #[test]
    fn conditioning_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(QuantumPosition::None, 0.0);
        let mut p = m.init_params(&mut rng);
        randomize_output(&mut p, &mut rng);
        let x = batch(&mut rng, 1);
        let (a, _) = m.predict(&p, &x, &[10], &[0], None).unwrap();
        let (b, _) = m.predict(&p, &x, &[10], &[1], None).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        let (c, _) = m.predict(&p, &x, &[11], &[0], None).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn self_condition_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DenoiserConfig {
            self_condition: true,
            ..Default::default()
        };
        let m = Denoiser::new(cfg, QuanvConfig::default(), BottleneckConfig::default(), 10).unwrap();
        let mut p = m.init_params(&mut rng);
        assert_eq!(p.get("conv_in.w").unwrap().value.shape(), [3, 3, 6, 12]);
        randomize_output(&mut p, &mut rng);
        let x = batch(&mut rng, 1);
        let zeros = Tensor::zeros(x.shape());
        let (a, _) = m.predict(&p, &x, &[2], &[0], None).unwrap();
        let (b, _) = m.predict(&p, &x, &[2], &[0], Some(&zeros)).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.predict(&p, &x, &[2], &[0], Some(&x)).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn rejects_invalid_inputs_and_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = model(QuantumPosition::None, 0.0);
        let p = m.init_params(&mut rng);
        let x = batch(&mut rng, 1);
        assert!(m.predict(&p, &x, &[0], &[0], None).is_err());
        assert!(m.predict(&p, &x, &[101], &[0], None).is_err());
        assert!(m.predict(&p, &x, &[5], &[4], None).is_err());
        assert!(m.predict(&p, &x, &[5, 6], &[0, 1], None).is_err());
        let bad = DenoiserConfig {
            image_size: 6,
            ..Default::default()
        };
        assert!(Denoiser::new(bad, QuanvConfig::default(), BottleneckConfig::default(), 10).is_err());
        let bad = DenoiserConfig {
            base_channels: 8,
            ..Default::default()
        };
        assert!(Denoiser::new(bad, QuanvConfig::default(), BottleneckConfig::default(), 10).is_err());
        let big = DenoiserConfig {
            image_size: 16,
            quantum_position: QuantumPosition::BottleneckOnly,
            ..Default::default()
        };
        let bott = BottleneckConfig {
            rho: 0.5,
            ..Default::default()
        };
        assert!(Denoiser::new(big, QuanvConfig::default(), bott, 10).is_err());
    }

    #[test]
    fn quantum_position_names() {
        for (s, p) in [
            ("none", QuantumPosition::None),
            ("p1_encoder", QuantumPosition::P1Encoder),
            ("p2_deeper", QuantumPosition::P2Deeper),
            ("bottleneck_only", QuantumPosition::BottleneckOnly),
        ] {
            assert_eq!(s.parse::<QuantumPosition>().unwrap(), p);
        }
        assert!("p3".parse::<QuantumPosition>().is_err());
    }
}

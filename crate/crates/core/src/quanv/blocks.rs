use rand::Rng;

use super::{BottleneckConfig, QuantumLayer};
use crate::error::{Error, Result};
use crate::nnet::blocks::{
    conv, init_conv, init_linear, init_norm, init_res_block, linear, norm, res_block,
    res_block_with, ResBlockShape,
};
use crate::nnet::{Binder, Graph, ModelParams, ParamKind, Tensor, Var};

fn theta_path(prefix: &str) -> String {
    format!("{prefix}.theta")
}

/// Residual block of width `c` whose first convolution is a quanvolution.
pub fn init_quan_resnet_block<R: Rng + ?Sized>(
    params: &mut ModelParams,
    prefix: &str,
    c: usize,
    emb_dim: usize,
    layer: &QuantumLayer,
    rng: &mut R,
) {
    let shape = ResBlockShape {
        cin: c,
        cout: c,
        emb_dim,
        conv1: false,
    };
    init_res_block(params, prefix, shape, rng);
    let theta = layer.circuit().spec().init_params(rng);
    params.insert(
        theta_path(prefix),
        ParamKind::Quantum,
        Tensor::new(&[theta.len()], theta).expect("sized"),
    );
}

/// `x + conv2(silu(norm2(Q(silu(norm1(x))) + shift)))` with `Q` the
/// quanvolution. With `layer = None` the block runs its classical
/// `conv1` instead (which must then exist in the parameter set).
pub fn quan_resnet_block(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    emb_act: Var,
    layer: Option<&QuantumLayer>,
) -> Result<Var> {
    match layer {
        Some(layer) => {
            let theta = b.var(g, &theta_path(prefix))?;
            res_block_with(g, b, prefix, x, emb_act, |g, _, h| layer.apply(g, h, theta))
        }
        None => res_block(g, b, prefix, x, emb_act),
    }
}

/// Bottleneck block of width `c`. With no quantum channels it is exactly the
/// classical residual block.
pub fn init_q_resnet_block<R: Rng + ?Sized>(
    params: &mut ModelParams,
    prefix: &str,
    c: usize,
    emb_dim: usize,
    cfg: &BottleneckConfig,
    layer: Option<&QuantumLayer>,
    rng: &mut R,
) {
    let q = if layer.is_some() { cfg.quantum_channels(c) } else { 0 };
    let Some(layer) = layer.filter(|_| q > 0) else {
        let shape = ResBlockShape {
            cin: c,
            cout: c,
            emb_dim,
            conv1: true,
        };
        init_res_block(params, prefix, shape, rng);
        return;
    };
    init_norm(params, &format!("{prefix}.norm1"), c);
    init_linear(params, &format!("{prefix}.emb"), emb_dim, c, rng);
    let theta = layer.circuit().spec().init_params(rng);
    params.insert(
        theta_path(prefix),
        ParamKind::Quantum,
        Tensor::new(&[theta.len()], theta).expect("sized"),
    );
    let cc = c - q;
    if cc > 0 {
        init_conv(params, &format!("{prefix}.conv1"), 3, cc, cc, rng);
        init_norm(params, &format!("{prefix}.norm2"), cc);
        init_conv(params, &format!("{prefix}.conv2"), 3, cc, cc, rng);
    }
}

/// The first `⌊rho·C/3⌋·3` channels of `silu(norm1(x)) + shift` go through
/// one circuit per 3-channel group on the 2×2 map; the rest follow the
/// classical `conv1 → +shift → norm2 → silu → conv2` path. The skip spans
/// the whole block.
pub fn q_resnet_block(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    emb_act: Var,
    cfg: &BottleneckConfig,
    layer: Option<&QuantumLayer>,
) -> Result<Var> {
    let (bs, h, w, c) = g.value(x).nhwc()?;
    let q = if layer.is_some() { cfg.quantum_channels(c) } else { 0 };
    let Some(layer) = layer.filter(|_| q > 0) else {
        return res_block(g, b, prefix, x, emb_act);
    };
    if (h, w) != (2, 2) {
        return Err(Error::shape(
            "q_resnet_block",
            format!("bottleneck must be 2x2, got {h}x{w}"),
        ));
    }
    let a = norm(g, b, &format!("{prefix}.norm1"), x)?;
    let a = g.silu(a);
    let shift = linear(g, b, &format!("{prefix}.emb"), emb_act)?;
    let shift = g.reshape(shift, &[bs, 1, 1, c])?;

    let theta = b.var(g, &theta_path(prefix))?;
    let aq = g.slice_channels(a, 0, q)?;
    let sq = g.slice_channels(shift, 0, q)?;
    let sq = g.reshape(sq, &[bs, q])?;
    let aq = g.add_channels(aq, sq)?;
    let hq = layer.apply(g, aq, theta)?;

    let cc = c - q;
    let out = if cc > 0 {
        let ac = g.slice_channels(a, q, cc)?;
        let hc = conv(g, b, &format!("{prefix}.conv1"), ac)?;
        let sc = g.slice_channels(shift, q, cc)?;
        let sc = g.reshape(sc, &[bs, cc])?;
        let hc = g.add_channels(hc, sc)?;
        let hc = norm(g, b, &format!("{prefix}.norm2"), hc)?;
        let hc = g.silu(hc);
        let hc = conv(g, b, &format!("{prefix}.conv2"), hc)?;
        g.concat_channels(hq, hc)?
    } else {
        hq
    };
    g.add(out, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quanv::QuanvConfig;
    use crate::qsim::{AnsatzFamily, GradMethod};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(g: &mut Graph, bs: usize, e: usize, rng: &mut ChaCha8Rng) -> Var {
        let data = (0..bs * e).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.constant(Tensor::new(&[bs, e], data).unwrap())
    }

    fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bump_weights(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        for (_, p) in params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn bypass_reproduces_classical_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        let mut params = ModelParams::new();
        let shape = ResBlockShape {
            cin: 6,
            cout: 6,
            emb_dim: 8,
            conv1: true,
        };
        init_res_block(&mut params, "blk", shape, &mut rng);
        let theta = layer.circuit().spec().init_params(&mut rng);
        params.insert("blk.theta", ParamKind::Quantum, Tensor::new(&[34], theta).unwrap());
        bump_weights(&mut params, &mut rng);
        let xt = input(&[2, 4, 4, 6], &mut rng);

        let mut g = Graph::inference();
        let e = emb(&mut g, 2, 8, &mut ChaCha8Rng::seed_from_u64(9));
        let x = g.constant(xt.clone());
        let mut b = Binder::new(&params);
        let bypass = quan_resnet_block(&mut g, &mut b, "blk", x, e, None).unwrap();
        let classical = res_block(&mut g, &mut b, "blk", x, e).unwrap();
        assert_eq!(g.value(bypass), g.value(classical));
        let quantum = quan_resnet_block(&mut g, &mut b, "blk", x, e, Some(&layer)).unwrap();
        assert_eq!(g.shape(quantum), [2, 4, 4, 6]);
        assert!(g.value(quantum).max_abs_diff(g.value(classical)) > 1e-6);
        assert_eq!(g.circuit_evals(), 2 * 4 * 2);
    }

    #[test]
    fn skip_wiring_with_zero_input() {
        // conv2 zeroed: the block output is exactly the input
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        let mut params = ModelParams::new();
        init_quan_resnet_block(&mut params, "blk", 3, 4, &layer, &mut rng);
        for v in params.get_mut("blk.conv2.w").unwrap().value.data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::inference();
        let e = emb(&mut g, 1, 4, &mut rng);
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let mut b = Binder::new(&params);
        let y = quan_resnet_block(&mut g, &mut b, "blk", x, e, Some(&layer)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.circuit_evals(), 1);
    }

    #[test]
    fn rho_zero_is_classical_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        let cfg = BottleneckConfig {
            rho: 0.0,
            ..Default::default()
        };
        let mut params = ModelParams::new();
        init_q_resnet_block(&mut params, "mid", 6, 4, &cfg, Some(&layer), &mut rng);
        assert_eq!(params.count(ParamKind::Quantum), 0);
        bump_weights(&mut params, &mut rng);
        let mut g = Graph::inference();
        let e = emb(&mut g, 2, 4, &mut rng);
        let x = g.constant(input(&[2, 2, 2, 6], &mut rng));
        let mut b = Binder::new(&params);
        let y = q_resnet_block(&mut g, &mut b, "mid", x, e, &cfg, Some(&layer)).unwrap();
        let r = res_block(&mut g, &mut b, "mid", x, e).unwrap();
        assert_eq!(g.value(y), g.value(r));
        assert_eq!(g.circuit_evals(), 0);
    }

    #[test]
    fn circuit_counts_follow_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        for (rho, c, evals) in [(1.0, 3, 1), (0.5, 12, 2), (1.0, 12, 4)] {
            let cfg = BottleneckConfig {
                rho,
                ..Default::default()
            };
            let mut params = ModelParams::new();
            init_q_resnet_block(&mut params, "mid", c, 4, &cfg, Some(&layer), &mut rng);
            let mut g = Graph::inference();
            let e = emb(&mut g, 1, 4, &mut rng);
            let x = g.constant(input(&[1, 2, 2, c], &mut rng));
            let mut b = Binder::new(&params);
            let y = q_resnet_block(&mut g, &mut b, "mid", x, e, &cfg, Some(&layer)).unwrap();
            assert_eq!(g.shape(y), [1, 2, 2, c]);
            assert_eq!(g.circuit_evals(), evals, "rho {rho}, C {c}");
        }
    }

    #[test]
    fn bottleneck_requires_two_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = QuantumLayer::new(QuanvConfig::default(), GradMethod::Adjoint).unwrap();
        let cfg = BottleneckConfig {
            rho: 1.0,
            ..Default::default()
        };
        let mut params = ModelParams::new();
        init_q_resnet_block(&mut params, "mid", 3, 4, &cfg, Some(&layer), &mut rng);
        let mut g = Graph::inference();
        let e = emb(&mut g, 1, 4, &mut rng);
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let mut b = Binder::new(&params);
        assert!(q_resnet_block(&mut g, &mut b, "mid", x, e, &cfg, Some(&layer)).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qcfg = QuanvConfig {
            family: AnsatzFamily::FQConv,
            ..Default::default()
        };
        let layer = QuantumLayer::new(qcfg, GradMethod::Adjoint).unwrap();
        let bcfg = BottleneckConfig {
            rho: 0.5,
            family: AnsatzFamily::FQConv,
            n_layers: 1,
        };
        let mut params = ModelParams::new();
        init_quan_resnet_block(&mut params, "enc", 6, 4, &layer, &mut rng);
        init_q_resnet_block(&mut params, "mid", 6, 4, &bcfg, Some(&layer), &mut rng);
        bump_weights(&mut params, &mut rng);
        let xt = input(&[1, 4, 4, 6], &mut rng);
        let et = input(&[1, 4], &mut rng);
        let target = input(&[1, 2, 2, 6], &mut rng);
        let run = |params: &ModelParams, rec: bool| {
            let mut g = if rec { Graph::new() } else { Graph::inference() };
            let mut b = Binder::new(params);
            let x = g.constant(xt.clone());
            let e = g.constant(et.clone());
            let h = quan_resnet_block(&mut g, &mut b, "enc", x, e, Some(&layer)).unwrap();
            let h = g.downsample_avg(h).unwrap();
            let h = q_resnet_block(&mut g, &mut b, "mid", h, e, &bcfg, Some(&layer)).unwrap();
            let l = g.weighted_sq_err(h, &target, &[1.0]).unwrap();
            let grads = rec.then(|| b.collect(&g.backward(l).unwrap()));
            (g.value(l).data()[0], grads)
        };
        let grads = run(&params, true).1.unwrap();
        let eps = 1e-5;
        for path in ["enc.theta", "mid.theta", "enc.conv2.w", "mid.conv1.w", "mid.emb.w"] {
            let n = params.get(path).unwrap().value.len();
            for i in (0..n).step_by((n / 7).max(1)) {
                let mut p = params.clone();
                p.get_mut(path).unwrap().value.data_mut()[i] += eps;
                let up = run(&p, false).0;
                p.get_mut(path).unwrap().value.data_mut()[i] -= 2.0 * eps;
                let dn = run(&p, false).0;
                let fd = (up - dn) / (2.0 * eps);
                let an = grads[path][i];
                assert!(
                    (fd - an).abs() <= 1e-5_f64.max(1e-3 * fd.abs().max(an.abs())),
                    "{path}[{i}]: fd {fd} vs {an}"
                );
            }
        }
    }
}

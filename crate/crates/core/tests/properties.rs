use approx::assert_relative_eq;
use num_complex::Complex64;
use proptest::prelude::*;

use qdiffusion::data::{batch_for_step, make_toy_dataset, split, to_level, to_model_domain};
use qdiffusion::diffusion::{make_schedule, posterior_mean, predict_x0, q_sample, ScheduleKind};
use qdiffusion::metrics::{
    channel_histograms, classification_report, fid_features, inception_style_score, FeatureSet,
};
use qdiffusion::nnet::{Checkpoint, ModelParams, ParamKind, Tensor};
use qdiffusion::qsim::{AnsatzFamily, AnsatzSpec, Circuit, Gate, GateKind, Statevector};

fn kind() -> impl Strategy<Value = GateKind> {
    prop_oneof![
        Just(GateKind::X),
        Just(GateKind::Y),
        Just(GateKind::Z),
        Just(GateKind::H),
        Just(GateKind::Rx),
        Just(GateKind::Ry),
        Just(GateKind::Rz),
        Just(GateKind::Cnot),
        Just(GateKind::Swap),
        Just(GateKind::CRx),
        Just(GateKind::CRz),
    ]
}

fn gate(n: usize) -> impl Strategy<Value = Gate> {
    (kind(), 0..n, 1..n, -7.0..7.0f64).prop_map(move |(k, a, off, theta)| {
        let targets = if k.arity() == 2 { vec![a, (a + off) % n] } else { vec![a] };
        if k.is_parameterized() {
            Gate::rotation(k, &targets, theta)
        } else {
            Gate::new(k, &targets)
        }
    })
}

fn family() -> impl Strategy<Value = AnsatzFamily> {
    prop_oneof![
        Just(AnsatzFamily::HQConv),
        Just(AnsatzFamily::FQConv),
        Just(AnsatzFamily::OnlyRotations)
    ]
}

fn schedule_kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_preserve_the_norm(gates in prop::collection::vec(gate(4), 1..30)) {
        let mut s = Statevector::zero(4).unwrap();
        s.apply(&Gate::new(GateKind::H, &[0])).unwrap();
        for g in &gates {
            s.apply(g).unwrap();
        }
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_followed_by_its_inverse_is_identity(g in gate(3)) {
        let amps: Vec<Complex64> = (0..8).map(|i| Complex64::new(i as f64 + 1.0, 0.5 - i as f64)).collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let start = Statevector::from_amplitudes(amps.iter().map(|a| a / norm).collect()).unwrap();
        let mut s = start.clone();
        s.apply(&g).unwrap();
        let inverse = match g.angle {
            Some(a) => Gate::rotation(g.kind, &g.targets, -a),
            None => g.clone(),
        };
        s.apply(&inverse).unwrap();
        for (a, b) in s.amplitudes().iter().zip(start.amplitudes()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn readout_lies_in_unit_interval(
        fam in family(),
        layers in 1usize..3,
        seed in any::<u64>(),
        x in prop::collection::vec(-3.0..3.0f64, 6),
    ) {
        use rand::SeedableRng;
        let spec = AnsatzSpec::new(fam, 6, layers).unwrap();
        let params = spec.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let circuit = Circuit::new(spec).unwrap();
        for v in circuit.run(&params, &x).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing(kind in schedule_kind(), steps in 2usize..1500) {
        let s = make_schedule(kind, steps).unwrap();
        prop_assert!(s.alpha_bar[0] < 1.0);
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn q_sample_is_the_closed_form(
        kind in schedule_kind(),
        t in 1usize..=200,
        x in -1.0..1.0f64,
        e in -3.0..3.0f64,
    ) {
        let s = make_schedule(kind, 200).unwrap();
        let out = q_sample(&Tensor::full(&[1, 1], x), &[t], &Tensor::full(&[1, 1], e), &s).unwrap();
        let ab = s.alpha_bar[t - 1];
        assert_relative_eq!(out.data()[0], ab.sqrt() * x + (1.0 - ab).sqrt() * e, epsilon = 1e-14);
    }

    #[test]
    fn exact_noise_recovers_the_clean_image(
        t in 1usize..=200,
        x in prop::collection::vec(-1.0..1.0f64, 6),
        e in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        let s = make_schedule(ScheduleKind::Cosine, 200).unwrap();
        let x0 = Tensor::new(&[1, 6], x).unwrap();
        let eps = Tensor::new(&[1, 6], e).unwrap();
        let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
        let back = predict_x0(&xt, &[t], &eps, &s).unwrap();
        prop_assert!(back.max_abs_diff(&x0) < 1e-6);
        // the posterior mean interpolates between x_t and x0
        let mu = posterior_mean(&xt, &[t], &x0, &s).unwrap();
        prop_assert!(mu.all_finite());
    }

    #[test]
    fn histograms_integrate_to_one(
        bins in 1usize..100,
        v in prop::collection::vec(0.0..=1.0f64, 3..300),
    ) {
        let n = v.len() / 3 * 3;
        let t = Tensor::new(&[n / 3, 3], v[..n].to_vec()).unwrap();
        for h in channel_histograms(&t, bins).unwrap() {
            prop_assert!((h.density.iter().sum::<f64>() / bins as f64 - 1.0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&h.mean) && (0.0..=1.0).contains(&h.median));
        }
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(
        a in prop::collection::vec(-2.0..2.0f64, 40),
        b in prop::collection::vec(-2.0..2.0f64, 40),
    ) {
        let fa = FeatureSet::new(20, 2, a, "p").unwrap();
        let fb = FeatureSet::new(20, 2, b, "p").unwrap();
        let ab = fid_features(&fa, &fb).unwrap();
        let ba = fid_features(&fb, &fa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        prop_assert!(fid_features(&fa, &fa).unwrap().abs() < 1e-8);
    }

    #[test]
    fn inception_score_is_between_one_and_class_count(
        rows in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 4), 10..60),
    ) {
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let is = inception_style_score(&probs, 1).unwrap();
        prop_assert!(is.mean >= 1.0 - 1e-12 && is.mean <= 4.0 + 1e-12);
    }

    #[test]
    fn report_accuracy_is_the_confusion_trace(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200),
    ) {
        let (intended, predicted): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let r = classification_report(&intended, &predicted, 5).unwrap();
        let trace: usize = (0..5).map(|c| r.confusion[c][c]).sum();
        prop_assert_eq!(r.total(), pairs.len());
        prop_assert!((r.accuracy - trace as f64 / pairs.len() as f64).abs() < 1e-15);
        for (c, m) in r.per_class.iter().enumerate() {
            prop_assert_eq!(m.support, r.confusion[c].iter().sum::<usize>());
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }

    #[test]
    fn splits_partition_every_class(seed in any::<u64>(), f in 0.2..0.8f64) {
        let d = make_toy_dataset(10, 4, 3, 0).unwrap();
        let parts = split(&d, &[f, 1.0 - f], seed).unwrap();
        let mut all = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn training_batches_come_from_the_split(
        n in 1usize..50,
        bs in 1usize..16,
        seed in any::<u64>(),
        step in 0u64..500,
    ) {
        let idx: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let b = batch_for_step(&idx, bs, seed, step);
        prop_assert!(!b.is_empty() && b.len() <= bs);
        prop_assert!(b.iter().all(|i| idx.contains(i)));
    }

    #[test]
    fn pixel_levels_round_trip(level in any::<u8>()) {
        prop_assert_eq!(to_level(to_model_domain(level)), level);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        values in prop::collection::vec(any::<f64>(), 1..40),
        step in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let mut params = ModelParams::new();
        params.insert("w", ParamKind::Classical, Tensor::new(&[values.len()], values.clone()).unwrap());
        params.insert("q", ParamKind::Quantum, Tensor::new(&[1], vec![values[0]]).unwrap());
        let ck = Checkpoint { config: "[a]\nb = 1\n".into(), seed, step, params, ..Default::default() };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let got = back.params.get("w").unwrap().value.data().to_vec();
        prop_assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

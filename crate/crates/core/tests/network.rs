use d3d_core::decoders::{build_decoder, predict_flow_graph, DecoderKind, DecoderOptions};
use d3d_core::gradcheck::{finite_difference_check, parameter_check};
use d3d_core::net::{count_flops, FeatureTap};
use d3d_core::{Graph, LayerName, Network, NetworkConfig, Parameters, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Activation shapes of the default 8x32x32, width-8 network.
const DEFAULT_SHAPES: [(LayerName, [usize; 4]); 10] = [
    (LayerName::Conv1, [8, 8, 16, 16]),
    (LayerName::Conv2C, [8, 8, 8, 8]),
    (LayerName::Block3A, [16, 8, 8, 8]),
    (LayerName::Block3B, [16, 8, 8, 8]),
    (LayerName::Block4A, [32, 4, 4, 4]),
    (LayerName::Block4C, [32, 4, 4, 4]),
    (LayerName::Block4F, [64, 4, 4, 4]),
    (LayerName::Block5B, [64, 2, 2, 2]),
    (LayerName::GlobalPool, [64, 1, 1, 1]),
    (LayerName::Logits, [4, 1, 1, 1]),
];

#[test]
fn default_layer_shapes_and_strides() {
    let net = Network::build(NetworkConfig::default()).unwrap();
    let clip = random(&[3, 8, 32, 32], 1);
    let (logits, taps) = net.forward(&clip, &LayerName::ALL).unwrap();
    assert_eq!(logits.shape(), &[4]);
    for ((name, shape), tap) in DEFAULT_SHAPES.iter().zip(&taps) {
        assert_eq!(tap.layer, *name);
        assert_eq!(tap.activation.shape(), &shape[..], "{name:?}");
        assert_eq!(net.layer_dims(*name), *shape);
        assert_eq!(tap.temporal_stride, 8 / shape[1]);
        assert_eq!(tap.spatial_stride, 32 / shape[2]);
    }
    assert_eq!(net.layer_strides(LayerName::Block3A), (1, 4));
    assert_eq!(net.layer_strides(LayerName::Block5B), (4, 16));
}

#[test]
fn logits_tap_equals_logits() {
    let net = Network::build(NetworkConfig::default()).unwrap();
    let clip = random(&[3, 8, 32, 32], 2);
    let (logits, taps) = net.forward(&clip, &[LayerName::Logits]).unwrap();
    let FeatureTap { activation, .. } = &taps[0];
    assert_eq!(activation.data(), logits.data());
}

#[test]
fn build_is_seed_deterministic() {
    let a = Network::build(NetworkConfig::default()).unwrap();
    let b = Network::build(NetworkConfig::default()).unwrap();
    let c = Network::build(NetworkConfig { seed: 1, ..Default::default() }).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
    let clip = random(&[3, 8, 32, 32], 3);
    assert_eq!(a.logits(&clip).unwrap().data(), b.logits(&clip).unwrap().data());
}

#[test]
fn zero_clip_logits_equal_classifier_bias() {
    let net = Network::build(NetworkConfig::default()).unwrap();
    let z = net.logits(&Tensor::zeros(&[3, 8, 32, 32])).unwrap();
    assert_eq!(z.data(), net.params().get("Logits.b").unwrap().data());
}

#[test]
fn wrong_input_shape_names_axis() {
    let net = Network::build(NetworkConfig::default()).unwrap();
    let e = net.logits(&Tensor::zeros(&[3, 8, 32, 16])).unwrap_err().to_string();
    assert!(e.contains("width"), "{e}");
}

#[test]
fn flop_count_matches_shape_table() {
    let net = Network::build(NetworkConfig::default()).unwrap();
    let mut c_in = 3;
    let mut want = 0u64;
    for (_, [c, t, h, w]) in &DEFAULT_SHAPES[..8] {
        let cells = (t * h * w) as u64;
        want += cells * (c_in * c * 9) as u64 + cells * (c * c * 3) as u64;
        c_in = *c;
    }
    want += 64 * 4;
    assert_eq!(count_flops(&net), want);
    let wide = Network::build(NetworkConfig { seed: 9, ..Default::default() }).unwrap();
    assert_eq!(count_flops(&wide), want);
}

#[test]
fn spatial_only_network_accepts_single_frames() {
    let cfg = NetworkConfig { clip: [1, 32, 32], spatial_only: true, ..Default::default() };
    let net = Network::build(cfg).unwrap();
    assert!(net.params().get("Conv1.temporal.w").is_none());
    assert_eq!(net.logits(&random(&[3, 1, 32, 32], 4)).unwrap().shape(), &[4]);
}

fn small_config(seed: u64) -> NetworkConfig {
    NetworkConfig { base_width: 4, clip: [4, 16, 16], seed, ..Default::default() }
}

#[test]
fn network_input_gradients_match_finite_differences() {
    for seed in 0..5 {
        let net = Network::build(small_config(seed)).unwrap();
        let x = random(&[3, 4, 16, 16], 100 + seed);
        let label = seed as usize % 4;
        let r = finite_difference_check(
            |g, v| {
                let o = net.forward_graph(g, v[0], false, &[])?;
                g.softmax_cross_entropy(o.logits, label)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.passed(1e-3), "seed {seed}: {r:?}");
    }
}

fn unscope(joint: &Parameters, prefix: &str, dst: &mut Parameters) {
    for (name, t) in joint.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            *dst.get_mut(rest).unwrap() = t.clone();
        }
    }
}

#[test]
fn network_and_decoder_parameter_gradients_match_finite_differences() {
    for seed in 0..5 {
        let net = Network::build(small_config(seed)).unwrap().with_scope("backbone.");
        let dec = build_decoder(DecoderKind::Spatial, 8, seed, &DecoderOptions { zero_final: false, ..Default::default() })
            .unwrap()
            .with_scope("decoder.");
        let x = random(&[3, 4, 16, 16], 200 + seed);
        let target = random(&[3, 4, 4, 4], 300 + seed).map(f32::abs);
        let mut joint = Parameters::new();
        for (n, t) in net.params().iter() {
            joint.insert(format!("backbone.{n}"), t.clone()).unwrap();
        }
        for (n, t) in dec.params().iter() {
            joint.insert(format!("decoder.{n}"), t.clone()).unwrap();
        }
        let r = parameter_check(&joint, 3, 5e-4, |p, g, trainable| {
            let mut n = net.clone();
            unscope(p, "backbone.", n.params_mut());
            let mut d = dec.clone();
            unscope(p, "decoder.", d.params_mut());
            let xi = g.input(x.clone());
            let pred = predict_flow_graph(g, &n, &d, xi, LayerName::Block3A, trainable)?;
            g.flow_loss(pred, &target)
        })
        .unwrap();
        assert!(r.passed(1e-3), "seed {seed}: {r:?}");
        assert!(r.checked > 50);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn permuting_classifier_rows_permutes_logits(seed in 0u64..100, shift in 1usize..4) {
        let net = Network::build(NetworkConfig { seed, ..Default::default() }).unwrap();
        let clip = random(&[3, 8, 32, 32], seed + 7);
        let z = net.logits(&clip).unwrap();
        let mut p = net.params().clone();
        let w = p.get("Logits.w").unwrap().clone();
        let b = p.get("Logits.b").unwrap().clone();
        let k = 4;
        let row = w.len() / k;
        let perm = |i: usize| (i + shift) % k;
        let pw = p.get_mut("Logits.w").unwrap().data_mut();
        for i in 0..k {
            pw[perm(i) * row..(perm(i) + 1) * row].copy_from_slice(&w.data()[i * row..(i + 1) * row]);
        }
        let pb = p.get_mut("Logits.b").unwrap().data_mut();
        for i in 0..k {
            pb[perm(i)] = b.data()[i];
        }
        let permuted = Network::from_parameters(net.config().clone(), p).unwrap();
        let zp = permuted.logits(&clip).unwrap();
        for i in 0..k {
            prop_assert_eq!(zp.data()[perm(i)], z.data()[i]);
        }
    }
}

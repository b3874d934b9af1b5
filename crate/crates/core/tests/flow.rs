use std::f32::consts::PI;

use approx::assert_abs_diff_eq;
use d3d_core::flow_repr::*;
use d3d_core::tvl1::*;
use d3d_core::Tensor;
use proptest::prelude::*;

/// Smooth periodic texture on a 32-pixel torus, sampled at `(x - dx, y - dy)`.
fn texture(h: usize, w: usize, dx: f32, dy: f32) -> Tensor {
    let p = 2.0 * PI / 32.0;
    Tensor::from_fn(&[h, w], |i| {
        let x = (i % w) as f32 - dx;
        let y = (i / w) as f32 - dy;
        0.5 + 0.15 * (p * (2.0 * x + y)).sin() + 0.12 * (p * (3.0 * y - x) + 1.0).cos() + 0.1 * (p * (x + 4.0 * y) + 2.0).sin()
            + 0.08 * (p * (5.0 * x - 2.0 * y)).cos()
    })
}

fn translation_epe(u: f32, v: f32) -> FlowMetrics {
    let a = texture(32, 32, 0.0, 0.0);
    let b = texture(32, 32, u, v);
    let f = tvl1(&a, &b, &TVL1Params::default()).unwrap();
    endpoint_error(&f, &FlowField::constant(32, 32, u, v)).unwrap()
}

#[test]
fn recovers_unit_horizontal_translation() {
    let m = translation_epe(1.0, 0.0);
    assert!(m.epe_interior < 0.25, "{m:?}");
}

#[test]
fn recovers_two_pixel_vertical_translation() {
    let m = translation_epe(0.0, 2.0);
    assert!(m.epe_interior < 0.35, "{m:?}");
}

#[test]
fn identical_frames_give_near_zero_flow() {
    let a = texture(32, 32, 0.0, 0.0);
    let f = tvl1(&a, &a, &TVL1Params::default()).unwrap();
    let m = endpoint_error(&f, &FlowField::zeros(32, 32)).unwrap();
    assert!(m.epe < 0.05, "{m:?}");
}

#[test]
fn energy_is_non_increasing_within_each_warp() {
    let a = texture(32, 32, 0.0, 0.0);
    let b = texture(32, 32, 1.0, 0.5);
    let (_, trace) = tvl1_traced(&a, &b, &TVL1Params::default()).unwrap();
    assert_eq!(trace.len(), TVL1Params::default().warps);
    for (k, warp) in trace.iter().enumerate() {
        for w in warp.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "warp {k}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn solver_is_deterministic() {
    let a = texture(32, 32, 0.0, 0.0);
    let b = texture(32, 32, -1.0, 1.0);
    let p = TVL1Params::default();
    assert_eq!(tvl1(&a, &b, &p).unwrap(), tvl1(&a, &b, &p).unwrap());
}

#[test]
fn flo_round_trip_is_bitwise() {
    let a = texture(16, 16, 0.0, 0.0);
    let b = texture(16, 16, 0.5, 0.25);
    let f = tvl1(&a, &b, &TVL1Params::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    f.write_flo(&path).unwrap();
    assert_eq!(FlowField::read_flo(&path).unwrap(), f);
    let r = encode_flow(&f);
    let rp = dir.path().join("f.repr");
    r.write(&rp).unwrap();
    assert_eq!(FlowRepr3::read(&rp).unwrap(), r);
    assert!(FlowRepr3::read(&path).is_err());
}

#[test]
fn clip_flow_repeats_last_pair() {
    let frames: Vec<Tensor> = (0..3).map(|t| texture(16, 16, t as f32, 0.0)).collect();
    let mut data = Vec::new();
    for _ in 0..3 {
        for f in &frames {
            data.extend_from_slice(f.data());
        }
    }
    let clip = Tensor::new(vec![3, 3, 16, 16], data).unwrap();
    let flow = flow_for_clip(&clip, &TVL1Params::default()).unwrap();
    assert_eq!(flow.shape(), &[2, 3, 16, 16]);
    assert_eq!(clip_frame(&flow, 1).unwrap(), clip_frame(&flow, 2).unwrap());
    let m = clip_frame(&flow, 0).unwrap().mean_magnitude();
    assert!((0.6..1.2).contains(&m), "{m}");
}

#[test]
fn zero_target_makes_angle_channels_free() {
    let target = FlowRepr3 {
        mag: Tensor::zeros(&[2, 2]),
        sin_t: Tensor::zeros(&[2, 2]),
        cos_t: Tensor::full(&[2, 2], 1.0),
    };
    let a = FlowRepr3 { mag: Tensor::full(&[2, 2], 0.5), sin_t: Tensor::full(&[2, 2], 0.9), cos_t: Tensor::full(&[2, 2], -3.0) };
    let b = FlowRepr3 { sin_t: Tensor::full(&[2, 2], -7.0), cos_t: Tensor::zeros(&[2, 2]), ..a.clone() };
    assert_eq!(flow_loss(&a, &target).unwrap(), 0.25);
    assert_eq!(flow_loss(&a, &target).unwrap(), flow_loss(&b, &target).unwrap());
}

#[test]
fn all_zero_prediction_epe_is_mean_magnitude() {
    let a = texture(16, 16, 0.0, 0.0);
    let b = texture(16, 16, 0.7, -0.4);
    let f = tvl1(&a, &b, &TVL1Params::default()).unwrap();
    let m = endpoint_error(&FlowField::zeros(16, 16), &f).unwrap();
    assert_abs_diff_eq!(m.epe, f.mean_magnitude(), epsilon = 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(vals in proptest::collection::vec(-20.0f32..20.0, 2..64)) {
        let n = vals.len() / 2;
        let flow = Tensor::new(vec![2, 1, 1, n], vals[..2 * n].to_vec()).unwrap();
        let back = decode_clip(&encode_clip(&flow).unwrap()).unwrap();
        for (a, b) in flow.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn encoded_angles_are_unit_and_magnitude_non_negative(u in -10.0f32..10.0, v in -10.0f32..10.0) {
        let f = FlowField::constant(1, 1, u, v);
        let r = encode_flow(&f);
        let (m, s, c) = (r.mag.data()[0], r.sin_t.data()[0], r.cos_t.data()[0]);
        prop_assert!(m >= 0.0);
        prop_assert!((s * s + c * c - 1.0).abs() < 1e-5);
    }

    #[test]
    fn flow_loss_zero_iff_equal(seed in 0u64..500) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = FlowField::new(
            Tensor::from_fn(&[3, 3], |_| rng.gen_range(-2.0..2.0)),
            Tensor::from_fn(&[3, 3], |_| rng.gen_range(-2.0..2.0)),
        ).unwrap();
        let r = encode_flow(&t);
        prop_assert_eq!(flow_loss(&r, &r).unwrap(), 0.0);
        let p = FlowRepr3 { mag: r.mag.map(|m| m + 0.1), ..r.clone() };
        prop_assert!(flow_loss(&p, &r).unwrap() > 0.0);
    }

    #[test]
    fn epe_is_symmetric_and_non_negative(u in -3.0f32..3.0, v in -3.0f32..3.0) {
        let a = FlowField::constant(4, 4, u, v);
        let b = FlowField::constant(4, 4, v, -u);
        let ab = endpoint_error(&a, &b).unwrap().epe;
        let ba = endpoint_error(&b, &a).unwrap().epe;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
        let expect = (((u - v) as f64).powi(2) + ((v + u) as f64).powi(2)).sqrt();
        prop_assert!((ab - expect).abs() < 1e-5);
    }

    #[test]
    fn downsampled_constant_flow_keeps_its_vector(u in -3.0f32..3.0, v in -3.0f32..3.0) {
        let n = 2 * 4 * 8 * 8;
        let flow = Tensor::new(vec![2, 4, 8, 8], (0..n).map(|i| if i < n / 2 { u } else { v }).collect()).unwrap();
        let down = decode_clip(&downsample_flow_target(&flow, [2, 2, 2]).unwrap()).unwrap();
        prop_assert_eq!(down.shape(), &[2, 2, 2, 2]);
        for (i, x) in down.data().iter().enumerate() {
            let want = if i < 8 { u } else { v };
            prop_assert!((x - want).abs() < 1e-4);
        }
    }
}

use std::sync::OnceLock;

use d3d_core::dataset::{Dataset, Split, SyntheticConfig};
use d3d_core::decoders::{build_decoder, DecoderKind, DecoderOptions, StreamInput};
use d3d_core::distill::*;
use d3d_core::gradcheck::finite_difference_check;
use d3d_core::train::TrainConfig;
use d3d_core::{KvConfig, LayerName, Network, NetworkConfig, Tensor};
use proptest::prelude::*;

fn tiny() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        Dataset::synthesize(&SyntheticConfig { clips_per_class: 5, distractor_prob: 0.5, seed: 13, ..Default::default() })
            .unwrap()
    })
}

fn teacher() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(|| train_teacher(tiny(), &NetworkConfig { seed: 1, ..Default::default() }, &short()).unwrap().0)
}

fn short() -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 8, seed: 4, ..Default::default() }
}

fn assert_identity(b: &LossBreakdown, cfg: &DistillLossConfig) {
    let action = if cfg.use_action_loss { b.action } else { 0.0 };
    let want = action + cfg.lambda as f64 * b.distill;
    assert!((b.total - want).abs() < 1e-6, "{b:?} vs {want}");
}

#[test]
fn zero_lambda_reproduces_the_baseline_bitwise() {
    let ds = tiny();
    let cfg = DistillLossConfig { lambda: 0.0, ..Default::default() };
    let (student, slog) = train_student_distilled(ds, teacher(), &NetworkConfig::default(), &short(), &cfg).unwrap();
    let (base, blog) = train_baseline(ds, &NetworkConfig::default(), &short()).unwrap();
    assert_eq!(student.params().checksum(), base.params().checksum());
    let a: Vec<u64> = slog.records.iter().map(|r| r.total.to_bits()).collect();
    let b: Vec<u64> = blog.records.iter().map(|r| r.total.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn zero_weight_flow_supervision_reproduces_the_baseline_bitwise() {
    let ds = tiny();
    let (fs, _) = train_flow_supervised(ds, &NetworkConfig::default(), &short(), 0.0).unwrap();
    let (base, _) = train_baseline(ds, &NetworkConfig::default(), &short()).unwrap();
    assert_eq!(fs.net.params().checksum(), base.params().checksum());
}

#[test]
fn every_logged_step_satisfies_the_loss_identity() {
    let ds = tiny();
    for cfg in [
        DistillLossConfig { lambda: 0.5, ..Default::default() },
        DistillLossConfig { lambda: 2.0, use_action_loss: false, ..Default::default() },
    ] {
        let (_, log) = train_student_distilled(ds, teacher(), &NetworkConfig::default(), &short(), &cfg).unwrap();
        assert_eq!(log.records.len(), 2);
        for r in &log.records {
            let b = LossBreakdown { total: r.total, action: r.action, distill: r.aux, step: r.step };
            assert_identity(&b, &cfg);
        }
    }
}

#[test]
fn batch_breakdown_satisfies_the_identity_at_every_point() {
    let ds = tiny();
    let student = Network::build(NetworkConfig { seed: 2, ..Default::default() }).unwrap();
    let batch = VideoBatch::from_ids(ds, &[0, 1, 2, 3]).unwrap();
    for (lambda, point, action) in [
        (1.0, LayerName::Logits, true),
        (100.0, LayerName::Block4F, true),
        (0.25, LayerName::Block3A, false),
        (0.0, LayerName::Logits, true),
    ] {
        let cfg = DistillLossConfig { lambda, distill_point: point, use_action_loss: action, ..Default::default() };
        let b = total_loss(&batch, &student, teacher(), &cfg, 7).unwrap();
        assert_eq!(b.step, 7);
        assert!(b.distill > 0.0);
        assert_identity(&b, &cfg);
    }
}

#[test]
fn breakdown_matches_per_clip_values() {
    let ds = tiny();
    let student = Network::build(NetworkConfig { seed: 2, ..Default::default() }).unwrap();
    let ids = [4, 9];
    let batch = VideoBatch::from_ids(ds, &ids).unwrap();
    let cfg = DistillLossConfig::default();
    let b = total_loss(&batch, &student, teacher(), &cfg, 0).unwrap();
    let mut distill = 0.0;
    let mut action = 0.0;
    for &i in &ids {
        let z = student.logits(&StreamInput::Rgb.prepare(ds, i).unwrap()).unwrap();
        let t = distill_target(teacher(), &StreamInput::Flow.prepare(ds, i).unwrap(), LayerName::Logits).unwrap();
        distill += distillation_loss_values(&z, &t).unwrap();
        action -= softmax(z.data())[ds.labels[i]].ln();
    }
    assert!((b.distill - distill / 2.0).abs() < 1e-6);
    assert!((b.action - action / 2.0).abs() < 1e-5);
}

#[test]
fn distillation_leaves_the_teacher_unchanged() {
    let ds = tiny();
    let before = teacher().params().checksum();
    let x = StreamInput::Flow.prepare(ds, 0).unwrap();
    let z = teacher().logits(&x).unwrap();
    train_student_distilled(ds, teacher(), &NetworkConfig::default(), &short(), &DistillLossConfig::default()).unwrap();
    assert_eq!(teacher().params().checksum(), before);
    assert_eq!(teacher().logits(&x).unwrap(), z);
}

#[test]
fn distillation_gradient_reaches_only_the_student() {
    let s = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.7).sin());
    let t = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.3).cos());
    let r = finite_difference_check(|g, v| distillation_loss(g, v[0], &t), &[s.clone()], 1e-3).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
    let mut g = d3d_core::Graph::new();
    let sv = g.variable(s.clone());
    let l = distillation_loss(&mut g, sv, &t).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(sv).unwrap();
    for i in 0..12 {
        let want = 2.0 * (s.data()[i] - t.data()[i]) / 12.0;
        assert!((grad[i] - want).abs() < 1e-6);
    }
}

#[test]
fn mismatched_distill_point_is_rejected() {
    let ds = tiny();
    let narrow = Network::build(NetworkConfig { base_width: 4, ..Default::default() }).unwrap();
    let cfg = DistillLossConfig { distill_point: LayerName::Block4F, ..Default::default() };
    let e = train_student_distilled(ds, &narrow, &NetworkConfig::default(), &short(), &cfg).unwrap_err();
    assert!(e.to_string().contains("4F"), "{e}");
    let s = Tensor::zeros(&[4]);
    assert!(distillation_loss_values(&s, &Tensor::zeros(&[5])).is_err());
}

#[test]
fn no_signal_and_negative_lambda_are_rejected() {
    let none = DistillLossConfig { lambda: 0.0, use_action_loss: false, ..Default::default() };
    assert!(train_student_distilled(tiny(), teacher(), &NetworkConfig::default(), &short(), &none).is_err());
    assert!(DistillLossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    assert!(DistillLossConfig { lambda: f32::NAN, ..Default::default() }.validate().is_err());
    assert!("temporal".parse::<TeacherSource>().is_ok());
    assert!("optical".parse::<TeacherSource>().is_err());
}

#[test]
fn ensemble_is_the_mean_of_member_distributions() {
    let ds = tiny();
    let a = Network::build(NetworkConfig { seed: 5, ..Default::default() }).unwrap();
    let b = Network::build(NetworkConfig { seed: 6, ..Default::default() }).unwrap();
    let x = StreamInput::Rgb.prepare(ds, 3).unwrap();
    let p = ensemble_predict(&[&a, &b], &x).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let pa = softmax(a.logits(&x).unwrap().data());
    let pb = softmax(b.logits(&x).unwrap().data());
    for k in 0..4 {
        assert!((p[k] - (pa[k] + pb[k]) / 2.0).abs() < 1e-12);
    }
    assert_eq!(ensemble_predict(&[&b, &a], &x).unwrap(), p);
    assert!(ensemble_predict(&[], &x).is_err());
    let five = Network::build(NetworkConfig { num_classes: 5, ..Default::default() }).unwrap();
    assert!(ensemble_predict(&[&a, &five], &x).is_err());
}

#[test]
fn flow_as_input_composite_upsamples_to_the_stream() {
    let ds = tiny();
    let front = Network::build(NetworkConfig::default()).unwrap();
    let c = front.layer_dims(FLOW_SUPERVISION_TAP)[0];
    let dec = build_decoder(DecoderKind::Simple, c, 0, &DecoderOptions { zero_final: false, ..Default::default() }).unwrap();
    let stream = Network::build(NetworkConfig { seed: 3, ..Default::default() }).unwrap();
    let model = FlowAsInput::assemble(front.clone(), dec, stream.clone()).unwrap();
    let x = StreamInput::Rgb.prepare(ds, 0).unwrap();
    let flow = model.predicted_flow(&x).unwrap();
    assert_eq!(flow.shape(), &[3, 8, 32, 32]);
    // Nearest upsampling by 4 repeats every predicted cell in 4x4 blocks.
    let d = flow.data();
    assert_eq!(d[0], d[3 * 32 + 3]);
    assert_eq!(model.logits(&x).unwrap(), stream.logits(&flow).unwrap());
    let wrong = build_decoder(DecoderKind::Simple, c + 1, 0, &DecoderOptions::default()).unwrap();
    assert!(FlowAsInput::assemble(front, wrong, stream).is_err());
}

#[test]
fn single_frame_inputs_are_one_scaled_frame() {
    let ds = tiny();
    let clip = &ds.clips[2];
    let f = sampled_frame(0, 2, 8);
    assert!(f < 8);
    let x = frame_input(clip, f).unwrap();
    assert_eq!(x.shape(), &[3, 1, 32, 32]);
    let plane = 32 * 32;
    assert_eq!(x.data()[5], 2.0 * clip.data()[f * plane + 5] - 1.0);
    assert!(frame_input(clip, 8).is_err());
    let spread: std::collections::HashSet<usize> = (0..64).map(|i| sampled_frame(9, i, 8)).collect();
    assert!(spread.len() > 4);
}

#[test]
fn training_config_round_trips_through_kv() {
    let t = TrainConfig { epochs: 3, batch_size: 5, learning_rate: 0.02, seed: 8, ..Default::default() };
    let mut kv = KvConfig::default();
    t.write_kv(&mut kv, "train.");
    let text = kv.to_string();
    let back = TrainConfig::from_kv(&KvConfig::parse(&text).unwrap(), "train.", &TrainConfig::default()).unwrap();
    assert_eq!(back, t);
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn accuracy_is_a_fraction_of_the_validation_split() {
    let ds = tiny();
    let inputs = prepare_inputs(ds, StreamInput::Flow).unwrap();
    let val = ds.ids(Split::Validation);
    let acc = accuracy(teacher(), &inputs, ds, &val).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!((acc * val.len() as f64).fract(), 0.0);
    assert!(accuracy(teacher(), &inputs, ds, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distillation_loss_is_the_mean_squared_difference(
        s in proptest::collection::vec(-10.0f32..10.0, 1..20),
        shift in -3.0f32..3.0,
    ) {
        let n = s.len();
        let st = Tensor::new(vec![n], s.clone()).unwrap();
        let tt = Tensor::new(vec![n], s.iter().map(|v| v + shift).collect()).unwrap();
        let l = distillation_loss_values(&st, &tt).unwrap();
        let want = s.iter().map(|&v| ((v + shift) as f64 - v as f64).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((l - want).abs() < 1e-9);
        prop_assert_eq!(distillation_loss_values(&st, &st).unwrap(), 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f32..50.0, 1..10)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let best = argmax(&p);
        prop_assert!(z.iter().all(|&v| v <= z[best]));
    }
}

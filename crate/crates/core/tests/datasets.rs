use std::collections::HashSet;
use std::sync::OnceLock;

use d3d_core::dataset::*;
use d3d_core::flow_repr::endpoint_error_clip;
use d3d_core::{Error, Tensor};
use proptest::prelude::*;

fn small(family: MotionFamily, distractor_prob: f32) -> SyntheticConfig {
    let k = family.fixed_classes().unwrap_or(4);
    SyntheticConfig { family, num_classes: k, clips_per_class: 10, distractor_prob, seed: 5, ..Default::default() }
}

fn clean() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| Dataset::synthesize(&small(MotionFamily::Translate4, 0.0)).unwrap())
}

fn mean_vector(flow: &Tensor) -> (f64, f64) {
    let half = flow.len() / 2;
    let d = flow.data();
    let u = d[..half].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
    let v = d[half..].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
    (u, v)
}

fn angle_between((a, b): (f64, f64), (c, d): (f64, f64)) -> f64 {
    let cos = (a * c + b * d) / ((a * a + b * b).sqrt() * (c * c + d * d).sqrt()).max(1e-12);
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Class whose direction is closest to the clip's mean TV-L1 flow.
fn flow_oracle(clip: &Tensor, cfg: &SyntheticConfig) -> usize {
    let flow = d3d_core::tvl1::flow_for_clip(clip, &cfg.tvl1).unwrap();
    let m = mean_vector(&flow);
    (0..4)
        .min_by(|&a, &b| {
            let da = class_direction(cfg.family, a);
            let db = class_direction(cfg.family, b);
            let ea = angle_between(m, (da.0 as f64, da.1 as f64));
            let eb = angle_between(m, (db.0 as f64, db.1 as f64));
            ea.total_cmp(&eb)
        })
        .unwrap()
}

#[test]
fn mean_flow_points_along_class_direction() {
    let ds = clean();
    let ok = (0..ds.len())
        .filter(|&i| {
            let (dx, dy) = class_direction(MotionFamily::Translate4, ds.labels[i]);
            angle_between(mean_vector(&ds.flows[i]), (dx as f64, dy as f64)) <= 30.0
        })
        .count();
    assert!(ok * 10 >= ds.len() * 9, "{ok} of {}", ds.len());
}

#[test]
fn mean_flow_magnitude_tracks_unit_motion() {
    let m = clean().mean_flow_magnitude();
    assert!((0.6..=1.1).contains(&m), "{m}");
}

#[test]
fn all_zero_flow_epe_equals_mean_magnitude() {
    let ds = clean();
    let mut sum = 0.0;
    for f in &ds.flows {
        let zeros = Tensor::zeros(f.shape());
        sum += endpoint_error_clip(&zeros, f).unwrap().epe;
    }
    assert!((sum / ds.len() as f64 - ds.mean_flow_magnitude()).abs() < 1e-6);
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = SyntheticConfig { clips_per_class: 2, ..small(MotionFamily::Translate4, 0.5) };
    let a = Dataset::synthesize(&cfg).unwrap();
    let b = Dataset::synthesize(&cfg).unwrap();
    assert_eq!(a, b);
    let c = Dataset::synthesize(&SyntheticConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.clips, c.clips);
}

#[test]
fn write_then_load_is_bitwise_and_files_repeat() {
    let cfg = SyntheticConfig { clips_per_class: 3, noise: 0.1, ..small(MotionFamily::Translate4, 0.5) };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (ds, _) = generate(&cfg, d1.path()).unwrap();
    generate(&cfg, d2.path()).unwrap();
    for f in [CLIPS_FILE, FLOWS_FILE, MANIFEST_FILE] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let back = Dataset::load(&manifest_path(d1.path())).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn corrupted_file_is_rejected_by_name() {
    let cfg = SyntheticConfig { clips_per_class: 1, ..small(MotionFamily::Translate4, 0.0) };
    let dir = tempfile::tempdir().unwrap();
    generate(&cfg, dir.path()).unwrap();
    let path = dir.path().join(FLOWS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    match Dataset::load(&manifest_path(dir.path())) {
        Err(Error::Checksum(p)) => assert!(p.ends_with(FLOWS_FILE)),
        other => panic!("expected checksum error, got {other:?}"),
    }
}

#[test]
fn splits_are_disjoint_exhaustive_and_balanced() {
    let ds = clean();
    let train: HashSet<usize> = ds.ids(Split::Train).into_iter().collect();
    let val: HashSet<usize> = ds.ids(Split::Validation).into_iter().collect();
    assert!(train.is_disjoint(&val));
    assert_eq!(train.len() + val.len(), ds.len());
    assert_eq!(val.len() * 5, ds.len());
    for c in 0..4 {
        let n = val.iter().filter(|&&i| ds.labels[i] == c).count();
        assert_eq!(n, 2);
    }
    assert!(ds.iter(Split::Train, 3).all(|s| !val.contains(&s.id)));
}

#[test]
fn shuffles_repeat_for_equal_seeds() {
    let ds = clean();
    assert_eq!(ds.shuffled_ids(Split::Train, 3), ds.shuffled_ids(Split::Train, 3));
    assert_ne!(ds.shuffled_ids(Split::Train, 3), ds.shuffled_ids(Split::Train, 4));
}

#[test]
fn reversed_clip_flows_like_the_reversed_class() {
    let ds = clean();
    let map = MotionFamily::Translate4.reversal_map().unwrap();
    for i in 0..8 {
        let rev = reverse_time(&ds.clips[i]).unwrap();
        assert_eq!(flow_oracle(&rev, &ds.config), map[ds.labels[i]], "clip {i}");
    }
}

#[test]
fn open_and_close_clips_mirror_in_time() {
    let cfg = SyntheticConfig { clip: [8, 32, 32], noise: 0.1, ..small(MotionFamily::OpenClose, 0.0) };
    for pair in 0..3 {
        let (open, lo) = render_clip(&cfg, 2 * pair);
        let (close, lc) = render_clip(&cfg, 2 * pair + 1);
        assert_eq!((lo, lc), (0, 1));
        assert_eq!(reverse_time(&open).unwrap(), close);
    }
}

#[test]
fn oversized_motion_is_rejected() {
    let cfg = SyntheticConfig { speed: 5, ..Default::default() };
    assert!(Dataset::synthesize(&cfg).is_err());
}

#[test]
fn reversal_probe_on_reference_predictors() {
    let ds = clean();
    let val = ds.ids(Split::Validation);
    let (f, r) = reversal_probe(ds, &val, |c| Ok(flow_oracle(c, &ds.config))).unwrap();
    assert_eq!(f, r);
    assert!(f > 0.9);
    let (f, r) = reversal_probe(ds, &val, |_| Ok(0)).unwrap();
    assert_eq!((f, r), (0.25, 0.25));
    let color = Dataset::synthesize(&SyntheticConfig { clips_per_class: 1, ..small(MotionFamily::ColorControl, 0.0) }).unwrap();
    assert!(reversal_probe(&color, &[0], |_| Ok(0)).is_err());
}

#[test]
fn manifest_round_trips_through_text() {
    let ds = Dataset::synthesize(&SyntheticConfig { clips_per_class: 1, ..small(MotionFamily::Translate4, 0.0) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = ds.write(dir.path()).unwrap();
    let text = m.to_kv().to_string();
    let back = DatasetManifest::from_kv(&d3d_core::KvConfig::parse(&text).unwrap()).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reversal_preserves_the_frame_set(id in 0usize..400, seed in 0u64..50) {
        let cfg = SyntheticConfig { seed, ..Default::default() };
        let (clip, _) = render_clip(&cfg, id);
        let rev = reverse_time(&clip).unwrap();
        let frames = |c: &Tensor| -> Vec<Vec<u32>> {
            let t = c.shape()[1];
            let plane = c.shape()[2] * c.shape()[3];
            let mut out: Vec<Vec<u32>> = (0..t)
                .map(|f| (0..3).flat_map(|ch| c.data()[(ch * t + f) * plane..(ch * t + f + 1) * plane].iter().map(|v| v.to_bits())).collect())
                .collect();
            out.sort();
            out
        };
        prop_assert_eq!(frames(&clip), frames(&rev));
        prop_assert_eq!(reverse_time(&rev).unwrap(), clip);
    }

    #[test]
    fn labels_are_balanced_in_every_prefix(k in 2usize..=4, n in 1usize..40) {
        let cfg = SyntheticConfig { family: MotionFamily::ColorControl, num_classes: k, clips_per_class: n, ..Default::default() };
        let labels: Vec<usize> = (0..cfg.len()).map(|i| render_label(&cfg, i)).collect();
        for c in 0..k {
            prop_assert_eq!(labels.iter().filter(|&&l| l == c).count(), n);
        }
    }
}

fn render_label(cfg: &SyntheticConfig, id: usize) -> usize {
    render_clip(cfg, id).1
}

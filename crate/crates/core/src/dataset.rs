//! Synthetic video classification data whose labels are carried by motion.
//!
//! Every clip is built from periodic sinusoid-sum textures, so any single
//! frame is a uniformly random shift of a random texture regardless of class.
//!
//! * `Translate4` / `Translate8`: the frame is split into two bands. The tinted
//!   target band moves one step per frame in the class direction; the other
//!   band follows it, or with probability `distractor_prob` (1 by default)
//!   moves in a different random direction. Flow alone then cannot tell which
//!   band carries the label.
//! * `OpenClose`: a textured disk zooms in (open) or out (close) over a static
//!   background. Clips come in pairs sharing a seed, one the reverse of the other.
//! * `ColorControl`: labels are the tint colour; the whole frame translates in
//!   a random direction, so motion carries no label information.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::tensor::Tensor;
use crate::tvl1::{flow_for_clip, TVL1Params};

pub const CLIP_MAGIC: &[u8; 4] = b"D3DC";
pub const FLOW_MAGIC: &[u8; 4] = b"D3DF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub const CLIPS_FILE: &str = "clips.bin";
pub const FLOWS_FILE: &str = "flows.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionFamily {
    Translate4,
    Translate8,
    OpenClose,
    ColorControl,
}

impl MotionFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            MotionFamily::Translate4 => "translate4",
            MotionFamily::Translate8 => "translate8",
            MotionFamily::OpenClose => "openclose",
            MotionFamily::ColorControl => "colorcontrol",
        }
    }

    /// Number of classes the family defines; `None` when configurable.
    pub fn fixed_classes(self) -> Option<usize> {
        match self {
            MotionFamily::Translate4 => Some(4),
            MotionFamily::Translate8 => Some(8),
            MotionFamily::OpenClose => Some(2),
            MotionFamily::ColorControl => None,
        }
    }

    /// Label of a time-reversed clip, for families where reversal maps
    /// classes onto classes.
    pub fn reversal_map(self) -> Option<Vec<usize>> {
        match self {
            MotionFamily::Translate4 => Some(vec![1, 0, 3, 2]),
            MotionFamily::Translate8 => Some((0..8).map(|k| (k + 4) % 8).collect()),
            MotionFamily::OpenClose => Some(vec![1, 0]),
            MotionFamily::ColorControl => None,
        }
    }

    /// Number of classes any single frame is equally consistent with.
    pub fn ambiguity_group(self, k: usize) -> usize {
        match self {
            MotionFamily::ColorControl => 1,
            _ => k,
        }
    }
}

impl fmt::Display for MotionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "translate4" => Ok(MotionFamily::Translate4),
            "translate8" => Ok(MotionFamily::Translate8),
            "openclose" => Ok(MotionFamily::OpenClose),
            "colorcontrol" => Ok(MotionFamily::ColorControl),
            _ => Err(Error::Config(format!("unknown motion family {s:?}"))),
        }
    }
}

/// Class directions of the translation families, in pixels per frame.
pub fn class_direction(family: MotionFamily, class: usize) -> (i32, i32) {
    match family {
        MotionFamily::Translate8 => {
            const D: [(i32, i32); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
            D[class % 8]
        }
        _ => {
            const D: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
            D[class % 4]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub family: MotionFamily,
    pub num_classes: usize,
    pub clips_per_class: usize,
    /// `(T, H, W)`.
    pub clip: [usize; 3],
    /// Pixels per frame.
    pub speed: usize,
    /// Texture contrast around mid-grey.
    pub texture_amplitude: f32,
    /// Random per-clip jitter of the tint colours.
    pub distractor_colors: bool,
    /// Probability that the second band moves in a different direction.
    pub distractor_prob: f32,
    /// Standard deviation of independent per-frame uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
    pub tvl1: TVL1Params,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            family: MotionFamily::Translate4,
            num_classes: 4,
            clips_per_class: 200,
            clip: [8, 32, 32],
            speed: 1,
            texture_amplitude: 0.4,
            distractor_colors: true,
            distractor_prob: 1.0,
            noise: 0.0,
            seed: 0,
            tvl1: TVL1Params::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.clip;
        if let Some(k) = self.family.fixed_classes() {
            if self.num_classes != k {
                return Err(Error::Config(format!("{} has {k} classes, config says {}", self.family, self.num_classes)));
            }
        } else if !(2..=PALETTE.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!("colorcontrol supports 2..={} classes", PALETTE.len())));
        }
        if self.clips_per_class == 0 {
            return Err(Error::Config("clips_per_class must be >= 1".into()));
        }
        if t < 2 {
            return Err(Error::Config(format!("clip length {t} < 2 frames")));
        }
        if self.speed == 0 {
            return Err(Error::Config("speed must be >= 1".into()));
        }
        let min = self.tvl1.min_extent();
        if h < min || w < min {
            return Err(Error::Config(format!("frames {h}x{w} below the flow solver minimum {min}")));
        }
        // Per-frame motion beyond an eighth of the frame defeats the flow pyramid.
        if 8 * self.speed > h.min(w) {
            return Err(Error::Config(format!(
                "motion of {} px/frame too large for {h}x{w} frames (limit {})",
                self.speed,
                h.min(w) / 8
            )));
        }
        if self.family == MotionFamily::OpenClose {
            let reach = OPEN_MIN_RADIUS + ((t - 1) * self.speed) as f32;
            if 2.0 * (reach + 1.0) > h.min(w) as f32 {
                return Err(Error::Config(format!(
                    "disk radius reaches {reach} px, too large for {h}x{w} frames"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config(format!("distractor_prob {} outside [0, 1]", self.distractor_prob)));
        }
        if !(self.noise >= 0.0 && self.noise <= 0.5) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude <= 0.5) {
            return Err(Error::Config(format!("texture_amplitude {} outside [0, 0.5]", self.texture_amplitude)));
        }
        self.tvl1.validate()
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.clips_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = SyntheticConfig::default();
        let family: MotionFamily = kv.get_or("family", d.family)?;
        let k_default = family.fixed_classes().unwrap_or(d.num_classes);
        let tv = TVL1Params::default();
        let cfg = SyntheticConfig {
            family,
            num_classes: kv.get_or("num_classes", k_default)?,
            clips_per_class: kv.get_or("clips_per_class", d.clips_per_class)?,
            clip: [
                kv.get_or("clip_t", d.clip[0])?,
                kv.get_or("clip_h", d.clip[1])?,
                kv.get_or("clip_w", d.clip[2])?,
            ],
            speed: kv.get_or("speed", d.speed)?,
            texture_amplitude: kv.get_or("texture_amplitude", d.texture_amplitude)?,
            distractor_colors: kv.get_or("distractor_colors", d.distractor_colors)?,
            distractor_prob: kv.get_or("distractor_prob", d.distractor_prob)?,
            noise: kv.get_or("noise", d.noise)?,
            seed: kv.get_or("seed", d.seed)?,
            tvl1: TVL1Params {
                lambda_data: kv.get_or("tvl1_lambda", tv.lambda_data)?,
                theta_coupling: kv.get_or("tvl1_theta", tv.theta_coupling)?,
                tau_step: kv.get_or("tvl1_tau", tv.tau_step)?,
                warps: kv.get_or("tvl1_warps", tv.warps)?,
                inner_iterations: kv.get_or("tvl1_iterations", tv.inner_iterations)?,
                levels: kv.get_or("tvl1_levels", tv.levels)?,
                scale: kv.get_or("tvl1_scale", tv.scale)?,
                median_filter: kv.get_or("tvl1_median", tv.median_filter)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("family", self.family);
        kv.set("num_classes", self.num_classes);
        kv.set("clips_per_class", self.clips_per_class);
        kv.set("clip_t", self.clip[0]);
        kv.set("clip_h", self.clip[1]);
        kv.set("clip_w", self.clip[2]);
        kv.set("speed", self.speed);
        kv.set("texture_amplitude", self.texture_amplitude);
        kv.set("distractor_colors", self.distractor_colors);
        kv.set("distractor_prob", self.distractor_prob);
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        kv.set("tvl1_lambda", self.tvl1.lambda_data);
        kv.set("tvl1_theta", self.tvl1.theta_coupling);
        kv.set("tvl1_tau", self.tvl1.tau_step);
        kv.set("tvl1_warps", self.tvl1.warps);
        kv.set("tvl1_iterations", self.tvl1.inner_iterations);
        kv.set("tvl1_levels", self.tvl1.levels);
        kv.set("tvl1_scale", self.tvl1.scale);
        kv.set("tvl1_median", self.tvl1.median_filter);
        kv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Label of clip `id`: classes are interleaved so every prefix is balanced.
fn label_of(id: usize, k: usize) -> usize {
    id % k
}

/// Every fifth clip of each class is held out.
fn split_of(id: usize, k: usize) -> Split {
    if (id / k) % 5 == 4 {
        Split::Validation
    } else {
        Split::Train
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of an individual clip derived from the dataset seed.
pub fn clip_seed(seed: u64, id: u64) -> u64 {
    splitmix(seed ^ splitmix(id))
}

/// Periodic texture: a sum of sinusoids with integer frequencies over the frame.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f32, f32, f32, f32)>,
    norm: f32,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Texture {
        let mut waves = Vec::with_capacity(24);
        while waves.len() < 24 {
            let fx = rng.gen_range(-6i32..=6);
            let fy = rng.gen_range(-6i32..=6);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            if fx == 0 && fy == 0 {
                continue;
            }
            let amp = 1.0 / (1.0 + ((fx * fx + fy * fy) as f32).sqrt());
            let tau = std::f32::consts::TAU;
            waves.push((tau * fx as f32 / w as f32, tau * fy as f32 / h as f32, phase, amp));
        }
        let mut tex = Texture { waves, norm: 1.0 };
        let mut peak = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                peak = peak.max(tex.eval(x as f32, y as f32).abs());
            }
        }
        tex.norm = 1.0 / peak.max(1e-6);
        tex
    }

    /// Value in `[-1, 1]` at a continuous position.
    fn eval(&self, x: f32, y: f32) -> f32 {
        let s: f32 = self.waves.iter().map(|&(kx, ky, p, a)| a * (kx * x + ky * y + p).sin()).sum();
        (s * self.norm).clamp(-1.0, 1.0)
    }
}

const PALETTE: [[f32; 3]; 4] = [[1.0, 0.35, 0.35], [0.35, 1.0, 0.35], [0.35, 0.35, 1.0], [1.0, 1.0, 0.3]];
const TARGET_TINT: [f32; 3] = [1.0, 0.4, 0.4];
const OTHER_TINT: [f32; 3] = [0.4, 0.4, 1.0];
const OPEN_MIN_RADIUS: f32 = 4.0;

fn jitter(rng: &mut ChaCha8Rng, tint: [f32; 3], on: bool) -> [f32; 3] {
    if !on {
        return tint;
    }
    let mut out = tint;
    for c in &mut out {
        *c = (*c + rng.gen_range(-0.15..=0.15)).clamp(0.0, 1.0);
    }
    out
}

struct Canvas {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new([t, h, w]: [usize; 3]) -> Self {
        Canvas {
            t,
            h,
            w,
            data: vec![0.0; 3 * t * h * w],
        }
    }

    fn put(&mut self, f: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.t * self.h * self.w;
        let i = (f * self.h + y) * self.w + x;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * plane + i] = v.clamp(0.0, 1.0);
        }
    }

    fn into_tensor(self) -> Tensor {
        Tensor::new(vec![3, self.t, self.h, self.w], self.data).expect("canvas extents")
    }
}

fn shade(tint: [f32; 3], amplitude: f32, tex: f32) -> [f32; 3] {
    let v = 0.5 + amplitude * tex;
    [tint[0] * v, tint[1] * v, tint[2] * v]
}

fn translate_clip(cfg: &SyntheticConfig, id: usize) -> Tensor {
    let [t, h, w] = cfg.clip;
    let k = cfg.num_classes;
    let label = label_of(id, k);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, id as u64));
    let target = Texture::random(&mut rng, h, w);
    let other = Texture::random(&mut rng, h, w);
    let vertical_split: bool = rng.gen();
    let target_first: bool = rng.gen();
    let (ot, ot_other) = (rng.gen_range(0..h * w), rng.gen_range(0..h * w));
    let other_class = if rng.gen::<f32>() < cfg.distractor_prob {
        let c = rng.gen_range(0..k - 1);
        if c >= label {
            c + 1
        } else {
            c
        }
    } else {
        label
    };
    let tint_a = jitter(&mut rng, TARGET_TINT, cfg.distractor_colors);
    let tint_b = jitter(&mut rng, OTHER_TINT, cfg.distractor_colors);
    let s = cfg.speed as i32;
    let (dx, dy) = class_direction(cfg.family, label);
    let (ex, ey) = class_direction(cfg.family, other_class);
    let mut canvas = Canvas::new(cfg.clip);
    let (oy, ox) = ((ot / w) as i32, (ot % w) as i32);
    let (py, px) = ((ot_other / w) as i32, (ot_other % w) as i32);
    for f in 0..t {
        let fi = f as i32;
        for y in 0..h {
            for x in 0..w {
                let first = if vertical_split { x < w / 2 } else { y < h / 2 };
                let is_target = first == target_first;
                let rgb = if is_target {
                    let sx = (x as i32 - fi * s * dx + ox).rem_euclid(w as i32);
                    let sy = (y as i32 - fi * s * dy + oy).rem_euclid(h as i32);
                    shade(tint_a, cfg.texture_amplitude, target.eval(sx as f32, sy as f32))
                } else {
                    let sx = (x as i32 - fi * s * ex + px).rem_euclid(w as i32);
                    let sy = (y as i32 - fi * s * ey + py).rem_euclid(h as i32);
                    shade(tint_b, cfg.texture_amplitude, other.eval(sx as f32, sy as f32))
                };
                canvas.put(f, y, x, rgb);
            }
        }
    }
    canvas.into_tensor()
}

fn color_clip(cfg: &SyntheticConfig, id: usize) -> Tensor {
    let [t, h, w] = cfg.clip;
    let label = label_of(id, cfg.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, id as u64));
    let tex = Texture::random(&mut rng, h, w);
    let (dx, dy) = class_direction(MotionFamily::Translate4, rng.gen_range(0..4));
    let tint = jitter(&mut rng, PALETTE[label], cfg.distractor_colors);
    let s = cfg.speed as i32;
    let mut canvas = Canvas::new(cfg.clip);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i32 - f as i32 * s * dx).rem_euclid(w as i32);
                let sy = (y as i32 - f as i32 * s * dy).rem_euclid(h as i32);
                canvas.put(f, y, x, shade(tint, cfg.texture_amplitude, tex.eval(sx as f32, sy as f32)));
            }
        }
    }
    canvas.into_tensor()
}

/// The opening clip of pair `pair`; the closing clip is its time reversal.
fn open_clip(cfg: &SyntheticConfig, pair: usize) -> Tensor {
    let [t, h, w] = cfg.clip;
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, pair as u64));
    let disk = Texture::random(&mut rng, h, w);
    let back = Texture::random(&mut rng, h, w);
    let tint_a = jitter(&mut rng, TARGET_TINT, cfg.distractor_colors);
    let tint_b = jitter(&mut rng, OTHER_TINT, cfg.distractor_colors);
    let reach = OPEN_MIN_RADIUS + ((t - 1) * cfg.speed) as f32;
    let margin = reach + 1.0;
    let cy = rng.gen_range(margin..=h as f32 - margin);
    let cx = rng.gen_range(margin..=w as f32 - margin);
    let mut canvas = Canvas::new(cfg.clip);
    for f in 0..t {
        let r = OPEN_MIN_RADIUS + (f * cfg.speed) as f32;
        let zoom = OPEN_MIN_RADIUS / r;
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let rgb = if ry * ry + rx * rx <= r * r {
                    shade(tint_a, cfg.texture_amplitude, disk.eval(cx + rx * zoom, cy + ry * zoom))
                } else {
                    shade(tint_b, cfg.texture_amplitude, back.eval(x as f32, y as f32))
                };
                canvas.put(f, y, x, rgb);
            }
        }
    }
    canvas.into_tensor()
}

fn add_noise(cfg: &SyntheticConfig, id: usize, clip: Tensor) -> Tensor {
    if cfg.noise == 0.0 {
        return clip;
    }
    // Uniform noise on [-a, a] has standard deviation a / sqrt(3).
    let half = cfg.noise * 3f32.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed ^ 0xA0A0_0001, id as u64));
    let mut clip = clip;
    for v in clip.data_mut() {
        *v = (*v + rng.gen_range(-half..=half)).clamp(0.0, 1.0);
    }
    clip
}

/// Renders clip `id` (RGB in `[0, 1]`, `[3, T, H, W]`) and its label.
///
/// OpenClose clips come in pairs: even ids open, and clip `2p + 1` is clip
/// `2p` reversed in time, noise included.
pub fn render_clip(cfg: &SyntheticConfig, id: usize) -> (Tensor, usize) {
    let clip = match cfg.family {
        MotionFamily::Translate4 | MotionFamily::Translate8 => add_noise(cfg, id, translate_clip(cfg, id)),
        MotionFamily::ColorControl => add_noise(cfg, id, color_clip(cfg, id)),
        MotionFamily::OpenClose => {
            let open = add_noise(cfg, id & !1, open_clip(cfg, id / 2));
            if id % 2 == 1 {
                reverse_time(&open).expect("rank-4 clip")
            } else {
                open
            }
        }
    };
    (clip, label_of(id, cfg.num_classes))
}

/// A clip with its frames in reverse order.
pub fn reverse_time(clip: &Tensor) -> Result<Tensor> {
    let [c, t, h, w] = clip.dims4("reverse_time")?;
    let plane = h * w;
    let src = clip.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for f in 0..t {
            let s = (ch * t + f) * plane;
            let d = (ch * t + (t - 1 - f)) * plane;
            out[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
    Tensor::new(clip.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub config: SyntheticConfig,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Byte offset of each clip's record in the clip and flow files.
    pub clip_offsets: Vec<u64>,
    pub flow_offsets: Vec<u64>,
    /// `(file name, sha256 hex)`.
    pub checksums: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.config.to_kv();
        kv.set("format_version", FORMAT_VERSION);
        kv.set("clip_count", self.labels.len());
        for (name, sum) in &self.checksums {
            kv.set(format!("sha256.{name}"), sum);
        }
        for i in 0..self.labels.len() {
            kv.set(
                format!("clip.{i}"),
                format!(
                    "{} {} {} {}",
                    self.labels[i],
                    self.splits[i].as_str(),
                    self.clip_offsets[i],
                    self.flow_offsets[i]
                ),
            );
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let config = SyntheticConfig::from_kv(kv)?;
        let version: u32 = kv.get_or("format_version", 0)?;
        if version != FORMAT_VERSION {
            return Err(Error::format("manifest", format!("version {version}, expected {FORMAT_VERSION}")));
        }
        let n: usize = kv
            .get("clip_count")?
            .ok_or_else(|| Error::format("manifest", "missing clip_count"))?;
        let mut m = DatasetManifest {
            config,
            labels: Vec::with_capacity(n),
            splits: Vec::with_capacity(n),
            clip_offsets: Vec::with_capacity(n),
            flow_offsets: Vec::with_capacity(n),
            checksums: Vec::new(),
        };
        for i in 0..n {
            let row = kv
                .get_str(&format!("clip.{i}"))
                .ok_or_else(|| Error::format("manifest", format!("missing clip.{i}")))?;
            let f: Vec<&str> = row.split_whitespace().collect();
            let bad = || Error::format("manifest", format!("malformed clip.{i}: {row:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            m.labels.push(f[0].parse().map_err(|_| bad())?);
            m.splits.push(f[1].parse()?);
            m.clip_offsets.push(f[2].parse().map_err(|_| bad())?);
            m.flow_offsets.push(f[3].parse().map_err(|_| bad())?);
        }
        for (k, v) in kv.iter() {
            if let Some(name) = k.strip_prefix("sha256.") {
                m.checksums.push((name.to_string(), v.to_string()));
            }
        }
        Ok(m)
    }
}

/// Clips, TV-L1 flow and labels held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub clips: Vec<Tensor>,
    /// `[2, T, H, W]` flow for each clip.
    pub flows: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

/// A borrowed sample.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub id: usize,
    pub clip: &'a Tensor,
    pub flow: &'a Tensor,
    pub label: usize,
}

impl Dataset {
    /// Renders every clip and computes its flow, in parallel over clips.
    pub fn synthesize(cfg: &SyntheticConfig) -> Result<Dataset> {
        cfg.validate()?;
        let n = cfg.len();
        let rendered: Vec<(Tensor, Tensor, usize)> = (0..n)
            .into_par_iter()
            .map(|id| {
                let (clip, label) = render_clip(cfg, id);
                let flow = flow_for_clip(&clip, &cfg.tvl1)?;
                Ok((clip, flow, label))
            })
            .collect::<Result<_>>()?;
        let mut ds = Dataset {
            config: cfg.clone(),
            clips: Vec::with_capacity(n),
            flows: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            splits: (0..n).map(|i| split_of(i, cfg.num_classes)).collect(),
        };
        for (c, f, l) in rendered {
            ds.clips.push(c);
            ds.flows.push(f);
            ds.labels.push(l);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn sample(&self, id: usize) -> Sample<'_> {
        Sample {
            id,
            clip: &self.clips[id],
            flow: &self.flows[id],
            label: self.labels[id],
        }
    }

    /// Clip ids of a split in ascending order.
    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Clip ids of a split in an order fixed by `shuffle_seed`.
    pub fn shuffled_ids(&self, split: Split, shuffle_seed: u64) -> Vec<usize> {
        let mut ids = self.ids(split);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        ids
    }

    pub fn iter(&self, split: Split, shuffle_seed: u64) -> impl Iterator<Item = Sample<'_>> + '_ {
        self.shuffled_ids(split, shuffle_seed).into_iter().map(move |i| self.sample(i))
    }

    /// Mean TV-L1 flow magnitude over every pixel of every clip.
    pub fn mean_flow_magnitude(&self) -> f64 {
        let mut s = 0.0f64;
        let mut n = 0usize;
        for f in &self.flows {
            let half = f.len() / 2;
            let d = f.data();
            for i in 0..half {
                s += (d[i] as f64).hypot(d[half + i] as f64);
            }
            n += half;
        }
        s / n.max(1) as f64
    }

    /// Writes `clips.bin`, `flows.bin` and `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        let (clip_bytes, clip_offsets) = encode_records(CLIP_MAGIC, &self.config, &self.clips, &self.labels);
        let (flow_bytes, flow_offsets) = encode_records(FLOW_MAGIC, &self.config, &self.flows, &self.labels);
        std::fs::write(dir.join(CLIPS_FILE), &clip_bytes)?;
        std::fs::write(dir.join(FLOWS_FILE), &flow_bytes)?;
        let manifest = DatasetManifest {
            config: self.config.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
            clip_offsets,
            flow_offsets,
            checksums: vec![
                (CLIPS_FILE.to_string(), hex::encode(Sha256::digest(&clip_bytes))),
                (FLOWS_FILE.to_string(), hex::encode(Sha256::digest(&flow_bytes))),
            ],
        };
        manifest.to_kv().save(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Loads a dataset from its manifest, verifying every checksum first.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::from_kv(&KvConfig::load(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let read_checked = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            let bytes = std::fs::read(&path)?;
            let expected = manifest
                .checksums
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.as_str())
                .ok_or_else(|| Error::format("manifest", format!("no checksum for {name}")))?;
            if hex::encode(Sha256::digest(&bytes)) != expected {
                return Err(Error::Checksum(path));
            }
            Ok(bytes)
        };
        let clip_bytes = read_checked(CLIPS_FILE)?;
        let flow_bytes = read_checked(FLOWS_FILE)?;
        let cfg = &manifest.config;
        let clips = decode_records(CLIP_MAGIC, cfg, 3, &clip_bytes, &manifest.clip_offsets, &manifest.labels)?;
        let flows = decode_records(FLOW_MAGIC, cfg, 2, &flow_bytes, &manifest.flow_offsets, &manifest.labels)?;
        Ok(Dataset {
            config: manifest.config,
            clips,
            flows,
            labels: manifest.labels,
            splits: manifest.splits,
        })
    }
}

/// Renders, computes flow and writes a dataset to `dir`.
pub fn generate(cfg: &SyntheticConfig, dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let ds = Dataset::synthesize(cfg)?;
    let manifest = ds.write(dir)?;
    Ok((ds, manifest))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

/// Header `{magic, version, K, T, H, W, count}` then per record a `u32` label
/// followed by the tensor's f32 values, all little-endian.
fn encode_records(magic: &[u8; 4], cfg: &SyntheticConfig, data: &[Tensor], labels: &[usize]) -> (Vec<u8>, Vec<u64>) {
    let per: usize = data.first().map_or(0, |t| t.len());
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * (4 + 4 * per));
    out.extend_from_slice(magic);
    for v in [
        FORMAT_VERSION,
        cfg.num_classes as u32,
        cfg.clip[0] as u32,
        cfg.clip[1] as u32,
        cfg.clip[2] as u32,
        data.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut offsets = Vec::with_capacity(data.len());
    for (t, &l) in data.iter().zip(labels) {
        offsets.push(out.len() as u64);
        out.extend_from_slice(&(l as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    (out, offsets)
}

fn decode_records(
    magic: &[u8; 4],
    cfg: &SyntheticConfig,
    channels: usize,
    bytes: &[u8],
    offsets: &[u64],
    labels: &[usize],
) -> Result<Vec<Tensor>> {
    let what = if magic == CLIP_MAGIC { "clip file" } else { "flow file" };
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let [t, h, w] = cfg.clip;
    let header = [word(0), word(1), word(2), word(3), word(4), word(5)];
    let expect = [FORMAT_VERSION as usize, cfg.num_classes, t, h, w, offsets.len()];
    if header != expect {
        return Err(Error::format(what, format!("header {header:?}, manifest implies {expect:?}")));
    }
    let per = channels * t * h * w;
    let mut out = Vec::with_capacity(offsets.len());
    for (i, (&off, &label)) in offsets.iter().zip(labels).enumerate() {
        let off = off as usize;
        let end = off + 4 + 4 * per;
        if end > bytes.len() {
            return Err(Error::format(what, format!("record {i} truncated")));
        }
        let l = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        if l != label {
            return Err(Error::format(what, format!("record {i} label {l}, manifest says {label}")));
        }
        let vals = bytes[off + 4..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(Tensor::new(vec![channels, t, h, w], vals)?);
    }
    Ok(out)
}

/// Accuracy on forward clips and on time-reversed clips with remapped labels.
/// `predict` maps an RGB clip to a class.
pub fn reversal_probe(
    ds: &Dataset,
    ids: &[usize],
    predict: impl Fn(&Tensor) -> Result<usize> + Sync,
) -> Result<(f64, f64)> {
    let map = ds.config.family.reversal_map().ok_or_else(|| {
        Error::invalid(
            "reversal_probe",
            format!("{} has no reversal label map", ds.config.family),
        )
    })?;
    if ids.is_empty() {
        return Err(Error::invalid("reversal_probe", "no clips"));
    }
    let hits: Vec<(bool, bool)> = ids
        .par_iter()
        .map(|&i| {
            let fwd = predict(&ds.clips[i])? == ds.labels[i];
            let rev = predict(&reverse_time(&ds.clips[i])?)? == map[ds.labels[i]];
            Ok((fwd, rev))
        })
        .collect::<Result<_>>()?;
    let n = ids.len() as f64;
    let f = hits.iter().filter(|h| h.0).count() as f64 / n;
    let r = hits.iter().filter(|h| h.1).count() as f64 / n;
    Ok((f, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_balanced() {
        let k = 4;
        let val: Vec<usize> = (0..40).filter(|&i| split_of(i, k) == Split::Validation).collect();
        assert_eq!(val.len(), 8);
        for c in 0..k {
            assert_eq!(val.iter().filter(|&&i| label_of(i, k) == c).count(), 2);
        }
    }

    #[test]
    fn rejects_oversized_motion() {
        let cfg = SyntheticConfig {
            speed: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SyntheticConfig {
            family: MotionFamily::OpenClose,
            num_classes: 2,
            clip: [8, 16, 16],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn texture_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Texture::random(&mut rng, 16, 32);
        for (x, y) in [(0.0, 0.0), (3.0, 5.0), (7.5, 1.25)] {
            assert!((t.eval(x, y) - t.eval(x + 32.0, y + 16.0)).abs() < 1e-4);
        }
    }
}

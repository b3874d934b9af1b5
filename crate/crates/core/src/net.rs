//! MiniS3D: a small separable 3D CNN with Inception-style layer names.
//!
//! Eight blocks, each a `C x (1x3x3)` spatial convolution followed by a
//! `C x (3x1x1)` temporal convolution, a per-channel affine and a ReLU.
//! `Conv1` has spatial stride 2; average pooling follows `Conv1` (1x2x2),
//! `Block3B` (2x2x2) and `Block4F` (2x2x2). Global average pooling and a
//! pointwise classifier produce the logits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvGeometry, ConvSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kvconfig::KvConfig;
use crate::tensor::{Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerName {
    Conv1,
    Conv2C,
    Block3A,
    Block3B,
    Block4A,
    Block4C,
    Block4F,
    Block5B,
    GlobalPool,
    Logits,
}

impl LayerName {
    pub const ALL: [LayerName; 10] = [
        LayerName::Conv1,
        LayerName::Conv2C,
        LayerName::Block3A,
        LayerName::Block3B,
        LayerName::Block4A,
        LayerName::Block4C,
        LayerName::Block4F,
        LayerName::Block5B,
        LayerName::GlobalPool,
        LayerName::Logits,
    ];

    /// The eight convolutional blocks.
    pub const BLOCKS: [LayerName; 8] = [
        LayerName::Conv1,
        LayerName::Conv2C,
        LayerName::Block3A,
        LayerName::Block3B,
        LayerName::Block4A,
        LayerName::Block4C,
        LayerName::Block4F,
        LayerName::Block5B,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerName::Conv1 => "Conv1",
            LayerName::Conv2C => "Conv2C",
            LayerName::Block3A => "Block3A",
            LayerName::Block3B => "Block3B",
            LayerName::Block4A => "Block4A",
            LayerName::Block4C => "Block4C",
            LayerName::Block4F => "Block4F",
            LayerName::Block5B => "Block5B",
            LayerName::GlobalPool => "GlobalPool",
            LayerName::Logits => "Logits",
        }
    }

    pub fn is_block(self) -> bool {
        self < LayerName::GlobalPool
    }

    /// Channel multiplier of a block relative to `base_width`.
    fn width_multiplier(self) -> usize {
        [1, 1, 2, 2, 4, 4, 8, 8][self.index()]
    }

    /// Average pooling window applied after this block, if any.
    fn pool_after(self) -> Option<[usize; 3]> {
        match self {
            LayerName::Conv1 => Some([1, 2, 2]),
            LayerName::Block3B | LayerName::Block4F => Some([2, 2, 2]),
            _ => None,
        }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerName {
    type Err = Error;

    /// Accepts full names and the short Inception forms (`2C`, `3a`, `4f`, ...).
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase();
        let norm = norm.trim_start_matches("block").trim_start_matches("mixed_");
        Ok(match norm {
            "conv1" | "1a" => LayerName::Conv1,
            "conv2c" | "2c" => LayerName::Conv2C,
            "3a" => LayerName::Block3A,
            "3b" => LayerName::Block3B,
            "4a" => LayerName::Block4A,
            "4c" => LayerName::Block4C,
            "4f" => LayerName::Block4F,
            "5b" => LayerName::Block5B,
            "globalpool" | "pool" => LayerName::GlobalPool,
            "logits" => LayerName::Logits,
            _ => return Err(Error::invalid("layer name", format!("unknown layer {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Clip extents `(T, H, W)`.
    pub clip: [usize; 3],
    pub seed: u64,
    /// Drops every temporal convolution and temporal pooling, giving a 2D
    /// per-frame network with the same spatial topology (expects `T = 1`).
    pub spatial_only: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            num_classes: 4,
            base_width: 8,
            clip: [8, 32, 32],
            seed: 0,
            spatial_only: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width {} < 4", self.base_width)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if !self.spatial_only && self.clip[0] < 4 {
            return Err(Error::Config(format!("clip length {} < 4 frames", self.clip[0])));
        }
        if self.clip.contains(&0) {
            return Err(Error::Config("clip extents must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            input_channels: kv.get_or("input_channels", d.input_channels)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            base_width: kv.get_or("base_width", d.base_width)?,
            clip: [
                kv.get_or("clip_t", d.clip[0])?,
                kv.get_or("clip_h", d.clip[1])?,
                kv.get_or("clip_w", d.clip[2])?,
            ],
            seed: kv.get_or("seed", d.seed)?,
            spatial_only: kv.get_or("spatial_only", d.spatial_only)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("input_channels", self.input_channels);
        kv.set("num_classes", self.num_classes);
        kv.set("base_width", self.base_width);
        kv.set("clip_t", self.clip[0]);
        kv.set("clip_h", self.clip[1]);
        kv.set("clip_w", self.clip[2]);
        kv.set("seed", self.seed);
        kv.set("spatial_only", self.spatial_only);
        kv
    }

    pub fn block_channels(&self, layer: LayerName) -> usize {
        self.base_width * layer.width_multiplier()
    }
}

/// An intermediate activation with its cumulative stride relative to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTap {
    pub layer: LayerName,
    pub activation: Tensor,
    pub temporal_stride: usize,
    pub spatial_stride: usize,
}

/// Static description of one block: convolutions and the shapes they see.
#[derive(Clone, Debug)]
struct BlockPlan {
    layer: LayerName,
    spatial: ConvSpec,
    temporal: Option<ConvSpec>,
    input_dims: [usize; 4],
    output_dims: [usize; 4],
    pool: Option<[usize; 3]>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Parameters,
    plan: Vec<BlockPlan>,
    scope: String,
}

/// Handles into a graph produced by [`Network::forward_graph`].
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    pub taps: Vec<(LayerName, Var)>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Initial per-channel scale. With `U(+-sqrt(1/fan_in))` weights each
/// convolution keeps a third of the input's second moment and ReLU keeps half,
/// so a spatial+temporal block needs gain `sqrt(18)` to stay at unit scale.
const BLOCK_GAIN: f32 = 4.242_640_7;
const FRAME_BLOCK_GAIN: f32 = 2.449_489_7;

impl Network {
    pub fn build(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let plan = Self::plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Parameters::new();
        let gain = if config.spatial_only { FRAME_BLOCK_GAIN } else { BLOCK_GAIN };
        for b in &plan {
            let name = b.layer.as_str();
            let c_in = b.input_dims[0];
            let c = b.spatial.out_channels;
            let fan = (c_in * 9) as f32;
            params.insert(format!("{name}.spatial.w"), uniform(&mut rng, &b.spatial.weight_shape(c_in), (1.0 / fan).sqrt()))?;
            if let Some(t) = &b.temporal {
                let fan = (c * 3) as f32;
                params.insert(format!("{name}.temporal.w"), uniform(&mut rng, &t.weight_shape(c), (1.0 / fan).sqrt()))?;
            }
            params.insert(format!("{name}.scale"), Tensor::full(&[c], gain))?;
            params.insert(format!("{name}.shift"), Tensor::zeros(&[c]))?;
        }
        let c = plan.last().expect("eight blocks").output_dims[0];
        let k = config.num_classes;
        let bound = (1.0 / c as f32).sqrt();
        params.insert("Logits.w", uniform(&mut rng, &[k, c, 1, 1, 1], bound))?;
        params.insert("Logits.b", uniform(&mut rng, &[k], bound))?;
        Ok(Network {
            config,
            params,
            plan,
            scope: String::new(),
        })
    }

    /// Rebuilds a network from a config and previously trained parameters.
    pub fn from_parameters(config: NetworkConfig, params: Parameters) -> Result<Network> {
        let fresh = Network::build(config)?;
        if fresh.params.len() != params.len() {
            return Err(Error::shape("network parameters", "count", fresh.params.len(), params.len()));
        }
        for ((na, ta), (nb, tb)) in fresh.params.iter().zip(params.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::invalid(
                    "network parameters",
                    format!("expected {na} {:?}, found {nb} {:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(Network { params, ..fresh })
    }

    fn plan(config: &NetworkConfig) -> Result<Vec<BlockPlan>> {
        let [t, h, w] = config.clip;
        let mut dims = [config.input_channels, t, h, w];
        let mut plan = Vec::with_capacity(8);
        for layer in LayerName::BLOCKS {
            let c = config.block_channels(layer);
            let stride = if layer == LayerName::Conv1 { 2 } else { 1 };
            let spatial = ConvSpec::spatial(c, stride);
            let g = spatial.geometry(dims).map_err(|e| collapse(layer, e))?;
            let temporal = (!config.spatial_only).then(|| ConvSpec::temporal(c));
            let out = g.output_dims();
            let pool = layer.pool_after().map(|mut p| {
                if config.spatial_only {
                    p[0] = 1;
                }
                p
            });
            plan.push(BlockPlan {
                layer,
                spatial,
                temporal,
                input_dims: dims,
                output_dims: out,
                pool,
            });
            dims = out;
            if let Some(p) = pool {
                for a in 0..3 {
                    if dims[a + 1] < p[a] {
                        let next = LayerName::BLOCKS.get(layer.index() + 1).copied().unwrap_or(LayerName::GlobalPool);
                        return Err(Error::Config(format!(
                            "clip {t}x{h}x{w} collapses before {next}: pooling {p:?} over {:?}",
                            &dims[1..]
                        )));
                    }
                    dims[a + 1] /= p[a];
                }
            }
        }
        Ok(plan)
    }

    /// Prefixes graph parameter names so several networks can share a graph.
    pub fn with_scope(mut self, scope: impl Into<String>) -> Self {
        self.scope = scope.into();
        self
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Activation shape `[C, T, H, W]` of a named layer.
    pub fn layer_dims(&self, layer: LayerName) -> [usize; 4] {
        match layer {
            LayerName::GlobalPool => [self.plan[7].output_dims[0], 1, 1, 1],
            LayerName::Logits => [self.config.num_classes, 1, 1, 1],
            _ => self.plan[layer.index()].output_dims,
        }
    }

    /// Cumulative `(temporal, spatial)` stride of a named layer.
    pub fn layer_strides(&self, layer: LayerName) -> (usize, usize) {
        let [_, t, h, _] = self.layer_dims(layer);
        (self.config.clip[0] / t, self.config.clip[1] / h)
    }

    /// Convolution geometries in execution order, classifier last.
    pub fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let mut out = Vec::new();
        for b in &self.plan {
            let g = b.spatial.geometry(b.input_dims).expect("validated at build");
            let mid = g.output_dims();
            out.push(g);
            if let Some(t) = &b.temporal {
                out.push(t.geometry(mid).expect("validated at build"));
            }
        }
        let c = self.plan[7].output_dims[0];
        out.push(
            ConvSpec::pointwise(self.config.num_classes)
                .geometry([c, 1, 1, 1])
                .expect("pointwise"),
        );
        out
    }

    /// Builds the forward pass into `g`. The graph stops after the last
    /// requested tap when `stop_early` is set (logits are then absent).
    fn run(
        &self,
        g: &mut Graph,
        input: Var,
        trainable: bool,
        taps: &[LayerName],
        stop_at: Option<LayerName>,
        stop_before_affine: bool,
    ) -> Result<(Option<Var>, Vec<(LayerName, Var)>)> {
        let [c, t, h, w] = g.value(input).dims4("network forward")?;
        let expect = [self.config.input_channels, self.config.clip[0], self.config.clip[1], self.config.clip[2]];
        const AX: [&str; 4] = ["channels", "time", "height", "width"];
        for (a, (&e, f)) in expect.iter().zip([c, t, h, w]).enumerate() {
            if e != f {
                return Err(Error::shape("network forward", AX[a], e, f));
            }
        }
        let mut found = Vec::new();
        let mut x = input;
        let want = |l: LayerName| taps.contains(&l);
        for b in &self.plan {
            let name = b.layer.as_str();
            let ws = g.param_scoped(&self.params, &self.scope, &format!("{name}.spatial.w"), trainable)?;
            x = g.conv3d(x, &b.spatial, ws, None)?;
            if let Some(ts) = &b.temporal {
                let wt = g.param_scoped(&self.params, &self.scope, &format!("{name}.temporal.w"), trainable)?;
                x = g.conv3d(x, ts, wt, None)?;
            }
            if stop_before_affine && stop_at == Some(b.layer) {
                return Ok((None, vec![(b.layer, x)]));
            }
            let sc = g.param_scoped(&self.params, &self.scope, &format!("{name}.scale"), trainable)?;
            let sh = g.param_scoped(&self.params, &self.scope, &format!("{name}.shift"), trainable)?;
            x = g.channel_affine(x, sc, sh)?;
            x = g.relu(x);
            if want(b.layer) {
                found.push((b.layer, x));
            }
            if stop_at == Some(b.layer) {
                return Ok((None, found));
            }
            if let Some(p) = b.pool {
                x = g.avg_pool3d(x, p, p)?;
            }
        }
        x = g.global_avg_pool(x)?;
        if want(LayerName::GlobalPool) {
            found.push((LayerName::GlobalPool, x));
        }
        if stop_at == Some(LayerName::GlobalPool) {
            return Ok((None, found));
        }
        let wl = g.param_scoped(&self.params, &self.scope, "Logits.w", trainable)?;
        let bl = g.param_scoped(&self.params, &self.scope, "Logits.b", trainable)?;
        let k = self.config.num_classes;
        let z = g.conv3d(x, &ConvSpec::pointwise(k), wl, Some(bl))?;
        if want(LayerName::Logits) {
            found.push((LayerName::Logits, z));
        }
        let logits = g.reshape(z, &[k])?;
        Ok((Some(logits), found))
    }

    /// Full forward pass recorded into `g`; `trainable` controls whether the
    /// parameters receive gradients.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, trainable: bool, taps: &[LayerName]) -> Result<NetOutput> {
        let (logits, taps) = self.run(g, input, trainable, taps, None, false)?;
        Ok(NetOutput {
            logits: logits.expect("full pass"),
            taps,
        })
    }

    /// Forward pass truncated after `layer`; returns that layer's activation.
    pub fn forward_to(&self, g: &mut Graph, input: Var, trainable: bool, layer: LayerName) -> Result<Var> {
        if layer == LayerName::Logits {
            let out = self.forward_graph(g, input, trainable, &[layer])?;
            return Ok(out.taps[0].1);
        }
        let (_, taps) = self.run(g, input, trainable, &[layer], Some(layer), false)?;
        Ok(taps[0].1)
    }

    /// Inference: logits plus any requested taps.
    pub fn forward(&self, clip: &Tensor, taps: &[LayerName]) -> Result<(Tensor, Vec<FeatureTap>)> {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let out = self.forward_graph(&mut g, x, false, taps)?;
        let mut result = Vec::with_capacity(taps.len());
        for &want in taps {
            let &(layer, v) = out
                .taps
                .iter()
                .find(|(l, _)| *l == want)
                .ok_or_else(|| Error::invalid("forward", format!("tap {want} not produced")))?;
            let (ts, ss) = self.layer_strides(layer);
            result.push(FeatureTap {
                layer,
                activation: g.value(v).clone(),
                temporal_stride: ts,
                spatial_stride: ss,
            });
        }
        Ok((g.take_value(out.logits), result))
    }

    pub fn logits(&self, clip: &Tensor) -> Result<Tensor> {
        Ok(self.forward(clip, &[])?.0)
    }

    /// Activation of one layer, computing only as far as needed.
    pub fn features(&self, clip: &Tensor, layer: LayerName) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let v = self.forward_to(&mut g, x, false, layer)?;
        Ok(g.take_value(v))
    }
}

impl Network {
    /// Data-dependent initialisation: block by block, sets each channel's
    /// affine so the block's pre-activation has zero mean and unit variance
    /// over `inputs`. Deterministic in `inputs`.
    pub fn calibrate(&mut self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::invalid("calibrate", "no inputs"));
        }
        for layer in LayerName::BLOCKS {
            let c = self.layer_dims(layer)[0];
            let mut sum = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            let mut n = 0usize;
            for x in inputs {
                let mut g = Graph::new();
                let v = g.input((*x).clone());
                let (_, found) = self.run(&mut g, v, false, &[], Some(layer), true)?;
                let a = g.value(found[0].1);
                let plane = a.len() / c;
                for (ch, chunk) in a.data().chunks_exact(plane).enumerate() {
                    for &y in chunk {
                        sum[ch] += y as f64;
                        sq[ch] += (y as f64) * (y as f64);
                    }
                }
                n += plane;
            }
            let name = layer.as_str();
            let mut scale = vec![0.0f32; c];
            let mut shift = vec![0.0f32; c];
            for ch in 0..c {
                let mean = sum[ch] / n as f64;
                let var = (sq[ch] / n as f64 - mean * mean).max(0.0);
                let inv = 1.0 / (var + 1e-5).sqrt();
                scale[ch] = inv as f32;
                shift[ch] = (-mean * inv) as f32;
            }
            self.params.require(&format!("{name}.scale"))?;
            self.params
                .get_mut(&format!("{name}.scale"))
                .expect("checked")
                .data_mut()
                .copy_from_slice(&scale);
            self.params
                .get_mut(&format!("{name}.shift"))
                .ok_or_else(|| Error::invalid("calibrate", format!("missing {name}.shift")))?
                .data_mut()
                .copy_from_slice(&shift);
        }
        Ok(())
    }
}

fn collapse(layer: LayerName, e: Error) -> Error {
    Error::Config(format!("clip too small at {layer}: {e}"))
}

/// Multiply-accumulates of a convolution stack, counted densely as
/// `output cells x input channels x kernel volume` (padding taps included).
pub fn count_macs(layers: &[ConvGeometry]) -> u64 {
    layers
        .iter()
        .map(|g| {
            let out: usize = g.output.iter().product();
            let k: usize = g.kernel.iter().product();
            (g.c_out * out * g.c_in * k) as u64
        })
        .sum()
}

/// Multiply-accumulates of one forward pass; depends on topology only.
pub fn count_flops(net: &Network) -> u64 {
    count_macs(&net.conv_geometries())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_names_parse_short_forms() {
        assert_eq!("2C".parse::<LayerName>().unwrap(), LayerName::Conv2C);
        assert_eq!("3a".parse::<LayerName>().unwrap(), LayerName::Block3A);
        assert_eq!("Block4F".parse::<LayerName>().unwrap(), LayerName::Block4F);
        assert!("6z".parse::<LayerName>().is_err());
        for l in LayerName::ALL {
            assert_eq!(l.as_str().parse::<LayerName>().unwrap(), l);
        }
    }

    #[test]
    fn order_matches_execution() {
        let mut sorted = LayerName::ALL;
        sorted.sort();
        assert_eq!(sorted, LayerName::ALL);
    }

    #[test]
    fn narrow_width_rejected() {
        let cfg = NetworkConfig {
            base_width: 3,
            ..Default::default()
        };
        assert!(Network::build(cfg).is_err());
    }

    #[test]
    fn short_clip_reports_collapsing_layer() {
        let cfg = NetworkConfig {
            clip: [8, 8, 8],
            ..Default::default()
        };
        let err = Network::build(cfg).unwrap_err().to_string();
        assert!(err.contains("Block5B"), "{err}");
    }

    #[test]
    fn single_pointwise_conv_is_one_mac() {
        let g = ConvSpec::pointwise(1).geometry([1, 1, 1, 1]).unwrap();
        assert_eq!(count_macs(&[g]), 1);
    }
}

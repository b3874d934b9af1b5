//! Flow-prediction decoders attached to a network tap, and the probing
//! protocol: train a decoder on a frozen backbone, or fine-tune both.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conv::ConvSpec;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::flow_repr::{decode_clip, downsample_flow_target, endpoint_error_clip, FlowMetrics};
use crate::graph::{Graph, Var};
use crate::net::{LayerName, Network};
use crate::tensor::{Parameters, Tensor};
use crate::train::{fit, SampleLoss, TrainConfig, TrainLog, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderKind {
    Simple,
    Spatial,
    Pwc,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Simple, DecoderKind::Spatial, DecoderKind::Pwc];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Simple => "Simple",
            DecoderKind::Spatial => "Spatial",
            DecoderKind::Pwc => "PWC",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Ok(DecoderKind::Simple),
            "spatial" => Ok(DecoderKind::Spatial),
            "pwc" => Ok(DecoderKind::Pwc),
            _ => Err(Error::invalid("decoder kind", format!("unknown decoder {s:?}"))),
        }
    }
}

/// Hidden widths of the PWC decoder before the final 3-channel layer.
pub const PWC_WIDTHS: [usize; 5] = [128, 128, 96, 64, 32];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderOptions {
    /// Limit PWC widths to four times the input channels when the input is
    /// narrower than 32 channels.
    pub cap_pwc: bool,
    /// Start the final layer at zero so an untrained decoder predicts no motion.
    pub zero_final: bool,
}

impl Default for DecoderOptions {
    fn default() -> Self {
        DecoderOptions {
            cap_pwc: true,
            zero_final: true,
        }
    }
}

/// Output channel count of every layer of a decoder.
pub fn decoder_widths(kind: DecoderKind, input_channels: usize, opts: &DecoderOptions) -> Vec<usize> {
    let mut widths = match kind {
        DecoderKind::Simple => vec![],
        DecoderKind::Spatial => vec![input_channels, input_channels],
        DecoderKind::Pwc => {
            let cap = if opts.cap_pwc && input_channels < 32 {
                4 * input_channels
            } else {
                usize::MAX
            };
            PWC_WIDTHS.iter().map(|&c| c.min(cap)).collect()
        }
    };
    widths.push(3);
    widths
}

/// A stack of convolutions with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Decoder {
    kind: DecoderKind,
    input_channels: usize,
    layers: Vec<ConvSpec>,
    params: Parameters,
    scope: String,
}

pub fn build_decoder(kind: DecoderKind, input_channels: usize, seed: u64, opts: &DecoderOptions) -> Result<Decoder> {
    if input_channels == 0 {
        return Err(Error::invalid("build_decoder", "input channels must be >= 1"));
    }
    let widths = decoder_widths(kind, input_channels, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    let mut layers = Vec::with_capacity(widths.len());
    let mut c_in = input_channels;
    let last = widths.len() - 1;
    for (i, &c) in widths.iter().enumerate() {
        let spec = if kind == DecoderKind::Simple || i == last {
            ConvSpec::pointwise(c)
        } else {
            ConvSpec::spatial(c, 1)
        };
        let shape = spec.weight_shape(c_in);
        let fan = (c_in * spec.kernel.iter().product::<usize>()) as f32;
        let (w, b) = if i == last && opts.zero_final {
            (Tensor::zeros(&shape), Tensor::zeros(&[c]))
        } else {
            // ReLU layers keep their output scale with a 6/fan_in range.
            let gain = if i == last { 1.0 } else { 6.0 };
            let bound = (gain / fan).sqrt();
            let w = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..=bound));
            (w, Tensor::zeros(&[c]))
        };
        params.insert(format!("layer{i}.w"), w)?;
        params.insert(format!("layer{i}.b"), b)?;
        layers.push(spec);
        c_in = c;
    }
    Ok(Decoder {
        kind,
        input_channels,
        layers,
        params,
        scope: String::new(),
    })
}

impl Decoder {
    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn with_scope(mut self, scope: impl Into<String>) -> Self {
        self.scope = scope.into();
        self
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_channels).collect()
    }

    /// Kernel extents `(kt, kh, kw)` of every layer.
    pub fn kernels(&self) -> Vec<[usize; 3]> {
        self.layers.iter().map(|l| l.kernel).collect()
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let c = g.value(x).dims4("decoder")?[0];
        if c != self.input_channels {
            return Err(Error::shape("decoder", "channels", self.input_channels, c));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, spec) in self.layers.iter().enumerate() {
            let w = g.param_scoped(&self.params, &self.scope, &format!("layer{i}.w"), trainable)?;
            let b = g.param_scoped(&self.params, &self.scope, &format!("layer{i}.b"), trainable)?;
            h = g.conv3d(h, spec, w, Some(b))?;
            if i != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Decodes `[C, T, H, W]` features to `[3, T, H, W]` (mag, sin, cos) planes.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let y = self.forward_graph(&mut g, x, false)?;
        Ok(g.take_value(y))
    }
}

impl Trainable for Decoder {
    fn param_groups(&self) -> Vec<(&str, &Parameters)> {
        vec![(self.scope(), self.params())]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
        vec![&mut self.params]
    }
}

/// Backbone through `tap` followed by a decoder, recorded into `g`.
pub fn predict_flow_graph(
    g: &mut Graph,
    backbone: &Network,
    decoder: &Decoder,
    input: Var,
    tap: LayerName,
    fine_tune: bool,
) -> Result<Var> {
    check_tap(backbone, decoder, tap)?;
    let feats = backbone.forward_to(g, input, fine_tune, tap)?;
    decoder.forward_graph(g, feats, true)
}

/// Predicted (mag, sin, cos) planes at the tap's resolution.
pub fn predict_flow(backbone: &Network, decoder: &Decoder, input: &Tensor, tap: LayerName) -> Result<Tensor> {
    check_tap(backbone, decoder, tap)?;
    decoder.predict(&backbone.features(input, tap)?)
}

fn check_tap(backbone: &Network, decoder: &Decoder, tap: LayerName) -> Result<()> {
    if tap == LayerName::Logits {
        return Err(Error::invalid("probe", "tap must precede Logits"));
    }
    let c = backbone.layer_dims(tap)[0];
    if c != decoder.input_channels {
        return Err(Error::shape("probe", "tap channels", decoder.input_channels, c));
    }
    Ok(())
}

/// How a backbone consumes a dataset sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamInput {
    /// RGB scaled to `[-1, 1]`.
    Rgb,
    /// TV-L1 flow as (mag, sin, cos) planes.
    Flow,
}

impl StreamInput {
    pub fn prepare(self, ds: &Dataset, id: usize) -> Result<Tensor> {
        match self {
            StreamInput::Rgb => Ok(rgb_input(&ds.clips[id])),
            StreamInput::Flow => crate::flow_repr::encode_clip(&ds.flows[id]),
        }
    }
}

/// Maps RGB in `[0, 1]` to `[-1, 1]`.
pub fn rgb_input(clip: &Tensor) -> Tensor {
    clip.map(|v| 2.0 * v - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub tap: LayerName,
    pub kind: DecoderKind,
    pub fine_tune_backbone: bool,
    pub train: TrainConfig,
    pub options: DecoderOptions,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap == LayerName::Logits {
            return Err(Error::Config("probe tap must precede Logits".into()));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub decoder: Decoder,
    /// The updated backbone when fine-tuning.
    pub backbone: Option<Network>,
    pub metrics: FlowMetrics,
    pub steps: usize,
    pub log: TrainLog,
}

/// Flow targets and reference flow at the tap's resolution.
pub struct ProbeTargets {
    pub repr: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

pub fn probe_targets(backbone: &Network, ds: &Dataset, tap: LayerName) -> Result<ProbeTargets> {
    let [_, t, h, w] = backbone.layer_dims(tap);
    let repr: Vec<Tensor> = ds
        .flows
        .par_iter()
        .map(|f| downsample_flow_target(f, [t, h, w]))
        .collect::<Result<_>>()?;
    let flow = repr.par_iter().map(decode_clip).collect::<Result<_>>()?;
    Ok(ProbeTargets { repr, flow })
}

/// Mean metrics over `ids`, decoding every prediction through the same path.
pub fn evaluate_predictions(preds: &[Tensor], refs: &[&Tensor]) -> Result<FlowMetrics> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluate", "no clips"));
    }
    let mut acc: Option<FlowMetrics> = None;
    for (p, r) in preds.iter().zip(refs) {
        let m = endpoint_error_clip(&decode_clip(p)?, r)?;
        acc = Some(match acc {
            None => m,
            Some(mut a) => {
                a.epe += m.epe;
                a.epe_interior += m.epe_interior;
                for (x, y) in a.per_frame.iter_mut().zip(&m.per_frame) {
                    *x += y;
                }
                a
            }
        });
    }
    let mut m = acc.expect("non-empty");
    let n = preds.len() as f64;
    m.epe /= n;
    m.epe_interior /= n;
    for x in &mut m.per_frame {
        *x /= n;
    }
    Ok(m)
}

/// Backbone and decoder trained jointly.
struct FineTuned {
    backbone: Network,
    decoder: Decoder,
}

impl Trainable for FineTuned {
    fn param_groups(&self) -> Vec<(&str, &Parameters)> {
        vec![
            (self.backbone.scope(), self.backbone.params()),
            (self.decoder.scope(), self.decoder.params()),
        ]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
        vec![self.backbone.params_mut(), self.decoder.params_mut()]
    }
}

/// Trains a decoder on the train split and reports EPE on the validation
/// split against average-pooled TV-L1 flow at the tap's resolution.
pub fn train_probe(backbone: &Network, input: StreamInput, cfg: &ProbeConfig, ds: &Dataset) -> Result<ProbeResult> {
    cfg.validate()?;
    let c = backbone.layer_dims(cfg.tap)[0];
    let decoder = build_decoder(cfg.kind, c, cfg.train.seed, &cfg.options)?;
    let targets = probe_targets(backbone, ds, cfg.tap)?;
    let train_ids = ds.ids(Split::Train);
    let val_ids = ds.ids(Split::Validation);
    let steps = cfg.train.total_steps(train_ids.len());
    let mut log = TrainLog::default();
    if cfg.fine_tune_backbone {
        let mut model = FineTuned {
            backbone: backbone.clone().with_scope("backbone."),
            decoder: decoder.with_scope("decoder."),
        };
        fit(
            &mut model,
            &train_ids,
            &cfg.train,
            "probe fine-tuning",
            |m, i, g| {
                let x = g.input(input.prepare(ds, i)?);
                let y = predict_flow_graph(g, &m.backbone, &m.decoder, x, cfg.tap, true)?;
                let loss = g.flow_loss(y, &targets.repr[i])?;
                let v = g.scalar_f64(loss);
                Ok(SampleLoss { loss, action: 0.0, aux: v })
            },
            |r| log.push(r),
        )?;
        let preds: Vec<Tensor> = val_ids
            .par_iter()
            .map(|&i| predict_flow(&model.backbone, &model.decoder, &input.prepare(ds, i)?, cfg.tap))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = val_ids.iter().map(|&i| &targets.flow[i]).collect();
        let metrics = evaluate_predictions(&preds, &refs)?;
        Ok(ProbeResult {
            decoder: model.decoder.with_scope(""),
            backbone: Some(model.backbone.with_scope("")),
            metrics,
            steps,
            log,
        })
    } else {
        let mut needed = train_ids.clone();
        needed.extend(&val_ids);
        let mut features: Vec<Option<Tensor>> = vec![None; ds.len()];
        let computed: Vec<(usize, Tensor)> = needed
            .par_iter()
            .map(|&i| Ok((i, backbone.features(&input.prepare(ds, i)?, cfg.tap)?)))
            .collect::<Result<_>>()?;
        for (i, f) in computed {
            features[i] = Some(f);
        }
        let mut decoder = decoder;
        fit(
            &mut decoder,
            &train_ids,
            &cfg.train,
            "probe",
            |d, i, g| {
                let x = g.input(features[i].clone().expect("cached"));
                let y = d.forward_graph(g, x, true)?;
                let loss = g.flow_loss(y, &targets.repr[i])?;
                let v = g.scalar_f64(loss);
                Ok(SampleLoss { loss, action: 0.0, aux: v })
            },
            |r| log.push(r),
        )?;
        let preds: Vec<Tensor> = val_ids
            .par_iter()
            .map(|&i| decoder.predict(features[i].as_ref().expect("cached")))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = val_ids.iter().map(|&i| &targets.flow[i]).collect();
        let metrics = evaluate_predictions(&preds, &refs)?;
        Ok(ProbeResult {
            decoder,
            backbone: None,
            metrics,
            steps,
            log,
        })
    }
}

/// EPE of predicting zero flow on the validation split at a tap's resolution.
pub fn zero_baseline(backbone: &Network, ds: &Dataset, tap: LayerName) -> Result<FlowMetrics> {
    let targets = probe_targets(backbone, ds, tap)?;
    let val_ids = ds.ids(Split::Validation);
    let preds: Vec<Tensor> = val_ids.iter().map(|&i| Tensor::zeros(targets.repr[i].shape())).collect();
    let refs: Vec<&Tensor> = val_ids.iter().map(|&i| &targets.flow[i]).collect();
    evaluate_predictions(&preds, &refs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeMode {
    Frozen,
    FineTuned,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Frozen => "frozen",
            ProbeMode::FineTuned => "ft",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layer: LayerName,
    pub kind: DecoderKind,
    pub mode: ProbeMode,
    /// `Err` carries the failure message of a cell that did not finish.
    pub result: std::result::Result<FlowMetrics, String>,
    pub steps: usize,
    pub seed: u64,
}

/// One probe per (layer, kind, mode) cell, every cell from the same seed.
/// Failed cells are recorded rather than aborting the sweep.
pub fn layer_sweep(
    backbone: &Network,
    input: StreamInput,
    kinds: &[DecoderKind],
    layers: &[LayerName],
    modes: &[ProbeMode],
    train: &TrainConfig,
    options: &DecoderOptions,
    ds: &Dataset,
) -> Vec<SweepRow> {
    let mut cells = Vec::new();
    for &layer in layers {
        for &kind in kinds {
            for &mode in modes {
                cells.push((layer, kind, mode));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(layer, kind, mode)| {
            let cfg = ProbeConfig {
                tap: layer,
                kind,
                fine_tune_backbone: mode == ProbeMode::FineTuned,
                train: train.clone(),
                options: *options,
            };
            let steps = cfg.train.total_steps(ds.ids(Split::Train).len());
            let result = train_probe(backbone, input, &cfg, ds)
                .map(|r| r.metrics)
                .map_err(|e| e.to_string());
            SweepRow {
                layer,
                kind,
                mode,
                result,
                steps,
                seed: train.seed,
            }
        })
        .collect()
}

/// CSV with header `layer,kind,mode,epe,epe_interior,steps,seed`; failed
/// cells have empty metric fields.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("layer,kind,mode,epe,epe_interior,steps,seed\n");
    for r in rows {
        let (e, ei) = match &r.result {
            Ok(m) => (format!("{:.6}", m.epe), format!("{:.6}", m.epe_interior)),
            Err(_) => (String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer,
            r.kind,
            r.mode.as_str(),
            e,
            ei,
            r.steps,
            r.seed
        ));
    }
    s
}

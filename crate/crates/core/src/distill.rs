//! Training procedures: the temporal-stream teacher, the RGB baseline, the
//! distilled RGB student, and the two alternatives that use flow without
//! distillation (auxiliary flow supervision and predicted flow as input).

use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::{clip_seed, Dataset, Split};
use crate::decoders::{
    build_decoder, predict_flow_graph, probe_targets, rgb_input, train_probe, Decoder, DecoderKind, DecoderOptions,
    ProbeConfig, StreamInput,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::net::{LayerName, Network, NetworkConfig};
use crate::tensor::{Parameters, Tensor};
use crate::train::{fit, SampleLoss, TrainConfig, TrainLog, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TeacherSource {
    TemporalStream,
    SpatialStream,
}

impl TeacherSource {
    pub fn input(self) -> StreamInput {
        match self {
            TeacherSource::TemporalStream => StreamInput::Flow,
            TeacherSource::SpatialStream => StreamInput::Rgb,
        }
    }
}

impl FromStr for TeacherSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "temporal" | "temporalstream" => Ok(TeacherSource::TemporalStream),
            "spatial" | "spatialstream" => Ok(TeacherSource::SpatialStream),
            _ => Err(Error::Config(format!("unknown teacher source {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillLossConfig {
    pub lambda: f32,
    pub use_action_loss: bool,
    pub distill_point: LayerName,
    pub teacher_source: TeacherSource,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        DistillLossConfig {
            lambda: 1.0,
            use_action_loss: true,
            distill_point: LayerName::Logits,
            teacher_source: TeacherSource::TemporalStream,
        }
    }
}

impl DistillLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.lambda == 0.0 && !self.use_action_loss {
            return Err(Error::Config("lambda = 0 without the action loss leaves no training signal".into()));
        }
        Ok(())
    }
}

/// Batch-mean losses of one step; `total = [use_action] * action + lambda * distill`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub action: f64,
    pub distill: f64,
    pub step: usize,
}

/// Mean squared difference over all elements, in f64.
pub fn distillation_loss_values(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        let axis = student
            .shape()
            .iter()
            .zip(teacher.shape())
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(Error::shape(
            "distillation_loss",
            format!("axis {axis}"),
            teacher.shape().get(axis).copied().unwrap_or(0),
            student.shape().get(axis).copied().unwrap_or(0),
        ));
    }
    let n = student.len().max(1) as f64;
    Ok(student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Distillation term for a batch of pre-softmax outputs stacked as `[N, K]`
/// (or any equal shapes): the mean over batch and classes of squared
/// differences. The teacher side is a constant, so gradients reach only the
/// student.
pub fn distillation_loss(g: &mut Graph, student_out: Var, teacher_out: &Tensor) -> Result<Var> {
    distillation_loss_values(g.value(student_out), teacher_out)?;
    let t = g.input(teacher_out.clone());
    g.mse(student_out, t)
}

/// Stacked clips of one mini-batch with their flow and labels.
#[derive(Clone, Debug)]
pub struct VideoBatch<'a> {
    pub clips: Vec<&'a Tensor>,
    pub flows: Vec<&'a Tensor>,
    pub labels: Vec<usize>,
}

impl<'a> VideoBatch<'a> {
    pub fn from_ids(ds: &'a Dataset, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("batch", "batch size must be >= 1"));
        }
        Ok(VideoBatch {
            clips: ids.iter().map(|&i| &ds.clips[i]).collect(),
            flows: ids.iter().map(|&i| &ds.flows[i]).collect(),
            labels: ids.iter().map(|&i| ds.labels[i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn teacher_input(&self, i: usize, source: TeacherSource) -> Result<Tensor> {
        match source {
            TeacherSource::TemporalStream => crate::flow_repr::encode_clip(self.flows[i]),
            TeacherSource::SpatialStream => Ok(rgb_input(self.clips[i])),
        }
    }
}

/// Activation of the distillation point for a frozen network.
pub fn distill_target(teacher: &Network, input: &Tensor, point: LayerName) -> Result<Tensor> {
    if point == LayerName::Logits {
        teacher.logits(input)
    } else {
        teacher.features(input, point)
    }
}

fn check_point(student: &Network, teacher: &Network, point: LayerName) -> Result<()> {
    let (s, t) = (student.layer_dims(point), teacher.layer_dims(point));
    if point == LayerName::Logits {
        if s[0] != t[0] {
            return Err(Error::shape("total_loss", "classes", t[0], s[0]));
        }
    } else if s != t {
        return Err(Error::shape("total_loss", format!("{point} channels"), t[0], s[0]));
    }
    Ok(())
}

/// One sample of the combined objective. The distillation node is only built
/// when it carries weight, so `lambda = 0` reproduces plain cross-entropy
/// training exactly.
fn student_sample(
    g: &mut Graph,
    student: &Network,
    input: &Tensor,
    label: usize,
    target: &Tensor,
    cfg: &DistillLossConfig,
) -> Result<SampleLoss> {
    let x = g.input(input.clone());
    let taps = if cfg.distill_point == LayerName::Logits {
        vec![]
    } else {
        vec![cfg.distill_point]
    };
    let out = student.forward_graph(g, x, true, &taps)?;
    let point = if cfg.distill_point == LayerName::Logits {
        out.logits
    } else {
        out.taps[0].1
    };
    let ce = g.softmax_cross_entropy(out.logits, label)?;
    let action = g.scalar_f64(ce);
    let (loss, distill) = if cfg.lambda == 0.0 {
        let d = distillation_loss_values(g.value(point), target)?;
        (ce, d)
    } else {
        let ld = distillation_loss(g, point, target)?;
        let d = g.scalar_f64(ld);
        let weighted = g.scale(ld, cfg.lambda);
        let loss = if cfg.use_action_loss { g.add(ce, weighted)? } else { weighted };
        (loss, d)
    };
    Ok(SampleLoss {
        loss,
        action,
        aux: distill,
    })
}

/// Loss values of a batch; the teacher runs without gradient tracking.
pub fn total_loss(
    batch: &VideoBatch,
    student: &Network,
    teacher: &Network,
    cfg: &DistillLossConfig,
    step: usize,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_point(student, teacher, cfg.distill_point)?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("total_loss", "empty batch"));
    }
    let (mut total, mut action, mut distill) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let target = distill_target(teacher, &batch.teacher_input(i, cfg.teacher_source)?, cfg.distill_point)?;
        let mut g = Graph::new();
        let s = student_sample(&mut g, student, &rgb_input(batch.clips[i]), batch.labels[i], &target, cfg)?;
        total += g.scalar_f64(s.loss);
        action += s.action;
        distill += s.aux;
    }
    let n = n as f64;
    Ok(LossBreakdown {
        total: total / n,
        action: action / n,
        distill: distill / n,
        step,
    })
}

/// Inputs for every clip of a dataset.
pub fn prepare_inputs(ds: &Dataset, input: StreamInput) -> Result<Vec<Tensor>> {
    (0..ds.len()).into_par_iter().map(|i| input.prepare(ds, i)).collect()
}

/// Clips used for data-dependent initialisation: the first train clips by id.
pub const CALIBRATION_CLIPS: usize = 64;

/// Builds a network and calibrates its affines on the first train clips.
pub fn calibrated_network(net_cfg: &NetworkConfig, ds: &Dataset, inputs: &[Tensor]) -> Result<Network> {
    let mut net = Network::build(net_cfg.clone())?;
    let ids = ds.ids(Split::Train);
    let batch: Vec<&Tensor> = ids.iter().take(CALIBRATION_CLIPS).map(|&i| &inputs[i]).collect();
    net.calibrate(&batch)?;
    Ok(net)
}

/// Probability vector from logits.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of the members' softmax outputs on one input.
pub fn ensemble_predict(models: &[&Network], input: &Tensor) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("ensemble_predict", "no models"))?;
    let k = first.num_classes();
    let mut acc = vec![0.0; k];
    for m in models {
        if m.num_classes() != k {
            return Err(Error::shape("ensemble_predict", "classes", k, m.num_classes()));
        }
        for (a, p) in acc.iter_mut().zip(softmax(m.logits(input)?.data())) {
            *a += p;
        }
    }
    let n = models.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Fraction of `ids` whose argmax matches the label.
pub fn accuracy(net: &Network, inputs: &[Tensor], ds: &Dataset, ids: &[usize]) -> Result<f64> {
    ensemble_accuracy(&[net], inputs, ds, ids)
}

pub fn ensemble_accuracy(models: &[&Network], inputs: &[Tensor], ds: &Dataset, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("accuracy", "no clips"));
    }
    let hits = ids
        .par_iter()
        .map(|&i| Ok((argmax(&ensemble_predict(models, &inputs[i])?) == ds.labels[i]) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ids.len() as f64)
}

fn classifier_sample(g: &mut Graph, net: &Network, input: &Tensor, label: usize) -> Result<SampleLoss> {
    let x = g.input(input.clone());
    let out = net.forward_graph(g, x, true, &[])?;
    let ce = g.softmax_cross_entropy(out.logits, label)?;
    let v = g.scalar_f64(ce);
    Ok(SampleLoss {
        loss: ce,
        action: v,
        aux: 0.0,
    })
}

/// Plain cross-entropy training on one input stream.
pub fn train_classifier(
    ds: &Dataset,
    net_cfg: &NetworkConfig,
    train: &TrainConfig,
    input: StreamInput,
) -> Result<(Network, TrainLog)> {
    let inputs = prepare_inputs(ds, input)?;
    let mut net = calibrated_network(net_cfg, ds, &inputs)?;
    let mut log = TrainLog::default();
    let what = match input {
        StreamInput::Rgb => "spatial stream",
        StreamInput::Flow => "temporal stream",
    };
    fit(
        &mut net,
        &ds.ids(Split::Train),
        train,
        what,
        |m, i, g| classifier_sample(g, m, &inputs[i], ds.labels[i]),
        |r| log.push(r),
    )?;
    Ok((net, log))
}

/// The temporal-stream teacher: cross-entropy on encoded TV-L1 flow.
pub fn train_teacher(ds: &Dataset, net_cfg: &NetworkConfig, train: &TrainConfig) -> Result<(Network, TrainLog)> {
    train_classifier(ds, net_cfg, train, StreamInput::Flow)
}

/// The RGB spatial stream trained with cross-entropy only.
pub fn train_baseline(ds: &Dataset, net_cfg: &NetworkConfig, train: &TrainConfig) -> Result<(Network, TrainLog)> {
    train_classifier(ds, net_cfg, train, StreamInput::Rgb)
}

/// RGB student trained with `[use_action] * L_a + lambda * L_d` against a
/// frozen teacher whose outputs are computed once per clip.
pub fn train_student_distilled(
    ds: &Dataset,
    teacher: &Network,
    net_cfg: &NetworkConfig,
    train: &TrainConfig,
    cfg: &DistillLossConfig,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    let inputs = prepare_inputs(ds, StreamInput::Rgb)?;
    let mut student = calibrated_network(net_cfg, ds, &inputs)?;
    check_point(&student, teacher, cfg.distill_point)?;
    let train_ids = ds.ids(Split::Train);
    let teacher_inputs = prepare_inputs(ds, cfg.teacher_source.input())?;
    let mut targets: Vec<Option<Tensor>> = vec![None; ds.len()];
    let computed: Vec<(usize, Tensor)> = train_ids
        .par_iter()
        .map(|&i| Ok((i, distill_target(teacher, &teacher_inputs[i], cfg.distill_point)?)))
        .collect::<Result<_>>()?;
    for (i, t) in computed {
        targets[i] = Some(t);
    }
    let mut log = TrainLog::default();
    fit(
        &mut student,
        &train_ids,
        train,
        "distilled student",
        |m, i, g| {
            let t = targets[i].as_ref().expect("cached for every train clip");
            student_sample(g, m, &inputs[i], ds.labels[i], t, cfg)
        },
        |r| log.push(r),
    )?;
    Ok((student, log))
}

/// RGB classifier with a Simple flow decoder on its Block3A activations.
#[derive(Clone, Debug)]
pub struct FlowSupervised {
    pub net: Network,
    pub decoder: Decoder,
}

impl Trainable for FlowSupervised {
    fn param_groups(&self) -> Vec<(&str, &Parameters)> {
        vec![(self.net.scope(), self.net.params()), (self.decoder.scope(), self.decoder.params())]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
        vec![self.net.params_mut(), self.decoder.params_mut()]
    }
}

pub const FLOW_SUPERVISION_TAP: LayerName = LayerName::Block3A;

/// Cross-entropy plus `weight` times the flow loss of a Simple decoder at
/// Block3A. With `weight = 0` the decoder is never evaluated and training
/// matches [`train_baseline`] exactly.
pub fn train_flow_supervised(
    ds: &Dataset,
    net_cfg: &NetworkConfig,
    train: &TrainConfig,
    weight: f32,
) -> Result<(FlowSupervised, TrainLog)> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Config(format!("flow loss weight {weight} must be finite and >= 0")));
    }
    let inputs = prepare_inputs(ds, StreamInput::Rgb)?;
    let net = calibrated_network(net_cfg, ds, &inputs)?;
    let c = net.layer_dims(FLOW_SUPERVISION_TAP)[0];
    let decoder = build_decoder(DecoderKind::Simple, c, train.seed, &DecoderOptions::default())?.with_scope("decoder.");
    let targets = probe_targets(&net, ds, FLOW_SUPERVISION_TAP)?;
    let mut model = FlowSupervised { net, decoder };
    let mut log = TrainLog::default();
    fit(
        &mut model,
        &ds.ids(Split::Train),
        train,
        "flow-supervised stream",
        |m, i, g| {
            if weight == 0.0 {
                return classifier_sample(g, &m.net, &inputs[i], ds.labels[i]);
            }
            let x = g.input(inputs[i].clone());
            let out = m.net.forward_graph(g, x, true, &[FLOW_SUPERVISION_TAP])?;
            let ce = g.softmax_cross_entropy(out.logits, ds.labels[i])?;
            let pred = m.decoder.forward_graph(g, out.taps[0].1, true)?;
            let fl = g.flow_loss(pred, &targets.repr[i])?;
            let (a, f) = (g.scalar_f64(ce), g.scalar_f64(fl));
            let weighted = g.scale(fl, weight);
            let loss = g.add(ce, weighted)?;
            Ok(SampleLoss { loss, action: a, aux: f })
        },
        |r| log.push(r),
    )?;
    Ok((model.with_scope_cleared(), log))
}

impl FlowSupervised {
    fn with_scope_cleared(self) -> Self {
        FlowSupervised {
            net: self.net.with_scope(""),
            decoder: self.decoder.with_scope(""),
        }
    }
}

/// RGB -> (backbone through Block3A + Simple decoder) -> nearest upsampling ->
/// temporal stream. Only RGB is needed at inference.
#[derive(Clone, Debug)]
pub struct FlowAsInput {
    pub front: Network,
    pub decoder: Decoder,
    pub stream: Network,
    pub upsample: [usize; 3],
}

impl Trainable for FlowAsInput {
    fn param_groups(&self) -> Vec<(&str, &Parameters)> {
        vec![
            (self.front.scope(), self.front.params()),
            (self.decoder.scope(), self.decoder.params()),
            (self.stream.scope(), self.stream.params()),
        ]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
        vec![self.front.params_mut(), self.decoder.params_mut(), self.stream.params_mut()]
    }
}

impl FlowAsInput {
    /// Joins a flow-predicting front and a temporal stream, checking that
    /// the predicted flow upsamples exactly to the stream's input extents.
    pub fn assemble(front: Network, decoder: Decoder, stream: Network) -> Result<FlowAsInput> {
        let [c, t, h, w] = front.layer_dims(FLOW_SUPERVISION_TAP);
        if decoder.input_channels() != c {
            return Err(Error::shape("flow-as-input", "decoder channels", c, decoder.input_channels()));
        }
        let sc = stream.config();
        if sc.input_channels != 3 {
            return Err(Error::shape("flow-as-input", "stream input channels", 3, sc.input_channels));
        }
        let mut up = [0; 3];
        for (a, (&src, &dst)) in [t, h, w].iter().zip(&sc.clip).enumerate() {
            if dst % src != 0 {
                return Err(Error::invalid(
                    "flow-as-input",
                    format!("predicted flow extent {src} does not divide stream extent {dst} on axis {a}"),
                ));
            }
            up[a] = dst / src;
        }
        Ok(FlowAsInput {
            front: front.with_scope("front."),
            decoder: decoder.with_scope("decoder."),
            stream: stream.with_scope("stream."),
            upsample: up,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph, rgb: Var, trainable: bool) -> Result<Var> {
        let repr = predict_flow_graph(g, &self.front, &self.decoder, rgb, FLOW_SUPERVISION_TAP, trainable)?;
        let up = g.upsample_nearest(repr, self.upsample)?;
        Ok(self.stream.forward_graph(g, up, trainable, &[])?.logits)
    }

    /// Predicted flow planes at the stream's input resolution.
    pub fn predicted_flow(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(rgb.clone());
        let repr = predict_flow_graph(&mut g, &self.front, &self.decoder, x, FLOW_SUPERVISION_TAP, false)?;
        let up = g.upsample_nearest(repr, self.upsample)?;
        Ok(g.take_value(up))
    }

    pub fn logits(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(rgb.clone());
        let z = self.forward_graph(&mut g, x, false)?;
        Ok(g.take_value(z))
    }

    pub fn accuracy(&self, inputs: &[Tensor], ds: &Dataset, ids: &[usize]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::invalid("accuracy", "no clips"));
        }
        let hits = ids
            .par_iter()
            .map(|&i| Ok((argmax(&softmax(self.logits(&inputs[i])?.data())) == ds.labels[i]) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / ids.len() as f64)
    }
}

/// Pretrains the flow front by fine-tuning a fresh RGB network with a Simple
/// decoder at Block3A on TV-L1 flow.
pub fn pretrain_flow_front(ds: &Dataset, net_cfg: &NetworkConfig, train: &TrainConfig) -> Result<(Network, Decoder)> {
    let inputs = prepare_inputs(ds, StreamInput::Rgb)?;
    let net = calibrated_network(net_cfg, ds, &inputs)?;
    let cfg = ProbeConfig {
        tap: FLOW_SUPERVISION_TAP,
        kind: DecoderKind::Simple,
        fine_tune_backbone: true,
        train: train.clone(),
        options: DecoderOptions::default(),
    };
    let r = train_probe(&net, StreamInput::Rgb, &cfg, ds)?;
    Ok((r.backbone.expect("fine-tuned"), r.decoder))
}

/// Fine-tunes the assembled composite end to end with cross-entropy.
pub fn train_flow_as_input(ds: &Dataset, mut model: FlowAsInput, train: &TrainConfig) -> Result<(FlowAsInput, TrainLog)> {
    let inputs = prepare_inputs(ds, StreamInput::Rgb)?;
    let mut log = TrainLog::default();
    fit(
        &mut model,
        &ds.ids(Split::Train),
        train,
        "flow-as-input composite",
        |m, i, g| {
            let x = g.input(inputs[i].clone());
            let z = m.forward_graph(g, x, true)?;
            let ce = g.softmax_cross_entropy(z, ds.labels[i])?;
            let v = g.scalar_f64(ce);
            Ok(SampleLoss { loss: ce, action: v, aux: 0.0 })
        },
        |r| log.push(r),
    )?;
    Ok((model, log))
}

/// Frame index shown to the single-frame classifier for clip `id`.
pub fn sampled_frame(seed: u64, id: usize, t: usize) -> usize {
    (clip_seed(seed ^ 0x5F5F, id as u64) % t as u64) as usize
}

/// One RGB frame of a clip as a `[3, 1, H, W]` input in `[-1, 1]`.
pub fn frame_input(clip: &Tensor, f: usize) -> Result<Tensor> {
    let [c, t, h, w] = clip.dims4("frame_input")?;
    if f >= t {
        return Err(Error::invalid("frame_input", format!("frame {f} of {t}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let s = (ch * t + f) * plane;
        out.extend(clip.data()[s..s + plane].iter().map(|v| 2.0 * v - 1.0));
    }
    Tensor::new(vec![c, 1, h, w], out)
}

/// Trains a 2D network (spatial convolutions only) on one sampled frame per
/// clip and returns it with its held-out accuracy on sampled frames.
pub fn train_single_frame(ds: &Dataset, net_cfg: &NetworkConfig, train: &TrainConfig) -> Result<(Network, f64)> {
    let [t, h, w] = ds.config.clip;
    let cfg = NetworkConfig {
        clip: [1, h, w],
        spatial_only: true,
        ..net_cfg.clone()
    };
    let inputs: Vec<Tensor> = (0..ds.len())
        .into_par_iter()
        .map(|i| frame_input(&ds.clips[i], sampled_frame(train.seed, i, t)))
        .collect::<Result<_>>()?;
    let mut net = calibrated_network(&cfg, ds, &inputs)?;
    fit(
        &mut net,
        &ds.ids(Split::Train),
        train,
        "single-frame classifier",
        |m, i, g| classifier_sample(g, m, &inputs[i], ds.labels[i]),
        |_| {},
    )?;
    let acc = accuracy(&net, &inputs, ds, &ds.ids(Split::Validation))?;
    Ok((net, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distill_formula() {
        let s = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[2]);
        assert_eq!(distillation_loss_values(&s, &t).unwrap(), 0.5);
        assert_eq!(distillation_loss_values(&s, &s).unwrap(), 0.0);
        assert!(distillation_loss_values(&s, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn no_signal_rejected() {
        let cfg = DistillLossConfig {
            lambda: 0.0,
            use_action_loss: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 0.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 0);
    }
}

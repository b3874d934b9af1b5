//! Training pipelines and the ablation matrix, shared by the command line
//! and the acceptance suite. Nothing here touches the file system.

use std::fmt;

use d3d_core::dataset::{Dataset, Split};
use d3d_core::decoders::{
    build_decoder, layer_sweep, predict_flow, train_probe, zero_baseline, DecoderKind, ProbeConfig, ProbeMode,
    StreamInput, SweepRow,
};
use d3d_core::distill::{
    accuracy, ensemble_accuracy, pretrain_flow_front, prepare_inputs, train_baseline, train_flow_as_input,
    train_flow_supervised, train_student_distilled, train_teacher, DistillLossConfig, FlowAsInput, TeacherSource,
};
use d3d_core::flow_repr::FlowMetrics;
use d3d_core::train::TrainLog;
use d3d_core::{LayerName, Network, Result, Tensor};

use crate::config::RunConfig;

/// Rows of the ablation matrix, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    TemporalStream,
    FlowAsInput,
    FlowSupervised,
    Distill2C,
    Distill4C,
    Distill4F,
    NoActionLoss,
    SpatialTeacher,
    D3D,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Baseline,
        Method::TemporalStream,
        Method::FlowAsInput,
        Method::FlowSupervised,
        Method::Distill2C,
        Method::Distill4C,
        Method::Distill4F,
        Method::NoActionLoss,
        Method::SpatialTeacher,
        Method::D3D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "rgb_baseline",
            Method::TemporalStream => "temporal_stream",
            Method::FlowAsInput => "flow_as_input",
            Method::FlowSupervised => "flow_supervision",
            Method::Distill2C => "d3d_at_2c",
            Method::Distill4C => "d3d_at_4c",
            Method::Distill4F => "d3d_at_4f_lambda100",
            Method::NoActionLoss => "d3d_no_action_loss",
            Method::SpatialTeacher => "d3d_spatial_teacher",
            Method::D3D => "d3d",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "RGB baseline",
            Method::TemporalStream => "Temporal stream (TV-L1)",
            Method::FlowAsInput => "3D CNN flow as input",
            Method::FlowSupervised => "Flow loss at 3A",
            Method::Distill2C => "D3D distilled at 2C",
            Method::Distill4C => "D3D distilled at 4C",
            Method::Distill4F => "D3D distilled at 4F (lambda 100)",
            Method::NoActionLoss => "D3D without action loss",
            Method::SpatialTeacher => "D3D with spatial teacher",
            Method::D3D => "D3D",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weight used when distilling at Block4F, where activations are small.
pub const LAMBDA_4F: f32 = 100.0;

#[derive(Clone, Debug)]
pub struct Trained {
    pub net: Network,
    pub steps: usize,
    pub log: TrainLog,
}

impl Trained {
    fn new((net, log): (Network, TrainLog)) -> Trained {
        Trained {
            steps: log.records.len(),
            net,
            log,
        }
    }
}

pub fn train_teacher_model(ds: &Dataset, cfg: &RunConfig) -> Result<Trained> {
    Ok(Trained::new(train_teacher(ds, &cfg.net, &cfg.train)?))
}

pub fn train_baseline_model(ds: &Dataset, cfg: &RunConfig) -> Result<Trained> {
    Ok(Trained::new(train_baseline(ds, &cfg.net, &cfg.train)?))
}

pub fn train_d3d_model(ds: &Dataset, teacher: &Network, cfg: &RunConfig, loss: &DistillLossConfig) -> Result<Trained> {
    Ok(Trained::new(train_student_distilled(ds, teacher, &cfg.net, &cfg.train, loss)?))
}

/// The three models every comparison starts from.
#[derive(Clone, Debug)]
pub struct SeedModels {
    pub seed: u64,
    pub teacher: Trained,
    pub baseline: Trained,
    pub d3d: Trained,
}

pub fn train_seed_models(ds: &Dataset, cfg: &RunConfig) -> Result<SeedModels> {
    let teacher = train_teacher_model(ds, cfg)?;
    let baseline = train_baseline_model(ds, cfg)?;
    let d3d = train_d3d_model(ds, &teacher.net, cfg, &cfg.distill)?;
    Ok(SeedModels {
        seed: cfg.seed,
        teacher,
        baseline,
        d3d,
    })
}

/// Validation inputs for both streams.
pub struct Inputs {
    pub rgb: Vec<Tensor>,
    pub flow: Vec<Tensor>,
    pub val: Vec<usize>,
}

impl Inputs {
    pub fn new(ds: &Dataset) -> Result<Inputs> {
        Ok(Inputs {
            rgb: prepare_inputs(ds, StreamInput::Rgb)?,
            flow: prepare_inputs(ds, StreamInput::Flow)?,
            val: ds.ids(Split::Validation),
        })
    }

    pub fn rgb_accuracy(&self, net: &Network, ds: &Dataset) -> Result<f64> {
        accuracy(net, &self.rgb, ds, &self.val)
    }

    pub fn flow_accuracy(&self, net: &Network, ds: &Dataset) -> Result<f64> {
        accuracy(net, &self.flow, ds, &self.val)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: Method,
    pub seed: u64,
    /// `Err` carries the failure message of a row that did not finish.
    pub accuracy: std::result::Result<f64, String>,
    pub steps: usize,
}

fn distilled_variant(base: &DistillLossConfig, method: Method) -> DistillLossConfig {
    let mut c = base.clone();
    c.distill_point = LayerName::Logits;
    match method {
        Method::Distill2C => c.distill_point = LayerName::Conv2C,
        Method::Distill4C => c.distill_point = LayerName::Block4C,
        Method::Distill4F => {
            c.distill_point = LayerName::Block4F;
            c.lambda = LAMBDA_4F;
        }
        Method::NoActionLoss => c.use_action_loss = false,
        Method::SpatialTeacher => c.teacher_source = TeacherSource::SpatialStream,
        _ => {}
    }
    c
}

fn run_method(ds: &Dataset, cfg: &RunConfig, models: &SeedModels, inputs: &Inputs, method: Method) -> Result<(f64, usize)> {
    match method {
        Method::Baseline => Ok((inputs.rgb_accuracy(&models.baseline.net, ds)?, models.baseline.steps)),
        Method::TemporalStream => Ok((inputs.flow_accuracy(&models.teacher.net, ds)?, models.teacher.steps)),
        Method::D3D => Ok((inputs.rgb_accuracy(&models.d3d.net, ds)?, models.d3d.steps)),
        Method::FlowAsInput => {
            let (front, decoder) = pretrain_flow_front(ds, &cfg.net, &cfg.train)?;
            let front_steps = cfg.train.total_steps(ds.ids(Split::Train).len());
            let model = FlowAsInput::assemble(front, decoder, models.teacher.net.clone())?;
            let (model, log) = train_flow_as_input(ds, model, &cfg.train)?;
            Ok((model.accuracy(&inputs.rgb, ds, &inputs.val)?, front_steps + log.records.len()))
        }
        Method::FlowSupervised => {
            let (m, log) = train_flow_supervised(ds, &cfg.net, &cfg.train, cfg.flow_weight)?;
            Ok((inputs.rgb_accuracy(&m.net, ds)?, log.records.len()))
        }
        Method::SpatialTeacher => {
            let loss = distilled_variant(&cfg.distill, method);
            let t = train_d3d_model(ds, &models.baseline.net, cfg, &loss)?;
            Ok((inputs.rgb_accuracy(&t.net, ds)?, t.steps))
        }
        _ => {
            let loss = distilled_variant(&cfg.distill, method);
            let t = train_d3d_model(ds, &models.teacher.net, cfg, &loss)?;
            Ok((inputs.rgb_accuracy(&t.net, ds)?, t.steps))
        }
    }
}

/// Every ablation row for one seed; a failing row is recorded, not fatal.
pub fn ablation_for_seed(ds: &Dataset, cfg: &RunConfig, models: &SeedModels, inputs: &Inputs) -> Vec<AblationRow> {
    Method::ALL
        .iter()
        .map(|&method| {
            log::info!("ablation seed {}: {}", cfg.seed, method);
            let r = run_method(ds, cfg, models, inputs, method);
            let steps = r.as_ref().map_or(0, |r| r.1);
            AblationRow {
                method,
                seed: cfg.seed,
                accuracy: r.map(|r| r.0).map_err(|e| e.to_string()),
                steps,
            }
        })
        .collect()
}

/// Seed-mean accuracy of a method; `None` when any seed failed.
pub fn method_mean(rows: &[AblationRow], method: Method) -> Option<f64> {
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.accuracy.clone().ok())
        .collect::<Option<_>>()?;
    if accs.is_empty() {
        return None;
    }
    Some(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// `method,accuracy,seed,steps` with one row per method: accuracy is the mean
/// over seeds, `seed` lists the seeds joined by `;` and `steps` is per run.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,accuracy,seed,steps\n");
    for m in Method::ALL {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.method == m).collect();
        let seeds: Vec<String> = mine.iter().map(|r| r.seed.to_string()).collect();
        let acc = method_mean(rows, m).map(|a| format!("{a:.6}")).unwrap_or_default();
        let steps = mine.iter().map(|r| r.steps).max().unwrap_or(0);
        s.push_str(&format!("{},{},{},{}\n", m, acc, seeds.join(";"), steps));
    }
    s
}

/// Every (method, seed) run.
pub fn ablation_runs_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,accuracy,seed,steps\n");
    for r in rows {
        let acc = r.accuracy.as_ref().map(|a| format!("{a:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.method, acc, r.seed, r.steps));
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut s = String::from("| Method | Accuracy (%) |");
    for seed in &seeds {
        s.push_str(&format!(" seed {seed} |"));
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(seeds.len()));
    s.push('\n');
    for m in Method::ALL {
        let mean = method_mean(rows, m).map(|a| format!("{:.1}", 100.0 * a)).unwrap_or_else(|| "failed".into());
        s.push_str(&format!("| {} | {} |", m.label(), mean));
        for seed in &seeds {
            let cell = match rows.iter().find(|r| r.method == m && r.seed == *seed).map(|r| &r.accuracy) {
                Some(Ok(a)) => format!("{:.1}", 100.0 * a),
                Some(Err(e)) => format!("error: {}", e.replace('|', "/")),
                None => String::new(),
            };
            s.push_str(&format!(" {cell} |"));
        }
        s.push('\n');
    }
    s
}

/// Accuracy of averaging the softmax of D3D and the RGB baseline.
pub fn ensemble_accuracy_of(ds: &Dataset, models: &SeedModels, inputs: &Inputs) -> Result<f64> {
    ensemble_accuracy(&[&models.d3d.net, &models.baseline.net], &inputs.rgb, ds, &inputs.val)
}

/// Frozen or fine-tuned probe of one decoder kind at one tap.
pub fn probe(backbone: &Network, ds: &Dataset, cfg: &RunConfig, tap: LayerName, kind: DecoderKind, mode: ProbeMode) -> Result<FlowMetrics> {
    let pc = ProbeConfig {
        tap,
        kind,
        fine_tune_backbone: mode == ProbeMode::FineTuned,
        train: cfg.probe.train.clone(),
        options: cfg.probe.options,
    };
    Ok(train_probe(backbone, StreamInput::Rgb, &pc, ds)?.metrics)
}

pub fn sweep(backbone: &Network, ds: &Dataset, cfg: &RunConfig) -> Vec<SweepRow> {
    layer_sweep(
        backbone,
        StreamInput::Rgb,
        &cfg.probe.kinds,
        &cfg.probe.layers,
        &cfg.probe.modes,
        &cfg.probe.train,
        &cfg.probe.options,
        ds,
    )
}

pub fn zero_epe(backbone: &Network, ds: &Dataset, tap: LayerName) -> Result<f64> {
    Ok(zero_baseline(backbone, ds, tap)?.epe)
}

/// A trained frozen probe's flow prediction for one clip, as `[3, T', H', W']` planes.
pub struct FlowProbe {
    pub backbone: Network,
    pub decoder: d3d_core::decoders::Decoder,
    pub tap: LayerName,
}

impl FlowProbe {
    pub fn train(backbone: Network, ds: &Dataset, cfg: &RunConfig, tap: LayerName, kind: DecoderKind) -> Result<FlowProbe> {
        let pc = ProbeConfig {
            tap,
            kind,
            fine_tune_backbone: false,
            train: cfg.probe.train.clone(),
            options: cfg.probe.options,
        };
        let r = train_probe(&backbone, StreamInput::Rgb, &pc, ds)?;
        Ok(FlowProbe {
            backbone,
            decoder: r.decoder,
            tap,
        })
    }

    /// An untrained decoder, for checks that need no fitting.
    pub fn untrained(backbone: Network, tap: LayerName, kind: DecoderKind, cfg: &RunConfig) -> Result<FlowProbe> {
        let c = backbone.layer_dims(tap)[0];
        let decoder = build_decoder(kind, c, cfg.seed, &cfg.probe.options)?;
        Ok(FlowProbe { backbone, decoder, tap })
    }

    pub fn predict(&self, ds: &Dataset, id: usize) -> Result<Tensor> {
        predict_flow(&self.backbone, &self.decoder, &StreamInput::Rgb.prepare(ds, id)?, self.tap)
    }
}

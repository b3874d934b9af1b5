//! Resolved experiment settings and their `key = value` snapshot.
//!
//! Keys are grouped by prefix: `data.*` (dataset synthesis), `net.*`,
//! `train.*` (every classifier), `distill.*`, `flow.*`, `probe.*`,
//! `ablation.*` and `paths.*`. `seed` seeds network initialisation and
//! shuffling; the dataset has its own `data.seed`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use d3d_core::dataset::SyntheticConfig;
use d3d_core::decoders::{DecoderKind, DecoderOptions, ProbeMode, StreamInput};
use d3d_core::distill::{DistillLossConfig, TeacherSource};
use d3d_core::train::TrainConfig;
use d3d_core::{Error, KvConfig, LayerName, NetworkConfig, Result};

pub const CONFIG_SNAPSHOT: &str = "config.kv";

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    pub train: TrainConfig,
    pub kinds: Vec<DecoderKind>,
    pub layers: Vec<LayerName>,
    pub modes: Vec<ProbeMode>,
    pub options: DecoderOptions,
    /// Which trained backbones `probe-sweep` probes: `baseline`, `d3d`.
    pub backbones: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizSettings {
    pub kind: DecoderKind,
    pub layer: LayerName,
    /// Validation clips drawn, first by id.
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub teacher: PathBuf,
    pub baseline: PathBuf,
    pub d3d: PathBuf,
    /// Checkpoint evaluated by `eval`; empty means a freshly initialised network.
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub distill: DistillLossConfig,
    /// Weight of the flow loss for the flow-supervised stream.
    pub flow_weight: f32,
    pub probe: ProbeSettings,
    pub ablation_seeds: Vec<u64>,
    /// Stream `eval` feeds the model.
    pub eval_input: StreamInput,
    pub viz: VizSettings,
    pub paths: Paths,
}

fn section(kv: &KvConfig, prefix: &str) -> KvConfig {
    let mut out = KvConfig::new();
    for (k, v) in kv.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.set(rest, v);
        }
    }
    out
}

fn list<T: FromStr>(kv: &KvConfig, key: &str, default: Vec<T>) -> Result<Vec<T>> {
    match kv.get_str(key) {
        None => Ok(default),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {p:?}"))))
            .collect(),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_mode(s: &str) -> Result<ProbeMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "frozen" => Ok(ProbeMode::Frozen),
        "ft" | "finetuned" | "fine-tuned" => Ok(ProbeMode::FineTuned),
        _ => Err(Error::Config(format!("unknown probe mode {s:?}"))),
    }
}

fn parse_input(s: &str) -> Result<StreamInput> {
    match s.trim().to_ascii_lowercase().as_str() {
        "rgb" => Ok(StreamInput::Rgb),
        "flow" => Ok(StreamInput::Flow),
        _ => Err(Error::Config(format!("unknown input stream {s:?}"))),
    }
}

fn input_str(s: StreamInput) -> &'static str {
    match s {
        StreamInput::Rgb => "rgb",
        StreamInput::Flow => "flow",
    }
}

fn source_str(s: TeacherSource) -> &'static str {
    match s {
        TeacherSource::TemporalStream => "temporal",
        TeacherSource::SpatialStream => "spatial",
    }
}

/// Distillation weight of the experiments. At logits the MSE against a trained
/// teacher starts near five times the cross-entropy on Translate4, so this
/// puts the two terms on the same scale.
pub const DEFAULT_LAMBDA: f32 = 0.2;

/// Classifier training defaults used by every experiment.
pub fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 0.001,
        ..TrainConfig::default()
    }
}

/// Decoders start from scratch on fixed features and need a larger step than
/// the classifiers to converge in the same number of epochs.
pub fn default_probe_train() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 16,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let seed: u64 = kv.get_or("seed", 0)?;
        let data = SyntheticConfig::from_kv(&section(kv, "data."))?;
        let mut net_kv = section(kv, "net.");
        net_kv.set("num_classes", data.num_classes);
        net_kv.set("clip_t", data.clip[0]);
        net_kv.set("clip_h", data.clip[1]);
        net_kv.set("clip_w", data.clip[2]);
        net_kv.set("seed", seed);
        let net = NetworkConfig::from_kv(&net_kv)?;
        let mut train = TrainConfig::from_kv(kv, "train.", &default_train())?;
        train.seed = seed;
        let dd = DistillLossConfig::default();
        let distill = DistillLossConfig {
            lambda: kv.get_or("distill.lambda", DEFAULT_LAMBDA)?,
            use_action_loss: kv.get_or("distill.use_action_loss", dd.use_action_loss)?,
            distill_point: kv.get_or("distill.point", dd.distill_point)?,
            teacher_source: kv.get_or("distill.teacher", dd.teacher_source)?,
        };
        distill.validate()?;
        let flow_weight: f32 = kv.get_or("flow.weight", 1.0)?;
        if !(flow_weight >= 0.0 && flow_weight.is_finite()) {
            return Err(Error::Config(format!("flow.weight {flow_weight} must be finite and >= 0")));
        }
        let mut probe_train = TrainConfig::from_kv(kv, "probe.", &default_probe_train())?;
        probe_train.seed = seed;
        let od = DecoderOptions::default();
        let modes = match kv.get_str("probe.modes") {
            None => vec![ProbeMode::Frozen, ProbeMode::FineTuned],
            Some(s) => s.split(',').filter(|p| !p.trim().is_empty()).map(parse_mode).collect::<Result<_>>()?,
        };
        let probe = ProbeSettings {
            train: probe_train,
            kinds: list(kv, "probe.kinds", DecoderKind::ALL.to_vec())?,
            layers: list(kv, "probe.layers", LayerName::BLOCKS.to_vec())?,
            modes,
            options: DecoderOptions {
                cap_pwc: kv.get_or("probe.cap_pwc", od.cap_pwc)?,
                zero_final: kv.get_or("probe.zero_final", od.zero_final)?,
            },
            backbones: list(kv, "probe.backbones", vec!["baseline".to_string(), "d3d".to_string()])?,
        };
        if let Some(b) = probe.backbones.iter().find(|b| !["baseline", "d3d"].contains(&b.as_str())) {
            return Err(Error::Config(format!("probe.backbones: unknown backbone {b:?}")));
        }
        if probe.layers.contains(&LayerName::Logits) || probe.layers.contains(&LayerName::GlobalPool) {
            return Err(Error::Config("probe.layers must be convolutional blocks".into()));
        }
        let ablation_seeds = list(kv, "ablation.seeds", vec![seed])?;
        if ablation_seeds.is_empty() {
            return Err(Error::Config("ablation.seeds is empty".into()));
        }
        let eval_input = parse_input(kv.get_str("eval.input").unwrap_or("rgb"))?;
        let viz = VizSettings {
            kind: kv.get_or("viz.kind", DecoderKind::Pwc)?,
            layer: kv.get_or("viz.layer", LayerName::Block3A)?,
            clips: kv.get_or("viz.clips", 4)?,
        };
        if viz.layer == LayerName::Logits || viz.layer == LayerName::GlobalPool {
            return Err(Error::Config("viz.layer must be a convolutional block".into()));
        }
        let path = |key: &str, default: &str| PathBuf::from(kv.get_str(key).unwrap_or(default));
        let paths = Paths {
            data: path("paths.data", "data"),
            teacher: path("paths.teacher", "teacher/model.ckpt"),
            baseline: path("paths.baseline", "baseline/model.ckpt"),
            d3d: path("paths.d3d", "d3d/model.ckpt"),
            model: kv.get_str("paths.model").filter(|s| !s.is_empty()).map(PathBuf::from),
        };
        let cfg = RunConfig {
            seed,
            data,
            net,
            train,
            distill,
            flow_weight,
            probe,
            ablation_seeds,
            eval_input,
            viz,
            paths,
        };
        let known = cfg.to_kv();
        if let Some((k, _)) = kv.iter().find(|(k, _)| known.get_str(k).is_none()) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        for (k, v) in self.data.to_kv().iter() {
            kv.set(format!("data.{k}"), v);
        }
        kv.set("net.base_width", self.net.base_width);
        kv.set("net.input_channels", self.net.input_channels);
        self.train.write_kv(&mut kv, "train.");
        kv.set("distill.lambda", self.distill.lambda);
        kv.set("distill.use_action_loss", self.distill.use_action_loss);
        kv.set("distill.point", self.distill.distill_point);
        kv.set("distill.teacher", source_str(self.distill.teacher_source));
        kv.set("flow.weight", self.flow_weight);
        self.probe.train.write_kv(&mut kv, "probe.");
        kv.set("probe.kinds", join(&self.probe.kinds));
        kv.set("probe.layers", join(&self.probe.layers));
        kv.set("probe.modes", self.probe.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        kv.set("probe.cap_pwc", self.probe.options.cap_pwc);
        kv.set("probe.zero_final", self.probe.options.zero_final);
        kv.set("probe.backbones", self.probe.backbones.join(","));
        kv.set("ablation.seeds", join(&self.ablation_seeds));
        kv.set("eval.input", input_str(self.eval_input));
        kv.set("viz.kind", self.viz.kind);
        kv.set("viz.layer", self.viz.layer);
        kv.set("viz.clips", self.viz.clips);
        kv.set("paths.data", self.paths.data.display());
        kv.set("paths.teacher", self.paths.teacher.display());
        kv.set("paths.baseline", self.paths.baseline.display());
        kv.set("paths.d3d", self.paths.d3d.display());
        kv.set("paths.model", self.paths.model.as_deref().map(|p| p.display().to_string()).unwrap_or_default());
        kv
    }

    /// Loads an optional config file, then applies `--set` overrides and the
    /// seed flag, in that order.
    pub fn resolve(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut kv = match config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        kv.apply_overrides(overrides)?;
        if let Some(s) = seed {
            kv.set("seed", s);
        }
        RunConfig::from_kv(&kv)
    }

    /// The same settings with another seed.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.net.seed = seed;
        c.train.seed = seed;
        c.probe.train.seed = seed;
        c
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_kv(&KvConfig::new()).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut kv = KvConfig::new();
        kv.apply_overrides(&["seed=4", "data.noise=0.1", "probe.kinds=pwc,simple", "probe.modes=frozen", "ablation.seeds=0,1,2"])
            .unwrap();
        let c = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.probe.kinds, vec![DecoderKind::Pwc, DecoderKind::Simple]);
        let back = RunConfig::from_kv(&KvConfig::parse(&c.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for o in ["train.epoch=3", "net.num_classes=3", "train.epochs=ten", "probe.layers=Logits", "distill.lambda=-1", "probe.modes=warm"] {
            let mut kv = KvConfig::new();
            kv.apply_overrides(&[o]).unwrap();
            assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))), "{o}");
        }
    }
}

//! One function per subcommand. Each writes its resolved config, CSV results
//! and a plain-text summary under the output directory and nothing else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use d3d_core::checkpoint;
use d3d_core::dataset::{generate, manifest_path, reversal_probe, Dataset, Split};
use d3d_core::decoders::{probe_targets, rgb_input, sweep_csv, ProbeMode, StreamInput, SweepRow};
use d3d_core::distill::{argmax, prepare_inputs, softmax};
use d3d_core::flow_repr::{decode_clip, endpoint_error_clip};
use d3d_core::train::TrainLog;
use d3d_core::tvl1::clip_frame;
use d3d_core::{Error, LayerName, Network, NetworkConfig};
use thiserror::Error;

use crate::config::{RunConfig, CONFIG_SNAPSHOT};
use crate::experiments::{
    ablation_csv, ablation_for_seed, ablation_markdown, ablation_runs_csv, ensemble_accuracy_of, method_mean,
    train_baseline_model, train_d3d_model, train_seed_models, train_teacher_model, AblationRow, FlowProbe, Inputs,
    Method, Trained,
};
use crate::svg::{render, Chart, Series};
use crate::viz::{flow_image, grid, rgb_frame, Image};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error("{failed} of {total} ablation rows failed; see ablation.md")]
    Partial { failed: usize, total: usize },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 bad arguments, 3 missing prerequisite, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Partial { .. } | CliError::Core(Error::Diverged { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, CliError>;

fn require(path: &Path) -> CmdResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn write(out: &Path, name: &str, text: &str) -> CmdResult<()> {
    fs::write(out.join(name), text)?;
    Ok(())
}

fn prepare(out: &Path, cfg: &RunConfig) -> CmdResult<()> {
    fs::create_dir_all(out)?;
    cfg.to_kv().save(&out.join(CONFIG_SNAPSHOT))?;
    Ok(())
}

/// Loads the dataset named by `paths.data` and aligns the network extents
/// and class count with it.
pub fn load_dataset(cfg: &RunConfig) -> CmdResult<(Dataset, RunConfig)> {
    let manifest = manifest_path(&cfg.paths.data);
    require(&manifest)?;
    let ds = Dataset::load(&manifest)?;
    let mut cfg = cfg.clone();
    if ds.config != cfg.data {
        log::warn!("dataset at {} differs from data.* settings; using the dataset's", cfg.paths.data.display());
    }
    cfg.data = ds.config.clone();
    cfg.net.num_classes = ds.config.num_classes;
    cfg.net.clip = ds.config.clip;
    Ok((ds, cfg))
}

pub fn load_network(path: &Path, net: &NetworkConfig) -> CmdResult<Network> {
    require(path)?;
    Ok(Network::from_parameters(net.clone(), checkpoint::load(path)?)?)
}

fn metrics_csv(method: &str, accuracy: f64, seed: u64, steps: usize) -> String {
    format!("method,accuracy,seed,steps\n{method},{accuracy:.6},{seed},{steps}\n")
}

fn loss_chart(log: &TrainLog, title: &str) -> String {
    let pick = |f: fn(&d3d_core::train::StepRecord) -> f64| log.records.iter().map(|r| (r.step as f64, Some(f(r)))).collect();
    let mut series = vec![Series {
        name: "total".into(),
        points: pick(|r| r.total),
    }];
    if log.records.iter().any(|r| r.action != r.total) {
        series.push(Series { name: "action".into(), points: pick(|r| r.action) });
        series.push(Series { name: "distill".into(), points: pick(|r| r.aux) });
    }
    render(&Chart {
        title,
        x_label: "step",
        y_label: "loss",
        categories: &[],
        series: &series,
    })
}

fn with_checkpoints(cfg: &RunConfig, out: &Path) -> CmdResult<RunConfig> {
    let mut cfg = cfg.clone();
    if cfg.train.checkpoint_every > 0 {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        cfg.train.checkpoint_dir = Some(dir);
    }
    Ok(cfg)
}

/// Forward and reversed-clip accuracy of an RGB model, when the family has a
/// reversal map.
fn reversal(ds: &Dataset, net: &Network) -> CmdResult<Option<(f64, f64)>> {
    if ds.config.family.reversal_map().is_none() {
        return Ok(None);
    }
    let val = ds.ids(Split::Validation);
    let r = reversal_probe(ds, &val, |clip| Ok(argmax(&softmax(net.logits(&rgb_input(clip))?.data()))))?;
    Ok(Some(r))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> CmdResult {
    prepare(out, cfg)?;
    let (ds, _) = generate(&cfg.data, out)?;
    let zero: f64 = ds
        .flows
        .iter()
        .map(|f| endpoint_error_clip(&d3d_core::Tensor::zeros(f.shape()), f).map(|m| m.epe))
        .sum::<d3d_core::Result<f64>>()?
        / ds.len() as f64;
    let (tr, va) = (ds.ids(Split::Train).len(), ds.ids(Split::Validation).len());
    write(
        out,
        "stats.csv",
        &format!(
            "clips,classes,train,validation,mean_flow_magnitude,zero_flow_epe\n{},{},{tr},{va},{:.6},{zero:.6}\n",
            ds.len(),
            ds.num_classes(),
            ds.mean_flow_magnitude()
        ),
    )?;
    write(
        out,
        "summary.txt",
        &format!(
            "{} dataset: {} clips ({tr} train, {va} validation), {} classes\nmean TV-L1 magnitude {:.4} px, all-zeros EPE {zero:.4} px\n",
            ds.config.family,
            ds.len(),
            ds.num_classes(),
            ds.mean_flow_magnitude()
        ),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Teacher,
    Baseline,
    D3D,
}

pub fn cmd_train(which: Stream, cfg: &RunConfig, out: &Path) -> CmdResult {
    let (ds, cfg) = load_dataset(cfg)?;
    let teacher = match which {
        Stream::D3D => Some(load_network(&cfg.paths.teacher, &cfg.net)?),
        _ => None,
    };
    prepare(out, &cfg)?;
    let run = with_checkpoints(&cfg, out)?;
    let inputs = Inputs::new(&ds)?;
    let (name, trained, acc): (&str, Trained, f64) = match which {
        Stream::Teacher => {
            let t = train_teacher_model(&ds, &run)?;
            let a = inputs.flow_accuracy(&t.net, &ds)?;
            ("temporal_stream", t, a)
        }
        Stream::Baseline => {
            let t = train_baseline_model(&ds, &run)?;
            let a = inputs.rgb_accuracy(&t.net, &ds)?;
            ("rgb_baseline", t, a)
        }
        Stream::D3D => {
            let t = train_d3d_model(&ds, teacher.as_ref().expect("loaded above"), &run, &run.distill)?;
            let a = inputs.rgb_accuracy(&t.net, &ds)?;
            ("d3d", t, a)
        }
    };
    checkpoint::save(trained.net.params(), &out.join("model.ckpt"))?;
    write(out, "train_log.csv", &trained.log.to_csv(false))?;
    write(out, "metrics.csv", &metrics_csv(name, acc, cfg.seed, trained.steps))?;
    write(out, "loss.svg", &loss_chart(&trained.log, name))?;
    let mut summary = format!(
        "{name}: held-out accuracy {:.2}% after {} steps (seed {})\n",
        100.0 * acc,
        trained.steps,
        cfg.seed
    );
    if which != Stream::Teacher {
        if let Some((f, r)) = reversal(&ds, &trained.net)? {
            write(out, "reversal.csv", &format!("forward,reversed\n{f:.6},{r:.6}\n"))?;
            let _ = writeln!(summary, "reversal probe: forward {:.2}%, reversed {:.2}%", 100.0 * f, 100.0 * r);
        }
    }
    write(out, "summary.txt", &summary)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (ds, cfg) = load_dataset(cfg)?;
    let net = match &cfg.paths.model {
        Some(p) => load_network(p, &cfg.net)?,
        None => Network::build(cfg.net.clone())?,
    };
    prepare(out, &cfg)?;
    let inputs = prepare_inputs(&ds, cfg.eval_input)?;
    let val = ds.ids(Split::Validation);
    let acc = d3d_core::distill::accuracy(&net, &inputs, &ds, &val)?;
    let what = cfg.paths.model.as_ref().map_or("untrained".to_string(), |p| p.display().to_string());
    write(out, "eval.csv", &metrics_csv("eval", acc, cfg.seed, 0))?;
    let mut summary = format!(
        "{what}: held-out accuracy {:.2}% on {} clips (chance {:.2}%)\n",
        100.0 * acc,
        val.len(),
        100.0 / ds.num_classes() as f64
    );
    if cfg.eval_input == StreamInput::Rgb {
        if let Some((f, r)) = reversal(&ds, &net)? {
            write(out, "reversal.csv", &format!("forward,reversed\n{f:.6},{r:.6}\n"))?;
            let _ = writeln!(summary, "reversal probe: forward {:.2}%, reversed {:.2}%", 100.0 * f, 100.0 * r);
        }
    }
    write(out, "summary.txt", &summary)
}

fn backbone_path(cfg: &RunConfig, name: &str) -> PathBuf {
    if name == "d3d" {
        cfg.paths.d3d.clone()
    } else {
        cfg.paths.baseline.clone()
    }
}

pub fn cmd_probe_sweep(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (ds, cfg) = load_dataset(cfg)?;
    let mut backbones = Vec::new();
    for name in &cfg.probe.backbones {
        backbones.push((name.clone(), load_network(&backbone_path(&cfg, name), &cfg.net)?));
    }
    prepare(out, &cfg)?;
    let layers = &cfg.probe.layers;
    let mut zero_csv = String::from("layer,epe\n");
    let mut zeros = Vec::new();
    if let Some((_, net)) = backbones.first() {
        for &l in layers {
            let z = crate::experiments::zero_epe(net, &ds, l)?;
            let _ = writeln!(zero_csv, "{l},{z:.6}");
            zeros.push(z);
        }
    }
    write(out, "zero_flow.csv", &zero_csv)?;
    let mut series = vec![Series {
        name: "all zeros".into(),
        points: zeros.iter().enumerate().map(|(i, &z)| (i as f64, Some(z))).collect(),
    }];
    let mut summary = String::new();
    for (name, net) in &backbones {
        log::info!("probing the {name} backbone");
        let rows = crate::experiments::sweep(net, &ds, &cfg);
        write(out, &format!("sweep_{name}.csv"), &sweep_csv(&rows))?;
        for &kind in &cfg.probe.kinds {
            for &mode in &cfg.probe.modes {
                let points = layers
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (i as f64, cell(&rows, l, kind, mode)))
                    .collect();
                series.push(Series {
                    name: format!("{name} {kind} {}", mode.as_str()),
                    points,
                });
            }
        }
        let failed = rows.iter().filter(|r| r.result.is_err()).count();
        let _ = writeln!(summary, "{name}: {} cells, {failed} failed", rows.len());
    }
    let cats: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    write(
        out,
        "sweep.svg",
        &render(&Chart {
            title: "Flow probe EPE by layer",
            x_label: "layer",
            y_label: "EPE (px)",
            categories: &cats,
            series: &series,
        }),
    )?;
    write(out, "summary.txt", &summary)
}

fn cell(rows: &[SweepRow], layer: LayerName, kind: d3d_core::decoders::DecoderKind, mode: ProbeMode) -> Option<f64> {
    rows.iter()
        .find(|r| r.layer == layer && r.kind == kind && r.mode == mode)
        .and_then(|r| r.result.as_ref().ok())
        .map(|m| m.epe)
}

pub fn cmd_ablation(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (ds, cfg) = load_dataset(cfg)?;
    prepare(out, &cfg)?;
    let inputs = Inputs::new(&ds)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut ensemble = String::from("seed,d3d,rgb_baseline,ensemble\n");
    for &seed in &cfg.ablation_seeds {
        let run = cfg.with_seed(seed);
        match train_seed_models(&ds, &run) {
            Ok(models) => {
                rows.extend(ablation_for_seed(&ds, &run, &models, &inputs));
                let d = inputs.rgb_accuracy(&models.d3d.net, &ds)?;
                let b = inputs.rgb_accuracy(&models.baseline.net, &ds)?;
                let e = ensemble_accuracy_of(&ds, &models, &inputs)?;
                let _ = writeln!(ensemble, "{seed},{d:.6},{b:.6},{e:.6}");
            }
            Err(e) => {
                log::error!("seed {seed}: {e}");
                rows.extend(Method::ALL.iter().map(|&method| AblationRow {
                    method,
                    seed,
                    accuracy: Err(e.to_string()),
                    steps: 0,
                }));
            }
        }
    }
    write(out, "ablation.csv", &ablation_csv(&rows))?;
    write(out, "ablation_runs.csv", &ablation_runs_csv(&rows))?;
    write(out, "ablation.md", &ablation_markdown(&rows))?;
    write(out, "ensemble.csv", &ensemble)?;
    let mut summary = String::new();
    for m in Method::ALL {
        match method_mean(&rows, m) {
            Some(a) => {
                let _ = writeln!(summary, "{:<36} {:6.2}%", m.label(), 100.0 * a);
            }
            None => {
                let _ = writeln!(summary, "{:<36} failed", m.label());
            }
        }
    }
    write(out, "summary.txt", &summary)?;
    let failed = rows.iter().filter(|r| r.accuracy.is_err()).count();
    if failed > 0 {
        return Err(CliError::Partial { failed, total: rows.len() });
    }
    Ok(())
}

/// RGB frame, TV-L1 flow and both probes' flow for the middle frame of a clip.
fn viz_row(ds: &Dataset, id: usize, probes: &[&FlowProbe]) -> CmdResult<Vec<Image>> {
    let t = ds.config.clip[0];
    let mid = t / 2;
    let mut row = vec![rgb_frame(&ds.clips[id], mid)?, flow_image(&clip_frame(&ds.flows[id], mid)?)];
    for p in probes {
        let flow = decode_clip(&p.predict(ds, id)?)?;
        let tp = flow.shape()[1];
        row.push(flow_image(&clip_frame(&flow, mid * tp / t)?));
    }
    Ok(row)
}

pub fn cmd_flow_viz(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (ds, cfg) = load_dataset(cfg)?;
    let baseline = load_network(&cfg.paths.baseline, &cfg.net)?;
    let d3d = load_network(&cfg.paths.d3d, &cfg.net)?;
    prepare(out, &cfg)?;
    let (tap, kind) = (cfg.viz.layer, cfg.viz.kind);
    let targets = probe_targets(&baseline, &ds, tap)?;
    let pb = FlowProbe::train(baseline, &ds, &cfg, tap, kind)?;
    let pd = FlowProbe::train(d3d, &ds, &cfg, tap, kind)?;
    let ids: Vec<usize> = ds.ids(Split::Validation).into_iter().take(cfg.viz.clips).collect();
    let mut rows = Vec::new();
    let mut csv = String::from("clip,label,baseline_epe,d3d_epe\n");
    for &id in &ids {
        let row = viz_row(&ds, id, &[&pb, &pd])?;
        grid(std::slice::from_ref(&row), 96, 4).write_png(&out.join(format!("flow_{id:04}.png")))?;
        rows.push(row);
        let eb = endpoint_error_clip(&decode_clip(&pb.predict(&ds, id)?)?, &targets.flow[id])?.epe;
        let ed = endpoint_error_clip(&decode_clip(&pd.predict(&ds, id)?)?, &targets.flow[id])?.epe;
        let _ = writeln!(csv, "{id},{},{eb:.6},{ed:.6}", ds.labels[id]);
    }
    grid(&rows, 96, 4).write_png(&out.join("grid.png"))?;
    write(out, "viz.csv", &csv)?;
    write(
        out,
        "summary.txt",
        &format!(
            "{} clips; columns: RGB, TV-L1, baseline {kind} probe at {tap}, D3D {kind} probe at {tap}\nhue = flow angle, saturation = magnitude / panel maximum\n",
            ids.len()
        ),
    )
}

//! Mini-batch SGD shared by every training procedure.
//!
//! Each sample gets its own [`Graph`]; per-sample gradients are computed in
//! parallel and summed in sample order, so results do not depend on the
//! number of worker threads.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kvconfig::KvConfig;
use crate::net::Network;
use crate::tensor::Parameters;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Global gradient-norm ceiling.
    pub clip_norm: f32,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Where periodic checkpoints go, as `step_NNNNNN.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 10.0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }

    /// Reads `{prefix}epochs`, `{prefix}batch_size`, ... falling back to `base`.
    pub fn from_kv(kv: &KvConfig, prefix: &str, base: &TrainConfig) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = TrainConfig {
            epochs: kv.get_or(&k("epochs"), base.epochs)?,
            batch_size: kv.get_or(&k("batch_size"), base.batch_size)?,
            learning_rate: kv.get_or(&k("learning_rate"), base.learning_rate)?,
            momentum: kv.get_or(&k("momentum"), base.momentum)?,
            clip_norm: kv.get_or(&k("clip_norm"), base.clip_norm)?,
            seed: kv.get_or(&k("seed"), base.seed)?,
            checkpoint_every: kv.get_or(&k("checkpoint_every"), base.checkpoint_every)?,
            checkpoint_dir: base.checkpoint_dir.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig, prefix: &str) {
        kv.set(format!("{prefix}epochs"), self.epochs);
        kv.set(format!("{prefix}batch_size"), self.batch_size);
        kv.set(format!("{prefix}learning_rate"), self.learning_rate);
        kv.set(format!("{prefix}momentum"), self.momentum);
        kv.set(format!("{prefix}clip_norm"), self.clip_norm);
        kv.set(format!("{prefix}seed"), self.seed);
        kv.set(format!("{prefix}checkpoint_every"), self.checkpoint_every);
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// Anything whose parameters the trainer can update. Each group is registered
/// in graphs under its scope prefix.
pub trait Trainable: Sync {
    fn param_groups(&self) -> Vec<(&str, &Parameters)>;
    fn param_groups_mut(&mut self) -> Vec<&mut Parameters>;
}

impl Trainable for Network {
    fn param_groups(&self) -> Vec<(&str, &Parameters)> {
        vec![(self.scope(), self.params())]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
        vec![self.params_mut()]
    }
}

/// One sample's contribution: the scalar to differentiate and its parts.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub loss: Var,
    pub action: f64,
    pub aux: f64,
}

/// Batch-averaged losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub action: f64,
    pub aux: f64,
    pub grad_norm: f64,
    pub learning_rate: f32,
    pub seconds: f64,
}

struct Slot {
    group: usize,
    key: String,
    scoped: String,
    len: usize,
}

/// SGD with momentum (`v = m v + g; p -= lr v`) and global-norm clipping.
pub struct Sgd {
    cfg: TrainConfig,
    slots: Vec<Slot>,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new<M: Trainable + ?Sized>(model: &M, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut slots = Vec::new();
        for (gi, (scope, params)) in model.param_groups().into_iter().enumerate() {
            for (key, t) in params.iter() {
                slots.push(Slot {
                    group: gi,
                    key: key.to_string(),
                    scoped: format!("{scope}{key}"),
                    len: t.len(),
                });
            }
        }
        let velocity = slots.iter().map(|s| vec![0.0; s.len]).collect();
        Ok(Sgd {
            cfg: cfg.clone(),
            slots,
            velocity,
        })
    }

    fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.slots.iter().map(|s| vec![0.0; s.len]).collect()
    }

    fn gather(&self, g: &Graph) -> Vec<Option<Vec<f32>>> {
        let by_name: HashMap<&str, &[f32]> = g.param_grads().collect();
        self.slots
            .iter()
            .map(|s| by_name.get(s.scoped.as_str()).map(|g| g.to_vec()))
            .collect()
    }

    /// Applies one update from summed gradients over `n` samples; returns the
    /// pre-clip norm of the mean gradient.
    fn apply<M: Trainable + ?Sized>(&mut self, model: &mut M, mut grads: Vec<Vec<f32>>, n: usize) -> f64 {
        let inv = 1.0 / n as f32;
        let mut sq = 0.0f64;
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= inv;
                sq += (*x as f64) * (*x as f64);
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > self.cfg.clip_norm as f64 {
            (self.cfg.clip_norm as f64 / norm) as f32
        } else {
            1.0
        };
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        let mut groups = model.param_groups_mut();
        for ((slot, g), v) in self.slots.iter().zip(&grads).zip(&mut self.velocity) {
            let p = groups[slot.group].get_mut(&slot.key).expect("slot from same model");
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi * clip;
                *w -= lr * *vi;
            }
        }
        norm
    }
}

/// Runs `cfg.epochs` passes over `ids` in a seeded shuffled order. `sample`
/// builds one sample's loss into a fresh graph; `on_step` sees every update.
pub fn fit<M, F>(
    model: &mut M,
    ids: &[usize],
    cfg: &TrainConfig,
    what: &'static str,
    sample: F,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()>
where
    M: Trainable,
    F: Fn(&M, usize, &mut Graph) -> Result<SampleLoss> + Sync,
{
    if ids.is_empty() {
        return Err(Error::invalid(what, "no training samples"));
    }
    let mut opt = Sgd::new(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = ids.to_vec();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let m: &M = model;
            let per_sample: Vec<(Vec<Option<Vec<f32>>>, f64, f64, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let s = sample(m, i, &mut g)?;
                    let total = g.scalar_f64(s.loss);
                    if !total.is_finite() {
                        return Err(Error::Diverged {
                            what,
                            step,
                        });
                    }
                    g.backward(s.loss)?;
                    Ok((opt.gather(&g), total, s.action, s.aux))
                })
                .collect::<Result<_>>()?;
            let mut grads = opt.zero_grads();
            let (mut total, mut action, mut aux) = (0.0, 0.0, 0.0);
            for (gs, t, a, x) in per_sample {
                for (acc, g) in grads.iter_mut().zip(gs) {
                    if let Some(g) = g {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
                total += t;
                action += a;
                aux += x;
            }
            if grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    what,
                    step,
                });
            }
            let n = batch.len();
            let grad_norm = opt.apply(model, grads, n);
            on_step(&StepRecord {
                step,
                epoch,
                total: total / n as f64,
                action: action / n as f64,
                aux: aux / n as f64,
                grad_norm,
                learning_rate: cfg.learning_rate,
                seconds: start.elapsed().as_secs_f64(),
            });
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_groups(model, &dir.join(format!("step_{step:06}.ckpt")))?;
                }
            }
        }
        log::info!("{what}: epoch {} of {} done after {step} steps", epoch + 1, cfg.epochs);
    }
    Ok(())
}

/// Saves every parameter group under its scoped names.
fn save_groups<M: Trainable + ?Sized>(model: &M, path: &std::path::Path) -> Result<()> {
    let mut all = Parameters::new();
    for (scope, params) in model.param_groups() {
        for (name, t) in params.iter() {
            all.insert(format!("{scope}{name}"), t.clone())?;
        }
    }
    crate::checkpoint::save(&all, path)
}

/// CSV training log with header `step,loss_total,loss_action,loss_distill,lr,seconds`.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: &StepRecord) {
        self.records.push(r.clone());
    }

    /// Wall-clock seconds are omitted when `with_time` is false so logs from
    /// repeated runs compare byte for byte.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut s = String::from("step,loss_total,loss_action,loss_distill,lr,seconds\n");
        for r in &self.records {
            let secs = if with_time { format!("{:.3}", r.seconds) } else { String::new() };
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{},{}\n",
                r.step, r.total, r.action, r.aux, r.learning_rate, secs
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Quad {
        p: Parameters,
    }

    impl Trainable for Quad {
        fn param_groups(&self) -> Vec<(&str, &Parameters)> {
            vec![("", &self.p)]
        }
        fn param_groups_mut(&mut self) -> Vec<&mut Parameters> {
            vec![&mut self.p]
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Parameters::new();
        p.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut q = Quad { p };
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 0.05,
            ..Default::default()
        };
        fit(
            &mut q,
            &[0, 1],
            &cfg,
            "quadratic",
            |m, _, g| {
                let x = g.param_from(&m.p, "x", true)?;
                let z = g.input(Tensor::zeros(&[2]));
                let loss = g.mse(x, z)?;
                Ok(SampleLoss { loss, action: 0.0, aux: 0.0 })
            },
            |_| {},
        )
        .unwrap();
        assert!(q.p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn checkpoints_are_written_at_the_interval() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Parameters::new();
        p.insert("x", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut q = Quad { p };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 1,
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        fit(
            &mut q,
            &[0],
            &cfg,
            "checkpoints",
            |m, _, g| {
                let x = g.param_from(&m.p, "x", true)?;
                Ok(SampleLoss { loss: g.sum(x), action: 0.0, aux: 0.0 })
            },
            |_| {},
        )
        .unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["step_000002.ckpt", "step_000004.ckpt"]);
        let back = crate::checkpoint::load(&dir.path().join("step_000004.ckpt")).unwrap();
        assert!(back.get("x").is_some());
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut p = Parameters::new();
        p.insert("x", Tensor::new(vec![1], vec![1000.0]).unwrap()).unwrap();
        let mut q = Quad { p };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1.0,
            ..Default::default()
        };
        let mut norms = vec![];
        fit(
            &mut q,
            &[0],
            &cfg,
            "clip",
            |m, _, g| {
                let x = g.param_from(&m.p, "x", true)?;
                let loss = g.sum(x);
                let loss = g.scale(loss, 100.0);
                Ok(SampleLoss { loss, action: 0.0, aux: 0.0 })
            },
            |r| norms.push(r.grad_norm),
        )
        .unwrap();
        assert_eq!(norms, vec![100.0]);
        assert_eq!(q.p.get("x").unwrap().data()[0], 990.0);
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut p = Parameters::new();
        p.insert("x", Tensor::new(vec![1], vec![f32::NAN]).unwrap()).unwrap();
        let mut q = Quad { p };
        let err = fit(
            &mut q,
            &[0],
            &TrainConfig::default(),
            "nan",
            |m, _, g| {
                let x = g.param_from(&m.p, "x", true)?;
                Ok(SampleLoss { loss: g.sum(x), action: 0.0, aux: 0.0 })
            },
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}

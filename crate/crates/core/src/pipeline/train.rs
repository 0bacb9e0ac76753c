//! Training loop: one clip of consecutive frames per step, SGD with momentum, a checkpoint
//! after every epoch.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stdmmf_tensor::{EntryKind, Graph, Mode};

use crate::error::{Error, Result, Stage};
use crate::loss::LossReport;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::dataset::{group_clips, make_batch, Batch, Sample};
use super::model::{loss_nodes, stats, ModelConfig, Stdmmf};
use super::optim::Sgd;

/// Stream id of the data-order generator, distinct from the initialisation stream.
const DATA_STREAM: u64 = 1;

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Stdmmf,
    pub optim: Sgd,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Loss of every step run by this trainer.
    pub history: Vec<LossReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Stdmmf::new(ModelConfig::from_train(&config), config.seed)?;
        let optim = Sgd::new(&model.store, config.learning_rate, config.momentum, config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Trainer { config, model, optim, rng, epoch: 0, step: 0, history: Vec::new() })
    }

    /// Restores parameters, optimizer state, counters and the data-order generator.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        ckpt.apply(&mut t.model.store, Some(&mut t.optim))?;
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = self.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Checkpoint::capture(&self.model.store, Some(&self.optim), self.epoch, self.step, RngState::capture(&self.rng), config)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let gt = batch.gt.as_ref().ok_or_else(|| Error::Data("training batch without masks".into()))?;
        let shape = [batch.n, 3, batch.size, batch.size];
        let Stdmmf { store, net } = &mut self.model;
        store.zero_grad();
        let mut g = Graph::new(store, Mode::TRAIN);
        let frames = g.input(shape, batch.frames.clone()).stage("input")?;
        let flows = g.input(shape, batch.flows.clone()).stage("input")?;
        let fwd = net.forward(&mut g, frames, flows)?;
        let l = loss_nodes(&mut g, &fwd, gt, self.config.loss_weights())?;
        let report = LossReport {
            loss1: g.scalar(l.loss1),
            loss2: l.loss2.map_or(0.0, |v| g.scalar(v)),
            loss3: g.scalar(l.loss3),
            total: g.scalar(l.total),
        };
        if !report.total.is_finite() {
            let mut d = format!("losses {report:?}");
            let diag = &fwd.diagnostics;
            if let Some(a) = diag.attentions {
                for (i, v) in a.iter().enumerate() {
                    d.push_str(&format!("; A{} {:?}", i + 1, stats(&g, *v)));
                }
            }
            if let Some(b) = diag.bi_att {
                d.push_str(&format!("; Bi-att {:?}", stats(&g, b)));
            }
            drop(g);
            d.push_str(&weight_summary(&self.model));
            return Err(Error::NonFinite { step: self.step as usize, diagnostics: d });
        }
        g.backward(l.total).stage("backward")?;
        self.optim.step(&mut self.model.store);
        self.step += 1;
        self.history.push(report);
        Ok(report)
    }

    /// One pass over all clips in a shuffled order. `on_step` sees `(step, report)`.
    pub fn run_epoch(&mut self, samples: &[Sample], mut on_step: impl FnMut(u64, &LossReport)) -> Result<Vec<LossReport>> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut groups = group_clips(samples, self.config.clip_len);
        groups.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(groups.len());
        for idx in &groups {
            let batch = make_batch(samples, idx)?;
            let r = self.train_step(&batch)?;
            on_step(self.step, &r);
            out.push(r);
        }
        self.epoch += 1;
        Ok(out)
    }
}

fn weight_summary(model: &Stdmmf) -> String {
    let mut worst: Vec<(f64, &str)> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.kind == EntryKind::Parameter)
        .map(|e| (e.data.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY }), e.name.as_str()))
        .collect();
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<String> = worst.iter().take(5).map(|(m, n)| format!("{n} max|w| {m:.3e}")).collect();
    format!("; largest weights: {}", top.join(", "))
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Full run: `config.epochs` epochs, logging every step and writing `epoch_NNN.ckpt` plus
/// `latest.ckpt` into `out_dir` after each epoch.
pub fn train(config: TrainConfig, samples: &[Sample], out_dir: Option<&Path>) -> Result<Trainer> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut t = Trainer::new(config)?;
    while (t.epoch as usize) < t.config.epochs {
        let epoch = t.epoch + 1;
        t.run_epoch(samples, |step, r| {
            log::info!("epoch {epoch} step {step} loss1 {:.6} loss2 {:.6} loss3 {:.6} total {:.6}", r.loss1, r.loss2, r.loss3, r.total);
        })?;
        if let Some(dir) = out_dir {
            let ck = t.checkpoint();
            ck.save(&checkpoint_path(dir, t.epoch))?;
            ck.save(&dir.join("latest.ckpt"))?;
        }
    }
    Ok(t)
}

/// Loads the training split under `data`, trains, and checkpoints into `out`.
pub fn run_train(config: TrainConfig, data: &Path, out: &Path, deterministic: bool) -> Result<Trainer> {
    let threads = super::configure_threads(deterministic)?;
    log::info!("training with {threads} worker thread(s)");
    let samples = super::dataset::load_dataset(data, super::dataset::Split::Train, config.input_size)?;
    train(config, &samples, Some(out))
}

//! Adam optimiser and the sequence-per-step training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{load_dataset, save_checkpoint, SliceSequence};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_graph, LossBreakdown, LossWeights};
use crate::memory::DEFAULT_K;
use crate::model::{ModelConfig, SegModel, SequenceOptions};
use crate::params::{ParamId, ParamStore};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Memory slices per step; overrides `model.k`.
    pub k: usize,
    pub model: ModelConfig,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            loss: LossWeights::default(),
            k: DEFAULT_K,
            model: ModelConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Model configuration with the training `k` applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            ..self.model.clone()
        }
    }
}

/// Adam with bias correction over the trainable tensors of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    non_negative: Vec<ParamId>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
            non_negative: Vec::new(),
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Parameters clamped to `>= 0` after every step.
    pub fn with_non_negative(mut self, ids: &[ParamId]) -> Self {
        self.non_negative.extend_from_slice(ids);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen tensors and
    /// tensors without a gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(
                "adam_step",
                format!("optimizer tracks {} tensors, store has {}", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.0;
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            if grad.len() != self.m[i].len() {
                return Err(Error::contract("adam_step", format!("shape changed for tensor {i}")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), mi), vi) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        for &id in &self.non_negative {
            for p in store.get_mut(id).data_mut() {
                if *p < 0.0 {
                    *p = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub sequence_id: String,
    pub loss: f64,
    pub dice: f64,
    pub bce: f64,
    pub consistency: f64,
    pub lambda: f64,
}

/// Deterministic visiting order: a fresh shuffle of all sequences per epoch.
#[derive(Debug)]
pub struct SequenceOrder {
    rng: rand_chacha::ChaCha8Rng,
    n: usize,
    current: Vec<usize>,
    pos: usize,
}

impl SequenceOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: substream(seed, Stream::DataOrder),
            n,
            current: Vec::new(),
            pos: 0,
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.current.len() {
            self.current = (0..self.n).collect();
            self.current.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.current[self.pos - 1]
    }
}

fn targets(seq: &SliceSequence) -> Result<Vec<Tensor>> {
    seq.slices
        .iter()
        .enumerate()
        .map(|(t, s)| {
            s.mask
                .clone()
                .ok_or_else(|| Error::Config(format!("sequence `{}` slice {t} has no mask", seq.sequence_id)))
        })
        .collect()
}

/// Forward, loss and backward for one sequence; gradients are added into
/// the model's parameter store.
pub fn sequence_step(model: &mut SegModel, seq: &SliceSequence, opts: SequenceOptions, w: &LossWeights) -> Result<LossBreakdown> {
    let targets = targets(seq)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward_sequence(&mut g, &bound, seq, opts)?;
    let preds: Vec<_> = out.slices.iter().map(|s| s.probabilities).collect();
    let embeddings: Vec<Tensor> = out.slices.iter().map(|s| g.value(s.pooled).clone()).collect();
    let loss = combined_loss_graph(&mut g, &preds, &targets, &embeddings, w)?;
    g.backward_into(loss.total, model.params_mut())?;
    Ok(loss.breakdown(&g))
}

/// Trains a freshly initialised model. `on_step` sees every trace record
/// and the model after the update.
pub fn train_sequences(
    cfg: &TrainConfig,
    sequences: &[SliceSequence],
    mut on_step: impl FnMut(&TraceRecord, &SegModel) -> Result<()>,
) -> Result<SegModel> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for seq in sequences {
        targets(seq)?;
    }
    let model_cfg = cfg.effective_model();
    let opts = SequenceOptions::from(&model_cfg);
    let mut model = SegModel::new(model_cfg, cfg.seed)?;
    let mut adam = Adam::from_config(model.params(), cfg).with_non_negative(&[model.lambda_id()]);
    let mut order = SequenceOrder::new(sequences.len(), cfg.seed);
    for step in 1..=cfg.steps {
        let seq = &sequences[order.next_index()];
        model.params_mut().zero_grad();
        let b = sequence_step(&mut model, seq, opts, &cfg.loss)?;
        adam.step(model.params_mut())?;
        let rec = TraceRecord {
            step,
            sequence_id: seq.sequence_id.clone(),
            loss: b.total,
            dice: b.dice,
            bce: b.bce,
            consistency: b.consistency,
            lambda: model.lambda(),
        };
        on_step(&rec, &model)?;
    }
    Ok(model)
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub intermediate: Vec<PathBuf>,
}

pub fn trace_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".trace.jsonl");
    PathBuf::from(s)
}

fn intermediate_path(checkpoint: &Path, step: usize) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

/// Trains on a dataset directory, writing the final checkpoint, a JSON-lines
/// loss trace next to it and any periodic checkpoints.
pub fn train(cfg: &TrainConfig, dataset_dir: &Path, out_checkpoint: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let sequences = load_dataset(dataset_dir)?;
    let trace = trace_path(out_checkpoint);
    let file = File::create(&trace).map_err(|e| Error::io(&trace, e))?;
    let mut writer = BufWriter::new(file);
    let mut intermediate = Vec::new();
    let model = train_sequences(cfg, &sequences, |rec, model| {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n").map_err(|e| Error::io(&trace, e))?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.steps {
            let p = intermediate_path(out_checkpoint, rec.step);
            save_checkpoint(&p, model)?;
            intermediate.push(p);
        }
        Ok(())
    })?;
    writer.flush().map_err(|e| Error::io(&trace, e))?;
    save_checkpoint(out_checkpoint, &model)?;
    Ok(TrainArtifacts {
        checkpoint: out_checkpoint.to_path_buf(),
        trace,
        intermediate,
    })
}

//! Mini-batch training with Adam, evaluation and metrics output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{adam_step, grad_check, GradCheckReport, OptimizerState, Tape, TapeExec, Var};
use crate::config::{parse_bool, parse_value};
use crate::data::{make_batches, Utterance};
use crate::error::{Error, Result};
use crate::exec::{SiteActivity, SiteBank};
use crate::model::{argmax, ForwardMode, Model};
use crate::numeric::{RealArray, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Keep threshold statistics fixed during training.
    pub freeze_thresholds: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 2e-3, seed: 0, freeze_thresholds: false, grad_clip: None }
    }
}

impl TrainConfig {
    /// Applies one `train.*` key; `false` for keys of other sections.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.freeze_thresholds" => self.freeze_thresholds = parse_bool(key, value)?,
            "train.grad_clip" => {
                self.grad_clip = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train.epochs = {}\ntrain.batch_size = {}\ntrain.lr = {:?}\ntrain.seed = {}\n\
             train.freeze_thresholds = {}\ntrain.grad_clip = {}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.seed,
            self.freeze_thresholds,
            self.grad_clip.map_or("none".to_string(), |c| format!("{:?}", c))
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean firing rate per spiking site on the test set.
    pub site_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub activity: Vec<SiteActivity>,
}

/// Accuracy and per-site firing statistics with frozen thresholds.
pub fn evaluate(model: &Model, utts: &[Utterance], batch_size: usize, mode: ForwardMode) -> Result<Evaluation> {
    let mut e = model.dense_exec().with_activity();
    let mut predictions = Vec::with_capacity(utts.len());
    let mut correct = 0;
    for batch in make_batches(utts, batch_size, None)? {
        let logits = model.forward_exec(&mut e, &batch.sequences(), &batch.valid_lengths, mode)?;
        for (z, &label) in logits.iter().zip(&batch.labels) {
            let p = argmax(z.data());
            correct += usize::from(p == label);
            predictions.push(p);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / utts.len() as f64,
        predictions,
        activity: e.activity.take().unwrap_or_default(),
    })
}

fn clip_global_norm(grads: &mut [RealArray], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
}

/// Minimises mean cross-entropy; returns the trained model and per-epoch metrics.
pub fn train(model: &Model, train_set: &[Utterance], test_set: &[Utterance], cfg: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    train_with(model, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &Model,
    train_set: &[Utterance],
    test_set: &[Utterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, Vec<EpochMetrics>)> {
    if model.is_fused() {
        return Err(Error::State("cannot train a reparameterized model".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut model = model.clone();
    let mut opt = OptimizerState::new(&model.params, cfg.lr);
    let mut shuffle = Rng::new(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in make_batches(train_set, cfg.batch_size, Some(shuffle.next_u64()))?.iter().enumerate() {
            let bank = SiteBank { cfg: model.config.neuron, states: model.sites.clone(), update: !cfg.freeze_thresholds };
            let mut ex = TapeExec::new(bank);
            let logits = model.forward_exec(&mut ex, &batch.sequences(), &batch.valid_lengths, ForwardMode::TrainMath)?;
            let mut terms = Vec::with_capacity(logits.len());
            for (&z, &label) in logits.iter().zip(&batch.labels) {
                correct += usize::from(argmax(ex.tape.value(z).data()) == label);
                terms.push(ex.tape.cross_entropy(z, label)?);
            }
            let loss = ex.tape.mean_of(&terms)?;
            let loss_value = ex.tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!("loss {} at epoch {}, step {}", loss_value, epoch, step)));
            }
            loss_sum += loss_value * batch.len() as f64;
            let mut grads = ex.tape.backward(loss)?.dense(&model.params);
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {}, step {}", epoch, step)));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut opt)?;
            for p in &mut model.params {
                p.round_to_storage();
            }
            if model.params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence(format!("non-finite parameter after epoch {}, step {}", epoch, step)));
            }
            model.sites = ex.bank.states;
            for s in &mut model.sites {
                s.round_to_storage();
            }
        }
        let eval = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, test_set, cfg.batch_size.max(1), ForwardMode::TrainMath)?)
        };
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc: eval.as_ref().map_or(f64::NAN, |e| e.accuracy),
            site_rates: eval.map_or_else(Vec::new, |e| e.activity.iter().map(SiteActivity::mean_rate).collect()),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok((model, history))
}

pub fn metrics_csv(history: &[EpochMetrics], site_names: &[String]) -> String {
    let mut out = String::from("epoch,loss,train_acc,test_acc");
    for n in site_names {
        let _ = write!(out, ",rate_{}", n);
    }
    out.push('\n');
    for m in history {
        let _ = write!(out, "{},{:.6},{:.4},{:.4}", m.epoch, m.loss, m.train_acc, m.test_acc);
        for r in &m.site_rates {
            let _ = write!(out, ",{:.6}", r);
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics], site_names: &[String]) -> Result<()> {
    fs::write(path, metrics_csv(history, site_names)).map_err(|e| Error::io(path, e))
}

/// Finite-difference check of every parameter of `model` on one batch, with
/// the floor relaxed and threshold statistics held fixed.
pub fn relaxed_model_grad_check(model: &Model, utts: &[Utterance], eps: f64, seed: u64) -> Result<GradCheckReport> {
    let batch = make_batches(utts, utts.len().max(1), None)?.remove(0);
    let seqs = batch.sequences();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut ex = TapeExec::relaxed(SiteBank::frozen(model.config.neuron, model.sites.clone()));
        ex.tape = std::mem::take(tape);
        ex.bound = Some(vars.to_vec());
        let logits = model.forward_exec(&mut ex, &seqs, &batch.valid_lengths, ForwardMode::TrainMath)?;
        let mut terms = Vec::with_capacity(logits.len());
        for (&z, &label) in logits.iter().zip(&batch.labels) {
            terms.push(ex.tape.cross_entropy(z, label)?);
        }
        let loss = ex.tape.mean_of(&terms)?;
        *tape = ex.tape;
        Ok(loss)
    };
    grad_check(f, &model.params, eps, seed)
}

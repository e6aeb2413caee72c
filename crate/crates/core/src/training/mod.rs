//! Batching, schedules, early stopping, metrics, synthetic tasks, and the
//! train/evaluate loops shared by both models.

pub mod data;
pub mod metrics;
pub mod synth;
mod tasks;

pub use tasks::evaluate;

use std::time::Instant;

use crate::error::{Error, Result};
use crate::params::{AdamState, Binding};
use crate::real::{sig6, Real};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use data::{make_batches, Batch, Dataset};

/// The inverse-square-root warmup schedule:
/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("lr_schedule step starts at 1".to_string()));
    }
    if warmup == 0 {
        return Err(Error::contract("warmup must be >= 1".to_string()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once the last `patience` epochs all failed to strictly improve on
/// the best validation loss seen before them. Returns the decision and the
/// best epoch (1-based, earliest on ties).
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> (StopDecision, usize) {
    assert!(!val_losses.is_empty(), "early_stop_check on empty history");
    let mut best_idx = 0usize;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best_idx] {
            best_idx = i;
        }
    }
    let since_best = val_losses.len() - 1 - best_idx;
    let decision =
        if since_best >= patience { StopDecision::Stop } else { StopDecision::Continue };
    (decision, best_idx + 1)
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub seconds: f64,
    /// Unsmoothed teacher-forced perplexity, when the task reports one.
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }

    /// CSV export; the `seconds` column carries measured wall time and is
    /// the only nondeterministic field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_metric,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                sig6(r.train_loss),
                sig6(r.val_loss),
                sig6(r.val_metric),
                sig6(r.seconds)
            ));
        }
        out
    }
}

/// Metrics produced by evaluating a model on a dataset.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    /// Mean unsmoothed cross entropy per example (classification) or per
    /// token (translation).
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub perplexity: Option<f64>,
    pub token_accuracy: Option<f64>,
}

impl EvalReport {
    /// The headline validation metric: accuracy for classification, BLEU
    /// for translation.
    pub fn metric(&self) -> f64 {
        self.accuracy.or(self.bleu).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup: u64,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Width fed to the learning-rate schedule.
    pub lr_width: usize,
}

/// A model the generic training loop can drive.
pub trait TrainableModel<F: Real> {
    fn params(&self) -> &crate::params::ParamSet<F>;
    fn params_mut(&mut self) -> &mut crate::params::ParamSet<F>;
    /// Summed loss node plus the denominator (examples or target tokens).
    fn batch_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        batch: &Batch,
        smoothing: f64,
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, usize)>;
    /// Metric evaluation (greedy decoding for sequence models).
    fn evaluate(&self, data: &Dataset) -> Result<EvalReport>;
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn diverged(err: Error, epoch: usize, step: u64) -> Error {
    match err {
        Error::NonFinite(msg) => {
            Error::Diverged(format!("epoch {epoch}, step {step}: {msg}"))
        }
        other => other,
    }
}

/// Per epoch: shuffle, forward, backward, Adam step at the scheduled rate;
/// track validation loss for early stopping; leave the model holding the
/// parameters of its best validation epoch.
pub fn train_loop<F: Real, M: TrainableModel<F>>(
    model: &mut M,
    train: &Dataset,
    val: &Dataset,
    s: &TrainSettings,
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty".to_string()));
    }
    let mut rng = SplitMix64::new(s.seed);
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    let snapshot = |m: &M| -> Vec<Tensor<F>> { m.params().iter().map(|p| p.value.clone()).collect() };
    let mut best: (usize, f64, Vec<Tensor<F>>) = (0, f64::INFINITY, snapshot(model));
    let mut stopped_early = false;

    for epoch in 1..=s.max_epochs {
        let t0 = Instant::now();
        let batches = make_batches(train, s.batch_size, &mut rng, true)?;
        let mut loss_sum = 0.0f64;
        let mut denom = 0usize;
        for batch in &batches {
            step += 1;
            let mut tape = Tape::new();
            let binding = model.params().bind(&mut tape);
            let (sum_node, count) = model
                .batch_loss(&mut tape, &binding, batch, s.label_smoothing, true, &mut rng)
                .map_err(|e| diverged(e, epoch, step))?;
            loss_sum += tape.data(sum_node)[0].as_f64();
            denom += count;
            let loss = tape.scale(sum_node, 1.0 / count.max(1) as f64)?;
            tape.backward(loss).map_err(|e| diverged(e, epoch, step))?;
            let grads = model.params().collect_grads(&tape, &binding);
            let lr = lr_schedule(step, s.lr_width, s.warmup)?;
            adam.step(model.params_mut(), &grads, lr)?;
        }
        let train_loss = loss_sum / denom.max(1) as f64;

        let val_loss = dataset_loss(model, val, s.label_smoothing, s.batch_size)?;
        let report = model.evaluate(val)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric: report.metric(),
            seconds: t0.elapsed().as_secs_f64(),
            val_perplexity: report.perplexity,
        });

        if val_loss < best.1 {
            best = (epoch, val_loss, snapshot(model));
        }
        let (decision, _) = early_stop_check(&history.val_losses(), s.patience);
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    // Restore the best-epoch parameters (initial parameters if no epoch ran).
    for (param, value) in model.params_mut().iter_mut().zip(best.2) {
        param.value = value;
    }
    Ok(TrainOutcome { history, best_epoch: best.0, stopped_early })
}

/// Mean loss of a dataset under teacher forcing, without dropout.
pub fn dataset_loss<F: Real, M: TrainableModel<F>>(
    model: &M,
    data: &Dataset,
    smoothing: f64,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = SplitMix64::new(0);
    let batches = make_batches(data, batch_size, &mut rng, false)?;
    let mut loss_sum = 0.0f64;
    let mut denom = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let binding = model.params().bind(&mut tape);
        let (sum_node, count) =
            model.batch_loss(&mut tape, &binding, batch, smoothing, false, &mut rng)?;
        loss_sum += tape.data(sum_node)[0].as_f64();
        denom += count;
    }
    Ok(loss_sum / denom.max(1) as f64)
}

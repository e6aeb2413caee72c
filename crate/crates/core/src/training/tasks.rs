//! [`TrainableModel`] implementations for the classifier and the
//! translator, plus the task-level `evaluate` entry point.

use crate::classifier::DuoClassifierModel;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::transformer::TranslatorModel;

use super::data::{Batch, Dataset};
use super::metrics::{bleu, perplexity, token_accuracy};
use super::{EvalReport, TrainableModel};

impl<F: Real> TrainableModel<F> for DuoClassifierModel<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        batch: &Batch,
        smoothing: f64,
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, usize)> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("classifier fed a sequence batch"))?;
        let mut losses = Vec::with_capacity(batch.input.len());
        for (ids, &label) in batch.input.iter().zip(labels) {
            let logits = self.forward(tape, binding, ids, training, rng)?;
            losses.push(tape.ce_smooth_sum(logits, &[label], &[true], smoothing, false)?);
        }
        let total = tape.add_nodes(&losses)?;
        Ok((total, batch.input.len()))
    }

    fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        let Dataset::Classify(examples) = data else {
            return Err(Error::contract("classifier evaluated on a parallel dataset"));
        };
        if examples.is_empty() {
            return Err(Error::invalid("empty evaluation dataset".to_string()));
        }
        let mut correct = 0usize;
        for (ids, label) in examples {
            if self.predict(ids)? == *label {
                correct += 1;
            }
        }
        let loss = super::dataset_loss(self, data, 0.0, 64)?;
        Ok(EvalReport {
            loss,
            accuracy: Some(correct as f64 / examples.len() as f64),
            ..EvalReport::default()
        })
    }
}

impl<F: Real> TrainableModel<F> for TranslatorModel<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<F>,
        binding: &Binding,
        batch: &Batch,
        smoothing: f64,
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, usize)> {
        let (tin, tout) = match (&batch.target_in, &batch.target_out) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::contract("translator fed a classification batch")),
        };
        let mut sums = Vec::with_capacity(batch.input.len());
        let mut tokens = 0usize;
        for ((src, tgt_in), tgt_out) in batch.input.iter().zip(tin).zip(tout) {
            let (loss, count) =
                self.seq_loss(tape, binding, src, tgt_in, tgt_out, smoothing, training, rng)?;
            sums.push(loss);
            tokens += count;
        }
        let total = tape.add_nodes(&sums)?;
        Ok((total, tokens))
    }

    /// Greedy-decode BLEU and token accuracy plus teacher-forced perplexity.
    fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        let Dataset::Parallel(pairs) = data else {
            return Err(Error::contract("translator evaluated on a classification dataset"));
        };
        if pairs.is_empty() {
            return Err(Error::invalid("empty evaluation dataset".to_string()));
        }
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut refs = Vec::with_capacity(pairs.len());
        for (src, tgt) in pairs {
            hyps.push(self.greedy_decode(src, 2 * src.len() + 5)?);
            refs.push(tgt.clone());
        }
        let mean_nll = super::dataset_loss(self, data, 0.0, 32)?;
        Ok(EvalReport {
            loss: mean_nll,
            bleu: Some(bleu(&hyps, &refs)?),
            perplexity: Some(perplexity(mean_nll)),
            token_accuracy: Some(token_accuracy(&hyps, &refs)),
            ..EvalReport::default()
        })
    }
}

/// Metric evaluation for either task kind.
pub fn evaluate<F: Real, M: TrainableModel<F>>(model: &M, data: &Dataset) -> Result<EvalReport> {
    model.evaluate(data)
}

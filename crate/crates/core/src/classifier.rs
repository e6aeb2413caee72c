//! Attention-pooled dual-embedding text classifier: two pretrained (or
//! learned) streams are cross-pooled into a single sentence vector, fused,
//! and fed to a linear softmax head.

use crate::embeddings::{DuoEmbeddingPair, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// How the two token streams are pooled into one sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    /// Cross-stream attention with softmax-normalized weights.
    DuoSoftmax,
    /// Cross-stream attention with raw (unnormalized) scores as weights.
    DuoRaw,
    /// Baseline: mean over tokens of the concatenated streams.
    Concat,
    /// Baseline: mean over tokens of the averaged streams (needs d1 == d2).
    Average,
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub d_model1: usize,
    pub d_model2: usize,
    pub d_ff: usize,
    pub label_num: usize,
    pub pooling: PoolingMode,
    pub dropout: f64,
    /// Learned streams train their tables; pretrained streams keep them
    /// frozen.
    pub train_table_s: bool,
    pub train_table_p: bool,
}

/// Trainable-parameter count of the classifier proper (embedding tables
/// frozen): the two attention vectors, the fusion matrix and the head.
pub fn count_classifier_params(d1: usize, d2: usize, d_ff: usize, label_num: usize) -> usize {
    d1 + d2 + (d1 + d2) * d_ff + d_ff * label_num
}

pub struct DuoClassifierModel<F> {
    pub vocab: Vocabulary,
    pub cfg: ClassifierConfig,
    pub params: ParamSet<F>,
    pub emb_s: ParamId,
    pub emb_p: ParamId,
    pub w_s: ParamId,
    pub w_p: ParamId,
    pub w_o: ParamId,
    pub w_head: ParamId,
}

impl<F: Real> DuoClassifierModel<F> {
    pub fn new(pair: DuoEmbeddingPair<F>, cfg: ClassifierConfig, rng: &mut SplitMix64) -> Result<Self> {
        if pair.s.dim != cfg.d_model1 || pair.p.dim != cfg.d_model2 {
            return Err(Error::dim(format!(
                "pair dims {}/{} vs config {}/{}",
                pair.s.dim, pair.p.dim, cfg.d_model1, cfg.d_model2
            )));
        }
        if cfg.pooling == PoolingMode::Average && cfg.d_model1 != cfg.d_model2 {
            return Err(Error::config(format!(
                "average pooling needs equal stream widths, got {}/{}",
                cfg.d_model1, cfg.d_model2
            )));
        }
        let fused_in = match cfg.pooling {
            PoolingMode::Average => cfg.d_model1,
            _ => cfg.d_model1 + cfg.d_model2,
        };
        let mut params = ParamSet::new();
        let emb_s = params.add_full("emb.s", pair.s.matrix, cfg.train_table_s, true);
        let emb_p = params.add_full("emb.p", pair.p.matrix, cfg.train_table_p, true);
        let w_s = params.add("pool.w_s", Tensor::xavier(1, cfg.d_model1, rng), true);
        let w_p = params.add("pool.w_p", Tensor::xavier(1, cfg.d_model2, rng), true);
        let w_o = params.add("fuse.w_o", Tensor::xavier(fused_in, cfg.d_ff, rng), true);
        let w_head = params.add("head.w", Tensor::xavier(cfg.d_ff, cfg.label_num, rng), true);
        Ok(DuoClassifierModel { vocab: pair.vocab, cfg, params, emb_s, emb_p, w_s, w_p, w_o, w_head })
    }

    /// Forward to logits [1, label_num] for one token-id sequence.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        ids: &[u32],
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<NodeId> {
        let (a_p, a_s) = self.pool(tape, b, ids)?;
        let e = fuse_sentence(tape, a_p, a_s, b.node(self.w_o))?;
        let e = tape.dropout(e, self.cfg.dropout, rng, training)?;
        tape.matmul(e, b.node(self.w_head))
    }

    fn pool(&self, tape: &mut Tape<F>, b: &Binding, ids: &[u32]) -> Result<(NodeId, NodeId)> {
        if ids.is_empty() {
            return Err(Error::invalid("empty input sequence".to_string()));
        }
        let s = tape.gather_rows(b.node(self.emb_s), ids)?;
        let p = tape.gather_rows(b.node(self.emb_p), ids)?;
        let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        match self.cfg.pooling {
            PoolingMode::DuoSoftmax => {
                duo_attention_pool(tape, s, p, b.node(self.w_s), b.node(self.w_p), &pad, true)
            }
            PoolingMode::DuoRaw => {
                duo_attention_pool(tape, s, p, b.node(self.w_s), b.node(self.w_p), &pad, false)
            }
            PoolingMode::Concat | PoolingMode::Average => {
                let n_valid = pad.iter().filter(|&&x| !x).count();
                if n_valid == 0 {
                    return Err(Error::invalid("all-pad input sequence".to_string()));
                }
                let w = F::of(1.0 / n_valid as f64);
                let uniform: Vec<F> =
                    pad.iter().map(|&is_pad| if is_pad { F::zero() } else { w }).collect();
                let weights = tape.constant(Tensor::row(uniform));
                let mean_p = tape.matmul(weights, p)?;
                let mean_s = tape.matmul(weights, s)?;
                if self.cfg.pooling == PoolingMode::Average {
                    let sum = tape.add(mean_p, mean_s)?;
                    let avg = tape.scale(sum, 0.5)?;
                    Ok((avg, avg))
                } else {
                    Ok((mean_p, mean_s))
                }
            }
        }
    }

    /// Loss (mean cross entropy over the batch) for a set of sequences.
    pub fn examples_loss(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        examples: &[(Vec<u32>, usize)],
        smoothing: f64,
        training: bool,
        rng: &mut SplitMix64,
    ) -> Result<NodeId> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch".to_string()));
        }
        let mut losses = Vec::with_capacity(examples.len());
        for (ids, label) in examples {
            let logits = self.forward(tape, b, ids, training, rng)?;
            losses.push(tape.ce_smooth_sum(logits, &[*label], &[true], smoothing, false)?);
        }
        let total = tape.add_nodes(&losses)?;
        tape.scale(total, 1.0 / examples.len() as f64)
    }

    /// Greedy class prediction (no dropout).
    pub fn predict(&self, ids: &[u32]) -> Result<usize> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mut rng = SplitMix64::new(0);
        let logits = self.forward(&mut tape, &b, ids, false, &mut rng)?;
        let row = tape.data(logits);
        let mut best = 0usize;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Cross-stream attention pooling: scores from one stream weight the rows of
/// the other. With softmax the weights are normalized over non-pad
/// positions; without it the raw scores are used and pad positions get
/// exactly zero weight.
///
/// Returns (a_P, a_S): a_P = norm(w_S . S^T) . P, a_S = norm(w_P . P^T) . S.
pub fn duo_attention_pool<F: Real>(
    tape: &mut Tape<F>,
    s: NodeId,
    p: NodeId,
    w_s: NodeId,
    w_p: NodeId,
    pad: &[bool],
    softmax: bool,
) -> Result<(NodeId, NodeId)> {
    let l = tape.shape(s)[0];
    if l == 0 {
        return Err(Error::invalid("empty sequence in attention pooling".to_string()));
    }
    if pad.len() != l || tape.shape(p)[0] != l {
        return Err(Error::dim(format!(
            "pooling length mismatch: S {l}, P {}, mask {}",
            tape.shape(p)[0],
            pad.len()
        )));
    }
    let weights_from = |tape: &mut Tape<F>, w: NodeId, x: NodeId| -> Result<NodeId> {
        let xt = tape.transpose(x)?;
        let scores = tape.matmul(w, xt)?; // [1, l]
        if softmax {
            let bias: Vec<F> = pad
                .iter()
                .map(|&is_pad| if is_pad { F::of(-1e9) } else { F::zero() })
                .collect();
            let bias = tape.constant(Tensor::row(bias));
            let masked = tape.add(scores, bias)?;
            tape.softmax_lastdim(masked)
        } else {
            let keep: Vec<F> =
                pad.iter().map(|&is_pad| if is_pad { F::zero() } else { F::one() }).collect();
            let keep = tape.constant(Tensor::row(keep));
            tape.mul(scores, keep)
        }
    };
    let ws_weights = weights_from(tape, w_s, s)?;
    let a_p = tape.matmul(ws_weights, p)?;
    let wp_weights = weights_from(tape, w_p, p)?;
    let a_s = tape.matmul(wp_weights, s)?;
    Ok((a_p, a_s))
}

/// Sentence fusion: e = [a_P, a_S] . W_O (a_P first).
pub fn fuse_sentence<F: Real>(
    tape: &mut Tape<F>,
    a_p: NodeId,
    a_s: NodeId,
    w_o: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat_lastdim(a_p, a_s)?;
    tape.matmul(cat, w_o)
}

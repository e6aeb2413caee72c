//! Two-stream transformer encoder-decoder. Attention queries/keys come from
//! one stream and values from the other, one projection matrix serves a
//! stream's key role on one side and its value role on the mirrored side,
//! and the decoder ties its output logits to the fused target embeddings.
//! A single-stream vanilla variant backs the ablation baseline.

use crate::embeddings::{EmbeddingTable, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const MASK_BIAS: f64 = -1e9;

// ── Masks and positions ─────────────────────────────────────────────────

/// Boolean attention mask: `true` means the query row may attend to the key
/// column.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask { rows, cols, allow: vec![true; rows * cols] }
    }

    /// Lower-triangular causal mask: entry (i, j) allowed iff j <= i.
    pub fn causal(l: usize) -> Self {
        let mut allow = vec![false; l * l];
        for i in 0..l {
            for j in 0..=i {
                allow[i * l + j] = true;
            }
        }
        AttentionMask { rows: l, cols: l, allow }
    }

    /// Mask out padded key positions for every query row.
    pub fn from_key_pad(rows: usize, key_pad: &[bool]) -> Self {
        let cols = key_pad.len();
        let mut allow = vec![true; rows * cols];
        for i in 0..rows {
            for (j, &p) in key_pad.iter().enumerate() {
                if p {
                    allow[i * cols + j] = false;
                }
            }
        }
        AttentionMask { rows, cols, allow }
    }

    pub fn and(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(format!(
                "mask and: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let allow = self.allow.iter().zip(&other.allow).map(|(&a, &b)| a && b).collect();
        Ok(AttentionMask { rows: self.rows, cols: self.cols, allow })
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    /// Additive bias: 0 on allowed cells, -1e9 on disallowed ones.
    fn bias_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self
            .allow
            .iter()
            .map(|&a| if a { F::zero() } else { F::of(MASK_BIAS) })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }

    /// Row indicator zeroing fully-masked query rows, or None when every
    /// row can attend somewhere.
    fn row_mask_tensor<F: Real>(&self) -> Option<Tensor<F>> {
        let mut any_dead = false;
        let mut data = vec![F::one(); self.rows * self.cols];
        for i in 0..self.rows {
            if (0..self.cols).all(|j| !self.allow[i * self.cols + j]) {
                any_dead = true;
                for j in 0..self.cols {
                    data[i * self.cols + j] = F::zero();
                }
            }
        }
        any_dead.then(|| Tensor::new(vec![self.rows, self.cols], data).expect("mask shape"))
    }
}

/// Sinusoidal position table: PE[pos, 2i] = sin(pos/10000^(2i/d)),
/// PE[pos, 2i+1] = cos of the same angle.
pub fn sinusoidal_positions<F: Real>(l: usize, d_model: usize) -> Result<Tensor<F>> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::config(format!("sinusoidal positions need an even width, got {d_model}")));
    }
    let mut data = Vec::with_capacity(l * d_model);
    for pos in 0..l {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(F::of(angle.sin()));
            data.push(F::of(angle.cos()));
        }
    }
    Tensor::new(vec![l, d_model], data)
}

// ── Attention primitives ────────────────────────────────────────────────

/// softmax(Q K^T / sqrt(d_k) + mask bias) V. A query row with no allowed
/// key attends nowhere and yields a zero output row.
pub fn scaled_dot_attention<F: Real>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &AttentionMask,
) -> Result<NodeId> {
    let (lq, dk) = (tape.shape(q)[0], tape.shape(q)[1]);
    let lk = tape.shape(k)[0];
    if tape.shape(k)[1] != dk || tape.shape(v)[0] != lk {
        return Err(Error::dim(format!(
            "attention shapes Q {:?} K {:?} V {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if mask.rows != lq || mask.cols != lk {
        return Err(Error::dim(format!(
            "mask {}x{} for attention {lq}x{lk}",
            mask.rows, mask.cols
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let bias = tape.constant(mask.bias_tensor());
    let masked = tape.add(scaled, bias)?;
    let mut attn = tape.softmax_lastdim(masked)?;
    if let Some(row_mask) = mask.row_mask_tensor::<F>() {
        let rm = tape.constant(row_mask);
        attn = tape.mul(attn, rm)?;
    }
    tape.matmul(attn, v)
}

/// Multi-head attention with the three source tensors given separately so
/// the two-stream wiring can cross them.
#[allow(clippy::too_many_arguments)]
fn multi_head<F: Real>(
    tape: &mut Tape<F>,
    q_src: NodeId,
    k_src: NodeId,
    v_src: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    heads: usize,
    mask: &AttentionMask,
) -> Result<NodeId> {
    let d_model = tape.shape(wq)[1];
    if !d_model.is_multiple_of(heads) {
        return Err(Error::config(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let dk = d_model / heads;
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(k_src, wk)?;
    let v = tape.matmul(v_src, wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_lastdim(q, h * dk, dk)?;
        let kh = tape.slice_lastdim(k, h * dk, dk)?;
        let vh = tape.slice_lastdim(v, h * dk, dk)?;
        head_outs.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
    }
    let mut cat = head_outs[0];
    for &h in &head_outs[1..] {
        cat = tape.concat_lastdim(cat, h)?;
    }
    tape.matmul(cat, wo)
}

/// One attention site's parameters. In the weight-shared configuration the
/// key and value roles of each stream point at the same matrix, so the site
/// holds 4 distinct input projections instead of 6.
#[derive(Debug, Clone, Copy)]
pub struct AttnSite {
    wq_s: ParamId,
    wq_p: ParamId,
    k_of_s: ParamId,
    v_of_s: ParamId,
    k_of_p: ParamId,
    v_of_p: ParamId,
    wo_s: ParamId,
    wo_p: ParamId,
}

impl AttnSite {
    /// Number of distinct input-projection matrices at this site.
    pub fn input_projection_count(&self) -> usize {
        let mut ids = vec![self.wq_s, self.wq_p, self.k_of_s, self.v_of_s, self.k_of_p, self.v_of_p];
        ids.sort_by_key(|p| p.index());
        ids.dedup_by_key(|p| p.index());
        ids.len()
    }
}

/// Two-stream multi-head attention:
/// A_S = MultiHead(Q from x_P, K from ctx_P, V from ctx_S) and
/// A_P = MultiHead(Q from x_S, K from ctx_S, V from ctx_P).
/// The matrix behind ctx_P's key role is the same one behind its value role
/// on the mirrored call (likewise for ctx_S) when sharing is on.
#[allow(clippy::too_many_arguments)]
pub fn duo_multi_head<F: Real>(
    tape: &mut Tape<F>,
    b: &Binding,
    x_s: NodeId,
    x_p: NodeId,
    ctx_s: NodeId,
    ctx_p: NodeId,
    site: &AttnSite,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(NodeId, NodeId)> {
    let a_s = multi_head(
        tape,
        x_p,
        ctx_p,
        ctx_s,
        b.node(site.wq_p),
        b.node(site.k_of_p),
        b.node(site.v_of_s),
        b.node(site.wo_s),
        heads,
        mask,
    )?;
    let a_p = multi_head(
        tape,
        x_s,
        ctx_s,
        ctx_p,
        b.node(site.wq_s),
        b.node(site.k_of_s),
        b.node(site.v_of_p),
        b.node(site.wo_p),
        heads,
        mask,
    )?;
    Ok((a_s, a_p))
}

#[derive(Debug, Clone, Copy)]
struct LnSite {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnBlock {
    w1: ParamId,
    w2: ParamId,
}

/// Residual + LayerNorm: LayerNorm(x + sublayer).
fn residual_ln<F: Real>(
    tape: &mut Tape<F>,
    bind: &Binding,
    x: NodeId,
    sublayer: NodeId,
    ln: &LnSite,
) -> Result<NodeId> {
    let sum = tape.add(x, sublayer)?;
    tape.layer_norm(sum, bind.node(ln.g), bind.node(ln.b), LN_EPS)
}

/// The cross-stream normalization site: LayerNorm(x of one stream +
/// sublayer output of the other).
pub fn duo_layer_norm<F: Real>(
    tape: &mut Tape<F>,
    x_own: NodeId,
    sublayer_of_other: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let sum = tape.add(x_own, sublayer_of_other)?;
    tape.layer_norm(sum, gamma, beta, LN_EPS)
}

fn ffn<F: Real>(tape: &mut Tape<F>, bind: &Binding, x: NodeId, block: &FfnBlock) -> Result<NodeId> {
    let h = tape.matmul(x, bind.node(block.w1))?;
    let h = tape.relu(h)?;
    tape.matmul(h, bind.node(block.w2))
}

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TranslatorConfig {
    pub n_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Width of the S-stream embedding tables (the pretrained or learned
    /// side that is projected up to d_model). The P stream is always a
    /// learned table of width d_model.
    pub d_stream_s: usize,
    /// Off = single-stream vanilla transformer (the ablation baseline).
    pub meta_embeddings: bool,
    /// One matrix per stream per site for both the K and V roles.
    pub kv_weight_sharing: bool,
    /// Cross-stream residual at the decoder's masked self-attention site.
    pub duo_normalization: bool,
    /// Tie output logits to the fused, projected target embeddings.
    pub fusion_layer: bool,
    pub trainable_tables: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            n_layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            dropout: 0.1,
            d_stream_s: 32,
            meta_embeddings: true,
            kv_weight_sharing: true,
            duo_normalization: true,
            fusion_layer: true,
            trainable_tables: true,
        }
    }
}

struct DuoEncoderLayer {
    attn: AttnSite,
    ln1_s: LnSite,
    ln1_p: LnSite,
    ffn_s: FfnBlock,
    ffn_p: FfnBlock,
    ln2_s: LnSite,
    ln2_p: LnSite,
}

struct DuoDecoderLayer {
    self_attn: AttnSite,
    ln1_s: LnSite,
    ln1_p: LnSite,
    cross_attn: AttnSite,
    ln2_s: LnSite,
    ln2_p: LnSite,
    ffn_s: FfnBlock,
    ffn_p: FfnBlock,
    ln3_s: LnSite,
    ln3_p: LnSite,
}

struct VanillaSite {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

struct VanillaEncoderLayer {
    attn: VanillaSite,
    ln1: LnSite,
    ffn: FfnBlock,
    ln2: LnSite,
}

struct VanillaDecoderLayer {
    self_attn: VanillaSite,
    ln1: LnSite,
    cross_attn: VanillaSite,
    ln2: LnSite,
    ffn: FfnBlock,
    ln3: LnSite,
}

struct DuoArch {
    src_emb_s: ParamId,
    src_proj_s: ParamId,
    src_emb_p: ParamId,
    tgt_emb_s: ParamId,
    tgt_proj_s: ParamId,
    tgt_emb_p: ParamId,
    enc: Vec<DuoEncoderLayer>,
    dec: Vec<DuoDecoderLayer>,
    /// Decoder-state fusion [2 d_model, d_model]; always present.
    fuse_dec: ParamId,
    /// Embedding fusion [d_stream_s + d_model, d_model] when the output is
    /// tied to the embeddings.
    fuse_w: Option<ParamId>,
    /// Independent output matrix [|V_tgt|, d_model] when it is not.
    out_w: Option<ParamId>,
}

struct VanillaArch {
    emb_src: ParamId,
    emb_tgt: ParamId,
    enc: Vec<VanillaEncoderLayer>,
    dec: Vec<VanillaDecoderLayer>,
}

enum Arch {
    Duo(DuoArch),
    Vanilla(VanillaArch),
}

/// Encoder output handed to the decoder; `p` carries the second stream in
/// two-stream mode.
pub struct EncoderOut {
    pub s: NodeId,
    pub p: Option<NodeId>,
}

pub struct TranslatorModel<F> {
    pub cfg: TranslatorConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: ParamSet<F>,
    arch: Arch,
}

fn add_ln<F: Real>(params: &mut ParamSet<F>, prefix: &str, d: usize) -> LnSite {
    let g = params.add(format!("{prefix}.g"), Tensor::filled(vec![1, d], F::one()), true);
    let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![1, d]), true);
    LnSite { g, b }
}

fn add_ffn<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut SplitMix64,
) -> FfnBlock {
    let w1 = params.add(format!("{prefix}.w1"), Tensor::xavier(d, d_ff, rng), true);
    let w2 = params.add(format!("{prefix}.w2"), Tensor::xavier(d_ff, d, rng), true);
    FfnBlock { w1, w2 }
}

fn add_duo_site<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d: usize,
    shared: bool,
    rng: &mut SplitMix64,
) -> AttnSite {
    let wq_s = params.add(format!("{prefix}.wq_s"), Tensor::xavier(d, d, rng), true);
    let wq_p = params.add(format!("{prefix}.wq_p"), Tensor::xavier(d, d, rng), true);
    let (k_of_s, v_of_s, k_of_p, v_of_p) = if shared {
        let kv_s = params.add(format!("{prefix}.wkv_s"), Tensor::xavier(d, d, rng), true);
        let kv_p = params.add(format!("{prefix}.wkv_p"), Tensor::xavier(d, d, rng), true);
        (kv_s, kv_s, kv_p, kv_p)
    } else {
        let wk_s = params.add(format!("{prefix}.wk_s"), Tensor::xavier(d, d, rng), true);
        let wv_s = params.add(format!("{prefix}.wv_s"), Tensor::xavier(d, d, rng), true);
        let wk_p = params.add(format!("{prefix}.wk_p"), Tensor::xavier(d, d, rng), true);
        let wv_p = params.add(format!("{prefix}.wv_p"), Tensor::xavier(d, d, rng), true);
        (wk_s, wv_s, wk_p, wv_p)
    };
    let wo_s = params.add(format!("{prefix}.wo_s"), Tensor::xavier(d, d, rng), true);
    let wo_p = params.add(format!("{prefix}.wo_p"), Tensor::xavier(d, d, rng), true);
    AttnSite { wq_s, wq_p, k_of_s, v_of_s, k_of_p, v_of_p, wo_s, wo_p }
}

fn add_vanilla_site<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d: usize,
    rng: &mut SplitMix64,
) -> VanillaSite {
    let wq = params.add(format!("{prefix}.wq"), Tensor::xavier(d, d, rng), true);
    let wk = params.add(format!("{prefix}.wk"), Tensor::xavier(d, d, rng), true);
    let wv = params.add(format!("{prefix}.wv"), Tensor::xavier(d, d, rng), true);
    let wo = params.add(format!("{prefix}.wo"), Tensor::xavier(d, d, rng), true);
    VanillaSite { wq, wk, wv, wo }
}

impl<F: Real> TranslatorModel<F> {
    /// Build a model. `src_s`/`tgt_s` supply pretrained S-stream tables
    /// (their width must equal `cfg.d_stream_s`); when absent the S tables
    /// are learned at that width.
    pub fn new(
        cfg: TranslatorConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        src_s: Option<EmbeddingTable<F>>,
        tgt_s: Option<EmbeddingTable<F>>,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        if !cfg.d_model.is_multiple_of(2) {
            return Err(Error::config(format!("d_model {} must be even", cfg.d_model)));
        }
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let arch = if cfg.meta_embeddings {
            let ds = cfg.d_stream_s;
            let table = |name: &str, vocab: &Vocabulary, given: Option<EmbeddingTable<F>>, params: &mut ParamSet<F>, rng: &mut SplitMix64| -> Result<ParamId> {
                let t = match given {
                    Some(t) => {
                        if t.dim != ds {
                            return Err(Error::dim(format!(
                                "pretrained table width {} vs configured {ds}",
                                t.dim
                            )));
                        }
                        t
                    }
                    None => EmbeddingTable::learned(vocab, ds, rng),
                };
                Ok(params.add_full(name, t.matrix, cfg.trainable_tables, true))
            };
            let src_emb_s = table("src.emb_s", &src_vocab, src_s, &mut params, rng)?;
            let src_proj_s = params.add("src.proj_s", Tensor::xavier(ds, d, rng), true);
            let src_emb_p = {
                let t = EmbeddingTable::<F>::learned(&src_vocab, d, rng);
                params.add_full("src.emb_p", t.matrix, cfg.trainable_tables, true)
            };
            let tgt_emb_s = table("tgt.emb_s", &tgt_vocab, tgt_s, &mut params, rng)?;
            let tgt_proj_s = params.add("tgt.proj_s", Tensor::xavier(ds, d, rng), true);
            let tgt_emb_p = {
                let t = EmbeddingTable::<F>::learned(&tgt_vocab, d, rng);
                params.add_full("tgt.emb_p", t.matrix, cfg.trainable_tables, true)
            };

            let enc = (0..cfg.n_layers)
                .map(|i| DuoEncoderLayer {
                    attn: add_duo_site(&mut params, &format!("enc.{i}"), d, cfg.kv_weight_sharing, rng),
                    ln1_s: add_ln(&mut params, &format!("enc.{i}.ln1_s"), d),
                    ln1_p: add_ln(&mut params, &format!("enc.{i}.ln1_p"), d),
                    ffn_s: add_ffn(&mut params, &format!("enc.{i}.ffn_s"), d, cfg.d_ff, rng),
                    ffn_p: add_ffn(&mut params, &format!("enc.{i}.ffn_p"), d, cfg.d_ff, rng),
                    ln2_s: add_ln(&mut params, &format!("enc.{i}.ln2_s"), d),
                    ln2_p: add_ln(&mut params, &format!("enc.{i}.ln2_p"), d),
                })
                .collect();
            let dec = (0..cfg.n_layers)
                .map(|i| DuoDecoderLayer {
                    self_attn: add_duo_site(&mut params, &format!("dec.{i}.self"), d, cfg.kv_weight_sharing, rng),
                    ln1_s: add_ln(&mut params, &format!("dec.{i}.ln1_s"), d),
                    ln1_p: add_ln(&mut params, &format!("dec.{i}.ln1_p"), d),
                    cross_attn: add_duo_site(&mut params, &format!("dec.{i}.cross"), d, cfg.kv_weight_sharing, rng),
                    ln2_s: add_ln(&mut params, &format!("dec.{i}.ln2_s"), d),
                    ln2_p: add_ln(&mut params, &format!("dec.{i}.ln2_p"), d),
                    ffn_s: add_ffn(&mut params, &format!("dec.{i}.ffn_s"), d, cfg.d_ff, rng),
                    ffn_p: add_ffn(&mut params, &format!("dec.{i}.ffn_p"), d, cfg.d_ff, rng),
                    ln3_s: add_ln(&mut params, &format!("dec.{i}.ln3_s"), d),
                    ln3_p: add_ln(&mut params, &format!("dec.{i}.ln3_p"), d),
                })
                .collect();

            let fuse_dec = params.add("fuse.dec", Tensor::xavier(2 * d, d, rng), true);
            let (fuse_w, out_w) = if cfg.fusion_layer {
                (Some(params.add("fuse.w", Tensor::xavier(ds + d, d, rng), true)), None)
            } else {
                (None, Some(params.add("out.w", Tensor::xavier(tgt_vocab.len(), d, rng), true)))
            };
            Arch::Duo(DuoArch {
                src_emb_s,
                src_proj_s,
                src_emb_p,
                tgt_emb_s,
                tgt_proj_s,
                tgt_emb_p,
                enc,
                dec,
                fuse_dec,
                fuse_w,
                out_w,
            })
        } else {
            let emb_src = {
                let t = EmbeddingTable::<F>::learned(&src_vocab, d, rng);
                params.add_full("emb.src", t.matrix, cfg.trainable_tables, true)
            };
            let emb_tgt = {
                let t = EmbeddingTable::<F>::learned(&tgt_vocab, d, rng);
                params.add_full("emb.tgt", t.matrix, cfg.trainable_tables, true)
            };
            let enc = (0..cfg.n_layers)
                .map(|i| VanillaEncoderLayer {
                    attn: add_vanilla_site(&mut params, &format!("enc.{i}"), d, rng),
                    ln1: add_ln(&mut params, &format!("enc.{i}.ln1"), d),
                    ffn: add_ffn(&mut params, &format!("enc.{i}.ffn"), d, cfg.d_ff, rng),
                    ln2: add_ln(&mut params, &format!("enc.{i}.ln2"), d),
                })
                .collect();
            let dec = (0..cfg.n_layers)
                .map(|i| VanillaDecoderLayer {
                    self_attn: add_vanilla_site(&mut params, &format!("dec.{i}.self"), d, rng),
                    ln1: add_ln(&mut params, &format!("dec.{i}.ln1"), d),
                    cross_attn: add_vanilla_site(&mut params, &format!("dec.{i}.cross"), d, rng),
                    ln2: add_ln(&mut params, &format!("dec.{i}.ln2"), d),
                    ffn: add_ffn(&mut params, &format!("dec.{i}.ffn"), d, cfg.d_ff, rng),
                    ln3: add_ln(&mut params, &format!("dec.{i}.ln3"), d),
                })
                .collect();
            Arch::Vanilla(VanillaArch { emb_src, emb_tgt, enc, dec })
        };
        Ok(TranslatorModel { cfg, src_vocab, tgt_vocab, params, arch })
    }

    // ── Embedding ───────────────────────────────────────────────────────

    #[allow(clippy::too_many_arguments)]
    fn embed_duo(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        ids: &[u32],
        emb_s: ParamId,
        proj_s: ParamId,
        emb_p: ParamId,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, NodeId)> {
        let d = self.cfg.d_model;
        let scale = (d as f64).sqrt();
        let pe = tape.constant(sinusoidal_positions(ids.len(), d)?);

        let rows_s = tape.gather_rows(b.node(emb_s), ids)?;
        let s = tape.matmul(rows_s, b.node(proj_s))?;
        let s = tape.scale(s, scale)?;
        let s = tape.add(s, pe)?;
        let s = tape.dropout(s, self.cfg.dropout, rng, train)?;

        let rows_p = tape.gather_rows(b.node(emb_p), ids)?;
        let p = tape.scale(rows_p, scale)?;
        let p = tape.add(p, pe)?;
        let p = tape.dropout(p, self.cfg.dropout, rng, train)?;
        Ok((s, p))
    }

    fn embed_vanilla(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        ids: &[u32],
        emb: ParamId,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let pe = tape.constant(sinusoidal_positions(ids.len(), d)?);
        let rows = tape.gather_rows(b.node(emb), ids)?;
        let x = tape.scale(rows, (d as f64).sqrt())?;
        let x = tape.add(x, pe)?;
        tape.dropout(x, self.cfg.dropout, rng, train)
    }

    // ── Encoder / decoder stacks ────────────────────────────────────────

    /// Two-stream encoder over already embedded inputs. Each layer runs
    /// two-stream self-attention, per-stream residual + LayerNorm, then a
    /// per-stream feed-forward block with its own residual + LayerNorm.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_forward(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        mut x_s: NodeId,
        mut x_p: NodeId,
        mask: &AttentionMask,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, NodeId)> {
        let Arch::Duo(arch) = &self.arch else {
            return Err(Error::contract("encoder_forward on a single-stream model".to_string()));
        };
        let drop = self.cfg.dropout;
        for layer in &arch.enc {
            let (a_s, a_p) =
                duo_multi_head(tape, b, x_s, x_p, x_s, x_p, &layer.attn, self.cfg.heads, mask)?;
            let a_s = tape.dropout(a_s, drop, rng, train)?;
            let a_p = tape.dropout(a_p, drop, rng, train)?;
            x_s = residual_ln(tape, b, x_s, a_s, &layer.ln1_s)?;
            x_p = residual_ln(tape, b, x_p, a_p, &layer.ln1_p)?;

            let f_s = ffn(tape, b, x_s, &layer.ffn_s)?;
            let f_s = tape.dropout(f_s, drop, rng, train)?;
            let f_p = ffn(tape, b, x_p, &layer.ffn_p)?;
            let f_p = tape.dropout(f_p, drop, rng, train)?;
            x_s = residual_ln(tape, b, x_s, f_s, &layer.ln2_s)?;
            x_p = residual_ln(tape, b, x_p, f_p, &layer.ln2_p)?;
        }
        Ok((x_s, x_p))
    }

    /// Two-stream decoder. Per layer: masked two-stream self-attention;
    /// the cross-stream normalization site (each stream's residual takes
    /// the other stream's sublayer output) when enabled, the standard
    /// same-stream residual otherwise; two-stream cross-attention against
    /// the encoder streams; per-stream feed-forward.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        mut y_s: NodeId,
        mut y_p: NodeId,
        h_s: NodeId,
        h_p: NodeId,
        self_mask: &AttentionMask,
        cross_mask: &AttentionMask,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, NodeId)> {
        let Arch::Duo(arch) = &self.arch else {
            return Err(Error::contract("decoder_forward on a single-stream model".to_string()));
        };
        let drop = self.cfg.dropout;
        for layer in &arch.dec {
            let (a_s, a_p) = duo_multi_head(
                tape,
                b,
                y_s,
                y_p,
                y_s,
                y_p,
                &layer.self_attn,
                self.cfg.heads,
                self_mask,
            )?;
            let a_s = tape.dropout(a_s, drop, rng, train)?;
            let a_p = tape.dropout(a_p, drop, rng, train)?;
            if self.cfg.duo_normalization {
                let new_s =
                    duo_layer_norm(tape, y_s, a_p, b.node(layer.ln1_s.g), b.node(layer.ln1_s.b))?;
                let new_p =
                    duo_layer_norm(tape, y_p, a_s, b.node(layer.ln1_p.g), b.node(layer.ln1_p.b))?;
                y_s = new_s;
                y_p = new_p;
            } else {
                y_s = residual_ln(tape, b, y_s, a_s, &layer.ln1_s)?;
                y_p = residual_ln(tape, b, y_p, a_p, &layer.ln1_p)?;
            }

            let (c_s, c_p) = duo_multi_head(
                tape,
                b,
                y_s,
                y_p,
                h_s,
                h_p,
                &layer.cross_attn,
                self.cfg.heads,
                cross_mask,
            )?;
            let c_s = tape.dropout(c_s, drop, rng, train)?;
            let c_p = tape.dropout(c_p, drop, rng, train)?;
            y_s = residual_ln(tape, b, y_s, c_s, &layer.ln2_s)?;
            y_p = residual_ln(tape, b, y_p, c_p, &layer.ln2_p)?;

            let f_s = ffn(tape, b, y_s, &layer.ffn_s)?;
            let f_s = tape.dropout(f_s, drop, rng, train)?;
            let f_p = ffn(tape, b, y_p, &layer.ffn_p)?;
            let f_p = tape.dropout(f_p, drop, rng, train)?;
            y_s = residual_ln(tape, b, y_s, f_s, &layer.ln3_s)?;
            y_p = residual_ln(tape, b, y_p, f_p, &layer.ln3_p)?;
        }
        Ok((y_s, y_p))
    }

    /// Output logits from the fused decoder streams. With the fusion layer
    /// on, the pre-softmax matrix is T = [E_S, E_P] W_fuse: the projected
    /// concatenation of the target embedding tables, with no independent
    /// storage of its own. The decoder states fuse through F_dec first:
    /// logits = (concat(h_S, h_P) F_dec) T^T.
    pub fn fused_output_logits(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        h_s: NodeId,
        h_p: NodeId,
    ) -> Result<NodeId> {
        let Arch::Duo(arch) = &self.arch else {
            return Err(Error::contract("fused_output_logits on a single-stream model".to_string()));
        };
        let cat = tape.concat_lastdim(h_s, h_p)?;
        let fused = tape.matmul(cat, b.node(arch.fuse_dec))?;
        let tied = match (arch.fuse_w, arch.out_w) {
            (Some(fuse_w), _) => {
                let emb_cat =
                    tape.concat_lastdim(b.node(arch.tgt_emb_s), b.node(arch.tgt_emb_p))?;
                tape.matmul(emb_cat, b.node(fuse_w))?
            }
            (None, Some(out_w)) => b.node(out_w),
            (None, None) => unreachable!("one output head always exists"),
        };
        let tied_t = tape.transpose(tied)?;
        tape.matmul(fused, tied_t)
    }

    // ── Sequence-level forward ──────────────────────────────────────────

    /// Encode one (possibly padded) source sequence.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        src: &[u32],
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<EncoderOut> {
        if src.is_empty() {
            return Err(Error::invalid("empty source sequence".to_string()));
        }
        let pad: Vec<bool> = src.iter().map(|&i| i == PAD).collect();
        let mask = AttentionMask::from_key_pad(src.len(), &pad);
        match &self.arch {
            Arch::Duo(arch) => {
                let (x_s, x_p) = self.embed_duo(
                    tape,
                    b,
                    src,
                    arch.src_emb_s,
                    arch.src_proj_s,
                    arch.src_emb_p,
                    train,
                    rng,
                )?;
                let (h_s, h_p) = self.encoder_forward(tape, b, x_s, x_p, &mask, train, rng)?;
                Ok(EncoderOut { s: h_s, p: Some(h_p) })
            }
            Arch::Vanilla(arch) => {
                let x = self.embed_vanilla(tape, b, src, arch.emb_src, train, rng)?;
                let mut h = x;
                for layer in &arch.enc {
                    let a = multi_head(
                        tape,
                        h,
                        h,
                        h,
                        b.node(layer.attn.wq),
                        b.node(layer.attn.wk),
                        b.node(layer.attn.wv),
                        b.node(layer.attn.wo),
                        self.cfg.heads,
                        &mask,
                    )?;
                    let a = tape.dropout(a, self.cfg.dropout, rng, train)?;
                    h = residual_ln(tape, b, h, a, &layer.ln1)?;
                    let f = ffn(tape, b, h, &layer.ffn)?;
                    let f = tape.dropout(f, self.cfg.dropout, rng, train)?;
                    h = residual_ln(tape, b, h, f, &layer.ln2)?;
                }
                Ok(EncoderOut { s: h, p: None })
            }
        }
    }

    /// Decoder logits [l_t, |V_tgt|] for a (BOS-shifted) target prefix.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        tgt_in: &[u32],
        enc: &EncoderOut,
        src_pad: &[bool],
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<NodeId> {
        if tgt_in.is_empty() {
            return Err(Error::invalid("empty target prefix".to_string()));
        }
        let lt = tgt_in.len();
        let tgt_pad: Vec<bool> = tgt_in.iter().map(|&i| i == PAD).collect();
        let self_mask = AttentionMask::causal(lt).and(&AttentionMask::from_key_pad(lt, &tgt_pad))?;
        let cross_mask = AttentionMask::from_key_pad(lt, src_pad);
        match &self.arch {
            Arch::Duo(arch) => {
                let (y_s, y_p) = self.embed_duo(
                    tape,
                    b,
                    tgt_in,
                    arch.tgt_emb_s,
                    arch.tgt_proj_s,
                    arch.tgt_emb_p,
                    train,
                    rng,
                )?;
                let h_p = enc.p.ok_or_else(|| {
                    Error::contract("two-stream decoder fed a single-stream encoding".to_string())
                })?;
                let (d_s, d_p) = self.decoder_forward(
                    tape, b, y_s, y_p, enc.s, h_p, &self_mask, &cross_mask, train, rng,
                )?;
                self.fused_output_logits(tape, b, d_s, d_p)
            }
            Arch::Vanilla(arch) => {
                let mut y = self.embed_vanilla(tape, b, tgt_in, arch.emb_tgt, train, rng)?;
                for layer in &arch.dec {
                    let a = multi_head(
                        tape,
                        y,
                        y,
                        y,
                        b.node(layer.self_attn.wq),
                        b.node(layer.self_attn.wk),
                        b.node(layer.self_attn.wv),
                        b.node(layer.self_attn.wo),
                        self.cfg.heads,
                        &self_mask,
                    )?;
                    let a = tape.dropout(a, self.cfg.dropout, rng, train)?;
                    y = residual_ln(tape, b, y, a, &layer.ln1)?;
                    let c = multi_head(
                        tape,
                        y,
                        enc.s,
                        enc.s,
                        b.node(layer.cross_attn.wq),
                        b.node(layer.cross_attn.wk),
                        b.node(layer.cross_attn.wv),
                        b.node(layer.cross_attn.wo),
                        self.cfg.heads,
                        &cross_mask,
                    )?;
                    let c = tape.dropout(c, self.cfg.dropout, rng, train)?;
                    y = residual_ln(tape, b, y, c, &layer.ln2)?;
                    let f = ffn(tape, b, y, &layer.ffn)?;
                    let f = tape.dropout(f, self.cfg.dropout, rng, train)?;
                    y = residual_ln(tape, b, y, f, &layer.ln3)?;
                }
                // Output weights tied to the target embedding table.
                let et = tape.transpose(b.node(arch.emb_tgt))?;
                tape.matmul(y, et)
            }
        }
    }

    /// Summed token cross entropy and the number of real target tokens for
    /// one sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn seq_loss(
        &self,
        tape: &mut Tape<F>,
        b: &Binding,
        src: &[u32],
        tgt_in: &[u32],
        tgt_out: &[u32],
        smoothing: f64,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<(NodeId, usize)> {
        let enc = self.encode(tape, b, src, train, rng)?;
        let src_pad: Vec<bool> = src.iter().map(|&i| i == PAD).collect();
        let logits = self.decode_logits(tape, b, tgt_in, &enc, &src_pad, train, rng)?;
        let valid: Vec<bool> = tgt_out.iter().map(|&t| t != PAD).collect();
        let count = valid.iter().filter(|&&v| v).count();
        let targets: Vec<usize> = tgt_out.iter().map(|&t| t as usize).collect();
        let loss = tape.ce_smooth_sum(logits, &targets, &valid, smoothing, true)?;
        Ok((loss, count))
    }

    /// Greedy decoding: encode once, then extend the target prefix one
    /// argmax token at a time until EOS or `max_len`.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let mut rng = SplitMix64::new(0);
        let (enc_s, enc_p) = {
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let enc = self.encode(&mut tape, &b, src, false, &mut rng)?;
            (tape.value(enc.s).clone(), enc.p.map(|p| tape.value(p).clone()))
        };
        let src_pad: Vec<bool> = src.iter().map(|&i| i == PAD).collect();
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let mut tgt_in = vec![BOS];
            tgt_in.extend_from_slice(&out);
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let enc = EncoderOut {
                s: tape.constant(enc_s.clone()),
                p: enc_p.as_ref().map(|p| tape.constant(p.clone())),
            };
            let logits = self.decode_logits(&mut tape, &b, &tgt_in, &enc, &src_pad, false, &mut rng)?;
            let row = tape.value(logits).row_slice(tgt_in.len() - 1).to_vec();
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            if best as u32 == EOS {
                break;
            }
            out.push(best as u32);
        }
        Ok(out)
    }

    // ── Introspection ───────────────────────────────────────────────────

    /// Attention sites of the two-stream architecture (encoder self, then
    /// decoder self + cross per layer), for structural checks.
    pub fn duo_sites(&self) -> Vec<(String, &AttnSite)> {
        match &self.arch {
            Arch::Duo(arch) => {
                let mut sites = Vec::new();
                for (i, l) in arch.enc.iter().enumerate() {
                    sites.push((format!("enc.{i}"), &l.attn));
                }
                for (i, l) in arch.dec.iter().enumerate() {
                    sites.push((format!("dec.{i}.self"), &l.self_attn));
                    sites.push((format!("dec.{i}.cross"), &l.cross_attn));
                }
                sites
            }
            Arch::Vanilla(_) => Vec::new(),
        }
    }

    /// Total attention sites including the vanilla architecture (3 input
    /// projections each).
    pub fn site_projection_counts(&self) -> Vec<(String, usize)> {
        match &self.arch {
            Arch::Duo(_) => self
                .duo_sites()
                .into_iter()
                .map(|(n, s)| (n, s.input_projection_count()))
                .collect(),
            Arch::Vanilla(arch) => {
                let mut sites = Vec::new();
                for (i, _) in arch.enc.iter().enumerate() {
                    sites.push((format!("enc.{i}"), 3));
                }
                for (i, _) in arch.dec.iter().enumerate() {
                    sites.push((format!("dec.{i}.self"), 3));
                    sites.push((format!("dec.{i}.cross"), 3));
                }
                sites
            }
        }
    }

    /// Copy every S-side parameter value onto its P-side mirror. With equal
    /// inputs the two streams then evolve identically; a diagnostic for the
    /// stream-symmetry property.
    pub fn mirror_streams(&mut self) {
        let pairs: Vec<(String, String)> = self
            .params
            .iter()
            .filter(|&p| p.name
                    .contains("_s")).map(|p| (p.name.clone(), p.name.replace("_s", "_p")))
            .collect();
        for (s_name, p_name) in pairs {
            let (Some(src), Some(dst)) =
                (self.params.by_name(&s_name), self.params.by_name(&p_name))
            else {
                continue;
            };
            if src == dst {
                continue;
            }
            let value = self.params.get(src).value.clone();
            if value.shape() == self.params.get(dst).value.shape() {
                self.params.get_mut(dst).value = value;
            }
        }
    }
}

/// Closed-form trainable-parameter count for a translator configuration,
/// evaluated independently of the live registry.
pub fn closed_form_translator_params(cfg: &TranslatorConfig, v_src: usize, v_tgt: usize) -> usize {
    let d = cfg.d_model;
    let ln = 2 * d; // gamma + beta
    let ffn = 2 * d * cfg.d_ff;
    if cfg.meta_embeddings {
        let ds = cfg.d_stream_s;
        let emb = if cfg.trainable_tables { v_src * ds + v_src * d + v_tgt * ds + v_tgt * d } else { 0 };
        let proj = 2 * ds * d; // src + tgt stream projections
        let site_inputs = if cfg.kv_weight_sharing { 4 } else { 6 };
        let site = (site_inputs + 2) * d * d;
        let enc_layer = site + 2 * ffn + 4 * ln;
        let dec_layer = 2 * site + 2 * ffn + 6 * ln;
        let fuse = 2 * d * d + if cfg.fusion_layer { (ds + d) * d } else { v_tgt * d };
        emb + proj + cfg.n_layers * (enc_layer + dec_layer) + fuse
    } else {
        let emb = if cfg.trainable_tables { v_src * d + v_tgt * d } else { 0 };
        let site = 4 * d * d;
        let enc_layer = site + ffn + 2 * ln;
        let dec_layer = 2 * site + ffn + 3 * ln;
        emb + cfg.n_layers * (enc_layer + dec_layer)
    }
}

impl ParamId {
    fn index(&self) -> usize {
        self.0
    }
}

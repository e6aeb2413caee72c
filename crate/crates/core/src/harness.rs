//! Experiment harness behind the CLI: data/model assembly from a
//! [`RunConfig`], the train/translate commands, the gradient-check and
//! parameter-report gates, and the couple-grid / ablation / convergence
//! experiment drivers.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::classifier::{
    count_classifier_params, ClassifierConfig, DuoClassifierModel, PoolingMode,
};
use crate::config::{EmbeddingSource, RunConfig, SyntheticSpec, TaskKind};
use crate::embeddings::{
    parse_embedding_text, DuoEmbeddingPair, EmbeddingTable, Vocabulary,
};
use crate::error::{Error, Result};
use crate::real::{sig6, Real};
use crate::rng::SplitMix64;
use crate::training::data::{
    read_classifier_tsv, read_parallel, tokenize, tokenize_and_numericalize, Dataset,
};
use crate::training::synth::{gen_synthetic_keywords, gen_synthetic_parallel, SynthTask};
use crate::training::{
    train_loop, EvalReport, TrainHistory, TrainSettings, TrainableModel,
};
use crate::transformer::{
    closed_form_translator_params, TranslatorConfig, TranslatorModel,
};

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, content)?;
    Ok(())
}

// ── Data & model assembly ───────────────────────────────────────────────

pub struct ClassifierData {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub val: Dataset,
    pub labels: Vec<String>,
}

/// Classifier data from the config: a TSV corpus with a seeded 10%
/// validation hold-out, or the synthetic keyword task with its explicit
/// split.
pub fn build_classifier_data(cfg: &RunConfig) -> Result<ClassifierData> {
    if let Some(path) = &cfg.corpus {
        let (rows, labels) = read_classifier_tsv(path)?;
        let mut tokens: Vec<String> = Vec::new();
        for (_, text) in &rows {
            tokens.extend(tokenize(text));
        }
        let vocab = Vocabulary::build(tokens, cfg.min_freq)?;
        let examples: Vec<(Vec<u32>, usize)> = rows
            .iter()
            .filter_map(|(label, text)| {
                let ids = tokenize_and_numericalize(text, &vocab);
                (!ids.is_empty()).then_some((ids, *label))
            })
            .collect();
        if examples.is_empty() {
            return Err(Error::invalid("corpus has no non-empty examples".to_string()));
        }
        let mut rng = SplitMix64::new(cfg.seed ^ 0x5eed);
        let (train, val) = Dataset::Classify(examples).split_validation(0.1, &mut rng);
        Ok(ClassifierData { vocab, train, val, labels })
    } else {
        let mut rng = SplitMix64::new(cfg.seed ^ 0xda7a);
        let d = gen_synthetic_keywords(
            cfg.label_num,
            cfg.vocab_size,
            cfg.min_len,
            cfg.max_len,
            cfg.train_count,
            cfg.val_count,
            &mut rng,
        )?;
        Ok(ClassifierData {
            vocab: Vocabulary::synthetic(cfg.vocab_size - 4),
            train: Dataset::Classify(d.train),
            val: Dataset::Classify(d.val),
            labels: (0..cfg.label_num).map(|c| format!("c{c}")).collect(),
        })
    }
}

fn load_table<F: Real>(
    source: &EmbeddingSource,
    vocab: &Vocabulary,
    rng: &mut SplitMix64,
) -> Result<(EmbeddingTable<F>, bool)> {
    match source {
        EmbeddingSource::Learned(dim) => Ok((EmbeddingTable::learned(vocab, *dim, rng), true)),
        EmbeddingSource::File(path) => {
            let raw = parse_embedding_text(BufReader::new(fs::File::open(path)?), None)?;
            let table = EmbeddingTable::from_raw(&raw, vocab, None, source.label(), rng)?;
            Ok((table, false))
        }
    }
}

/// Assemble a classifier from config, with explicit stream sources (grid
/// cells override the configured couple).
pub fn build_classifier<F: Real>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    num_classes: usize,
    source_s: &EmbeddingSource,
    source_p: &EmbeddingSource,
    seed: u64,
) -> Result<DuoClassifierModel<F>> {
    let mut rng = SplitMix64::new(seed);
    let (table_s, train_s) = load_table::<F>(source_s, vocab, &mut rng)?;
    let (table_p, train_p) = load_table::<F>(source_p, vocab, &mut rng)?;
    let ccfg = ClassifierConfig {
        d_model1: table_s.dim,
        d_model2: table_p.dim,
        d_ff: cfg.d_ff,
        label_num: num_classes,
        pooling: match cfg.pooling.as_str() {
            "concat" => PoolingMode::Concat,
            "average" => PoolingMode::Average,
            _ if cfg.use_softmax_pooling => PoolingMode::DuoSoftmax,
            _ => PoolingMode::DuoRaw,
        },
        dropout: cfg.dropout,
        train_table_s: train_s,
        train_table_p: train_p,
    };
    let pair = DuoEmbeddingPair::new(vocab.clone(), table_s, table_p)?;
    DuoClassifierModel::new(pair, ccfg, &mut rng)
}

fn classifier_sources(cfg: &RunConfig) -> (EmbeddingSource, EmbeddingSource) {
    let s = cfg.embedding_s.clone().unwrap_or(EmbeddingSource::Learned(cfg.d_model1));
    let p = cfg.embedding_p.clone().unwrap_or(EmbeddingSource::Learned(cfg.d_model2));
    (s, p)
}

pub struct TranslatorData {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Dataset,
    pub val: Dataset,
}

/// Parallel data from the config: aligned corpus files with a seeded 10%
/// hold-out, or a synthetic task with its disjoint split.
pub fn build_translator_data(cfg: &RunConfig) -> Result<TranslatorData> {
    match (&cfg.source, &cfg.target) {
        (Some(src), Some(tgt)) => {
            let rows = read_parallel(src, tgt)?;
            let mut src_tokens = Vec::new();
            let mut tgt_tokens = Vec::new();
            for (s, t) in &rows {
                src_tokens.extend(tokenize(s));
                tgt_tokens.extend(tokenize(t));
            }
            let src_vocab = Vocabulary::build(src_tokens, cfg.min_freq)?;
            let tgt_vocab = Vocabulary::build(tgt_tokens, cfg.min_freq)?;
            let pairs: Vec<(Vec<u32>, Vec<u32>)> = rows
                .iter()
                .filter_map(|(s, t)| {
                    let si = tokenize_and_numericalize(s, &src_vocab);
                    let ti = tokenize_and_numericalize(t, &tgt_vocab);
                    (!si.is_empty() && !ti.is_empty()).then_some((si, ti))
                })
                .collect();
            if pairs.is_empty() {
                return Err(Error::invalid("parallel corpus has no usable pairs".to_string()));
            }
            let mut rng = SplitMix64::new(cfg.seed ^ 0x5eed);
            let (train, val) = Dataset::Parallel(pairs).split_validation(0.1, &mut rng);
            Ok(TranslatorData { src_vocab: src_vocab.clone(), tgt_vocab, train, val })
        }
        _ => {
            let Some(SyntheticSpec::Parallel(task_name)) = &cfg.synthetic else {
                return Err(Error::config("no parallel data configured"));
            };
            let task = SynthTask::parse(task_name)
                .ok_or_else(|| Error::config(format!("unknown synthetic task {task_name}")))?;
            let mut rng = SplitMix64::new(cfg.seed ^ 0xda7a);
            let d = gen_synthetic_parallel(
                task,
                cfg.vocab_size,
                cfg.min_len,
                cfg.max_len,
                cfg.train_count,
                cfg.val_count,
                &mut rng,
            )?;
            let vocab = Vocabulary::synthetic(cfg.vocab_size - 4);
            Ok(TranslatorData {
                src_vocab: vocab.clone(),
                tgt_vocab: vocab,
                train: Dataset::Parallel(d.train),
                val: Dataset::Parallel(d.val),
            })
        }
    }
}

pub fn translator_config(cfg: &RunConfig) -> Result<TranslatorConfig> {
    if cfg.embedding_p.is_some() && cfg.task == TaskKind::Translate {
        return Err(Error::config(
            "the second translation stream is always a learned table of width d_model; embedding_p applies to classification only",
        ));
    }
    let d_stream_s = match &cfg.embedding_s {
        None => cfg.d_model,
        Some(EmbeddingSource::Learned(d)) => *d,
        Some(EmbeddingSource::File(_)) => 0, // resolved when the file is read
    };
    Ok(TranslatorConfig {
        n_layers: cfg.n_layers,
        heads: cfg.heads,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        dropout: cfg.dropout,
        d_stream_s,
        meta_embeddings: cfg.meta_embeddings,
        kv_weight_sharing: cfg.kv_weight_sharing,
        duo_normalization: cfg.duo_normalization,
        fusion_layer: cfg.fusion_layer,
        trainable_tables: true,
    })
}

/// Assemble a translator from config over the given vocabularies.
pub fn build_translator<F: Real>(
    cfg: &RunConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    seed: u64,
) -> Result<TranslatorModel<F>> {
    let mut tcfg = translator_config(cfg)?;
    let mut rng = SplitMix64::new(seed);
    let src_s = match &cfg.embedding_s {
        Some(EmbeddingSource::File(path)) => {
            let raw = parse_embedding_text(BufReader::new(fs::File::open(path)?), None)?;
            let table = EmbeddingTable::from_raw(&raw, src_vocab, None, path.display().to_string(), &mut rng)?;
            tcfg.d_stream_s = table.dim;
            Some(table)
        }
        _ => None,
    };
    TranslatorModel::new(tcfg, src_vocab.clone(), tgt_vocab.clone(), src_s, None, &mut rng)
}

fn train_settings(cfg: &RunConfig, seed: u64, lr_width: usize) -> TrainSettings {
    TrainSettings {
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        warmup: cfg.warmup,
        seed,
        label_smoothing: cfg.effective_smoothing(),
        lr_width,
    }
}

// ── Train commands ──────────────────────────────────────────────────────

pub struct TrainArtifacts {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub report: EvalReport,
    pub trainable_params: usize,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainArtifacts {
    pub fn summary(&self) -> String {
        let epochs = self.history.records.len();
        let mut line = format!(
            "trained {epochs} epoch(s), best epoch {}, val loss {}, val metric {}",
            self.best_epoch,
            sig6(self.history.records.last().map(|r| r.val_loss).unwrap_or(f64::NAN)),
            sig6(self.report.metric()),
        );
        if self.stopped_early {
            line.push_str(" (early stop)");
        }
        line
    }
}

pub fn cmd_train_classifier(cfg: &RunConfig, out: &Path) -> Result<TrainArtifacts> {
    let data = build_classifier_data(cfg)?;
    let (src_s, src_p) = classifier_sources(cfg);
    let mut model: DuoClassifierModel<f32> =
        build_classifier(cfg, &data.vocab, data.labels.len(), &src_s, &src_p, cfg.seed)?;
    let settings = train_settings(cfg, cfg.seed, cfg.d_ff);
    let outcome = train_loop(&mut model, &data.train, &data.val, &settings)?;
    let report = model.evaluate(&data.val)?;
    finish_training(cfg, out, model.params(), outcome, report)
}

pub fn cmd_train_translator(cfg: &RunConfig, out: &Path) -> Result<TrainArtifacts> {
    let data = build_translator_data(cfg)?;
    let mut model: TranslatorModel<f32> =
        build_translator(cfg, &data.src_vocab, &data.tgt_vocab, cfg.seed)?;
    let settings = train_settings(cfg, cfg.seed, cfg.d_model);
    let outcome = train_loop(&mut model, &data.train, &data.val, &settings)?;
    let report = model.evaluate(&data.val)?;
    finish_training(cfg, out, model.params(), outcome, report)
}

fn finish_training(
    _cfg: &RunConfig,
    out: &Path,
    params: &crate::params::ParamSet<f32>,
    outcome: crate::training::TrainOutcome,
    report: EvalReport,
) -> Result<TrainArtifacts> {
    let history_path = out.join("history.csv");
    let checkpoint_path = out.join("best.ckpt");
    write_text(&history_path, &outcome.history.to_csv())?;
    checkpoint::save_file(&checkpoint_path, &checkpoint::from_params(params))?;
    Ok(TrainArtifacts {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        report,
        trainable_params: params.trainable_count(),
        history_path,
        checkpoint_path,
    })
}

// ── Translate command ───────────────────────────────────────────────────

/// Greedy-translate `input` line by line using a trained checkpoint. The
/// vocabulary is rebuilt deterministically from the configured data.
pub fn cmd_translate(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path) -> Result<usize> {
    if cfg.task != TaskKind::Translate {
        return Err(Error::config("translate needs a translation config"));
    }
    let data = build_translator_data(cfg)?;
    let mut model: TranslatorModel<f32> =
        build_translator(cfg, &data.src_vocab, &data.tgt_vocab, cfg.seed)?;
    let tensors = checkpoint::load_file(ckpt)?;
    checkpoint::load_into(&tensors, &mut model.params)?;

    let text = fs::read_to_string(input)?;
    let mut lines_out = Vec::new();
    for line in text.lines() {
        let ids = tokenize_and_numericalize(line, &data.src_vocab);
        if ids.is_empty() {
            lines_out.push(String::new());
            continue;
        }
        let decoded = model.greedy_decode(&ids, 2 * ids.len() + 5)?;
        let words: Vec<&str> = decoded.iter().map(|&t| data.tgt_vocab.token(t)).collect();
        lines_out.push(words.join(" "));
    }
    let mut body = lines_out.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_text(output, &body)?;
    Ok(lines_out.len())
}

// ── Gradient-check command ──────────────────────────────────────────────

pub struct GradCheckItem {
    pub name: String,
    pub max_error: f64,
}

pub struct GradCheckReport {
    pub items: Vec<GradCheckItem>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.max_error < self.threshold)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let status = if item.max_error < self.threshold { "ok" } else { "FAIL" };
            out.push_str(&format!("{:32} max rel err {:10.3e}  {status}\n", item.name, item.max_error));
        }
        out.push_str(&format!(
            "{} checks, threshold {:.0e}: {}\n",
            self.items.len(),
            self.threshold,
            if self.passed() { "all passed" } else { "FAILURES PRESENT" }
        ));
        out
    }
}

/// Central-difference verification of every primitive plus both full model
/// losses, in double precision at toy dimensions.
pub fn cmd_grad_check() -> Result<GradCheckReport> {
    use crate::gradcheck::finite_diff_check;
    use crate::params::Binding;
    use crate::tensor::Tensor;

    let mut rng = SplitMix64::new(0xC0FFEE);
    let rnd = |shape: Vec<usize>, rng: &mut SplitMix64| -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-0.9, 0.9)).collect()).unwrap()
    };
    let mut items: Vec<GradCheckItem> = Vec::new();
    let eps = 1e-5;

    {
        let a = rnd(vec![3, 4], &mut rng);
        let b = rnd(vec![4, 2], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                let sq = t.mul(c, c)?;
                t.sum_all(sq)
            },
            &[a, b],
            eps,
        )?;
        items.push(GradCheckItem { name: "matmul".to_string(), max_error: err });
    }
    {
        let x = rnd(vec![2, 5], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let s = t.softmax_lastdim(ids[0])?;
                let sq = t.mul(s, s)?;
                t.sum_all(sq)
            },
            &[x],
            eps,
        )?;
        items.push(GradCheckItem { name: "softmax_lastdim".to_string(), max_error: err });
    }
    {
        let x = rnd(vec![3, 6], &mut rng);
        let g = rnd(vec![1, 6], &mut rng);
        let b = rnd(vec![1, 6], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &[x, g, b],
            eps,
        )?;
        items.push(GradCheckItem { name: "layer_norm".to_string(), max_error: err });
    }
    {
        let a = rnd(vec![2, 3], &mut rng);
        let b = rnd(vec![2, 2], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let c = t.concat_lastdim(ids[0], ids[1])?;
                let sq = t.mul(c, c)?;
                t.sum_all(sq)
            },
            &[a, b],
            eps,
        )?;
        items.push(GradCheckItem { name: "concat_lastdim".to_string(), max_error: err });
    }
    for kind in ["add", "sub", "mul", "scale"] {
        let a = rnd(vec![2, 3], &mut rng);
        let b = rnd(vec![2, 3], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let c = match kind {
                    "add" => t.add(ids[0], ids[1])?,
                    "sub" => t.sub(ids[0], ids[1])?,
                    "mul" => t.mul(ids[0], ids[1])?,
                    _ => t.scale(ids[0], -1.7)?,
                };
                let sq = t.mul(c, c)?;
                t.sum_all(sq)
            },
            &[a, b],
            eps,
        )?;
        items.push(GradCheckItem { name: format!("elementwise({kind})"), max_error: err });
    }
    {
        let x = rnd(vec![3, 4], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let y = t.relu(ids[0])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &[x],
            eps,
        )?;
        items.push(GradCheckItem { name: "relu".to_string(), max_error: err });
    }
    {
        let x = rnd(vec![4, 4], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let mut drop_rng = SplitMix64::new(7);
                let y = t.dropout(ids[0], 0.4, &mut drop_rng, true)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &[x],
            eps,
        )?;
        items.push(GradCheckItem { name: "dropout(train)".to_string(), max_error: err });
    }
    {
        let table = rnd(vec![6, 3], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let rows = t.gather_rows(ids[0], &[0, 2, 2, 5])?;
                let sq = t.mul(rows, rows)?;
                t.sum_all(sq)
            },
            &[table],
            eps,
        )?;
        items.push(GradCheckItem { name: "gather_rows".to_string(), max_error: err });
    }
    {
        let x = rnd(vec![3, 6], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let a = t.slice_lastdim(ids[0], 1, 3)?;
                let b = t.transpose(a)?;
                let sq = t.mul(b, b)?;
                t.sum_all(sq)
            },
            &[x],
            eps,
        )?;
        items.push(GradCheckItem { name: "slice+transpose".to_string(), max_error: err });
    }
    {
        let logits = rnd(vec![3, 5], &mut rng);
        let err = finite_diff_check(
            |t, ids| t.ce_smooth_sum(ids[0], &[1, 4, 2], &[true, true, false], 0.1, true),
            &[logits],
            eps,
        )?;
        items.push(GradCheckItem { name: "cross_entropy_smoothed".to_string(), max_error: err });
    }
    {
        use crate::transformer::{scaled_dot_attention, AttentionMask};
        let q = rnd(vec![3, 4], &mut rng);
        let k = rnd(vec![3, 4], &mut rng);
        let v = rnd(vec![3, 4], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let mask = AttentionMask::causal(3);
                let o = scaled_dot_attention(t, ids[0], ids[1], ids[2], &mask)?;
                let sq = t.mul(o, o)?;
                t.sum_all(sq)
            },
            &[q, k, v],
            eps,
        )?;
        items.push(GradCheckItem { name: "scaled_dot_attention".to_string(), max_error: err });
    }
    {
        use crate::classifier::duo_attention_pool;
        let s = rnd(vec![4, 3], &mut rng);
        let p = rnd(vec![4, 2], &mut rng);
        let ws = rnd(vec![1, 3], &mut rng);
        let wp = rnd(vec![1, 2], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let (a_p, a_s) =
                    duo_attention_pool(t, ids[0], ids[1], ids[2], ids[3], &[false, false, true, false], true)?;
                let cat = t.concat_lastdim(a_p, a_s)?;
                let sq = t.mul(cat, cat)?;
                t.sum_all(sq)
            },
            &[s, p, ws, wp],
            eps,
        )?;
        items.push(GradCheckItem { name: "duo_attention_pool".to_string(), max_error: err });
    }
    {
        use crate::transformer::duo_layer_norm;
        let x = rnd(vec![2, 4], &mut rng);
        let sub = rnd(vec![2, 4], &mut rng);
        let g = rnd(vec![1, 4], &mut rng);
        let b = rnd(vec![1, 4], &mut rng);
        let err = finite_diff_check(
            |t, ids| {
                let y = duo_layer_norm(t, ids[0], ids[1], ids[2], ids[3])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &[x, sub, g, b],
            eps,
        )?;
        items.push(GradCheckItem { name: "duo_layer_norm".to_string(), max_error: err });
    }

    // Full classifier loss at toy dimensions.
    {
        let vocab = Vocabulary::synthetic(8);
        let mut mrng = SplitMix64::new(41);
        let s = EmbeddingTable::<f64>::learned(&vocab, 3, &mut mrng);
        let p = EmbeddingTable::<f64>::learned(&vocab, 4, &mut mrng);
        let pair = DuoEmbeddingPair::new(vocab, s, p)?;
        let model = DuoClassifierModel::new(
            pair,
            ClassifierConfig {
                d_model1: 3,
                d_model2: 4,
                d_ff: 5,
                label_num: 3,
                pooling: PoolingMode::DuoSoftmax,
                dropout: 0.0,
                train_table_s: true,
                train_table_p: true,
            },
            &mut mrng,
        )?;
        let tensors: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
        let examples = vec![(vec![4u32, 5, 6, 0], 1usize), (vec![7u32, 7], 2usize)];
        let err = finite_diff_check(
            |t, ids| {
                let b = Binding::from_nodes(ids.to_vec());
                let mut r = SplitMix64::new(0);
                model.examples_loss(t, &b, &examples, 0.0, false, &mut r)
            },
            &tensors,
            eps,
        )?;
        items.push(GradCheckItem { name: "classifier_loss(full)".to_string(), max_error: err });
    }

    // Full translator loss at toy dimensions (d_model 8, N 1, h 2, l <= 5).
    {
        let vocab = Vocabulary::synthetic(6);
        let mut mrng = SplitMix64::new(43);
        let model = TranslatorModel::<f64>::new(
            TranslatorConfig {
                n_layers: 1,
                heads: 2,
                d_model: 8,
                d_ff: 16,
                dropout: 0.0,
                d_stream_s: 4,
                ..TranslatorConfig::default()
            },
            vocab.clone(),
            vocab,
            None,
            None,
            &mut mrng,
        )?;
        let tensors: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
        let src = [4u32, 5, 6, 0, 0];
        let tgt_in = [2u32, 6, 4, 0];
        let tgt_out = [6u32, 4, 3, 0];
        let err = finite_diff_check(
            |t, ids| {
                let b = Binding::from_nodes(ids.to_vec());
                let mut r = SplitMix64::new(0);
                let (loss, count) =
                    model.seq_loss(t, &b, &src, &tgt_in, &tgt_out, 0.1, false, &mut r)?;
                t.scale(loss, 1.0 / count as f64)
            },
            &tensors,
            eps,
        )?;
        items.push(GradCheckItem { name: "translator_loss(full)".to_string(), max_error: err });
    }

    Ok(GradCheckReport { items, threshold: 1e-4 })
}

// ── Parameter-report command ────────────────────────────────────────────

pub struct ParamReport {
    /// Formula value for the reference classifier (300/300/600/20).
    pub reference_classifier: usize,
    /// Formula vs live tally for the configured classifier.
    pub classifier_formula: usize,
    pub classifier_live: usize,
    /// Input projections per attention site of the configured translator.
    pub duo_sites: Vec<(String, usize)>,
    pub translator_formula: usize,
    pub translator_live: usize,
}

impl ParamReport {
    pub fn consistent(&self) -> bool {
        self.classifier_formula == self.classifier_live
            && self.translator_formula == self.translator_live
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "classifier 300/300/600/20: {} parameters, < 0.4M: {}\n",
            self.reference_classifier,
            if self.reference_classifier < 400_000 { "yes" } else { "NO" }
        ));
        out.push_str(&format!(
            "classifier (configured): formula {} vs live {} -> {}\n",
            self.classifier_formula,
            self.classifier_live,
            if self.classifier_formula == self.classifier_live { "match" } else { "MISMATCH" }
        ));
        for (name, count) in &self.duo_sites {
            out.push_str(&format!(
                "site {name}: input projections: {count} (vanilla 3, ratio {count}/3)\n"
            ));
        }
        out.push_str(&format!(
            "translator (configured): formula {} vs live {} -> {}\n",
            self.translator_formula,
            self.translator_live,
            if self.translator_formula == self.translator_live { "match" } else { "MISMATCH" }
        ));
        out
    }
}

pub fn cmd_param_report(cfg: &RunConfig) -> Result<ParamReport> {
    // Frozen-table classifier at the configured couple dimensions.
    let vocab = Vocabulary::synthetic(16);
    let mut rng = SplitMix64::new(cfg.seed);
    let s = EmbeddingTable::<f32>::learned(&vocab, cfg.d_model1, &mut rng);
    let p = EmbeddingTable::<f32>::learned(&vocab, cfg.d_model2, &mut rng);
    let pair = DuoEmbeddingPair::new(vocab.clone(), s, p)?;
    let model = DuoClassifierModel::new(
        pair,
        ClassifierConfig {
            d_model1: cfg.d_model1,
            d_model2: cfg.d_model2,
            d_ff: cfg.d_ff,
            label_num: cfg.label_num,
            pooling: PoolingMode::DuoSoftmax,
            dropout: cfg.dropout,
            train_table_s: false,
            train_table_p: false,
        },
        &mut rng,
    )?;

    let tcfg = {
        let mut t = translator_config(cfg)?;
        if t.d_stream_s == 0 {
            t.d_stream_s = t.d_model;
        }
        t.meta_embeddings = true;
        t
    };
    let translator =
        TranslatorModel::<f32>::new(tcfg.clone(), vocab.clone(), vocab.clone(), None, None, &mut rng)?;

    Ok(ParamReport {
        reference_classifier: count_classifier_params(300, 300, 600, 20),
        classifier_formula: count_classifier_params(
            cfg.d_model1,
            cfg.d_model2,
            cfg.d_ff,
            cfg.label_num,
        ),
        classifier_live: model.params.trainable_count(),
        duo_sites: translator.site_projection_counts(),
        translator_formula: closed_form_translator_params(&tcfg, vocab.len(), vocab.len()),
        translator_live: translator.params.trainable_count(),
    })
}

// ── Couple grid ─────────────────────────────────────────────────────────

pub struct GridResult {
    pub sources: Vec<String>,
    /// Upper-triangular mean validation accuracies, indexed [i][j - i].
    pub cells: Vec<Vec<f64>>,
    pub csv: String,
}

/// Train the classifier for every unordered couple (diagonal included) and
/// report mean validation accuracy over `cfg.runs` seeds per cell.
pub fn cmd_couple_grid(cfg: &RunConfig, sources: &[EmbeddingSource]) -> Result<GridResult> {
    if sources.len() < 2 {
        return Err(Error::invalid("couple grid needs at least two embedding sources".to_string()));
    }
    let data = build_classifier_data(cfg)?;
    let names: Vec<String> = sources.iter().map(|s| s.label()).collect();
    let mut cells = Vec::new();
    for i in 0..sources.len() {
        let mut row = Vec::new();
        for j in i..sources.len() {
            let mut total = 0.0;
            for r in 0..cfg.runs {
                let seed = cfg.seed.wrapping_add(r as u64);
                let mut model: DuoClassifierModel<f32> = build_classifier(
                    cfg,
                    &data.vocab,
                    data.labels.len(),
                    &sources[i],
                    &sources[j],
                    seed,
                )?;
                let settings = train_settings(cfg, seed, cfg.d_ff);
                train_loop(&mut model, &data.train, &data.val, &settings)?;
                total += model.evaluate(&data.val)?.metric();
            }
            row.push(total / cfg.runs as f64);
        }
        cells.push(row);
    }

    let mut csv = String::from("couple");
    for name in &names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (i, name) in names.iter().enumerate() {
        csv.push_str(name);
        for j in 0..names.len() {
            csv.push(',');
            if j >= i {
                csv.push_str(&sig6(cells[i][j - i]));
            }
        }
        csv.push('\n');
    }
    Ok(GridResult { sources: names, cells, csv })
}

// ── Ablation ladder ─────────────────────────────────────────────────────

pub struct AblationRung {
    pub rung: usize,
    pub features: String,
    pub params: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
}

pub struct AblationResult {
    pub rungs: Vec<AblationRung>,
    pub csv: String,
}

/// The cumulative feature ladder: each rung includes everything before it.
pub fn ablation_ladder() -> Vec<(&'static str, [bool; 4])> {
    // [meta_embeddings, kv_weight_sharing, duo_normalization, fusion_layer]
    vec![
        ("vanilla single-stream transformer, tied output", [false, false, false, false]),
        ("+ meta-embeddings (two streams, 6 input projections per site, untied output)", [true, false, false, false]),
        ("+ kv-weight-sharing (4 input projections per site)", [true, true, false, false]),
        ("+ duo-normalization (cross-stream decoder residual)", [true, true, true, false]),
        ("+ fusion-layer (output tied to fused embeddings)", [true, true, true, true]),
    ]
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationResult> {
    let data = build_translator_data(cfg)?;
    let mut rungs = Vec::new();
    for (idx, (features, toggles)) in ablation_ladder().into_iter().enumerate() {
        let mut rung_cfg = cfg.clone();
        rung_cfg.meta_embeddings = toggles[0];
        rung_cfg.kv_weight_sharing = toggles[1];
        rung_cfg.duo_normalization = toggles[2];
        rung_cfg.fusion_layer = toggles[3];
        let mut metrics = Vec::with_capacity(cfg.runs);
        let mut params = 0usize;
        for r in 0..cfg.runs {
            let seed = cfg.seed.wrapping_add(r as u64);
            let mut model: TranslatorModel<f32> =
                build_translator(&rung_cfg, &data.src_vocab, &data.tgt_vocab, seed)?;
            params = model.params.trainable_count();
            let settings = train_settings(&rung_cfg, seed, rung_cfg.d_model);
            train_loop(&mut model, &data.train, &data.val, &settings)?;
            metrics.push(model.evaluate(&data.val)?.metric());
        }
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        let var = metrics.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / metrics.len() as f64;
        rungs.push(AblationRung {
            rung: idx + 1,
            features: features.to_string(),
            params,
            metric_mean: mean,
            metric_std: var.sqrt(),
        });
    }
    let mut csv = String::from("rung,features,params,metric_mean,metric_std\n");
    for r in &rungs {
        csv.push_str(&format!(
            "{},\"{}\",{},{},{}\n",
            r.rung,
            r.features,
            r.params,
            sig6(r.metric_mean),
            sig6(r.metric_std)
        ));
    }
    Ok(AblationResult { rungs, csv })
}

// ── Convergence comparison ──────────────────────────────────────────────

pub struct ConvergenceResult {
    pub csv: String,
    pub duo_params: usize,
    pub vanilla_params: usize,
    pub duo_final_ppl: f64,
    pub vanilla_final_ppl: f64,
    /// Parameter counts matched within the requested tolerance.
    pub matched: bool,
}

impl ConvergenceResult {
    pub fn summary(&self) -> String {
        format!(
            "duo {} params vs vanilla {} params ({}), final perplexity {} vs {} -> {}",
            self.duo_params,
            self.vanilla_params,
            if self.matched { "matched +-5%" } else { "NOT matched" },
            sig6(self.duo_final_ppl),
            sig6(self.vanilla_final_ppl),
            if self.duo_final_ppl <= self.vanilla_final_ppl { "duo <= vanilla" } else { "WARN: duo > vanilla" },
        )
    }
}

/// Pick a vanilla configuration whose parameter count lands within
/// `tolerance` of the duo model's (d_model over multiples of the head
/// count, d_ff solved from the remainder).
pub fn matched_vanilla_config(
    duo: &TranslatorConfig,
    v_src: usize,
    v_tgt: usize,
    tolerance: f64,
) -> (TranslatorConfig, bool) {
    let target = closed_form_translator_params(duo, v_src, v_tgt) as f64;
    let mut best: Option<(f64, TranslatorConfig)> = None;
    for k in 1..=64 {
        let d = duo.heads * k;
        if !d.is_multiple_of(2) {
            continue;
        }
        let base_cfg = TranslatorConfig {
            meta_embeddings: false,
            d_model: d,
            d_ff: 0,
            ..duo.clone()
        };
        let base = closed_form_translator_params(&base_cfg, v_src, v_tgt) as f64;
        let coeff = (4 * duo.n_layers * d) as f64;
        if coeff == 0.0 {
            continue;
        }
        let dff_real = ((target - base) / coeff).max(1.0);
        for dff in [dff_real.floor() as usize, dff_real.ceil() as usize] {
            if dff == 0 {
                continue;
            }
            let cand = TranslatorConfig { d_ff: dff, ..base_cfg.clone() };
            let count = closed_form_translator_params(&cand, v_src, v_tgt) as f64;
            let diff = (count - target).abs();
            if best.as_ref().map(|(d0, _)| diff < *d0).unwrap_or(true) {
                best = Some((diff, cand));
            }
        }
    }
    let (diff, cfg) = best.expect("candidate search is non-empty");
    (cfg, diff / target <= tolerance)
}

/// Train the full duo model and a parameter-matched vanilla baseline under
/// identical budgets (no early stopping) and emit the epoch-indexed
/// validation BLEU/perplexity curves averaged over `runs` seeds.
pub fn run_convergence(cfg: &RunConfig, runs: usize) -> Result<ConvergenceResult> {
    let data = build_translator_data(cfg)?;
    let duo_cfg = {
        let mut t = translator_config(cfg)?;
        if t.d_stream_s == 0 {
            t.d_stream_s = t.d_model;
        }
        t.meta_embeddings = true;
        t.kv_weight_sharing = true;
        t.duo_normalization = true;
        t.fusion_layer = true;
        t
    };
    let (v_src, v_tgt) = (data.src_vocab.len(), data.tgt_vocab.len());
    let (vanilla_cfg, matched) = matched_vanilla_config(&duo_cfg, v_src, v_tgt, 0.05);

    let epochs = cfg.max_epochs;
    let mut curves: Vec<[f64; 4]> = vec![[0.0; 4]; epochs]; // duo bleu, duo ppl, van bleu, van ppl
    let mut finals = [0.0f64; 2];
    let mut live = [0usize; 2];
    for (slot, tcfg) in [(0usize, &duo_cfg), (1usize, &vanilla_cfg)] {
        for r in 0..runs {
            let seed = cfg.seed.wrapping_add(r as u64);
            let mut rng = SplitMix64::new(seed);
            let mut model = TranslatorModel::<f32>::new(
                tcfg.clone(),
                data.src_vocab.clone(),
                data.tgt_vocab.clone(),
                None,
                None,
                &mut rng,
            )?;
            live[slot] = model.params.trainable_count();
            let settings = TrainSettings {
                batch_size: cfg.batch_size,
                max_epochs: epochs,
                patience: epochs.max(1), // identical budgets: no early stop
                warmup: cfg.warmup,
                seed,
                label_smoothing: cfg.effective_smoothing(),
                lr_width: tcfg.d_model,
            };
            let outcome = train_loop(&mut model, &data.train, &data.val, &settings)?;
            for (e, rec) in outcome.history.records.iter().enumerate() {
                curves[e][slot * 2] += rec.val_metric;
                curves[e][slot * 2 + 1] += rec.val_perplexity.unwrap_or(f64::NAN);
            }
            if let Some(last) = outcome.history.records.last() {
                finals[slot] += last.val_perplexity.unwrap_or(f64::NAN);
            }
        }
    }
    let n = runs as f64;
    let mut csv = String::from("epoch,duo_bleu,duo_perplexity,vanilla_bleu,vanilla_perplexity\n");
    for (e, row) in curves.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e + 1,
            sig6(row[0] / n),
            sig6(row[1] / n),
            sig6(row[2] / n),
            sig6(row[3] / n)
        ));
    }
    Ok(ConvergenceResult {
        csv,
        duo_params: live[0],
        vanilla_params: live[1],
        duo_final_ppl: finals[0] / n,
        vanilla_final_ppl: finals[1] / n,
        matched,
    })
}

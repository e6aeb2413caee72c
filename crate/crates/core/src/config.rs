//! Line-based "key = value" run configuration with [model], [data],
//! [train] and [ablation] sections.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classify,
    Translate,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classify => write!(f, "classify"),
            TaskKind::Translate => write!(f, "translate"),
        }
    }
}

/// Where an embedding stream comes from: a pretrained text file or a
/// randomly initialized table of the given width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingSource {
    File(PathBuf),
    Learned(usize),
}

impl EmbeddingSource {
    /// "learned:16" or a file path.
    pub fn parse(spec: &str) -> Result<EmbeddingSource> {
        if let Some(rest) = spec.strip_prefix("learned:") {
            let dim: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("bad learned-embedding width '{rest}'")))?;
            if dim == 0 {
                return Err(Error::config("learned-embedding width must be >= 1"));
            }
            Ok(EmbeddingSource::Learned(dim))
        } else {
            Ok(EmbeddingSource::File(PathBuf::from(spec)))
        }
    }

    pub fn label(&self) -> String {
        match self {
            EmbeddingSource::File(p) => p.display().to_string(),
            EmbeddingSource::Learned(d) => format!("learned:{d}"),
        }
    }
}

/// Synthetic dataset request, in place of corpus files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyntheticSpec {
    /// copy | reverse | lexsub
    Parallel(String),
    /// keyword classification
    Keywords,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskKind,
    // [model]
    pub n_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_model1: usize,
    pub d_model2: usize,
    pub label_num: usize,
    pub use_softmax_pooling: bool,
    /// duo (default) | concat | average; the last two are the trivial
    /// meta-embedding baselines.
    pub pooling: String,
    pub dropout: f64,
    /// Task default when unset: 0.1 for translation, 0.0 for classification.
    pub label_smoothing: Option<f64>,
    // [data]
    pub corpus: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub embedding_s: Option<EmbeddingSource>,
    pub embedding_p: Option<EmbeddingSource>,
    pub synthetic: Option<SyntheticSpec>,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub min_freq: usize,
    // [train]
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup: u64,
    pub seed: u64,
    /// Seeded runs averaged per experiment cell.
    pub runs: usize,
    // [ablation]
    pub meta_embeddings: bool,
    pub kv_weight_sharing: bool,
    pub duo_normalization: bool,
    pub fusion_layer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Translate,
            n_layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            d_model1: 16,
            d_model2: 32,
            label_num: 4,
            use_softmax_pooling: true,
            pooling: "duo".to_string(),
            dropout: 0.1,
            label_smoothing: None,
            corpus: None,
            source: None,
            target: None,
            embedding_s: None,
            embedding_p: None,
            synthetic: Some(SyntheticSpec::Parallel("lexsub".to_string())),
            vocab_size: 40,
            min_len: 3,
            max_len: 8,
            train_count: 2000,
            val_count: 200,
            min_freq: 1,
            batch_size: 16,
            max_epochs: 30,
            patience: 10,
            warmup: 200,
            seed: 42,
            runs: 3,
            meta_embeddings: true,
            kv_weight_sharing: true,
            duo_normalization: true,
            fusion_layer: true,
        }
    }
}

impl RunConfig {
    pub fn effective_smoothing(&self) -> f64 {
        self.label_smoothing.unwrap_or(match self.task {
            TaskKind::Translate => 0.1,
            TaskKind::Classify => 0.0,
        })
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name {
                    "model" | "data" | "train" | "ablation" => section = name.to_string(),
                    other => {
                        return Err(Error::config_at(lineno, format!("unknown section [{other}]")))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config_at(lineno, format!("expected key = value, got '{line}'")));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config_at(line, format!("bad value '{value}' for {key}")))
        }
        fn flag(value: &str, key: &str, line: usize) -> Result<bool> {
            match value {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::config_at(line, format!("bad boolean '{value}' for {key}"))),
            }
        }
        match (section, key) {
            ("model", "n_layers") => self.n_layers = num(value, key, line)?,
            ("model", "heads") => self.heads = num(value, key, line)?,
            ("model", "d_model") => self.d_model = num(value, key, line)?,
            ("model", "d_ff") => self.d_ff = num(value, key, line)?,
            ("model", "d_model1") => self.d_model1 = num(value, key, line)?,
            ("model", "d_model2") => self.d_model2 = num(value, key, line)?,
            ("model", "label_num") => self.label_num = num(value, key, line)?,
            ("model", "use_softmax_pooling") => self.use_softmax_pooling = flag(value, key, line)?,
            ("model", "pooling") => match value {
                "duo" | "concat" | "average" => self.pooling = value.to_string(),
                _ => {
                    return Err(Error::config_at(
                        line,
                        format!("pooling must be duo|concat|average, got '{value}'"),
                    ))
                }
            },
            ("model", "dropout") => self.dropout = num(value, key, line)?,
            ("model", "label_smoothing") => self.label_smoothing = Some(num(value, key, line)?),
            ("data", "task") => {
                self.task = match value {
                    "classify" => TaskKind::Classify,
                    "translate" => TaskKind::Translate,
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("task must be classify or translate, got '{value}'"),
                        ))
                    }
                }
            }
            ("data", "corpus") => self.corpus = Some(PathBuf::from(value)),
            ("data", "source") => self.source = Some(PathBuf::from(value)),
            ("data", "target") => self.target = Some(PathBuf::from(value)),
            ("data", "embedding_s") => self.embedding_s = Some(EmbeddingSource::parse(value)?),
            ("data", "embedding_p") => self.embedding_p = Some(EmbeddingSource::parse(value)?),
            ("data", "synthetic") => {
                self.synthetic = Some(match value {
                    "keywords" => SyntheticSpec::Keywords,
                    "copy" | "reverse" | "lexsub" => SyntheticSpec::Parallel(value.to_string()),
                    _ => {
                        return Err(Error::config_at(
                            line,
                            format!("synthetic must be copy|reverse|lexsub|keywords, got '{value}'"),
                        ))
                    }
                })
            }
            ("data", "vocab_size") => self.vocab_size = num(value, key, line)?,
            ("data", "min_len") => self.min_len = num(value, key, line)?,
            ("data", "max_len") => self.max_len = num(value, key, line)?,
            ("data", "train_count") => self.train_count = num(value, key, line)?,
            ("data", "val_count") => self.val_count = num(value, key, line)?,
            ("data", "min_freq") => self.min_freq = num(value, key, line)?,
            ("train", "batch_size") => self.batch_size = num(value, key, line)?,
            ("train", "max_epochs") => self.max_epochs = num(value, key, line)?,
            ("train", "patience") => self.patience = num(value, key, line)?,
            ("train", "warmup") => self.warmup = num(value, key, line)?,
            ("train", "seed") => self.seed = num(value, key, line)?,
            ("train", "runs") => self.runs = num(value, key, line)?,
            ("ablation", "meta_embeddings") => self.meta_embeddings = flag(value, key, line)?,
            ("ablation", "kv_weight_sharing") => self.kv_weight_sharing = flag(value, key, line)?,
            ("ablation", "duo_normalization") => self.duo_normalization = flag(value, key, line)?,
            ("ablation", "fusion_layer") => self.fusion_layer = flag(value, key, line)?,
            _ => {
                return Err(Error::config_at(
                    line,
                    format!("unknown key '{key}' in section [{section}]"),
                ))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(ls) = self.label_smoothing {
            if !(0.0..1.0).contains(&ls) {
                return Err(Error::config(format!("label_smoothing {ls} outside [0, 1)")));
            }
        }
        match self.task {
            TaskKind::Classify => {
                let have_synth = matches!(self.synthetic, Some(SyntheticSpec::Keywords));
                if self.corpus.is_none() && !have_synth {
                    return Err(Error::config(
                        "classification needs [data] corpus = PATH or synthetic = keywords",
                    ));
                }
            }
            TaskKind::Translate => {
                let have_files = self.source.is_some() && self.target.is_some();
                let have_synth =
                    matches!(self.synthetic, Some(SyntheticSpec::Parallel(_)));
                if !have_files && !have_synth {
                    return Err(Error::config(
                        "translation needs [data] source/target paths or synthetic = copy|reverse|lexsub",
                    ));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    /// Echo of the effective configuration, config-file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[model]")?;
        writeln!(f, "n_layers = {}", self.n_layers)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "d_model = {}", self.d_model)?;
        writeln!(f, "d_ff = {}", self.d_ff)?;
        writeln!(f, "d_model1 = {}", self.d_model1)?;
        writeln!(f, "d_model2 = {}", self.d_model2)?;
        writeln!(f, "label_num = {}", self.label_num)?;
        writeln!(f, "use_softmax_pooling = {}", self.use_softmax_pooling)?;
        writeln!(f, "pooling = {}", self.pooling)?;
        writeln!(f, "dropout = {}", self.dropout)?;
        writeln!(f, "label_smoothing = {}", self.effective_smoothing())?;
        writeln!(f, "[data]")?;
        writeln!(f, "task = {}", self.task)?;
        if let Some(p) = &self.corpus {
            writeln!(f, "corpus = {}", p.display())?;
        }
        if let Some(p) = &self.source {
            writeln!(f, "source = {}", p.display())?;
        }
        if let Some(p) = &self.target {
            writeln!(f, "target = {}", p.display())?;
        }
        if let Some(e) = &self.embedding_s {
            writeln!(f, "embedding_s = {}", e.label())?;
        }
        if let Some(e) = &self.embedding_p {
            writeln!(f, "embedding_p = {}", e.label())?;
        }
        if let Some(s) = &self.synthetic {
            let name = match s {
                SyntheticSpec::Keywords => "keywords",
                SyntheticSpec::Parallel(t) => t,
            };
            writeln!(f, "synthetic = {name}")?;
            writeln!(f, "vocab_size = {}", self.vocab_size)?;
            writeln!(f, "min_len = {}", self.min_len)?;
            writeln!(f, "max_len = {}", self.max_len)?;
            writeln!(f, "train_count = {}", self.train_count)?;
            writeln!(f, "val_count = {}", self.val_count)?;
        }
        writeln!(f, "min_freq = {}", self.min_freq)?;
        writeln!(f, "[train]")?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "max_epochs = {}", self.max_epochs)?;
        writeln!(f, "patience = {}", self.patience)?;
        writeln!(f, "warmup = {}", self.warmup)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "runs = {}", self.runs)?;
        writeln!(f, "[ablation]")?;
        writeln!(f, "meta_embeddings = {}", self.meta_embeddings)?;
        writeln!(f, "kv_weight_sharing = {}", self.kv_weight_sharing)?;
        writeln!(f, "duo_normalization = {}", self.duo_normalization)?;
        writeln!(f, "fusion_layer = {}", self.fusion_layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.task, TaskKind::Translate);
        assert_eq!(cfg.seed, 42);
        assert!(cfg.meta_embeddings && cfg.fusion_layer);
    }

    #[test]
    fn values_sections_and_comments() {
        let cfg = RunConfig::parse_str(
            "# a comment\n[model]\nd_model = 64 # trailing comment\n\n[train]\nseed = 7\n[ablation]\nfusion_layer = off\n",
        )
        .unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.fusion_layer);
    }

    #[test]
    fn type_errors_name_the_line() {
        let err = RunConfig::parse_str("[model]\nd_model = abc\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_str("[model]\nnot_a_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        let err = RunConfig::parse_str("[nope]\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
    }

    #[test]
    fn missing_data_paths_are_config_errors() {
        let err = RunConfig::parse_str("[data]\ntask = classify\nsynthetic = lexsub\n");
        // lexsub is a parallel task; classify with it and no corpus fails.
        assert!(err.is_err());
        let ok = RunConfig::parse_str("[data]\ntask = classify\nsynthetic = keywords\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn embedding_source_forms() {
        assert_eq!(EmbeddingSource::parse("learned:16").unwrap(), EmbeddingSource::Learned(16));
        assert!(matches!(EmbeddingSource::parse("glove.txt").unwrap(), EmbeddingSource::File(_)));
        assert!(EmbeddingSource::parse("learned:x").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse_str("[model]\nd_model = 48\nheads = 6\n").unwrap();
        let echoed = cfg.to_string();
        let again = RunConfig::parse_str(&echoed).unwrap();
        assert_eq!(again.d_model, 48);
        assert_eq!(again.heads, 6);
    }
}

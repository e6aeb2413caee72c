use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::embeddings::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Lowercase, NFC-normalize, split on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.nfc().collect::<String>().to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// Tokenize and map through the vocabulary (unknown tokens become <unk>).
pub fn tokenize_and_numericalize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize(text).iter().map(|t| vocab.lookup(t)).collect()
}

/// In-memory dataset, one of the two task shapes.
#[derive(Debug, Clone)]
pub enum Dataset {
    /// (token ids, label id)
    Classify(Vec<(Vec<u32>, usize)>),
    /// (source ids, target ids)
    Parallel(Vec<(Vec<u32>, Vec<u32>)>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classify(v) => v.len(),
            Dataset::Parallel(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seeded shuffle split holding out `fraction` for validation.
    pub fn split_validation(self, fraction: f64, rng: &mut SplitMix64) -> (Dataset, Dataset) {
        fn split<T>(mut items: Vec<T>, fraction: f64, rng: &mut SplitMix64) -> (Vec<T>, Vec<T>) {
            rng.shuffle(&mut items);
            let n_val = ((items.len() as f64 * fraction).round() as usize)
                .clamp(1, items.len().saturating_sub(1).max(1));
            let train = items.split_off(n_val);
            (train, items)
        }
        match self {
            Dataset::Classify(v) => {
                let (t, va) = split(v, fraction, rng);
                (Dataset::Classify(t), Dataset::Classify(va))
            }
            Dataset::Parallel(v) => {
                let (t, va) = split(v, fraction, rng);
                (Dataset::Parallel(t), Dataset::Parallel(va))
            }
        }
    }
}

/// One padded batch. Classification fills `labels`; sequence-to-sequence
/// fills the BOS-shifted `target_in` and EOS-terminated `target_out`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Vec<Vec<u32>>,
    pub labels: Option<Vec<usize>>,
    pub target_in: Option<Vec<Vec<u32>>>,
    pub target_out: Option<Vec<Vec<u32>>>,
}

fn pad_to(ids: &[u32], len: usize) -> Vec<u32> {
    let mut row = ids.to_vec();
    row.resize(len, PAD);
    row
}

/// Deterministically shuffled, padded batches.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut SplitMix64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1".to_string()));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset".to_string()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        match dataset {
            Dataset::Classify(items) => {
                let rows: Vec<&(Vec<u32>, usize)> = chunk.iter().map(|&i| &items[i]).collect();
                if rows.iter().any(|(ids, _)| ids.is_empty()) {
                    return Err(Error::invalid("empty sequence in dataset".to_string()));
                }
                let max_len = rows.iter().map(|(ids, _)| ids.len()).max().unwrap();
                batches.push(Batch {
                    input: rows.iter().map(|(ids, _)| pad_to(ids, max_len)).collect(),
                    labels: Some(rows.iter().map(|(_, l)| *l).collect()),
                    target_in: None,
                    target_out: None,
                });
            }
            Dataset::Parallel(items) => {
                let rows: Vec<&(Vec<u32>, Vec<u32>)> = chunk.iter().map(|&i| &items[i]).collect();
                if rows.iter().any(|(s, t)| s.is_empty() || t.is_empty()) {
                    return Err(Error::invalid("empty sequence in dataset".to_string()));
                }
                let max_src = rows.iter().map(|(s, _)| s.len()).max().unwrap();
                let max_tgt = rows.iter().map(|(_, t)| t.len()).max().unwrap() + 1;
                let mut target_in = Vec::with_capacity(rows.len());
                let mut target_out = Vec::with_capacity(rows.len());
                for (_, tgt) in &rows {
                    let mut tin = Vec::with_capacity(max_tgt);
                    tin.push(BOS);
                    tin.extend_from_slice(tgt);
                    tin.resize(max_tgt, PAD);
                    let mut tout = tgt.to_vec();
                    tout.push(EOS);
                    tout.resize(max_tgt, PAD);
                    target_in.push(tin);
                    target_out.push(tout);
                }
                batches.push(Batch {
                    input: rows.iter().map(|(s, _)| pad_to(s, max_src)).collect(),
                    labels: None,
                    target_in: Some(target_in),
                    target_out: Some(target_out),
                });
            }
        }
    }
    Ok(batches)
}

/// Rows of (label id, raw text) plus the label names in first-seen order.
pub type LabeledCorpus = (Vec<(usize, String)>, Vec<String>);

/// Classifier corpus: UTF-8 TSV, one "label<TAB>text" per line. Labels map
/// to ids in first-seen order.
pub fn read_classifier_tsv(path: &Path) -> Result<LabeledCorpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::parse_at(idx + 1, "expected label<TAB>text".to_string()));
        };
        let label_id = match labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                labels.push(label.to_string());
                labels.len() - 1
            }
        };
        rows.push((label_id, text.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("no examples in {}", path.display())));
    }
    Ok((rows, labels))
}

/// Parallel corpus: two aligned files, one sentence per line.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let src_lines: Vec<String> =
        BufReader::new(File::open(src)?).lines().collect::<std::io::Result<_>>()?;
    let tgt_lines: Vec<String> =
        BufReader::new(File::open(tgt)?).lines().collect::<std::io::Result<_>>()?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::invalid(format!(
            "parallel corpus length mismatch: {} vs {} lines",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    Ok(src_lines.into_iter().zip(tgt_lines).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_collapses_whitespace() {
        let vocab = Vocabulary::build("a b".split_whitespace(), 1).unwrap();
        assert_eq!(tokenize_and_numericalize("A a", &vocab), vec![4, 4]);
        assert_eq!(tokenize_and_numericalize("zzz", &vocab), vec![1]);
        assert_eq!(tokenize_and_numericalize("a  b", &vocab), vec![4, 5]);
        assert_eq!(tokenize_and_numericalize("", &vocab), Vec::<u32>::new());
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = Dataset::Classify(vec![
            (vec![4], 0),
            (vec![5, 6], 1),
            (vec![7], 0),
        ]);
        let batches = make_batches(&ds, 2, &mut SplitMix64::new(1), false).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].input.len(), 2);
        assert_eq!(batches[1].input.len(), 1);
        // No shuffle keeps the original order.
        assert_eq!(batches[0].input[0], vec![4, PAD]);

        let a = make_batches(&ds, 2, &mut SplitMix64::new(9), true).unwrap();
        let b = make_batches(&ds, 2, &mut SplitMix64::new(9), true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input, y.input);
        }
    }

    #[test]
    fn seq2seq_targets_are_framed() {
        let ds = Dataset::Parallel(vec![(vec![4, 5], vec![6, 7]), (vec![8], vec![9])]);
        let batches = make_batches(&ds, 2, &mut SplitMix64::new(1), false).unwrap();
        let b = &batches[0];
        assert_eq!(b.target_in.as_ref().unwrap()[0], vec![BOS, 6, 7]);
        assert_eq!(b.target_out.as_ref().unwrap()[0], vec![6, 7, EOS]);
        assert_eq!(b.target_in.as_ref().unwrap()[1], vec![BOS, 9, PAD]);
        assert_eq!(b.target_out.as_ref().unwrap()[1], vec![9, EOS, PAD]);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(make_batches(&Dataset::Classify(vec![]), 2, &mut SplitMix64::new(1), false).is_err());
    }

    #[test]
    fn tsv_labels_map_in_first_seen_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "sport\tthe match was long\nworld\tnews from abroad\nsport\tanother game\n").unwrap();
        let (rows, labels) = read_classifier_tsv(&path).unwrap();
        assert_eq!(labels, vec!["sport".to_string(), "world".to_string()]);
        assert_eq!(rows[0].0, 0);
        assert_eq!(rows[1].0, 1);
        assert_eq!(rows[2].0, 0);

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "no tab here\n").unwrap();
        let err = read_classifier_tsv(&bad).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn parallel_files_must_align() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.txt");
        let tgt = dir.path().join("tgt.txt");
        std::fs::write(&src, "a b\nc d\n").unwrap();
        std::fs::write(&tgt, "x y\nz w\n").unwrap();
        let rows = read_parallel(&src, &tgt).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], ("c d".to_string(), "z w".to_string()));

        std::fs::write(&tgt, "only one line\n").unwrap();
        assert!(read_parallel(&src, &tgt).is_err());
    }

    #[test]
    fn validation_split_is_seeded() {
        let items: Vec<(Vec<u32>, usize)> = (0..50).map(|i| (vec![4 + i], 0usize)).collect();
        let (t1, v1) =
            Dataset::Classify(items.clone()).split_validation(0.1, &mut SplitMix64::new(5));
        let (t2, v2) = Dataset::Classify(items).split_validation(0.1, &mut SplitMix64::new(5));
        assert_eq!(v1.len(), 5);
        assert_eq!(t1.len(), 45);
        match (&v1, &v2, &t1, &t2) {
            (Dataset::Classify(a), Dataset::Classify(b), Dataset::Classify(c), Dataset::Classify(d)) => {
                assert_eq!(a, b);
                assert_eq!(c, d);
            }
            _ => unreachable!(),
        }
    }
}

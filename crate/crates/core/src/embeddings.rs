//! Pretrained embedding text files, vocabularies, and the paired
//! embedding streams the models consume.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token <-> id bijection with four reserved ids: 0=<pad>, 1=<unk>,
/// 2=<bos>, 3=<eos>. Unknown tokens map to <unk>.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from token sequences: tokens with frequency >= `min_freq`,
    /// ordered by (frequency desc, first appearance asc) after the
    /// reserved ids. The ordering makes id assignment deterministic.
    pub fn build<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>, min_freq: usize) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::invalid("min_freq must be >= 1".to_string()));
        }
        let mut freq: HashMap<String, (usize, usize)> = HashMap::new(); // token -> (count, first index)
        let mut seen = 0usize;
        for (order, tok) in corpus.into_iter().enumerate() {
            let tok = tok.as_ref();
            let entry = freq.entry(tok.to_string()).or_insert((0, order));
            entry.0 += 1;
            seen += 1;
        }
        if seen == 0 {
            return Err(Error::invalid("empty corpus".to_string()));
        }
        let mut entries: Vec<(String, usize, usize)> =
            freq.into_iter().filter(|(_, (c, _))| *c >= min_freq).map(|(t, (c, f))| (t, c, f)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.into_iter().map(|(t, _, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    /// Vocabulary of `n` synthetic content tokens "w4".."w{n+3}".
    pub fn synthetic(content_tokens: usize) -> Self {
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend((0..content_tokens).map(|i| format!("w{}", i + 4)));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(|s| s.as_str())
    }

    pub fn is_reserved(id: u32) -> bool {
        id < 4
    }
}

/// Raw token -> vector map parsed from a text embedding file.
#[derive(Debug)]
pub struct RawEmbeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    /// Later occurrences of an already-seen token (first one wins).
    pub duplicates: usize,
}

/// Parse a text embedding stream. Two layouts are accepted:
/// (a) bare GloVe: every line is "token v1 v2 ... vd";
/// (b) word2vec text: a "count dim" header line, then bare lines.
/// The dimension comes from the header or the first data line and is
/// enforced for the rest of the file.
pub fn parse_embedding_text<R: BufRead>(reader: R, expected_dim: Option<usize>) -> Result<RawEmbeddings> {
    let mut dim: Option<usize> = expected_dim;
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut duplicates = 0usize;
    let mut first_data_seen = false;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();

        // word2vec layout: first non-empty line with exactly two integer fields.
        if !first_data_seen && fields.len() == 2 {
            if let (Ok(_count), Ok(header_dim)) =
                (fields[0].parse::<usize>(), fields[1].parse::<usize>())
            {
                if let Some(d) = dim {
                    if d != header_dim {
                        return Err(Error::parse_at(
                            lineno,
                            format!("header dimension {header_dim} does not match expected {d}"),
                        ));
                    }
                }
                dim = Some(header_dim);
                first_data_seen = true;
                continue;
            }
        }
        first_data_seen = true;

        if fields.len() < 2 {
            return Err(Error::parse_at(lineno, "expected a token and at least one value".to_string()));
        }
        let token = fields[0];
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|v| {
                f64::parse_text(v)
                    .ok_or_else(|| Error::parse_at(lineno, format!("non-numeric field '{v}'")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse_at(
                    lineno,
                    format!("vector length {} does not match dimension {d}", values.len()),
                ));
            }
            _ => {}
        }
        if vectors.contains_key(token) {
            duplicates += 1;
        } else {
            vectors.insert(token.to_string(), values);
        }
    }

    match dim {
        Some(d) if !vectors.is_empty() => Ok(RawEmbeddings { dim: d, vectors, duplicates }),
        _ => Err(Error::parse_at(1, "empty embedding file".to_string())),
    }
}

/// Write the bare GloVe text layout: one "token v1 .. vd" line per
/// non-reserved vocabulary entry, single spaces, LF line ends. Values use
/// the shortest decimal representation, so a write/parse round trip is
/// exact at the table's precision.
pub fn write_glove_text<F: Real, W: Write>(
    table: &EmbeddingTable<F>,
    vocab: &Vocabulary,
    mut w: W,
) -> Result<()> {
    for id in 4..vocab.len() as u32 {
        let row = table.matrix.row_slice(id as usize);
        let mut line = String::from(vocab.token(id));
        for v in row {
            line.push(' ');
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// A vocabulary-aligned embedding matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F> {
    pub dim: usize,
    pub matrix: Tensor<F>,
    pub source: String,
    /// Fraction of non-reserved vocabulary found in the source file
    /// (1.0 for learned tables).
    pub coverage: f64,
}

impl<F: Real> EmbeddingTable<F> {
    /// Align a parsed raw map to a vocabulary: rows are copied for tokens
    /// present in the file; <unk> becomes the mean of all loaded vectors;
    /// in-vocabulary tokens missing from the file get the <unk> row plus
    /// small noise (sigma = 0.01); the <pad> row stays zero.
    pub fn from_raw(
        raw: &RawEmbeddings,
        vocab: &Vocabulary,
        expected_dim: Option<usize>,
        source: impl Into<String>,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let dim = raw.dim;
        if let Some(d) = expected_dim {
            if d != dim {
                return Err(Error::dim(format!("embedding file dimension {dim}, expected {d}")));
            }
        }
        let mut mean = vec![0.0f64; dim];
        if !raw.vectors.is_empty() {
            for v in raw.vectors.values() {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            let n = raw.vectors.len() as f64;
            for m in mean.iter_mut() {
                *m /= n;
            }
        }

        let v = vocab.len();
        let mut matrix = Tensor::<F>::zeros(vec![v, dim]);
        let mut found = 0usize;
        for id in 1..v as u32 {
            let token = vocab.token(id);
            let row: Vec<f64> = if id == UNK {
                mean.clone()
            } else if let Some(vecf) = raw.vectors.get(token) {
                if !Vocabulary::is_reserved(id) {
                    found += 1;
                }
                vecf.clone()
            } else {
                mean.iter().map(|&m| m + rng.next_gaussian() * 0.01).collect()
            };
            for (j, x) in row.iter().enumerate() {
                matrix.set2(id as usize, j, F::of(*x));
            }
        }
        let non_reserved = v.saturating_sub(4);
        let coverage = if non_reserved == 0 { 0.0 } else { found as f64 / non_reserved as f64 };
        Ok(EmbeddingTable { dim, matrix, source: source.into(), coverage })
    }

    /// Randomly initialized table for a stream learned from scratch.
    /// The <pad> row is zeroed.
    pub fn learned(vocab: &Vocabulary, dim: usize, rng: &mut SplitMix64) -> Self {
        let mut matrix = Tensor::<F>::xavier(vocab.len(), dim, rng);
        for j in 0..dim {
            matrix.set2(PAD as usize, j, F::zero());
        }
        EmbeddingTable { dim, matrix, source: format!("learned:{dim}"), coverage: 1.0 }
    }
}

/// The paired embedding streams: table S of width d1 and table P of width
/// d2, both aligned to one shared vocabulary.
#[derive(Debug, Clone)]
pub struct DuoEmbeddingPair<F> {
    pub vocab: Vocabulary,
    pub s: EmbeddingTable<F>,
    pub p: EmbeddingTable<F>,
}

impl<F: Real> DuoEmbeddingPair<F> {
    pub fn new(vocab: Vocabulary, s: EmbeddingTable<F>, p: EmbeddingTable<F>) -> Result<Self> {
        if s.matrix.rows() != vocab.len() || p.matrix.rows() != vocab.len() {
            return Err(Error::dim(format!(
                "tables with {} / {} rows for a vocabulary of {}",
                s.matrix.rows(),
                p.matrix.rows(),
                vocab.len()
            )));
        }
        Ok(DuoEmbeddingPair { vocab, s, p })
    }
}

/// Look a token-id sequence up in both streams of a bound pair:
/// row t of each output is the table row for token t.
pub fn embed_sequence_duo<F: Real>(
    tape: &mut Tape<F>,
    table_s: NodeId,
    table_p: NodeId,
    ids: &[u32],
) -> Result<(NodeId, NodeId)> {
    let s = tape.gather_rows(table_s, ids)?;
    let p = tape.gather_rows(table_p, ids)?;
    Ok((s, p))
}

/// Dimension-fixing linear map for a pretrained stream feeding a model of a
/// different width. A bare projection with no nonlinearity.
pub fn project_stream<F: Real>(tape: &mut Tape<F>, x: NodeId, w: NodeId) -> Result<NodeId> {
    tape.matmul(x, w)
}

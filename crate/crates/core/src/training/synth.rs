//! Seeded synthetic datasets: exactly-solvable parallel tasks standing in
//! for large translation corpora, and a keyword classification task.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// target = source
    Copy,
    /// target = reversed source
    Reverse,
    /// target[i] = pi(source[i]) for a fixed random bijection pi
    Lexsub,
}

impl SynthTask {
    pub fn parse(s: &str) -> Option<SynthTask> {
        match s {
            "copy" => Some(SynthTask::Copy),
            "reverse" => Some(SynthTask::Reverse),
            "lexsub" => Some(SynthTask::Lexsub),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticParallel {
    pub train: Vec<(Vec<u32>, Vec<u32>)>,
    pub val: Vec<(Vec<u32>, Vec<u32>)>,
    /// Token bijection for the lexsub task, indexed by source id.
    pub permutation: Option<Vec<u32>>,
}

/// Fixed random bijection over the content ids (reserved ids map to
/// themselves).
pub fn lexsub_permutation(vocab_size: usize, rng: &mut SplitMix64) -> Vec<u32> {
    let mut content: Vec<u32> = (4..vocab_size as u32).collect();
    rng.shuffle(&mut content);
    let mut pi: Vec<u32> = (0..4).collect();
    pi.extend(content);
    pi
}

/// Generate a parallel dataset with train/validation source sequences
/// disjoint by construction. `vocab_size` includes the 4 reserved ids.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic_parallel(
    task: SynthTask,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    train_count: usize,
    val_count: usize,
    rng: &mut SplitMix64,
) -> Result<SyntheticParallel> {
    if vocab_size < 5 {
        return Err(Error::invalid(format!("vocab_size {vocab_size} leaves no content tokens")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!("bad length range {min_len}..{max_len}")));
    }
    let content = (vocab_size - 4) as f64;
    let space: f64 = (min_len..=max_len).map(|l| content.powi(l as i32)).sum();
    let needed = train_count + val_count;
    if (needed as f64) > space {
        return Err(Error::invalid(format!(
            "{needed} distinct sources requested from a space of {space:.0} sequences"
        )));
    }

    let pi = match task {
        SynthTask::Lexsub => Some(lexsub_permutation(vocab_size, rng)),
        _ => None,
    };

    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(needed);
    let mut sources = Vec::with_capacity(needed);
    while sources.len() < needed {
        let len = min_len + rng.below(max_len - min_len + 1);
        let seq: Vec<u32> = (0..len).map(|_| 4 + rng.below(vocab_size - 4) as u32).collect();
        if seen.insert(seq.clone()) {
            sources.push(seq);
        }
    }

    let translate = |src: &[u32]| -> Vec<u32> {
        match task {
            SynthTask::Copy => src.to_vec(),
            SynthTask::Reverse => src.iter().rev().copied().collect(),
            SynthTask::Lexsub => {
                let pi = pi.as_ref().expect("lexsub permutation");
                src.iter().map(|&t| pi[t as usize]).collect()
            }
        }
    };

    let pairs: Vec<(Vec<u32>, Vec<u32>)> = sources
        .into_iter()
        .map(|s| {
            let t = translate(&s);
            (s, t)
        })
        .collect();
    let val = pairs[train_count..].to_vec();
    let train = pairs[..train_count].to_vec();
    Ok(SyntheticParallel { train, val, permutation: pi })
}

#[derive(Debug, Clone)]
pub struct SyntheticClassify {
    pub train: Vec<(Vec<u32>, usize)>,
    pub val: Vec<(Vec<u32>, usize)>,
    pub num_classes: usize,
}

/// Keyword classification: class c's keyword token (id 4+c) appears exactly
/// once per example among filler tokens; the label is the keyword's class.
/// Classes are balanced round-robin in both splits.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic_keywords(
    num_classes: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    train_count: usize,
    val_count: usize,
    rng: &mut SplitMix64,
) -> Result<SyntheticClassify> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least two classes".to_string()));
    }
    if vocab_size < 4 + num_classes + 2 {
        return Err(Error::invalid(format!(
            "vocab_size {vocab_size} too small for {num_classes} keywords plus filler"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!("bad length range {min_len}..{max_len}")));
    }
    let filler_lo = 4 + num_classes as u32;
    let filler_n = vocab_size as u32 - filler_lo;
    let gen = |count: usize, rng: &mut SplitMix64| -> Vec<(Vec<u32>, usize)> {
        (0..count)
            .map(|i| {
                let class = i % num_classes;
                let len = min_len + rng.below(max_len - min_len + 1);
                let mut seq: Vec<u32> =
                    (0..len).map(|_| filler_lo + rng.below(filler_n as usize) as u32).collect();
                let pos = rng.below(len);
                seq[pos] = 4 + class as u32;
                (seq, class)
            })
            .collect()
    };
    Ok(SyntheticClassify {
        train: gen(train_count, rng),
        val: gen(val_count, rng),
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_and_reverse_targets() {
        let mut rng = SplitMix64::new(1);
        let d = gen_synthetic_parallel(SynthTask::Copy, 10, 3, 5, 20, 5, &mut rng).unwrap();
        for (s, t) in d.train.iter().chain(&d.val) {
            assert_eq!(s, t);
        }
        let mut rng = SplitMix64::new(1);
        let d = gen_synthetic_parallel(SynthTask::Reverse, 10, 3, 5, 20, 5, &mut rng).unwrap();
        for (s, t) in d.train.iter().chain(&d.val) {
            let rev: Vec<u32> = s.iter().rev().copied().collect();
            assert_eq!(t, &rev);
        }
    }

    #[test]
    fn lexsub_applies_one_consistent_bijection() {
        let mut rng = SplitMix64::new(2);
        let d = gen_synthetic_parallel(SynthTask::Lexsub, 12, 2, 6, 50, 10, &mut rng).unwrap();
        let pi = d.permutation.unwrap();
        // Bijection over content ids.
        let mut seen: Vec<u32> = pi[4..].to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (4..12).collect::<Vec<u32>>());
        for (s, t) in d.train.iter().chain(&d.val) {
            for (a, b) in s.iter().zip(t) {
                assert_eq!(pi[*a as usize], *b);
            }
        }
    }

    #[test]
    fn splits_have_disjoint_sources() {
        let mut rng = SplitMix64::new(3);
        let d = gen_synthetic_parallel(SynthTask::Copy, 8, 2, 4, 40, 20, &mut rng).unwrap();
        let train: HashSet<_> = d.train.iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(train.len(), 40);
        for (s, _) in &d.val {
            assert!(!train.contains(s));
        }
    }

    #[test]
    fn impossible_disjointness_is_an_error() {
        let mut rng = SplitMix64::new(4);
        // 2 content tokens, lengths 1..1: only 2 distinct sources exist.
        assert!(gen_synthetic_parallel(SynthTask::Copy, 6, 1, 1, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn keywords_are_present_and_balanced() {
        let mut rng = SplitMix64::new(5);
        let d = gen_synthetic_keywords(4, 40, 5, 10, 40, 12, &mut rng).unwrap();
        let mut class_counts = [0usize; 4];
        for (seq, label) in &d.train {
            class_counts[*label] += 1;
            let keyword = 4 + *label as u32;
            assert_eq!(seq.iter().filter(|&&t| t == keyword).count(), 1);
            // No other class keyword appears.
            for c in 0..4u32 {
                if c as usize != *label {
                    assert!(!seq.contains(&(4 + c)));
                }
            }
        }
        assert_eq!(class_counts, [10, 10, 10, 10]);
    }
}

//! Corpus-level BLEU with modified n-gram precision and brevity penalty.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("BLEU requires at least one candidate/reference pair")]
    EmptyCorpus,
    #[error("pair {index} has no references")]
    NoReferences { index: usize },
}

/// One generated caption with its reference set.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Corpus BLEU scores at orders 1..=4, serialized as the score report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BleuReport {
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B3")]
    pub b3: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    pub pairs: usize,
}

impl BleuReport {
    pub fn score(&self, n: usize) -> f64 {
        match n {
            1 => self.b1,
            2 => self.b2,
            3 => self.b3,
            4 => self.b4,
            _ => panic!("BLEU order {n} out of range"),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Effective reference length: the reference length closest to the candidate
/// length, ties resolved toward the shorter reference.
fn closest_reference_length(candidate_len: usize, references: &[Vec<String>]) -> usize {
    let mut best_len = references[0].len();
    let mut best_dist = usize::MAX;
    let mut lens: Vec<usize> = references.iter().map(|r| r.len()).collect();
    lens.sort_unstable();
    for len in lens {
        let dist = len.abs_diff(candidate_len);
        if dist < best_dist {
            best_dist = dist;
            best_len = len;
        }
    }
    best_len
}

/// Corpus-level BLEU@1..4. Per-pair n-gram matches are clipped at the maximum
/// reference count; precisions are pooled over the corpus before the
/// geometric mean. A zero precision at any order k zeroes B@n for n ≥ k.
pub fn bleu(pairs: &[EvalPair]) -> Result<BleuReport, MetricsError> {
    bleu_up_to(pairs, 4)
}

pub fn bleu_up_to(pairs: &[EvalPair], max_n: usize) -> Result<BleuReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    for (index, pair) in pairs.iter().enumerate() {
        if pair.references.is_empty() {
            return Err(MetricsError::NoReferences { index });
        }
    }
    let max_n = max_n.clamp(1, 4);
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut candidate_len_sum = 0usize;
    let mut reference_len_sum = 0usize;
    for pair in pairs {
        candidate_len_sum += pair.candidate.len();
        reference_len_sum += closest_reference_length(pair.candidate.len(), &pair.references);
        for n in 1..=max_n {
            let cand = ngram_counts(&pair.candidate, n);
            if cand.is_empty() {
                continue;
            }
            let ref_counts: Vec<HashMap<&[String], usize>> = pair
                .references
                .iter()
                .map(|r| ngram_counts(r, n))
                .collect();
            for (gram, count) in &cand {
                let clip = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += count.min(&clip);
                total[n - 1] += count;
            }
        }
    }
    let brevity_penalty = if candidate_len_sum == 0 {
        0.0
    } else if candidate_len_sum < reference_len_sum {
        (1.0 - reference_len_sum as f64 / candidate_len_sum as f64).exp()
    } else {
        1.0
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|k| {
            if total[k] == 0 {
                0.0
            } else {
                matched[k] as f64 / total[k] as f64
            }
        })
        .collect();
    let mut scores = [0.0; 4];
    for n in 1..=max_n {
        if precisions[..n].contains(&0.0) {
            scores[n - 1] = 0.0;
        } else {
            let mean_log: f64 = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            scores[n - 1] = brevity_penalty * mean_log.exp();
        }
    }
    Ok(BleuReport {
        b1: scores[0],
        b2: scores[1],
        b3: scores[2],
        b4: scores[3],
        pairs: pairs.len(),
    })
}

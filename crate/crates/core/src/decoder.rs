//! Beam-search caption generation with pluggable length normalization, and an
//! exhaustive-search oracle for correctness testing at tiny scale.
//!
//! The beam pool is pruned by cumulative log-likelihood; normalization is
//! applied only when the final caption is selected from the finished pool
//! (a config flag flips pruning to normalized scores for experimentation).
//! Hypotheses that reach `max_length` words without generating END are
//! force-finished and compete in the final pool; the oracle enumerates the
//! same candidate set, so full-width beam search and the oracle agree
//! exactly under every normalization.

use thiserror::Error;

use crate::captioner::{CaptionModel, DecodeState, ModelError};
use crate::numkit::Vector;
use crate::textcorpus::{Corpus, Split};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("length-normalization parameter {what} must be positive, got {value}")]
    BadNormParameter { what: &'static str, value: f64 },
    #[error("decode config invalid: {detail}")]
    BadConfig { detail: String },
    #[error("exhaustive search guard exceeded: K^max_length ≈ {estimate:.3e} > 1e6")]
    GuardExceeded { estimate: f64 },
    #[error("empty training split: length statistics undefined")]
    EmptyCorpus,
}

pub type DecodeResult<T> = Result<T, DecodeError>;

/// A partial or finished caption: word indices (END is never stored), the
/// cumulative log-likelihood of everything generated so far (including the
/// END step when one was generated), and whether the hypothesis is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_likelihood: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Word count, END excluded.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The length-normalization divisor Ω(ℓ).
#[derive(Debug, Clone, PartialEq)]
pub enum LengthNorm {
    None,
    Polynomial { m: f64 },
    MinHinge { mu: f64 },
    MaxHinge { mu: f64 },
    Gaussian { mu: f64, sigma: f64 },
}

impl LengthNorm {
    /// Polynomial with the standard exponent m = 1, which makes the
    /// normalized score the per-word perplexity exponent.
    pub fn polynomial() -> LengthNorm {
        LengthNorm::Polynomial { m: 1.0 }
    }

    pub fn min_hinge(mu: f64) -> DecodeResult<LengthNorm> {
        if mu <= 0.0 {
            return Err(DecodeError::BadNormParameter {
                what: "mu",
                value: mu,
            });
        }
        Ok(LengthNorm::MinHinge { mu })
    }

    pub fn max_hinge(mu: f64) -> DecodeResult<LengthNorm> {
        if mu <= 0.0 {
            return Err(DecodeError::BadNormParameter {
                what: "mu",
                value: mu,
            });
        }
        Ok(LengthNorm::MaxHinge { mu })
    }

    pub fn gaussian(mu: f64, sigma: f64) -> DecodeResult<LengthNorm> {
        if mu <= 0.0 {
            return Err(DecodeError::BadNormParameter {
                what: "mu",
                value: mu,
            });
        }
        if sigma <= 0.0 {
            return Err(DecodeError::BadNormParameter {
                what: "sigma",
                value: sigma,
            });
        }
        Ok(LengthNorm::Gaussian { mu, sigma })
    }

    pub fn validate(&self) -> DecodeResult<()> {
        match *self {
            LengthNorm::None | LengthNorm::Polynomial { .. } => Ok(()),
            LengthNorm::MinHinge { mu } | LengthNorm::MaxHinge { mu } => {
                if mu <= 0.0 {
                    Err(DecodeError::BadNormParameter {
                        what: "mu",
                        value: mu,
                    })
                } else {
                    Ok(())
                }
            }
            LengthNorm::Gaussian { mu, sigma } => {
                if mu <= 0.0 {
                    Err(DecodeError::BadNormParameter {
                        what: "mu",
                        value: mu,
                    })
                } else if sigma <= 0.0 {
                    Err(DecodeError::BadNormParameter {
                        what: "sigma",
                        value: sigma,
                    })
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Ω(len): none → 1, polynomial → lenᵐ, min-hinge → min(len, μ),
/// max-hinge → max(len, μ), gaussian → exp(−(len−μ)²/(2σ²)) (the density's
/// constant factor cannot change an argmax, so it is dropped).
pub fn omega(norm: &LengthNorm, len: usize) -> f64 {
    debug_assert!(len >= 1);
    let l = len as f64;
    match *norm {
        LengthNorm::None => 1.0,
        LengthNorm::Polynomial { m } => l.powf(m),
        LengthNorm::MinHinge { mu } => l.min(mu),
        LengthNorm::MaxHinge { mu } => l.max(mu),
        LengthNorm::Gaussian { mu, sigma } => (-(l - mu) * (l - mu) / (2.0 * sigma * sigma)).exp(),
    }
}

/// Cumulative log-likelihood divided by Ω of the word count; a bare END
/// (zero words) uses Ω(1).
pub fn normalized_score(norm: &LengthNorm, hyp: &BeamHypothesis) -> f64 {
    hyp.log_likelihood / omega(norm, hyp.len().max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_length: usize,
    pub norm: LengthNorm,
    pub forbid_unk: bool,
    /// Prune the pool by normalized score instead of raw log-likelihood.
    pub normalize_during_pruning: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 10,
            max_length: 30,
            norm: LengthNorm::None,
            forbid_unk: true,
            normalize_during_pruning: false,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> DecodeResult<()> {
        if self.beam_width == 0 {
            return Err(DecodeError::BadConfig {
                detail: "beam_width must be at least 1".into(),
            });
        }
        if self.max_length == 0 {
            return Err(DecodeError::BadConfig {
                detail: "max_length must be at least 1".into(),
            });
        }
        self.norm.validate()
    }
}

/// A finished hypothesis with its normalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHypothesis {
    pub hypothesis: BeamHypothesis,
    pub score: f64,
}

/// The decode output: the selected caption and the scored final pool,
/// best first.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub best: ScoredHypothesis,
    pub pool: Vec<ScoredHypothesis>,
}

struct ActiveBeam {
    tokens: Vec<usize>,
    log_likelihood: f64,
    state: DecodeState,
}

struct Candidate {
    parent: usize,
    token: usize,
    log_likelihood: f64,
    /// Emitted index sequence including this step's token; the
    /// lexicographic tie-breaker.
    sequence: Vec<usize>,
}

/// Standard beam search. Every unfinished hypothesis expands over the
/// vocabulary each step; the top `beam_width` candidates by cumulative
/// log-likelihood survive; END-terminated ones move to the finished pool.
/// Survivors at `max_length` words are force-finished. The final caption is
/// the argmax of the normalized score over the pool, ties broken toward the
/// lexicographically smaller token sequence.
pub fn beam_search(
    model: &CaptionModel,
    feature: &Vector,
    guidance: Option<&Vector>,
    config: &DecodeConfig,
) -> DecodeResult<DecodeOutcome> {
    config.validate()?;
    let session = model.decode_session(guidance)?;
    let end = model.vocab().end_index();
    let unk = model.vocab().unk_index();
    let k = model.vocab_size();
    let mut active = vec![ActiveBeam {
        tokens: Vec::new(),
        log_likelihood: 0.0,
        state: session.begin(feature)?,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 1..=config.max_length {
        let mut candidates = Vec::with_capacity(active.len() * k);
        for (parent, beam) in active.iter().enumerate() {
            for token in 0..k {
                if config.forbid_unk && token == unk {
                    continue;
                }
                let log_likelihood = beam.log_likelihood + beam.state.log_probs.get(token);
                let mut sequence = beam.tokens.clone();
                sequence.push(token);
                candidates.push(Candidate {
                    parent,
                    token,
                    log_likelihood,
                    sequence,
                });
            }
        }
        candidates.sort_by(|a, b| {
            let key_a = prune_key(a, end, config);
            let key_b = prune_key(b, end, config);
            key_b
                .partial_cmp(&key_a)
                .expect("finite scores")
                .then_with(|| a.sequence.cmp(&b.sequence))
        });
        candidates.truncate(config.beam_width);

        let mut next_active = Vec::new();
        for cand in candidates {
            if cand.token == end {
                finished.push(BeamHypothesis {
                    tokens: active[cand.parent].tokens.clone(),
                    log_likelihood: cand.log_likelihood,
                    finished: true,
                });
            } else if step == config.max_length {
                // Out of steps: force-finish without an END factor.
                finished.push(BeamHypothesis {
                    tokens: cand.sequence,
                    log_likelihood: cand.log_likelihood,
                    finished: true,
                });
            } else {
                let state = session.advance(&active[cand.parent].state, cand.token)?;
                next_active.push(ActiveBeam {
                    tokens: cand.sequence,
                    log_likelihood: cand.log_likelihood,
                    state,
                });
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
    }

    Ok(select_best(finished, &config.norm))
}

fn prune_key(cand: &Candidate, end: usize, config: &DecodeConfig) -> f64 {
    if config.normalize_during_pruning {
        let words = if cand.token == end {
            cand.sequence.len() - 1
        } else {
            cand.sequence.len()
        };
        cand.log_likelihood / omega(&config.norm, words.max(1))
    } else {
        cand.log_likelihood
    }
}

fn select_best(finished: Vec<BeamHypothesis>, norm: &LengthNorm) -> DecodeOutcome {
    let mut pool: Vec<ScoredHypothesis> = finished
        .into_iter()
        .map(|hypothesis| ScoredHypothesis {
            score: normalized_score(norm, &hypothesis),
            hypothesis,
        })
        .collect();
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.hypothesis.tokens.cmp(&b.hypothesis.tokens))
    });
    let best = pool.first().expect("pool is never empty").clone();
    DecodeOutcome { best, pool }
}

/// Every candidate the beam could ever produce: END-terminated sequences of
/// up to `max_length - 1` words plus force-finished `max_length`-word ones.
pub fn enumerate_candidates(
    model: &CaptionModel,
    feature: &Vector,
    guidance: Option<&Vector>,
    max_length: usize,
    forbid_unk: bool,
) -> DecodeResult<Vec<BeamHypothesis>> {
    let k = model.vocab_size() as f64;
    let estimate = k.powi(max_length as i32);
    if estimate > 1e6 {
        return Err(DecodeError::GuardExceeded { estimate });
    }
    let session = model.decode_session(guidance)?;
    let end = model.vocab().end_index();
    let unk = model.vocab().unk_index();
    let mut out = Vec::new();
    let root = session.begin(feature)?;
    // Depth-first over word prefixes; iterative to keep the stack flat.
    struct Node {
        tokens: Vec<usize>,
        log_likelihood: f64,
        state: DecodeState,
    }
    let mut stack = vec![Node {
        tokens: Vec::new(),
        log_likelihood: 0.0,
        state: root,
    }];
    while let Some(node) = stack.pop() {
        if node.tokens.len() == max_length {
            out.push(BeamHypothesis {
                tokens: node.tokens,
                log_likelihood: node.log_likelihood,
                finished: true,
            });
            continue;
        }
        // Close with END here.
        out.push(BeamHypothesis {
            tokens: node.tokens.clone(),
            log_likelihood: node.log_likelihood + node.state.log_probs.get(end),
            finished: true,
        });
        for token in 0..model.vocab_size() {
            if token == end || (forbid_unk && token == unk) {
                continue;
            }
            let mut tokens = node.tokens.clone();
            tokens.push(token);
            stack.push(Node {
                tokens,
                log_likelihood: node.log_likelihood + node.state.log_probs.get(token),
                state: session.advance(&node.state, token)?,
            });
        }
    }
    Ok(out)
}

/// Scores every enumerable candidate and returns the argmax under the same
/// tie-break as [`beam_search`]. Guarded to K^max_length ≤ 10⁶.
pub fn exhaustive_oracle(
    model: &CaptionModel,
    feature: &Vector,
    guidance: Option<&Vector>,
    max_length: usize,
    norm: &LengthNorm,
    forbid_unk: bool,
) -> DecodeResult<ScoredHypothesis> {
    norm.validate()?;
    let candidates = enumerate_candidates(model, feature, guidance, max_length, forbid_unk)?;
    Ok(select_best(candidates, norm).best)
}

/// Mean and population standard deviation of training caption word counts.
pub fn length_stats(corpus: &Corpus) -> DecodeResult<(f64, f64)> {
    let lengths: Vec<f64> = corpus
        .split_items(Split::Train)
        .flat_map(|item| item.captions.iter().map(|c| c.len() as f64))
        .collect();
    if lengths.is_empty() {
        return Err(DecodeError::EmptyCorpus);
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let var = lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

//! Acceptance suite: one test per criterion, pinned tolerances, one PASS
//! line each (visible with `cargo test --test acceptance -- --nocapture`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glstm_core::captioner::{
    self, CaptionModel, CellKind, ModelConfig, TrainConfig,
};
use glstm_core::cells::CellParams;
use glstm_core::decoder::{self, DecodeConfig, LengthNorm};
use glstm_core::metrics::{self, EvalPair};
use glstm_core::numkit::{Matrix, Vector};
use glstm_core::semspace;
use glstm_core::textcorpus::{tokenize, Corpus, CorpusItem, Split, Vocabulary};

fn vocab_of(words: &[&str]) -> Vocabulary {
    let caps: Vec<Vec<String>> = vec![words.iter().map(|w| w.to_string()).collect()];
    let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
    Vocabulary::build(refs, 1).unwrap()
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Criterion 1: analytic gradients of both cell flavors match central finite
/// differences (h = 1e-5) with relative error < 1e-4 over every parameter,
/// at F=6, K=8, embed=5, hidden=5, guidance=3, sequence lengths 4..6.
#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let words = ["ant", "bee", "cat", "dog", "elk", "fox"];
    let vocab = vocab_of(&words);
    assert_eq!(vocab.size(), 8, "K must be 8");
    let h = 1e-5;
    let mut checked = 0usize;
    for kind in [CellKind::Lstm, CellKind::Glstm { guidance_dim: 3 }] {
        let config = ModelConfig::new(6, 5, 5, kind);
        let mut model = CaptionModel::init(vocab.clone(), &config, 9);
        // Parameters drawn in ±0.8 keep every gradient coordinate above the
        // finite-difference noise floor (~1e-10 absolute at h = 1e-5).
        let mut prng = ChaCha8Rng::seed_from_u64(9017);
        for (_, tensor) in model.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = prng.gen_range(-0.8..0.8);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(284);
        // Targets of length 4, 5 and 6 (words + END).
        for caption_words in [3usize, 4, 5] {
            let mut caption: Vec<usize> =
                (0..caption_words).map(|_| rng.gen_range(0..6)).collect();
            caption.push(vocab.end_index());
            let feature = random_vector(&mut rng, 6);
            let guidance = match kind {
                CellKind::Lstm => None,
                CellKind::Glstm { .. } => Some(random_vector(&mut rng, 3)),
            };
            let loss = |m: &CaptionModel, g: Option<&Vector>| -> f64 {
                m.forward_loss(&feature, &caption, g).unwrap().0.nll
            };
            let (_, cache) = model
                .forward_loss(&feature, &caption, guidance.as_ref())
                .unwrap();
            let grads = model.backward(&cache).unwrap();
            let grad_tensors: Vec<(&str, Vec<f64>)> = grads
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.to_vec()))
                .collect();
            for (ti, (name, grad)) in grad_tensors.iter().enumerate() {
                for k in 0..grad.len() {
                    let mut plus = model.clone();
                    plus.tensors_mut()[ti].1[k] += h;
                    let mut minus = model.clone();
                    minus.tensors_mut()[ti].1[k] -= h;
                    let numeric = (loss(&plus, guidance.as_ref())
                        - loss(&minus, guidance.as_ref()))
                        / (2.0 * h);
                    let err = relative_error(grad[k], numeric);
                    assert!(
                        err < 1e-4,
                        "{name}[{k}] (len {caption_words}): rel err {err:.3e}"
                    );
                    checked += 1;
                }
            }
            if let (Some(g), Some(dg)) = (&guidance, &grads.guidance) {
                for k in 0..g.dim() {
                    let mut plus = g.clone();
                    plus.set(k, plus.get(k) + h);
                    let mut minus = g.clone();
                    minus.set(k, minus.get(k) - h);
                    let numeric =
                        (loss(&model, Some(&plus)) - loss(&model, Some(&minus))) / (2.0 * h);
                    assert!(relative_error(dg.get(k), numeric) < 1e-4, "guidance[{k}]");
                    checked += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient oracle took {elapsed:?}, budget 30 s"
    );
    println!(
        "criterion 1 (gradient oracle): PASS — {checked} partial derivatives within 1e-4 in {elapsed:?}"
    );
}

fn reduction_corpus(feature_dim: usize) -> Corpus {
    let captions = ["a b", "b c a", "c a", "a c b", "b"];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut items: Vec<CorpusItem> = captions
        .iter()
        .enumerate()
        .map(|(i, caption)| CorpusItem {
            id: format!("img{i}"),
            feature: random_vector(&mut rng, feature_dim),
            captions: vec![tokenize(caption)],
            split: Split::Train,
        })
        .collect();
    for item in items.clone() {
        items.push(CorpusItem {
            split: Split::Val,
            ..item
        });
    }
    Corpus {
        feature_dim,
        items,
    }
}

/// Criterion 2: a gLSTM with zero guidance projections (and separately with a
/// zero guidance vector) reproduces the LSTM end to end: forward losses match
/// to 1e-12 and generated captions are token-identical.
#[test]
fn criterion_2_reduction_invariant() {
    let corpus = reduction_corpus(6);
    let vocab = vocab_of(&["a", "b", "c"]);
    let seed = 77;
    let lstm = {
        let config = ModelConfig::new(6, 8, 12, CellKind::Lstm);
        let model = CaptionModel::init(vocab.clone(), &config, seed);
        let tc = TrainConfig {
            learning_rate: 0.02,
            dropout: 0.0,
            max_epochs: 5,
            patience: 50,
            seed,
            ..TrainConfig::default()
        };
        captioner::train(model, &corpus, None, &tc, None).unwrap().model
    };
    // Same trained weights inside a guided cell with zero projections.
    let mut zero_q = {
        let config = ModelConfig::new(6, 8, 12, CellKind::Glstm { guidance_dim: 4 });
        CaptionModel::init(vocab.clone(), &config, seed)
    };
    zero_q.w_img = lstm.w_img.clone();
    zero_q.w_emb = lstm.w_emb.clone();
    zero_q.w_dec = lstm.w_dec.clone();
    zero_q.b_dec = lstm.b_dec.clone();
    if let (CellParams::Lstm(base), CellParams::Glstm(g)) = (&lstm.cell, &mut zero_q.cell) {
        g.base = base.clone();
        for m in [&mut g.w_iq, &mut g.w_fq, &mut g.w_oq, &mut g.w_cq] {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
    } else {
        unreachable!();
    }
    // And the same with random projections but a zero guidance vector.
    let mut random_q = zero_q.clone();
    if let CellParams::Glstm(g) = &mut random_q.cell {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for m in [&mut g.w_iq, &mut g.w_fq, &mut g.w_oq, &mut g.w_cq] {
            for v in m.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = DecodeConfig {
        beam_width: 4,
        max_length: 8,
        norm: LengthNorm::polynomial(),
        ..DecodeConfig::default()
    };
    let zero_vec = Vector::zeros(4);
    for item in corpus.train() {
        let g = random_vector(&mut rng, 4);
        let caption = lstm.vocab().encode(&item.captions[0]);
        let (plain, _) = lstm.forward_loss(&item.feature, &caption, None).unwrap();
        let (guided, _) = zero_q
            .forward_loss(&item.feature, &caption, Some(&g))
            .unwrap();
        assert!(
            (plain.nll - guided.nll).abs() <= 1e-12,
            "zero-projection loss differs: {} vs {}",
            plain.nll,
            guided.nll
        );
        let (gz, _) = random_q
            .forward_loss(&item.feature, &caption, Some(&zero_vec))
            .unwrap();
        assert!((plain.nll - gz.nll).abs() <= 1e-12, "zero-vector loss differs");

        let base_caption = decoder::beam_search(&lstm, &item.feature, None, &config).unwrap();
        let guided_caption =
            decoder::beam_search(&zero_q, &item.feature, Some(&g), &config).unwrap();
        let gz_caption =
            decoder::beam_search(&random_q, &item.feature, Some(&zero_vec), &config).unwrap();
        assert_eq!(
            base_caption.best.hypothesis.tokens,
            guided_caption.best.hypothesis.tokens
        );
        assert_eq!(
            base_caption.best.hypothesis.tokens,
            gz_caption.best.hypothesis.tokens
        );
    }
    println!("criterion 2 (reduction invariant): PASS — losses within 1e-12, captions identical");
}

/// Criterion 3: with K = 4 and max_length = 5, the full-width beam equals the
/// exhaustive oracle under all five normalization settings on 20 random
/// models, within a 60 s budget.
#[test]
fn criterion_3_beam_oracle() {
    let started = Instant::now();
    let vocab = vocab_of(&["a", "b"]);
    assert_eq!(vocab.size(), 4);
    let max_length = 5usize;
    let full_width = vocab.size().pow(max_length as u32);
    let norms = [
        LengthNorm::None,
        LengthNorm::polynomial(),
        LengthNorm::min_hinge(3.0).unwrap(),
        LengthNorm::max_hinge(3.0).unwrap(),
        LengthNorm::gaussian(3.0, 1.5).unwrap(),
    ];
    for seed in 0..20u64 {
        let config = ModelConfig::new(3, 4, 4, CellKind::Lstm);
        let model = CaptionModel::init(vocab.clone(), &config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let feature = random_vector(&mut rng, 3);
        for norm in &norms {
            let config = DecodeConfig {
                beam_width: full_width,
                max_length,
                norm: norm.clone(),
                ..DecodeConfig::default()
            };
            let beam = decoder::beam_search(&model, &feature, None, &config).unwrap();
            let oracle =
                decoder::exhaustive_oracle(&model, &feature, None, max_length, norm, true)
                    .unwrap();
            assert_eq!(
                beam.best.hypothesis.tokens, oracle.hypothesis.tokens,
                "model {seed}, norm {norm:?}"
            );
            assert!(
                (beam.best.score - oracle.score).abs() <= 1e-12,
                "model {seed}, norm {norm:?}: scores {} vs {}",
                beam.best.score,
                oracle.score
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "beam oracle took {elapsed:?}, budget 60 s");
    println!(
        "criterion 3 (beam = exhaustive oracle): PASS — 20 models x 5 norms in {elapsed:?}"
    );
}

/// Criterion 4: over 100 decodes from a toy-trained model, the mean caption
/// length without normalization does not exceed the mean length under the
/// polynomial norm — unnormalized selection favors short sentences.
#[test]
fn criterion_4_length_bias_direction() {
    // Corpus with caption lengths from 2 to 8 words.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let words = ["a", "b", "c", "d"];
    let mut items = Vec::new();
    for i in 0..24 {
        let len = 2 + (i % 7);
        let caption: Vec<&str> = (0..len).map(|j| words[(i + j) % words.len()]).collect();
        items.push(CorpusItem {
            id: format!("img{i:02}"),
            feature: random_vector(&mut rng, 6),
            captions: vec![caption.iter().map(|w| w.to_string()).collect()],
            split: if i < 18 { Split::Train } else { Split::Val },
        });
    }
    let corpus = Corpus {
        feature_dim: 6,
        items,
    };
    let vocab = vocab_of(&words);
    let config = ModelConfig::new(6, 10, 20, CellKind::Lstm);
    let model = CaptionModel::init(vocab, &config, 405);
    let tc = TrainConfig {
        learning_rate: 0.01,
        dropout: 0.0,
        max_epochs: 30,
        patience: 50,
        seed: 405,
        ..TrainConfig::default()
    };
    let trained = captioner::train(model, &corpus, None, &tc, None).unwrap().model;

    let decode_mean_len = |norm: LengthNorm| -> f64 {
        let config = DecodeConfig {
            beam_width: 5,
            max_length: 12,
            norm,
            ..DecodeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(406);
        let mut total = 0usize;
        for _ in 0..100 {
            let feature = random_vector(&mut rng, 6);
            let out = decoder::beam_search(&trained, &feature, None, &config).unwrap();
            total += out.best.hypothesis.len();
        }
        total as f64 / 100.0
    };
    let mean_none = decode_mean_len(LengthNorm::None);
    let mean_poly = decode_mean_len(LengthNorm::polynomial());
    assert!(
        mean_none <= mean_poly,
        "expected unnormalized captions no longer than polynomial-normalized: {mean_none} vs {mean_poly}"
    );
    println!(
        "criterion 4 (length-bias direction): PASS — mean length none {mean_none:.2} <= polynomial {mean_poly:.2}"
    );
}

/// Criterion 5: CCA property battery — identical views correlate to 1 within
/// 1e-6, linearly related views with 1% noise reach 0.95, shuffled pairings
/// stay at or below 0.3 (n = 500), and projections are unit norm to 1e-12.
#[test]
fn criterion_5_cca_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let random_matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    };

    let x = random_matrix(&mut rng, 200, 5);
    let identical = semspace::fit_cca(&x, &x, 1, 4.0, 1e-6).unwrap();
    let top = identical.correlations.get(0);
    assert!((top - 1.0).abs() <= 1e-6, "identical views: {top}");

    let x1 = random_matrix(&mut rng, 200, 5);
    let a = random_matrix(&mut rng, 5, 5);
    let noise = random_matrix(&mut rng, 200, 5).scale(0.01);
    let x2 = x1.matmul(&a).unwrap().add(&noise).unwrap();
    let related = semspace::fit_cca(&x1, &x2, 3, 4.0, 1e-6).unwrap();
    assert!(
        related.correlations.get(0) >= 0.95,
        "related views: {}",
        related.correlations.get(0)
    );

    let y1 = random_matrix(&mut rng, 500, 5);
    let mut y2 = y1.clone();
    // Shuffle the rows of the second view to destroy the correspondence.
    let mut order: Vec<usize> = (0..500).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for (dst, &src) in order.iter().enumerate() {
        for c in 0..5 {
            y2.set(dst, c, y1.get(src, c));
        }
    }
    let shuffled = semspace::fit_cca(&y1, &y2, 2, 4.0, 1e-6).unwrap();
    assert!(
        shuffled.correlations.get(0) <= 0.3,
        "shuffled views: {}",
        shuffled.correlations.get(0)
    );

    for _ in 0..50 {
        let v = random_vector(&mut rng, 5);
        let p = related.project(&v, semspace::View::Image).unwrap();
        let norm = p.norm2();
        assert!(
            norm == 0.0 || (norm - 1.0).abs() <= 1e-12,
            "projection norm {norm}"
        );
    }
    println!("criterion 5 (CCA properties): PASS — correlation bounds and unit-norm projections hold");
}

/// Criterion 6: a 5-item toy corpus trains to perplexity < 1.05 and greedy
/// decoding recites every training caption, within a 2 minute budget.
#[test]
fn criterion_6_overfit_sanity() {
    let started = Instant::now();
    let captions = ["a b", "b c a", "c", "a c b", "b a"];
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut items: Vec<CorpusItem> = captions
        .iter()
        .enumerate()
        .map(|(i, caption)| CorpusItem {
            id: format!("img{i}"),
            feature: random_vector(&mut rng, 8),
            captions: vec![tokenize(caption)],
            split: Split::Train,
        })
        .collect();
    for item in items.clone() {
        items.push(CorpusItem {
            split: Split::Val,
            ..item
        });
    }
    let corpus = Corpus {
        feature_dim: 8,
        items,
    };
    let vocab = vocab_of(&["a", "b", "c"]);
    let config = ModelConfig::new(8, 16, 32, CellKind::Lstm);
    let model = CaptionModel::init(vocab, &config, 606);
    let tc = TrainConfig {
        learning_rate: 0.05,
        dropout: 0.0,
        max_epochs: 300,
        patience: 300,
        seed: 606,
        ..TrainConfig::default()
    };
    let trained = captioner::train(model, &corpus, None, &tc, None).unwrap().model;

    let mut nll = 0.0;
    let mut tokens = 0usize;
    for item in corpus.train() {
        let caption = trained.vocab().encode(&item.captions[0]);
        let (report, _) = trained.forward_loss(&item.feature, &caption, None).unwrap();
        nll += report.nll;
        tokens += report.tokens;
    }
    let perplexity = (nll / tokens as f64).exp();
    assert!(perplexity < 1.05, "train perplexity {perplexity}");

    let config = DecodeConfig {
        beam_width: 1,
        max_length: 8,
        ..DecodeConfig::default()
    };
    for item in corpus.train() {
        let out = decoder::beam_search(&trained, &item.feature, None, &config).unwrap();
        let decoded = trained.vocab().decode(&out.best.hypothesis.tokens);
        assert_eq!(
            decoded, item.captions[0],
            "greedy decode must recite the training caption for {}",
            item.id
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "overfit run took {elapsed:?}, budget 2 min");
    println!(
        "criterion 6 (overfit sanity): PASS — perplexity {perplexity:.4} < 1.05, all 5 captions recited in {elapsed:?}"
    );
}

/// Criterion 7: BLEU correctness — perfect match scores 1 at every order, a
/// hand-counted two-pair corpus matches to 1e-10, and scores equal the
/// geometric-mean combination of independently computed precisions.
#[test]
fn criterion_7_bleu_correctness() {
    let words = |s: &str| -> Vec<String> { s.split_whitespace().map(|w| w.to_string()).collect() };

    let perfect = vec![
        EvalPair {
            candidate: words("a dog runs in the park"),
            references: vec![words("a dog runs in the park"), words("dogs run")],
        },
        EvalPair {
            candidate: words("the cat sat down softly"),
            references: vec![words("the cat sat down softly")],
        },
    ];
    let report = metrics::bleu(&perfect).unwrap();
    for n in 1..=4 {
        assert!((report.score(n) - 1.0).abs() <= 1e-12, "perfect B@{n}");
    }

    // Hand-counted corpus:
    //   pair 1: "the cat sat" vs {"the cat sat down", "a cat sat"}
    //   pair 2: "a dog barks loud" vs {"a dog runs fast", "the dog barks"}
    // Clipped matches by order: 1-grams 3+3=6 of 3+4=7; 2-grams 2+2=4 of
    // 2+3=5; 3-grams 1+0=1 of 1+2=3; 4-grams 0 of 0+1=1.
    // Closest reference lengths: 3 and 4 → r = 7 = c → BP = 1.
    let hand = vec![
        EvalPair {
            candidate: words("the cat sat"),
            references: vec![words("the cat sat down"), words("a cat sat")],
        },
        EvalPair {
            candidate: words("a dog barks loud"),
            references: vec![words("a dog runs fast"), words("the dog barks")],
        },
    ];
    let report = metrics::bleu(&hand).unwrap();
    let matched = [6.0_f64, 4.0, 1.0, 0.0];
    let total = [7.0_f64, 5.0, 3.0, 1.0];
    for n in 1..=4usize {
        let ps: Vec<f64> = (0..n).map(|k| matched[k] / total[k]).collect();
        let expected = if ps.contains(&0.0) {
            0.0
        } else {
            (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
        };
        assert!(
            (report.score(n) - expected).abs() <= 1e-10,
            "hand-counted B@{n}: {} vs {expected}",
            report.score(n)
        );
    }

    // Geometric-mean property on a random corpus: recompute precisions with
    // a separate counting routine and combine independently.
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let alphabet = ["u", "v", "w", "x", "y"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(2..9))
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
            .collect()
    };
    let pairs: Vec<EvalPair> = (0..8)
        .map(|_| EvalPair {
            candidate: sentence(&mut rng),
            references: (0..3).map(|_| sentence(&mut rng)).collect(),
        })
        .collect();
    let report = metrics::bleu(&pairs).unwrap();
    let count_ngrams = |tokens: &[String], n: usize| -> Vec<Vec<String>> {
        if tokens.len() < n {
            return Vec::new();
        }
        tokens.windows(n).map(|w| w.to_vec()).collect()
    };
    let mut precisions = [0.0f64; 4];
    for n in 1..=4usize {
        let mut matched = 0usize;
        let mut total = 0usize;
        for pair in &pairs {
            let cand = count_ngrams(&pair.candidate, n);
            total += cand.len();
            let mut uniq = cand.clone();
            uniq.sort();
            uniq.dedup();
            for gram in uniq {
                let in_candidate = cand.iter().filter(|g| **g == gram).count();
                let clip = pair
                    .references
                    .iter()
                    .map(|r| count_ngrams(r, n).iter().filter(|g| **g == gram).count())
                    .max()
                    .unwrap_or(0);
                matched += in_candidate.min(clip);
            }
        }
        precisions[n - 1] = if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
    }
    let (c_len, r_len) = pairs.iter().fold((0usize, 0usize), |(c, r), p| {
        let mut lens: Vec<usize> = p.references.iter().map(|x| x.len()).collect();
        lens.sort_unstable();
        let closest = lens
            .iter()
            .min_by_key(|l| l.abs_diff(p.candidate.len()))
            .copied()
            .unwrap();
        (c + p.candidate.len(), r + closest)
    });
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    for n in 1..=4usize {
        let expected = if precisions[..n].contains(&0.0) {
            0.0
        } else {
            bp * (precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
        };
        assert!(
            (report.score(n) - expected).abs() <= 1e-10,
            "geometric mean B@{n}: {} vs {expected}",
            report.score(n)
        );
    }
    println!("criterion 7 (BLEU correctness): PASS — perfect, hand-counted and geometric-mean checks hold");
}

fn write_cli_dataset(dir: &Path) -> PathBuf {
    let bases = [
        "a red ball on the grass",
        "a blue ball on the sand",
        "a red cube on the table",
        "a blue cube on the grass",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut rows = String::new();
    let mut items = Vec::new();
    for i in 0..12 {
        let base = bases[i % bases.len()];
        // Vary the caption lengths so the gaussian norm's sigma is nonzero.
        let caption = if i % 2 == 0 {
            base.to_string()
        } else {
            format!("{base} in bright daylight")
        };
        let feature: Vec<String> = (0..6).map(|_| format!("{:.4}", rng.gen_range(-1.0..1.0))).collect();
        rows.push_str(&feature.join(","));
        rows.push('\n');
        let split = if i < 8 {
            "train"
        } else if i < 10 {
            "val"
        } else {
            "test"
        };
        items.push(format!(
            r#"{{"id": "img{i:02}", "feature_row": {i}, "captions": ["{caption}"], "split": "{split}"}}"#
        ));
    }
    fs::write(dir.join("feats.csv"), rows).unwrap();
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        format!(
            r#"{{"feature_dim": 6, "features_file": "feats.csv", "items": [{}]}}"#,
            items.join(",")
        ),
    )
    .unwrap();
    manifest_path
}

/// Criterion 8: identical seeds give byte-identical semantic-space files,
/// checkpoints, and generation files across two independent binary runs.
#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_cli_dataset(dir.path());
    let manifest = manifest.to_str().unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_glstm"))
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    for tag in ["a", "b"] {
        let space = dir.path().join(format!("space_{tag}.glsx"));
        run(&[
            "cca-fit",
            "--manifest",
            manifest,
            "--out",
            space.to_str().unwrap(),
            "--cca-dim",
            "4",
            "--bow-size",
            "16",
        ]);
        let ckpt = dir.path().join(format!("model_{tag}.glsc"));
        run(&[
            "train",
            "--manifest",
            manifest,
            "--out",
            ckpt.to_str().unwrap(),
            "--cell",
            "glstm",
            "--guidance",
            "emb",
            "--cca",
            space.to_str().unwrap(),
            "--hidden",
            "12",
            "--embed",
            "8",
            "--min-count",
            "1",
            "--lr",
            "0.02",
            "--epochs",
            "3",
            "--patience",
            "10",
            "--seed",
            "13",
        ]);
        let gen = dir.path().join(format!("gen_{tag}.jsonl"));
        run(&[
            "generate",
            "--manifest",
            manifest,
            "--model",
            ckpt.to_str().unwrap(),
            "--guidance",
            "emb",
            "--cca",
            space.to_str().unwrap(),
            "--out",
            gen.to_str().unwrap(),
            "--norm",
            "gaussian",
            "--beam-width",
            "4",
            "--max-length",
            "10",
        ]);
    }
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("space_a.glsx"), read("space_b.glsx"), "CCA model files differ");
    assert_eq!(read("model_a.glsc"), read("model_b.glsc"), "checkpoints differ");
    assert_eq!(read("gen_a.jsonl"), read("gen_b.jsonl"), "generation files differ");
    println!("criterion 8 (determinism): PASS — byte-identical space, checkpoint and generation files");
}

//! Tokenization, vocabulary construction, TF-IDF vectorization and dataset
//! ingestion (captions plus precomputed image feature vectors).

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::hash::{fnv1a64_extend, FNV_OFFSET};
use crate::numkit::{Matrix, Vector};

pub const END_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Magic bytes of the binary feature-matrix file format.
pub const FEATURE_MAGIC: &[u8; 4] = b"GLSF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed manifest JSON in {path}: {detail}")]
    MalformedJson { path: String, detail: String },
    #[error("manifest item '{item}': {detail}")]
    BadItem { item: String, detail: String },
    #[error("feature source missing for item '{item}': {path}")]
    MissingFeatureFile { item: String, path: String },
    #[error("item '{item}': feature dimension {got} does not match manifest feature_dim {expected}")]
    DimensionMismatch {
        item: String,
        expected: usize,
        got: usize,
    },
    #[error("feature file {path}: {detail}")]
    BadFeatureFile { path: String, detail: String },
    #[error("empty corpus: {0}")]
    Empty(String),
}

/// Lowercases and splits into maximal runs of ASCII alphanumerics;
/// every other character is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_ascii_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token/index bijection with two reserved trailing entries: END and UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from training captions: tokens with frequency
    /// at least `min_count` get indices assigned by descending frequency,
    /// ties broken lexicographically.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Result<Vocabulary, CorpusError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for caption in captions {
            any = true;
            for token in caption {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(CorpusError::Empty(
                "vocabulary requires a nonempty training split".into(),
            ));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = kept.into_iter().map(|(t, _)| t.to_string()).collect();
        Ok(Vocabulary::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its ordered non-reserved token list,
    /// e.g. when loading a checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index_of }
    }

    /// Total vocabulary size K, reserved entries included.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn end_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_index(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Ordered non-reserved tokens, as persisted in checkpoints.
    pub fn word_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        match self.index_of.get(token) {
            Some(&i) => i,
            None => self.unk_index(),
        }
    }

    pub fn token(&self, index: usize) -> &str {
        if index == self.end_index() {
            END_TOKEN
        } else if index == self.unk_index() {
            UNK_TOKEN
        } else {
            &self.tokens[index]
        }
    }

    /// Encodes a token list, always appending exactly one END index.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut out: Vec<usize> = tokens.iter().map(|t| self.index_of(t)).collect();
        out.push(self.end_index());
        out
    }

    /// Inverse of `encode`: drops the trailing END, maps OOV indices to the
    /// UNK surface form.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        let body = match indices.last() {
            Some(&last) if last == self.end_index() => &indices[..indices.len() - 1],
            _ => indices,
        };
        body.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Order-sensitive checksum over the token list, stored in checkpoints
    /// so a model is never decoded against the wrong vocabulary.
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for token in &self.tokens {
            h = fnv1a64_extend(h, token.as_bytes());
            h = fnv1a64_extend(h, b"\n");
        }
        h = fnv1a64_extend(h, END_TOKEN.as_bytes());
        h = fnv1a64_extend(h, UNK_TOKEN.as_bytes());
        h
    }
}

/// TF-IDF bag-of-words vectorizer over its own guidance vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfVectorizer {
    columns: Vec<String>,
    index_of: HashMap<String, usize>,
    idf: Vec<f64>,
    n_docs: usize,
}

impl TfIdfVectorizer {
    /// Fits on tokenized training documents. The guidance vocabulary is the
    /// top `vocab_size` tokens by document frequency (ties lexicographic);
    /// idf is smoothed: ln((1+N)/(1+df)) + 1.
    pub fn fit<'a, I>(documents: I, vocab_size: usize) -> TfIdfVectorizer
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut df: HashMap<&str, usize> = HashMap::new();
        let mut n_docs = 0usize;
        for doc in documents {
            n_docs += 1;
            let mut seen: Vec<&str> = doc.iter().map(|t| t.as_str()).collect();
            seen.sort_unstable();
            seen.dedup();
            for token in seen {
                *df.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(vocab_size);
        let columns: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
        let idf: Vec<f64> = ranked
            .iter()
            .map(|&(_, df)| ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0)
            .collect();
        let index_of = columns
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TfIdfVectorizer {
            columns,
            index_of,
            idf,
            n_docs,
        }
    }

    /// Reconstructs a fitted vectorizer from persisted state.
    pub fn from_parts(columns: Vec<String>, idf: Vec<f64>, n_docs: usize) -> TfIdfVectorizer {
        assert_eq!(columns.len(), idf.len(), "idf length mismatch");
        let index_of = columns
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TfIdfVectorizer {
            columns,
            index_of,
            idf,
            n_docs,
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Raw term counts over the guidance vocabulary.
    pub fn term_counts(&self, tokens: &[String]) -> Vector {
        let mut counts = vec![0.0; self.columns.len()];
        for token in tokens {
            if let Some(&j) = self.index_of.get(token.as_str()) {
                counts[j] += 1.0;
            }
        }
        Vector::from_vec(counts)
    }

    /// TF-IDF vector, L2-normalized unless it is exactly zero.
    pub fn vectorize(&self, tokens: &[String]) -> Vector {
        let mut v = self.term_counts(tokens);
        for (x, &w) in v.data_mut().iter_mut().zip(&self.idf) {
            *x *= w;
        }
        v.normalized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub feature: Vector,
    /// Tokenized captions, at least one per item.
    pub captions: Vec<Vec<String>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &CorpusItem> {
        self.split_items(Split::Train)
    }

    /// All tokenized captions of one split, flattened in item order.
    pub fn split_captions(&self, split: Split) -> Vec<&[String]> {
        self.split_items(split)
            .flat_map(|it| it.captions.iter().map(|c| c.as_slice()))
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|it| it.id == id)
    }
}

#[derive(Deserialize)]
struct ManifestFile {
    feature_dim: usize,
    #[serde(default)]
    features_file: Option<String>,
    items: Vec<ManifestItem>,
}

#[derive(Deserialize)]
struct ManifestItem {
    id: String,
    #[serde(default)]
    feature_file: Option<String>,
    #[serde(default)]
    feature_row: Option<usize>,
    captions: Vec<String>,
    split: String,
}

/// Loads a dataset manifest. Feature paths are resolved relative to the
/// manifest's directory; per-item rows validate against `feature_dim`.
pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| CorpusError::MalformedJson {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let shared = match &manifest.features_file {
        Some(rel) => Some(load_features(&base.join(rel))?),
        None => None,
    };
    let mut seen_ids: HashMap<&str, ()> = HashMap::with_capacity(manifest.items.len());
    let mut items = Vec::with_capacity(manifest.items.len());
    for raw in &manifest.items {
        if seen_ids.insert(raw.id.as_str(), ()).is_some() {
            return Err(CorpusError::BadItem {
                item: raw.id.clone(),
                detail: "duplicate item id".into(),
            });
        }
        let split = Split::parse(&raw.split).ok_or_else(|| CorpusError::BadItem {
            item: raw.id.clone(),
            detail: format!("unknown split '{}'", raw.split),
        })?;
        if raw.captions.is_empty() {
            return Err(CorpusError::BadItem {
                item: raw.id.clone(),
                detail: "item has no captions".into(),
            });
        }
        let feature = match (&raw.feature_file, raw.feature_row) {
            (Some(rel), None) => {
                let fpath = base.join(rel);
                let m = load_features(&fpath).map_err(|e| match e {
                    CorpusError::Io { path, source } => CorpusError::MissingFeatureFile {
                        item: raw.id.clone(),
                        path: format!("{path} ({source})"),
                    },
                    other => other,
                })?;
                if m.rows() != 1 {
                    return Err(CorpusError::BadItem {
                        item: raw.id.clone(),
                        detail: format!(
                            "per-item feature file {} holds {} rows, expected 1",
                            fpath.display(),
                            m.rows()
                        ),
                    });
                }
                Vector::from_vec(m.row(0).to_vec())
            }
            (None, Some(row)) => {
                let m = shared.as_ref().ok_or_else(|| CorpusError::BadItem {
                    item: raw.id.clone(),
                    detail: "feature_row used but manifest has no features_file".into(),
                })?;
                if row >= m.rows() {
                    return Err(CorpusError::BadItem {
                        item: raw.id.clone(),
                        detail: format!("feature_row {row} out of range ({} rows)", m.rows()),
                    });
                }
                Vector::from_vec(m.row(row).to_vec())
            }
            _ => {
                return Err(CorpusError::BadItem {
                    item: raw.id.clone(),
                    detail: "exactly one of feature_file or feature_row is required".into(),
                })
            }
        };
        if feature.dim() != manifest.feature_dim {
            return Err(CorpusError::DimensionMismatch {
                item: raw.id.clone(),
                expected: manifest.feature_dim,
                got: feature.dim(),
            });
        }
        if feature.data().iter().any(|x| !x.is_finite()) {
            return Err(CorpusError::BadItem {
                item: raw.id.clone(),
                detail: "feature vector contains non-finite values".into(),
            });
        }
        items.push(CorpusItem {
            id: raw.id.clone(),
            feature,
            captions: raw.captions.iter().map(|c| tokenize(c)).collect(),
            split,
        });
    }
    Ok(Corpus {
        feature_dim: manifest.feature_dim,
        items,
    })
}

/// Loads a feature matrix, sniffing the binary magic and falling back to CSV.
pub fn load_features(path: &Path) -> Result<Matrix, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.starts_with(FEATURE_MAGIC) {
        parse_binary_features(path, &bytes)
    } else {
        parse_csv_features(path, &bytes)
    }
}

fn parse_binary_features(path: &Path, bytes: &[u8]) -> Result<Matrix, CorpusError> {
    let path_str = || path.display().to_string();
    let mut cursor = &bytes[4..];
    let mut read_u32 = |what: &str| -> Result<u32, CorpusError> {
        let mut buf = [0u8; 4];
        cursor
            .read_exact(&mut buf)
            .map_err(|_| CorpusError::BadFeatureFile {
                path: path_str(),
                detail: format!("truncated while reading {what}"),
            })?;
        Ok(u32::from_le_bytes(buf))
    };
    let version = read_u32("version")?;
    if version != FEATURE_VERSION {
        return Err(CorpusError::BadFeatureFile {
            path: path_str(),
            detail: format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        });
    }
    let rows = read_u32("row count")? as usize;
    let cols = read_u32("column count")? as usize;
    let expected = rows * cols * 4;
    if cursor.len() != expected {
        return Err(CorpusError::BadFeatureFile {
            path: path_str(),
            detail: format!("payload is {} bytes, expected {expected}", cursor.len()),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in cursor.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        data.push(v as f64);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

fn parse_csv_features(path: &Path, bytes: &[u8]) -> Result<Matrix, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CorpusError::BadFeatureFile {
        path: path.display().to_string(),
        detail: "not valid UTF-8 (and not a binary feature file)".into(),
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| CorpusError::BadFeatureFile {
                    path: path.display().to_string(),
                    detail: format!("line {}: cannot parse '{}' as a number", lineno + 1, field),
                })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(CorpusError::BadFeatureFile {
                    path: path.display().to_string(),
                    detail: format!(
                        "line {}: {} columns, previous rows have {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CorpusError::BadFeatureFile {
            path: path.display().to_string(),
            detail: "no data rows".into(),
        });
    }
    Ok(Matrix::from_rows(&rows))
}

/// Writes a feature matrix in the binary format (f32 payload).
pub fn write_features_binary(path: &Path, features: &Matrix) -> Result<(), CorpusError> {
    let mut bytes = Vec::with_capacity(16 + features.data().len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn tokenize_definition_cases() {
        assert_eq!(tokenize("A dog runs."), vec!["a", "dog", "runs"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(
            tokenize("Black-and-white dog, 2 balls!"),
            vec!["black", "and", "white", "dog", "2", "balls"]
        );
    }

    #[test]
    fn tokenize_idempotent_on_joined_output() {
        for text in ["The QUICK brown-fox; 42 jumps!", "..a..b..", "XyZ9"] {
            let once = tokenize(text);
            let again = tokenize(&once.join(" "));
            assert_eq!(once, again);
        }
    }

    fn toks(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| tokenize(t)).collect()
    }

    #[test]
    fn vocab_min_count_thresholds() {
        let caps = toks(&["a b", "a c"]);
        let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        assert_eq!(v.size(), 5); // a, b, c + END + UNK
        assert_eq!(v.word_tokens(), &["a", "b", "c"]);
        let v2 = Vocabulary::build(refs.iter().copied(), 2).unwrap();
        assert_eq!(v2.word_tokens(), &["a"]);
        assert_eq!(v2.size(), 3);
    }

    #[test]
    fn vocab_frequency_then_lexicographic_order() {
        // c appears 3 times; a and b are tied at 2 → a before b.
        let caps = toks(&["c b a", "c a b", "c"]);
        let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        assert_eq!(v.word_tokens(), &["c", "a", "b"]);
        // Rebuild gives the identical assignment.
        let v2 = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        assert_eq!(v, v2);
        assert_eq!(v.checksum(), v2.checksum());
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        let refs: Vec<&[String]> = Vec::new();
        assert!(Vocabulary::build(refs, 1).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let caps = toks(&["a dog runs", "a cat sits"]);
        let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        let sentence = tokenize("a dog sits");
        let encoded = v.encode(&sentence);
        assert_eq!(*encoded.last().unwrap(), v.end_index());
        assert_eq!(encoded.iter().filter(|&&i| i == v.end_index()).count(), 1);
        assert!(encoded.iter().all(|&i| i < v.size()));
        assert_eq!(v.decode(&encoded), sentence);
    }

    #[test]
    fn encode_mixed_sentence_matches_table_lookup() {
        let caps = toks(&["a dog runs", "a cat sits"]);
        let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        let sentence = tokenize("a zebra runs");
        let encoded = v.encode(&sentence);
        assert_eq!(
            encoded,
            vec![
                v.index_of("a"),
                v.unk_index(),
                v.index_of("runs"),
                v.end_index()
            ]
        );
        assert_eq!(v.decode(&encoded), vec!["a", UNK_TOKEN, "runs"]);
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let caps = toks(&["a b"]);
        let refs: Vec<&[String]> = caps.iter().map(|c| c.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1).unwrap();
        let sentence = tokenize("zebra quagga");
        let encoded = v.encode(&sentence);
        assert_eq!(encoded, vec![v.unk_index(), v.unk_index(), v.end_index()]);
        assert_eq!(v.decode(&encoded), vec![UNK_TOKEN, UNK_TOKEN]);
    }

    #[test]
    fn tfidf_idf_floor_and_zero_vector() {
        let docs = toks(&["a b", "a c", "a d"]);
        let refs: Vec<&[String]> = docs.iter().map(|c| c.as_slice()).collect();
        let tf = TfIdfVectorizer::fit(refs.iter().copied(), 10);
        // 'a' appears in every document → idf = ln(1)+1 = 1 exactly
        // (ln((1+3)/(1+3)) = 0).
        let a_col = tf.columns().iter().position(|t| t == "a").unwrap();
        assert_eq!(tf.idf()[a_col], 1.0);
        let oov = tokenize("zebra");
        let v = tf.vectorize(&oov);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tfidf_matches_hand_computation() {
        // Documents: d1 = "a a b", d2 = "a c", d3 = "b b c".
        // df: a=2, b=2, c=2; N=3 → idf = ln(4/3)+1 for every column.
        // Columns by (df desc, lex): a, b, c.
        let docs = toks(&["a a b", "a c", "b b c"]);
        let refs: Vec<&[String]> = docs.iter().map(|c| c.as_slice()).collect();
        let tf = TfIdfVectorizer::fit(refs.iter().copied(), 3);
        assert_eq!(tf.columns(), &["a", "b", "c"]);
        let idf = (4.0_f64 / 3.0).ln() + 1.0;
        for &w in tf.idf() {
            assert!((w - idf).abs() < 1e-15);
        }
        // Vector of d1: tf = (2, 1, 0) → weighted (2idf, idf, 0),
        // norm = idf·√5 → normalized (2/√5, 1/√5, 0).
        let v = tf.vectorize(&docs[0]);
        let s5 = 5.0_f64.sqrt();
        assert!((v.get(0) - 2.0 / s5).abs() < 1e-12);
        assert!((v.get(1) - 1.0 / s5).abs() < 1e-12);
        assert_eq!(v.get(2), 0.0);
        assert!((v.norm2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tfidf_vocab_size_truncates_by_document_frequency() {
        let docs = toks(&["a b", "a b", "a c"]);
        let refs: Vec<&[String]> = docs.iter().map(|c| c.as_slice()).collect();
        let tf = TfIdfVectorizer::fit(refs.iter().copied(), 2);
        assert_eq!(tf.columns(), &["a", "b"]);
        assert_eq!(tf.dim(), 2);
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn manifest_csv_features() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("feats.csv"), "1.0,2.0,3.0,4.0\n0.5,0.5,0.5,0.5\n").unwrap();
        let path = write_manifest(
            dir.path(),
            r#"{
                "feature_dim": 4,
                "features_file": "feats.csv",
                "items": [
                    {"id": "img1", "feature_row": 0, "captions": ["A dog runs."], "split": "train"},
                    {"id": "img2", "feature_row": 1, "captions": ["A cat sits.", "Cat!"], "split": "test"}
                ]
            }"#,
        );
        let corpus = load_manifest(&path).unwrap();
        assert_eq!(corpus.feature_dim, 4);
        assert_eq!(corpus.items.len(), 2);
        assert_eq!(corpus.items[0].feature.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(corpus.items[1].captions.len(), 2);
        assert_eq!(corpus.items[0].captions[0], tokenize("A dog runs."));
    }

    #[test]
    fn manifest_dimension_mismatch_names_item() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.csv"), "1.0,2.0\n").unwrap();
        let path = write_manifest(
            dir.path(),
            r#"{
                "feature_dim": 3,
                "items": [
                    {"id": "oddball", "feature_file": "bad.csv", "captions": ["x"], "split": "train"}
                ]
            }"#,
        );
        let err = load_manifest(&path).unwrap_err();
        match err {
            CorpusError::DimensionMismatch { item, expected, got } => {
                assert_eq!(item, "oddball");
                assert_eq!((expected, got), (3, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("f.csv"), "1.0\n").unwrap();
        let path = write_manifest(
            dir.path(),
            r#"{
                "feature_dim": 1,
                "items": [
                    {"id": "twin", "feature_file": "f.csv", "captions": ["x"], "split": "train"},
                    {"id": "twin", "feature_file": "f.csv", "captions": ["y"], "split": "train"}
                ]
            }"#,
        );
        match load_manifest(&path).unwrap_err() {
            CorpusError::BadItem { item, detail } => {
                assert_eq!(item, "twin");
                assert!(detail.contains("duplicate"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn manifest_malformed_json_and_missing_file_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "{ not json");
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            CorpusError::MalformedJson { .. }
        ));
        let path2 = write_manifest(
            dir.path(),
            r#"{
                "feature_dim": 2,
                "items": [
                    {"id": "ghost", "feature_file": "nowhere.csv", "captions": ["x"], "split": "train"}
                ]
            }"#,
        );
        match load_manifest(&path2).unwrap_err() {
            CorpusError::MissingFeatureFile { item, .. } => assert_eq!(item, "ghost"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn binary_and_csv_features_load_identically() {
        let dir = tempfile::tempdir().unwrap();
        // Values exactly representable in f32 so the widening round-trips.
        let m = Matrix::from_rows(&[vec![1.5, -2.25, 0.0], vec![4.0, 0.5, -8.0]]);
        let bin = dir.path().join("feats.glsf");
        write_features_binary(&bin, &m).unwrap();
        let csv = dir.path().join("feats.csv");
        fs::write(&csv, "1.5,-2.25,0.0\n4.0,0.5,-8.0\n").unwrap();
        let from_bin = load_features(&bin).unwrap();
        let from_csv = load_features(&csv).unwrap();
        assert_eq!(from_bin, from_csv);
        assert_eq!(from_bin, m);
        // The two encodings produce identical corpora end to end.
        let body = |file: &str| {
            format!(
                r#"{{"feature_dim": 3, "features_file": "{file}", "items": [
                    {{"id": "a", "feature_row": 0, "captions": ["one"], "split": "train"}},
                    {{"id": "b", "feature_row": 1, "captions": ["two"], "split": "test"}}
                ]}}"#
            )
        };
        fs::write(dir.path().join("m_bin.json"), body("feats.glsf")).unwrap();
        fs::write(dir.path().join("m_csv.json"), body("feats.csv")).unwrap();
        let corpus_bin = load_manifest(&dir.path().join("m_bin.json")).unwrap();
        let corpus_csv = load_manifest(&dir.path().join("m_csv.json")).unwrap();
        assert_eq!(corpus_bin, corpus_csv);
    }

    #[test]
    fn binary_features_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let path = dir.path().join("trunc.glsf");
        write_features_binary(&path, &m).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_features(&path).unwrap_err(),
            CorpusError::BadFeatureFile { .. }
        ));
    }
}

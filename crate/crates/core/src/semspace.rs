//! The common semantic space: normalized CCA between image features and
//! caption TF-IDF vectors, cosine cross-modal retrieval, and construction of
//! the guidance vectors fed to the guided cell.
//!
//! Projections are weighted by the canonical correlations raised to a power
//! `p` and L2-normalized, so cosine similarity in the space is meaningful.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{cholesky, cholesky_solve, sym_generalized_eig, Matrix, NumError, Vector};
use crate::textcorpus::{Corpus, CorpusItem, Split, TfIdfVectorizer};

pub const SEMSPACE_MAGIC: &[u8; 4] = b"GLSX";
pub const SEMSPACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("view row counts differ: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("requested dimension {d} exceeds min view dimension {max}")]
    DimTooLarge { d: usize, max: usize },
    #[error("CCA requires at least 2 paired samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("covariance is degenerate beyond the ridge: {detail}; increase the ridge scale")]
    Degenerate { detail: String },
    #[error("view {view} expects dimension {expected}, got {got}")]
    ViewDim {
        view: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("semantic index is empty")]
    EmptyIndex,
    #[error("guidance kind '{kind}' is missing its {what}")]
    MissingIngredient { kind: &'static str, what: &'static str },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a semantic-space file: bad magic bytes")]
    FileMagic,
    #[error("unsupported semantic-space file version {found}")]
    FileVersion { found: u32 },
    #[error("semantic-space file invalid: {detail}")]
    FileFormat { detail: String },
}

pub type CcaResult<T> = Result<T, CcaError>;

/// Which side of the paired views a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Image features.
    Image,
    /// Caption TF-IDF vectors.
    Text,
}

/// A fitted normalized-CCA model.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub u1: Matrix,
    pub u2: Matrix,
    /// Canonical correlations, descending, one per retained dimension.
    pub correlations: Vector,
    /// Exponent applied to the correlations when projecting.
    pub p: f64,
    pub mean1: Vector,
    pub mean2: Vector,
    pub ridge1: f64,
    pub ridge2: f64,
}

impl CcaModel {
    pub fn dim(&self) -> usize {
        self.u1.cols()
    }

    /// Centers, projects, weights by correlationsᵖ, and L2-normalizes.
    /// The zero vector stays zero.
    pub fn project(&self, x: &Vector, view: View) -> CcaResult<Vector> {
        let (u, mean, expected) = match view {
            View::Image => (&self.u1, &self.mean1, self.u1.rows()),
            View::Text => (&self.u2, &self.mean2, self.u2.rows()),
        };
        if x.dim() != expected {
            return Err(CcaError::ViewDim {
                view: match view {
                    View::Image => "image",
                    View::Text => "text",
                },
                expected,
                got: x.dim(),
            });
        }
        let centered = x.sub(mean)?;
        let mut projected = u.tr_matvec(&centered)?;
        for (j, v) in projected.data_mut().iter_mut().enumerate() {
            *v *= self.correlations.get(j).powf(self.p);
        }
        Ok(projected.normalized())
    }
}

fn column_means(x: &Matrix) -> Vector {
    let n = x.rows() as f64;
    let mut means = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (j, m) in means.iter_mut().enumerate() {
            *m += x.get(i, j);
        }
    }
    for m in &mut means {
        *m /= n;
    }
    Vector::from_vec(means)
}

fn centered(x: &Matrix, means: &Vector) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, x.get(i, j) - means.get(j));
        }
    }
    out
}

/// Sample covariance `aᵀ b / (n - 1)` of two centered matrices.
fn covariance(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..n {
        let ar = a.row(r);
        let br = b.row(r);
        for i in 0..a.cols() {
            for j in 0..b.cols() {
                out.set(i, j, out.get(i, j) + ar[i] * br[j]);
            }
        }
    }
    out.scale(1.0 / (n as f64 - 1.0))
}

fn mean_diagonal(m: &Matrix) -> f64 {
    let n = m.rows();
    (0..n).map(|i| m.get(i, i)).sum::<f64>() / n as f64
}

/// Fits CCA on paired views (one row per image-caption pair). Both
/// within-view covariances receive a ridge of `ridge_scale` times their mean
/// diagonal before the generalized eigenproblem is solved on the image side;
/// text-side directions come from the standard back-substitution.
pub fn fit_cca(
    x1: &Matrix,
    x2: &Matrix,
    d: usize,
    p: f64,
    ridge_scale: f64,
) -> CcaResult<CcaModel> {
    if x1.rows() != x2.rows() {
        return Err(CcaError::RowMismatch {
            left: x1.rows(),
            right: x2.rows(),
        });
    }
    let n = x1.rows();
    if n < 2 {
        return Err(CcaError::TooFewSamples { n });
    }
    let max_d = x1.cols().min(x2.cols());
    if d == 0 || d > max_d {
        return Err(CcaError::DimTooLarge { d, max: max_d });
    }
    let mean1 = column_means(x1);
    let mean2 = column_means(x2);
    let c1 = centered(x1, &mean1);
    let c2 = centered(x2, &mean2);
    let mut s11 = covariance(&c1, &c1);
    let mut s22 = covariance(&c2, &c2);
    let s12 = covariance(&c1, &c2);
    let ridge1 = ridge_scale * mean_diagonal(&s11);
    let ridge2 = ridge_scale * mean_diagonal(&s22);
    if ridge1 <= 0.0 || ridge2 <= 0.0 {
        return Err(CcaError::Degenerate {
            detail: "a view has zero variance".into(),
        });
    }
    for i in 0..s11.rows() {
        s11.set(i, i, s11.get(i, i) + ridge1);
    }
    for i in 0..s22.rows() {
        s22.set(i, i, s22.get(i, i) + ridge2);
    }
    // Z = Σ22⁻¹ Σ21 via the Cholesky factor of Σ22.
    let l22 = cholesky(&s22).map_err(|e| CcaError::Degenerate {
        detail: e.to_string(),
    })?;
    let s21 = s12.transpose();
    let mut z = Matrix::zeros(s21.rows(), s21.cols());
    for j in 0..s21.cols() {
        let solved = cholesky_solve(&l22, &s21.column(j));
        for i in 0..z.rows() {
            z.set(i, j, solved.get(i));
        }
    }
    // A = Σ12 Σ22⁻¹ Σ21, symmetric PSD; eigenvalues are squared correlations.
    let mut a = s12.matmul(&z)?;
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let (eigenvalues, vectors) = sym_generalized_eig(&a, &s11).map_err(|e| match e {
        NumError::NotPositiveDefinite { .. } => CcaError::Degenerate {
            detail: e.to_string(),
        },
        other => CcaError::Num(other),
    })?;
    let mut u1 = Matrix::zeros(x1.cols(), d);
    let mut u2 = Matrix::zeros(x2.cols(), d);
    let mut correlations = Vec::with_capacity(d);
    for j in 0..d {
        let rho = eigenvalues.get(j).max(0.0).sqrt();
        correlations.push(rho);
        let uj = vectors.column(j);
        for i in 0..u1.rows() {
            u1.set(i, j, uj.get(i));
        }
        // v = Σ22⁻¹ Σ21 u / ρ, which is Σ22-orthonormal.
        if rho > 1e-12 {
            let vj = z.matvec(&uj)?.scale(1.0 / rho);
            for i in 0..u2.rows() {
                u2.set(i, j, vj.get(i));
            }
        }
    }
    Ok(CcaModel {
        u1,
        u2,
        correlations: Vector::from_vec(correlations),
        p,
        mean1,
        mean2,
        ridge1,
        ridge2,
    })
}

/// One indexed training caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedCaption {
    pub item_id: String,
    pub caption_idx: usize,
    pub tokens: Vec<String>,
}

/// Projected training captions for cosine retrieval; one row per caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticIndex {
    pub rows: Matrix,
    pub refs: Vec<IndexedCaption>,
}

impl SemanticIndex {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Projects every training caption into the semantic space.
pub fn build_index(
    model: &CcaModel,
    vectorizer: &TfIdfVectorizer,
    corpus: &Corpus,
) -> CcaResult<SemanticIndex> {
    let mut refs = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for item in corpus.train() {
        for (caption_idx, caption) in item.captions.iter().enumerate() {
            let bow = vectorizer.vectorize(caption);
            let projected = model.project(&bow, View::Text)?;
            rows.push(projected.data().to_vec());
            refs.push(IndexedCaption {
                item_id: item.id.clone(),
                caption_idx,
                tokens: caption.clone(),
            });
        }
    }
    if refs.is_empty() {
        return Err(CcaError::EmptyIndex);
    }
    Ok(SemanticIndex {
        rows: Matrix::from_rows(&rows),
        refs,
    })
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub row: usize,
    pub item_id: String,
    pub caption_idx: usize,
    pub score: f64,
}

/// Ranks training captions by cosine similarity to the projected image.
/// Ties break toward the lower caption row, making the order total.
pub fn retrieve(
    model: &CcaModel,
    index: &SemanticIndex,
    image_feature: &Vector,
    top_t: usize,
) -> CcaResult<Vec<Retrieval>> {
    if index.is_empty() {
        return Err(CcaError::EmptyIndex);
    }
    let query = model.project(image_feature, View::Image)?;
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|row| {
            let mut dot = 0.0;
            for (a, b) in index.rows.row(row).iter().zip(query.data()) {
                dot += a * b;
            }
            (row, dot)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite cosine scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(top_t);
    Ok(scored
        .into_iter()
        .map(|(row, score)| Retrieval {
            row,
            item_id: index.refs[row].item_id.clone(),
            caption_idx: index.refs[row].caption_idx,
            score,
        })
        .collect())
}

/// The guidance flavors a guided cell can consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    /// Bag-of-words of the top retrieved captions.
    Ret,
    /// The image's own semantic-space embedding.
    Emb,
    /// The raw image feature.
    Img,
}

impl GuidanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceKind::Ret => "ret",
            GuidanceKind::Emb => "emb",
            GuidanceKind::Img => "img",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub kind: GuidanceKind,
    pub vector: Vector,
}

/// Builds the guidance vector for one image. `ret` needs the model, index and
/// vectorizer; `emb` needs the model; `img` needs nothing beyond the feature.
pub fn build_guidance(
    kind: GuidanceKind,
    image_feature: &Vector,
    model: Option<&CcaModel>,
    index: Option<&SemanticIndex>,
    vectorizer: Option<&TfIdfVectorizer>,
    top_t: usize,
) -> CcaResult<Guidance> {
    let vector = match kind {
        GuidanceKind::Img => image_feature.clone(),
        GuidanceKind::Emb => {
            let model = model.ok_or(CcaError::MissingIngredient {
                kind: "emb",
                what: "CCA model",
            })?;
            model.project(image_feature, View::Image)?
        }
        GuidanceKind::Ret => {
            let model = model.ok_or(CcaError::MissingIngredient {
                kind: "ret",
                what: "CCA model",
            })?;
            let index = index.ok_or(CcaError::MissingIngredient {
                kind: "ret",
                what: "semantic index",
            })?;
            let vectorizer = vectorizer.ok_or(CcaError::MissingIngredient {
                kind: "ret",
                what: "TF-IDF vectorizer",
            })?;
            let hits = retrieve(model, index, image_feature, top_t)?;
            let mut counts = Vector::zeros(vectorizer.dim());
            for hit in &hits {
                counts.add_assign(&vectorizer.term_counts(&index.refs[hit.row].tokens))?;
            }
            counts.normalized()
        }
    };
    Ok(Guidance { kind, vector })
}

/// How image rows pair with caption rows when fitting CCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewPairing {
    /// One row per caption; the image feature repeats across its captions.
    PerCaption,
    /// One row per image; its captions concatenate into one document.
    PerImage,
}

/// A fitted semantic space: the vectorizer, the CCA model, and the caption
/// index, as produced from a corpus' training split.
#[derive(Debug, Clone)]
pub struct SemanticSpace {
    pub vectorizer: TfIdfVectorizer,
    pub cca: CcaModel,
    pub index: SemanticIndex,
}

/// End-to-end fit on the training split. The space dimension is capped at
/// what the fitted views can support (feature dim and actual BoW vocabulary).
pub fn fit_semantic_space(
    corpus: &Corpus,
    bow_size: usize,
    d: usize,
    p: f64,
    ridge_scale: f64,
    pairing: ViewPairing,
) -> CcaResult<SemanticSpace> {
    let train_items: Vec<&CorpusItem> = corpus.split_items(Split::Train).collect();
    if train_items.is_empty() {
        return Err(CcaError::EmptyIndex);
    }
    let documents: Vec<Vec<String>> = match pairing {
        ViewPairing::PerCaption => train_items
            .iter()
            .flat_map(|it| it.captions.iter().cloned())
            .collect(),
        ViewPairing::PerImage => train_items
            .iter()
            .map(|it| it.captions.iter().flatten().cloned().collect())
            .collect(),
    };
    let doc_refs: Vec<&[String]> = documents.iter().map(|d| d.as_slice()).collect();
    let vectorizer = TfIdfVectorizer::fit(doc_refs.iter().copied(), bow_size);
    let mut image_rows: Vec<Vec<f64>> = Vec::new();
    let mut text_rows: Vec<Vec<f64>> = Vec::new();
    match pairing {
        ViewPairing::PerCaption => {
            for item in &train_items {
                for caption in &item.captions {
                    image_rows.push(item.feature.data().to_vec());
                    text_rows.push(vectorizer.vectorize(caption).data().to_vec());
                }
            }
        }
        ViewPairing::PerImage => {
            for (item, doc) in train_items.iter().zip(&documents) {
                image_rows.push(item.feature.data().to_vec());
                text_rows.push(vectorizer.vectorize(doc).data().to_vec());
            }
        }
    }
    let x1 = Matrix::from_rows(&image_rows);
    let x2 = Matrix::from_rows(&text_rows);
    let d = d.min(x1.cols()).min(x2.cols()).max(1);
    let cca = fit_cca(&x1, &x2, d, p, ridge_scale)?;
    let index = build_index(&cca, &vectorizer, corpus)?;
    Ok(SemanticSpace {
        vectorizer,
        cca,
        index,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorizerMeta {
    columns: Vec<String>,
    idf: Vec<f64>,
    n_docs: usize,
}

#[derive(Serialize, Deserialize)]
struct SpaceHeader {
    kind: String,
    image_dim: usize,
    bow_dim: usize,
    dim: usize,
    p: f64,
    ridge1: f64,
    ridge2: f64,
    refs: Vec<IndexedCaption>,
    vectorizer: VectorizerMeta,
    tensors: Vec<TensorMeta>,
}

fn write_container(path: &Path, header: &SpaceHeader, tensors: &[&[f64]]) -> CcaResult<()> {
    let header_bytes = serde_json::to_vec(header).map_err(|e| CcaError::FileFormat {
        detail: e.to_string(),
    })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SEMSPACE_MAGIC);
    bytes.extend_from_slice(&SEMSPACE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for tensor in tensors {
        for &v in *tensor {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| CcaError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| CcaError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_container(path: &Path) -> CcaResult<(SpaceHeader, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| CcaError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 12 || &bytes[0..4] != SEMSPACE_MAGIC {
        return Err(CcaError::FileMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SEMSPACE_VERSION {
        return Err(CcaError::FileVersion { found: version });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(CcaError::FileFormat {
            detail: "header extends past end of file".into(),
        });
    }
    let header: SpaceHeader =
        serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| CcaError::FileFormat {
            detail: e.to_string(),
        })?;
    let mut reader = &bytes[12 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for meta in &header.tensors {
        let len = meta.rows * meta.cols;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            reader
                .read_exact(&mut buf)
                .map_err(|_| CcaError::FileFormat {
                    detail: format!("tensor '{}' payload ended early", meta.name),
                })?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.push(values);
    }
    if !reader.is_empty() {
        return Err(CcaError::FileFormat {
            detail: format!("{} unexpected trailing bytes", reader.len()),
        });
    }
    Ok((header, tensors))
}

/// Persists the whole semantic space (model + index + vectorizer) in the
/// container format: magic, version, JSON header, then f64 tensors.
pub fn save_semantic_space(space: &SemanticSpace, path: &Path) -> CcaResult<()> {
    let header = SpaceHeader {
        kind: "semspace".into(),
        image_dim: space.cca.u1.rows(),
        bow_dim: space.cca.u2.rows(),
        dim: space.cca.dim(),
        p: space.cca.p,
        ridge1: space.cca.ridge1,
        ridge2: space.cca.ridge2,
        refs: space.index.refs.clone(),
        vectorizer: VectorizerMeta {
            columns: space.vectorizer.columns().to_vec(),
            idf: space.vectorizer.idf().to_vec(),
            n_docs: space.vectorizer.n_docs(),
        },
        tensors: vec![
            TensorMeta {
                name: "u1".into(),
                rows: space.cca.u1.rows(),
                cols: space.cca.u1.cols(),
            },
            TensorMeta {
                name: "u2".into(),
                rows: space.cca.u2.rows(),
                cols: space.cca.u2.cols(),
            },
            TensorMeta {
                name: "correlations".into(),
                rows: 1,
                cols: space.cca.correlations.dim(),
            },
            TensorMeta {
                name: "mean1".into(),
                rows: 1,
                cols: space.cca.mean1.dim(),
            },
            TensorMeta {
                name: "mean2".into(),
                rows: 1,
                cols: space.cca.mean2.dim(),
            },
            TensorMeta {
                name: "index_rows".into(),
                rows: space.index.rows.rows(),
                cols: space.index.rows.cols(),
            },
        ],
    };
    write_container(
        path,
        &header,
        &[
            space.cca.u1.data(),
            space.cca.u2.data(),
            space.cca.correlations.data(),
            space.cca.mean1.data(),
            space.cca.mean2.data(),
            space.index.rows.data(),
        ],
    )
}

pub fn load_semantic_space(path: &Path) -> CcaResult<SemanticSpace> {
    let (header, mut tensors) = read_container(path)?;
    if header.kind != "semspace" || header.tensors.len() != 6 {
        return Err(CcaError::FileFormat {
            detail: format!("unexpected container kind '{}'", header.kind),
        });
    }
    let index_rows = tensors.pop().expect("6 tensors");
    let mean2 = tensors.pop().expect("5 tensors");
    let mean1 = tensors.pop().expect("4 tensors");
    let correlations = tensors.pop().expect("3 tensors");
    let u2 = tensors.pop().expect("2 tensors");
    let u1 = tensors.pop().expect("1 tensor");
    let cca = CcaModel {
        u1: Matrix::from_vec(header.image_dim, header.dim, u1),
        u2: Matrix::from_vec(header.bow_dim, header.dim, u2),
        correlations: Vector::from_vec(correlations),
        p: header.p,
        mean1: Vector::from_vec(mean1),
        mean2: Vector::from_vec(mean2),
        ridge1: header.ridge1,
        ridge2: header.ridge2,
    };
    let n_rows = header.refs.len();
    if n_rows == 0 {
        return Err(CcaError::EmptyIndex);
    }
    let index = SemanticIndex {
        rows: Matrix::from_vec(n_rows, header.dim, index_rows),
        refs: header.refs,
    };
    let vectorizer = TfIdfVectorizer::from_parts(
        header.vectorizer.columns,
        header.vectorizer.idf,
        header.vectorizer.n_docs,
    );
    Ok(SemanticSpace {
        vectorizer,
        cca,
        index,
    })
}

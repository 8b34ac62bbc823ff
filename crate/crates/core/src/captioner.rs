//! The full caption model: image projection, word embeddings, a recurrent
//! cell, and a softmax word decoder, trained by maximizing caption
//! log-likelihood with per-item RMSProp updates.
//!
//! The image acts as the begin symbol: its projection occupies timestep 1
//! and predicts the first word; the last word step predicts END.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{
    sequence_backward, sequence_forward, CellError, CellParams, CellState, GlstmParams,
    LstmParams, StepCache,
};
use crate::hash::fnv1a64;
use crate::numkit::{log_softmax, softmax, Matrix, NumError, Vector};
use crate::textcorpus::{Corpus, CorpusItem, Split, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("caption does not end with the END index")]
    CaptionWithoutEnd,
    #[error("cache does not match this model (stale cache)")]
    StaleCache,
    #[error("guidance vector missing for item '{item}'")]
    GuidanceMissing { item: String },
    #[error("the {split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("training diverged: loss became non-finite in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes")]
    CheckpointMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated: {detail}")]
    CheckpointTruncated { detail: String },
    #[error("checkpoint header invalid: {detail}")]
    CheckpointHeader { detail: String },
    #[error("vocabulary checksum mismatch: header says {stored:#x}, tokens hash to {computed:#x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("training config invalid: {detail}")]
    BadTrainConfig { detail: String },
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Which recurrent cell a model is built around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Glstm { guidance_dim: usize },
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cell: CellKind,
    /// Gate biases on by default; switch off for equation-exact reductions.
    pub biases: bool,
    /// Initialize the four guidance projections to zero instead of uniform.
    pub zero_guidance_weights: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, embed_dim: usize, hidden_dim: usize, cell: CellKind) -> Self {
        ModelConfig {
            feature_dim,
            embed_dim,
            hidden_dim,
            cell,
            biases: true,
            zero_guidance_weights: false,
        }
    }
}

/// Training hyperparameters: per-item RMSProp with elementwise gradient
/// clipping, inverted dropout, and validation-based early stopping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            rms_decay: 0.99,
            epsilon: 1e-8,
            grad_clip: 5.0,
            dropout: 0.5,
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> ModelResult<()> {
        let bad = |detail: String| Err(ModelError::BadTrainConfig { detail });
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.rms_decay.is_nan() || self.rms_decay <= 0.0 || self.rms_decay >= 1.0 {
            return bad(format!("rms_decay {} must be in (0, 1)", self.rms_decay));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        if self.dropout.is_nan() || self.dropout < 0.0 || self.dropout >= 1.0 {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Negative log-likelihood of one sequence, with its per-token perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub nll: f64,
    pub tokens: usize,
    pub perplexity: f64,
}

impl LossReport {
    fn new(nll: f64, tokens: usize) -> Self {
        LossReport {
            nll,
            tokens,
            perplexity: (nll / tokens as f64).exp(),
        }
    }
}

/// The caption model parameters plus the vocabulary they were trained
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    vocab: Vocabulary,
    pub w_img: Matrix,
    pub w_emb: Matrix,
    pub cell: CellParams,
    pub w_dec: Matrix,
    pub b_dec: Vector,
}

impl CaptionModel {
    /// Fresh model with uniform [-1/√fan_in, 1/√fan_in] weights. Every tensor
    /// draws from its own seed stream, so models that share tensor names
    /// (e.g. LSTM vs gLSTM) start from identical shared weights.
    pub fn init(vocab: Vocabulary, config: &ModelConfig, seed: u64) -> CaptionModel {
        let k = vocab.size();
        let cell = match config.cell {
            CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(
                config.hidden_dim,
                config.embed_dim,
                config.biases,
            )),
            CellKind::Glstm { guidance_dim } => CellParams::Glstm(GlstmParams::zeros(
                config.hidden_dim,
                config.embed_dim,
                guidance_dim,
                config.biases,
            )),
        };
        let mut model = CaptionModel {
            vocab,
            w_img: Matrix::zeros(config.embed_dim, config.feature_dim),
            w_emb: Matrix::zeros(config.embed_dim, k),
            cell,
            w_dec: Matrix::zeros(k, config.hidden_dim),
            b_dec: Vector::zeros(k),
        };
        for (name, cols, tensor) in model.tensors_with_fanin_mut() {
            if name == "b_dec" {
                continue; // stays zero
            }
            if name.starts_with("b_") {
                // Forget-gate bias starts at 1.0 to keep early memory open.
                let fill = if name == "b_f" { 1.0 } else { 0.0 };
                for v in tensor.iter_mut() {
                    *v = fill;
                }
                continue;
            }
            if name.starts_with("w_") && name.ends_with('q') && config.zero_guidance_weights {
                continue;
            }
            let scale = 1.0 / (cols as f64).sqrt();
            let mut rng = tensor_rng(seed, name);
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_img.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    pub fn guidance_dim(&self) -> Option<usize> {
        self.cell.guidance_dim()
    }

    /// Parameter tensors in the declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![("w_img", self.w_img.data()), ("w_emb", self.w_emb.data())];
        out.extend(self.cell.tensors());
        out.push(("w_dec", self.w_dec.data()));
        out.push(("b_dec", self.b_dec.data()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("w_img", self.w_img.data_mut()),
            ("w_emb", self.w_emb.data_mut()),
        ];
        out.extend(self.cell.tensors_mut());
        out.push(("w_dec", self.w_dec.data_mut()));
        out.push(("b_dec", self.b_dec.data_mut()));
        out
    }

    fn tensor_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let mut out = vec![
            ("w_img", self.w_img.rows(), self.w_img.cols()),
            ("w_emb", self.w_emb.rows(), self.w_emb.cols()),
        ];
        let base = self.cell.base();
        out.push(("w_ix", base.w_ix.rows(), base.w_ix.cols()));
        out.push(("w_im", base.w_im.rows(), base.w_im.cols()));
        out.push(("w_fx", base.w_fx.rows(), base.w_fx.cols()));
        out.push(("w_fm", base.w_fm.rows(), base.w_fm.cols()));
        out.push(("w_ox", base.w_ox.rows(), base.w_ox.cols()));
        out.push(("w_om", base.w_om.rows(), base.w_om.cols()));
        out.push(("w_cx", base.w_cx.rows(), base.w_cx.cols()));
        out.push(("w_cm", base.w_cm.rows(), base.w_cm.cols()));
        if base.biases.is_some() {
            let h = self.hidden_dim();
            out.push(("b_i", h, 1));
            out.push(("b_f", h, 1));
            out.push(("b_o", h, 1));
            out.push(("b_c", h, 1));
        }
        if let CellParams::Glstm(g) = &self.cell {
            out.push(("w_iq", g.w_iq.rows(), g.w_iq.cols()));
            out.push(("w_fq", g.w_fq.rows(), g.w_fq.cols()));
            out.push(("w_oq", g.w_oq.rows(), g.w_oq.cols()));
            out.push(("w_cq", g.w_cq.rows(), g.w_cq.cols()));
        }
        out.push(("w_dec", self.w_dec.rows(), self.w_dec.cols()));
        out.push(("b_dec", self.b_dec.dim(), 1));
        out
    }

    /// (name, fan-in, data) triples for initialization.
    fn tensors_with_fanin_mut(&mut self) -> Vec<(&'static str, usize, &mut [f64])> {
        let shapes: Vec<(&'static str, usize, usize)> = self.tensor_shapes();
        self.tensors_mut()
            .into_iter()
            .zip(shapes)
            .map(|((name, data), (_, _, cols))| (name, cols, data))
            .collect()
    }

    /// Column `word` of the embedding matrix; identical to `W_emb · e_word`.
    pub fn embedding(&self, word: usize) -> Vector {
        self.w_emb.column(word)
    }

    /// Builds the model input sequence and the per-step prediction targets:
    /// the projected image feature is step 1, the words follow, and step `l`
    /// predicts `caption[l]` (so the final step predicts END).
    pub fn assemble_sequence(
        &self,
        feature: &Vector,
        caption: &[usize],
    ) -> ModelResult<(Vec<Vector>, Vec<usize>)> {
        if caption.last() != Some(&self.vocab.end_index()) {
            return Err(ModelError::CaptionWithoutEnd);
        }
        let mut inputs = Vec::with_capacity(caption.len());
        inputs.push(self.w_img.matvec(feature)?);
        for &word in &caption[..caption.len() - 1] {
            inputs.push(self.embedding(word));
        }
        Ok((inputs, caption.to_vec()))
    }

    /// Negative log-likelihood of a caption given its image feature, with the
    /// caches needed by [`CaptionModel::backward`]. Dropout off.
    pub fn forward_loss(
        &self,
        feature: &Vector,
        caption: &[usize],
        guidance: Option<&Vector>,
    ) -> ModelResult<(LossReport, ForwardCache)> {
        self.forward_loss_impl(feature, caption, guidance, None)
    }

    /// Training-mode forward pass: inverted dropout on the assembled inputs
    /// and on the hidden states entering the decoder.
    pub(crate) fn forward_loss_dropout(
        &self,
        feature: &Vector,
        caption: &[usize],
        guidance: Option<&Vector>,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> ModelResult<(LossReport, ForwardCache)> {
        if rate == 0.0 {
            return self.forward_loss_impl(feature, caption, guidance, None);
        }
        let (inputs, _) = self.assemble_sequence(feature, caption)?;
        let keep = 1.0 - rate;
        let draw_mask = |rng: &mut ChaCha8Rng, dim: usize| -> Vector {
            Vector::from_vec(
                (0..dim)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        };
        let mut in_masks = Vec::with_capacity(inputs.len());
        let mut out_masks = Vec::with_capacity(inputs.len());
        for _ in 0..inputs.len() {
            in_masks.push(draw_mask(rng, self.embed_dim()));
            out_masks.push(draw_mask(rng, self.hidden_dim()));
        }
        self.forward_loss_impl(feature, caption, guidance, Some((in_masks, out_masks)))
    }

    fn forward_loss_impl(
        &self,
        feature: &Vector,
        caption: &[usize],
        guidance: Option<&Vector>,
        masks: Option<(Vec<Vector>, Vec<Vector>)>,
    ) -> ModelResult<(LossReport, ForwardCache)> {
        let (inputs, targets) = self.assemble_sequence(feature, caption)?;
        let (in_masks, out_masks) = match masks {
            Some((i, o)) => (Some(i), Some(o)),
            None => (None, None),
        };
        let fed: Vec<Vector> = match &in_masks {
            Some(masks) => inputs
                .iter()
                .zip(masks)
                .map(|(x, m)| x.hadamard(m))
                .collect::<Result<_, _>>()?,
            None => inputs.clone(),
        };
        let init = CellState::zeros(self.hidden_dim());
        let (hidden, cell_cache) = sequence_forward(&self.cell, &fed, guidance, &init)?;
        let decoded: Vec<Vector> = match &out_masks {
            Some(masks) => hidden
                .iter()
                .zip(masks)
                .map(|(m, mask)| m.hadamard(mask))
                .collect::<Result<_, _>>()?,
            None => hidden.clone(),
        };
        let mut nll = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for (m, &target) in decoded.iter().zip(&targets) {
            let mut logits = self.w_dec.matvec(m)?;
            logits.add_assign(&self.b_dec)?;
            let logp = log_softmax(&logits);
            nll -= logp.get(target);
            probs.push(softmax(&logits));
        }
        let report = LossReport::new(nll, targets.len());
        let cache = ForwardCache {
            feature: feature.clone(),
            targets,
            cell_cache,
            decoded,
            probs,
            in_masks,
            out_masks,
            vocab_size: self.vocab_size(),
            hidden_dim: self.hidden_dim(),
        };
        Ok((report, cache))
    }

    /// Analytic gradients of the summed NLL with respect to every parameter
    /// and, for guided cells, the guidance vector.
    pub fn backward(&self, cache: &ForwardCache) -> ModelResult<ModelGradients> {
        if cache.vocab_size != self.vocab_size()
            || cache.hidden_dim != self.hidden_dim()
            || cache.cell_cache.len() != cache.targets.len()
        {
            return Err(ModelError::StaleCache);
        }
        let mut grads = ModelGradients::zeros_like(self);
        let mut grad_hidden = Vec::with_capacity(cache.targets.len());
        for (l, (&target, p)) in cache.targets.iter().zip(&cache.probs).enumerate() {
            // d(logits) = softmax - onehot(target)
            let mut dlogits = p.clone();
            dlogits.set(target, dlogits.get(target) - 1.0);
            grads.w_dec.add_outer(&dlogits, &cache.decoded[l])?;
            grads.b_dec.add_assign(&dlogits)?;
            let mut dm = self.w_dec.tr_matvec(&dlogits)?;
            if let Some(masks) = &cache.out_masks {
                dm = dm.hadamard(&masks[l])?;
            }
            grad_hidden.push(dm);
        }
        let seq = sequence_backward(&self.cell, &cache.cell_cache, &grad_hidden)?;
        grads.cell = seq.params;
        grads.guidance = seq.guidance;
        let mut dinputs = seq.inputs;
        if let Some(masks) = &cache.in_masks {
            for (dx, mask) in dinputs.iter_mut().zip(masks) {
                *dx = dx.hadamard(mask)?;
            }
        }
        grads.w_img.add_outer(&dinputs[0], &cache.feature)?;
        for (l, dx) in dinputs.iter().enumerate().skip(1) {
            let word = cache.targets[l - 1];
            for r in 0..self.embed_dim() {
                let cur = grads.w_emb.get(r, word);
                grads.w_emb.set(r, word, cur + dx.get(r));
            }
        }
        Ok(grads)
    }

    /// Starts incremental decoding. Validates guidance presence and shape up
    /// front so per-step calls cannot fail on configuration.
    pub fn decode_session<'a>(
        &'a self,
        guidance: Option<&Vector>,
    ) -> ModelResult<DecodeSession<'a>> {
        match (self.guidance_dim(), guidance) {
            (Some(_), Some(g)) => Ok(DecodeSession {
                model: self,
                guidance: Some(g.clone()),
            }),
            (None, None) => Ok(DecodeSession {
                model: self,
                guidance: None,
            }),
            (Some(_), None) => Err(ModelError::Cell(CellError::MissingGuidance)),
            (None, Some(_)) => Err(ModelError::Cell(CellError::UnexpectedGuidance)),
        }
    }
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

fn stream_rng(seed: u64, label: &str, epoch: usize) -> ChaCha8Rng {
    let tag = format!("{label}:{epoch}");
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(tag.as_bytes()))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    feature: Vector,
    targets: Vec<usize>,
    cell_cache: StepCache,
    decoded: Vec<Vector>,
    probs: Vec<Vector>,
    in_masks: Option<Vec<Vector>>,
    out_masks: Option<Vec<Vector>>,
    vocab_size: usize,
    hidden_dim: usize,
}

impl ForwardCache {
    /// Per-step next-token distributions (after dropout, if any).
    pub fn step_probs(&self) -> &[Vector] {
        &self.probs
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// Gradient container mirroring [`CaptionModel`]'s tensor layout.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub w_img: Matrix,
    pub w_emb: Matrix,
    pub cell: CellParams,
    pub w_dec: Matrix,
    pub b_dec: Vector,
    /// Gradient with respect to the guidance vector; not a parameter.
    pub guidance: Option<Vector>,
}

impl ModelGradients {
    pub fn zeros_like(model: &CaptionModel) -> Self {
        ModelGradients {
            w_img: Matrix::zeros(model.w_img.rows(), model.w_img.cols()),
            w_emb: Matrix::zeros(model.w_emb.rows(), model.w_emb.cols()),
            cell: model.cell.zeros_like(),
            w_dec: Matrix::zeros(model.w_dec.rows(), model.w_dec.cols()),
            b_dec: Vector::zeros(model.b_dec.dim()),
            guidance: None,
        }
    }

    /// Same order as [`CaptionModel::tensors`].
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![("w_img", self.w_img.data()), ("w_emb", self.w_emb.data())];
        out.extend(self.cell.tensors());
        out.push(("w_dec", self.w_dec.data()));
        out.push(("b_dec", self.b_dec.data()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("w_img", self.w_img.data_mut()),
            ("w_emb", self.w_emb.data_mut()),
        ];
        out.extend(self.cell.tensors_mut());
        out.push(("w_dec", self.w_dec.data_mut()));
        out.push(("b_dec", self.b_dec.data_mut()));
        out
    }
}

/// RMSProp accumulators plus the number of epochs already run, carried in
/// checkpoints so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub rms: Vec<Vec<f64>>,
    pub epochs_completed: usize,
}

impl TrainState {
    fn zeros_like(model: &CaptionModel) -> Self {
        TrainState {
            rms: model
                .tensors()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
            epochs_completed: 0,
        }
    }
}

/// One elementwise RMSProp update: clip the gradient, refresh the squared
/// accumulator, and step against it.
pub fn rmsprop_step(
    model: &mut CaptionModel,
    grads: &ModelGradients,
    state: &mut TrainState,
    config: &TrainConfig,
) {
    let grad_tensors = grads.tensors();
    for ((tensor_idx, (_, param)), (_, grad)) in
        model.tensors_mut().into_iter().enumerate().zip(grad_tensors)
    {
        let acc = &mut state.rms[tensor_idx];
        for k in 0..param.len() {
            let g = grad[k].clamp(-config.grad_clip, config.grad_clip);
            acc[k] = config.rms_decay * acc[k] + (1.0 - config.rms_decay) * g * g;
            param[k] -= config.learning_rate * g / (acc[k].sqrt() + config.epsilon);
        }
    }
}

/// Per-item guidance vectors, keyed by corpus item id.
pub type GuidanceMap = HashMap<String, Vector>;

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_perplexity: f64,
    pub val_nll: f64,
    pub val_perplexity: f64,
    pub improved: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The best-validation snapshot.
    pub model: CaptionModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub state: TrainState,
}

fn guidance_for<'a>(
    model: &CaptionModel,
    guidance: Option<&'a GuidanceMap>,
    item: &CorpusItem,
) -> ModelResult<Option<&'a Vector>> {
    if model.guidance_dim().is_none() {
        return Ok(None);
    }
    match guidance.and_then(|map| map.get(&item.id)) {
        Some(g) => Ok(Some(g)),
        None => Err(ModelError::GuidanceMissing {
            item: item.id.clone(),
        }),
    }
}

fn split_nll(
    model: &CaptionModel,
    items: &[&CorpusItem],
    guidance: Option<&GuidanceMap>,
) -> ModelResult<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for item in items {
        let g = guidance_for(model, guidance, item)?;
        for caption in &item.captions {
            let encoded = model.vocab.encode(caption);
            let (report, _) = model.forward_loss(&item.feature, &encoded, g)?;
            nll += report.nll;
            tokens += report.tokens;
        }
    }
    Ok((nll, tokens))
}

/// Trains with per-item RMSProp updates, a seeded shuffle each epoch,
/// inverted dropout, and early stopping on validation NLL. Returns the
/// best-validation snapshot. Deterministic for a fixed seed.
pub fn train(
    model: CaptionModel,
    corpus: &Corpus,
    guidance: Option<&GuidanceMap>,
    config: &TrainConfig,
    resume: Option<TrainState>,
) -> ModelResult<TrainOutcome> {
    config.validate()?;
    let train_items: Vec<&CorpusItem> = corpus.train().collect();
    let val_items: Vec<&CorpusItem> = corpus.split_items(Split::Val).collect();
    if train_items.is_empty() {
        return Err(ModelError::EmptySplit { split: "train" });
    }
    if val_items.is_empty() {
        return Err(ModelError::EmptySplit { split: "val" });
    }
    let mut model = model;
    let mut state = resume.unwrap_or_else(|| TrainState::zeros_like(&model));
    let start_epoch = state.epochs_completed;

    // Flatten to (item index, encoded caption) pairs once.
    let mut pairs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, item) in train_items.iter().enumerate() {
        for caption in &item.captions {
            pairs.push((idx, model.vocab.encode(caption)));
        }
    }

    let (init_nll, init_tokens) = split_nll(&model, &val_items, guidance)?;
    let mut best_val = init_nll / init_tokens as f64;
    let mut best_model = model.clone();
    let mut best_epoch = start_epoch;
    let mut streak = 0usize;
    let mut log = Vec::new();

    for epoch in (start_epoch + 1)..=(start_epoch + config.max_epochs) {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng = stream_rng(config.seed, "shuffle", epoch);
        // Fisher-Yates with the epoch-derived stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut dropout_rng = stream_rng(config.seed, "dropout", epoch);
        let mut train_nll = 0.0;
        let mut train_tokens = 0usize;
        for &pair_idx in &order {
            let (item_idx, encoded) = &pairs[pair_idx];
            let item = train_items[*item_idx];
            let g = guidance_for(&model, guidance, item)?;
            let (report, cache) = model.forward_loss_dropout(
                &item.feature,
                encoded,
                g,
                config.dropout,
                &mut dropout_rng,
            )?;
            if !report.nll.is_finite() {
                return Err(ModelError::Divergence { epoch });
            }
            train_nll += report.nll;
            train_tokens += report.tokens;
            let grads = model.backward(&cache)?;
            rmsprop_step(&mut model, &grads, &mut state, config);
        }
        state.epochs_completed = epoch;
        let (val_nll, val_tokens) = split_nll(&model, &val_items, guidance)?;
        if !val_nll.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        let val_mean = val_nll / val_tokens as f64;
        let improved = val_mean < best_val;
        if improved {
            best_val = val_mean;
            best_model = model.clone();
            best_epoch = epoch;
            streak = 0;
        } else {
            streak += 1;
        }
        log.push(EpochLog {
            epoch,
            train_nll,
            train_perplexity: (train_nll / train_tokens as f64).exp(),
            val_nll,
            val_perplexity: val_mean.exp(),
            improved,
        });
        if streak >= config.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_nll: best_val,
        state,
    })
}

/// Incremental decoding over a fixed (model, guidance) pair.
pub struct DecodeSession<'a> {
    model: &'a CaptionModel,
    guidance: Option<Vector>,
}

/// State after consuming a prefix: the recurrent state and the log
/// distribution over the next token.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub state: CellState,
    pub log_probs: Vector,
}

impl DecodeSession<'_> {
    pub fn model(&self) -> &CaptionModel {
        self.model
    }

    /// Feeds the image step and returns the distribution over the first word.
    pub fn begin(&self, feature: &Vector) -> ModelResult<DecodeState> {
        let x = self.model.w_img.matvec(feature)?;
        self.step(&x, &CellState::zeros(self.model.hidden_dim()))
    }

    /// Feeds one generated token.
    pub fn advance(&self, prev: &DecodeState, token: usize) -> ModelResult<DecodeState> {
        let x = self.model.embedding(token);
        self.step(&x, &prev.state)
    }

    fn step(&self, x: &Vector, prev: &CellState) -> ModelResult<DecodeState> {
        let (outputs, cache) = sequence_forward(
            &self.model.cell,
            std::slice::from_ref(x),
            self.guidance.as_ref(),
            prev,
        )?;
        let mut logits = self.model.w_dec.matvec(&outputs[0])?;
        logits.add_assign(&self.model.b_dec)?;
        Ok(DecodeState {
            state: cache.steps.into_iter().next().expect("one step").state(),
            log_probs: log_softmax(&logits),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    feature_dim: usize,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    guidance_dim: Option<usize>,
    biases: bool,
    vocab_tokens: Vec<String>,
    vocab_checksum: String,
    config: Option<TrainConfig>,
    tensors: Vec<TensorMeta>,
    epochs_completed: Option<usize>,
    has_optimizer_state: bool,
}

/// Persists the model alone; see [`save_checkpoint_with_state`] for the
/// resumable form.
pub fn save_checkpoint(model: &CaptionModel, path: &Path) -> ModelResult<()> {
    save_checkpoint_with_state(model, None, None, path)
}

/// Writes magic, version, a JSON header, the parameter tensors as
/// little-endian f64, and optionally the RMSProp accumulators. The file is
/// written to a temp sibling and renamed so failures leave no partial file.
pub fn save_checkpoint_with_state(
    model: &CaptionModel,
    state: Option<&TrainState>,
    config: Option<&TrainConfig>,
    path: &Path,
) -> ModelResult<()> {
    let header = CheckpointHeader {
        kind: match &model.cell {
            CellParams::Lstm(_) => "lstm".into(),
            CellParams::Glstm(_) => "glstm".into(),
        },
        feature_dim: model.feature_dim(),
        vocab_size: model.vocab_size(),
        embed_dim: model.embed_dim(),
        hidden_dim: model.hidden_dim(),
        guidance_dim: model.guidance_dim(),
        biases: model.cell.base().biases.is_some(),
        vocab_tokens: model.vocab.word_tokens().to_vec(),
        vocab_checksum: format!("{:016x}", model.vocab.checksum()),
        config: config.cloned(),
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|(name, rows, cols)| TensorMeta {
                name: name.into(),
                rows,
                cols,
            })
            .collect(),
        epochs_completed: state.map(|s| s.epochs_completed),
        has_optimizer_state: state.is_some(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ModelError::CheckpointHeader {
            detail: e.to_string(),
        })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, tensor) in model.tensors() {
        for &v in tensor {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(state) = state {
        for acc in &state.rms {
            for &v in acc {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> ModelResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| ModelError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> ModelResult<CaptionModel> {
    Ok(load_checkpoint_full(path)?.0)
}

pub fn load_checkpoint_full(
    path: &Path,
) -> ModelResult<(CaptionModel, Option<TrainState>, Option<TrainConfig>)> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::CheckpointMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(ModelError::CheckpointTruncated {
            detail: "header extends past end of file".into(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| {
            ModelError::CheckpointHeader {
                detail: e.to_string(),
            }
        })?;
    let vocab = Vocabulary::from_tokens(header.vocab_tokens.clone());
    let stored = u64::from_str_radix(&header.vocab_checksum, 16).map_err(|_| {
        ModelError::CheckpointHeader {
            detail: "vocab_checksum is not hexadecimal".into(),
        }
    })?;
    let computed = vocab.checksum();
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }
    if vocab.size() != header.vocab_size {
        return Err(ModelError::CheckpointHeader {
            detail: format!(
                "vocab_size {} disagrees with {} stored tokens",
                header.vocab_size,
                vocab.size()
            ),
        });
    }
    let cell = match (header.kind.as_str(), header.guidance_dim) {
        ("lstm", None) => CellKind::Lstm,
        ("glstm", Some(guidance_dim)) => CellKind::Glstm { guidance_dim },
        _ => {
            return Err(ModelError::CheckpointHeader {
                detail: format!(
                    "cell kind '{}' inconsistent with guidance_dim {:?}",
                    header.kind, header.guidance_dim
                ),
            })
        }
    };
    let config = ModelConfig {
        feature_dim: header.feature_dim,
        embed_dim: header.embed_dim,
        hidden_dim: header.hidden_dim,
        cell,
        biases: header.biases,
        zero_guidance_weights: false,
    };
    let mut model = CaptionModel::init(vocab, &config, 0);
    // Overwrite the placeholder values with the stored tensors.
    let mut reader = &bytes[12 + header_len..];
    let expected: Vec<(String, usize)> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.rows * t.cols))
        .collect();
    let model_shapes = model.tensor_shapes();
    if expected.len() != model_shapes.len()
        || expected
            .iter()
            .zip(&model_shapes)
            .any(|((n, len), (mn, r, c))| n != mn || *len != r * c)
    {
        return Err(ModelError::CheckpointHeader {
            detail: "tensor list does not match the declared dimensions".into(),
        });
    }
    let read_tensor = |reader: &mut &[u8], len: usize| -> ModelResult<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            reader
                .read_exact(&mut buf)
                .map_err(|_| ModelError::CheckpointTruncated {
                    detail: "tensor payload ended early".into(),
                })?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    for (tensor_idx, (_, data)) in model.tensors_mut().into_iter().enumerate() {
        let values = read_tensor(&mut reader, expected[tensor_idx].1)?;
        data.copy_from_slice(&values);
    }
    let state = if header.has_optimizer_state {
        let mut rms = Vec::with_capacity(expected.len());
        for (_, len) in &expected {
            rms.push(read_tensor(&mut reader, *len)?);
        }
        Some(TrainState {
            rms,
            epochs_completed: header.epochs_completed.unwrap_or(0),
        })
    } else {
        None
    };
    if !reader.is_empty() {
        return Err(ModelError::CheckpointTruncated {
            detail: format!("{} unexpected trailing bytes", reader.len()),
        });
    }
    for (_, tensor) in model.tensors() {
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::CheckpointHeader {
                detail: "checkpoint contains non-finite parameters".into(),
            });
        }
    }
    Ok((model, state, header.config))
}

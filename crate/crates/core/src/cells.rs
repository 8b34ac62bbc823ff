//! LSTM and guided-LSTM recurrent cells.
//!
//! The plain cell has no peepholes and no output squashing: the block output
//! is `m = o ⊙ c`. The guided variant adds a learned projection of a fixed
//! per-sequence guidance vector to every gate and candidate pre-activation,
//! so the same global signal steers every timestep. The backward pass is
//! analytic backpropagation through time over the cached activations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{sigmoid, tanh_act, Matrix, NumError, NumResult, Vector};

#[derive(Debug, Error)]
pub enum CellError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("sequence forward requires at least one input")]
    EmptySequence,
    #[error("gradient list has {grads} entries but the cache holds {steps} steps")]
    GradLengthMismatch { grads: usize, steps: usize },
    #[error("gLSTM parameters require a guidance vector")]
    MissingGuidance,
    #[error("guidance vector supplied to a plain LSTM cell")]
    UnexpectedGuidance,
}

pub type CellResult<T> = Result<T, CellError>;

/// Optional per-gate bias vectors. The recurrence equations themselves carry
/// no bias terms; biases are a training aid that can be switched off for
/// equation-exact reductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateBiases {
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_c: Vector,
}

impl GateBiases {
    pub fn zeros(hidden: usize) -> Self {
        GateBiases {
            b_i: Vector::zeros(hidden),
            b_f: Vector::zeros(hidden),
            b_o: Vector::zeros(hidden),
            b_c: Vector::zeros(hidden),
        }
    }
}

/// Weights of a no-peepholes LSTM block: four gates, each seeing the step
/// input (`·x`) and the previous hidden state (`·m`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_im: Matrix,
    pub w_fx: Matrix,
    pub w_fm: Matrix,
    pub w_ox: Matrix,
    pub w_om: Matrix,
    pub w_cx: Matrix,
    pub w_cm: Matrix,
    pub biases: Option<GateBiases>,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize, with_biases: bool) -> Self {
        LstmParams {
            w_ix: Matrix::zeros(hidden, input),
            w_im: Matrix::zeros(hidden, hidden),
            w_fx: Matrix::zeros(hidden, input),
            w_fm: Matrix::zeros(hidden, hidden),
            w_ox: Matrix::zeros(hidden, input),
            w_om: Matrix::zeros(hidden, hidden),
            w_cx: Matrix::zeros(hidden, input),
            w_cm: Matrix::zeros(hidden, hidden),
            biases: with_biases.then(|| GateBiases::zeros(hidden)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("w_ix", self.w_ix.data()),
            ("w_im", self.w_im.data()),
            ("w_fx", self.w_fx.data()),
            ("w_fm", self.w_fm.data()),
            ("w_ox", self.w_ox.data()),
            ("w_om", self.w_om.data()),
            ("w_cx", self.w_cx.data()),
            ("w_cm", self.w_cm.data()),
        ];
        if let Some(b) = &self.biases {
            out.push(("b_i", b.b_i.data()));
            out.push(("b_f", b.b_f.data()));
            out.push(("b_o", b.b_o.data()));
            out.push(("b_c", b.b_c.data()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("w_ix", self.w_ix.data_mut()),
            ("w_im", self.w_im.data_mut()),
            ("w_fx", self.w_fx.data_mut()),
            ("w_fm", self.w_fm.data_mut()),
            ("w_ox", self.w_ox.data_mut()),
            ("w_om", self.w_om.data_mut()),
            ("w_cx", self.w_cx.data_mut()),
            ("w_cm", self.w_cm.data_mut()),
        ];
        if let Some(b) = &mut self.biases {
            out.push(("b_i", b.b_i.data_mut()));
            out.push(("b_f", b.b_f.data_mut()));
            out.push(("b_o", b.b_o.data_mut()));
            out.push(("b_c", b.b_c.data_mut()));
        }
        out
    }
}

/// gLSTM weights: the LSTM weights plus one guidance projection per gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlstmParams {
    pub base: LstmParams,
    pub w_iq: Matrix,
    pub w_fq: Matrix,
    pub w_oq: Matrix,
    pub w_cq: Matrix,
}

impl GlstmParams {
    pub fn zeros(hidden: usize, input: usize, guidance: usize, with_biases: bool) -> Self {
        GlstmParams {
            base: LstmParams::zeros(hidden, input, with_biases),
            w_iq: Matrix::zeros(hidden, guidance),
            w_fq: Matrix::zeros(hidden, guidance),
            w_oq: Matrix::zeros(hidden, guidance),
            w_cq: Matrix::zeros(hidden, guidance),
        }
    }

    pub fn guidance_dim(&self) -> usize {
        self.w_iq.cols()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = self.base.tensors();
        out.push(("w_iq", self.w_iq.data()));
        out.push(("w_fq", self.w_fq.data()));
        out.push(("w_oq", self.w_oq.data()));
        out.push(("w_cq", self.w_cq.data()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = self.base.tensors_mut();
        out.push(("w_iq", self.w_iq.data_mut()));
        out.push(("w_fq", self.w_fq.data_mut()));
        out.push(("w_oq", self.w_oq.data_mut()));
        out.push(("w_cq", self.w_cq.data_mut()));
        out
    }
}

/// Either cell flavor, so models can hold one field for both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Lstm(LstmParams),
    Glstm(GlstmParams),
}

impl CellParams {
    pub fn base(&self) -> &LstmParams {
        match self {
            CellParams::Lstm(p) => p,
            CellParams::Glstm(p) => &p.base,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.base().hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.base().input_dim()
    }

    pub fn guidance_dim(&self) -> Option<usize> {
        match self {
            CellParams::Lstm(_) => None,
            CellParams::Glstm(p) => Some(p.guidance_dim()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            CellParams::Lstm(p) => p.tensors(),
            CellParams::Glstm(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            CellParams::Lstm(p) => p.tensors_mut(),
            CellParams::Glstm(p) => p.tensors_mut(),
        }
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> CellParams {
        match self {
            CellParams::Lstm(p) => CellParams::Lstm(LstmParams::zeros(
                p.hidden_dim(),
                p.input_dim(),
                p.biases.is_some(),
            )),
            CellParams::Glstm(p) => CellParams::Glstm(GlstmParams::zeros(
                p.base.hidden_dim(),
                p.base.input_dim(),
                p.guidance_dim(),
                p.base.biases.is_some(),
            )),
        }
    }
}

/// Memory cell state `c` and hidden state (block output) `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub c: Vector,
    pub m: Vector,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            c: Vector::zeros(hidden),
            m: Vector::zeros(hidden),
        }
    }
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepEntry {
    pub x: Vector,
    pub c_prev: Vector,
    pub m_prev: Vector,
    pub gate_i: Vector,
    pub gate_f: Vector,
    pub gate_o: Vector,
    pub candidate: Vector,
    pub c: Vector,
    pub m: Vector,
}

impl StepEntry {
    pub fn state(&self) -> CellState {
        CellState {
            c: self.c.clone(),
            m: self.m.clone(),
        }
    }
}

/// Cached activations of a full forward pass, in step order.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub guidance: Option<Vector>,
    pub steps: Vec<StepEntry>,
}

impl StepCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn gate_preactivation(
    wx: &Matrix,
    wm: &Matrix,
    wq: Option<&Matrix>,
    bias: Option<&Vector>,
    x: &Vector,
    m_prev: &Vector,
    g: Option<&Vector>,
) -> NumResult<Vector> {
    let mut pre = wx.matvec(x)?;
    pre.add_assign(&wm.matvec(m_prev)?)?;
    if let (Some(wq), Some(g)) = (wq, g) {
        pre.add_assign(&wq.matvec(g)?)?;
    }
    if let Some(b) = bias {
        pre.add_assign(b)?;
    }
    Ok(pre)
}

fn step_core(
    p: &LstmParams,
    q: Option<(&GlstmParams, &Vector)>,
    x: &Vector,
    prev: &CellState,
) -> CellResult<(CellState, StepEntry)> {
    let (wq_i, wq_f, wq_o, wq_c, g) = match q {
        Some((gp, g)) => (
            Some(&gp.w_iq),
            Some(&gp.w_fq),
            Some(&gp.w_oq),
            Some(&gp.w_cq),
            Some(g),
        ),
        None => (None, None, None, None, None),
    };
    let b = p.biases.as_ref();
    let gate_i = sigmoid(&gate_preactivation(
        &p.w_ix,
        &p.w_im,
        wq_i,
        b.map(|b| &b.b_i),
        x,
        &prev.m,
        g,
    )?);
    let gate_f = sigmoid(&gate_preactivation(
        &p.w_fx,
        &p.w_fm,
        wq_f,
        b.map(|b| &b.b_f),
        x,
        &prev.m,
        g,
    )?);
    let gate_o = sigmoid(&gate_preactivation(
        &p.w_ox,
        &p.w_om,
        wq_o,
        b.map(|b| &b.b_o),
        x,
        &prev.m,
        g,
    )?);
    let candidate = tanh_act(&gate_preactivation(
        &p.w_cx,
        &p.w_cm,
        wq_c,
        b.map(|b| &b.b_c),
        x,
        &prev.m,
        g,
    )?);
    let c = gate_f
        .hadamard(&prev.c)?
        .add(&gate_i.hadamard(&candidate)?)?;
    let m = gate_o.hadamard(&c)?;
    let state = CellState {
        c: c.clone(),
        m: m.clone(),
    };
    let entry = StepEntry {
        x: x.clone(),
        c_prev: prev.c.clone(),
        m_prev: prev.m.clone(),
        gate_i,
        gate_f,
        gate_o,
        candidate,
        c,
        m,
    };
    Ok((state, entry))
}

/// One LSTM step: gates from the input and previous hidden state, then
/// `c = f ⊙ c_prev + i ⊙ tanh(·)` and `m = o ⊙ c`.
pub fn lstm_step(
    p: &LstmParams,
    x: &Vector,
    prev: &CellState,
) -> CellResult<(CellState, StepEntry)> {
    step_core(p, None, x, prev)
}

/// One gLSTM step: identical to [`lstm_step`] with the guidance projection
/// added inside every gate and candidate pre-activation. The same `g` must
/// be supplied at every step of a sequence.
pub fn glstm_step(
    p: &GlstmParams,
    x: &Vector,
    g: &Vector,
    prev: &CellState,
) -> CellResult<(CellState, StepEntry)> {
    step_core(&p.base, Some((p, g)), x, prev)
}

/// Folds the step function over `inputs`, caching activations for backward.
pub fn sequence_forward(
    params: &CellParams,
    inputs: &[Vector],
    guidance: Option<&Vector>,
    init: &CellState,
) -> CellResult<(Vec<Vector>, StepCache)> {
    if inputs.is_empty() {
        return Err(CellError::EmptySequence);
    }
    match (params, guidance) {
        (CellParams::Glstm(_), None) => return Err(CellError::MissingGuidance),
        (CellParams::Lstm(_), Some(_)) => return Err(CellError::UnexpectedGuidance),
        _ => {}
    }
    let mut state = init.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, entry) = match params {
            CellParams::Lstm(p) => lstm_step(p, x, &state)?,
            CellParams::Glstm(p) => glstm_step(p, x, guidance.expect("checked above"), &state)?,
        };
        outputs.push(next.m.clone());
        steps.push(entry);
        state = next;
    }
    Ok((
        outputs,
        StepCache {
            guidance: guidance.cloned(),
            steps,
        },
    ))
}

/// Gradients of a sequence loss with respect to everything the forward pass
/// touched.
#[derive(Debug, Clone)]
pub struct SequenceGradients {
    /// Same shape as the cell parameters.
    pub params: CellParams,
    /// Per-step gradient with respect to each input vector.
    pub inputs: Vec<Vector>,
    /// Gradient with respect to the guidance vector, summed over steps.
    pub guidance: Option<Vector>,
    /// Gradient with respect to the initial state.
    pub init_state: CellState,
}

/// Exact backpropagation through time. `grad_outputs[l]` is the loss gradient
/// with respect to the step-`l` output `m_l`; the cache must come from the
/// matching forward pass.
pub fn sequence_backward(
    params: &CellParams,
    cache: &StepCache,
    grad_outputs: &[Vector],
) -> CellResult<SequenceGradients> {
    sequence_backward_seeded(params, cache, grad_outputs, &CellState::zeros(params.hidden_dim()))
}

/// Backward pass with an extra gradient seeded on the final step's state,
/// for stitching a sequence that was split into segments.
pub fn sequence_backward_seeded(
    params: &CellParams,
    cache: &StepCache,
    grad_outputs: &[Vector],
    final_state_grad: &CellState,
) -> CellResult<SequenceGradients> {
    if grad_outputs.len() != cache.steps.len() {
        return Err(CellError::GradLengthMismatch {
            grads: grad_outputs.len(),
            steps: cache.steps.len(),
        });
    }
    let hidden = params.hidden_dim();
    let mut grads = params.zeros_like();
    let mut grad_inputs = vec![Vector::zeros(params.input_dim()); cache.steps.len()];
    let mut grad_guidance = params.guidance_dim().map(Vector::zeros);
    let mut dc_carry = final_state_grad.c.clone();
    let mut dm_carry = final_state_grad.m.clone();

    let ones = Vector::from_vec(vec![1.0; hidden]);
    for (t, entry) in cache.steps.iter().enumerate().rev() {
        let dm = grad_outputs[t].add(&dm_carry)?;
        // m = o ⊙ c
        let d_gate_o = dm.hadamard(&entry.c)?;
        let dc = dm.hadamard(&entry.gate_o)?.add(&dc_carry)?;
        // c = f ⊙ c_prev + i ⊙ a
        let d_gate_f = dc.hadamard(&entry.c_prev)?;
        let d_gate_i = dc.hadamard(&entry.candidate)?;
        let d_candidate = dc.hadamard(&entry.gate_i)?;
        dc_carry = dc.hadamard(&entry.gate_f)?;
        // Through the nonlinearities: σ' = σ(1−σ), tanh' = 1−tanh².
        let dpre_i = d_gate_i
            .hadamard(&entry.gate_i)?
            .hadamard(&ones.sub(&entry.gate_i)?)?;
        let dpre_f = d_gate_f
            .hadamard(&entry.gate_f)?
            .hadamard(&ones.sub(&entry.gate_f)?)?;
        let dpre_o = d_gate_o
            .hadamard(&entry.gate_o)?
            .hadamard(&ones.sub(&entry.gate_o)?)?;
        let dpre_c =
            d_candidate.hadamard(&ones.sub(&entry.candidate.hadamard(&entry.candidate)?)?)?;

        {
            let base = match &mut grads {
                CellParams::Lstm(p) => p,
                CellParams::Glstm(p) => &mut p.base,
            };
            base.w_ix.add_outer(&dpre_i, &entry.x)?;
            base.w_im.add_outer(&dpre_i, &entry.m_prev)?;
            base.w_fx.add_outer(&dpre_f, &entry.x)?;
            base.w_fm.add_outer(&dpre_f, &entry.m_prev)?;
            base.w_ox.add_outer(&dpre_o, &entry.x)?;
            base.w_om.add_outer(&dpre_o, &entry.m_prev)?;
            base.w_cx.add_outer(&dpre_c, &entry.x)?;
            base.w_cm.add_outer(&dpre_c, &entry.m_prev)?;
            if let Some(b) = &mut base.biases {
                b.b_i.add_assign(&dpre_i)?;
                b.b_f.add_assign(&dpre_f)?;
                b.b_o.add_assign(&dpre_o)?;
                b.b_c.add_assign(&dpre_c)?;
            }
        }

        let base = params.base();
        let mut dx = base.w_ix.tr_matvec(&dpre_i)?;
        dx.add_assign(&base.w_fx.tr_matvec(&dpre_f)?)?;
        dx.add_assign(&base.w_ox.tr_matvec(&dpre_o)?)?;
        dx.add_assign(&base.w_cx.tr_matvec(&dpre_c)?)?;
        grad_inputs[t] = dx;

        dm_carry = base.w_im.tr_matvec(&dpre_i)?;
        dm_carry.add_assign(&base.w_fm.tr_matvec(&dpre_f)?)?;
        dm_carry.add_assign(&base.w_om.tr_matvec(&dpre_o)?)?;
        dm_carry.add_assign(&base.w_cm.tr_matvec(&dpre_c)?)?;

        if let (CellParams::Glstm(gp), CellParams::Glstm(ggrads), Some(g), Some(dg)) = (
            params,
            &mut grads,
            cache.guidance.as_ref(),
            grad_guidance.as_mut(),
        ) {
            ggrads.w_iq.add_outer(&dpre_i, g)?;
            ggrads.w_fq.add_outer(&dpre_f, g)?;
            ggrads.w_oq.add_outer(&dpre_o, g)?;
            ggrads.w_cq.add_outer(&dpre_c, g)?;
            dg.add_assign(&gp.w_iq.tr_matvec(&dpre_i)?)?;
            dg.add_assign(&gp.w_fq.tr_matvec(&dpre_f)?)?;
            dg.add_assign(&gp.w_oq.tr_matvec(&dpre_o)?)?;
            dg.add_assign(&gp.w_cq.tr_matvec(&dpre_c)?)?;
        }
    }

    Ok(SequenceGradients {
        params: grads,
        inputs: grad_inputs,
        guidance: grad_guidance,
        init_state: CellState {
            c: dc_carry,
            m: dm_carry,
        },
    })
}

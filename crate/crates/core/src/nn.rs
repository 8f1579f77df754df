//! Recurrent cells, additive attention and dropout, expressed over a [`Tape`].
//!
//! Each parameter struct owns plain tensors and knows how to `bind` itself to a
//! tape. Binding order always equals the order of [`ParamSet::named_tensors`],
//! which is what lets optimizer state and checkpoints line up with gradient
//! slots.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// A fixed, ordered collection of trainable tensors.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`ParamSet::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Binds tensors in order and returns their vars.
pub(crate) fn bind_all<'a>(tape: &mut Tape<'a>, tensors: Vec<&'a Tensor>) -> Vec<Var> {
    tensors.into_iter().map(|t| tape.param(t)).collect()
}

/// Uniform init in `[-k, k]`, `k = 1/sqrt(fan_in)`.
pub fn init_weight(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn init_bias(len: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[len], 1.0 / (fan_in as f64).sqrt(), rng)
}

fn check_vec(tape: &Tape<'_>, v: Var, len: usize, what: &str) -> Result<()> {
    let t = tape.value(v);
    if !t.is_vector() || t.len() != len {
        return Err(invalid(format!(
            "{what}: expected a vector of length {len}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// One gate's worth of weights: `W x + U h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GateParams {
    fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        // Both W and U feed the same pre-activation, so the fan-in is their sum.
        let fan_in = input_dim + hidden_dim;
        Self {
            w: init_weight(hidden_dim, input_dim, fan_in, rng),
            u: init_weight(hidden_dim, hidden_dim, fan_in, rng),
            b: init_bias(hidden_dim, fan_in, rng),
        }
    }

    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[hidden_dim, input_dim]),
            u: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b: Tensor::zeros(&[hidden_dim]),
        }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.w), ("u".into(), &self.u), ("b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    w: Var,
    u: Var,
    b: Var,
}

impl GateVars {
    fn from_slice(v: &[Var]) -> Self {
        Self { w: v[0], u: v[1], b: v[2] }
    }

    /// `W x + U h' + b`, where `h'` is whatever hidden-side input the caller passes.
    fn preactivation(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let wx = tape.matvec(self.w, x)?;
        let uh = tape.matvec(self.u, h)?;
        tape.add_n(&[wx, uh, self.b])
    }
}

/// GRU weights for update gate `z`, reset gate `r` and candidate `h̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    update: GateVars,
    reset: GateVars,
    candidate: GateVars,
    input_dim: usize,
    hidden_dim: usize,
}

impl GruVars {
    /// Builds from 9 consecutive slots in [`ParamSet`] order.
    pub fn from_slots(v: &[Var], input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            update: GateVars::from_slice(&v[0..3]),
            reset: GateVars::from_slice(&v[3..6]),
            candidate: GateVars::from_slice(&v[6..9]),
            input_dim,
            hidden_dim,
        }
    }
}

impl GruParams {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            update: GateParams::init(input_dim, hidden_dim, rng),
            reset: GateParams::init(input_dim, hidden_dim, rng),
            candidate: GateParams::init(input_dim, hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            update: GateParams::zeros(input_dim, hidden_dim),
            reset: GateParams::zeros(input_dim, hidden_dim),
            candidate: GateParams::zeros(input_dim, hidden_dim),
            input_dim,
            hidden_dim,
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> GruVars {
        let v = bind_all(tape, self.tensors());
        GruVars::from_slots(&v, self.input_dim, self.hidden_dim)
    }

    /// One step on plain tensors.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.input(x.clone());
        let hv = tape.input(h.clone());
        let out = gru_step(&mut tape, xv, hv, &p)?;
        Ok(tape.value(out).clone())
    }
}

impl ParamSet for GruParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("z", self.update.named());
        out.extend(prefixed("r", self.reset.named()));
        out.extend(prefixed("h", self.candidate.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.update.tensors_mut();
        out.extend(self.reset.tensors_mut());
        out.extend(self.candidate.tensors_mut());
        out
    }
}

/// `h' = (1−z)⊙h + z⊙h̃` with
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r⊙h) + b_h)`.
pub fn gru_step(tape: &mut Tape<'_>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    check_vec(tape, x, p.input_dim, "gru_step input")?;
    check_vec(tape, h, p.hidden_dim, "gru_step hidden")?;
    let z_pre = p.update.preactivation(tape, x, h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = p.reset.preactivation(tape, x, h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let cand_pre = p.candidate.preactivation(tape, x, rh)?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.one_minus(z);
    let carried = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(carried, fresh)
}

/// LSTM weights for input `i`, forget `f`, output `o` gates and candidate `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    pub candidate: GateParams,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    input: GateVars,
    forget: GateVars,
    output: GateVars,
    candidate: GateVars,
    input_dim: usize,
    hidden_dim: usize,
}

impl LstmVars {
    /// Builds from 12 consecutive slots in [`ParamSet`] order.
    pub fn from_slots(v: &[Var], input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input: GateVars::from_slice(&v[0..3]),
            forget: GateVars::from_slice(&v[3..6]),
            output: GateVars::from_slice(&v[6..9]),
            candidate: GateVars::from_slice(&v[9..12]),
            input_dim,
            hidden_dim,
        }
    }
}

impl LstmParams {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: GateParams::init(input_dim, hidden_dim, rng),
            forget: GateParams::init(input_dim, hidden_dim, rng),
            output: GateParams::init(input_dim, hidden_dim, rng),
            candidate: GateParams::init(input_dim, hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input: GateParams::zeros(input_dim, hidden_dim),
            forget: GateParams::zeros(input_dim, hidden_dim),
            output: GateParams::zeros(input_dim, hidden_dim),
            candidate: GateParams::zeros(input_dim, hidden_dim),
            input_dim,
            hidden_dim,
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> LstmVars {
        let v = bind_all(tape, self.tensors());
        LstmVars::from_slots(&v, self.input_dim, self.hidden_dim)
    }

    /// One step on plain tensors; returns `(h', c')`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.input(x.clone());
        let hv = tape.input(h.clone());
        let cv = tape.input(c.clone());
        let (h2, c2) = lstm_step(&mut tape, xv, hv, cv, &p)?;
        Ok((tape.value(h2).clone(), tape.value(c2).clone()))
    }
}

impl ParamSet for LstmParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("i", self.input.named());
        out.extend(prefixed("f", self.forget.named()));
        out.extend(prefixed("o", self.output.named()));
        out.extend(prefixed("g", self.candidate.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.input.tensors_mut();
        out.extend(self.forget.tensors_mut());
        out.extend(self.output.tensors_mut());
        out.extend(self.candidate.tensors_mut());
        out
    }
}

/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(tape: &mut Tape<'_>, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
    check_vec(tape, x, p.input_dim, "lstm_step input")?;
    check_vec(tape, h, p.hidden_dim, "lstm_step hidden")?;
    check_vec(tape, c, p.hidden_dim, "lstm_step cell")?;
    let i_pre = p.input.preactivation(tape, x, h)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = p.forget.preactivation(tape, x, h)?;
    let f = tape.sigmoid(f_pre);
    let o_pre = p.output.preactivation(tape, x, h)?;
    let o = tape.sigmoid(o_pre);
    let g_pre = p.candidate.preactivation(tape, x, h)?;
    let g = tape.tanh(g_pre);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Additive attention: `score_i = v · tanh(W_h q + W_a a_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_query: Tensor,
    pub w_annotation: Tensor,
    pub v: Tensor,
    pub attention_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    w_query: Var,
    w_annotation: Var,
    v: Var,
}

impl AttentionParams {
    pub fn init(query_dim: usize, annotation_dim: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_query: init_weight(attention_dim, query_dim, query_dim, rng),
            w_annotation: init_weight(attention_dim, annotation_dim, annotation_dim, rng),
            v: init_bias(attention_dim, attention_dim, rng),
            attention_dim,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.w_query.cols()
    }

    pub fn annotation_dim(&self) -> usize {
        self.w_annotation.cols()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> AttentionVars {
        AttentionVars::from_slots(&bind_all(tape, self.tensors()))
    }

    /// Plain-tensor attention; returns `(weights, context)`.
    pub fn attend(&self, query: &Tensor, annotations: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let q = tape.input(query.clone());
        let a = tape.input(annotations.clone());
        let keys = p.project_annotations(&mut tape, a)?;
        let (w, c) = additive_attention(&mut tape, q, a, keys, &p)?;
        Ok((tape.value(w).clone(), tape.value(c).clone()))
    }
}

impl ParamSet for AttentionParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_query".into(), &self.w_query),
            ("w_annotation".into(), &self.w_annotation),
            ("v".into(), &self.v),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_query, &mut self.w_annotation, &mut self.v]
    }
}

impl AttentionVars {
    pub fn from_slots(v: &[Var]) -> Self {
        Self {
            w_query: v[0],
            w_annotation: v[1],
            v: v[2],
        }
    }

    /// `W_a a_i` for every annotation row. Independent of the query, so
    /// decoders compute it once per input.
    pub fn project_annotations(&self, tape: &mut Tape<'_>, annotations: Var) -> Result<Var> {
        if tape.value(annotations).rows() == 0 {
            return Err(invalid("attention over zero annotations"));
        }
        tape.matmul_t(annotations, self.w_annotation)
    }
}

/// Returns `(weights, context)` with `weights = softmax(scores)` and
/// `context = Σ_i weights_i a_i`. `keys` must come from
/// [`AttentionVars::project_annotations`] on the same annotations.
pub fn additive_attention(
    tape: &mut Tape<'_>,
    query: Var,
    annotations: Var,
    keys: Var,
    p: &AttentionVars,
) -> Result<(Var, Var)> {
    let q = tape.matvec(p.w_query, query)?;
    let summed = tape.add_row_broadcast(keys, q)?;
    let act = tape.tanh(summed);
    let scores = tape.matvec(act, p.v)?;
    let weights = tape.softmax(scores)?;
    let context = tape.weighted_row_sum(weights, annotations)?;
    Ok((weights, context))
}

/// Inverted-dropout keep mask: each entry is `0` with probability `rate`,
/// otherwise `1/(1−rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Dropout on a plain tensor. Identity in eval mode or at rate 0.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Reborrows an optional generator for one call inside a loop.
pub(crate) fn reborrow<'r>(rng: &'r mut Option<&mut dyn rand::RngCore>) -> Option<&'r mut dyn rand::RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Dropout on the tape; `rng = None` means eval mode.
pub fn dropout_var(tape: &mut Tape<'_>, x: Var, rate: f64, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let len = tape.value(x).len();
            let shape = tape.value(x).shape().to_vec();
            let mask = dropout_mask(len, rate, rng)?;
            let m = tape.input(Tensor::new(shape, mask)?);
            tape.mul(x, m)
        }
        _ => {
            if !(0.0..1.0).contains(&rate) {
                return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
            Ok(x)
        }
    }
}

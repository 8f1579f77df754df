//! Visual question generation: an attention LSTM decoder over a photo's
//! feature grid, trained by teacher-forced maximum likelihood and decoded with
//! beam search.

use std::collections::HashSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, Tape, Var};
use crate::data::FeatureGrid;
use crate::error::{invalid, Result};
use crate::nn::{
    additive_attention, bind_all, dropout_var, reborrow, init_bias, init_weight, lstm_step, prefixed, AttentionParams,
    AttentionVars, LstmParams, LstmVars, ParamSet,
};
use crate::tensor::Tensor;
use crate::vocab::{tokenize, TokenSequence, Vocabulary, END, PAD, START, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqgConfig {
    pub annotation_dim: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub lstm_dim: usize,
    pub dropout: f64,
    pub beam_width: usize,
    pub outputs_per_image: usize,
    pub max_question_len: usize,
}

impl Default for VqgConfig {
    fn default() -> Self {
        Self {
            annotation_dim: 2048,
            attention_dim: 512,
            embedding_dim: 512,
            lstm_dim: 512,
            dropout: 0.5,
            beam_width: 7,
            outputs_per_image: 5,
            max_question_len: 6,
        }
    }
}

impl VqgConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.annotation_dim,
            self.attention_dim,
            self.embedding_dim,
            self.lstm_dim,
            self.beam_width,
            self.outputs_per_image,
            self.max_question_len,
        ];
        if dims.contains(&0) {
            return Err(invalid("vqg dims, beam width and lengths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("vqg dropout {} outside [0, 1)", self.dropout)));
        }
        if self.outputs_per_image > self.beam_width {
            return Err(invalid("outputs_per_image cannot exceed beam_width"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqgParams {
    pub embedding: Tensor,
    pub lstm: LstmParams,
    pub attention: AttentionParams,
    pub init_h: Tensor,
    pub init_c: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl VqgParams {
    pub fn init(config: &VqgConfig, vocab_size: usize, rng: &mut impl rand::Rng) -> Self {
        let (d, e, h) = (config.annotation_dim, config.embedding_dim, config.lstm_dim);
        Self {
            embedding: init_weight(vocab_size, e, e, rng),
            lstm: LstmParams::init(e + d, h, rng),
            attention: AttentionParams::init(h, d, config.attention_dim, rng),
            init_h: init_weight(h, d, d, rng),
            init_c: init_weight(h, d, d, rng),
            out_w: init_weight(vocab_size, h, h, rng),
            out_b: init_bias(vocab_size, h, rng),
        }
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> VqgVars {
        let v = bind_all(tape, self.tensors());
        VqgVars {
            embedding: v[0],
            lstm: LstmVars::from_slots(&v[1..13], self.lstm.input_dim, self.lstm.hidden_dim),
            attention: AttentionVars::from_slots(&v[13..16]),
            init_h: v[16],
            init_c: v[17],
            out_w: v[18],
            out_b: v[19],
        }
    }
}

impl ParamSet for VqgParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        out.extend(prefixed("lstm", self.lstm.named_tensors()));
        out.extend(prefixed("attention", self.attention.named_tensors()));
        out.push(("init_h".into(), &self.init_h));
        out.push(("init_c".into(), &self.init_c));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.lstm.tensors_mut());
        out.extend(self.attention.tensors_mut());
        out.extend([&mut self.init_h, &mut self.init_c, &mut self.out_w, &mut self.out_b]);
        out
    }
}

struct VqgVars {
    embedding: Var,
    lstm: LstmVars,
    attention: AttentionVars,
    init_h: Var,
    init_c: Var,
    out_w: Var,
    out_b: Var,
}

/// Annotations and their attention keys, computed once per grid.
#[derive(Clone, Copy)]
struct GridVars {
    annotations: Var,
    keys: Var,
}

/// One decoder step on plain tensors.
#[derive(Clone, Debug)]
pub struct DecodeStep {
    pub logits: Tensor,
    pub h: Tensor,
    pub c: Tensor,
    pub attention: Tensor,
}

/// A finished question with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQuestion {
    /// Content ids, without the terminal `<end>`.
    pub ids: Vec<usize>,
    pub text: String,
    /// Sum of token log-probabilities, including `<end>`.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f64,
}

/// A partial or finished beam entry. `h`/`c` are the decoder state before
/// `last` has been fed.
#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub complete: bool,
    last: usize,
    h: Var,
    c: Var,
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct VqgExample {
    pub grid: FeatureGrid,
    pub target: TokenSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqgModel {
    pub config: VqgConfig,
    pub vocab: Vocabulary,
    pub params: VqgParams,
}

impl VqgModel {
    pub fn new(config: VqgConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = VqgParams::init(&config, vocab.len(), &mut rng);
        Ok(Self { config, vocab, params })
    }

    pub fn from_parts(config: VqgConfig, vocab: Vocabulary, params: VqgParams) -> Result<Self> {
        config.validate()?;
        let model = Self { config, vocab, params };
        model.check_shapes()?;
        Ok(model)
    }

    /// Shapes every parameter must have for this config and vocabulary.
    pub fn expected_shapes(config: &VqgConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let zero = Self::zero_params(config, vocab_size);
        zero.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    fn zero_params(config: &VqgConfig, k: usize) -> VqgParams {
        let (d, e, h, a) = (config.annotation_dim, config.embedding_dim, config.lstm_dim, config.attention_dim);
        VqgParams {
            embedding: Tensor::zeros(&[k, e]),
            lstm: LstmParams::zeros(e + d, h),
            attention: AttentionParams {
                w_query: Tensor::zeros(&[a, h]),
                w_annotation: Tensor::zeros(&[a, d]),
                v: Tensor::zeros(&[a]),
                attention_dim: a,
            },
            init_h: Tensor::zeros(&[h, d]),
            init_c: Tensor::zeros(&[h, d]),
            out_w: Tensor::zeros(&[k, h]),
            out_b: Tensor::zeros(&[k]),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.config, self.vocab.len());
        for ((name, want), (_, got)) in expected.iter().zip(self.params.named_tensors()) {
            if want.as_slice() != got.shape() {
                return Err(crate::Error::ShapeMismatch {
                    name: name.clone(),
                    expected: want.clone(),
                    found: got.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.cols() != self.config.annotation_dim {
            return Err(invalid(format!(
                "grid has {} columns, model expects annotation dim {}",
                grid.cols(),
                self.config.annotation_dim
            )));
        }
        Ok(())
    }

    fn bind_grid(&self, tape: &mut Tape<'_>, vars: &VqgVars, grid: &FeatureGrid) -> Result<GridVars> {
        self.check_grid(grid)?;
        let annotations = tape.input(grid.to_tensor());
        let keys = vars.attention.project_annotations(tape, annotations)?;
        Ok(GridVars { annotations, keys })
    }

    fn initial_state(&self, tape: &mut Tape<'_>, vars: &VqgVars, grid: GridVars) -> Result<(Var, Var)> {
        let mean = tape.mean_rows(grid.annotations)?;
        let h_pre = tape.matvec(vars.init_h, mean)?;
        let c_pre = tape.matvec(vars.init_c, mean)?;
        Ok((tape.tanh(h_pre), tape.tanh(c_pre)))
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        tape: &mut Tape<'_>,
        vars: &VqgVars,
        grid: GridVars,
        prev: usize,
        h: Var,
        c: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Var, Var, Var)> {
        if prev >= self.vocab.len() {
            return Err(invalid(format!("token id {prev} outside vocabulary of {}", self.vocab.len())));
        }
        let (weights, context) = additive_attention(tape, h, grid.annotations, grid.keys, &vars.attention)?;
        let emb = tape.gather(vars.embedding, prev)?;
        let input = tape.concat(&[emb, context])?;
        let (h2, c2) = lstm_step(tape, input, h, c, &vars.lstm)?;
        let dropped = dropout_var(tape, h2, self.config.dropout, rng)?;
        let proj = tape.matvec(vars.out_w, dropped)?;
        let logits = tape.add(proj, vars.out_b)?;
        Ok((logits, h2, c2, weights))
    }

    /// `h₀ = tanh(W_h · mean_row(grid))`, `c₀ = tanh(W_c · mean_row(grid))`.
    pub fn init_decoder_state(&self, grid: &FeatureGrid) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let g = self.bind_grid(&mut tape, &vars, grid)?;
        let (h, c) = self.initial_state(&mut tape, &vars, g)?;
        Ok((tape.value(h).clone(), tape.value(c).clone()))
    }

    /// One decoder step in eval mode. With `mask_unk`, the `<unk>` logit is
    /// `-inf`.
    pub fn decode_step(
        &self,
        prev: usize,
        h: &Tensor,
        c: &Tensor,
        grid: &FeatureGrid,
        mask_unk: bool,
    ) -> Result<DecodeStep> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let g = self.bind_grid(&mut tape, &vars, grid)?;
        let hv = tape.input(h.clone());
        let cv = tape.input(c.clone());
        let (logits, h2, c2, w) = self.step(&mut tape, &vars, g, prev, hv, cv, None)?;
        let mut logits = tape.value(logits).clone();
        if mask_unk {
            logits.data_mut()[UNK] = f64::NEG_INFINITY;
        }
        Ok(DecodeStep {
            logits,
            h: tape.value(h2).clone(),
            c: tape.value(c2).clone(),
            attention: tape.value(w).clone(),
        })
    }

    /// Log-probabilities for the next token, with tokens the decoder may never
    /// emit at inference set to `-inf`. Once `content_len` reaches the length
    /// cap only `<end>` remains.
    fn inference_log_probs(&self, logits: &Tensor, content_len: usize) -> Result<Vec<f64>> {
        let mut l = logits.data().to_vec();
        inference_mask(&mut l, content_len, self.config.max_question_len);
        log_softmax(&l)
    }

    /// Argmax decoding.
    pub fn greedy_decode(&self, grid: &FeatureGrid) -> Result<GeneratedQuestion> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let g = self.bind_grid(&mut tape, &vars, grid)?;
        let (mut h, mut c) = self.initial_state(&mut tape, &vars, g)?;
        let mut prev = START;
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        loop {
            let (logits, h2, c2, _) = self.step(&mut tape, &vars, g, prev, h, c, None)?;
            let lp = self.inference_log_probs(tape.value(logits), ids.len())?;
            let best = argmax(&lp);
            log_prob += lp[best];
            if best == END {
                break;
            }
            ids.push(best);
            (prev, h, c) = (best, h2, c2);
        }
        Ok(self.finish(ids, log_prob))
    }

    fn finish(&self, ids: Vec<usize>, log_prob: f64) -> GeneratedQuestion {
        let scored = (ids.len() + 1) as f64;
        GeneratedQuestion {
            text: self.vocab.decode_text(&ids),
            ids,
            log_prob,
            score: log_prob / scored,
        }
    }

    /// Beam search with the configured width and output count.
    pub fn beam_search(&self, grid: &FeatureGrid) -> Result<Vec<GeneratedQuestion>> {
        self.beam_search_with(grid, self.config.beam_width, self.config.outputs_per_image)
    }

    /// Keeps `beam_width` live hypotheses; returns up to `max_outputs`
    /// distinct finished questions ranked by length-normalized log-probability.
    pub fn beam_search_with(
        &self,
        grid: &FeatureGrid,
        beam_width: usize,
        max_outputs: usize,
    ) -> Result<Vec<GeneratedQuestion>> {
        if beam_width == 0 {
            return Err(invalid("beam width must be >= 1"));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let g = self.bind_grid(&mut tape, &vars, grid)?;
        let (h, c) = self.initial_state(&mut tape, &vars, g)?;
        let mut live = vec![BeamHypothesis {
            ids: Vec::new(),
            log_prob: 0.0,
            complete: false,
            last: START,
            h,
            c,
        }];
        let mut finished: Vec<BeamHypothesis> = Vec::new();

        while !live.is_empty() {
            // (score, hypothesis index, token, next h, next c)
            let mut candidates: Vec<(f64, usize, usize, Var, Var)> = Vec::new();
            for (hi, hyp) in live.iter().enumerate() {
                let (logits, h2, c2, _) = self.step(&mut tape, &vars, g, hyp.last, hyp.h, hyp.c, None)?;
                let lp = self.inference_log_probs(tape.value(logits), hyp.ids.len())?;
                for tok in top_k(&lp, beam_width) {
                    candidates.push((hyp.log_prob + lp[tok], hi, tok, h2, c2));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(beam_width);
            for (score, hi, tok, h2, c2) in candidates.into_iter().take(beam_width) {
                let mut ids = live[hi].ids.clone();
                let complete = tok == END;
                if !complete {
                    ids.push(tok);
                }
                let hyp = BeamHypothesis {
                    ids,
                    log_prob: score,
                    complete,
                    last: tok,
                    h: h2,
                    c: c2,
                };
                if complete {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
        }

        let mut out: Vec<GeneratedQuestion> = finished
            .into_iter()
            .map(|hyp| self.finish(hyp.ids, hyp.log_prob))
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut seen = HashSet::new();
        out.retain(|q| seen.insert(q.text.clone()));
        out.truncate(max_outputs);
        Ok(out)
    }

    /// Teacher-forced mean cross-entropy of `target` on the tape. Dropout is
    /// active iff `rng` is given.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        grid: &FeatureGrid,
        target: &TokenSequence,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(invalid("empty target"));
        }
        if target.len() > self.config.max_question_len + 1 {
            return Err(invalid(format!(
                "target has {} tokens, limit is {} plus <end>",
                target.len(),
                self.config.max_question_len
            )));
        }
        let vars = self.params.bind(tape);
        let g = self.bind_grid(tape, &vars, grid)?;
        let (mut h, mut c) = self.initial_state(tape, &vars, g)?;
        let mut prev = START;
        let mut terms = Vec::with_capacity(target.len());
        for &tok in target.ids() {
            if tok >= self.vocab.len() {
                return Err(invalid(format!("target id {tok} outside vocabulary")));
            }
            let (logits, h2, c2, _) = self.step(tape, &vars, g, prev, h, c, reborrow(&mut rng))?;
            terms.push(tape.cross_entropy(logits, tok)?);
            (prev, h, c) = (tok, h2, c2);
        }
        let total = tape.add_n(&terms)?;
        Ok(tape.scale(total, 1.0 / terms.len() as f64))
    }

    pub fn loss(&self, grid: &FeatureGrid, target: &TokenSequence, rng: Option<&mut dyn RngCore>) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, grid, target, rng)?;
        Ok(tape.value(l).item())
    }

    pub fn encode_question(&self, text: &str) -> TokenSequence {
        self.vocab.encode_text(text, self.config.max_question_len)
    }

    /// One training example per question, all sharing `grid`.
    pub fn examples_for(&self, grid: &FeatureGrid, questions: &[String]) -> Vec<VqgExample> {
        questions
            .iter()
            .map(|q| VqgExample {
                grid: grid.clone(),
                target: self.encode_question(q),
            })
            .collect()
    }
}

/// Vocabulary over every reference question of a dataset.
pub fn question_vocabulary<S: AsRef<str>>(questions: &[S], min_count: usize) -> Result<Vocabulary> {
    let corpus: Vec<Vec<String>> = questions.iter().map(|q| tokenize(q.as_ref())).collect();
    Vocabulary::build(&corpus, min_count)
}

/// Sets the logits of `<pad>`, `<start>` and `<unk>` to `-inf`, and of
/// everything except `<end>` once the length cap is reached.
pub(crate) fn inference_mask(logits: &mut [f64], content_len: usize, max_len: usize) {
    for id in [PAD, START, UNK] {
        logits[id] = f64::NEG_INFINITY;
    }
    if content_len >= max_len {
        for (id, l) in logits.iter_mut().enumerate() {
            if id != END {
                *l = f64::NEG_INFINITY;
            }
        }
    }
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest finite entries, ties toward lower index.
fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].is_finite()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

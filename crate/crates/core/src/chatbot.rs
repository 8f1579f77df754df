//! Feedback generator: a bidirectional-GRU encoder whose two directions are
//! summed, and an attention GRU decoder decoded greedily.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, Tape, Var};
use crate::data::DialoguePair;
use crate::error::{invalid, Error, Result};
use crate::nn::{
    additive_attention, bind_all, dropout_var, gru_step, init_bias, init_weight, prefixed, reborrow,
    AttentionParams, AttentionVars, GruParams, GruVars, ParamSet,
};
use crate::tensor::Tensor;
use crate::vocab::{tokenize, TokenSequence, Vocabulary, END, START};
use crate::vqg::{argmax, inference_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatbotConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    /// Cap on content tokens, applied to both the user's text and the reply.
    pub max_reply_len: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl Default for ChatbotConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 500,
            embedding_dim: 500,
            dropout: 0.25,
            max_reply_len: 12,
            encoder_layers: 1,
            decoder_layers: 1,
        }
    }
}

impl ChatbotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embedding_dim == 0 || self.max_reply_len == 0 {
            return Err(invalid("chatbot dims and max_reply_len must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("chatbot dropout {} outside [0, 1)", self.dropout)));
        }
        if self.encoder_layers != 1 || self.decoder_layers != 1 {
            return Err(invalid("only single-layer encoder and decoder are supported"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatbotParams {
    pub embedding: Tensor,
    pub encoder_fwd: GruParams,
    pub encoder_bwd: GruParams,
    pub decoder: GruParams,
    pub attention: AttentionParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

struct ChatbotVars {
    embedding: Var,
    encoder_fwd: GruVars,
    encoder_bwd: GruVars,
    decoder: GruVars,
    attention: AttentionVars,
    out_w: Var,
    out_b: Var,
}

impl ChatbotParams {
    pub fn init(config: &ChatbotConfig, vocab_size: usize, rng: &mut impl rand::Rng) -> Self {
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        Self {
            embedding: init_weight(vocab_size, e, e, rng),
            encoder_fwd: GruParams::init(e, h, rng),
            encoder_bwd: GruParams::init(e, h, rng),
            decoder: GruParams::init(e + h, h, rng),
            attention: AttentionParams::init(h, h, h, rng),
            out_w: init_weight(vocab_size, h, h, rng),
            out_b: init_bias(vocab_size, h, rng),
        }
    }

    fn zeros(config: &ChatbotConfig, k: usize) -> Self {
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        Self {
            embedding: Tensor::zeros(&[k, e]),
            encoder_fwd: GruParams::zeros(e, h),
            encoder_bwd: GruParams::zeros(e, h),
            decoder: GruParams::zeros(e + h, h),
            attention: AttentionParams {
                w_query: Tensor::zeros(&[h, h]),
                w_annotation: Tensor::zeros(&[h, h]),
                v: Tensor::zeros(&[h]),
                attention_dim: h,
            },
            out_w: Tensor::zeros(&[k, h]),
            out_b: Tensor::zeros(&[k]),
        }
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ChatbotVars {
        let v = bind_all(tape, self.tensors());
        let gru = |p: &GruParams, s: &[Var]| GruVars::from_slots(s, p.input_dim, p.hidden_dim);
        ChatbotVars {
            embedding: v[0],
            encoder_fwd: gru(&self.encoder_fwd, &v[1..10]),
            encoder_bwd: gru(&self.encoder_bwd, &v[10..19]),
            decoder: gru(&self.decoder, &v[19..28]),
            attention: AttentionVars::from_slots(&v[28..31]),
            out_w: v[31],
            out_b: v[32],
        }
    }
}

impl ParamSet for ChatbotParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        out.extend(prefixed("encoder_fwd", self.encoder_fwd.named_tensors()));
        out.extend(prefixed("encoder_bwd", self.encoder_bwd.named_tensors()));
        out.extend(prefixed("decoder", self.decoder.named_tensors()));
        out.extend(prefixed("attention", self.attention.named_tensors()));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.encoder_fwd.tensors_mut());
        out.extend(self.encoder_bwd.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out.extend(self.attention.tensors_mut());
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }
}

/// Encoder result on plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs {
    /// `T × hidden_dim`, forward and backward states summed per step.
    pub outputs: Tensor,
    /// Forward final state plus backward final state.
    pub final_hidden: Tensor,
}

#[derive(Clone, Copy)]
struct EncoderVars {
    outputs: Var,
    keys: Var,
    final_hidden: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatReply {
    pub ids: Vec<usize>,
    pub text: String,
}

/// One training pair, already encoded.
#[derive(Clone, Debug)]
pub struct ChatbotExample {
    pub input: TokenSequence,
    pub reply: TokenSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatbotModel {
    pub config: ChatbotConfig,
    pub vocab: Vocabulary,
    pub params: ChatbotParams,
}

impl ChatbotModel {
    pub fn new(config: ChatbotConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ChatbotParams::init(&config, vocab.len(), &mut rng);
        Ok(Self { config, vocab, params })
    }

    pub fn from_parts(config: ChatbotConfig, vocab: Vocabulary, params: ChatbotParams) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config, vocab.len());
        for ((name, want), (_, got)) in expected.iter().zip(params.named_tensors()) {
            if want.as_slice() != got.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: want.clone(),
                    found: got.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, vocab, params })
    }

    pub fn expected_shapes(config: &ChatbotConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        ChatbotParams::zeros(config, vocab_size)
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Encodes free text with the frozen vocabulary (unknown words → `<unk>`).
    pub fn example(&self, pair: &DialoguePair) -> Result<ChatbotExample> {
        let input = self.encode_text(&pair.context);
        let reply = self.encode_text(&pair.reply);
        if input.content().is_empty() || reply.content().is_empty() {
            return Err(invalid("dialogue pair has an empty side"));
        }
        Ok(ChatbotExample { input, reply })
    }

    pub fn encode_text(&self, text: &str) -> TokenSequence {
        self.vocab.encode(&tokenize(text), self.config.max_reply_len)
    }

    fn encode_on_tape(&self, tape: &mut Tape<'_>, vars: &ChatbotVars, input: &[usize]) -> Result<EncoderVars> {
        if input.is_empty() {
            return Err(invalid("cannot encode an empty input"));
        }
        let h = self.config.hidden_dim;
        let mut embedded = Vec::with_capacity(input.len());
        for &id in input {
            if id >= self.vocab.len() {
                return Err(invalid(format!("token id {id} outside vocabulary")));
            }
            embedded.push(tape.gather(vars.embedding, id)?);
        }
        let zero = tape.input(Tensor::zeros(&[h]));
        let mut fwd = Vec::with_capacity(input.len());
        let mut state = zero;
        for &x in &embedded {
            state = gru_step(tape, x, state, &vars.encoder_fwd)?;
            fwd.push(state);
        }
        let mut bwd = vec![zero; input.len()];
        let mut state = zero;
        for (t, &x) in embedded.iter().enumerate().rev() {
            state = gru_step(tape, x, state, &vars.encoder_bwd)?;
            bwd[t] = state;
        }
        let mut summed = Vec::with_capacity(input.len());
        for (f, b) in fwd.iter().zip(&bwd) {
            summed.push(tape.add(*f, *b)?);
        }
        let outputs = tape.stack_rows(&summed)?;
        let keys = vars.attention.project_annotations(tape, outputs)?;
        let final_hidden = tape.add(*fwd.last().unwrap(), bwd[0])?;
        Ok(EncoderVars {
            outputs,
            keys,
            final_hidden,
        })
    }

    /// Runs the encoder over raw token ids.
    pub fn encode(&self, input: &[usize]) -> Result<EncoderOutputs> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let enc = self.encode_on_tape(&mut tape, &vars, input)?;
        Ok(EncoderOutputs {
            outputs: tape.value(enc.outputs).clone(),
            final_hidden: tape.value(enc.final_hidden).clone(),
        })
    }

    fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        vars: &ChatbotVars,
        enc: EncoderVars,
        prev: usize,
        h: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Var)> {
        let (_, context) = additive_attention(tape, h, enc.outputs, enc.keys, &vars.attention)?;
        let emb = tape.gather(vars.embedding, prev)?;
        let input = tape.concat(&[emb, context])?;
        let h2 = gru_step(tape, input, h, &vars.decoder)?;
        let dropped = dropout_var(tape, h2, self.config.dropout, rng)?;
        let proj = tape.matvec(vars.out_w, dropped)?;
        Ok((tape.add(proj, vars.out_b)?, h2))
    }

    fn greedy_from(&self, tape: &mut Tape<'_>, vars: &ChatbotVars, enc: EncoderVars) -> Result<ChatReply> {
        let mut h = enc.final_hidden;
        let mut prev = START;
        let mut ids = Vec::new();
        loop {
            let (logits, h2) = self.decode_step(tape, vars, enc, prev, h, None)?;
            let mut l = tape.value(logits).data().to_vec();
            inference_mask(&mut l, ids.len(), self.config.max_reply_len);
            let best = argmax(&log_softmax(&l)?);
            if best == END {
                break;
            }
            ids.push(best);
            (prev, h) = (best, h2);
        }
        Ok(ChatReply {
            text: self.vocab.decode_text(&ids),
            ids,
        })
    }

    /// Greedy decoding from precomputed encoder outputs.
    pub fn greedy_decode(&self, enc: &EncoderOutputs) -> Result<ChatReply> {
        if enc.outputs.cols() != self.config.hidden_dim || enc.final_hidden.len() != self.config.hidden_dim {
            return Err(invalid("encoder outputs do not match hidden_dim"));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let outputs = tape.input(enc.outputs.clone());
        let keys = vars.attention.project_annotations(&mut tape, outputs)?;
        let final_hidden = tape.input(enc.final_hidden.clone());
        self.greedy_from(&mut tape, &vars, EncoderVars { outputs, keys, final_hidden })
    }

    /// Tokenizes, encodes and greedily answers `text`.
    pub fn reply(&self, text: &str) -> Result<ChatReply> {
        let input = self.encode_text(text);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let enc = self.encode_on_tape(&mut tape, &vars, input.ids())?;
        self.greedy_from(&mut tape, &vars, enc)
    }

    /// Teacher-forced mean cross-entropy over the reply tokens.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        example: &ChatbotExample,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let vars = self.params.bind(tape);
        let enc = self.encode_on_tape(tape, &vars, example.input.ids())?;
        let mut h = enc.final_hidden;
        let mut prev = START;
        let mut terms = Vec::with_capacity(example.reply.len());
        for &tok in example.reply.ids() {
            if tok >= self.vocab.len() {
                return Err(invalid(format!("reply id {tok} outside vocabulary")));
            }
            let (logits, h2) = self.decode_step(tape, &vars, enc, prev, h, reborrow(&mut rng))?;
            terms.push(tape.cross_entropy(logits, tok)?);
            (prev, h) = (tok, h2);
        }
        let total = tape.add_n(&terms)?;
        Ok(tape.scale(total, 1.0 / terms.len() as f64))
    }

    pub fn loss(&self, example: &ChatbotExample, rng: Option<&mut dyn RngCore>) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, example, rng)?;
        Ok(tape.value(l).item())
    }

    /// Loss of a raw dialogue pair; the reply is truncated, never rejected.
    pub fn pair_loss(&self, pair: &DialoguePair, rng: Option<&mut dyn RngCore>) -> Result<f64> {
        self.loss(&self.example(pair)?, rng)
    }

    /// Mean eval-mode loss over a corpus.
    pub fn corpus_loss(&self, pairs: &[DialoguePair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(invalid("empty corpus"));
        }
        let mut total = 0.0;
        for p in pairs {
            total += self.pair_loss(p, None)?;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// Vocabulary over both sides of every pair.
pub fn dialogue_vocabulary(pairs: &[DialoguePair], min_count: usize) -> Result<Vocabulary> {
    let corpus: Vec<Vec<String>> = pairs
        .iter()
        .flat_map(|p| [tokenize(&p.context), tokenize(&p.reply)])
        .collect();
    Vocabulary::build(&corpus, min_count)
}

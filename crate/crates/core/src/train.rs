//! Adam, gradient clipping and the seeded mini-batch training loop shared by
//! both models.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Tape, Var};
use crate::chatbot::{ChatbotExample, ChatbotModel};
use crate::data::DialoguePair;
use crate::error::{invalid, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::vqg::{VqgExample, VqgModel};

/// A model whose parameters can be fitted by [`train`].
pub trait Trainable: Sync {
    type Example: Sync;

    /// Parameters in gradient-slot order.
    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Per-example loss; dropout is active iff `rng` is given.
    fn example_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        example: &Self::Example,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var>;
}

impl Trainable for VqgModel {
    type Example = VqgExample;

    fn parameters(&self) -> Vec<&Tensor> {
        self.params.tensors()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }

    fn example_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        example: &VqgExample,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.loss_on_tape(tape, &example.grid, &example.target, rng)
    }
}

impl Trainable for ChatbotModel {
    type Example = ChatbotExample;

    fn parameters(&self) -> Vec<&Tensor> {
        self.params.tensors()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.tensors_mut()
    }

    fn example_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        example: &ChatbotExample,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.loss_on_tape(tape, example, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = &'p Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads.get(i).shape() || p.shape() != state.m[i].shape() {
            return Err(invalid(format!("adam_step: shape mismatch in slot {i}")));
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.get(i).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop after this many passes over the data, if set.
    pub max_epochs: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Apply dropout while training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_steps: 1000,
            max_epochs: None,
            clip_norm: 5.0,
            seed: 0,
            adam: AdamConfig::default(),
            dropout: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
    pub epochs: usize,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for one (purpose, step, example) triple, so results do not
/// depend on how examples are spread over threads.
fn derived_rng(seed: u64, stream: u64, step: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(stream ^ splitmix(step ^ splitmix(index))));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

/// Mean loss and gradient over `batch`. Examples run in parallel; the
/// reduction is sequential in batch order, so the result is deterministic.
pub fn batch_gradients<M: Trainable>(
    model: &M,
    batch: &[&M::Example],
    dropout_seed: Option<(u64, u64)>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let per_example: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = dropout_seed.map(|(seed, step)| derived_rng(seed, 1, step, i as u64));
            let mut tape = Tape::new();
            let loss = model.example_loss(&mut tape, ex, rng.as_mut().map(|r| r as &mut dyn RngCore))?;
            let value = tape.value(loss).item();
            Ok((value, tape.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<Gradients> = None;
    for r in per_example {
        let (l, g) = r?;
        total += l;
        match acc.as_mut() {
            Some(a) => a.accumulate(&g)?,
            None => acc = Some(g),
        }
    }
    let mut grads = acc.expect("nonempty batch");
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Seeded shuffled mini-batch training: loss → backward → clip → Adam.
pub fn train<M: Trainable>(model: &mut M, examples: &[M::Example], config: &TrainConfig) -> Result<TrainReport> {
    let mut state = AdamState::new(config.adam, model.parameters());
    train_with_state(model, examples, config, &mut state)
}

pub fn train_with_state<M: Trainable>(
    model: &mut M,
    examples: &[M::Example],
    config: &TrainConfig,
    state: &mut AdamState,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch_size must be >= 1"));
    }
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    'epochs: loop {
        if config.max_epochs.is_some_and(|e| report.epochs >= e) || step >= config.max_steps {
            break;
        }
        let mut shuffle_rng = derived_rng(config.seed, 0, report.epochs as u64, 0);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= config.max_steps {
                break 'epochs;
            }
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let dropout_seed = config.dropout.then_some((config.seed, step as u64));
            let (loss, mut grads) = batch_gradients(model, &batch, dropout_seed)?;
            clip_gradients(&mut grads, config.clip_norm)?;
            adam_step(&mut model.parameters_mut(), &grads, state)?;
            report.losses.push(loss);
            step += 1;
            tracing::trace!(step, loss, "train step");
        }
        report.epochs += 1;
    }
    Ok(report)
}

/// Continues training a chatbot on a second corpus with its vocabulary frozen:
/// words the first corpus never kept become `<unk>`.
pub fn fine_tune(model: &mut ChatbotModel, corpus: &[DialoguePair], config: &TrainConfig) -> Result<TrainReport> {
    let examples = corpus
        .iter()
        .map(|p| model.example(p))
        .collect::<Result<Vec<_>>>()?;
    train(model, &examples, config)
}

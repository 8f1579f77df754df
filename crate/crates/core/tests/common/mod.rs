//! Shared oracles, toy corpora and stub models for the integration tests.
#![allow(dead_code)]

pub mod e2e;
pub mod bleu;
pub mod decoding;
pub mod gradients;
pub mod persistence;

use std::sync::Arc;

use elisabot::autodiff::{Tape, Var};
use elisabot::chatbot::{dialogue_vocabulary, ChatbotConfig, ChatbotModel};
use elisabot::data::{pseudo_encoder, DialoguePair, FeatureGrid};
use elisabot::dialogue::{FeedbackGenerator, Models, Photo, QuestionPlanner};
use elisabot::tensor::Tensor;
use elisabot::train::Trainable;
use elisabot::vqg::{question_vocabulary, VqgConfig, VqgExample, VqgModel};
use elisabot::Result;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between the tape's gradient and central differences
/// of `f` with respect to every element of every tensor in `params`.
pub fn fd_check<F>(params: &[Tensor], f: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars).expect("forward");
        tape.value(loss).item()
    };
    let grads = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars).expect("forward");
        tape.backward(loss).expect("backward")
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_EPS;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grads.get(i).data()[j], numeric));
        }
    }
    worst
}

/// Same check through a model's own loss, dropout off.
pub fn fd_check_model<M: Trainable + Clone>(model: &M, example: &M::Example) -> f64 {
    let loss_of = |m: &M| -> f64 {
        let mut tape = Tape::new();
        let l = m.example_loss(&mut tape, example, None).expect("loss");
        tape.value(l).item()
    };
    let grads = {
        let mut tape = Tape::new();
        let l = model.example_loss(&mut tape, example, None).expect("loss");
        tape.backward(l).expect("backward")
    };
    let mut work = model.clone();
    let sizes: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
    let mut worst = 0.0f64;
    for (i, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let orig = work.parameters()[i].data()[j];
            work.parameters_mut()[i].data_mut()[j] = orig + FD_EPS;
            let plus = loss_of(&work);
            work.parameters_mut()[i].data_mut()[j] = orig - FD_EPS;
            let minus = loss_of(&work);
            work.parameters_mut()[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(grads.get(i).data()[j], (plus - minus) / (2.0 * FD_EPS)));
        }
    }
    worst
}

/// Twenty short questions (at most six tokens with the "?"), one per image.
pub const VQG_QUESTIONS: [&str; 20] = [
    "what is the dog doing ?",
    "where is the cat sitting ?",
    "who is holding the baby ?",
    "how old is the boy ?",
    "where is the car ?",
    "is the girl happy ?",
    "where was this picture taken ?",
    "who took this picture ?",
    "what is the man eating ?",
    "how many people are there ?",
    "is that your house ?",
    "what are they playing ?",
    "where is the beach ?",
    "who is the woman ?",
    "what is on the car ?",
    "when was this taken ?",
    "is that your dog ?",
    "what is the boy wearing ?",
    "how old is the house ?",
    "who is sitting there ?",
];

pub const VQG_GRID_ROWS: usize = 9;

pub fn small_vqg_config(annotation_dim: usize, hidden: usize) -> VqgConfig {
    VqgConfig {
        annotation_dim,
        attention_dim: hidden,
        embedding_dim: hidden,
        lstm_dim: hidden,
        ..VqgConfig::default()
    }
}

/// The 32/16 overfit setup: image `img-i` is pseudo-encoded and paired with
/// `VQG_QUESTIONS[i]`.
pub fn vqg_overfit_setup(seed: u64) -> (VqgModel, Vec<VqgExample>) {
    let vocab = question_vocabulary(&VQG_QUESTIONS, 1).unwrap();
    let model = VqgModel::new(small_vqg_config(32, 16), vocab, seed).unwrap();
    let examples = VQG_QUESTIONS
        .iter()
        .enumerate()
        .map(|(i, q)| VqgExample {
            grid: pseudo_encoder(&format!("img-{i}"), VQG_GRID_ROWS, 32).unwrap(),
            target: model.encode_question(q),
        })
        .collect();
    (model, examples)
}

const PEOPLE: [&str; 10] = [
    "mother", "father", "sister", "brother", "wife", "husband", "son", "daughter", "friend", "uncle",
];
const ACTIVITIES: [&str; 5] = ["fishing", "dancing", "swimming", "hiking", "shopping"];
const BAKES: [&str; 5] = ["bread", "cake", "pie", "cookies", "muffins"];

/// Corpus A: fifty "outing" exchanges.
pub fn corpus_a() -> Vec<DialoguePair> {
    let mut out = Vec::new();
    for p in PEOPLE {
        for a in ACTIVITIES {
            out.push(DialoguePair {
                context: format!("i went {a} with my {p}"),
                reply: format!("did your {p} enjoy {a} ?"),
            });
        }
    }
    out
}

/// Corpus B: fifty "baking" exchanges, mostly outside corpus A's vocabulary.
pub fn corpus_b() -> Vec<DialoguePair> {
    let mut out = Vec::new();
    for p in PEOPLE {
        for f in BAKES {
            out.push(DialoguePair {
                context: format!("my {p} baked {f} yesterday"),
                reply: format!("that {f} sounds lovely , was it warm ?"),
            });
        }
    }
    out
}

pub fn small_chatbot(pairs: &[DialoguePair], dim: usize, seed: u64) -> ChatbotModel {
    let config = ChatbotConfig {
        hidden_dim: dim,
        embedding_dim: dim,
        ..ChatbotConfig::default()
    };
    ChatbotModel::new(config, dialogue_vocabulary(pairs, 1).unwrap(), seed).unwrap()
}

pub fn grid(id: &str, rows: usize, cols: usize) -> FeatureGrid {
    pseudo_encoder(id, rows, cols).unwrap()
}

/// Plans `n` numbered questions for every photo.
pub struct FixedPlanner(pub usize);

impl QuestionPlanner for FixedPlanner {
    fn plan(&self, photo: &Photo) -> Result<Vec<String>> {
        Ok((0..self.0).map(|i| format!("question {i} about {} ?", photo.id)).collect())
    }
}

pub struct EchoFeedback;

impl FeedbackGenerator for EchoFeedback {
    fn feedback(&self, answer: &str) -> Result<String> {
        Ok(format!("you said {answer}"))
    }
}

pub fn stub_models(questions: usize) -> Models {
    Models::new(Arc::new(FixedPlanner(questions)), Arc::new(EchoFeedback))
}

/// Tiny real models, for wiring tests that need actual inference.
pub fn tiny_real_models(annotation_dim: usize) -> (Arc<VqgModel>, Arc<ChatbotModel>) {
    let vocab = question_vocabulary(&VQG_QUESTIONS, 1).unwrap();
    let vqg = VqgModel::new(small_vqg_config(annotation_dim, 8), vocab, 7).unwrap();
    let chat = small_chatbot(&corpus_a(), 8, 7);
    (Arc::new(vqg), Arc::new(chat))
}

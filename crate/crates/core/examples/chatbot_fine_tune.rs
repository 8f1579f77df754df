//! Two-phase chatbot training: a general corpus first, then a small domain
//! corpus, keeping the vocabulary from phase one.
//!
//!     cargo run --release --example chatbot_fine_tune

use elisabot::chatbot::{dialogue_vocabulary, ChatbotConfig, ChatbotModel};
use elisabot::data::DialoguePair;
use elisabot::train::{fine_tune, train, AdamConfig, TrainConfig};

fn pairs(raw: &[(&str, &str)]) -> Vec<DialoguePair> {
    raw.iter()
        .map(|(c, r)| DialoguePair { context: c.to_string(), reply: r.to_string() })
        .collect()
}

fn main() -> elisabot::Result<()> {
    let general = pairs(&[
        ("hello there", "hi , how are you ?"),
        ("i am fine thanks", "glad to hear it"),
        ("it is raining today", "stay dry !"),
        ("i like this song", "me too , it is lovely"),
        ("we went to the sea", "that sounds lovely"),
    ]);
    let domain = pairs(&[
        ("this is my sister", "she looks lovely"),
        ("we went to the sea in summer", "how lovely , it sounds fun"),
    ]);

    let config = ChatbotConfig { hidden_dim: 24, embedding_dim: 24, ..ChatbotConfig::default() };
    let mut model = ChatbotModel::new(config, dialogue_vocabulary(&general, 1)?, 3)?;
    let examples: Vec<_> = general.iter().map(|p| model.example(p)).collect::<Result<_, _>>()?;
    let adam = |lr| AdamConfig { learning_rate: lr, ..AdamConfig::default() };

    train(&mut model, &examples, &TrainConfig { max_steps: 800, adam: adam(3e-3), ..TrainConfig::default() })?;
    for p in &general {
        println!("{:<24} -> {}", p.context, model.reply(&p.context)?.text);
    }

    let before = model.corpus_loss(&domain)?;
    fine_tune(&mut model, &domain, &TrainConfig { max_steps: 200, adam: adam(1e-3), ..TrainConfig::default() })?;
    println!("\ndomain loss {before:.3} -> {:.3}", model.corpus_loss(&domain)?);
    for p in &domain {
        println!("{:<30} -> {}", p.context, model.reply(&p.context)?.text);
    }
    Ok(())
}

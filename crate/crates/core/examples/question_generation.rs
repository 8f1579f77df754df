//! Train a small question generator on a handful of photos, then beam-search
//! ranked questions for each.
//!
//!     cargo run --release --example question_generation

use elisabot::data::pseudo_encoder;
use elisabot::train::{train, AdamConfig, TrainConfig};
use elisabot::vqg::{question_vocabulary, VqgConfig, VqgModel};

fn main() -> elisabot::Result<()> {
    let photos = [
        ("beach", vec!["where was this picture taken ?", "who is in the water ?"]),
        ("wedding", vec!["who is getting married ?", "what year was the wedding ?"]),
        ("garden", vec!["what flowers are these ?", "who planted the garden ?"]),
    ];
    let all: Vec<&str> = photos.iter().flat_map(|(_, qs)| qs.iter().copied()).collect();
    let vocab = question_vocabulary(&all, 1)?;

    let config = VqgConfig {
        annotation_dim: 32,
        attention_dim: 16,
        embedding_dim: 16,
        lstm_dim: 16,
        ..VqgConfig::default()
    };
    let mut model = VqgModel::new(config, vocab, 1)?;
    let mut examples = Vec::new();
    for (id, qs) in &photos {
        let grid = pseudo_encoder(id, 9, 32)?;
        let qs: Vec<String> = qs.iter().map(|q| q.to_string()).collect();
        examples.extend(model.examples_for(&grid, &qs));
    }

    let report = train(
        &mut model,
        &examples,
        &TrainConfig {
            max_steps: 600,
            adam: AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() },
            ..TrainConfig::default()
        },
    )?;
    println!("trained {} steps, final loss {:.4}", report.steps(), report.final_loss().unwrap_or(f64::NAN));

    for (id, _) in &photos {
        println!("\n{id}:");
        for (rank, q) in model.beam_search(&pseudo_encoder(id, 9, 32)?)?.iter().enumerate() {
            println!("  {}. {:<40} score {:.3}", rank + 1, q.text, q.score);
        }
    }
    Ok(())
}

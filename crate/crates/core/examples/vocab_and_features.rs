//! Tokenizing, building a vocabulary, and the binary feature-grid format.
//!
//!     cargo run --example vocab_and_features

use elisabot::data::{pseudo_encoder, FeatureGrid};
use elisabot::vocab::{tokenize, Vocabulary};

fn main() -> elisabot::Result<()> {
    let questions = [
        "Who is standing next to the car?",
        "Where was this picture taken?",
        "Is that your car?",
    ];
    let corpus: Vec<Vec<String>> = questions.iter().map(|q| tokenize(q)).collect();
    println!("tokens: {:?}", corpus[0]);

    let vocab = Vocabulary::build(&corpus, 1)?;
    println!("{} entries, first ten: {:?}", vocab.len(), &vocab.tokens()[..10.min(vocab.len())]);

    // Unknown words map to <unk>; the sequence is wrapped in <start>/<end>.
    let seq = vocab.encode_text("who is next to the bicycle ?", 6);
    println!("ids {:?} -> {:?}", seq.ids(), vocab.decode_text(seq.content()));

    // Deterministic stand-in features for a photo id: 196 rows × 2048 columns.
    let grid = pseudo_encoder("holiday-1987", 196, 2048)?;
    let bytes = grid.to_bytes();
    println!("grid {}×{} serializes to {} bytes", grid.rows(), grid.cols(), bytes.len());
    assert_eq!(FeatureGrid::from_bytes(&bytes)?, grid);
    assert_eq!(pseudo_encoder("holiday-1987", 196, 2048)?, grid);
    Ok(())
}

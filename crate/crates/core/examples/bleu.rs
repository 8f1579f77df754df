//! Corpus BLEU over generated questions with several references each.
//!
//!     cargo run --example bleu

use elisabot::bleu::corpus_bleu;
use elisabot::vocab::tokenize;

fn main() -> elisabot::Result<()> {
    let candidates = ["how old is the dog ?", "who is that man", "where was this taken ?"];
    let references = [
        vec!["how old is your dog ?", "what is the dog doing ?"],
        vec!["who is that woman ?"],
        vec!["where was this photo taken ?", "when was it taken ?"],
    ];
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();

    let report = corpus_bleu(&cands, &refs)?;
    for (n, (m, t)) in report.matches.iter().zip(report.totals).enumerate() {
        println!("p{}  {m:>2}/{t:<2}  {:.4}", n + 1, report.precisions[n]);
    }
    println!("brevity penalty {:.4} (candidate {} vs reference {})", report.brevity_penalty, report.candidate_length, report.reference_length);
    println!("BLEU {:.4}  ({:.2} on the 0-100 scale)", report.score, report.score_100());
    Ok(())
}

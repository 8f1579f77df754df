//! Hand-computed BLEU oracles.

use elisabot::bleu::{corpus_bleu, modified_precision};
use elisabot::vocab::tokenize;

fn s(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

pub fn hand_computed_three_sentence_corpus() {
    // Candidates (lengths 6, 4, 5 = 15):
    //   "how old is the dog ?"        vs "how old is your dog ?" / "what is the dog doing ?"
    //   "who is that man"             vs "who is that woman ?"
    //   "where was this taken ?"      vs "where was this photo taken ?" / "when was it taken ?"
    let cands = vec![s("how old is the dog ?"), s("who is that man"), s("where was this taken ?")];
    let refs = vec![
        vec![s("how old is your dog ?"), s("what is the dog doing ?")],
        vec![s("who is that woman ?")],
        vec![s("where was this photo taken ?"), s("when was it taken ?")],
    ];
    // Unigrams: 6/6 + 3/4 + 5/5 = 14/15.
    // Bigrams:
    //   sentence 1: how old ✓, old is ✓, is the ✓ (ref 2), the dog ✓ (ref 2), dog ? ✓ (ref 1) = 5/5
    //   sentence 2: who is ✓, is that ✓, that man ✗ = 2/3
    //   sentence 3: where was ✓, was this ✓, this taken ✗, taken ? ✓ = 3/4   -> 10/12
    // Trigrams:
    //   s1: how old is ✓, old is the ✗, is the dog ✓, the dog ? ✗ = 2/4
    //   s2: who is that ✓, is that man ✗ = 1/2
    //   s3: where was this ✓, was this taken ✗, this taken ? ✗ = 1/3          -> 4/9
    // 4-grams:
    //   s1: how old is the ✗, old is the dog ✗, is the dog ? ✗ = 0/3
    //   s2: who is that man ✗ = 0/1
    //   s3: where was this taken ✗, was this taken ? ✗ = 0/2                   -> 0/6, smoothed 1/7
    // Reference lengths (closest): 6 (tie 6/6), 5, 5 (len 5 vs 6 and 5) = 16; candidate 15.
    let p = [14.0 / 15.0, 10.0 / 12.0, 4.0 / 9.0, 1.0 / 7.0];
    let bp = (1.0f64 - 16.0 / 15.0).exp();
    let expected = bp * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();

    let r = corpus_bleu(&cands, &refs).unwrap();
    assert_eq!(r.matches, [14, 10, 4, 0]);
    assert_eq!(r.totals, [15, 12, 9, 6]);
    assert_eq!((r.candidate_length, r.reference_length), (15, 16));
    for (a, b) in r.precisions.iter().zip(p) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((r.brevity_penalty - bp).abs() < 1e-12);
    assert!((r.score - expected).abs() < 1e-9, "{} vs {}", r.score, expected);
}

pub fn worked_examples() {
    assert_eq!(modified_precision(&[s("the the the the")], &[vec![s("the cat")]], 1).unwrap(), 0.25);
    let c = vec![tokenize("how old is the dog ?")];
    let r = vec![vec![tokenize("how old is the dog ?")]];
    let report = corpus_bleu(&c, &r).unwrap();
    assert_eq!(report.score, 1.0);
    assert_eq!(report.brevity_penalty, 1.0);
    assert!(corpus_bleu::<String>(&[], &[]).is_err());
    assert!(corpus_bleu(&c, &[]).is_err());
}

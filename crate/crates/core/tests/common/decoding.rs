//! Decoding properties of both models.

use super::{corpus_a, small_chatbot, small_vqg_config, VQG_QUESTIONS};
use elisabot::autodiff::softmax;
use elisabot::chatbot::ChatbotModel;
use elisabot::data::{pseudo_encoder, FeatureGrid};
use elisabot::tensor::Tensor;
use elisabot::train::Trainable;
use elisabot::vocab::{Vocabulary, END, START, UNK};
use elisabot::vqg::{question_vocabulary, VqgModel};

/// Random model with parameters stretched by `gain` so that decoding
/// distributions are peaked rather than near-uniform.
fn random_vqg(seed: u64, gain: f64) -> VqgModel {
    let vocab = question_vocabulary(&VQG_QUESTIONS, 1).unwrap();
    let mut m = VqgModel::new(small_vqg_config(6, 5), vocab, seed).unwrap();
    for p in m.parameters_mut() {
        p.data_mut().iter_mut().for_each(|x| *x *= gain);
    }
    m
}

fn random_chatbot(seed: u64, gain: f64) -> ChatbotModel {
    let mut m = small_chatbot(&corpus_a(), 6, seed);
    for p in m.parameters_mut() {
        p.data_mut().iter_mut().for_each(|x| *x *= gain);
    }
    m
}

fn gain(seed: u64) -> f64 {
    [1.0, 3.0, 6.0][seed as usize % 3]
}

pub fn beam_width_one_is_greedy() {
    for seed in 0..100 {
        let m = random_vqg(seed, gain(seed));
        let grid = pseudo_encoder(&format!("p{seed}"), 4, 6).unwrap();
        let greedy = m.greedy_decode(&grid).unwrap();
        let beam = m.beam_search_with(&grid, 1, 1).unwrap();
        assert_eq!(beam.len(), 1, "seed {seed}");
        assert_eq!(beam[0].ids, greedy.ids, "seed {seed}");
        assert!((beam[0].log_prob - greedy.log_prob).abs() < 1e-12);
    }
}

pub fn vqg_outputs_are_capped_sorted_and_unk_free() {
    for seed in 0..100 {
        let m = random_vqg(seed, gain(seed));
        let grid = pseudo_encoder(&format!("q{seed}"), 4, 6).unwrap();
        let beams = m.beam_search(&grid).unwrap();
        assert!(!beams.is_empty() && beams.len() <= m.config.outputs_per_image);
        for w in beams.windows(2) {
            assert!(w[0].score >= w[1].score, "seed {seed}: not sorted");
            assert_ne!(w[0].text, w[1].text);
        }
        for q in beams.iter().chain([&m.greedy_decode(&grid).unwrap()]) {
            assert!(q.ids.len() <= 6, "seed {seed}: {} tokens", q.ids.len());
            assert!(!q.ids.contains(&UNK) && !q.ids.contains(&START) && !q.ids.contains(&END));
            assert!(q.log_prob <= 0.0);
            assert!((q.score - q.log_prob / (q.ids.len() + 1) as f64).abs() < 1e-12);
        }
    }
}

pub fn masked_argmax_never_unk() {
    for seed in 0..1000 {
        let mut m = random_vqg(seed, gain(seed));
        // Make unk the favourite token before masking.
        m.params.out_b.data_mut()[UNK] += 50.0;
        let grid = pseudo_encoder(&format!("u{seed}"), 2, 6).unwrap();
        let (h, c) = m.init_decoder_state(&grid).unwrap();
        let step = m.decode_step(START, &h, &c, &grid, true).unwrap();
        let best = step
            .logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_ne!(best, UNK);
    }
}

pub fn decode_step_distributions() {
    let m = random_vqg(3, 2.0);
    let grid = pseudo_encoder("x", 5, 6).unwrap();
    let (h, c) = m.init_decoder_state(&grid).unwrap();
    let step = m.decode_step(START, &h, &c, &grid, false).unwrap();
    let p = softmax(step.logits.data()).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(step.attention.len(), 5);
    assert!((step.attention.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(m.decode_step(m.vocab.len(), &h, &c, &grid, false).is_err());
    let wrong = pseudo_encoder("x", 5, 7).unwrap();
    assert!(m.decode_step(START, &h, &c, &wrong, false).is_err());
}

pub fn initial_state_is_projected_mean() {
    let m = random_vqg(11, 1.0);
    let grid = pseudo_encoder("mean", 7, 6).unwrap();
    let (h, c) = m.init_decoder_state(&grid).unwrap();
    let mut mean = vec![0.0; 6];
    for r in 0..7 {
        for (j, x) in mean.iter_mut().enumerate() {
            *x += grid.data()[r * 6 + j] as f64 / 7.0;
        }
    }
    for (w, got) in [(&m.params.init_h, &h), (&m.params.init_c, &c)] {
        for i in 0..w.rows() {
            let z: f64 = w.row(i).iter().zip(&mean).map(|(a, b)| a * b).sum();
            assert!((z.tanh() - got.data()[i]).abs() < 1e-12);
        }
    }
    let zero = FeatureGrid::new(3, 6, vec![0.0; 18]).unwrap();
    let (h0, c0) = m.init_decoder_state(&zero).unwrap();
    assert!(h0.data().iter().chain(c0.data()).all(|&x| x == 0.0));
}

pub fn loss_matches_token_probabilities() {
    for seed in 0..10 {
        let m = random_vqg(seed, 2.0);
        let grid = pseudo_encoder(&format!("l{seed}"), 3, 6).unwrap();
        let target = m.encode_question(VQG_QUESTIONS[seed as usize]);
        let loss = m.loss(&grid, &target, None).unwrap();
        let (mut h, mut c) = m.init_decoder_state(&grid).unwrap();
        let mut prev = START;
        let mut prob = 1.0;
        for &t in target.ids() {
            let step = m.decode_step(prev, &h, &c, &grid, false).unwrap();
            prob *= softmax(step.logits.data()).unwrap()[t];
            (prev, h, c) = (t, step.h, step.c);
        }
        let n = target.ids().len() as f64;
        assert!(((-loss * n).exp() - prob).abs() < 1e-9, "seed {seed}");
    }
}

pub fn uniform_logits_give_ln_k() {
    let mut v = random_vqg(0, 1.0);
    v.params.out_w = Tensor::zeros(v.params.out_w.shape());
    v.params.out_b = Tensor::zeros(v.params.out_b.shape());
    let grid = pseudo_encoder("u", 3, 6).unwrap();
    let loss = v.loss(&grid, &v.encode_question("what is the dog doing ?"), None).unwrap();
    assert!((loss - (v.vocab.len() as f64).ln()).abs() < 1e-12);

    let mut c = random_chatbot(0, 1.0);
    c.params.out_w = Tensor::zeros(c.params.out_w.shape());
    c.params.out_b = Tensor::zeros(c.params.out_b.shape());
    let loss = c.pair_loss(&corpus_a()[0], None).unwrap();
    assert!((loss - (c.vocab.len() as f64).ln()).abs() < 1e-12);
}

pub fn reserved_only_vocabulary_gives_empty_question() {
    let vocab = Vocabulary::build::<&str>(&[], 1).unwrap();
    let m = VqgModel::new(small_vqg_config(4, 3), vocab, 1).unwrap();
    let grid = pseudo_encoder("empty", 2, 4).unwrap();
    for q in m.beam_search(&grid).unwrap() {
        assert!(q.ids.is_empty() && q.text.is_empty());
    }
}

pub fn chatbot_replies_are_capped_and_unk_free() {
    let inputs = ["i went fishing with my uncle", "hello", "my zebra is purple", "did you"];
    for seed in 0..1000 {
        let mut m = random_chatbot(seed, gain(seed));
        if seed % 2 == 0 {
            m.params.out_b.data_mut()[UNK] += 30.0;
        }
        let r = m.reply(inputs[seed as usize % inputs.len()]).unwrap();
        assert!(r.ids.len() <= 12, "seed {seed}");
        assert!(!r.ids.contains(&UNK) && !r.ids.contains(&START) && !r.ids.contains(&END));
    }
}

pub fn chatbot_end_rigged_reply_is_empty() {
    let mut m = random_chatbot(5, 1.0);
    m.params.out_w = Tensor::zeros(m.params.out_w.shape());
    m.params.out_b = Tensor::zeros(m.params.out_b.shape());
    m.params.out_b.data_mut()[END] = 10.0;
    let r = m.reply("i went hiking with my friend").unwrap();
    assert!(r.ids.is_empty() && r.text.is_empty());
}

pub fn chatbot_greedy_is_deterministic() {
    let m = random_chatbot(8, 3.0);
    let a = m.reply("i went dancing with my wife").unwrap();
    let b = m.reply("i went dancing with my wife").unwrap();
    assert_eq!(a, b);
    let enc = m.encode(m.encode_text("i went dancing with my wife").ids()).unwrap();
    assert_eq!(m.greedy_decode(&enc).unwrap(), a);
}

fn embed(m: &ChatbotModel, id: usize) -> Tensor {
    Tensor::vector(m.params.embedding.row(id).to_vec())
}

pub fn encoder_sums_two_independent_passes() {
    let m = random_chatbot(21, 2.0);
    let ids = m.encode_text("i went swimming with my son").ids().to_vec();
    let enc = m.encode(&ids).unwrap();
    let hd = m.config.hidden_dim;
    assert_eq!(enc.outputs.shape(), &[ids.len(), hd]);

    let mut fwd = Vec::new();
    let mut h = Tensor::zeros(&[hd]);
    for &t in &ids {
        h = m.params.encoder_fwd.step(&embed(&m, t), &h).unwrap();
        fwd.push(h.clone());
    }
    let mut bwd = vec![Tensor::zeros(&[hd]); ids.len()];
    let mut h = Tensor::zeros(&[hd]);
    for (i, &t) in ids.iter().enumerate().rev() {
        h = m.params.encoder_bwd.step(&embed(&m, t), &h).unwrap();
        bwd[i] = h.clone();
    }
    for t in 0..ids.len() {
        for j in 0..hd {
            let want = fwd[t].data()[j] + bwd[t].data()[j];
            assert!((enc.outputs.row(t)[j] - want).abs() < 1e-12);
        }
    }
    for j in 0..hd {
        let want = fwd.last().unwrap().data()[j] + bwd[0].data()[j];
        assert!((enc.final_hidden.data()[j] - want).abs() < 1e-12);
    }
}

pub fn encoder_single_step_and_palindrome() {
    let mut m = random_chatbot(4, 2.0);
    let one = m.encode(&[5]).unwrap();
    let x = embed(&m, 5);
    let z = Tensor::zeros(&[m.config.hidden_dim]);
    let f = m.params.encoder_fwd.step(&x, &z).unwrap();
    let b = m.params.encoder_bwd.step(&x, &z).unwrap();
    for j in 0..z.len() {
        assert!((one.outputs.row(0)[j] - f.data()[j] - b.data()[j]).abs() < 1e-12);
    }

    m.params.encoder_bwd = m.params.encoder_fwd.clone();
    let pal = [7, 9, 4, 9, 7];
    let enc = m.encode(&pal).unwrap();
    let t = pal.len();
    for i in 0..t {
        for j in 0..z.len() {
            assert!((enc.outputs.row(i)[j] - enc.outputs.row(t - 1 - i)[j]).abs() < 1e-9);
        }
    }
    assert!(m.encode(&[]).is_err());
}

//! Checkpoint and transcript round trips.

use super::{corpus_a, small_chatbot, small_vqg_config, stub_models, VQG_QUESTIONS};
use elisabot::chatbot::ChatbotModel;
use elisabot::checkpoint::{load_checkpoint, load_checkpoint_of_kind, ModelCheckpoint, ModelKind};
use elisabot::data::pseudo_encoder;
use elisabot::dialogue::{transcript_from_jsonl, transcript_to_jsonl, Event, Photo, Session};
use elisabot::train::Trainable;
use elisabot::vqg::{question_vocabulary, VqgModel};
use elisabot::Error;

fn vqg(seed: u64) -> VqgModel {
    VqgModel::new(small_vqg_config(6, 5), question_vocabulary(&VQG_QUESTIONS, 1).unwrap(), seed).unwrap()
}

fn bits<M: Trainable>(m: &M) -> Vec<Vec<u64>> {
    m.parameters().iter().map(|t| t.data().iter().map(|x| x.to_bits()).collect()).collect()
}

pub fn model_round_trips_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let v = vqg(seed);
        let path = dir.path().join(format!("v{seed}.ckpt"));
        v.save(&path).unwrap();
        let back = VqgModel::load(&path).unwrap();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back.vocab, v.vocab);
        assert_eq!(back.config, v.config);
        let g = pseudo_encoder("x", 3, 6).unwrap();
        assert_eq!(back.beam_search(&g).unwrap(), v.beam_search(&g).unwrap());

        let c = small_chatbot(&corpus_a(), 5, seed);
        let path = dir.path().join(format!("c{seed}.ckpt"));
        c.save(&path).unwrap();
        let back = ChatbotModel::load(&path).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back, c);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(ModelCheckpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }
}

pub fn loader_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ckpt");
    vqg(1).save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"JUNK");
    assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));

    assert!(matches!(ModelCheckpoint::from_bytes(&good[..good.len() - 5]), Err(Error::Format { .. })));

    assert!(matches!(load_checkpoint_of_kind(&path, ModelKind::Chatbot), Err(Error::KindMismatch { .. })));
    assert!(matches!(ChatbotModel::load(&path), Err(Error::KindMismatch { .. })));

    // A table that disagrees with the hyperparameters.
    let mut ck = load_checkpoint(&path).unwrap();
    ck.tensors[0].shape = vec![ck.tensors[0].shape[0], ck.tensors[0].shape[1] - 1];
    let n = ck.tensors[0].shape.iter().product();
    ck.tensors[0].data.truncate(n);
    assert!(matches!(VqgModel::from_checkpoint(&ck), Err(Error::ShapeMismatch { .. })));
}

pub fn transcript_round_trip_is_exact() {
    let mut s = Session::new("t", vec![Photo::new("a"), Photo::new("b")], 3, stub_models(5)).unwrap();
    let script = [
        Event::command("/start", 10),
        Event::command("/yes", 11),
        Event::text("my brother, in 1975!", 12),
        Event::text("\"quoted\" and unicode é", 13),
        Event::command("/exit", 14),
    ];
    for e in &script {
        s.handle_event(e).unwrap();
    }
    let text = transcript_to_jsonl(s.transcript()).unwrap();
    assert_eq!(text.lines().count(), s.transcript().len());
    let back = transcript_from_jsonl(&text).unwrap();
    assert_eq!(back, s.transcript());
    assert_eq!(transcript_to_jsonl(&back).unwrap(), text);
}

//! Drives the real binary: training, generation, evaluation and a scripted
//! HTTP session against `serve`, including a kill/restart.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use elisabot::data::{write_records, DialoguePair, QuestionRecord};
use elisabot::dialogue::{transcript_from_jsonl, TranscriptEntry};
use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{corpus_a, corpus_b, VQG_QUESTIONS};

pub const IMAGES: usize = 5;
const ROWS: &str = "9";
const COLS: &str = "16";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_elisabot"))
}

/// Runs a subcommand to completion and returns its stdout.
pub fn run(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn elisabot");
    assert!(
        out.status.success(),
        "elisabot {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four questions per image, at least four tokens each.
fn image_questions(i: usize) -> Vec<String> {
    (0..4).map(|k| VQG_QUESTIONS[(i * 4 + k) % VQG_QUESTIONS.len()].to_string()).collect()
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub dataset: PathBuf,
    pub vqg: PathBuf,
    pub chatbot: PathBuf,
}

impl Artifacts {
    pub fn feature(&self, i: usize) -> PathBuf {
        self.dir.join("feats").join(format!("img-{i}.feat"))
    }
}

pub fn build_artifacts(dir: &Path) -> Artifacts {
    std::fs::create_dir_all(dir.join("feats")).unwrap();
    let mut records = Vec::new();
    for i in 0..IMAGES {
        let id = format!("img-{i}");
        let out = dir.join("feats").join(format!("{id}.feat"));
        run(&["pseudo-features", "--id", &id, "--rows", ROWS, "--cols", COLS, "--out", path(&out)]);
        records.push(QuestionRecord {
            image_id: id.clone(),
            features: format!("feats/{id}.feat"),
            questions: image_questions(i),
        });
    }
    let dataset = dir.join("questions.jsonl");
    write_records(&records, &dataset).unwrap();

    let vqg = dir.join("vqg.ckpt");
    let summary: Value = serde_json::from_str(&run(&[
        "train-vqg", "--dataset", path(&dataset), "--out", path(&vqg),
        "--embedding-dim", "16", "--lstm-dim", "16", "--attention-dim", "16",
        "--outputs-per-image", "6", "--steps", "400", "--lr", "3e-3", "--seed", "1",
    ]))
    .unwrap();
    assert_eq!(summary["examples"], IMAGES * 4);

    let a: Vec<DialoguePair> = corpus_a();
    let b: Vec<DialoguePair> = corpus_b();
    let (a_path, b_path) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    write_records(&a, &a_path).unwrap();
    write_records(&b, &b_path).unwrap();
    let chatbot = dir.join("chatbot.ckpt");
    let summary: Value = serde_json::from_str(&run(&[
        "train-chatbot", "--dataset", path(&a_path), "--fine-tune", path(&b_path), "--out", path(&chatbot),
        "--hidden-dim", "16", "--embedding-dim", "16", "--steps", "150", "--fine-tune-steps", "60",
        "--lr", "3e-3", "--batch-size", "16",
    ]))
    .unwrap();
    let ft = &summary["fine_tune"];
    assert!(
        ft["loss_after"].as_f64().unwrap() < ft["loss_before"].as_f64().unwrap(),
        "fine-tune did not reduce loss: {summary}"
    );

    Artifacts { dir: dir.to_path_buf(), dataset, vqg, chatbot }
}

pub fn check_offline_commands(art: &Artifacts) {
    let out: Value = serde_json::from_str(&run(&[
        "gen-questions", "--checkpoint", path(&art.vqg), "--features", path(&art.feature(0)), "--json",
    ]))
    .unwrap();
    let questions = out.as_array().expect("question list");
    assert!((4..=6).contains(&questions.len()), "{out}");
    for q in questions {
        let text = q["text"].as_str().unwrap();
        assert!(text.split_whitespace().count() <= 6);
        assert!(!text.contains("<unk>"));
    }
    let plain = run(&["gen-questions", "--checkpoint", path(&art.vqg), "--pseudo-id", "img-1", "--rows", ROWS]);
    assert!(plain.lines().next().unwrap().starts_with("1\t"), "{plain}");

    let refs = art.dir.join("refs.txt");
    let first: Vec<String> = (0..IMAGES).map(|i| image_questions(i)[0].clone()).collect();
    std::fs::write(&refs, first.join("\n")).unwrap();
    let bleu: Value =
        serde_json::from_str(&run(&["eval-bleu", "--dataset", path(&art.dataset), "--candidates", path(&refs)])).unwrap();
    assert_eq!(bleu["score"], 1.0);
    assert_eq!(bleu["score_100"], 100.0);
    let bleu: Value =
        serde_json::from_str(&run(&["eval-bleu", "--dataset", path(&art.dataset), "--checkpoint", path(&art.vqg)])).unwrap();
    let score = bleu["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
}

/// Kills the server when dropped so failing tests don't leak processes.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn serve(art: &Artifacts, vqg: &Path, chatbot: &Path) -> std::io::Result<Server> {
    let mut child = bin()
        .args(["serve", "--listen", "127.0.0.1:0"])
        .args(["--vqg-checkpoint", path(vqg), "--chatbot-checkpoint", path(chatbot)])
        .args(["--photo-dir", path(&art.dir.join("photos")), "--transcript-dir", path(&art.dir.join("transcripts"))])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line)?;
    match line.trim().strip_prefix("listening on ") {
        Some(addr) => Ok(Server { child, base: format!("http://{addr}") }),
        None => {
            let out = child.wait_with_output()?;
            Err(std::io::Error::other(String::from_utf8_lossy(&out.stderr).into_owned()))
        }
    }
}

pub fn check_swapped_checkpoints_rejected(art: &Artifacts) {
    let err = serve(art, &art.chatbot, &art.vqg).err().expect("serve must refuse swapped checkpoints");
    assert!(err.to_string().contains("kind"), "{err}");
}

fn post(client: &Client, url: String, body: Value) -> (u16, Value) {
    let resp = client.post(url).json(&body).send().unwrap();
    (resp.status().as_u16(), resp.json().unwrap())
}

fn send(client: &Client, base: &str, id: &str, kind: &str, payload: &str) -> Vec<Value> {
    let (status, body) = post(client, format!("{base}/sessions/{id}/events"), json!({"kind": kind, "payload": payload}));
    assert_eq!(status, 200, "{body}");
    body["actions"].as_array().unwrap().clone()
}

fn kinds(actions: &[Value]) -> Vec<&str> {
    actions.iter().map(|a| a["kind"].as_str().unwrap()).collect()
}

fn transcript(client: &Client, base: &str, id: &str) -> Vec<TranscriptEntry> {
    let resp = client.get(format!("{base}/sessions/{id}/transcript")).send().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let body: Value = resp.json().unwrap();
    serde_json::from_value(body["entries"].clone()).unwrap()
}

fn create(client: &Client, base: &str, photos: &[&str], seed: u64) -> String {
    let (status, body) = post(client, format!("{base}/sessions"), json!({"photos": photos, "seed": seed}));
    assert_eq!(status, 201, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// Full scripted session: upload, accept a photo, answer every question, exit.
/// Returns the number of questions asked about the accepted photo.
pub fn scripted_session(art: &Artifacts, server: &Server) -> usize {
    let client = Client::new();
    let base = &server.base;
    let id = create(&client, base, &["img-0", "img-1"], 3);
    for i in 0..2 {
        let resp = client
            .post(format!("{base}/sessions/{id}/photos?photo_id=img-{i}"))
            .body(std::fs::read(art.feature(i)).unwrap())
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 201);
    }

    let actions = send(&client, base, &id, "command", "/start");
    assert_eq!(kinds(&actions)[0], "show_photo");
    let photo = actions[0]["photo"].as_str().unwrap().to_string();
    let actions = send(&client, base, &id, "command", "/yes");
    assert_eq!(kinds(&actions), ["ask_question"]);

    let mut asked = 1;
    let mut seen = vec![actions[0]["text"].as_str().unwrap().to_string()];
    for turn in 0.. {
        assert!(turn < 10, "photo cycle never ended");
        let actions = send(&client, base, &id, "user_text", &format!("it was a lovely day number {turn}"));
        let k = kinds(&actions);
        assert_eq!(k[0], "feedback_comment", "answer must be followed by feedback first");
        match k.get(1) {
            Some(&"ask_question") => {
                asked += 1;
                let q = actions[1]["text"].as_str().unwrap().to_string();
                assert!(!seen.contains(&q), "question repeated: {q}");
                seen.push(q);
            }
            Some(&"show_photo") => {
                assert_ne!(actions[1]["photo"].as_str().unwrap(), photo);
                break;
            }
            other => panic!("unexpected follow-up {other:?}"),
        }
    }

    let actions = send(&client, base, &id, "command", "/exit");
    assert_eq!(kinds(&actions), ["end_session"]);
    let (status, _) = post(&client, format!("{base}/sessions/{id}/events"), json!({"kind": "user_text", "payload": "hi"}));
    assert_eq!(status, 409);

    let entries = transcript(&client, base, &id);
    let file = art.dir.join("transcripts").join(format!("{id}.jsonl"));
    assert_eq!(transcript_from_jsonl(&std::fs::read_to_string(file).unwrap()).unwrap(), entries);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
    }
    assert_eq!(entries.last().unwrap().kind, "end_session");
    asked
}

/// Sends five events, SIGKILLs the server, restarts it and checks that the
/// transcript survived intact.
pub fn kill_restart(art: &Artifacts) {
    let client = Client::new();
    let server = serve(art, &art.vqg, &art.chatbot).unwrap();
    let id = create(&client, &server.base, &["img-2", "img-3", "img-4"], 9);
    for (kind, payload) in [
        ("command", "/start"),
        ("command", "/yes"),
        ("user_text", "my brother took that one"),
        ("user_text", "we were at the seaside"),
        ("command", "/change"),
    ] {
        send(&client, &server.base, &id, kind, payload);
    }
    let before = transcript(&client, &server.base, &id);
    server.kill();

    let server = serve(art, &art.vqg, &art.chatbot).unwrap();
    let after = transcript(&client, &server.base, &id);
    assert_eq!(before, after);
    let user_events = after.iter().filter(|e| e.role == elisabot::dialogue::Role::User).count();
    assert_eq!(user_events, 5);
}

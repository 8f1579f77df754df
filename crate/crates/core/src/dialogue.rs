//! The session state machine: propose a photo, ask 4–6 questions about it,
//! comment on every answer, move on, and stop on `/exit` or when the photos
//! run out.
//!
//! ```text
//! AwaitingPhotos --/start--> PhotoProposed --/yes--> AwaitingAnswer
//!                                 |  ^                  |   |
//!                          /change|  +---budget spent---+   | answer
//!                                 v                         v
//!                         (next photo or Ended)   feedback + next question
//! ```
//!
//! `/exit` ends the session from any state. Every transition happens inside
//! [`Session::handle_event`], which either applies an event completely or
//! leaves the session untouched.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chatbot::ChatbotModel;
use crate::data::{load_feature_grid, pseudo_encoder};
use crate::error::{invalid, Error, Result};
use crate::vqg::VqgModel;

/// Rows used when a photo has no uploaded features and is pseudo-encoded
/// (a 14×14 grid).
pub const PSEUDO_GRID_ROWS: usize = 196;

pub const MIN_QUESTIONS_PER_PHOTO: usize = 4;
pub const MAX_QUESTIONS_PER_PHOTO: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Photo {
    pub id: String,
    /// Feature-grid file; without one the photo is pseudo-encoded from its id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

impl Photo {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            features: None,
        }
    }

    pub fn with_features(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            features: Some(path.into()),
        }
    }
}

/// Produces the ranked questions for a photo.
pub trait QuestionPlanner: Send + Sync {
    fn plan(&self, photo: &Photo) -> Result<Vec<String>>;
}

/// Comments on a user's answer.
pub trait FeedbackGenerator: Send + Sync {
    fn feedback(&self, answer: &str) -> Result<String>;
}

impl QuestionPlanner for VqgModel {
    fn plan(&self, photo: &Photo) -> Result<Vec<String>> {
        let grid = match &photo.features {
            Some(path) => load_feature_grid(path)?,
            None => pseudo_encoder(&photo.id, PSEUDO_GRID_ROWS, self.config.annotation_dim)?,
        };
        Ok(self.beam_search(&grid)?.into_iter().map(|q| q.text).collect())
    }
}

impl FeedbackGenerator for ChatbotModel {
    fn feedback(&self, answer: &str) -> Result<String> {
        Ok(self.reply(answer)?.text)
    }
}

/// The two models a session talks through. Shared, never mutated.
#[derive(Clone)]
pub struct Models {
    pub planner: Arc<dyn QuestionPlanner>,
    pub feedback: Arc<dyn FeedbackGenerator>,
}

impl Models {
    pub fn new(planner: Arc<dyn QuestionPlanner>, feedback: Arc<dyn FeedbackGenerator>) -> Self {
        Self { planner, feedback }
    }
}

impl fmt::Debug for Models {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Models")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingPhotos,
    PhotoProposed,
    AwaitingAnswer,
    Ended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Start,
    Yes,
    Change,
    Exit,
}

pub const VALID_COMMANDS: &str = "/start, /yes, /change, /exit";

impl Command {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_lowercase().as_str() {
            "/start" => Some(Self::Start),
            "/yes" => Some(Self::Yes),
            "/change" => Some(Self::Change),
            "/exit" => Some(Self::Exit),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Command,
    UserText,
    AddPhoto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    /// Command name, answer text, or photo id.
    pub payload: String,
    /// Milliseconds; supplied by the caller so replays are exact.
    #[serde(default)]
    pub timestamp: u64,
    /// Feature file for `add_photo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

impl Event {
    pub fn command(name: &str, timestamp: u64) -> Self {
        Self {
            kind: EventKind::Command,
            payload: name.to_string(),
            timestamp,
            features: None,
        }
    }

    pub fn text(text: &str, timestamp: u64) -> Self {
        Self {
            kind: EventKind::UserText,
            payload: text.to_string(),
            timestamp,
            features: None,
        }
    }

    pub fn add_photo(photo: Photo, timestamp: u64) -> Self {
        Self {
            kind: EventKind::AddPhoto,
            payload: photo.id,
            timestamp,
            features: photo.features,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ShowPhoto,
    AskQuestion,
    FeedbackComment,
    InfoMessage,
    EndSession,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::ShowPhoto => "show_photo",
            ActionKind::AskQuestion => "ask_question",
            ActionKind::FeedbackComment => "feedback_comment",
            ActionKind::InfoMessage => "info_message",
            ActionKind::EndSession => "end_session",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BotAction {
    pub kind: ActionKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo: Option<String>,
}

impl BotAction {
    fn new(kind: ActionKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            photo: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Bot,
}

/// One line of the append-only session log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub role: Role,
    pub kind: String,
    pub payload: String,
    /// Index of the user event this entry belongs to.
    pub turn: u64,
    pub timestamp: u64,
}

#[derive(Clone, Debug)]
pub struct Session {
    id: String,
    rng: ChaCha8Rng,
    models: Models,
    queue: VecDeque<Photo>,
    known: HashSet<String>,
    current: Option<Photo>,
    plans: HashMap<String, Vec<String>>,
    plan: Vec<String>,
    asked: usize,
    budget: usize,
    state: SessionState,
    transcript: Vec<TranscriptEntry>,
    turn: u64,
}

impl Session {
    /// Photos are shuffled once with the session seed and proposed in that
    /// order, each at most once.
    pub fn new(id: impl Into<String>, photos: Vec<Photo>, seed: u64, models: Models) -> Result<Self> {
        if photos.is_empty() {
            return Err(invalid("a session needs at least one photo"));
        }
        let mut known = HashSet::new();
        for p in &photos {
            if !known.insert(p.id.clone()) {
                return Err(invalid(format!("duplicate photo id {:?}", p.id)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut photos = photos;
        photos.shuffle(&mut rng);
        Ok(Self {
            id: id.into(),
            rng,
            models,
            queue: photos.into(),
            known,
            current: None,
            plans: HashMap::new(),
            plan: Vec::new(),
            asked: 0,
            budget: 0,
            state: SessionState::AwaitingPhotos,
            transcript: Vec::new(),
            turn: 0,
        })
    }

    /// Rebuilds a session by feeding `events` to a fresh one.
    pub fn replay(
        id: impl Into<String>,
        photos: Vec<Photo>,
        seed: u64,
        models: Models,
        events: &[Event],
    ) -> Result<Self> {
        let mut s = Self::new(id, photos, seed, models)?;
        for e in events {
            s.handle_event(e)?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_ended(&self) -> bool {
        self.state == SessionState::Ended
    }

    pub fn current_photo(&self) -> Option<&Photo> {
        self.current.as_ref()
    }

    /// Questions planned for this photo visit.
    pub fn question_budget(&self) -> usize {
        self.budget
    }

    pub fn remaining_photos(&self) -> usize {
        self.queue.len()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn has_photo(&self, id: &str) -> bool {
        self.known.contains(id)
    }

    /// Points an already-known photo at a feature file. Takes effect the
    /// next time the photo's questions are planned; returns false for an
    /// unknown id.
    pub fn attach_features(&mut self, id: &str, path: PathBuf) -> bool {
        if !self.known.contains(id) {
            return false;
        }
        for p in self.queue.iter_mut().chain(self.current.as_mut()) {
            if p.id == id {
                p.features = Some(path.clone());
            }
        }
        self.plans.remove(id);
        true
    }

    /// Applies one event. On error the session is unchanged.
    pub fn handle_event(&mut self, event: &Event) -> Result<Vec<BotAction>> {
        if self.is_ended() {
            return Err(Error::SessionEnded);
        }
        let mut next = self.clone();
        let actions = next.apply(event)?;
        *self = next;
        Ok(actions)
    }

    /// Ends an idle session; a no-op if it already ended.
    pub fn expire(&mut self, timestamp: u64) -> Vec<BotAction> {
        if self.is_ended() {
            return Vec::new();
        }
        let mut actions = Vec::new();
        self.end(&mut actions, "This session was closed after a period of inactivity.");
        self.log_actions(&actions, timestamp);
        actions
    }

    fn apply(&mut self, event: &Event) -> Result<Vec<BotAction>> {
        self.turn += 1;
        self.log(Role::User, kind_name(event.kind), &event.payload, event.timestamp);
        let mut actions = Vec::new();
        match event.kind {
            EventKind::Command => self.on_command(&event.payload, &mut actions)?,
            EventKind::UserText => {
                let text = event.payload.trim();
                if text.starts_with('/') {
                    self.on_command(text, &mut actions)?;
                } else {
                    self.on_text(text, &mut actions)?;
                }
            }
            EventKind::AddPhoto => {
                let photo = Photo {
                    id: event.payload.clone(),
                    features: event.features.clone(),
                };
                self.on_add_photo(photo, &mut actions)?;
            }
        }
        self.log_actions(&actions, event.timestamp);
        Ok(actions)
    }

    fn on_command(&mut self, name: &str, actions: &mut Vec<BotAction>) -> Result<()> {
        let Some(cmd) = Command::parse(name) else {
            actions.push(BotAction::new(
                ActionKind::InfoMessage,
                format!("Unknown command {:?}. Valid commands: {VALID_COMMANDS}.", name.trim()),
            ));
            return Ok(());
        };
        use SessionState::*;
        match (cmd, self.state) {
            (Command::Exit, _) => self.end(actions, "Thank you for sharing your memories. Goodbye!"),
            (Command::Start, AwaitingPhotos) => self.propose_next(actions),
            (Command::Start, _) => actions.push(BotAction::new(
                ActionKind::InfoMessage,
                "The session has already started. Use /change for another photo or /exit to finish.",
            )),
            (Command::Yes, PhotoProposed) => self.accept(actions)?,
            (Command::Change, PhotoProposed | AwaitingAnswer) => self.propose_next(actions),
            (Command::Yes | Command::Change, AwaitingPhotos) => {
                actions.push(BotAction::new(ActionKind::InfoMessage, "Send /start to begin."))
            }
            (Command::Yes, AwaitingAnswer) => actions.push(BotAction::new(
                ActionKind::InfoMessage,
                "We are already talking about this photo. Please answer the question, or use /change.",
            )),
            (_, Ended) => return Err(Error::SessionEnded),
        }
        Ok(())
    }

    fn on_text(&mut self, text: &str, actions: &mut Vec<BotAction>) -> Result<()> {
        match self.state {
            SessionState::AwaitingAnswer => {
                let comment = self.models.feedback.feedback(text)?;
                actions.push(BotAction::new(ActionKind::FeedbackComment, comment));
                if self.asked < self.budget && self.asked < self.plan.len() {
                    self.ask_next(actions);
                } else {
                    self.propose_next(actions);
                }
            }
            SessionState::PhotoProposed => actions.push(BotAction::new(
                ActionKind::InfoMessage,
                "Shall we talk about this photo? Reply /yes or /change.",
            )),
            SessionState::AwaitingPhotos => {
                actions.push(BotAction::new(ActionKind::InfoMessage, "Send /start to begin."))
            }
            SessionState::Ended => return Err(Error::SessionEnded),
        }
        Ok(())
    }

    fn on_add_photo(&mut self, photo: Photo, actions: &mut Vec<BotAction>) -> Result<()> {
        if photo.id.trim().is_empty() {
            return Err(invalid("photo id must not be empty"));
        }
        let text = if self.known.insert(photo.id.clone()) {
            let msg = format!("Photo {} added.", photo.id);
            self.queue.push_back(photo);
            msg
        } else {
            format!("Photo {} was already added.", photo.id)
        };
        actions.push(BotAction::new(ActionKind::InfoMessage, text));
        Ok(())
    }

    fn propose_next(&mut self, actions: &mut Vec<BotAction>) {
        self.plan.clear();
        self.asked = 0;
        self.budget = 0;
        match self.queue.pop_front() {
            Some(photo) => {
                actions.push(BotAction {
                    kind: ActionKind::ShowPhoto,
                    text: "Here is one of your photos.".into(),
                    photo: Some(photo.id.clone()),
                });
                actions.push(BotAction::new(
                    ActionKind::InfoMessage,
                    "Do you want to talk about this photo? Reply /yes or /change.",
                ));
                self.current = Some(photo);
                self.state = SessionState::PhotoProposed;
            }
            None => self.end(actions, "There are no more pictures remaining to talk about. Goodbye!"),
        }
    }

    fn accept(&mut self, actions: &mut Vec<BotAction>) -> Result<()> {
        let photo = self.current.clone().expect("a proposed photo");
        let plan = match self.plans.get(&photo.id) {
            Some(p) => p.clone(),
            None => {
                let p = self.models.planner.plan(&photo)?;
                self.plans.insert(photo.id.clone(), p.clone());
                p
            }
        };
        self.budget = self.rng.gen_range(MIN_QUESTIONS_PER_PHOTO..=MAX_QUESTIONS_PER_PHOTO);
        self.plan = plan;
        self.asked = 0;
        if self.plan.is_empty() {
            actions.push(BotAction::new(
                ActionKind::InfoMessage,
                "I could not think of a question about this photo.",
            ));
            self.propose_next(actions);
        } else {
            self.ask_next(actions);
        }
        Ok(())
    }

    fn ask_next(&mut self, actions: &mut Vec<BotAction>) {
        actions.push(BotAction::new(ActionKind::AskQuestion, self.plan[self.asked].clone()));
        self.asked += 1;
        self.state = SessionState::AwaitingAnswer;
    }

    fn end(&mut self, actions: &mut Vec<BotAction>, text: &str) {
        actions.push(BotAction::new(ActionKind::EndSession, text));
        self.state = SessionState::Ended;
        self.current = None;
    }

    fn log(&mut self, role: Role, kind: &str, payload: &str, timestamp: u64) {
        self.transcript.push(TranscriptEntry {
            seq: self.transcript.len() as u64,
            role,
            kind: kind.to_string(),
            payload: payload.to_string(),
            turn: self.turn,
            timestamp,
        });
    }

    fn log_actions(&mut self, actions: &[BotAction], timestamp: u64) {
        for a in actions {
            let payload = a.photo.clone().unwrap_or_else(|| a.text.clone());
            self.log(Role::Bot, a.kind.as_str(), &payload, timestamp);
        }
    }
}

fn kind_name(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Command => "command",
        EventKind::UserText => "user_text",
        EventKind::AddPhoto => "add_photo",
    }
}

/// One JSON document per entry, newline-terminated.
pub fn transcript_to_jsonl(entries: &[TranscriptEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn transcript_from_jsonl(text: &str) -> Result<Vec<TranscriptEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

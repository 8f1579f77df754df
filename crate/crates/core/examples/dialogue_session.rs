//! Drive a session with hand-written planner/feedback components and print
//! the resulting transcript.
//!
//!     cargo run --example dialogue_session

use std::sync::Arc;

use elisabot::dialogue::{transcript_to_jsonl, Event, FeedbackGenerator, Models, Photo, QuestionPlanner, Session};

struct CannedQuestions;

impl QuestionPlanner for CannedQuestions {
    fn plan(&self, photo: &Photo) -> elisabot::Result<Vec<String>> {
        Ok(["who is in this picture ?", "where was it taken ?", "what year was it ?", "who took it ?", "what happened next ?", "do you miss it ?"]
            .iter()
            .map(|q| format!("{q} ({})", photo.id))
            .collect())
    }
}

struct Nod;

impl FeedbackGenerator for Nod {
    fn feedback(&self, answer: &str) -> elisabot::Result<String> {
        Ok(format!("how nice , {} words about it !", answer.split_whitespace().count()))
    }
}

fn main() -> elisabot::Result<()> {
    let models = Models::new(Arc::new(CannedQuestions), Arc::new(Nod));
    let photos = vec![Photo::new("beach-1972"), Photo::new("first-car")];
    let mut session = Session::new("demo", photos, 42, models)?;

    let mut t = 0;
    let mut say = |session: &mut Session, text: &str| -> elisabot::Result<()> {
        t += 1;
        println!("you> {text}");
        for a in session.handle_event(&Event::text(text, t))? {
            println!("bot [{}] {}", a.kind.as_str(), a.text);
        }
        Ok(())
    };

    say(&mut session, "/start")?;
    say(&mut session, "/yes")?;
    println!("(budget for this photo: {} questions)", session.question_budget());
    while session.state() == elisabot::dialogue::SessionState::AwaitingAnswer {
        say(&mut session, "my brother and me, long ago")?;
    }
    say(&mut session, "/exit")?;

    println!("\n{}", transcript_to_jsonl(session.transcript())?);
    Ok(())
}

//! In-memory dialog sessions over a shared model and video index.
//!
//! A session starts from a caption, shows the top candidates and a generated
//! question, and appends one round per answer until the round limit is
//! reached. The target id only feeds rank reporting and the answer oracle.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{oracle_answer, parse_question, QaPair, SceneSpec, VideoRecord};
use crate::dialog_model::{CachedState, DialogRound, DialogState};
use crate::error::{Error, Result};
use crate::model::RetrievalModel;
use crate::retrieval::{rank_of, rank_videos, EvalReport, SampleTrajectory, ScoredVideo, VideoIndex, DEFAULT_TOP_N};
use crate::text::{tokenize, TokenSequence};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Answers accepted before a session is exhausted.
    pub rounds: usize,
    pub top_n: usize,
    pub ttl: Duration,
    /// Show the target's stored GT questions instead of generated ones.
    pub gt_questions: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            rounds: 10,
            top_n: DEFAULT_TOP_N,
            ttl: DEFAULT_TTL,
            gt_questions: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Exhausted,
    Found,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub caption: String,
    pub target_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundRequest {
    pub video_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub video_id: String,
    pub score: f64,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRound {
    pub round: usize,
    pub candidates: Vec<Candidate>,
}

/// Response to starting a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPayload {
    pub session_id: String,
    pub round: usize,
    pub candidates: Vec<Candidate>,
    pub question: Option<String>,
    pub gt_rank: usize,
    pub status: SessionStatus,
}

/// Response to one answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPayload {
    pub session_id: String,
    pub round: usize,
    pub question: String,
    pub answer: String,
    pub candidates: Vec<Candidate>,
    pub next_question: Option<String>,
    pub gt_rank: usize,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRound {
    pub round: usize,
    pub question: String,
    pub answer: String,
}

/// Everything a client needs to redraw a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub target_id: String,
    pub caption: String,
    pub status: SessionStatus,
    pub rounds: Vec<TranscriptRound>,
    pub candidate_history: Vec<CandidateRound>,
    pub gt_ranks: Vec<usize>,
    pub pending_question: Option<String>,
    pub found_video_id: Option<String>,
    pub max_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundPayload {
    pub session_id: String,
    pub video_id: String,
    pub is_target: bool,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoCard {
    pub video_id: String,
    pub caption: String,
    pub scene: SceneSpec,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthPayload {
    pub status: String,
    pub videos: usize,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub error: String,
}

/// Short attribute list shown on candidate tiles.
pub fn scene_summary(scene: &SceneSpec) -> String {
    let people = if scene.actor_count == 1 {
        "1 person".to_string()
    } else {
        format!("{} people", scene.actor_count)
    };
    format!(
        "{people}, {}, {}, {}, {}, before: {}, after: {}, sound: {}",
        scene.action, scene.posture, scene.location, scene.prop, scene.pre_action, scene.post_action, scene.audio
    )
}

struct Session {
    id: String,
    target_id: String,
    caption: String,
    state: CachedState,
    rounds: Vec<TranscriptRound>,
    /// Question awaiting an answer, as fed to the encoder.
    pending: Option<TokenSequence>,
    candidates: Vec<CandidateRound>,
    gt_ranks: Vec<usize>,
    status: SessionStatus,
    found: Option<String>,
    last_used: Instant,
}

impl Session {
    fn view(&self, max_rounds: usize) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            target_id: self.target_id.clone(),
            caption: self.caption.clone(),
            status: self.status,
            rounds: self.rounds.clone(),
            candidate_history: self.candidates.clone(),
            gt_ranks: self.gt_ranks.clone(),
            pending_question: self.pending.as_ref().map(|q| q.source_text.clone()),
            found_video_id: self.found.clone(),
            max_rounds,
        }
    }
}

/// Owns all live sessions. The model, index and records are immutable and
/// shared; each session sits behind its own lock.
pub struct SessionManager {
    model: Arc<RetrievalModel>,
    index: Arc<VideoIndex>,
    records: Arc<BTreeMap<String, VideoRecord>>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionManager {
    /// Indexes `records` with `model`.
    pub fn new(model: RetrievalModel, records: Vec<VideoRecord>, config: ServiceConfig) -> Result<Self> {
        if config.top_n == 0 {
            return Err(Error::invalid("top_n must be positive"));
        }
        let entries = records
            .iter()
            .map(|r| Ok((r.id.clone(), model.embed_video(&model.video_input(&r.features))?)))
            .collect::<Result<Vec<_>>>()?;
        let index = VideoIndex::new(entries)?;
        let records = records.into_iter().map(|r| (r.id.clone(), r)).collect();
        Ok(SessionManager {
            model: Arc::new(model),
            index: Arc::new(index),
            records: Arc::new(records),
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model(&self) -> &RetrievalModel {
        &self.model
    }

    pub fn index(&self) -> &VideoIndex {
        &self.index
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    pub fn health(&self) -> HealthPayload {
        HealthPayload {
            status: "ok".into(),
            videos: self.index.len(),
            sessions: self.session_count(),
        }
    }

    pub fn card(&self, video_id: &str) -> Result<VideoCard> {
        let r = self
            .records
            .get(video_id)
            .ok_or_else(|| Error::UnknownVideo(video_id.to_string()))?;
        Ok(VideoCard {
            video_id: r.id.clone(),
            caption: r.caption.clone(),
            scene: r.scene.clone(),
            summary: scene_summary(&r.scene),
        })
    }

    fn candidates(&self, query: &[f64], round: usize) -> Result<CandidateRound> {
        let ranking = rank_videos(query, &self.index)?;
        let candidates = ranking
            .into_iter()
            .take(self.config.top_n)
            .map(|ScoredVideo { video_id, score }| {
                let summary = self
                    .records
                    .get(&video_id)
                    .map(|r| scene_summary(&r.scene))
                    .unwrap_or_default();
                Candidate {
                    video_id,
                    score,
                    summary,
                }
            })
            .collect();
        Ok(CandidateRound { round, candidates })
    }

    /// Question for round `round` (1-based), or none once the limit is hit.
    fn next_question(&self, target: &VideoRecord, state: &CachedState, round: usize) -> Result<Option<TokenSequence>> {
        if round > self.config.rounds {
            return Ok(None);
        }
        if self.config.gt_questions {
            let qa = target.dialog.get(round - 1).ok_or_else(|| {
                Error::invalid(format!(
                    "video `{}` has no stored question for round {round}",
                    target.id
                ))
            })?;
            return Ok(Some(self.model.vocab.encode_text(&qa.q)));
        }
        self.model.generate_question(state).map(Some)
    }

    fn target(&self, id: &str) -> Result<&VideoRecord> {
        self.records.get(id).ok_or_else(|| Error::UnknownVideo(id.to_string()))
    }

    pub fn create(&self, req: &CreateSessionRequest) -> Result<SessionPayload> {
        self.purge_expired_at(Instant::now());
        if tokenize(&req.caption).is_empty() {
            return Err(Error::invalid("caption is empty"));
        }
        let target = self.target(&req.target_id)?;
        let caption = self.model.vocab.encode_text(&req.caption);
        let state = self.model.begin_dialog(&caption)?;
        let query = self.model.embed_state(&state)?;
        let cands = self.candidates(&query, 0)?;
        let gt_rank = rank_of(&query, &self.index, &target.id)?;
        let pending = self.next_question(target, &state, 1)?;
        let status = if pending.is_some() {
            SessionStatus::Active
        } else {
            SessionStatus::Exhausted
        };
        let id = uuid::Uuid::new_v4().to_string();
        let payload = SessionPayload {
            session_id: id.clone(),
            round: 0,
            candidates: cands.candidates.clone(),
            question: pending.as_ref().map(|q| q.source_text.clone()),
            gt_rank,
            status,
        };
        let session = Session {
            id: id.clone(),
            target_id: target.id.clone(),
            caption: req.caption.clone(),
            state,
            rounds: Vec::new(),
            pending,
            candidates: vec![cands],
            gt_ranks: vec![gt_rank],
            status,
            found: None,
            last_used: Instant::now(),
        };
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        log::debug!("session {} started for {}", payload.session_id, req.target_id);
        Ok(payload)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn answer(&self, id: &str, req: &AnswerRequest) -> Result<RoundPayload> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        s.last_used = Instant::now();
        if s.status != SessionStatus::Active {
            return Err(Error::SessionClosed(id.to_string()));
        }
        if tokenize(&req.text).is_empty() {
            return Err(Error::invalid("answer is empty"));
        }
        let question = s.pending.clone().expect("active sessions have a pending question");
        let answer = self.model.vocab.encode_text(&req.text);
        let round = DialogRound {
            question: question.clone(),
            answer,
        };
        let state = self.model.push_round(&s.state, &round)?;
        let t = s.rounds.len() + 1;
        let query = self.model.embed_state(&state)?;
        let cands = self.candidates(&query, t)?;
        let gt_rank = rank_of(&query, &self.index, &s.target_id)?;
        let target = self.target(&s.target_id)?;
        let pending = self.next_question(target, &state, t + 1)?;

        s.state = state;
        s.rounds.push(TranscriptRound {
            round: t,
            question: question.source_text.clone(),
            answer: req.text.clone(),
        });
        s.candidates.push(cands.clone());
        s.gt_ranks.push(gt_rank);
        if pending.is_none() {
            s.status = SessionStatus::Exhausted;
        }
        s.pending = pending;
        Ok(RoundPayload {
            session_id: s.id.clone(),
            round: t,
            question: question.source_text,
            answer: req.text.clone(),
            candidates: cands.candidates,
            next_question: s.pending.as_ref().map(|q| q.source_text.clone()),
            gt_rank,
            status: s.status,
        })
    }

    /// Ends an active session with a candidate the user picked from the
    /// latest grid.
    pub fn mark_found(&self, id: &str, req: &FoundRequest) -> Result<FoundPayload> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        s.last_used = Instant::now();
        if s.status != SessionStatus::Active {
            return Err(Error::SessionClosed(id.to_string()));
        }
        let shown = s
            .candidates
            .last()
            .is_some_and(|c| c.candidates.iter().any(|v| v.video_id == req.video_id));
        if !shown {
            return Err(Error::invalid(format!(
                "video `{}` is not among the current candidates",
                req.video_id
            )));
        }
        s.status = SessionStatus::Found;
        s.pending = None;
        s.found = Some(req.video_id.clone());
        Ok(FoundPayload {
            session_id: s.id.clone(),
            video_id: req.video_id.clone(),
            is_target: req.video_id == s.target_id,
            status: s.status,
        })
    }

    pub fn view(&self, id: &str) -> Result<SessionView> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        s.last_used = Instant::now();
        Ok(s.view(self.config.rounds))
    }

    /// Dialog so far and the incrementally maintained encoder state.
    pub fn encoder_state(&self, id: &str) -> Result<(DialogState, CachedState)> {
        let handle = self.session(id)?;
        let s = handle.lock().expect("session poisoned");
        let caption = self.model.vocab.encode_text(&s.caption);
        let rounds = s
            .rounds
            .iter()
            .map(|r| DialogRound {
                question: self.model.vocab.encode_text(&r.question),
                answer: self.model.vocab.encode_text(&r.answer),
            })
            .collect();
        Ok((DialogState { caption, rounds }, s.state.clone()))
    }

    pub fn remove(&self, id: &str) -> bool {
        self.sessions.lock().expect("session map poisoned").remove(id).is_some()
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn purge_expired_at(&self, now: Instant) -> usize {
        let ttl = self.config.ttl;
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_used) <= ttl,
            // in use right now, so not idle
            Err(_) => true,
        });
        before - map.len()
    }
}

/// Answers questions about a target scene.
#[derive(Clone, Debug)]
pub struct AnswerOracle {
    scene: SceneSpec,
    dialog: Option<Vec<QaPair>>,
}

impl AnswerOracle {
    /// Answers by matching the question against the template grammar.
    pub fn templated(scene: SceneSpec) -> Self {
        AnswerOracle { scene, dialog: None }
    }

    /// Replays the stored GT answers in order, ignoring the question.
    pub fn verbatim(record: &VideoRecord) -> Self {
        AnswerOracle {
            scene: record.scene.clone(),
            dialog: Some(record.dialog.clone()),
        }
    }

    /// Answer for round `round` (1-based).
    pub fn answer(&self, round: usize, question: &str) -> Result<String> {
        match &self.dialog {
            Some(d) => d
                .get(round - 1)
                .map(|qa| qa.a.clone())
                .ok_or_else(|| Error::invalid(format!("no stored answer for round {round}"))),
            None => Ok(oracle_answer(&self.scene, question)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Templated,
    Verbatim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub report: EvalReport,
    /// Share of shown questions that parse under the question grammar, in percent.
    pub question_parse_rate: f64,
    pub questions: usize,
}

/// Runs one session per record through the manager, answering with an
/// oracle and starting from the record's GT caption.
pub fn simulate(manager: &SessionManager, records: &[VideoRecord], mode: OracleMode) -> Result<SimulationReport> {
    let mut trajectories = Vec::with_capacity(records.len());
    let mut parsed = 0usize;
    let mut questions = 0usize;
    for record in records {
        let oracle = match mode {
            OracleMode::Templated => AnswerOracle::templated(record.scene.clone()),
            OracleMode::Verbatim => AnswerOracle::verbatim(record),
        };
        let start = manager.create(&CreateSessionRequest {
            caption: record.caption.clone(),
            target_id: record.id.clone(),
        })?;
        let id = start.session_id;
        let mut question = start.question;
        let mut round = 0;
        while let Some(q) = question {
            round += 1;
            questions += 1;
            if parse_question(&q).is_some() {
                parsed += 1;
            }
            let text = oracle.answer(round, &q)?;
            question = manager.answer(&id, &AnswerRequest { text })?.next_question;
        }
        let view = manager.view(&id)?;
        manager.remove(&id);
        trajectories.push(SampleTrajectory {
            video_id: record.id.clone(),
            ranks: view.gt_ranks,
        });
    }
    let report = EvalReport::from_trajectories(trajectories, Vec::new())?;
    let question_parse_rate = if questions == 0 {
        0.0
    } else {
        100.0 * parsed as f64 / questions as f64
    };
    Ok(SimulationReport {
        report,
        question_parse_rate,
        questions,
    })
}

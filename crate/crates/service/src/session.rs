//! In-memory operator sessions: the payloads shown and the selections made.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatchStatus;
use crate::grasp::GraspPoint;
use crate::{ServiceError, ServiceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShownItem {
    pub candidate_id: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub session_id: String,
    pub query_id: String,
    /// Position in the session log, from 0.
    pub seq: usize,
    pub instruction: String,
    pub env_id: String,
    pub shown: Vec<ShownItem>,
    pub candidate_id: String,
    pub rank: usize,
    pub score: f64,
    pub timestamp_ms: u64,
    pub grasp_point: Option<GraspPoint>,
    pub dispatch: DispatchStatus,
}

/// What the dispatcher is told about a new selection.
pub struct Selection<'a> {
    pub session_id: &'a str,
    pub query_id: &'a str,
    pub env_id: &'a str,
    pub candidate_id: &'a str,
}

struct Shown {
    instruction: String,
    env_id: String,
    items: Vec<ShownItem>,
    event: Option<usize>,
}

struct Session {
    last_active: Instant,
    n_queries: usize,
    shown: HashMap<String, Shown>,
    events: Vec<SelectionEvent>,
}

#[derive(Default)]
struct State {
    next_session: u64,
    sessions: HashMap<String, Session>,
    owners: HashMap<String, String>,
}

pub struct Sessions {
    ttl: Duration,
    state: Mutex<State>,
    event_log: Option<Mutex<File>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Sessions {
    pub fn new(ttl: Duration) -> Self {
        Sessions { ttl, state: Mutex::new(State::default()), event_log: None }
    }

    /// Also appends every event as a JSON line to `path`.
    pub fn with_event_log(mut self, path: &Path) -> ServiceResult<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::Dispatch(format!("{}: {e}", path.display())))?;
        self.event_log = Some(Mutex::new(f));
        Ok(self)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn live<'a>(ttl: Duration, s: &'a mut Session, id: &str) -> ServiceResult<&'a mut Session> {
        if s.last_active.elapsed() > ttl {
            return Err(ServiceError::Expired(id.to_string()));
        }
        s.last_active = Instant::now();
        Ok(s)
    }

    /// Registers a shown payload and returns `(session_id, query_id)`.
    /// A missing `session_id` opens a new session.
    pub fn open_query(
        &self,
        session_id: Option<&str>,
        instruction: &str,
        env_id: &str,
        items: Vec<ShownItem>,
    ) -> ServiceResult<(String, String)> {
        let mut st = self.lock();
        let sid = match session_id {
            Some(id) => id.to_string(),
            None => {
                st.next_session += 1;
                let id = format!("s{:04}", st.next_session);
                st.sessions.insert(
                    id.clone(),
                    Session { last_active: Instant::now(), n_queries: 0, shown: HashMap::new(), events: Vec::new() },
                );
                id
            }
        };
        let ttl = self.ttl;
        let s = st.sessions.get_mut(&sid).ok_or_else(|| ServiceError::UnknownSession(sid.clone()))?;
        let s = if session_id.is_some() { Self::live(ttl, s, &sid)? } else { s };
        s.n_queries += 1;
        let qid = format!("{sid}-q{}", s.n_queries);
        s.shown.insert(
            qid.clone(),
            Shown { instruction: instruction.to_string(), env_id: env_id.to_string(), items, event: None },
        );
        st.owners.insert(qid.clone(), sid.clone());
        Ok((sid, qid))
    }

    /// Records the operator's choice. Re-selecting the same candidate returns
    /// the original event; choosing a different one is a conflict.
    pub fn select(
        &self,
        query_id: &str,
        candidate_id: &str,
        dispatch: impl FnOnce(&Selection) -> (Option<GraspPoint>, DispatchStatus),
    ) -> ServiceResult<SelectionEvent> {
        let mut st = self.lock();
        let sid = st.owners.get(query_id).cloned().ok_or_else(|| ServiceError::UnknownQuery(query_id.to_string()))?;
        let ttl = self.ttl;
        let s = st.sessions.get_mut(&sid).expect("owner map points at live sessions");
        let shown = s.shown.get(query_id).expect("owner map and payloads agree");
        if let Some(i) = shown.event {
            let prev = &s.events[i];
            if prev.candidate_id == candidate_id {
                return Ok(prev.clone());
            }
            return Err(ServiceError::Conflict(format!(
                "{query_id} already selected {}, not {candidate_id}",
                prev.candidate_id
            )));
        }
        let s = Self::live(ttl, s, &sid)?;
        let shown = s.shown.get(query_id).expect("checked above");
        let item = shown
            .items
            .iter()
            .find(|i| i.candidate_id == candidate_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotShown(format!("{candidate_id} was not shown for {query_id}")))?;
        let (grasp_point, status) =
            dispatch(&Selection { session_id: &sid, query_id, env_id: &shown.env_id, candidate_id });
        let event = SelectionEvent {
            session_id: sid.clone(),
            query_id: query_id.to_string(),
            seq: s.events.len(),
            instruction: shown.instruction.clone(),
            env_id: shown.env_id.clone(),
            shown: shown.items.clone(),
            candidate_id: candidate_id.to_string(),
            rank: item.rank,
            score: item.score,
            timestamp_ms: now_ms(),
            grasp_point,
            dispatch: status,
        };
        if let Some(log) = &self.event_log {
            let line = serde_json::to_string(&event).expect("event serializes");
            let mut f = log.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("event log write failed: {e}");
            }
        }
        s.shown.get_mut(query_id).expect("checked above").event = Some(s.events.len());
        s.events.push(event.clone());
        Ok(event)
    }

    pub fn log(&self, session_id: &str) -> ServiceResult<Vec<SelectionEvent>> {
        let st = self.lock();
        st.sessions
            .get(session_id)
            .map(|s| s.events.clone())
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }
}

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use trigserve::registry::Snapshot;
use trigserve::selection::SelectionState;

use crate::RerankerMode;

/// A clarification dialogue in progress. It keeps the repository snapshot
/// it started on, so reloads never change an open dialogue.
pub struct Session {
    pub state: SelectionState,
    pub snapshot: Snapshot,
    pub reranker: RerankerMode,
    pub turn_count: u32,
    pub expires_at: Instant,
    pub closed: bool,
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

/// Sessions keyed by id. The map lock is held only to look up, insert or
/// evict; each session is mutated under its own lock.
pub struct SessionStore {
    ttl: Duration,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn insert(&self, session: Session) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut map = self.sessions.lock().expect("session map poisoned");
        let now = Instant::now();
        map.retain(|_, s| {
            s.try_lock()
                .map_or(true, |s| s.expires_at > now && !s.closed)
        });
        map.insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        id
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
    }

    pub fn remove(&self, id: &str) {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .remove(id);
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }
}

//! In-memory view of persisted sessions plus the workers that drive them.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use tokio::sync::watch;

use nsagent_core::orchestrator::{
    list_sessions, AgentEvent, EventKind, EventSink, FeedbackInbox, Phase, Session, SessionDir, SessionState,
};

/// Live copy of one session's state and event log, fed by the orchestrator.
pub(crate) struct Shared {
    pub state: RwLock<SessionState>,
    pub events: RwLock<Vec<AgentEvent>>,
    /// Highest sequence published so far.
    pub seq: watch::Sender<u64>,
}

impl Shared {
    fn new(state: SessionState, events: Vec<AgentEvent>) -> Self {
        let last = events.last().map_or(0, |e| e.sequence);
        Self { state: RwLock::new(state), events: RwLock::new(events), seq: watch::Sender::new(last) }
    }

    pub fn snapshot(&self) -> SessionState {
        self.state.read().unwrap().clone()
    }

    pub fn event(&self, sequence: u64) -> Option<AgentEvent> {
        let events = self.events.read().unwrap();
        // Sequences are gapless from 1.
        events.get(sequence.checked_sub(1)? as usize).cloned()
    }
}

impl EventSink for Shared {
    fn emit(&self, event: &AgentEvent) {
        if event.kind == EventKind::PhaseStarted {
            if let Ok(phase) = serde_json::from_value::<Phase>(event.payload["phase"].clone()) {
                self.state.write().unwrap().status = phase.status();
            }
        }
        self.events.write().unwrap().push(event.clone());
        self.seq.send_replace(event.sequence);
    }

    fn snapshot(&self, state: &SessionState) {
        *self.state.write().unwrap() = state.clone();
    }
}

pub(crate) struct Slot {
    pub id: String,
    pub shared: Arc<Shared>,
    pub dir: SessionDir,
    /// Materialized on first command; held by a worker while it runs.
    pub session: Arc<Mutex<Option<Session>>>,
    /// Feedback queue of the running pipeline.
    pub inbox: Mutex<Option<FeedbackInbox>>,
    /// Set once requirements were accepted.
    pub started: std::sync::atomic::AtomicBool,
}

impl Slot {
    pub fn new(id: String, dir: SessionDir, state: SessionState, events: Vec<AgentEvent>) -> Self {
        let started = state.status != nsagent_core::orchestrator::SessionStatus::Created;
        Self {
            id,
            shared: Arc::new(Shared::new(state, events)),
            dir,
            session: Arc::new(Mutex::new(None)),
            inbox: Mutex::new(None),
            started: started.into(),
        }
    }
}

#[derive(Default)]
pub(crate) struct Registry {
    pub slots: RwLock<BTreeMap<String, Arc<Slot>>>,
}

impl Registry {
    pub fn get(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots.read().unwrap().get(id).cloned()
    }

    pub fn insert(&self, slot: Slot) -> Arc<Slot> {
        let slot = Arc::new(slot);
        self.slots.write().unwrap().insert(slot.id.clone(), slot.clone());
        slot
    }

    pub fn unfinished(&self) -> usize {
        self.slots.read().unwrap().values().filter(|s| !s.shared.snapshot().status.is_finished()).count()
    }

    pub fn len(&self) -> usize {
        self.slots.read().unwrap().len()
    }

    pub fn all(&self) -> Vec<Arc<Slot>> {
        self.slots.read().unwrap().values().cloned().collect()
    }
}

/// Loads every persisted session under `root` and returns the ones that
/// were mid-phase when the previous process stopped.
pub(crate) fn restore(root: &std::path::Path, registry: &Registry) -> std::io::Result<Vec<Arc<Slot>>> {
    let mut running = Vec::new();
    for id in list_sessions(root)? {
        let dir = match SessionDir::open(root, &id) {
            Ok(d) => d,
            Err(e) => {
                tracing::warn!(session = %id, error = %e, "skipping unreadable session");
                continue;
            }
        };
        match dir.load() {
            Ok((state, events)) => {
                let was_running = state.status.is_running();
                let slot = registry.insert(Slot::new(id, dir, state, events));
                if was_running {
                    running.push(slot);
                }
            }
            Err(e) => tracing::warn!(session = %id, error = %e, "skipping unreadable session"),
        }
    }
    Ok(running)
}

//! Per-run replay log: one writer (the pipeline), any number of readers, each
//! reading at its own offset.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use groundloop_core::orchestrator::{EventKind, EventSink};
use groundloop_core::types::AgentRole;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{mpsc, watch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunEvent {
    pub fn is_terminal(&self) -> bool {
        self.kind == EventKind::RunCompleted
    }
}

#[derive(Debug)]
pub struct RunLog {
    run_id: String,
    events: Mutex<Vec<RunEvent>>,
    /// Number of events appended, and whether the terminal event is among them.
    head: watch::Sender<(u64, bool)>,
}

impl RunLog {
    pub fn new(run_id: impl Into<String>) -> Arc<Self> {
        Arc::new(RunLog {
            run_id: run_id.into(),
            events: Mutex::new(Vec::new()),
            head: watch::channel((0, false)).0,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Appends an event. Anything after the terminal event is dropped, so a log
    /// has exactly one `run_completed` and it is last.
    pub fn push(&self, kind: EventKind, payload: Value) -> Option<u64> {
        let mut events = self.events.lock().unwrap_or_else(|e| e.into_inner());
        if events.last().is_some_and(RunEvent::is_terminal) {
            log::warn!("run {}: {} event after completion dropped", self.run_id, kind.as_str());
            return None;
        }
        let seq = events.len() as u64;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        events.push(RunEvent {
            run_id: self.run_id.clone(),
            seq,
            kind,
            payload,
            timestamp,
        });
        self.head.send_replace((seq + 1, kind == EventKind::RunCompleted));
        Some(seq)
    }

    pub fn len(&self) -> u64 {
        self.head.borrow().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complete(&self) -> bool {
        self.head.borrow().1
    }

    pub fn snapshot(&self) -> Vec<RunEvent> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn slice(&self, from: u64) -> Vec<RunEvent> {
        let events = self.events.lock().unwrap_or_else(|e| e.into_inner());
        events.iter().skip(from as usize).cloned().collect()
    }

    /// Streams events from `from_seq` until the terminal event. A reader that
    /// leaves `cap` events unconsumed for longer than `stall` is cut off; the
    /// receiver then ends and [`Subscription::lagged_at`] gives the resume offset.
    pub fn subscribe(self: &Arc<Self>, from_seq: u64, filter: TokenFilter, cap: usize, stall: Duration) -> Subscription {
        let (tx, rx) = mpsc::channel(cap.max(1));
        let lagged = Arc::new(Mutex::new(None));
        let log = Arc::clone(self);
        let lag_slot = Arc::clone(&lagged);
        let mut head = self.head.subscribe();
        tokio::spawn(async move {
            let mut next = from_seq;
            loop {
                let (len, done) = *head.borrow_and_update();
                for event in log.slice(next) {
                    next = event.seq + 1;
                    if !filter.admits(&event) {
                        continue;
                    }
                    let seq = event.seq;
                    match tokio::time::timeout(stall, tx.send(event)).await {
                        Ok(Ok(())) => {}
                        Ok(Err(_)) => return,
                        Err(_) => {
                            *lag_slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(seq);
                            return;
                        }
                    }
                }
                if done && next >= len {
                    return;
                }
                tokio::select! {
                    changed = head.changed() => if changed.is_err() { return },
                    _ = tx.closed() => return,
                }
            }
        });
        Subscription { rx, lagged }
    }
}

#[derive(Debug)]
pub struct Subscription {
    pub rx: mpsc::Receiver<RunEvent>,
    lagged: Arc<Mutex<Option<u64>>>,
}

impl Subscription {
    /// Set once the receiver has ended because the reader fell behind.
    pub fn lagged_at(&self) -> Option<u64> {
        *self.lagged.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Which agents' token events a subscriber receives. Other kinds always pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenFilter {
    All,
    Agents(BTreeSet<AgentRole>),
}

impl Default for TokenFilter {
    fn default() -> Self {
        TokenFilter::Agents([AgentRole::Coder].into())
    }
}

impl TokenFilter {
    /// `all`, or a comma-separated list of agent names.
    pub fn parse(text: &str) -> Result<TokenFilter, String> {
        if text.trim() == "all" {
            return Ok(TokenFilter::All);
        }
        let mut agents = BTreeSet::new();
        for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let role: AgentRole = serde_json::from_value(Value::String(name.into()))
                .map_err(|_| format!("unknown agent {name:?} in tokens filter"))?;
            agents.insert(role);
        }
        Ok(TokenFilter::Agents(agents))
    }

    pub fn admits(&self, event: &RunEvent) -> bool {
        match self {
            TokenFilter::All => true,
            TokenFilter::Agents(agents) => {
                event.kind != EventKind::Token
                    || event.payload["agent"]
                        .as_str()
                        .and_then(|a| serde_json::from_value(Value::String(a.into())).ok())
                        .is_some_and(|r: AgentRole| agents.contains(&r))
            }
        }
    }
}

/// Adapts a log to the pipeline's event sink. The terminal event is held back
/// until [`LogSink::release`], so the run's result can be stored first.
pub struct LogSink {
    log: Arc<RunLog>,
    held: Mutex<Option<Value>>,
}

impl LogSink {
    pub fn new(log: Arc<RunLog>) -> Self {
        LogSink {
            log,
            held: Mutex::new(None),
        }
    }

    /// Appends the held terminal event, if any. Returns whether one was held.
    pub fn release(&self) -> bool {
        match self.held.lock().unwrap_or_else(|e| e.into_inner()).take() {
            Some(payload) => {
                self.log.push(EventKind::RunCompleted, payload);
                true
            }
            None => false,
        }
    }
}

impl EventSink for LogSink {
    fn emit(&self, kind: EventKind, payload: Value) {
        if kind == EventKind::RunCompleted {
            *self.held.lock().unwrap_or_else(|e| e.into_inner()) = Some(payload);
        } else {
            self.log.push(kind, payload);
        }
    }
}

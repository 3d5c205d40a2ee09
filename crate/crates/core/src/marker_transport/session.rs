use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::wire::{GazeSample, MarkerEvent};
use super::TransportError;
use crate::register_log::{RegisterHeader, RegisterLog, RegisterRow, RowKind};
use crate::timebase::{quantize_micros, Timebase};

/// Markers whose label starts with this become SYNC_MARK rows.
pub const SYNC_LABEL_PREFIX: &str = "sync";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SessionEvent {
    Marker(MarkerEvent),
    Gaze(GazeSample),
}

impl SessionEvent {
    pub fn time(&self) -> f64 {
        match self {
            SessionEvent::Marker(m) => m.time,
            SessionEvent::Gaze(g) => g.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    /// Arrival order, used to break time ties.
    pub arrival: u64,
    pub event: SessionEvent,
}

/// Chronological merge of everything received during a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    entries: Vec<SessionEntry>,
    arrivals: u64,
}

impl SessionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: SessionEvent) {
        let t = event.time();
        let at = self.entries.partition_point(|e| e.event.time() <= t);
        self.entries.insert(
            at,
            SessionEntry {
                arrival: self.arrivals,
                event,
            },
        );
        self.arrivals += 1;
    }

    pub fn entries(&self) -> &[SessionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Starts the single writer that owns the session log. Producers send on
/// the returned channel; the log comes back from the join handle once
/// every sender is dropped.
pub fn spawn_session_writer() -> (Sender<SessionEvent>, JoinHandle<SessionLog>) {
    let (tx, rx): (Sender<SessionEvent>, Receiver<SessionEvent>) = channel();
    let handle = std::thread::spawn(move || {
        let mut log = SessionLog::new();
        for event in rx {
            log.push(event);
        }
        log
    });
    (tx, handle)
}

/// Register rows for a session. Entries that collide on the microsecond
/// grid are nudged forward one microsecond so row times stay strictly
/// increasing.
pub fn session_to_register(
    log: &SessionLog,
    header: RegisterHeader,
    timebase: Timebase,
) -> Result<RegisterLog, TransportError> {
    let mut rows: Vec<RegisterRow> = Vec::with_capacity(log.len());
    for entry in log.entries() {
        let mut time = quantize_micros(entry.event.time());
        if let Some(prev) = rows.last() {
            if time <= prev.time {
                time = quantize_micros(prev.time + 1e-6);
            }
        }
        let row = match &entry.event {
            SessionEvent::Marker(m) => {
                let kind = if m.label.starts_with(SYNC_LABEL_PREFIX) {
                    RowKind::SyncMark
                } else {
                    RowKind::CutMark
                };
                RegisterRow::mark(time, kind, m.label.clone())
            }
            SessionEvent::Gaze(g) => RegisterRow::mark(time, RowKind::Tick, g.register_label()),
        };
        rows.push(row);
    }
    Ok(RegisterLog::new(timebase, header, rows)?)
}

/// Writes the merged session as a register file in one atomic step.
pub fn finalize_session(
    log: &SessionLog,
    header: RegisterHeader,
    timebase: Timebase,
    path: &Path,
) -> Result<RegisterLog, TransportError> {
    let register = session_to_register(log, header, timebase)?;
    register.write(path)?;
    Ok(register)
}

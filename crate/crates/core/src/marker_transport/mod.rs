//! Marker and gaze transport for a stimulus session.
//!
//! Event markers leave over UDP as fire-and-forget datagrams; gaze samples
//! arrive over a TCP line stream. Both end up in one [`SessionLog`] owned by
//! a single writer, which is finalized into a register file.
//!
//! Wire lines (ASCII, `\n` terminated, times to six decimals):
//!
//! ```text
//! MARK <id> <time> <label>
//! GAZE <time> <x> <y>
//! ```

mod gaze;
mod session;
mod udp;
mod wire;

pub use gaze::{ingest_gaze, GazeStream};
pub use session::{
    finalize_session, session_to_register, spawn_session_writer, SessionEntry, SessionEvent, SessionLog,
};
pub use udp::{broadcast_marker, MarkerReceiver, MarkerSender, ReceiverStats};
pub use wire::{GazeSample, MarkerEvent, WireError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot resolve endpoint '{0}'")]
    Resolve(String),
    #[error("marker dropped: socket not ready within the send budget")]
    Dropped,
    #[error("no data for {0:?}")]
    IdleTimeout(std::time::Duration),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Register(#[from] crate::register_log::RegisterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

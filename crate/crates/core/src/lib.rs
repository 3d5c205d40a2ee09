//! Timing analysis and compensation for video-based stimulus presentation:
//! register-log delta analysis, playback simulation, fluency checks,
//! audio/video offset correction, event-marker transport and encoding
//! profile validation.

pub mod av_offset;
pub mod encoding_check;
pub mod fluency;
pub mod fsutil;
pub mod marker_transport;
pub mod playback_sim;
pub mod register_log;
pub mod timebase;

pub use av_offset::{
    advance_audio, build_advance_plan, estimate_offset, verify_loop, AvError, OffsetEstimate, OnsetPair, PcmAudio,
};
pub use encoding_check::{quality_for_bitrate, validate_profile, EncodingProfile, ValidationReport, Verdict};
pub use fluency::{analyze_fluency, CameraObservationSequence, FluencyReport, FluencyVerdict, Observation};
pub use marker_transport::{GazeSample, MarkerEvent, SessionLog};
pub use playback_sim::{run_simulation, SimConfig, SimOutput};
pub use register_log::{
    analyze_deltas, calibrate_from_sync_mark, compensate_register, CompensationPlan, RegisterLog, RowKind,
};
pub use timebase::{FrameDelta, Timebase, Tolerance};

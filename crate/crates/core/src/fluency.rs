//! Playback fluency from a filmed frame counter.
//!
//! Input is the counter value(s) legible in each camera frame. A camera
//! frame whose exposure straddles a frame change shows two consecutive
//! values (a double exposure). A value that stays on screen well beyond its
//! nominal camera-frame share is a stall; a gap in the succession of values
//! is a jump.
//!
//! # Observation file
//!
//! ```text
//! # video_fps: 25
//! # camera_fps: 50
//! 7: 101
//! 8: 101|102   # double exposure
//! ```
//!
//! Camera frame indices must be contiguous. `#` starts a comment; the
//! optional `video_fps` / `camera_fps` header comments override the
//! caller's timebase.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timebase::{Timebase, TimebaseError};

#[derive(Debug, Error)]
pub enum FluencyError {
    #[error("observation sequence is empty")]
    EmptyObservations,
    #[error("expected frame count must be positive")]
    InvalidExpectedCount,
    #[error("CORRUPT_INPUT: counter goes backwards at camera frame {index} ({found} after {previous})")]
    CorruptInput {
        index: usize,
        previous: String,
        found: String,
    },
    #[error("malformed observation line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Timebase(#[from] TimebaseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counter values legible in one camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observation {
    Single(u64),
    /// Both `n` and `n + 1` visible.
    Double(u64),
}

impl Observation {
    pub fn min(self) -> u64 {
        match self {
            Observation::Single(v) | Observation::Double(v) => v,
        }
    }

    pub fn max(self) -> u64 {
        match self {
            Observation::Single(v) => v,
            Observation::Double(v) => v + 1,
        }
    }

    pub fn values(self) -> impl Iterator<Item = u64> {
        self.min()..=self.max()
    }

    pub fn is_double(self) -> bool {
        matches!(self, Observation::Double(_))
    }

    pub fn offset(self, by: u64) -> Observation {
        match self {
            Observation::Single(v) => Observation::Single(v + by),
            Observation::Double(v) => Observation::Double(v + by),
        }
    }
}

impl std::fmt::Display for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observation::Single(v) => write!(f, "{v}"),
            Observation::Double(v) => write!(f, "{v}|{}", v + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraObservationSequence {
    pub timebase: Timebase,
    pub observations: Vec<Observation>,
}

impl CameraObservationSequence {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# stimsync camera observations v1\n");
        out.push_str(&format!("# video_fps: {}\n", self.timebase.video_fps));
        out.push_str(&format!("# camera_fps: {}\n", self.timebase.camera_fps));
        for (i, obs) in self.observations.iter().enumerate() {
            out.push_str(&format!("{i}: {obs}\n"));
        }
        out
    }
}

pub fn parse_observations_str(text: &str, fallback: Timebase) -> Result<CameraObservationSequence, FluencyError> {
    let mut timebase = fallback;
    let mut observations = Vec::new();
    let mut last_index: Option<u64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let malformed = |reason: String| FluencyError::Malformed { line: line_no, reason };
        let (content, comment) = match raw.split_once('#') {
            Some((c, rest)) => (c.trim(), Some(rest.trim())),
            None => (raw.trim(), None),
        };
        if content.is_empty() {
            if let Some((key, value)) = comment.and_then(|c| c.split_once(':')) {
                let fps = || -> Result<f64, FluencyError> {
                    value
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .ok_or_else(|| malformed(format!("bad {} header", key.trim())))
                };
                match key.trim() {
                    "video_fps" => timebase.video_fps = fps()?,
                    "camera_fps" => timebase.camera_fps = fps()?,
                    _ => {}
                }
            }
            continue;
        }
        let (index, values) = content
            .split_once(':')
            .ok_or_else(|| malformed("expected '<camera_frame>: <counter>'".into()))?;
        let index: u64 = index
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad camera frame index '{}'", index.trim())))?;
        if let Some(prev) = last_index {
            if index != prev + 1 {
                return Err(malformed(format!("camera frame {index} does not follow {prev}")));
            }
        }
        last_index = Some(index);

        let parse_counter = |s: &str| -> Result<u64, FluencyError> {
            s.trim()
                .parse()
                .map_err(|_| malformed(format!("bad counter value '{}'", s.trim())))
        };
        let obs = match values.split_once('|') {
            None => Observation::Single(parse_counter(values)?),
            Some((a, b)) => {
                let (a, b) = (parse_counter(a)?, parse_counter(b)?);
                if b != a + 1 {
                    return Err(malformed(format!("double exposure {a}|{b} is not two adjacent values")));
                }
                Observation::Double(a)
            }
        };
        observations.push(obs);
    }
    Ok(CameraObservationSequence { timebase, observations })
}

pub fn parse_observations(path: &Path, fallback: Timebase) -> Result<CameraObservationSequence, FluencyError> {
    let text = std::fs::read_to_string(path)?;
    parse_observations_str(&text, fallback)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub counter_value: u64,
    /// Camera frames showing the value; a double exposure counts half.
    pub held_camera_frames: f64,
    pub excess_frames: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub from_counter: u64,
    pub to_counter: u64,
    pub skipped_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FluencyVerdict {
    Fluent,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluencyReport {
    pub stalls: Vec<Stall>,
    pub jumps: Vec<Jump>,
    pub double_exposure_count: usize,
    pub total_duration_frames: f64,
    pub expected_duration_frames: f64,
    pub verdict: FluencyVerdict,
}

impl FluencyReport {
    pub fn total_skipped(&self) -> u64 {
        self.jumps.iter().map(|j| j.skipped_count).sum()
    }
}

/// Run length (in camera frames) above which a value counts as stalled.
pub fn stall_threshold(tb: &Timebase) -> f64 {
    tb.camera_ratio().ceil() + 1.0
}

pub fn analyze_fluency(
    obs: &CameraObservationSequence,
    expected_frame_count: u64,
) -> Result<FluencyReport, FluencyError> {
    let tb = obs.timebase;
    tb.validate_for_observation()?;
    if expected_frame_count == 0 {
        return Err(FluencyError::InvalidExpectedCount);
    }
    let first = *obs.observations.first().ok_or(FluencyError::EmptyObservations)?;

    let mut run_lengths: BTreeMap<u64, f64> = BTreeMap::new();
    let mut jumps = Vec::new();
    let mut double_exposure_count = 0;
    let mut prev = first;
    for (i, &cur) in obs.observations.iter().enumerate() {
        if i > 0 {
            if cur.min() < prev.min() || cur.max() < prev.max() {
                return Err(FluencyError::CorruptInput {
                    index: i,
                    previous: prev.to_string(),
                    found: cur.to_string(),
                });
            }
            if cur.min() > prev.max() + 1 {
                jumps.push(Jump {
                    from_counter: prev.max(),
                    to_counter: cur.min(),
                    skipped_count: cur.min() - prev.max() - 1,
                });
            }
        }
        let weight = if cur.is_double() {
            double_exposure_count += 1;
            0.5
        } else {
            1.0
        };
        for v in cur.values() {
            *run_lengths.entry(v).or_default() += weight;
        }
        prev = cur;
    }

    let ratio = tb.camera_ratio();
    let threshold = stall_threshold(&tb);
    let stalls: Vec<Stall> = run_lengths
        .into_iter()
        .filter(|(_, run)| *run > threshold)
        .map(|(counter_value, run)| Stall {
            counter_value,
            held_camera_frames: run,
            excess_frames: (run - ratio) / ratio,
        })
        .collect();

    let verdict = if stalls.is_empty() && jumps.is_empty() {
        FluencyVerdict::Fluent
    } else {
        FluencyVerdict::Degraded
    };
    Ok(FluencyReport {
        stalls,
        jumps,
        double_exposure_count,
        total_duration_frames: obs.observations.len() as f64 / ratio,
        expected_duration_frames: expected_frame_count as f64,
        verdict,
    })
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timebase::{format_seconds, quantize_micros};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("label '{0}' must be non-empty printable ASCII without whitespace")]
    BadLabel(String),
    #[error("time must be finite, got {0}")]
    BadTime(f64),
    #[error("gaze coordinate {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("malformed record '{0}'")]
    Malformed(String),
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && label.bytes().all(|b| b.is_ascii_graphic())
}

/// A labelled event marker. Times are held on the microsecond grid so that
/// the wire form is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerEvent {
    pub id: u64,
    pub time: f64,
    pub label: String,
}

impl MarkerEvent {
    pub fn new(id: u64, time: f64, label: impl Into<String>) -> Result<Self, WireError> {
        let label = label.into();
        if !time.is_finite() {
            return Err(WireError::BadTime(time));
        }
        if !valid_label(&label) {
            return Err(WireError::BadLabel(label));
        }
        Ok(MarkerEvent {
            id,
            time: quantize_micros(time),
            label,
        })
    }

    pub fn encode(&self) -> String {
        format!("MARK {} {} {}\n", self.id, format_seconds(self.time), self.label)
    }

    pub fn decode(line: &str) -> Result<Self, WireError> {
        let malformed = || WireError::Malformed(line.trim_end().to_string());
        let body = line.strip_suffix('\n').unwrap_or(line);
        let mut parts = body.split(' ');
        if parts.next() != Some("MARK") {
            return Err(malformed());
        }
        let id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
        let time: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed)?;
        let label = parts.next().ok_or_else(malformed)?;
        if parts.next().is_some() {
            return Err(malformed());
        }
        MarkerEvent::new(id, time, label)
    }
}

/// One eye-tracker sample with normalized screen coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub time: f64,
    pub x: f64,
    pub y: f64,
}

impl GazeSample {
    pub fn new(time: f64, x: f64, y: f64) -> Result<Self, WireError> {
        if !time.is_finite() {
            return Err(WireError::BadTime(time));
        }
        for c in [x, y] {
            if !(0.0..=1.0).contains(&c) {
                return Err(WireError::OutOfRange(c));
            }
        }
        Ok(GazeSample {
            time: quantize_micros(time),
            x: (x * 1e3).round() / 1e3,
            y: (y * 1e3).round() / 1e3,
        })
    }

    pub fn encode(&self) -> String {
        format!("GAZE {} {:.3} {:.3}\n", format_seconds(self.time), self.x, self.y)
    }

    pub fn decode(line: &str) -> Result<Self, WireError> {
        let malformed = || WireError::Malformed(line.trim_end().to_string());
        let body = line.strip_suffix('\n').unwrap_or(line);
        let body = body.strip_suffix('\r').unwrap_or(body);
        let mut parts = body.split(' ');
        if parts.next() != Some("GAZE") {
            return Err(malformed());
        }
        let mut num = || -> Result<f64, WireError> { parts.next().and_then(|s| s.parse().ok()).ok_or_else(malformed) };
        let (time, x, y) = (num()?, num()?, num()?);
        if parts.next().is_some() {
            return Err(malformed());
        }
        GazeSample::new(time, x, y)
    }

    pub fn register_label(&self) -> String {
        format!("gaze:{:.3},{:.3}", self.x, self.y)
    }
}

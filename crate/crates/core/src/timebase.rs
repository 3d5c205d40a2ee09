//! Frame/time arithmetic shared by every analysis in the crate.
//!
//! Time is carried as `f64` seconds and frame counts as real-valued
//! [`FrameDelta`]s. Nothing is rounded here; rounding happens only where a
//! report needs an integer frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VIDEO_FPS: f64 = 25.0;
pub const DEFAULT_CAMERA_FPS: f64 = 50.0;
pub const DEFAULT_TOLERANCE_FRAMES: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimebaseError {
    #[error("non-finite time value: {0}")]
    NonFinite(f64),
    #[error("video fps must be positive and finite, got {0}")]
    InvalidVideoFps(f64),
    #[error("camera fps must be positive and finite, got {0}")]
    InvalidCameraFps(f64),
    #[error(
        "camera at {camera_fps} fps cannot resolve video at {video_fps} fps (needs at least twice the video rate)"
    )]
    CameraTooSlow { video_fps: f64, camera_fps: f64 },
    #[error("tolerance must be a non-negative number of frames, got {0}")]
    InvalidTolerance(f64),
}

/// Video playback rate plus the rate of the camera filming the screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timebase {
    pub video_fps: f64,
    pub camera_fps: f64,
}

impl Default for Timebase {
    fn default() -> Self {
        Timebase {
            video_fps: DEFAULT_VIDEO_FPS,
            camera_fps: DEFAULT_CAMERA_FPS,
        }
    }
}

impl Timebase {
    pub fn new(video_fps: f64, camera_fps: f64) -> Result<Self, TimebaseError> {
        let tb = Timebase { video_fps, camera_fps };
        tb.validate()?;
        Ok(tb)
    }

    pub fn with_video_fps(video_fps: f64) -> Result<Self, TimebaseError> {
        Self::new(video_fps, 2.0 * video_fps)
    }

    pub fn validate(&self) -> Result<(), TimebaseError> {
        if !(self.video_fps.is_finite() && self.video_fps > 0.0) {
            return Err(TimebaseError::InvalidVideoFps(self.video_fps));
        }
        if !(self.camera_fps.is_finite() && self.camera_fps > 0.0) {
            return Err(TimebaseError::InvalidCameraFps(self.camera_fps));
        }
        Ok(())
    }

    /// The camera must sample at least twice per video frame or a held
    /// frame cannot be told apart from shutter aliasing.
    pub fn validate_for_observation(&self) -> Result<(), TimebaseError> {
        self.validate()?;
        if self.camera_fps < 2.0 * self.video_fps {
            return Err(TimebaseError::CameraTooSlow {
                video_fps: self.video_fps,
                camera_fps: self.camera_fps,
            });
        }
        Ok(())
    }

    /// Duration of one video frame in seconds.
    pub fn frame_period(&self) -> f64 {
        1.0 / self.video_fps
    }

    /// Camera frames per video frame.
    pub fn camera_ratio(&self) -> f64 {
        self.camera_fps / self.video_fps
    }
}

/// A signed, possibly fractional, number of video frames.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameDelta(pub f64);

impl FrameDelta {
    pub const ZERO: FrameDelta = FrameDelta(0.0);

    pub fn frames(self) -> f64 {
        self.0
    }

    /// Whole frames, rounded toward negative infinity.
    pub fn truncated(self) -> i64 {
        self.0.floor() as i64
    }

    /// Nearest whole frame, halves rounded up.
    pub fn rounded(self) -> i64 {
        (self.0 + 0.5).floor() as i64
    }
}

impl std::ops::Add for FrameDelta {
    type Output = FrameDelta;
    fn add(self, rhs: FrameDelta) -> FrameDelta {
        FrameDelta(self.0 + rhs.0)
    }
}

impl std::ops::Sub for FrameDelta {
    type Output = FrameDelta;
    fn sub(self, rhs: FrameDelta) -> FrameDelta {
        FrameDelta(self.0 - rhs.0)
    }
}

impl std::ops::Neg for FrameDelta {
    type Output = FrameDelta;
    fn neg(self) -> FrameDelta {
        FrameDelta(-self.0)
    }
}

impl std::fmt::Display for FrameDelta {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub frames: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            frames: DEFAULT_TOLERANCE_FRAMES,
        }
    }
}

impl Tolerance {
    pub fn new(frames: f64) -> Result<Self, TimebaseError> {
        if !(frames.is_finite() && frames >= 0.0) {
            return Err(TimebaseError::InvalidTolerance(frames));
        }
        Ok(Tolerance { frames })
    }

    /// Boundary inclusive, with slack for float noise from differencing
    /// seconds.
    pub fn admits(&self, delta: FrameDelta) -> bool {
        delta.0.abs() <= self.frames + 1e-9
    }
}

pub fn seconds_to_frames(t: f64, tb: &Timebase) -> Result<FrameDelta, TimebaseError> {
    if !t.is_finite() {
        return Err(TimebaseError::NonFinite(t));
    }
    Ok(FrameDelta(t * tb.video_fps))
}

pub fn frames_to_seconds(f: FrameDelta, tb: &Timebase) -> Result<f64, TimebaseError> {
    if !f.0.is_finite() {
        return Err(TimebaseError::NonFinite(f.0));
    }
    Ok(f.0 / tb.video_fps)
}

/// `true` when `a` and `b` are no more than `tol` video frames apart.
pub fn within_tolerance(a: f64, b: f64, tol: Tolerance, tb: &Timebase) -> Result<bool, TimebaseError> {
    if !a.is_finite() {
        return Err(TimebaseError::NonFinite(a));
    }
    if !b.is_finite() {
        return Err(TimebaseError::NonFinite(b));
    }
    Ok(tol.admits(seconds_to_frames(a - b, tb)?))
}

/// Rounds seconds to the microsecond grid used by every text format.
pub fn quantize_micros(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// Fixed six-decimal rendering; never prints `-0.000000`.
pub fn format_seconds(t: f64) -> String {
    let s = format!("{:.6}", t);
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

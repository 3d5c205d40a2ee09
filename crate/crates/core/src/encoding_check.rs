//! Encoding parameter profiles checked against the playback envelope.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timebase::DEFAULT_VIDEO_FPS;

/// Highest video bitrate the player decodes natively, kbps.
pub const MAX_VIDEO_BITRATE_KBPS: f64 = 8356.0;
/// Largest resolution that played back fluently.
pub const PREFERRED_RESOLUTION: (u32, u32) = (576, 480);
/// Resolutions in the order they were tried, largest first. "1080x720" is
/// kept as reported even though it is not a standard frame size.
pub const RESOLUTION_LADDER: [(u32, u32); 3] = [(1280, 720), (1080, 720), (576, 480)];
/// Two measured (kbps, quality) points of the player's quality setting.
pub const QUALITY_ANCHORS: [(f64, f64); 2] = [(4000.0, 0.475), (7535.0, 0.9)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("bitrate must be positive and finite, got {0} kbps")]
    InvalidBitrate(f64),
    #[error("bitrate {0} kbps exceeds the {MAX_VIDEO_BITRATE_KBPS} kbps cap")]
    AboveCap(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BitrateMode {
    Cbr,
    Vbr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingProfile {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// kbps
    pub video_bitrate_max: f64,
    pub bitrate_mode: BitrateMode,
    pub two_pass: bool,
    pub soft_target: bool,
    /// kbps
    pub audio_bitrate: f64,
    /// Hz
    pub audio_rate: u32,
    pub quality_factor: f64,
}

impl EncodingProfile {
    /// 576x480 progressive at 25 fps, VBR two-pass capped at 4 Mbps, with
    /// 192 kbps audio at 48 kHz. The profile that played back cleanly.
    pub fn reference() -> Self {
        EncodingProfile {
            width: 576,
            height: 480,
            fps: 25.0,
            video_bitrate_max: 4000.0,
            bitrate_mode: BitrateMode::Vbr,
            two_pass: true,
            soft_target: true,
            audio_bitrate: 192.0,
            audio_rate: 48_000,
            quality_factor: 0.475,
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Ok,
    Marginal,
    Reject,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Ok => "OK",
            Verdict::Marginal => "MARGINAL",
            Verdict::Reject => "REJECT",
        })
    }
}

/// Info findings never change the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: String,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_rule(&self, rule: &str) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }
}

pub fn validate_profile(p: &EncodingProfile) -> ValidationReport {
    validate_profile_at(p, DEFAULT_VIDEO_FPS)
}

/// As [`validate_profile`] with a different player frame rate.
pub fn validate_profile_at(p: &EncodingProfile, player_fps: f64) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |rule: &str, severity, message: String| {
        findings.push(Finding {
            rule: rule.to_string(),
            severity,
            message,
        })
    };

    let positive = |v: f64| v.is_finite() && v > 0.0;
    if p.width == 0 || p.height == 0 {
        push(
            "well_formed",
            Severity::Hard,
            format!("resolution {}x{} has a zero side", p.width, p.height),
        );
    }
    if !positive(p.fps) {
        push(
            "well_formed",
            Severity::Hard,
            format!("fps must be positive, got {}", p.fps),
        );
    }
    if !positive(p.audio_bitrate) || p.audio_rate == 0 {
        push(
            "well_formed",
            Severity::Hard,
            format!(
                "audio {} kbps @ {} Hz is not a valid stream",
                p.audio_bitrate, p.audio_rate
            ),
        );
    }
    if !(0.0..=1.0).contains(&p.quality_factor) {
        push(
            "well_formed",
            Severity::Hard,
            format!("quality_factor {} outside [0, 1]", p.quality_factor),
        );
    }
    if !positive(p.video_bitrate_max) {
        push(
            "well_formed",
            Severity::Hard,
            format!("video bitrate must be positive, got {}", p.video_bitrate_max),
        );
    } else if p.video_bitrate_max > MAX_VIDEO_BITRATE_KBPS {
        push(
            "bitrate_cap",
            Severity::Hard,
            format!(
                "video bitrate {} kbps exceeds the {} kbps native decode limit",
                p.video_bitrate_max, MAX_VIDEO_BITRATE_KBPS
            ),
        );
    }

    let (pw, ph) = PREFERRED_RESOLUTION;
    if p.width > pw || p.height > ph {
        push(
            "resolution",
            Severity::Soft,
            format!(
                "{}x{} is above {pw}x{ph}; expect held and skipped frames",
                p.width, p.height
            ),
        );
    }
    if positive(p.fps) && p.fps != player_fps {
        push(
            "frame_rate",
            Severity::Soft,
            format!("{} fps will be played back at {player_fps} fps", p.fps),
        );
    }
    if !(p.bitrate_mode == BitrateMode::Vbr && p.two_pass && p.soft_target) {
        push(
            "rate_control",
            Severity::Soft,
            "VBR with two-pass and soft target is the preferred rate control".to_string(),
        );
    }
    if let Ok(q) = quality_for_bitrate(p.video_bitrate_max) {
        if (0.0..=1.0).contains(&p.quality_factor) && p.quality_factor + 1e-9 < q {
            push(
                "quality_factor",
                Severity::Info,
                format!(
                    "quality_factor {} is below the {q:.4} that {} kbps maps to",
                    p.quality_factor, p.video_bitrate_max
                ),
            );
        }
    }

    let verdict = match findings.iter().map(|f| f.severity).max() {
        Some(Severity::Hard) => Verdict::Reject,
        Some(Severity::Soft) => Verdict::Marginal,
        _ => Verdict::Ok,
    };
    ValidationReport { verdict, findings }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    pub quality: f64,
    /// True outside the span of the two anchors, where the line is a guess.
    pub extrapolated: bool,
    pub clamped: bool,
}

/// Player quality setting for a bitrate, on the line through the two
/// anchors, clamped to [0, 1].
pub fn quality_estimate(bitrate_kbps: f64) -> Result<QualityEstimate, EncodingError> {
    if !(bitrate_kbps.is_finite() && bitrate_kbps > 0.0) {
        return Err(EncodingError::InvalidBitrate(bitrate_kbps));
    }
    if bitrate_kbps > MAX_VIDEO_BITRATE_KBPS {
        return Err(EncodingError::AboveCap(bitrate_kbps));
    }
    let [(b0, q0), (b1, q1)] = QUALITY_ANCHORS;
    let t = (bitrate_kbps - b0) / (b1 - b0);
    // Weighted form so both anchors come out exactly.
    let raw = q0 * (1.0 - t) + q1 * t;
    let quality = raw.clamp(0.0, 1.0);
    Ok(QualityEstimate {
        quality,
        extrapolated: !(0.0..=1.0).contains(&t),
        clamped: quality != raw,
    })
}

pub fn quality_for_bitrate(bitrate_kbps: f64) -> Result<f64, EncodingError> {
    quality_estimate(bitrate_kbps).map(|e| e.quality)
}

/// Next rung down the resolution ladder that fits inside `width`x`height`
/// strictly, or the preferred resolution if nothing smaller is listed.
pub fn next_resolution(width: u32, height: u32) -> (u32, u32) {
    RESOLUTION_LADDER
        .iter()
        .copied()
        .find(|&(w, h)| w <= width && h <= height && (w, h) != (width, height))
        .unwrap_or(PREFERRED_RESOLUTION)
}

/// A profile with every soft finding addressed: one rung down the ladder if
/// above the preferred size, player frame rate, preferred rate control,
/// bitrate capped and quality matched to it.
pub fn recommend_profile(p: &EncodingProfile, player_fps: f64) -> EncodingProfile {
    let (pw, ph) = PREFERRED_RESOLUTION;
    let (width, height) = if p.width > pw || p.height > ph {
        next_resolution(p.width, p.height)
    } else {
        (p.width, p.height)
    };
    let bitrate = if p.video_bitrate_max.is_finite() && p.video_bitrate_max > 0.0 {
        p.video_bitrate_max.min(MAX_VIDEO_BITRATE_KBPS)
    } else {
        QUALITY_ANCHORS[0].0
    };
    EncodingProfile {
        width,
        height,
        fps: player_fps,
        video_bitrate_max: bitrate,
        bitrate_mode: BitrateMode::Vbr,
        two_pass: true,
        soft_target: true,
        audio_bitrate: p.audio_bitrate,
        audio_rate: p.audio_rate,
        quality_factor: quality_for_bitrate(bitrate).expect("bitrate within cap"),
    }
}

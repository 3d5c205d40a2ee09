//! Deterministic model of a game-engine movie-texture player.
//!
//! The model has three clocks:
//!
//! * wall time, starting at 0 when the scene loads;
//! * the script timer, which starts at `-timer_preroll` and advances by one
//!   jittered tick per update;
//! * the video clock, which starts when the first frame is displayed at wall
//!   time `video_start_delay` and runs with wall time from then on.
//!
//! When `timer_preroll == video_start_delay`, timer zero is the first
//! displayed frame. Any difference between the two is the timer-to-video
//! offset that register calibration has to recover.
//!
//! A screenshot lengthens the tick that requested it by `screenshot_stall`,
//! and the captured image shows whatever frame the video clock reached by
//! the end of the stall. The video clock is not held back by the stall:
//! playback keeps its length and drops frames instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::av_offset::{OnsetPair, PcmAudio};
use crate::fluency::{CameraObservationSequence, Observation};
use crate::register_log::{AudioPlanState, RegisterError, RegisterHeader, RegisterLog, RegisterRow, RowKind};
use crate::timebase::{quantize_micros, Timebase, TimebaseError};

pub const DEFAULT_START_DELAY: f64 = 0.251793;
pub const DEFAULT_TICK_PERIOD: f64 = 0.016565;
pub const DEFAULT_TICK_JITTER: f64 = 0.000005;
pub const DEFAULT_SCREENSHOT_STALL: f64 = 0.115936;
pub const DEFAULT_AUDIO_DELAY_FRAMES: f64 = 5.5;
pub const DEFAULT_CAMERA_PHASE: f64 = 0.3;

const OVERLAP_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("clip_duration must be positive and finite, got {0}")]
    ClipDuration(f64),
    #[error("tick_period must satisfy 0 < tick_period < one video frame ({frame}), got {tick}")]
    TickPeriod { tick: f64, frame: f64 },
    #[error("tick_jitter must satisfy 0 <= jitter < tick_period / 2, got {0}")]
    TickJitter(f64),
    #[error("{field} must be finite and non-negative, got {value}")]
    NegativeParameter { field: &'static str, value: f64 },
    #[error("{kind} time {time} outside [0, clip_duration = {duration}]")]
    TriggerOutOfRange {
        kind: &'static str,
        time: f64,
        duration: f64,
    },
    #[error("trigger at {0} was never reached before the clip ended")]
    TriggerNotReached(f64),
    #[error("audio delay range [{min}, {max}] is invalid")]
    AudioDelayRange { min: f64, max: f64 },
    #[error("camera_phase must be in [0, 1), got {0}")]
    CameraPhase(f64),
    #[error("screenshot '{label}' would show counter {counter}, outside the clip's {frames} frames")]
    CaptureOutsideClip { label: String, counter: i64, frames: i64 },
    #[error("defect at frame {frame}: {reason}")]
    Defect { frame: u64, reason: String },
    #[error(transparent)]
    Timebase(#[from] TimebaseError),
    #[error(transparent)]
    Register(#[from] RegisterError),
}

/// Audio lag of the player, in video frames. Constant within a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AudioDelay {
    Fixed(f64),
    /// Drawn once per run from the seeded generator.
    Range {
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub clip_duration: f64,
    pub timebase: Timebase,
    /// Wall time between the play instruction and the first displayed frame.
    pub video_start_delay: f64,
    /// The timer starts at minus this value.
    pub timer_preroll: f64,
    pub audio_delay: AudioDelay,
    /// Frames by which the source audio was already advanced.
    pub audio_advance_frames: u32,
    pub tick_period: f64,
    /// Half-width of the uniform tick jitter.
    pub tick_jitter: f64,
    pub screenshot_stall: f64,
    pub cut_times: Vec<f64>,
    pub sync_times: Vec<f64>,
    /// Camera shutter phase as a fraction of a camera period.
    pub camera_phase: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clip_duration: 10.0,
            timebase: Timebase::default(),
            video_start_delay: DEFAULT_START_DELAY,
            timer_preroll: DEFAULT_START_DELAY,
            audio_delay: AudioDelay::Fixed(DEFAULT_AUDIO_DELAY_FRAMES),
            audio_advance_frames: 0,
            tick_period: DEFAULT_TICK_PERIOD,
            tick_jitter: DEFAULT_TICK_JITTER,
            screenshot_stall: DEFAULT_SCREENSHOT_STALL,
            cut_times: Vec::new(),
            sync_times: Vec::new(),
            camera_phase: DEFAULT_CAMERA_PHASE,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn frame_count(&self) -> u64 {
        (self.clip_duration * self.timebase.video_fps).round() as u64
    }

    /// Seconds to subtract from a timer value to get video-clock time.
    pub fn timer_to_video_offset(&self) -> f64 {
        self.video_start_delay - self.timer_preroll
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.timebase.validate()?;
        if !(self.clip_duration.is_finite() && self.clip_duration > 0.0) {
            return Err(SimError::ClipDuration(self.clip_duration));
        }
        let frame = self.timebase.frame_period();
        if !(self.tick_period > 0.0 && self.tick_period < frame) {
            return Err(SimError::TickPeriod {
                tick: self.tick_period,
                frame,
            });
        }
        if !(self.tick_jitter >= 0.0 && self.tick_jitter < self.tick_period / 2.0) {
            return Err(SimError::TickJitter(self.tick_jitter));
        }
        for (field, value) in [
            ("video_start_delay", self.video_start_delay),
            ("timer_preroll", self.timer_preroll),
            ("screenshot_stall", self.screenshot_stall),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SimError::NegativeParameter { field, value });
            }
        }
        match self.audio_delay {
            AudioDelay::Fixed(d) if !d.is_finite() => return Err(SimError::AudioDelayRange { min: d, max: d }),
            AudioDelay::Range { min, max } if !(min.is_finite() && max.is_finite() && min <= max) => {
                return Err(SimError::AudioDelayRange { min, max })
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.camera_phase) {
            return Err(SimError::CameraPhase(self.camera_phase));
        }
        for (kind, times) in [("cut", &self.cut_times), ("sync", &self.sync_times)] {
            for &time in times.iter() {
                if !(time >= 0.0 && time <= self.clip_duration) {
                    return Err(SimError::TriggerOutOfRange {
                        kind,
                        time,
                        duration: self.clip_duration,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One programmed screenshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub label: String,
    pub requested_time: f64,
    pub displayed_counter: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub register_log: RegisterLog,
    pub captures: Vec<CaptureRecord>,
    /// Audible time of each cut's event on the video clock.
    pub audio_onsets: Vec<f64>,
    /// Video-clock time at which each cut's marker fired.
    pub video_onsets: Vec<f64>,
    pub cut_labels: Vec<String>,
    /// Audio lag drawn for this run, before any source advance.
    pub audio_delay_frames: f64,
    /// Ground-truth timer-to-video offset in seconds.
    pub timer_offset: f64,
}

impl SimOutput {
    pub fn onset_pairs(&self) -> Vec<OnsetPair> {
        self.cut_labels
            .iter()
            .zip(self.video_onsets.iter().zip(&self.audio_onsets))
            .map(|(label, (&v, &a))| OnsetPair {
                label: label.clone(),
                video_onset: v,
                audio_onset: a,
            })
            .collect()
    }

    /// Register shift (frames) that maps timer values onto the video clock.
    pub fn true_register_shift_frames(&self) -> f64 {
        -self.timer_offset * self.register_log.timebase.video_fps
    }

    pub fn sync_captures(&self) -> impl Iterator<Item = &CaptureRecord> {
        self.captures.iter().filter(|c| c.label.starts_with("sync"))
    }

    pub fn cut_captures(&self) -> impl Iterator<Item = &CaptureRecord> {
        self.captures.iter().filter(|c| !c.label.starts_with("sync"))
    }

    /// Pairs of (CUT_MARK row time, true video onset).
    pub fn cut_marks_with_truth(&self) -> Vec<(f64, f64)> {
        self.register_log
            .rows_of_kind(RowKind::CutMark)
            .map(|(_, r)| r.time)
            .zip(self.video_onsets.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TriggerKind {
    Sync,
    Cut,
}

/// Screenshot title: cut number and programmed position as mm/ss/ff.
pub fn cut_label(index: usize, time: f64, tb: &Timebase) -> String {
    let total_frames = (time * tb.video_fps).floor().max(0.0) as u64;
    let fps = tb.video_fps.round().max(1.0) as u64;
    let frames = total_frames % fps;
    let secs = total_frames / fps;
    format!("cut{:02}_{:02}m{:02}s{:02}f", index + 1, secs / 60, secs % 60, frames)
}

fn sync_label(index: usize, count: usize) -> String {
    match (index, count) {
        (0, _) => "sync_start".to_string(),
        (1, 2) => "sync_end".to_string(),
        (i, _) => format!("sync_{i}"),
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let tb = cfg.timebase;
    let fps = tb.video_fps;
    let frames = cfg.frame_count() as i64;
    let offset = cfg.timer_to_video_offset();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let audio_delay_frames = match cfg.audio_delay {
        AudioDelay::Fixed(d) => d,
        AudioDelay::Range { min, max } if min == max => min,
        AudioDelay::Range { min, max } => rng.random_range(min..=max),
    };
    let effective_audio_delay = (audio_delay_frames - cfg.audio_advance_frames as f64) / fps;

    let mut triggers: Vec<(f64, TriggerKind, String)> = Vec::new();
    let mut sync_sorted = cfg.sync_times.clone();
    sync_sorted.sort_by(f64::total_cmp);
    for (i, &t) in sync_sorted.iter().enumerate() {
        triggers.push((t, TriggerKind::Sync, sync_label(i, sync_sorted.len())));
    }
    let mut cut_sorted = cfg.cut_times.clone();
    cut_sorted.sort_by(f64::total_cmp);
    for (i, &t) in cut_sorted.iter().enumerate() {
        triggers.push((t, TriggerKind::Cut, cut_label(i, t, &tb)));
    }
    triggers.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rows = Vec::new();
    let mut captures = Vec::new();
    let mut video_onsets = Vec::new();
    let mut audio_onsets = Vec::new();
    let mut cut_labels = Vec::new();
    let mut pending = triggers.into_iter().peekable();

    let mut timer = -cfg.timer_preroll;
    while timer < cfg.clip_duration {
        let jitter = if cfg.tick_jitter > 0.0 {
            rng.random_range(-cfg.tick_jitter..=cfg.tick_jitter)
        } else {
            0.0
        };
        let mut dt = cfg.tick_period + jitter;
        let row_time = quantize_micros(timer);

        match pending.next_if(|(t, _, _)| *t <= timer) {
            Some((_, kind, label)) => {
                let video_at_capture = timer + cfg.screenshot_stall - offset;
                let counter = (video_at_capture * fps).floor() as i64;
                if !(0..frames).contains(&counter) {
                    return Err(SimError::CaptureOutsideClip { label, counter, frames });
                }
                let row_kind = match kind {
                    TriggerKind::Sync => RowKind::SyncMark,
                    TriggerKind::Cut => RowKind::CutMark,
                };
                rows.push(RegisterRow::mark(row_time, row_kind, label.clone()));
                if kind == TriggerKind::Cut {
                    // Both on the microsecond grid so exported offsets are exact.
                    let video_onset = quantize_micros(timer - offset);
                    video_onsets.push(video_onset);
                    audio_onsets.push(quantize_micros(video_onset + effective_audio_delay));
                    cut_labels.push(label.clone());
                }
                captures.push(CaptureRecord {
                    label,
                    requested_time: row_time,
                    displayed_counter: counter,
                });
                dt += cfg.screenshot_stall;
            }
            None => rows.push(RegisterRow::tick(row_time)),
        }
        timer += dt;
    }
    if let Some((t, _, _)) = pending.next() {
        return Err(SimError::TriggerNotReached(t));
    }

    let header = RegisterHeader {
        clip_duration: Some(cfg.clip_duration),
        audio_plan: match cfg.audio_advance_frames {
            0 => AudioPlanState::Uncompensated,
            n => AudioPlanState::Advanced(n),
        },
    };
    Ok(SimOutput {
        register_log: RegisterLog::new(tb, header, rows)?,
        captures,
        audio_onsets,
        video_onsets,
        cut_labels,
        audio_delay_frames,
        timer_offset: offset,
    })
}

/// A frame held on screen for `hold_extra_frames` extra frame periods.
/// The player then skips the same number of frames to keep the clip length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluencyDefect {
    pub frame: u64,
    pub hold_extra_frames: u64,
}

/// Display interval of one video frame, in seconds on the video clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplaySegment {
    pub frame: u64,
    pub start: f64,
    pub end: f64,
}

/// The frames actually shown, in order, after holds and skips.
pub fn display_schedule(cfg: &SimConfig, defects: &[FluencyDefect]) -> Result<Vec<DisplaySegment>, SimError> {
    let n_frames = cfg.frame_count();
    let period = cfg.timebase.frame_period();
    let mut sorted = defects.to_vec();
    sorted.sort_by_key(|d| d.frame);

    let mut next_free = 0u64;
    for d in &sorted {
        let fail = |reason: &str| SimError::Defect {
            frame: d.frame,
            reason: reason.to_string(),
        };
        if d.hold_extra_frames < 1 {
            return Err(fail("hold_extra_frames must be at least 1"));
        }
        if d.frame < next_free {
            return Err(fail("overlaps a previous defect's hold or skip"));
        }
        // Some frame must follow the skipped run, otherwise the jump is invisible.
        if d.frame + d.hold_extra_frames + 1 >= n_frames {
            return Err(fail("skip would run past the end of the clip"));
        }
        next_free = d.frame + d.hold_extra_frames + 1;
    }

    let mut segments = Vec::with_capacity(n_frames as usize);
    let mut defects = sorted.iter().peekable();
    let mut n = 0u64;
    while n < n_frames {
        let hold = defects.next_if(|d| d.frame == n).map_or(0, |d| d.hold_extra_frames);
        segments.push(DisplaySegment {
            frame: n,
            start: n as f64 * period,
            end: (n + 1 + hold) as f64 * period,
        });
        n += 1 + hold;
    }
    Ok(segments)
}

/// What a free-running camera filming the frame counter would record.
///
/// Camera frame `k` integrates `[(k + phase) / C, (k + 1 + phase) / C)`.
/// When that window straddles two consecutive counter values both are
/// recorded; when it straddles a jump, only the value exposed longer is
/// legible.
pub fn inject_fluency_defects(
    cfg: &SimConfig,
    defects: &[FluencyDefect],
) -> Result<CameraObservationSequence, SimError> {
    cfg.validate()?;
    cfg.timebase.validate_for_observation()?;
    let segments = display_schedule(cfg, defects)?;
    let cam = cfg.timebase.camera_fps;
    let duration = cfg.frame_count() as f64 * cfg.timebase.frame_period();
    let windows = (cam * duration - cfg.camera_phase).ceil().max(0.0) as u64;

    let mut observations = Vec::with_capacity(windows as usize);
    let mut first_seg = 0usize;
    for k in 0..windows {
        let w_start = (k as f64 + cfg.camera_phase) / cam;
        let w_end = ((k + 1) as f64 + cfg.camera_phase) / cam;
        while first_seg + 1 < segments.len() && segments[first_seg].end <= w_start + OVERLAP_EPS {
            first_seg += 1;
        }
        let mut seen: Vec<(u64, f64)> = Vec::with_capacity(2);
        for seg in &segments[first_seg..] {
            if seg.start >= w_end - OVERLAP_EPS {
                break;
            }
            let overlap = seg.end.min(w_end).min(duration) - seg.start.max(w_start);
            if overlap > OVERLAP_EPS {
                seen.push((seg.frame, overlap));
            }
        }
        let obs = match seen.as_slice() {
            [] => continue,
            [(v, _)] => Observation::Single(*v),
            [(a, _), (b, _)] if *b == *a + 1 => Observation::Double(*a),
            _ => {
                // Ties go to the later frame.
                let (v, _) = seen
                    .iter()
                    .copied()
                    .reduce(|best, cur| if cur.1 >= best.1 { cur } else { best })
                    .unwrap();
                Observation::Single(v)
            }
        };
        observations.push(obs);
    }
    Ok(CameraObservationSequence {
        timebase: cfg.timebase,
        observations,
    })
}

/// Source audio with a single full-scale click at each onset.
pub fn click_track(onsets: &[f64], duration: f64, sample_rate: u32, channels: u16) -> PcmAudio {
    let frames = (duration * sample_rate as f64).round() as usize;
    let ch = channels as usize;
    let mut samples = vec![0i16; frames * ch];
    for &t in onsets {
        let idx = (t * sample_rate as f64).round();
        if idx >= 0.0 && (idx as usize) < frames {
            let base = idx as usize * ch;
            samples[base..base + ch].fill(i16::MAX);
        }
    }
    PcmAudio {
        sample_rate,
        channels,
        samples,
    }
}

/// Start times of the clicks in a click track.
pub fn click_onsets(audio: &PcmAudio) -> Vec<f64> {
    let ch = audio.channels as usize;
    let mut onsets = Vec::new();
    let mut prev_loud = false;
    for (i, frame) in audio.samples.chunks(ch).enumerate() {
        let loud = frame.iter().any(|&s| s != 0);
        if loud && !prev_loud {
            onsets.push(i as f64 / audio.sample_rate as f64);
        }
        prev_loud = loud;
    }
    onsets
}

/// Audible onsets when the player plays `audio` with its constant lag.
pub fn play_audio(audio: &PcmAudio, audio_delay_frames: f64, tb: &Timebase) -> Vec<f64> {
    let lag = audio_delay_frames / tb.video_fps;
    click_onsets(audio).into_iter().map(|t| t + lag).collect()
}

pub fn write_capture_manifest(captures: &[CaptureRecord]) -> String {
    let mut out = String::new();
    for c in captures {
        out.push_str(&serde_json::to_string(c).expect("capture serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
#[error("capture manifest line {line}: {source}")]
pub struct ManifestError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

pub fn parse_capture_manifest(text: &str) -> Result<Vec<CaptureRecord>, ManifestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| ManifestError { line: i + 1, source }))
        .collect()
}

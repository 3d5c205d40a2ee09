//! The chronological register file written at the end of a playback
//! session, and everything computed from it.
//!
//! # File format
//!
//! ASCII, one item per `\n`-terminated line:
//!
//! ```text
//! # stimsync register v1
//! # video_fps: 25
//! # clip_duration: 12.000000
//! # audio_plan: advanced 6
//! -0.251793 TICK
//! 0.012345 SYNC_MARK sync_start
//! 5.906908 CUT_MARK cut_03
//! ```
//!
//! Lines starting with `#` are header/comment lines. Recognised keys are
//! `video_fps`, `clip_duration` and `audio_plan` (`uncompensated` or
//! `advanced <frames>`); anything else is ignored. Rows are
//! `<time> <KIND> [label]` with times printed to six decimals. Times must be
//! strictly increasing. A header-only file is a valid, empty log; a file with
//! no lines at all is not.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::playback_sim::CaptureRecord;
use crate::timebase::{format_seconds, frames_to_seconds, seconds_to_frames, FrameDelta, Timebase};

const FORMAT_BANNER: &str = "# stimsync register v1";

/// Two rows whose times agree to within this many seconds are the same
/// instant once printed at microsecond precision.
const TIME_MATCH_EPS: f64 = 5e-7;

/// A delta longer than this multiple of the baseline tick is a stall.
pub const STALL_FACTOR: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("EMPTY_LOG: register file has no content")]
    EmptyLog,
    #[error("NON_MONOTONIC: row at line {line} ({time}) does not follow line {prev_line} ({prev_time})")]
    NonMonotonic {
        line: usize,
        time: f64,
        prev_line: usize,
        prev_time: f64,
    },
    #[error("malformed register line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("row {row}: second SYNC_MARK in the same leader region (first at row {first})")]
    DuplicateSyncMark { row: usize, first: usize },
    #[error("need at least {needed} rows, log has {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("NO_SYNC_MARK: log has no SYNC_MARK row matching the capture")]
    NoSyncMark,
    #[error("SYNC_MARK at row {0} is the last row; its screenshot delay cannot be measured")]
    SyncMarkIsLast(usize),
    #[error("no captures supplied")]
    NoCaptures,
    #[error("capture '{label}' requested at {time} lies outside the log span [{start}, {end}]")]
    CaptureOutsideLog {
        label: String,
        time: f64,
        start: f64,
        end: f64,
    },
    #[error("capture '{label}' shows counter {counter}, outside the clip's {frames} frames")]
    CounterOutOfRange { label: String, counter: i64, frames: i64 },
    #[error("compensation shift is not finite")]
    NonFiniteShift,
    #[error(transparent)]
    Timebase(#[from] crate::timebase::TimebaseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    #[serde(rename = "TICK")]
    Tick,
    #[serde(rename = "SYNC_MARK")]
    SyncMark,
    #[serde(rename = "CUT_MARK")]
    CutMark,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Tick => "TICK",
            RowKind::SyncMark => "SYNC_MARK",
            RowKind::CutMark => "CUT_MARK",
        }
    }
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RowKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TICK" => Ok(RowKind::Tick),
            "SYNC_MARK" => Ok(RowKind::SyncMark),
            "CUT_MARK" => Ok(RowKind::CutMark),
            other => Err(format!("unknown row kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRow {
    pub time: f64,
    pub kind: RowKind,
    pub label: Option<String>,
}

impl RegisterRow {
    pub fn tick(time: f64) -> Self {
        RegisterRow {
            time,
            kind: RowKind::Tick,
            label: None,
        }
    }

    pub fn mark(time: f64, kind: RowKind, label: impl Into<String>) -> Self {
        RegisterRow {
            time,
            kind,
            label: Some(label.into()),
        }
    }
}

/// What the log says about the audio track that was playing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AudioPlanState {
    #[default]
    Unknown,
    Uncompensated,
    Advanced(u32),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegisterHeader {
    pub clip_duration: Option<f64>,
    pub audio_plan: AudioPlanState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterLog {
    pub timebase: Timebase,
    pub header: RegisterHeader,
    rows: Vec<RegisterRow>,
}

impl RegisterLog {
    /// Builds a log, enforcing strict time order and the one-sync-mark-per-
    /// leader rule. Leader regions are the stretches between CUT_MARKs.
    pub fn new(timebase: Timebase, header: RegisterHeader, rows: Vec<RegisterRow>) -> Result<Self, RegisterError> {
        timebase.validate()?;
        for (i, row) in rows.iter().enumerate() {
            if !row.time.is_finite() {
                return Err(RegisterError::Malformed {
                    line: i + 1,
                    reason: "non-finite time".into(),
                });
            }
            if let Some(label) = &row.label {
                if label.is_empty() || label.chars().any(char::is_whitespace) {
                    return Err(RegisterError::Malformed {
                        line: i + 1,
                        reason: format!("label '{label}' is empty or contains whitespace"),
                    });
                }
            }
        }
        for (i, pair) in rows.windows(2).enumerate() {
            if pair[1].time <= pair[0].time {
                return Err(RegisterError::NonMonotonic {
                    line: i + 2,
                    time: pair[1].time,
                    prev_line: i + 1,
                    prev_time: pair[0].time,
                });
            }
        }
        let mut sync_in_region: Option<usize> = None;
        for (i, row) in rows.iter().enumerate() {
            match row.kind {
                RowKind::CutMark => sync_in_region = None,
                RowKind::SyncMark => {
                    if let Some(first) = sync_in_region {
                        return Err(RegisterError::DuplicateSyncMark { row: i, first });
                    }
                    sync_in_region = Some(i);
                }
                RowKind::Tick => {}
            }
        }
        Ok(RegisterLog { timebase, header, rows })
    }

    pub fn rows(&self) -> &[RegisterRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.rows.first()?.time, self.rows.last()?.time))
    }

    /// Index of the last row at or before `t` (allowing for print rounding).
    pub fn row_at(&self, t: f64) -> Option<usize> {
        let idx = self.rows.partition_point(|r| r.time <= t + TIME_MATCH_EPS);
        idx.checked_sub(1)
    }

    pub fn rows_of_kind(&self, kind: RowKind) -> impl Iterator<Item = (usize, &RegisterRow)> {
        self.rows.iter().enumerate().filter(move |(_, r)| r.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 * (self.rows.len() + 4));
        out.push_str(FORMAT_BANNER);
        out.push('\n');
        out.push_str(&format!("# video_fps: {}\n", self.timebase.video_fps));
        if let Some(d) = self.header.clip_duration {
            out.push_str(&format!("# clip_duration: {}\n", format_seconds(d)));
        }
        match self.header.audio_plan {
            AudioPlanState::Unknown => {}
            AudioPlanState::Uncompensated => out.push_str("# audio_plan: uncompensated\n"),
            AudioPlanState::Advanced(n) => out.push_str(&format!("# audio_plan: advanced {n}\n")),
        }
        for row in &self.rows {
            out.push_str(&format_seconds(row.time));
            out.push(' ');
            out.push_str(row.kind.as_str());
            if let Some(label) = &row.label {
                out.push(' ');
                out.push_str(label);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RegisterError> {
        write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }
}

/// Parses register text. `fallback` supplies the timebase when the header
/// does not declare `video_fps`.
pub fn parse_register_str(text: &str, fallback: Timebase) -> Result<RegisterLog, RegisterError> {
    if text.trim().is_empty() {
        return Err(RegisterError::EmptyLog);
    }
    let mut timebase = fallback;
    let mut header = RegisterHeader::default();
    let mut rows = Vec::new();
    let mut row_lines = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            parse_header_line(comment.trim(), line_no, &mut timebase, &mut header)?;
            continue;
        }
        let mut parts = line.split_whitespace();
        let malformed = |reason: String| RegisterError::Malformed { line: line_no, reason };
        let time_tok = parts.next().ok_or_else(|| malformed("missing time".into()))?;
        let time: f64 = time_tok
            .parse()
            .map_err(|_| malformed(format!("bad time '{time_tok}'")))?;
        if !time.is_finite() {
            return Err(malformed(format!("non-finite time '{time_tok}'")));
        }
        let kind_tok = parts.next().ok_or_else(|| malformed("missing row kind".into()))?;
        let kind: RowKind = kind_tok.parse().map_err(malformed)?;
        let label = parts.next().map(str::to_string);
        if parts.next().is_some() {
            return Err(malformed("trailing fields after label".into()));
        }
        if let Some(prev) = rows.last() {
            let prev: &RegisterRow = prev;
            if time <= prev.time {
                return Err(RegisterError::NonMonotonic {
                    line: line_no,
                    time,
                    prev_line: *row_lines.last().unwrap(),
                    prev_time: prev.time,
                });
            }
        }
        rows.push(RegisterRow { time, kind, label });
        row_lines.push(line_no);
    }
    RegisterLog::new(timebase, header, rows).map_err(|e| match e {
        // Report file lines rather than row indices.
        RegisterError::DuplicateSyncMark { row, first } => RegisterError::DuplicateSyncMark {
            row: row_lines[row],
            first: row_lines[first],
        },
        other => other,
    })
}

fn parse_header_line(
    comment: &str,
    line: usize,
    timebase: &mut Timebase,
    header: &mut RegisterHeader,
) -> Result<(), RegisterError> {
    let Some((key, value)) = comment.split_once(':') else {
        return Ok(());
    };
    let value = value.trim();
    let bad = |what: &str| RegisterError::Malformed {
        line,
        reason: format!("bad {what} header '{value}'"),
    };
    match key.trim() {
        "video_fps" => {
            let fps: f64 = value.parse().map_err(|_| bad("video_fps"))?;
            if !(fps.is_finite() && fps > 0.0) {
                return Err(bad("video_fps"));
            }
            timebase.video_fps = fps;
        }
        "clip_duration" => {
            let d: f64 = value.parse().map_err(|_| bad("clip_duration"))?;
            if !(d.is_finite() && d > 0.0) {
                return Err(bad("clip_duration"));
            }
            header.clip_duration = Some(d);
        }
        "audio_plan" => {
            header.audio_plan = if value == "uncompensated" {
                AudioPlanState::Uncompensated
            } else if let Some(n) = value.strip_prefix("advanced") {
                AudioPlanState::Advanced(n.trim().parse().map_err(|_| bad("audio_plan"))?)
            } else {
                return Err(bad("audio_plan"));
            };
        }
        _ => {}
    }
    Ok(())
}

pub fn parse_register(path: &Path, fallback: Timebase) -> Result<RegisterLog, RegisterError> {
    let text = std::fs::read_to_string(path)?;
    parse_register_str(&text, fallback)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StallRow {
    /// Row whose following delta is stretched (the row that requested the capture).
    pub row_index: usize,
    pub delta_frames: f64,
    pub excess_frames: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaAnalysis {
    pub deltas_seconds: Vec<f64>,
    pub deltas_frames: Vec<f64>,
    pub baseline_frames: f64,
    pub stall_rows: Vec<StallRow>,
}

impl DeltaAnalysis {
    pub fn stall_at(&self, row_index: usize) -> Option<&StallRow> {
        self.stall_rows.iter().find(|s| s.row_index == row_index)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn analyze_deltas(log: &RegisterLog) -> Result<DeltaAnalysis, RegisterError> {
    if log.len() < 3 {
        return Err(RegisterError::TooFewRows {
            needed: 3,
            found: log.len(),
        });
    }
    let tb = &log.timebase;
    let deltas_seconds: Vec<f64> = log.rows.windows(2).map(|w| w[1].time - w[0].time).collect();
    let deltas_frames: Vec<f64> = deltas_seconds
        .iter()
        .map(|d| seconds_to_frames(*d, tb).map(FrameDelta::frames))
        .collect::<Result<_, _>>()?;

    // A single stall cannot move the median of all deltas far, so it
    // serves to separate stalls before taking the clean baseline.
    let provisional = median(&mut deltas_frames.clone());
    let mut clean: Vec<f64> = deltas_frames
        .iter()
        .copied()
        .filter(|d| *d <= STALL_FACTOR * provisional)
        .collect();
    let baseline_frames = if clean.is_empty() {
        provisional
    } else {
        median(&mut clean)
    };

    let stall_rows = deltas_frames
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > STALL_FACTOR * baseline_frames)
        .map(|(i, d)| StallRow {
            row_index: i,
            delta_frames: *d,
            excess_frames: d - baseline_frames,
        })
        .collect();

    Ok(DeltaAnalysis {
        deltas_seconds,
        deltas_frames,
        baseline_frames,
        stall_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureDelayEstimate {
    pub fractional_frames: f64,
    pub truncated_frames: i64,
    pub per_capture_lags: Vec<i64>,
    /// Lag in whole frames -> percentage of captures.
    pub distribution: BTreeMap<i64, f64>,
}

/// Percentages of each distinct lag value.
pub fn lag_distribution(lags: &[i64]) -> BTreeMap<i64, f64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &lag in lags {
        *counts.entry(lag).or_default() += 1;
    }
    let n = lags.len() as f64;
    counts.into_iter().map(|(lag, c)| (lag, 100.0 * c as f64 / n)).collect()
}

/// Capture lag per screenshot plus the sub-frame capture delay read off the
/// stall that each screenshot left in the log.
pub fn estimate_capture_delay(
    log: &RegisterLog,
    captures: &[CaptureRecord],
) -> Result<CaptureDelayEstimate, RegisterError> {
    if captures.is_empty() {
        return Err(RegisterError::NoCaptures);
    }
    let analysis = analyze_deltas(log)?;
    let (start, end) = log.span().expect("analyze_deltas guarantees rows");
    let tb = &log.timebase;
    let clip_frames = log.header.clip_duration.map(|d| (d * tb.video_fps).round() as i64);

    let mut lags = Vec::with_capacity(captures.len());
    let mut excess_sum = 0.0;
    for cap in captures {
        if !(cap.requested_time >= start - TIME_MATCH_EPS && cap.requested_time <= end + TIME_MATCH_EPS) {
            return Err(RegisterError::CaptureOutsideLog {
                label: cap.label.clone(),
                time: cap.requested_time,
                start,
                end,
            });
        }
        let out_of_range =
            cap.displayed_counter < 0 || clip_frames.is_some_and(|frames| cap.displayed_counter >= frames);
        if out_of_range {
            return Err(RegisterError::CounterOutOfRange {
                label: cap.label.clone(),
                counter: cap.displayed_counter,
                frames: clip_frames.unwrap_or(0),
            });
        }
        let requested = seconds_to_frames(cap.requested_time, tb)?;
        lags.push(cap.displayed_counter - requested.truncated());

        let row = log.row_at(cap.requested_time).expect("time within span");
        excess_sum += analysis.stall_at(row).map_or(0.0, |s| s.excess_frames);
    }
    let fractional_frames = excess_sum / captures.len() as f64;
    Ok(CaptureDelayEstimate {
        fractional_frames,
        truncated_frames: FrameDelta(fractional_frames).truncated(),
        distribution: lag_distribution(&lags),
        per_capture_lags: lags,
    })
}

/// Constant corrections for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationPlan {
    pub register_shift_frames: f64,
    pub audio_advance_frames: u32,
    pub provenance: String,
}

impl CompensationPlan {
    pub fn identity() -> Self {
        CompensationPlan {
            register_shift_frames: 0.0,
            audio_advance_frames: 0,
            provenance: "identity".into(),
        }
    }

    pub fn register_shift(frames: f64, provenance: impl Into<String>) -> Self {
        CompensationPlan {
            register_shift_frames: frames,
            audio_advance_frames: 0,
            provenance: provenance.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensated {
    pub log: RegisterLog,
    /// Rows that ended up before time zero. Legal (the timer starts
    /// negative) but worth reporting.
    pub pre_roll_rows: usize,
}

pub fn compensate_register(log: &RegisterLog, plan: &CompensationPlan) -> Result<Compensated, RegisterError> {
    if !plan.register_shift_frames.is_finite() {
        return Err(RegisterError::NonFiniteShift);
    }
    let shift = frames_to_seconds(FrameDelta(plan.register_shift_frames), &log.timebase)?;
    let rows: Vec<RegisterRow> = log
        .rows
        .iter()
        .map(|r| RegisterRow {
            time: r.time + shift,
            kind: r.kind,
            label: r.label.clone(),
        })
        .collect();
    let pre_roll_rows = rows.iter().filter(|r| r.time < 0.0).count();
    let log = RegisterLog::new(log.timebase, log.header.clone(), rows)?;
    Ok(Compensated { log, pre_roll_rows })
}

/// Timer-to-video correction from one sync-mark screenshot: the timer time
/// of the mark in frames, minus the counter the screenshot shows, plus the
/// stall the screenshot caused, negated.
pub fn calibrate_from_sync_mark(
    log: &RegisterLog,
    sync_capture: &CaptureRecord,
) -> Result<CompensationPlan, RegisterError> {
    let by_label = log
        .rows_of_kind(RowKind::SyncMark)
        .find(|(_, r)| r.label.as_deref() == Some(sync_capture.label.as_str()));
    let (row_index, row) = match by_label {
        Some(found) => found,
        None => log
            .rows_of_kind(RowKind::SyncMark)
            .min_by(|a, b| {
                (a.1.time - sync_capture.requested_time)
                    .abs()
                    .total_cmp(&(b.1.time - sync_capture.requested_time).abs())
            })
            .ok_or(RegisterError::NoSyncMark)?,
    };
    if row_index + 1 >= log.len() {
        return Err(RegisterError::SyncMarkIsLast(row_index));
    }
    let analysis = analyze_deltas(log)?;
    let tb = &log.timebase;

    let first_delay = seconds_to_frames(row.time, tb)?.frames() - sync_capture.displayed_counter as f64;
    let screenshot_delay = analysis.deltas_frames[row_index] - analysis.baseline_frames;
    let register_shift_frames = -(first_delay + screenshot_delay);
    let audio_advance_frames = match log.header.audio_plan {
        AudioPlanState::Advanced(n) => n,
        _ => 0,
    };
    Ok(CompensationPlan {
        register_shift_frames,
        audio_advance_frames,
        provenance: format!(
            "sync mark '{}' at {}: timer-vs-counter {:.6} frames, screenshot stall {:.6} frames over baseline {:.6}",
            row.label.as_deref().unwrap_or("-"),
            format_seconds(row.time),
            first_delay,
            screenshot_delay,
            analysis.baseline_frames,
        ),
    })
}

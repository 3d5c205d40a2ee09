//! Constant audio-video offset: estimation from onset pairs, whole-frame
//! audio advance on PCM, and the re-measure/readjust verification loop.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::register_log::CompensationPlan;
use crate::timebase::{format_seconds, seconds_to_frames, FrameDelta, Timebase, TimebaseError, Tolerance};

/// Spread (max - min, in frames) beyond which an offset is not constant.
pub const CONSTANT_SPREAD_FRAMES: f64 = 1.0;

#[derive(Debug, Error)]
pub enum AvError {
    #[error("INSUFFICIENT_PAIRS: need at least 2 onset pairs, got {0}")]
    InsufficientPairs(usize),
    #[error("onset pair '{label}' has a negative or non-finite time")]
    InvalidPair { label: String },
    #[error("NON_CONSTANT_OFFSET: offsets spread over {spread_frames:.3} frames")]
    NonConstantOffset { spread_frames: f64 },
    #[error("audio leads video by {0:.3} frames; an advance cannot correct it")]
    AudioLeads(f64),
    #[error("advance of {advance} samples per channel is not shorter than the audio ({available})")]
    AdvanceTooLong { advance: usize, available: usize },
    #[error("invalid PCM audio: {0}")]
    InvalidAudio(String),
    #[error("NOT_CONVERGED after {} iterations; residual history {history:?}", history.len())]
    NotConverged { history: Vec<f64> },
    #[error("onset CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Timebase(#[from] TimebaseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The same audiovisual event seen in the picture and heard in the sound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetPair {
    pub label: String,
    pub video_onset: f64,
    pub audio_onset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Audio minus video; positive means the audio is late.
    pub offset_frames: f64,
    pub spread_frames: f64,
    pub is_constant: bool,
}

impl OffsetEstimate {
    pub fn flag(&self) -> Option<&'static str> {
        (!self.is_constant).then_some("NON_CONSTANT_OFFSET")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-pair offset. A non-constant offset is still returned, with
/// `is_constant == false`.
pub fn estimate_offset(pairs: &[OnsetPair], tb: &Timebase) -> Result<OffsetEstimate, AvError> {
    if pairs.len() < 2 {
        return Err(AvError::InsufficientPairs(pairs.len()));
    }
    let mut diffs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ok = |t: f64| t.is_finite() && t >= 0.0;
        if !(ok(p.video_onset) && ok(p.audio_onset)) {
            return Err(AvError::InvalidPair { label: p.label.clone() });
        }
        diffs.push(seconds_to_frames(p.audio_onset - p.video_onset, tb)?.frames());
    }
    let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread_frames = hi - lo;
    Ok(OffsetEstimate {
        offset_frames: median(diffs),
        spread_frames,
        is_constant: spread_frames <= CONSTANT_SPREAD_FRAMES,
    })
}

/// Whole-frame audio advance; halves round up.
pub fn build_advance_plan(est: &OffsetEstimate) -> Result<CompensationPlan, AvError> {
    if !est.is_constant {
        return Err(AvError::NonConstantOffset {
            spread_frames: est.spread_frames,
        });
    }
    let advance = FrameDelta(est.offset_frames).rounded();
    if advance < 0 {
        return Err(AvError::AudioLeads(-est.offset_frames));
    }
    Ok(CompensationPlan {
        register_shift_frames: 0.0,
        audio_advance_frames: advance as u32,
        provenance: format!(
            "audio offset {:.6} frames (spread {:.6}) rounded to {advance}",
            est.offset_frames, est.spread_frames
        ),
    })
}

/// Interleaved signed 16-bit PCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<i16>,
}

impl PcmAudio {
    pub fn silent(sample_rate: u32, channels: u16, frames: usize) -> Self {
        PcmAudio {
            sample_rate,
            channels,
            samples: vec![0; frames * channels as usize],
        }
    }

    pub fn validate(&self) -> Result<(), AvError> {
        if self.sample_rate == 0 {
            return Err(AvError::InvalidAudio("sample rate is zero".into()));
        }
        if self.channels == 0 {
            return Err(AvError::InvalidAudio("no channels".into()));
        }
        if !self.samples.len().is_multiple_of(self.channels as usize) {
            return Err(AvError::InvalidAudio(format!(
                "{} samples do not divide into {} channels",
                self.samples.len(),
                self.channels
            )));
        }
        Ok(())
    }

    /// Samples per channel.
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn to_wav_bytes(&self) -> Result<Vec<u8>, AvError> {
        self.validate()?;
        let spec = hound::WavSpec {
            channels: self.channels,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::with_capacity(44 + 2 * self.samples.len()));
        {
            let mut writer = hound::WavWriter::new(&mut buf, spec)?;
            let mut w = writer.get_i16_writer(self.samples.len() as u32);
            for &s in &self.samples {
                w.write_sample(s);
            }
            w.flush()?;
            writer.finalize()?;
        }
        Ok(buf.into_inner())
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self, AvError> {
        let reader = hound::WavReader::new(Cursor::new(bytes))?;
        Self::from_reader(reader)
    }

    fn from_reader<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Self, AvError> {
        let spec = reader.spec();
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(AvError::InvalidAudio(format!(
                "expected 16-bit integer PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader.into_samples::<i16>().collect::<Result<Vec<_>, _>>()?;
        let audio = PcmAudio {
            sample_rate: spec.sample_rate,
            channels: spec.channels,
            samples,
        };
        audio.validate()?;
        Ok(audio)
    }

    pub fn read_wav(path: &Path) -> Result<Self, AvError> {
        Self::from_reader(hound::WavReader::open(path)?)
    }

    pub fn write_wav(&self, path: &Path) -> Result<(), AvError> {
        write_atomic(path, &self.to_wav_bytes()?)?;
        Ok(())
    }
}

/// Samples per channel covered by `frames` video frames.
pub fn frames_to_samples(frames: u32, sample_rate: u32, tb: &Timebase) -> usize {
    (frames as f64 * sample_rate as f64 / tb.video_fps).round() as usize
}

/// Moves the whole soundtrack earlier by `advance_frames` video frames:
/// the head is cut and the same length of silence is appended, so the
/// sample count is unchanged.
pub fn advance_audio(audio: &PcmAudio, advance_frames: u32, tb: &Timebase) -> Result<PcmAudio, AvError> {
    audio.validate()?;
    let shift = frames_to_samples(advance_frames, audio.sample_rate, tb);
    if shift == 0 {
        return Ok(audio.clone());
    }
    let available = audio.frames();
    if shift >= available {
        return Err(AvError::AdvanceTooLong {
            advance: shift,
            available,
        });
    }
    let cut = shift * audio.channels as usize;
    let mut samples = Vec::with_capacity(audio.samples.len());
    samples.extend_from_slice(&audio.samples[cut..]);
    samples.resize(audio.samples.len(), 0);
    Ok(PcmAudio {
        sample_rate: audio.sample_rate,
        channels: audio.channels,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyStep {
    Converged,
    Adjusted(CompensationPlan),
}

/// One pass of the check: accept when the re-measured residual is within
/// tolerance, otherwise move the advance one frame toward it.
pub fn verify_step(plan: &CompensationPlan, residual: &OffsetEstimate, tol: Tolerance) -> Result<VerifyStep, AvError> {
    if tol.admits(FrameDelta(residual.offset_frames)) {
        return Ok(VerifyStep::Converged);
    }
    let advance = if residual.offset_frames > 0.0 {
        plan.audio_advance_frames + 1
    } else {
        plan.audio_advance_frames
            .checked_sub(1)
            .ok_or(AvError::AudioLeads(-residual.offset_frames))?
    };
    Ok(VerifyStep::Adjusted(CompensationPlan {
        audio_advance_frames: advance,
        provenance: format!(
            "{}; readjusted to {advance} after residual {:.6}",
            plan.provenance, residual.offset_frames
        ),
        ..plan.clone()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub plan: CompensationPlan,
    pub iterations: usize,
    pub adjustments: usize,
    pub residual_frames: f64,
    pub history: Vec<f64>,
}

/// Applies the plan, re-measures through `run`, and readjusts by one frame
/// at a time until the residual is within `tol`.
pub fn verify_loop<F>(
    mut run: F,
    initial_est: &OffsetEstimate,
    max_iter: usize,
    tol: Tolerance,
    tb: &Timebase,
) -> Result<VerifyOutcome, AvError>
where
    F: FnMut(&CompensationPlan) -> Vec<OnsetPair>,
{
    let mut plan = build_advance_plan(initial_est)?;
    let mut history = Vec::new();
    let mut adjustments = 0;
    for iteration in 1..=max_iter {
        let pairs = run(&plan);
        let residual = estimate_offset(&pairs, tb)?;
        history.push(residual.offset_frames);
        match verify_step(&plan, &residual, tol) {
            Ok(VerifyStep::Converged) => {
                return Ok(VerifyOutcome {
                    plan,
                    iterations: iteration,
                    adjustments,
                    residual_frames: residual.offset_frames,
                    history,
                })
            }
            Ok(VerifyStep::Adjusted(next)) => {
                plan = next;
                adjustments += 1;
            }
            Err(_) => break,
        }
    }
    Err(AvError::NotConverged { history })
}

#[derive(Debug, Serialize, Deserialize)]
struct OnsetRow {
    label: String,
    video_onset_s: f64,
    audio_onset_s: f64,
}

pub fn parse_onsets_csv(text: &str) -> Result<Vec<OnsetPair>, AvError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| AvError::Csv(e.to_string()))?.clone();
    let expected = ["label", "video_onset_s", "audio_onset_s"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(AvError::Csv(format!(
            "expected header '{}', got '{}'",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize::<OnsetRow>()
        .map(|row| {
            row.map(|r| OnsetPair {
                label: r.label,
                video_onset: r.video_onset_s,
                audio_onset: r.audio_onset_s,
            })
            .map_err(|e| AvError::Csv(e.to_string()))
        })
        .collect()
}

pub fn write_onsets_csv(pairs: &[OnsetPair]) -> String {
    let mut out = String::from("label,video_onset_s,audio_onset_s\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{}\n",
            p.label,
            format_seconds(p.video_onset),
            format_seconds(p.audio_onset)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tb() -> Timebase {
        Timebase::default()
    }

    fn pairs_with_offset(frames: f64, n: usize) -> Vec<OnsetPair> {
        (0..n)
            .map(|i| {
                let v = 1.0 + i as f64 * 0.73;
                OnsetPair {
                    label: format!("e{i}"),
                    video_onset: v,
                    audio_onset: v + frames / 25.0,
                }
            })
            .collect()
    }

    #[test]
    fn constant_half_frame_offset() {
        let est = estimate_offset(&pairs_with_offset(5.5, 6), &tb()).unwrap();
        assert!((est.offset_frames - 5.5).abs() < 1e-9);
        assert!(est.spread_frames < 1e-9);
        assert!(est.is_constant);
        assert_eq!(est.flag(), None);
    }

    #[test]
    fn zero_offset() {
        let est = estimate_offset(&pairs_with_offset(0.0, 3), &tb()).unwrap();
        assert_eq!(est.offset_frames, 0.0);
    }

    #[test]
    fn too_few_pairs() {
        assert!(matches!(
            estimate_offset(&pairs_with_offset(1.0, 1), &tb()),
            Err(AvError::InsufficientPairs(1))
        ));
    }

    #[test]
    fn negative_onset_rejected() {
        let mut p = pairs_with_offset(1.0, 3);
        p[1].video_onset = -0.1;
        assert!(matches!(estimate_offset(&p, &tb()), Err(AvError::InvalidPair { .. })));
    }

    #[test]
    fn drifting_offset_flagged_and_refused() {
        let mut p = pairs_with_offset(5.0, 4);
        p[3].audio_onset += 2.0 / 25.0;
        let est = estimate_offset(&p, &tb()).unwrap();
        assert!(!est.is_constant);
        assert_eq!(est.flag(), Some("NON_CONSTANT_OFFSET"));
        assert!(matches!(
            build_advance_plan(&est),
            Err(AvError::NonConstantOffset { .. })
        ));
    }

    #[test]
    fn median_survives_one_bad_pair() {
        let mut p = pairs_with_offset(5.0, 5);
        p[2].audio_onset += 0.9 / 25.0;
        let est = estimate_offset(&p, &tb()).unwrap();
        assert!((est.offset_frames - 5.0).abs() < 1e-9);
    }

    fn est(offset: f64) -> OffsetEstimate {
        OffsetEstimate {
            offset_frames: offset,
            spread_frames: 0.0,
            is_constant: true,
        }
    }

    #[test]
    fn advance_rounding() {
        assert_eq!(build_advance_plan(&est(5.5)).unwrap().audio_advance_frames, 6);
        assert_eq!(build_advance_plan(&est(0.0)).unwrap().audio_advance_frames, 0);
        assert_eq!(build_advance_plan(&est(2.898)).unwrap().audio_advance_frames, 3);
        assert_eq!(build_advance_plan(&est(-0.4)).unwrap().audio_advance_frames, 0);
        assert!(matches!(build_advance_plan(&est(-2.0)), Err(AvError::AudioLeads(_))));
    }

    #[test]
    fn advance_five_frames_at_48k() {
        let audio = PcmAudio {
            sample_rate: 48_000,
            channels: 2,
            samples: (0..2 * 48_000).map(|i| (i % 1000) as i16 + 1).collect(),
        };
        let out = advance_audio(&audio, 5, &tb()).unwrap();
        assert_eq!(frames_to_samples(5, 48_000, &tb()), 9600);
        assert_eq!(out.samples.len(), audio.samples.len());
        assert_eq!(&out.samples[..audio.samples.len() - 19_200], &audio.samples[19_200..]);
        assert!(out.samples[audio.samples.len() - 19_200..].iter().all(|&s| s == 0));
    }

    #[test]
    fn zero_advance_is_identity() {
        let audio = PcmAudio {
            sample_rate: 48_000,
            channels: 1,
            samples: vec![1, 2, 3, 4],
        };
        assert_eq!(advance_audio(&audio, 0, &tb()).unwrap(), audio);
    }

    #[test]
    fn impulse_moves_by_exactly_point_two_seconds() {
        let mut audio = PcmAudio::silent(48_000, 2, 48_000 * 3);
        let at = 2 * 48_000 + 17;
        audio.samples[2 * at] = 1000;
        audio.samples[2 * at + 1] = -1000;
        let out = advance_audio(&audio, 5, &tb()).unwrap();
        let pos = out.samples.iter().position(|&s| s != 0).unwrap() / 2;
        let moved = (at - pos) as f64 / 48_000.0;
        assert!((moved - 0.2).abs() < 1e-12);
    }

    #[test]
    fn advance_longer_than_audio() {
        let audio = PcmAudio::silent(48_000, 2, 1000);
        assert!(matches!(
            advance_audio(&audio, 5, &tb()),
            Err(AvError::AdvanceTooLong { .. })
        ));
    }

    #[test]
    fn invalid_pcm() {
        let audio = PcmAudio {
            sample_rate: 48_000,
            channels: 2,
            samples: vec![0; 3],
        };
        assert!(advance_audio(&audio, 0, &tb()).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let audio = PcmAudio {
            sample_rate: 48_000,
            channels: 2,
            samples: vec![0, 1, -1, i16::MAX, i16::MIN, 7],
        };
        let bytes = audio.to_wav_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        assert_eq!(bytes.len(), 44 + 12);
        assert_eq!(PcmAudio::from_wav_bytes(&bytes).unwrap(), audio);
    }

    #[test]
    fn verify_loop_synchronized_input() {
        let out = verify_loop(|_| pairs_with_offset(0.0, 4), &est(0.0), 3, Tolerance::default(), &tb()).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.adjustments, 0);
        assert_eq!(out.residual_frames, 0.0);
    }

    #[test]
    fn verify_loop_readjusts_toward_residual() {
        // Initial estimate of 3 frames, true lag 5: residual 2 forces one +1 step.
        let run = |plan: &CompensationPlan| pairs_with_offset(5.0 - plan.audio_advance_frames as f64, 4);
        let out = verify_loop(run, &est(3.0), 5, Tolerance::default(), &tb()).unwrap();
        assert_eq!(out.plan.audio_advance_frames, 4);
        assert_eq!(out.adjustments, 1);
        assert_eq!(out.iterations, 2);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn verify_loop_gives_up() {
        let run = |_: &CompensationPlan| pairs_with_offset(9.0, 4);
        match verify_loop(run, &est(1.0), 3, Tolerance::default(), &tb()) {
            Err(AvError::NotConverged { history }) => assert_eq!(history.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn onset_csv_round_trip() {
        let pairs = pairs_with_offset(5.0, 3);
        let text = write_onsets_csv(&pairs);
        assert!(text.starts_with("label,video_onset_s,audio_onset_s\ne0,1.000000,1.200000\n"));
        let back = parse_onsets_csv(&text).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].label, "e0");
        assert!(parse_onsets_csv("a,b,c\n").is_err());
        assert!(parse_onsets_csv("label,video_onset_s,audio_onset_s\nx,1.0,zz\n").is_err());
    }

    proptest! {
        #[test]
        fn offset_is_linear_in_audio_shift(c in -0.5f64..0.5, base in 0.0f64..8.0) {
            let pairs = pairs_with_offset(base, 5);
            let shifted: Vec<OnsetPair> = pairs
                .iter()
                .map(|p| OnsetPair { audio_onset: p.audio_onset + c + 1.0, video_onset: p.video_onset + 1.0, ..p.clone() })
                .collect();
            let a = estimate_offset(&pairs, &tb()).unwrap().offset_frames;
            let b = estimate_offset(&shifted, &tb()).unwrap().offset_frames;
            prop_assert!((b - a - c * 25.0).abs() < 1e-9);
        }

        #[test]
        fn advance_preserves_length_and_tail(frames in 0u32..20, len in 1000usize..5000, ch in 1u16..3) {
            let samples: Vec<i16> = (0..len * ch as usize).map(|i| (i % 30000) as i16).collect();
            let audio = PcmAudio { sample_rate: 8000, channels: ch, samples };
            let shift = frames_to_samples(frames, 8000, &tb());
            prop_assume!(shift < len);
            let out = advance_audio(&audio, frames, &tb()).unwrap();
            prop_assert_eq!(out.samples.len(), audio.samples.len());
            let cut = shift * ch as usize;
            prop_assert_eq!(&out.samples[..audio.samples.len() - cut], &audio.samples[cut..]);
        }
    }
}

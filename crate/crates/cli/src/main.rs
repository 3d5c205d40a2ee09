use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use stimsync_core::av_offset::{
    advance_audio, build_advance_plan, estimate_offset, parse_onsets_csv, verify_step, write_onsets_csv, AvError,
    PcmAudio, VerifyStep,
};
use stimsync_core::encoding_check::{recommend_profile, validate_profile_at, EncodingProfile, Verdict};
use stimsync_core::fluency::{analyze_fluency, parse_observations, FluencyError, FluencyVerdict};
use stimsync_core::fsutil::write_atomic;
use stimsync_core::marker_transport::{
    finalize_session, ingest_gaze, spawn_session_writer, MarkerReceiver, MarkerSender, SessionEvent, TransportError,
};
use stimsync_core::playback_sim::{
    click_track, inject_fluency_defects, parse_capture_manifest, run_simulation, write_capture_manifest, AudioDelay,
    FluencyDefect, SimConfig, DEFAULT_AUDIO_DELAY_FRAMES, DEFAULT_CAMERA_PHASE, DEFAULT_START_DELAY,
};
use stimsync_core::register_log::{
    analyze_deltas, calibrate_from_sync_mark, compensate_register, estimate_capture_delay, parse_register,
    AudioPlanState, CompensationPlan, RegisterError, RegisterHeader,
};
use stimsync_core::timebase::{format_seconds, Timebase, Tolerance, DEFAULT_CAMERA_FPS, DEFAULT_VIDEO_FPS};

const SCHEMA_VERSION: u32 = 1;

/// Process exit codes.
mod exit {
    pub const OK: u8 = 0;
    pub const INPUT: u8 = 1;
    pub const MARGINAL: u8 = 3;
    pub const REJECT: u8 = 4;
    pub const NOT_CONVERGED: u8 = 5;
    pub const ORDER: u8 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "stimsync",
    version,
    about = "Playback timing checks and compensation for video stimuli"
)]
struct Cli {
    /// Video playback rate.
    #[arg(long, global = true, default_value_t = DEFAULT_VIDEO_FPS)]
    fps: f64,
    /// Rate of the camera filming the screen.
    #[arg(long, global = true, default_value_t = DEFAULT_CAMERA_FPS)]
    camera_fps: f64,
    #[arg(long, global = true, default_value_t = 1.0)]
    tolerance_frames: f64,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a playback session and write its artifacts.
    Simulate(SimulateArgs),
    /// Validate an encoding profile (JSON).
    CheckEncoding {
        profile: PathBuf,
        /// Also print a profile that clears the soft findings.
        #[arg(long)]
        recommend: bool,
    },
    /// Stalls, jumps and double exposures in a camera transcription.
    AnalyzeFluency {
        observations: PathBuf,
        /// Frames in the clip. Defaults to the observed duration.
        #[arg(long)]
        expected_frames: Option<u64>,
    },
    /// Tick deltas, stalls and, given captures, the capture delay.
    AnalyzeRegister {
        register: PathBuf,
        #[arg(long)]
        captures: Option<PathBuf>,
    },
    /// Advance a soundtrack by the measured audio lag.
    CompensateAudio {
        onsets: PathBuf,
        audio: PathBuf,
        /// Onsets re-measured with the current plan; readjusts it by one frame
        /// if the residual is outside tolerance.
        #[arg(long, requires = "plan")]
        verify_onsets: Option<PathBuf>,
        /// Plan being verified.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Shift register times onto the video clock using the sync mark.
    CompensateLog {
        register: PathBuf,
        captures: PathBuf,
        /// Run even though the audio has not been compensated yet.
        #[arg(long)]
        force: bool,
    },
    /// Record UDP markers and TCP gaze into a register file.
    CaptureSession {
        /// Address to receive markers on.
        #[arg(long, default_value = "0.0.0.0:15000")]
        markers: String,
        /// Gaze server to read from.
        #[arg(long)]
        gaze: Option<String>,
        /// Stop after this many seconds without markers or gaze.
        #[arg(long, default_value_t = 5.0)]
        idle_timeout: f64,
        #[arg(long, default_value = "session.txt")]
        file: String,
    },
    /// Send one marker.
    SendMarker {
        endpoint: String,
        id: u64,
        time: f64,
        label: String,
    },
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Player audio lag in frames.
    #[arg(long, default_value_t = DEFAULT_AUDIO_DELAY_FRAMES, conflicts_with = "audio_delay_range")]
    audio_delay_frames: f64,
    /// Draw the audio lag uniformly from MIN,MAX frames.
    #[arg(long, value_parser = parse_range)]
    audio_delay_range: Option<(f64, f64)>,
    /// Frames the source audio is already advanced by.
    #[arg(long, default_value_t = 0)]
    advance_frames: u32,
    #[arg(long, default_value_t = DEFAULT_START_DELAY)]
    start_delay: f64,
    #[arg(long, default_value_t = DEFAULT_START_DELAY)]
    timer_preroll: f64,
    /// Programmed cut times, seconds.
    #[arg(long = "cut", value_delimiter = ',', default_values_t = [1.0, 3.0, 5.0, 7.0, 9.0])]
    cuts: Vec<f64>,
    /// Sync screenshot times, seconds.
    #[arg(long = "sync", value_delimiter = ',', default_values_t = [0.1])]
    syncs: Vec<f64>,
    /// Held frame as FRAME:EXTRA, for the camera transcription.
    #[arg(long = "defect", value_parser = parse_defect)]
    defects: Vec<FluencyDefect>,
    #[arg(long, default_value_t = DEFAULT_CAMERA_PHASE)]
    camera_phase: f64,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn parse_defect(s: &str) -> Result<FluencyDefect, String> {
    let (f, h) = s.split_once(':').ok_or("expected FRAME:EXTRA")?;
    Ok(FluencyDefect {
        frame: f.trim().parse().map_err(|e| format!("{e}"))?,
        hold_extra_frames: h.trim().parse().map_err(|e| format!("{e}"))?,
    })
}

struct Ctx {
    tb: Timebase,
    tol: Tolerance,
    seed: u64,
    out: PathBuf,
    report: ReportFormat,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.path(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn emit(&self, command: &str, body: Value, text: &str) {
        match self.report {
            ReportFormat::Text => print!("{text}"),
            ReportFormat::Json => {
                let mut obj = json!({ "schema_version": SCHEMA_VERSION, "command": command });
                if let (Value::Object(dst), Value::Object(src)) = (&mut obj, body) {
                    dst.extend(src);
                }
                println!("{}", serde_json::to_string_pretty(&obj).expect("report serializes"));
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<u8> {
    let cfg = SimConfig {
        clip_duration: a.duration,
        timebase: ctx.tb,
        video_start_delay: a.start_delay,
        timer_preroll: a.timer_preroll,
        audio_delay: match a.audio_delay_range {
            Some((min, max)) => AudioDelay::Range { min, max },
            None => AudioDelay::Fixed(a.audio_delay_frames),
        },
        audio_advance_frames: a.advance_frames,
        cut_times: a.cuts.clone(),
        sync_times: a.syncs.clone(),
        camera_phase: a.camera_phase,
        rng_seed: ctx.seed,
        ..SimConfig::default()
    };
    let out = run_simulation(&cfg)?;
    let observations = inject_fluency_defects(&cfg, &a.defects)?;

    let files = [
        ctx.write("register.txt", out.register_log.to_text().as_bytes())?,
        ctx.write("captures.jsonl", write_capture_manifest(&out.captures).as_bytes())?,
        ctx.write("onsets.csv", write_onsets_csv(&out.onset_pairs()).as_bytes())?,
        ctx.write("observations.txt", observations.to_text().as_bytes())?,
        // Soundtrack as authored: one click per cut, aligned with the picture.
        ctx.write(
            "source.wav",
            &click_track(&out.video_onsets, cfg.clip_duration, 48_000, 1).to_wav_bytes()?,
        )?,
    ];
    let text = format!(
        "simulated {} s: {} register rows, {} captures, audio lag {:.3} frames, timer offset {} s\n{}",
        format_seconds(cfg.clip_duration),
        out.register_log.len(),
        out.captures.len(),
        out.audio_delay_frames,
        format_seconds(out.timer_offset),
        files
            .iter()
            .map(|f| format!("  wrote {}\n", f.display()))
            .collect::<String>(),
    );
    ctx.emit(
        "simulate",
        json!({
            "rows": out.register_log.len(),
            "captures": out.captures.len(),
            "audio_delay_frames": out.audio_delay_frames,
            "timer_offset_s": out.timer_offset,
            "files": files,
        }),
        &text,
    );
    Ok(exit::OK)
}

fn cmd_check_encoding(ctx: &Ctx, profile: &Path, recommend: bool) -> Result<u8> {
    let p = EncodingProfile::from_json(&read_text(profile)?)
        .with_context(|| format!("parsing profile {}", profile.display()))?;
    let report = validate_profile_at(&p, ctx.tb.video_fps);
    let rec = recommend.then(|| recommend_profile(&p, ctx.tb.video_fps));
    let mut text = format!("verdict: {}\n", report.verdict);
    for f in &report.findings {
        text.push_str(&format!("  [{:?}] {}: {}\n", f.severity, f.rule, f.message));
    }
    if let Some(r) = &rec {
        text.push_str(&format!("recommended:\n{}\n", r.to_json()));
    }
    let mut body = to_value(&report);
    if let Some(r) = &rec {
        body["recommended"] = to_value(r);
    }
    ctx.emit("check-encoding", body, &text);
    Ok(match report.verdict {
        Verdict::Ok => exit::OK,
        Verdict::Marginal => exit::MARGINAL,
        Verdict::Reject => exit::REJECT,
    })
}

fn cmd_analyze_fluency(ctx: &Ctx, path: &Path, expected: Option<u64>) -> Result<u8> {
    let seq = parse_observations(path, ctx.tb)?;
    let expected =
        expected.unwrap_or_else(|| (seq.observations.len() as f64 / seq.timebase.camera_ratio()).round() as u64);
    let report = match analyze_fluency(&seq, expected) {
        Err(e @ FluencyError::CorruptInput { .. }) => {
            eprintln!("error: {e}");
            return Ok(exit::ORDER);
        }
        other => other?,
    };
    let mut text = format!(
        "verdict: {}\nduration: {:.2} frames observed, {} expected\ndouble exposures: {}\n",
        match report.verdict {
            FluencyVerdict::Fluent => "FLUENT",
            FluencyVerdict::Degraded => "DEGRADED",
        },
        report.total_duration_frames,
        report.expected_duration_frames,
        report.double_exposure_count
    );
    if !report.stalls.is_empty() {
        text.push_str("stalls:\n  counter  held  excess\n");
        for s in &report.stalls {
            text.push_str(&format!(
                "  {:>7}  {:>4}  {:>6.2}\n",
                s.counter_value, s.held_camera_frames, s.excess_frames
            ));
        }
    }
    if !report.jumps.is_empty() {
        text.push_str("jumps:\n  from  to  skipped\n");
        for j in &report.jumps {
            text.push_str(&format!(
                "  {:>4}  {:>2}  {:>7}\n",
                j.from_counter, j.to_counter, j.skipped_count
            ));
        }
    }
    ctx.emit("analyze-fluency", to_value(&report), &text);
    Ok(match report.verdict {
        FluencyVerdict::Fluent => exit::OK,
        FluencyVerdict::Degraded => exit::MARGINAL,
    })
}

fn order_violation(e: &RegisterError) -> bool {
    matches!(
        e,
        RegisterError::NonMonotonic { .. } | RegisterError::DuplicateSyncMark { .. }
    )
}

fn load_register(ctx: &Ctx, path: &Path) -> Result<std::result::Result<stimsync_core::RegisterLog, u8>> {
    match parse_register(path, ctx.tb) {
        Ok(log) => Ok(Ok(log)),
        Err(e) if order_violation(&e) => {
            eprintln!("error: {}: {e}", path.display());
            Ok(Err(exit::ORDER))
        }
        Err(e) => Err(e).with_context(|| format!("reading register {}", path.display())),
    }
}

fn cmd_analyze_register(ctx: &Ctx, path: &Path, captures: Option<&Path>) -> Result<u8> {
    let log = match load_register(ctx, path)? {
        Ok(log) => log,
        Err(code) => return Ok(code),
    };
    let analysis = analyze_deltas(&log)?;
    let delay = match captures {
        Some(c) => Some(estimate_capture_delay(&log, &parse_capture_manifest(&read_text(c)?)?)?),
        None => None,
    };
    let mut text = format!(
        "rows: {}\nbaseline tick: {:.6} frames\nstalls: {}\n",
        log.len(),
        analysis.baseline_frames,
        analysis.stall_rows.len()
    );
    for s in &analysis.stall_rows {
        text.push_str(&format!(
            "  row {:>5} at {}  delta {:.6}  excess {:.6} frames\n",
            s.row_index,
            format_seconds(log.rows()[s.row_index].time),
            s.delta_frames,
            s.excess_frames
        ));
    }
    if let Some(d) = &delay {
        text.push_str(&format!(
            "capture delay: {:.6} frames ({} whole)\nlag distribution:\n",
            d.fractional_frames, d.truncated_frames
        ));
        for (lag, pct) in &d.distribution {
            text.push_str(&format!("  {lag:>3} frames  {pct:>5.1}%\n"));
        }
    }
    let mut body = json!({
        "rows": log.len(),
        "baseline_frames": analysis.baseline_frames,
        "stalls": to_value(&analysis.stall_rows),
    });
    if let Some(d) = &delay {
        body["capture_delay"] = to_value(d);
    }
    ctx.emit("analyze-register", body, &text);
    Ok(exit::OK)
}

fn cmd_compensate_audio(
    ctx: &Ctx,
    onsets: &Path,
    audio: &Path,
    verify: Option<&Path>,
    plan: Option<&Path>,
) -> Result<u8> {
    let source = PcmAudio::read_wav(audio).with_context(|| format!("reading {}", audio.display()))?;

    if let (Some(verify), Some(plan_path)) = (verify, plan) {
        let plan = CompensationPlan::from_json(&read_text(plan_path)?)
            .with_context(|| format!("parsing plan {}", plan_path.display()))?;
        let residual = estimate_offset(&parse_onsets_csv(&read_text(verify)?)?, &ctx.tb)?;
        let (code, next) = match verify_step(&plan, &residual, ctx.tol)? {
            VerifyStep::Converged => (exit::OK, plan),
            VerifyStep::Adjusted(next) => (exit::NOT_CONVERGED, next),
        };
        let advanced = advance_audio(&source, next.audio_advance_frames, &ctx.tb)?;
        let wav = ctx.write("audio_compensated.wav", &advanced.to_wav_bytes()?)?;
        let plan_file = ctx.write("plan.json", next.to_json().as_bytes())?;
        let text = format!(
            "residual: {:.3} frames ({})\nadvance: {} frames\n  wrote {}\n  wrote {}\n",
            residual.offset_frames,
            if code == exit::OK {
                "converged"
            } else {
                "readjusted, re-measure"
            },
            next.audio_advance_frames,
            wav.display(),
            plan_file.display()
        );
        ctx.emit(
            "compensate-audio",
            json!({
                "converged": code == exit::OK,
                "residual": to_value(&residual),
                "plan": to_value(&next),
            }),
            &text,
        );
        return Ok(code);
    }

    let pairs = parse_onsets_csv(&read_text(onsets)?)?;
    let est = estimate_offset(&pairs, &ctx.tb)?;
    let plan = match build_advance_plan(&est) {
        Ok(plan) => plan,
        Err(e @ (AvError::NonConstantOffset { .. } | AvError::AudioLeads(_))) => {
            let text = format!(
                "offset {:.3} frames, spread {:.3}: {e}\n",
                est.offset_frames, est.spread_frames
            );
            ctx.emit(
                "compensate-audio",
                json!({ "estimate": to_value(&est), "flag": est.flag(), "error": e.to_string() }),
                &text,
            );
            return Ok(exit::NOT_CONVERGED);
        }
        Err(e) => return Err(e.into()),
    };
    let advanced = advance_audio(&source, plan.audio_advance_frames, &ctx.tb)?;
    let wav = ctx.write("audio_compensated.wav", &advanced.to_wav_bytes()?)?;
    let plan_file = ctx.write("plan.json", plan.to_json().as_bytes())?;
    let text = format!(
        "offset: {:.3} frames (spread {:.3}) over {} pairs\nadvance: {} frames\n  wrote {}\n  wrote {}\n",
        est.offset_frames,
        est.spread_frames,
        pairs.len(),
        plan.audio_advance_frames,
        wav.display(),
        plan_file.display()
    );
    ctx.emit(
        "compensate-audio",
        json!({ "estimate": to_value(&est), "plan": to_value(&plan) }),
        &text,
    );
    Ok(exit::OK)
}

fn cmd_compensate_log(ctx: &Ctx, register: &Path, captures: &Path, force: bool) -> Result<u8> {
    let log = match load_register(ctx, register)? {
        Ok(log) => log,
        Err(code) => return Ok(code),
    };
    if log.header.audio_plan == AudioPlanState::Uncompensated && !force {
        eprintln!(
            "error: {} was recorded with uncompensated audio; compensate the audio first or pass --force",
            register.display()
        );
        return Ok(exit::ORDER);
    }
    let caps = parse_capture_manifest(&read_text(captures)?)?;
    let sync = caps
        .iter()
        .find(|c| c.label.starts_with("sync"))
        .context("capture manifest has no sync capture")?;
    let plan = calibrate_from_sync_mark(&log, sync)?;
    let comp = compensate_register(&log, &plan)?;
    let reg_file = ctx.write("register_compensated.txt", comp.log.to_text().as_bytes())?;
    let plan_file = ctx.write("plan.json", plan.to_json().as_bytes())?;
    let text = format!(
        "shift: {:.6} frames ({} s)\n{}\n  wrote {}\n  wrote {}\n",
        plan.register_shift_frames,
        format_seconds(plan.register_shift_frames / ctx.tb.video_fps),
        plan.provenance,
        reg_file.display(),
        plan_file.display()
    );
    ctx.emit(
        "compensate-log",
        json!({ "plan": to_value(&plan), "pre_roll_rows": comp.pre_roll_rows }),
        &text,
    );
    Ok(exit::OK)
}

fn cmd_capture_session(ctx: &Ctx, markers: &str, gaze: Option<&str>, idle: f64, file: &str) -> Result<u8> {
    if !(idle.is_finite() && idle > 0.0) {
        bail!("idle timeout must be positive");
    }
    let idle = std::time::Duration::from_secs_f64(idle);
    let mut rx = MarkerReceiver::bind(markers)?;
    let (events, writer) = spawn_session_writer();

    let gaze_thread = match gaze {
        Some(endpoint) => {
            let stream = ingest_gaze(endpoint, idle, idle)?;
            let events = events.clone();
            Some(std::thread::spawn(move || -> u64 {
                let mut stream = stream;
                for item in stream.by_ref() {
                    match item {
                        Ok(g) => {
                            let _ = events.send(SessionEvent::Gaze(g));
                        }
                        Err(TransportError::IdleTimeout(_)) => break,
                        Err(e) => {
                            eprintln!("gaze: {e}");
                            break;
                        }
                    }
                }
                stream.malformed()
            }))
        }
        None => None,
    };
    while let Some(m) = rx.recv_timeout(idle)? {
        events.send(SessionEvent::Marker(m)).expect("writer alive");
    }
    drop(events);
    let gaze_malformed = match gaze_thread {
        Some(t) => t.join().expect("gaze thread"),
        None => 0,
    };
    let log = writer.join().expect("writer thread");
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.path(file);
    let reg = finalize_session(&log, RegisterHeader::default(), ctx.tb, &path)?;
    let stats = rx.stats();
    let text = format!(
        "session: {} rows ({} markers, {} missing, {} out of order; {} malformed gaze records)\n  wrote {}\n",
        reg.len(),
        stats.received,
        stats.missing,
        stats.out_of_order,
        gaze_malformed,
        path.display()
    );
    ctx.emit(
        "capture-session",
        json!({
            "rows": reg.len(),
            "markers_received": stats.received,
            "markers_missing": stats.missing,
            "markers_out_of_order": stats.out_of_order,
            "markers_malformed": stats.malformed,
            "gaze_malformed": gaze_malformed,
            "file": path,
        }),
        &text,
    );
    Ok(if stats.out_of_order > 0 { exit::ORDER } else { exit::OK })
}

fn cmd_send_marker(ctx: &Ctx, endpoint: &str, id: u64, time: f64, label: &str) -> Result<u8> {
    let marker = stimsync_core::MarkerEvent::new(id, time, label)?;
    let mut tx = MarkerSender::connect(endpoint, std::time::Duration::from_millis(50))?;
    let spent = tx.send(&marker)?;
    ctx.emit(
        "send-marker",
        json!({ "marker": to_value(&marker), "send_us": spent.as_micros() as u64 }),
        &format!("sent {}", marker.encode()),
    );
    Ok(exit::OK)
}

fn run(cli: Cli) -> Result<u8> {
    let tb = Timebase::new(cli.fps, cli.camera_fps)?;
    let ctx = Ctx {
        tb,
        tol: Tolerance::new(cli.tolerance_frames)?,
        seed: cli.seed,
        out: cli.out,
        report: cli.report,
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::CheckEncoding { profile, recommend } => cmd_check_encoding(&ctx, profile, *recommend),
        Command::AnalyzeFluency {
            observations,
            expected_frames,
        } => cmd_analyze_fluency(&ctx, observations, *expected_frames),
        Command::AnalyzeRegister { register, captures } => cmd_analyze_register(&ctx, register, captures.as_deref()),
        Command::CompensateAudio {
            onsets,
            audio,
            verify_onsets,
            plan,
        } => cmd_compensate_audio(&ctx, onsets, audio, verify_onsets.as_deref(), plan.as_deref()),
        Command::CompensateLog {
            register,
            captures,
            force,
        } => cmd_compensate_log(&ctx, register, captures, *force),
        Command::CaptureSession {
            markers,
            gaze,
            idle_timeout,
            file,
        } => cmd_capture_session(&ctx, markers, gaze.as_deref(), *idle_timeout, file),
        Command::SendMarker {
            endpoint,
            id,
            time,
            label,
        } => cmd_send_marker(&ctx, endpoint, *id, *time, label),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::INPUT)
        }
    }
}

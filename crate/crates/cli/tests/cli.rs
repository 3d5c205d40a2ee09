use std::io::Write;
use std::net::{TcpListener, UdpSocket};
use std::path::Path;
use std::process::{Command, Output};
use std::time::Duration;

use serde_json::Value;

fn stimsync(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stimsync"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn micros(field: &str) -> i64 {
    let (s, frac) = field.split_once('.').unwrap();
    let whole: i64 = s.parse().unwrap();
    whole * 1_000_000 + frac.parse::<i64>().unwrap()
}

#[test]
fn simulate_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let o = stimsync(dir.path(), &["--out", "a", "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "register.txt",
        "captures.jsonl",
        "onsets.csv",
        "observations.txt",
        "source.wav",
    ] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    stimsync(dir.path(), &["--out", "b", "simulate"]);
    for f in ["register.txt", "captures.jsonl", "onsets.csv", "observations.txt"] {
        assert_eq!(read(&dir.path().join("a"), f), read(&dir.path().join("b"), f), "{f}");
    }
    assert_eq!(
        std::fs::read(dir.path().join("a/source.wav")).unwrap(),
        std::fs::read(dir.path().join("b/source.wav")).unwrap()
    );
}

#[test]
fn seed_changes_jitter_only() {
    let dir = tempfile::tempdir().unwrap();
    let a = json(&stimsync(dir.path(), &["--out", "a", "--report", "json", "simulate"]));
    let b = json(&stimsync(
        dir.path(),
        &["--out", "b", "--report", "json", "--seed", "9", "simulate"],
    ));
    assert_ne!(
        read(&dir.path().join("a"), "register.txt"),
        read(&dir.path().join("b"), "register.txt")
    );
    assert_eq!(a["audio_delay_frames"], b["audio_delay_frames"]);
    assert_eq!(a["timer_offset_s"], b["timer_offset_s"]);
    assert_eq!(a["schema_version"], 1);
}

#[test]
fn five_frame_delay_is_exactly_200ms() {
    let dir = tempfile::tempdir().unwrap();
    let o = stimsync(dir.path(), &["simulate", "--audio-delay-frames", "5"]);
    assert_eq!(code(&o), 0);
    let csv = read(dir.path(), "onsets.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("label,video_onset_s,audio_onset_s"));
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(micros(f[2]) - micros(f[1]), 200_000, "{line}");
        n += 1;
    }
    assert_eq!(n, 5);
}

fn write_profile(dir: &Path, name: &str, width: u32, height: u32, kbps: f64) {
    let body = format!(
        r#"{{"width":{width},"height":{height},"fps":25,"video_bitrate_max":{kbps},"bitrate_mode":"VBR",
            "two_pass":true,"soft_target":true,"audio_bitrate":192,"audio_rate":48000,"quality_factor":0.9}}"#
    );
    std::fs::write(dir.join(name), body).unwrap();
}

#[test]
fn check_encoding_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_profile(dir.path(), "good.json", 576, 480, 4000.0);
    write_profile(dir.path(), "hd.json", 1280, 720, 7000.0);
    write_profile(dir.path(), "hot.json", 576, 480, 9000.0);
    assert_eq!(code(&stimsync(dir.path(), &["check-encoding", "good.json"])), 0);
    let hd = stimsync(
        dir.path(),
        &["--report", "json", "check-encoding", "hd.json", "--recommend"],
    );
    assert_eq!(code(&hd), 3);
    let report = json(&hd);
    assert_eq!(report["verdict"], "MARGINAL");
    assert!(report["findings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["rule"] == "resolution"));
    assert_eq!(report["recommended"]["width"], 1080);
    assert_eq!(code(&stimsync(dir.path(), &["check-encoding", "hot.json"])), 4);
    assert_eq!(code(&stimsync(dir.path(), &["check-encoding", "missing.json"])), 1);
}

#[test]
fn analyze_fluency_reports_defect() {
    let dir = tempfile::tempdir().unwrap();
    stimsync(dir.path(), &["simulate", "--defect", "100:2", "--camera-phase", "0"]);
    let o = stimsync(
        dir.path(),
        &[
            "--report",
            "json",
            "analyze-fluency",
            "observations.txt",
            "--expected-frames",
            "250",
        ],
    );
    assert_eq!(code(&o), 3);
    let r = json(&o);
    assert_eq!(r["verdict"], "DEGRADED");
    assert_eq!(r["stalls"][0]["counter_value"], 100);
    assert_eq!(r["stalls"][0]["held_camera_frames"], 6.0);
    assert_eq!(r["stalls"][0]["excess_frames"], 2.0);
    assert_eq!(r["jumps"][0]["skipped_count"], 2);

    stimsync(dir.path(), &["--out", "clean", "simulate"]);
    assert_eq!(
        code(&stimsync(dir.path(), &["analyze-fluency", "clean/observations.txt"])),
        0
    );
}

#[test]
fn analyze_fluency_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("back.txt"), "0: 5\n1: 6\n2: 4\n").unwrap();
    assert_eq!(code(&stimsync(dir.path(), &["analyze-fluency", "back.txt"])), 6);
    std::fs::write(dir.path().join("bad.txt"), "0: 5\n1: 6|8\n").unwrap();
    let o = stimsync(dir.path(), &["analyze-fluency", "bad.txt"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn analyze_register_table_excerpt() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/table_excerpt.txt");
    std::fs::copy(golden, dir.path().join("reg.txt")).unwrap();
    let r = json(&stimsync(
        dir.path(),
        &["--report", "json", "analyze-register", "reg.txt"],
    ));
    let stalls = r["stalls"].as_array().unwrap();
    assert_eq!(stalls.len(), 1);
    assert!((stalls[0]["excess_frames"].as_f64().unwrap() - 2.89).abs() < 0.01);

    std::fs::write(dir.path().join("back.txt"), "0.5 TICK\n0.4 TICK\n").unwrap();
    assert_eq!(code(&stimsync(dir.path(), &["analyze-register", "back.txt"])), 6);
}

#[test]
fn compensate_log_enforces_order() {
    let dir = tempfile::tempdir().unwrap();
    stimsync(dir.path(), &["simulate"]);
    let refused = stimsync(
        dir.path(),
        &["--out", "c", "compensate-log", "register.txt", "captures.jsonl"],
    );
    assert_eq!(code(&refused), 6);
    assert!(!dir.path().join("c/register_compensated.txt").exists());

    let forced = stimsync(
        dir.path(),
        &[
            "--out",
            "c",
            "compensate-log",
            "register.txt",
            "captures.jsonl",
            "--force",
        ],
    );
    assert_eq!(code(&forced), 0);
    let first = read(&dir.path().join("c"), "register_compensated.txt");
    stimsync(
        dir.path(),
        &[
            "--out",
            "c",
            "compensate-log",
            "register.txt",
            "captures.jsonl",
            "--force",
        ],
    );
    assert_eq!(read(&dir.path().join("c"), "register_compensated.txt"), first);

    stimsync(dir.path(), &["--out", "adv", "simulate", "--advance-frames", "5"]);
    let ok = stimsync(
        dir.path(),
        &[
            "--out",
            "adv",
            "compensate-log",
            "adv/register.txt",
            "adv/captures.jsonl",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(read(&dir.path().join("adv"), "register_compensated.txt").contains("# audio_plan: advanced 5"));
}

#[test]
fn compensate_log_recovers_start_delay() {
    let dir = tempfile::tempdir().unwrap();
    stimsync(
        dir.path(),
        &[
            "--report",
            "json",
            "simulate",
            "--start-delay",
            "0.35",
            "--advance-frames",
            "5",
        ],
    );
    let r = json(&stimsync(
        dir.path(),
        &["--report", "json", "compensate-log", "register.txt", "captures.jsonl"],
    ));
    // Timer runs 0.35 - 0.251793 s ahead of the video clock.
    let truth = -(0.35 - 0.251793) * 25.0;
    let shift = r["plan"]["register_shift_frames"].as_f64().unwrap();
    assert!(shift <= truth + 1e-3 && shift > truth - 1.0, "{shift} vs {truth}");
}

#[test]
fn compensate_audio_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    stimsync(dir.path(), &["simulate", "--audio-delay-frames", "6"]);
    let r = json(&stimsync(
        dir.path(),
        &[
            "--out",
            "fix",
            "--report",
            "json",
            "compensate-audio",
            "onsets.csv",
            "source.wav",
        ],
    ));
    assert_eq!(r["plan"]["audio_advance_frames"], 6);
    assert!(dir.path().join("fix/audio_compensated.wav").exists());

    // Replay with the plan applied: residual zero, converged.
    stimsync(
        dir.path(),
        &[
            "--out",
            "replay",
            "simulate",
            "--audio-delay-frames",
            "6",
            "--advance-frames",
            "6",
        ],
    );
    let v = stimsync(
        dir.path(),
        &[
            "--out",
            "fix",
            "compensate-audio",
            "onsets.csv",
            "source.wav",
            "--verify-onsets",
            "replay/onsets.csv",
            "--plan",
            "fix/plan.json",
        ],
    );
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stdout));

    // A plan that under-corrects by two frames is moved one frame.
    std::fs::write(
        dir.path().join("short.json"),
        r#"{"register_shift_frames":0.0,"audio_advance_frames":4,"provenance":"manual"}"#,
    )
    .unwrap();
    stimsync(
        dir.path(),
        &[
            "--out",
            "short",
            "simulate",
            "--audio-delay-frames",
            "6",
            "--advance-frames",
            "4",
        ],
    );
    let s = stimsync(
        dir.path(),
        &[
            "--out",
            "re",
            "--report",
            "json",
            "compensate-audio",
            "onsets.csv",
            "source.wav",
            "--verify-onsets",
            "short/onsets.csv",
            "--plan",
            "short.json",
        ],
    );
    assert_eq!(code(&s), 5);
    assert_eq!(json(&s)["plan"]["audio_advance_frames"], 5);
}

#[test]
fn drifting_offset_is_not_compensated() {
    let dir = tempfile::tempdir().unwrap();
    stimsync(dir.path(), &["simulate"]);
    std::fs::write(
        dir.path().join("drift.csv"),
        "label,video_onset_s,audio_onset_s\na,1.000000,1.100000\nb,2.000000,2.200000\nc,3.000000,3.300000\n",
    )
    .unwrap();
    let o = stimsync(
        dir.path(),
        &["--report", "json", "compensate-audio", "drift.csv", "source.wav"],
    );
    assert_eq!(code(&o), 5);
    assert_eq!(json(&o)["flag"], "NON_CONSTANT_OFFSET");
}

#[test]
fn capture_session_records_markers_and_gaze() {
    let dir = tempfile::tempdir().unwrap();
    let port = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("127.0.0.1:{port}");
    let gaze = TcpListener::bind("127.0.0.1:0").unwrap();
    let gaze_addr = gaze.local_addr().unwrap().to_string();
    let server = std::thread::spawn(move || {
        let (mut s, _) = gaze.accept().unwrap();
        s.write_all(b"GAZE 0.050000 0.500 0.500\nGAZE 0.150000 0.400 0.600\nGAZE 9.0 1.2 0.5\n")
            .unwrap();
        std::thread::sleep(Duration::from_millis(1500));
    });

    let child = Command::new(env!("CARGO_BIN_EXE_stimsync"))
        .current_dir(dir.path())
        .args([
            "--report",
            "json",
            "capture-session",
            "--markers",
            &endpoint,
            "--gaze",
            &gaze_addr,
            "--idle-timeout",
            "1",
        ])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(300));
    for (id, t, label) in [("0", "0.1", "sync_start"), ("1", "0.2", "cut01")] {
        let o = stimsync(dir.path(), &["send-marker", &endpoint, id, t, label]);
        assert_eq!(code(&o), 0);
    }
    let out = child.wait_with_output().unwrap();
    server.join().unwrap();
    assert_eq!(code(&out), 0);
    let r = json(&out);
    assert_eq!(r["markers_received"], 2);
    assert_eq!(r["gaze_malformed"], 1);
    let text = read(dir.path(), "session.txt");
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows,
        vec![
            "0.050000 TICK gaze:0.500,0.500",
            "0.100000 SYNC_MARK sync_start",
            "0.150000 TICK gaze:0.400,0.600",
            "0.200000 CUT_MARK cut01",
        ]
    );
}

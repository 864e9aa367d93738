use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pianoflow::midi::ClipFile;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pianoflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json report")
}

/// A tiny but complete configuration rooted in `dir`.
fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "data": {"n_clips": 3, "clip_seconds": 2.0, "held_out": 1},
        "stage1": {
            "c_a": 4, "width": 4, "enc_layers": 1, "steps": 4, "batch": 2, "crop_frames": 16,
            "harmonic": {"channels": 4, "d_p": 4, "queries": 2, "c_mid": 4, "layers": 1,
                         "use_pitch_pos": true, "use_time_pos": true}
        },
        "stage2": {
            "spatial_width": 8, "widths": [8, 16], "cond_width": 8, "time_dim": 8, "d_k": 8,
            "gate_hidden": 4, "c_a": 4, "enc_width": 4, "steps": 3, "batch": 2, "crop_frames": 16,
            "n_steps": 4
        },
        "paths": {
            "data_dir": dir.join("data"),
            "stage1": dir.join("s1.pfw"),
            "stage2": dir.join("s2.pfw"),
            "out_dir": dir.join("out")
        },
        "future_option": 1
    });
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn trained(dir: &Path) -> String {
    let cfg = write_config(dir);
    let c = cfg.to_str().unwrap().to_string();
    for cmd in ["synth-data", "train-stage1", "train-stage2"] {
        let out = run(&["--config", &c, "--json", cmd]);
        json(&out);
    }
    c
}

#[test]
fn pipeline_generate_stream_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained(dir.path());
    assert!(dir.path().join("data/clip_002.clip").exists());

    let gen = dir.path().join("gen.clip");
    let report = json(&run(&["--config", &c, "--json", "generate", "--frames", "240", "--out", gen.to_str().unwrap()]));
    assert_eq!(report["frames"], 240);
    assert!(report["rtf"].as_f64().unwrap() > 0.0);
    assert_eq!(ClipFile::load(&gen).unwrap().motion.len(), 240);

    let streamed = dir.path().join("stream.clip");
    let report = json(&run(&["--config", &c, "--json", "stream", "--frames", "240", "--out", streamed.to_str().unwrap()]));
    assert!(report["rtf"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::read(&gen).unwrap(), std::fs::read(&streamed).unwrap());

    let reference = dir.path().join("out/reference.clip");
    let report = json(&run(&[
        "--config", &c, "--json", "evaluate", "--pred", reference.to_str().unwrap(), "--gt", reference.to_str().unwrap(),
    ]));
    for key in ["pd_left", "pd_right", "smooth_left", "smooth_right", "fde_left", "fde_right"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key}");
    }
    assert!(report["rtf"].is_null());

    let report = json(&run(&[
        "--config", &c, "--json", "evaluate", "--pred", gen.to_str().unwrap(), "--gt", reference.to_str().unwrap(),
        "--rtf", "0.5",
    ]));
    assert_eq!(report["rtf"], 0.5);
    assert!(report["pd_left"].as_f64().unwrap() > 0.0);
}

#[test]
fn stream_emits_one_record_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained(dir.path());
    let out = run(&["--config", &c, "stream", "--frames", "900", "--records", "-"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = 4 + 96 * 4;
    assert_eq!(out.stdout.len(), 900 * rec);
    for (i, r) in out.stdout.chunks(rec).enumerate() {
        assert_eq!(u32::from_le_bytes(r[..4].try_into().unwrap()) as usize, i);
    }
    // Human report moves to stderr when stdout carries records.
    assert!(String::from_utf8_lossy(&out.stderr).contains("rtf"));

    let file = dir.path().join("frames.bin");
    let out = run(&["--config", &c, "stream", "--frames", "900", "--swf", "--records", file.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::metadata(&file).unwrap().len() as usize, 900 * rec);
}

#[test]
fn unknown_keys_warn_but_do_not_fail() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path());
    let out = run(&["--config", c.to_str().unwrap(), "synth-data"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("future_option"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--bogus"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "stage1": {"width": 0}, "data": {"n_clips": 0}}"#).unwrap();
    let out = run(&["--config", bad.to_str().unwrap(), "synth-data"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage1.width") && err.contains("data.n_clips"), "{err}");

    let missing = dir.path().join("missing.json");
    std::fs::write(&missing, r#"{"data": {}}"#).unwrap();
    let out = run(&["--config", missing.to_str().unwrap(), "synth-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let c = write_config(dir.path());
    let out = run(&["--config", c.to_str().unwrap(), "generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

fn vlq(mut v: u32) -> Vec<u8> {
    let mut out = vec![(v & 0x7f) as u8];
    v >>= 7;
    while v > 0 {
        out.insert(0, (v & 0x7f) as u8 | 0x80);
        v >>= 7;
    }
    out
}

#[test]
fn parse_midi_summarizes_and_writes_a_clip() {
    let mut track = Vec::new();
    track.extend(vlq(0));
    track.extend([0x90, 60, 100]);
    track.extend(vlq(480));
    track.extend([0x80, 60, 0]);
    track.extend(vlq(0));
    track.extend([0xff, 0x2f, 0x00]);
    let mut smf = b"MThd".to_vec();
    smf.extend(6u32.to_be_bytes());
    smf.extend([0, 0, 0, 1, 0x01, 0xe0]);
    smf.extend(b"MTrk");
    smf.extend((track.len() as u32).to_be_bytes());
    smf.extend(track);

    let dir = tempfile::tempdir().unwrap();
    let mid = dir.path().join("one.mid");
    std::fs::write(&mid, &smf).unwrap();
    let clip = dir.path().join("one.clip");
    let report = json(&run(&["--json", "parse-midi", mid.to_str().unwrap(), "--out", clip.to_str().unwrap()]));
    assert_eq!(report["notes"], 1);
    assert_eq!(report["frames"], 15);
    assert!((report["duration_seconds"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let roll = ClipFile::load(&clip).unwrap().roll.unwrap();
    assert_eq!(roll.len(), 15);
    assert!((0..15).all(|f| roll.is_active(f, 60 - 21)));

    std::fs::write(&mid, b"MThx\0\0\0\x06").unwrap();
    let out = run(&["parse-midi", mid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

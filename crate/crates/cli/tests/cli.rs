use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use tinylm::session::protocol::{self, Frame};
use tinylm::session::{Command as SessionCommand, Event};

fn tinylm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinylm")).args(args).output().unwrap()
}

fn train(out: &Path, steps: &str) -> Output {
    tinylm(&[
        "train", "--corpus", "shakespeare", "--preset", "tiny-2M", "--steps", steps, "--seed", "7", "--batch", "2",
        "--out", out.to_str().unwrap(), "--log-every", "0",
    ])
}

#[test]
fn training_is_byte_reproducible_and_the_model_is_usable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.llmc"), dir.path().join("b.llmc"));
    for path in [&a, &b] {
        let out = train(path, "200");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let model = a.to_str().unwrap();
    let gen = || tinylm(&["generate", "--model", model, "--prompt", "ROMEO:", "--greedy", "-n", "40"]);
    let (g1, g2) = (gen(), gen());
    assert!(g1.status.success());
    assert_eq!(g1.stdout, g2.stdout);
    assert_eq!(String::from_utf8(g1.stdout).unwrap().trim_end_matches('\n').chars().count(), 40);

    let eval = tinylm(&["eval", "--model", model, "--corpus", "shakespeare"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let doc = String::from_utf8(eval.stdout).unwrap();
    let report: serde_json::Value = serde_json::from_str(&doc).unwrap();
    for key in ["charset_validity", "grade", "holdout_loss", "holdout_perplexity", "memorization_rate"] {
        assert!(report.get(key).is_some(), "{key} missing from {doc}");
    }
    // canonical: keys sorted, so re-serialising changes nothing
    assert_eq!(doc.trim_end(), serde_json::to_string(&report).unwrap());
}

#[test]
fn continuing_from_a_checkpoint_adds_steps() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.llmc");
    let more = dir.path().join("more.llmc");
    assert!(train(&base, "3").status.success());
    let out = tinylm(&[
        "train", "--corpus", "stories", "--model", base.to_str().unwrap(), "--steps", "2", "--batch", "2",
        "--out", more.to_str().unwrap(), "--log-every", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = tinylm::training::checkpoint::import(&std::fs::read(&more).unwrap()).unwrap();
    assert_eq!(ckpt.step, 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step     5"));
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.llmc");
    std::fs::write(&junk, b"LLMCKPT1 but not really").unwrap();
    let cases: [&[&str]; 5] = [
        &["train"],
        &["frobnicate"],
        &["train", "--corpus", "no-such-corpus-anywhere", "--steps", "1"],
        &["generate", "--model", junk.to_str().unwrap()],
        &["train", "--corpus", "stories", "--preset", "huge-9B"],
    ];
    for args in cases {
        let out = tinylm(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(tinylm(&["--help"]).status.code(), Some(0));
    let gen = tinylm(&["generate", "--model", junk.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&gen.stderr).contains("format error"));
}

#[test]
fn stdio_server_speaks_the_framed_protocol() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tinylm"))
        .args(["serve", "--stdio", "--pretrained-dir", "/nonexistent"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut input = Vec::new();
    for cmd in [SessionCommand::ListPresets, SessionCommand::Pause, SessionCommand::Shutdown] {
        protocol::write_frame(&mut input, &protocol::encode_command(&cmd)).unwrap();
    }
    child.stdin.take().unwrap().write_all(&input).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let mut cursor = out.stdout.as_slice();
    let mut events = Vec::new();
    while let Frame::Data(doc) = protocol::read_frame(&mut cursor).unwrap() {
        events.push(protocol::decode_event(&doc).unwrap());
    }
    assert_eq!(events.len(), 3);
    assert!(matches!(&events[0].event, Event::PresetList { presets, pretrained } if presets.len() == 2 && pretrained.is_empty()));
    assert_eq!(events[1].event.error_code(), Some(tinylm::session::ErrorCode::IllegalState));
    assert_eq!(events[2].event, Event::Closed);
}

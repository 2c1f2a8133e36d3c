use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scoresing"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("some stderr");
    serde_json::from_str::<Value>(last).expect("JSON error")["error"].clone()
}

fn tiny_train_config(dir: &Path, corpus: &Path) -> String {
    let cfg = serde_json::json!({
        "steps": 2,
        "crop_words": 1,
        "log_every": 1,
        "corpus": corpus,
        "model": {
            "encoder": {"hidden": 8, "fft_blocks": 1, "ffn_filter": 16},
            "length": {"hidden": 8, "conv_layers": 1},
            "denoiser": {"layers": 2, "residual_channels": 8},
            "mel": {"decoder_fft_blocks": 1, "postnet": {"layers": 2, "residual_channels": 8}},
            "diffusion_steps": 10
        }
    });
    let path = dir.join("train.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let corpus = p("corpus");
    ok(&[
        "gen-corpus", "--out", &corpus, "--seed", "3",
        "--set", "songs=3", "--set", "test_songs=1", "--set", "words_max=3",
    ]);
    let cfg = tiny_train_config(dir.path(), Path::new(&corpus));

    let out = run(&["train", "--config", &cfg, "--out", &p("s1.ckpt")]);
    assert!(!out.status.success(), "--seed is mandatory");
    assert_eq!(stderr_error(&out)["kind"], "usage");

    let out = ok(&["train", "--config", &cfg, "--seed", "1", "--out", &p("s1.ckpt")]);
    let logs: Vec<Value> = String::from_utf8_lossy(&out.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[0]["terms"].as_object().unwrap().len(), 4);

    let init = format!("init_checkpoint={}", p("s1.ckpt"));
    ok(&["train", "--config", &cfg, "--seed", "1", "--set", "stage=2", "--set", &init, "--out", &p("s2.ckpt")]);

    let score = std::fs::read_dir(dir.path().join("corpus/test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "json"))
        .unwrap();
    let infer = |seed: &str| {
        ok(&[
            "infer", "--checkpoint", &p("s2.ckpt"), "--score", score.to_str().unwrap(),
            "--seed", seed, "--svg", &p("out.svg"),
        ])
        .stdout
    };
    let a = infer("4");
    assert_eq!(a, infer("4"));
    let v: Value = serde_json::from_slice(&a).unwrap();
    let frames: u64 = v["predicted_word_durations"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).sum();
    assert_eq!(v["f0"].as_array().unwrap().len() as u64, frames);
    assert_eq!(v["spectral"].as_array().unwrap().len() as u64, frames);
    assert!(std::fs::read_to_string(p("out.svg")).unwrap().starts_with("<svg"));

    std::fs::write(p("infer.json"), &a).unwrap();
    ok(&["plot", "--input", &p("infer.json"), "--svg", &p("plot.svg"), "--title", "t"]);
    assert!(std::fs::read_to_string(p("plot.svg")).unwrap().contains("semitones"));

    let out = ok(&["eval", "--checkpoint", &p("s2.ckpt"), "--corpus", &corpus]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let vde = report["vde"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&vde));
    assert!(report["mcd_lite"].as_f64().unwrap() >= 0.0);
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let cfg = tiny_train_config(dir.path(), &missing);
    let out = run(&["train", "--config", &cfg, "--seed", "0", "--out", "/dev/null"]);
    assert_eq!(stderr_error(&out)["kind"], "config");

    let out = run(&["train", "--seed", "0", "--out", "x", "--set", "uv_diffusion=false", "--set", "f0_diffusion=false"]);
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("conflicting"));

    let out = run(&["gen-corpus", "--out", "x", "--seed", "0", "--set", "no_such_field=1"]);
    assert_eq!(stderr_error(&out)["kind"], "config");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"words\": 3}").unwrap();
    let out = run(&[
        "infer", "--checkpoint", "missing.ckpt", "--score", bad.to_str().unwrap(), "--seed", "0",
    ]);
    assert!(!stderr_error(&out)["message"].as_str().unwrap().is_empty());
}

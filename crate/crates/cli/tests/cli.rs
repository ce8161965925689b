use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dacse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacse")).args(args).output().expect("spawn dacse")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = dacse(args);
    assert!(
        out.status.success(),
        "dacse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn version_lists_formats() {
    let out = dacse(&["--version"]);
    assert!(out.status.success());
    let long = dacse(&["version"]);
    assert_eq!(long.status.code(), Some(2));
    let text = String::from_utf8(dacse(&["-V"]).stdout).unwrap();
    assert!(text.contains("0.1.0"));
}

#[test]
fn usage_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = dacse(&["degrade", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--clean-dir"));
    assert!(!out.exists());
    assert_eq!(dacse(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dacse(&["inspect", "x", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    ok(&["synth", "--out", s(&dir.path().join("w")), "--clips", "2", "--seconds", "0.2"]);
    let out = dir.path().join("pairs");
    let r = dacse(&[
        "degrade",
        "--clean-dir",
        s(&empty),
        "--assets",
        s(&dir.path().join("w/assets/assets.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(".dacse"))
        .collect();
    assert!(leftovers.is_empty());
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"nothing").unwrap();
    assert_eq!(dacse(&["inspect", s(&junk)]).status.code(), Some(1));
}

#[test]
fn degrade_is_reproducible_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    ok(&["synth", "--out", s(&w), "--clips", "6", "--seconds", "0.4", "--seed", "3"]);
    let assets = w.join("assets/assets.jsonl");
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(&[
            "degrade",
            "--clean-dir",
            s(&w.join("clean")),
            "--assets",
            s(&assets),
            "--out",
            s(&out),
            "--seed",
            "7",
            "--jobs",
            jobs,
        ]);
        tree_bytes(&out)
    };
    let a = run("a", "1");
    assert_eq!(a.len(), 13);
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "4"));
    let other = {
        let out = dir.path().join("d");
        ok(&["degrade", "--clean-dir", s(&w.join("clean")), "--assets", s(&assets), "--out", s(&out), "--seed", "8"]);
        tree_bytes(&out)
    };
    assert_ne!(a, other);
}

/// The whole pipeline on a toy corpus with a tiny model.
#[test]
fn end_to_end_walkthrough() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["synth", "--out", s(&p("w")), "--clips", "12", "--seconds", "0.5", "--seed", "1"]);
    let clean = p("w/clean");
    let assets = p("w/assets/assets.jsonl");

    let books = p("codec.rvq");
    let info = ok(&["codec-train", "--clean-dir", s(&clean), "--out", s(&books), "--iters", "3"]);
    assert_eq!(info["n_codebooks"], 4);
    let ins = ok(&["inspect", s(&books)]);
    assert_eq!(ins["kind"], "codebooks");
    assert_eq!(ins["codebook_size"], 64);

    ok(&["degrade", "--clean-dir", s(&clean), "--assets", s(&assets), "--out", s(&p("pairs"))]);
    let ds = p("pairs.bin");
    let t = ok(&["tokenize", "--pairs", s(&p("pairs/manifest.jsonl")), "--codec", s(&books), "--out", s(&ds)]);
    assert_eq!(t["records"], 12);
    let ins = ok(&["inspect", s(&ds)]);
    assert_eq!(ins["kind"], "dataset");
    assert_eq!(ins["n_codebooks"], 4);
    assert_eq!(ins["codebook_size"], 64);
    assert_eq!(ins["vocab_size"], 4 * 64 + 4);
    assert_eq!(ins["frame_rate_mhz"], 86132);
    assert_eq!(ins["n_records"], 12);

    std::fs::write(p("build.toml"), "heldout_fraction = 0.2\nstage2_kinds = [\"noise\", \"packet_loss\"]\n").unwrap();
    let b = ok(&[
        "dataset-build",
        "--clean-dir",
        s(&clean),
        "--assets",
        s(&assets),
        "--codec",
        s(&books),
        "--out",
        s(&p("data")),
        "--config",
        s(&p("build.toml")),
    ]);
    assert_eq!(b["clips"], 12);

    let model = serde_json::json!({
        "vocab_size": 260, "d_model": 16, "n_layers": 1, "n_heads": 2, "n_kv_heads": 2,
        "d_ff": 32, "context_len": 512, "rope_theta": 100000.0, "profile": "tiny"
    });
    std::fs::write(p("model.json"), model.to_string()).unwrap();
    std::fs::write(
        p("s1.toml"),
        "stage = \"stage1\"\nsteps = 6\nbatch_tokens = 1200\neval_every = 3\n[optim]\nlr = 0.003\nwarmup_steps = 2\n",
    )
    .unwrap();
    let s1 = p("s1.ckpt");
    let r = ok(&[
        "train",
        "--data",
        s(&p("data")),
        "--plan",
        s(&p("s1.toml")),
        "--out",
        s(&s1),
        "--model-config",
        s(&p("model.json")),
    ]);
    assert_eq!(r["step"], 6);
    let tel = std::fs::read_to_string(p("s1.ckpt.telemetry.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(tel.lines().next().unwrap()).unwrap();
    for key in ["step", "stage", "task", "loss", "tokens"] {
        assert!(first.get(key).is_some(), "telemetry lacks {key}");
    }

    std::fs::write(
        p("s2.toml"),
        "stage = \"stage2\"\ntask_order = [\"packet_loss\", \"noise\"]\nsteps_per_task = 2\nbatch_tokens = 1200\neval_every = 2\n",
    )
    .unwrap();
    let r2 = dacse(&["train", "--data", s(&p("data")), "--plan", s(&p("s2.toml")), "--out", s(&p("s2.ckpt"))]);
    assert_eq!(r2.status.code(), Some(1), "stage2 without a parent must fail");
    ok(&[
        "train",
        "--data",
        s(&p("data")),
        "--plan",
        s(&p("s2.toml")),
        "--out",
        s(&p("s2.ckpt")),
        "--parent",
        s(&s1),
    ]);
    let ins = ok(&["inspect", s(&p("s2.ckpt"))]);
    assert_eq!(ins["kind"], "checkpoint");
    assert_eq!(ins["meta"]["stage"], "stage2");
    let parent = ok(&["inspect", s(&s1)]);
    assert_eq!(ins["meta"]["parent_sha256"], parent["sha256"]);

    let est = p("est");
    std::fs::create_dir(&est).unwrap();
    let noisy = p("pairs/noisy/00000.wav");
    let rep = ok(&[
        "enhance",
        "--in",
        s(&noisy),
        "--out",
        s(&est.join("00000.wav")),
        "--ckpt",
        s(&p("s2.ckpt")),
        "--codec",
        s(&books),
        "--chunk-s",
        "0.25",
    ]);
    assert_eq!(rep["input_samples"], rep["output_samples"]);
    assert!(rep["chunks"].as_array().unwrap().len() >= 2);
    let again = p("again.wav");
    ok(&["enhance", "--in", s(&noisy), "--out", s(&again), "--ckpt", s(&p("s2.ckpt")), "--codec", s(&books), "--chunk-s", "0.25"]);
    assert_eq!(std::fs::read(est.join("00000.wav")).unwrap(), std::fs::read(&again).unwrap());
    let sampled = ok(&[
        "enhance", "--in", s(&noisy), "--out", s(&p("sampled.wav")), "--ckpt", s(&p("s2.ckpt")), "--codec", s(&books), "--temp", "0.8",
        "--top-k", "5",
    ]);
    assert_eq!(sampled["policy"]["kind"], "sample");

    let refs = p("refs");
    std::fs::create_dir(&refs).unwrap();
    std::fs::copy(p("pairs/clean/00000.wav"), refs.join("00000.wav")).unwrap();
    let report = p("report.json");
    ok(&[
        "eval",
        "--ref-dir",
        s(&refs),
        "--est-dir",
        s(&est),
        "--out",
        s(&report),
        "--codec",
        s(&books),
        "--png-dir",
        s(&p("png")),
    ]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["files"].as_array().unwrap().len(), 1);
    assert!(rep["aggregate"]["token_accuracy"].as_f64().unwrap() <= 1.0);
    assert!(p("png/00000_ref.png").exists());
    assert!(p("png/00000_est.png").exists());
}

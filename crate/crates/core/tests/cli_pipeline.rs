use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use archstamp::cli::RunManifest;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_archstamp"))
        .current_dir(dir)
        .env_remove("ARCHSTAMP_PROFILE")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(dir: &Path) {
    ok(dir, &["genkey", "--ns", "4", "--seed", "7", "--out", "k"]);
    ok(
        dir,
        &[
            "mark",
            "--key",
            "k.mk.json",
            "--seed",
            "7",
            "--out",
            "arch.json",
        ],
    );
}

#[test]
fn genkey_writes_both_keys_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["genkey", "--ns", "4", "--seed", "7", "--out", "k"],
    );
    for f in ["k.mk.json", "k.vk.json", "k.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("k.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m.subcommand, "genkey");
    assert_eq!(m.seed, 7);
    assert_eq!(m.outputs.len(), 2);
    let vk = std::fs::read_to_string(dir.path().join("k.vk.json")).unwrap();
    assert!(
        !vk.contains("edges"),
        "verification key must not reveal stamp edges"
    );
}

#[test]
fn full_pipeline_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(
        d,
        &[
            "trace",
            "--arch",
            "arch.json",
            "--seed",
            "1",
            "--out",
            "t.jsonl",
        ],
    );
    let out = ok(d, &["verify", "--vk", "k.vk.json", "--trace", "t.jsonl"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["verdict"], 1);
}

#[test]
fn attacked_pipeline_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for (i, attack) in [
        "shuffle",
        "useless-op",
        "useless-cell",
        "prune:0.9",
        "binarize",
        "noise:0.3",
    ]
    .iter()
    .enumerate()
    {
        let a = format!("a{i}.json");
        let t = format!("t{i}.jsonl");
        ok(
            d,
            &[
                "attack",
                "--arch",
                "arch.json",
                "--kind",
                attack,
                "--seed",
                "3",
                "--out",
                &a,
            ],
        );
        ok(d, &["trace", "--arch", &a, "--seed", "3", "--out", &t]);
        let out = bin(d, &["verify", "--vk", "k.vk.json", "--trace", &t]);
        assert_eq!(out.status.code(), Some(0), "{attack}");
    }
}

#[test]
fn unmarked_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["genkey", "--ns", "4", "--seed", "7", "--out", "k"]);
    ok(
        d,
        &["mark", "--unmarked", "--seed", "11", "--out", "other.json"],
    );
    ok(d, &["trace", "--arch", "other.json", "--out", "t.jsonl"]);
    let out = bin(
        d,
        &[
            "verify",
            "--vk",
            "k.vk.json",
            "--trace",
            "t.jsonl",
            "--report",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(d.join("r.json").exists());
}

#[test]
fn non_nas_trace_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["genkey", "--ns", "4", "--out", "k"]);
    let mut lines = String::new();
    for i in 0..200u64 {
        lines.push_str(&format!(
            "{{\"t\":{},\"src\":\"blas\",\"api\":\"itcopy\"}}\n",
            i * 2000
        ));
    }
    std::fs::write(d.join("flat.jsonl"), lines).unwrap();
    assert_eq!(
        bin(d, &["verify", "--vk", "k.vk.json", "--trace", "flat.jsonl"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bin(d, &["analyze", "--trace", "flat.jsonl"]).status.code(),
        Some(2)
    );
}

#[test]
fn usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin(d, &["verify", "--nope"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(!out.stderr.is_empty());
    assert_eq!(bin(d, &["frobnicate"]).status.code(), Some(64));
    std::fs::write(
        d.join("bad.jsonl"),
        "{\"t\": 5, \"src\": \"blas\", \"api\": \"itcopy\"}\nnot json\n",
    )
    .unwrap();
    let out = bin(d, &["analyze", "--trace", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(65));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(
        bin(d, &["analyze", "--trace", "missing.jsonl"])
            .status
            .code(),
        Some(65)
    );
    assert_eq!(
        bin(d, &["genkey", "--ns", "9", "--out", "k"]).status.code(),
        Some(65)
    );
}

#[test]
fn profile_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("p.json"), "{\"speedup\": 20.0}").unwrap();
    setup(d);
    let out = Command::new(env!("CARGO_BIN_EXE_archstamp"))
        .current_dir(d)
        .env("ARCHSTAMP_PROFILE", "p.json")
        .args(["trace", "--arch", "arch.json", "--out", "fast.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    ok(d, &["trace", "--arch", "arch.json", "--out", "slow.jsonl"]);
    let fast = archstamp::trace::Trace::load(&d.join("fast.jsonl")).unwrap();
    let slow = archstamp::trace::Trace::load(&d.join("slow.jsonl")).unwrap();
    let ratio = fast.duration() as f64 / slow.duration() as f64;
    assert!((ratio - 0.05).abs() < 0.005, "{ratio}");
    let m: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(d.join("fast.jsonl.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m.profile_fingerprint, fast.meta.profile);
    std::fs::write(d.join("bad.json"), "{\"block_p\": 0}").unwrap();
    assert_eq!(
        bin(
            d,
            &[
                "trace",
                "--profile",
                "bad.json",
                "--arch",
                "arch.json",
                "--out",
                "x"
            ]
        )
        .status
        .code(),
        Some(65)
    );
}

#[test]
fn reruns_are_byte_identical() {
    let run = |d: &Path| {
        setup(d);
        ok(
            d,
            &[
                "attack",
                "--arch",
                "arch.json",
                "--kind",
                "noise:0.2",
                "--seed",
                "5",
                "--out",
                "a.json",
            ],
        );
        ok(
            d,
            &[
                "trace", "--arch", "a.json", "--seed", "5", "--out", "t.jsonl",
            ],
        );
        ok(
            d,
            &[
                "collide",
                "--key",
                "k.mk.json",
                "--trials",
                "500",
                "--seed",
                "2",
                "--report",
                "c.json",
            ],
        );
        ok(
            d,
            &[
                "report", "--kind", "timeline", "--trace", "t.jsonl", "--out", "tl.csv",
            ],
        );
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let files: Vec<PathBuf> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), 13);
    for f in files {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(&f).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn writes_stay_inside_declared_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let before: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    ok(d, &["trace", "--arch", "arch.json", "--out", "t.jsonl"]);
    ok(
        d,
        &[
            "report", "--kind", "latency", "--trace", "t.jsonl", "--format", "json",
        ],
    );
    let mut added: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| !before.contains(n))
        .collect();
    added.sort();
    assert_eq!(added, ["t.jsonl", "t.jsonl.manifest.json"]);
}

#[test]
fn report_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "report",
            "--kind",
            "ops",
            "--ops",
            "sep_conv_3x3,sep_conv_5x5",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,gemms,duration"));
    let dur: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(dur[1] > dur[0]);
    let out = ok(
        d,
        &[
            "report", "--kind", "gemm", "--format", "json", "--shape", "16x16x8",
        ],
    );
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["m"] == 256));
}

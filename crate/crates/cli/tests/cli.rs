use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn softbeam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softbeam"))
        .args(args)
        .current_dir(dir)
        .env("SOFTBEAM_RUN_DIR", dir.join("runs"))
        .output()
        .expect("spawn softbeam")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = softbeam(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(2));
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or("")
        .to_string()
}

const TRAIN: &[&str] = &[
    "--task",
    "tagging",
    "--train",
    "data/train.txt",
    "--dev",
    "data/dev.txt",
    "--epochs",
    "2",
    "--restarts",
    "1",
];

fn gen_tagging(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data",
            "--task",
            "tagging",
            "--out",
            "data",
            "--train-count",
            "40",
            "--dev-count",
            "20",
            "--vocab-size",
            "4",
            "--max-len",
            "5",
        ],
    );
}

#[test]
fn full_pipeline_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tagging(dir);
    for objective in ["teacher-forcing", "self-normalized"] {
        let out = ok(
            dir,
            &[&["pretrain", "--objective", objective], TRAIN].concat(),
        );
        assert!(out.contains("mode=pretrain-beam"), "{out}");
    }
    let warm = "runs/tagging-self-normalized-local-unidirectional-s0/model.ckpt";
    for norm in ["local", "global"] {
        ok(
            dir,
            &[
                &["train", "--warm-start", warm, "--normalization", norm],
                TRAIN,
            ]
            .concat(),
        );
    }
    let run = dir.join("runs/tagging-soft-beam-global-unidirectional-s0");
    for f in ["config.txt", "train.log", "model.ckpt", "summary.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log
        .lines()
        .any(|l| l.starts_with("selected restart=0 epoch=")));

    let ckpt = run.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let decoded = ok(
        dir,
        &[
            "decode",
            "--checkpoint",
            ckpt,
            "--corpus",
            "data/dev.txt",
            "--mode",
            "soft-map",
            "--output",
            "preds.txt",
        ],
    );
    let evaluated = ok(
        dir,
        &[
            "eval",
            "--corpus",
            "data/dev.txt",
            "--predictions",
            "preds.txt",
            "--label",
            "globally-normalized",
        ],
    );
    assert_eq!(decoded, evaluated);

    let report = ok(dir, &["report"]);
    assert!(report.contains("Init-scheme →"));
    // Only self-normalized warm starts were trained search-aware.
    assert!(report.contains("| locally-normalized  | —"), "{report}");
    assert!(dir.join("runs/report.txt").is_file());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("runs/report.json")).unwrap()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let cell = &json[0]["grid"]["globally_normalized"][1];
    assert_eq!(
        cell.as_f64().unwrap(),
        100.0 * summary["reports"][0]["accuracy"].as_f64().unwrap()
    );

    ok(
        dir,
        &[
            "plot",
            "--log",
            run.join("train.log").to_str().unwrap(),
            "--out",
            "curves.svg",
        ],
    );
    assert!(fs::read_to_string(dir.join("curves.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn pretraining_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tagging(dir);
    ok(dir, &[&["pretrain", "--out", "a"], TRAIN].concat());
    ok(dir, &[&["pretrain", "--out", "b"], TRAIN].concat());
    for f in ["model.ckpt", "summary.json", "train.log", "config.txt"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_file_round_trips_through_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tagging(dir);
    fs::write(
        dir.join("run.cfg"),
        "# tiny run\ntask = tagging\ntrain = data/train.txt\ndev = data/dev.txt\nepochs = 1\nrestarts = 1\nobjective = self-normalized\n",
    )
    .unwrap();
    ok(
        dir,
        &[
            "pretrain", "--config", "run.cfg", "--out", "r", "--lambda", "0.5",
        ],
    );
    let written = fs::read_to_string(dir.join("r/config.txt")).unwrap();
    assert!(written.contains("lambda = 0.5"));
    assert!(written.contains("objective = self-normalized"));
    fs::write(dir.join("again.cfg"), &written).unwrap();
    ok(dir, &["pretrain", "--config", "again.cfg", "--out", "r2"]);
    assert_eq!(
        fs::read(dir.join("r/model.ckpt")).unwrap(),
        fs::read(dir.join("r2/model.ckpt")).unwrap()
    );
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tagging(dir);

    let line = error_line(&softbeam(dir, &[&["train"], TRAIN].concat()));
    assert!(line.starts_with("error: kind=config message="), "{line}");
    assert!(line.contains("warm_start"));

    let line = error_line(&softbeam(
        dir,
        &[&["train", "--warm-start", "missing.ckpt"], TRAIN].concat(),
    ));
    assert!(line.starts_with("error: kind=config"), "{line}");

    fs::write(
        dir.join("bad.cfg"),
        "task = tagging\ntrain = a\ndev = b\nbeam_width = 3\n",
    )
    .unwrap();
    let line = error_line(&softbeam(dir, &["pretrain", "--config", "bad.cfg"]));
    assert!(
        line.starts_with("error: kind=config") && line.contains("line 4"),
        "{line}"
    );

    fs::write(dir.join("data/broken.txt"), "u0 u1\n").unwrap();
    for ext in ["src.vocab", "tgt.vocab", "meta"] {
        fs::copy(
            dir.join(format!("data/dev.txt.{ext}")),
            dir.join(format!("data/broken.txt.{ext}")),
        )
        .unwrap();
    }
    let line = error_line(&softbeam(
        dir,
        &[
            "pretrain",
            "--task",
            "tagging",
            "--train",
            "data/broken.txt",
            "--dev",
            "data/dev.txt",
        ],
    ));
    assert!(
        line.starts_with("error: kind=data") && line.contains("broken.txt:1"),
        "{line}"
    );

    let line = error_line(&softbeam(dir, &["report", "--root", "data"]));
    assert!(line.starts_with("error: kind=data"), "{line}");
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--instances", "2"]);
    assert_eq!(
        out.lines().filter(|l| l.ends_with("PASS")).count(),
        8,
        "{out}"
    );
}

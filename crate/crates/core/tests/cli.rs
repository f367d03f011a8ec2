use jointslu::cli::{main_with, EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use jointslu::corpus::{format_dataset, parse_dataset};
use jointslu::metrics::EvalReport;
use jointslu::synthetic;
use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
embed_dim = 8
lstm_hidden = 4
decoder_hidden = 4
intent_head_dim = 4
heads = 2
max_epochs = 2
batch_size = 8
";

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["jointslu"];
    full.extend_from_slice(args);
    let code = main_with(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic::corpus(24, 9, 5).unwrap();
        fs::write(dir.path().join("train.txt"), format_dataset(&data[..16])).unwrap();
        fs::write(dir.path().join("dev.txt"), format_dataset(&data[16..])).unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str) -> (i32, String) {
        run(&[
            "train",
            "--config",
            p(&self.path("tiny.cfg")),
            "--train",
            p(&self.path("train.txt")),
            "--dev",
            p(&self.path("dev.txt")),
            "--out",
            p(&self.path(out)),
            "--seed",
            "3",
        ])
    }
}

#[test]
fn train_eval_predict_round_trip() {
    let fx = Fixture::new();
    let (code, msg) = fx.train("model");
    assert_eq!(code, EXIT_OK, "{msg}");
    for f in ["model.ckpt", "vocab.json", "config.txt", "snapshot.ckpt", "train_log.jsonl", "manifest.json"] {
        assert!(fx.path("model").join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(fx.path("model/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let (code, msg) = run(&[
        "eval",
        "--model",
        p(&fx.path("model")),
        "--data",
        p(&fx.path("dev.txt")),
        "--report",
        p(&fx.path("report.json")),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(msg.contains("overall_acc"));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(fx.path("report.json")).unwrap()).unwrap();
    assert_eq!(report.utterances, 8);
    assert!(report.overall_acc <= report.intent_acc);

    // the checkpoint path works as well as the directory
    let (code, _) = run(&[
        "eval",
        "--model",
        p(&fx.path("model/model.ckpt")),
        "--data",
        p(&fx.path("dev.txt")),
        "--report",
        p(&fx.path("report2.json")),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(
        fs::read_to_string(fx.path("report.json")).unwrap(),
        fs::read_to_string(fx.path("report2.json")).unwrap()
    );

    let dev = parse_dataset(&fs::read_to_string(fx.path("dev.txt")).unwrap()).unwrap();
    let tokens: Vec<String> = dev.iter().map(|u| u.tokens.join("\n") + "\n").collect();
    fs::write(fx.path("input.txt"), tokens.join("\n")).unwrap();
    let (code, _) = run(&[
        "predict",
        "--model",
        p(&fx.path("model")),
        "--input",
        p(&fx.path("input.txt")),
        "--output",
        p(&fx.path("pred.txt")),
    ]);
    assert_eq!(code, EXIT_OK);
    let pred = parse_dataset(&fs::read_to_string(fx.path("pred.txt")).unwrap()).unwrap();
    assert_eq!(pred.len(), dev.len());
    for (a, b) in pred.iter().zip(&dev) {
        assert_eq!(a.tokens, b.tokens);
        assert!(!a.intents.is_empty());
    }
}

#[test]
fn identical_runs_give_identical_reports() {
    let fx = Fixture::new();
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        assert_eq!(fx.train(out).0, EXIT_OK);
        let report = fx.path(&format!("{out}.json"));
        let (code, _) = run(&[
            "eval",
            "--model",
            p(&fx.path(out)),
            "--data",
            p(&fx.path("dev.txt")),
            "--report",
            p(&report),
        ]);
        assert_eq!(code, EXIT_OK);
        reports.push(fs::read_to_string(report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(
        fs::read_to_string(fx.path("a/train_log.jsonl")).unwrap(),
        fs::read_to_string(fx.path("b/train_log.jsonl")).unwrap()
    );
}

#[test]
fn config_and_data_errors_map_to_exit_codes() {
    let fx = Fixture::new();
    fs::write(fx.path("bad.cfg"), "enable_cucll = false\n").unwrap();
    let (code, _) = run(&[
        "train",
        "--config",
        p(&fx.path("bad.cfg")),
        "--train",
        p(&fx.path("train.txt")),
        "--dev",
        p(&fx.path("dev.txt")),
        "--out",
        p(&fx.path("m")),
    ]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!fx.path("m").exists());

    fs::write(fx.path("broken.txt"), "what O\nis\natis_x\n").unwrap();
    let (code, _) = run(&[
        "train",
        "--config",
        p(&fx.path("tiny.cfg")),
        "--train",
        p(&fx.path("broken.txt")),
        "--dev",
        p(&fx.path("dev.txt")),
        "--out",
        p(&fx.path("m")),
    ]);
    assert_eq!(code, EXIT_DATA);

    let (code, _) = run(&[
        "train",
        "--train",
        p(&fx.path("missing.txt")),
        "--dev",
        p(&fx.path("dev.txt")),
        "--out",
        p(&fx.path("m")),
    ]);
    assert_eq!(code, EXIT_DATA);

    let (code, _) = run(&["train", "--bogus"]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn augment_prints_pairs_and_manifest() {
    let fx = Fixture::new();
    let (code, out) = run(&["augment", "--train", p(&fx.path("train.txt")), "--n", "3", "--seed", "9"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.matches("positive:").count(), 3);
    let records: Vec<serde_json::Value> = out
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(records.iter().any(|r| r["level"] == "coarse_utterance"));

    let (code, again) = run(&["augment", "--train", p(&fx.path("train.txt")), "--n", "3", "--seed", "9"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, again);

    let (code, _) = run(&[
        "augment",
        "--train",
        p(&fx.path("train.txt")),
        "--n",
        "1",
        "--manifest",
        p(&fx.path("pairs.jsonl")),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(fs::read_to_string(fx.path("pairs.jsonl")).unwrap().lines().count() > 0);
}

#[test]
fn binary_reports_help_and_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_jointslu");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["train", "eval", "predict", "augment"] {
        assert!(text.contains(sub));
    }
    let bad = Command::new(bin).args(["eval", "--model", "nowhere"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_CONFIG));
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const CONFIG: &str = r#"
seed = 5

[synthetic]
users = 160
movies = 140
median_user_ratings = 50.0

[bpmf]
gibbs_iterations = 8
burn_in = 2

[train]
epochs = 2
users_per_batch = 40
checkpoint_every = 1
"#;

struct Work {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("config.toml"), CONFIG).unwrap();
        Work { _tmp: tmp, root }
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_coldstart"));
        c.arg("--config")
            .arg(self.root.join("config.toml"))
            .arg("--work-dir")
            .arg(self.root.join("work"))
            .args(args)
            .env_remove("COLDSTART_DATA_DIR")
            .env("RUST_LOG", "warn");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = self.cmd(args).output().unwrap();
        assert!(
            out.status.success(),
            "coldstart {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn fail(&self, args: &[&str]) -> String {
        let out = self.cmd(args).output().unwrap();
        assert!(!out.status.success(), "coldstart {args:?} unexpectedly succeeded");
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn work(&self, name: &str) -> PathBuf {
        self.root.join("work").join(name)
    }

    fn prepare(&self) {
        let data = self.root.join("data");
        self.run(&["synth", "--out", data.to_str().unwrap()]);
        self.run(&["ingest", "--data-dir", data.to_str().unwrap()]);
        self.run(&["split"]);
        self.run(&["bpmf-train"]);
    }

    fn runs(&self) -> Vec<PathBuf> {
        let mut v: Vec<_> = fs::read_dir(self.work("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        v.sort();
        v
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn help_lists_every_config_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_coldstart"))
        .arg("--help")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for key in coldstart_cli::config::documented_keys() {
        assert!(text.contains(&key), "--help lacks `{key}`");
    }
}

#[test]
fn missing_prerequisites_name_the_producer() {
    let w = Work::new();
    assert!(w.fail(&["split"]).contains("coldstart ingest"));
    let data = w.root.join("data");
    w.run(&["synth", "--out", data.to_str().unwrap()]);
    w.run(&["ingest", "--data-dir", data.to_str().unwrap()]);
    assert!(w.fail(&["bpmf-train"]).contains("coldstart split"));
    w.run(&["split"]);
    assert!(w.fail(&["train"]).contains("coldstart bpmf-train"));
    assert!(w.fail(&["eval"]).contains("coldstart train"));
}

#[test]
fn unknown_config_key_fails() {
    let w = Work::new();
    fs::write(w.root.join("config.toml"), "[train]\nepoch = 3\n").unwrap();
    let err = w.fail(&["split"]);
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn pipeline_is_deterministic_and_supports_every_command() {
    let w = Work::new();
    w.prepare();
    let first = [
        bytes(&w.work("dataset.tsv")),
        bytes(&w.work("split.json")),
        bytes(&w.work("factors.bin")),
    ];
    w.prepare();
    let second = [
        bytes(&w.work("dataset.tsv")),
        bytes(&w.work("split.json")),
        bytes(&w.work("factors.bin")),
    ];
    assert!(first == second, "ingest/split/bpmf-train outputs differ between runs");

    w.run(&["train"]);
    std::thread::sleep(std::time::Duration::from_millis(1100));
    w.run(&["train"]);
    let runs = w.runs();
    assert_eq!(runs.len(), 2);
    assert_eq!(bytes(&runs[0].join("best.bin")), bytes(&runs[1].join("best.bin")));
    assert_eq!(bytes(&runs[0].join("latest.bin")), bytes(&runs[1].join("latest.bin")));
    assert!(runs[0].join("config.toml").exists());

    // k=3 bundle evaluated with a 4-question interview
    let out = w.run(&["eval", "--questions", "4"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("headline"));
    let latest = &runs[1];
    let report = bytes(&latest.join("eval-k4.json"));
    let doc: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert!(doc["headline_rmse"].as_f64().unwrap().is_finite());
    w.run(&["eval", "--questions", "4"]);
    assert_eq!(report, bytes(&latest.join("eval-k4.json")));

    w.run(&["report", "--samples", "2"]);
    let series = fs::read_to_string(latest.join("rmse_series.csv")).unwrap();
    assert_eq!(series.lines().next(), Some("epoch,test_rmse,best_test_rmse"));
    assert_eq!(series.lines().count(), 3);
    assert!(fs::read_to_string(latest.join("sample_interviews.txt"))
        .unwrap()
        .contains("genre diversity"));

    let mut child = w
        .cmd(&["interview", "--top", "4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"0\nseven\n0\n0\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("please answer"));
    let recs = text.split("Recommended for you:").nth(1).unwrap();
    assert_eq!(recs.lines().filter(|l| !l.trim().is_empty()).count(), 4);

    let mut child = w
        .cmd(&["interview"])
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"3\n").unwrap();
    assert!(!child.wait_with_output().unwrap().status.success());

    // resume extends the run
    let run = runs[1].to_str().unwrap();
    w.run(&["train", "--resume", run, "--epochs", "3"]);
    assert_eq!(
        fs::read_to_string(runs[1].join("metrics.csv")).unwrap().lines().count(),
        4
    );
}

//! Command-level contracts: flags, exit codes and emitted artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disco_core::checkpoint::Checkpoint;
use disco_core::data::load_sts;
use disco_core::eval::sts_evaluate;

fn disco(args: &[&str]) -> Output {
    disco_env(args, &[])
}

fn disco_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_disco"));
    cmd.args(args).env_remove("DISCO_CONFIG_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

const SMALL_CONFIG: &str = "\
# small and quick
batch_size = 16
bank_capacity = 64
eval_interval = 5
max_epochs = 3
temperature = 0.2
vocab_size = 2048
teacher_dim = 16
student_embed_dim = 8
student_output_dim = 16
";

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = disco(&["synth", "--seed", "3", "--corpus", "160", "--triplets", "64", "--dev", "40", "--test", "40", "--out", s(&data)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(dir.path().join("small.conf"), SMALL_CONFIG).unwrap();
        fs::write(dir.path().join("ft.conf"), "batch_size = 16\neval_interval = 2\nmax_epochs = 2\ntemperature = 0.2\n").unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn distill(&self, method: &str, out: &str) -> Output {
        disco(&[
            "distill",
            "--config", s(&self.path("small.conf")),
            "--synthetic-teacher", "1",
            "--init-seed", "2",
            "--corpus", s(&self.path("data/corpus.txt")),
            "--dev", s(&self.path("data/dev.tsv")),
            "--method", method,
            "--out", s(&self.path(out)),
        ])
    }
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn encoder_bytes(path: &Path) -> Vec<u8> {
    Checkpoint::new(Checkpoint::load(path).unwrap().encoder).to_bytes()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&disco(&["--help"])), 0);
    assert_eq!(code(&disco(&[])), 2);
    assert_eq!(code(&disco(&["frobnicate"])), 2);
    let missing_corpus = disco(&["distill", "--synthetic-teacher", "1", "--init-seed", "2", "--dev", "d.tsv", "--out", "o"]);
    assert_eq!(code(&missing_corpus), 2);
    assert!(String::from_utf8_lossy(&missing_corpus.stderr).contains("--corpus"));
    assert_eq!(code(&disco(&["distill", "--synthetic-teacher", "1", "--init-seed", "2", "--corpus", "c", "--dev", "d", "--out", "o", "--method", "mse"])), 2);
    assert_eq!(code(&disco(&["evaluate", "--model", "m", "--out", "o"])), 2);
}

#[test]
fn gradcheck_exit_codes() {
    ok(&disco(&["gradcheck", "--loss", "all", "--trials", "2", "--tol", "1e-4"]));
    assert_eq!(code(&disco(&["gradcheck", "--trials", "0"])), 2);
    assert_eq!(code(&disco(&["gradcheck", "--loss", "mse"])), 2);
    let broken = disco(&["gradcheck", "--loss", "cl", "--trials", "1", "--corrupt-gradients"]);
    assert_eq!(code(&broken), 1);
    let err = String::from_utf8_lossy(&broken.stderr);
    assert!(err.contains("worst relative error") && err.contains("trial"), "{err}");
}

#[test]
fn distill_writes_artifacts_and_is_repeatable() {
    let f = Fixture::new();
    ok(&f.distill("ckd", "a"));
    ok(&f.distill("ckd", "b"));
    ok(&f.distill("kd", "kd"));
    for file in ["best.ckpt", "train_log.jsonl", "eval_report.jsonl", "eval_report.tsv", "eval_report.txt", "run.json"] {
        let a = fs::read(f.path("a").join(file)).unwrap();
        assert_eq!(a, fs::read(f.path("b").join(file)).unwrap(), "{file} differs between reruns");
    }
    assert_ne!(encoder_bytes(&f.path("a/best.ckpt")), encoder_bytes(&f.path("kd/best.ckpt")));
    let ck = Checkpoint::load(f.path("a/best.ckpt")).unwrap();
    assert_eq!(ck.metadata.get("method").map(String::as_str), Some("ckd"));
    assert!(!ck.encoder.config.frozen);
}

#[test]
fn finetune_contracts() {
    let f = Fixture::new();
    ok(&f.distill("kd", "kd"));
    let finetune = |config: &str, student: &Path, out: &str| {
        disco(&[
            "finetune",
            "--config", config,
            "--student", s(student),
            "--triplets", s(&f.path("data/triplets.tsv")),
            "--dev", s(&f.path("data/dev.tsv")),
            "--out", s(&f.path(out)),
        ])
    };
    let ft_conf = f.path("ft.conf");
    assert_eq!(code(&finetune(s(&ft_conf), &f.path("missing.ckpt"), "x")), 1);

    let out = finetune(s(&ft_conf), &f.path("kd/best.ckpt"), "ft");
    ok(&out);
    // 64 triplets / batch 16 = 4 steps per epoch, 2 epochs, eval every 2
    let log = fs::read_to_string(f.path("ft/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1 + 8 / 2);
    let ck = Checkpoint::load(f.path("ft/best.ckpt")).unwrap();
    assert_eq!(ck.metadata.get("method").map(String::as_str), Some("disco-kd"));

    fs::write(f.path("zero.conf"), "max_epochs = 0\nbatch_size = 16\n").unwrap();
    ok(&finetune(s(&f.path("zero.conf")), &f.path("kd/best.ckpt"), "zero"));
    assert_eq!(encoder_bytes(&f.path("zero/best.ckpt")), encoder_bytes(&f.path("kd/best.ckpt")));

    fs::write(f.path("bad.conf"), "batch_sise = 16\n").unwrap();
    let bad = finetune(s(&f.path("bad.conf")), &f.path("kd/best.ckpt"), "bad");
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("batch_sise"));
}

#[test]
fn config_directory_from_environment() {
    let f = Fixture::new();
    let conf_dir = f.path("conf");
    fs::create_dir_all(&conf_dir).unwrap();
    fs::write(conf_dir.join("distill.conf"), SMALL_CONFIG.replace("max_epochs = 3", "max_epochs = 1")).unwrap();
    let (corpus, dev, out) = (f.path("data/corpus.txt"), f.path("data/dev.tsv"), f.path("env"));
    let args = [
        "distill",
        "--synthetic-teacher", "1",
        "--init-seed", "2",
        "--corpus", s(&corpus),
        "--dev", s(&dev),
        "--out", s(&out),
    ];
    ok(&disco_env(&args, &[("DISCO_CONFIG_DIR", &conf_dir)]));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("env/run.json")).unwrap()).unwrap();
    assert_eq!(run["epochs"], 1);
    assert_eq!(run["output_dim"], 16);
}

#[test]
fn evaluate_fans_out_and_matches_library() {
    let f = Fixture::new();
    ok(&f.distill("ckd", "ckd"));
    let model = f.path("ckd/best.ckpt");
    let (dev, test) = (f.path("data/dev.tsv"), f.path("data/test.tsv"));
    ok(&disco(&["evaluate", "--model", s(&model), "--sts", s(&dev), "--sts", s(&test), "--out", s(&f.path("plain"))]));
    let lines: Vec<serde_json::Value> = fs::read_to_string(f.path("plain/eval_report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|r| r.get("align").is_none() && r.get("uniform").is_none()));
    let encoder = Checkpoint::load(&model).unwrap().encoder;
    let direct = sts_evaluate("test", &load_sts(&test, "test").unwrap().pairs, &encoder).unwrap();
    assert_eq!(lines[1]["rho"].as_f64(), direct.rho);
    assert_eq!(lines[1]["name"], "test");

    ok(&disco(&["evaluate", "--model", s(&model), "--sts", s(&test), "--diagnostics", "on", "--out", s(&f.path("diag"))]));
    let rec: serde_json::Value = serde_json::from_str(fs::read_to_string(f.path("diag/eval_report.jsonl")).unwrap().trim()).unwrap();
    assert!(rec["align"].as_f64().unwrap() >= 0.0);
    assert!(rec["uniform"].as_f64().unwrap() <= 0.0);
    let tsv = fs::read_to_string(f.path("diag/eval_report.tsv")).unwrap();
    assert!(tsv.starts_with("name\trho\tcount\talign\tuniform\n"));

    assert_eq!(code(&disco(&["evaluate", "--model", s(&f.path("nope.ckpt")), "--sts", s(&test), "--out", s(&f.path("x"))])), 1);
}

#[test]
fn report_aggregates_and_skips_malformed_runs() {
    let f = Fixture::new();
    ok(&f.distill("kd", "kd"));
    ok(&f.distill("ckd", "ckd"));
    let rep = f.path("rep");
    ok(&disco(&["report", "--runs", s(&f.path("kd")), "--runs", s(&f.path("ckd")), "--out", s(&rep)]));
    let csv = fs::read_to_string(rep.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("kd,distill,kd,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    // no diagnostics in training runs, so the scatter file is header-only
    assert_eq!(fs::read_to_string(rep.join("align_uniform.csv")).unwrap().lines().count(), 1);

    let test = f.path("data/test.tsv");
    for (name, model) in [("eval-kd", "kd"), ("eval-ckd", "ckd")] {
        let m = f.path(model).join("best.ckpt");
        ok(&disco(&["evaluate", "--model", s(&m), "--sts", s(&test), "--diagnostics", "on", "--out", s(&f.path(name))]));
    }
    fs::write(f.path("kd/train_log.jsonl"), "{\"step\": \"not a number\"}\n").unwrap();
    let out = disco(&[
        "report",
        "--runs", s(&f.path("kd")),
        "--runs", s(&f.path("ckd")),
        "--runs", s(&f.path("eval-kd")),
        "--runs", s(&f.path("eval-ckd")),
        "--out", s(&rep),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: skipping run"));
    assert_eq!(fs::read_to_string(rep.join("comparison.csv")).unwrap().lines().count(), 1 + 3);
    let scatter = fs::read_to_string(rep.join("align_uniform.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 2, "{scatter}");

    assert_eq!(code(&disco(&["report", "--runs", s(&f.path("kd")), "--out", s(&rep)])), 1);
    assert_eq!(code(&disco(&["report", "--runs", s(&f.path("missing")), "--out", s(&rep)])), 1);
}

#[test]
fn runtime_failures_exit_one() {
    let f = Fixture::new();
    let o = disco(&[
        "distill",
        "--synthetic-teacher", "1",
        "--init-seed", "2",
        "--corpus", s(&f.path("data/missing.txt")),
        "--dev", s(&f.path("data/dev.tsv")),
        "--out", s(&f.path("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    // a student checkpoint is not a valid teacher
    ok(&f.distill("kd", "kd"));
    let o = disco(&[
        "distill",
        "--config", s(&f.path("small.conf")),
        "--teacher", s(&f.path("kd/best.ckpt")),
        "--init-seed", "2",
        "--corpus", s(&f.path("data/corpus.txt")),
        "--dev", s(&f.path("data/dev.tsv")),
        "--out", s(&f.path("o")),
    ]);
    assert_eq!(code(&o), 1);
}

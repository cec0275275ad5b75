use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gunc_core::data::{save_png, DensityMap, Image, Manifest, MANIFEST_FILE};
use gunc_core::net::{Network, NetworkSpec};
use gunc_core::optim::{save_checkpoint, Checkpoint};
use serde_json::Value;
use tempfile::TempDir;

fn gunc(args: &[&str]) -> Output {
    gunc_env(args, &[])
}

fn gunc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gunc"));
    cmd.args(args).env_remove("GUNC_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("gunc runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = gunc(args);
    assert_eq!(code(&out), 0, "gunc {args:?} failed: {}", stderr(&out));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn dataset(tmp: &TempDir, extra: &[&str]) -> PathBuf {
    let dir = tmp.path().join("data");
    let mut args = vec![
        "gen-data",
        "--out",
        s(&dir),
        "--images",
        "4",
        "--test",
        "1",
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

fn short_run(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--narrow",
        "--batch",
        "2",
        "--quiet",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn zero_checkpoint(dir: &Path, gated: bool) -> PathBuf {
    let spec = NetworkSpec {
        gated,
        ..NetworkSpec::narrow()
    };
    let net = Network::<f32>::zeros(&spec).unwrap();
    let path = dir.join("zero.gunc");
    save_checkpoint(&path, &Checkpoint::from_network(&net, 0)).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_repeats_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let args = |d: &Path| {
        ok(&[
            "gen-data",
            "--out",
            s(d),
            "--images",
            "16",
            "--count",
            "3..8",
            "--seed",
            "7",
        ]);
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    args(&a);
    args(&b);
    let ta = tree(&a);
    assert_eq!(
        ta.iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "png"))
            .count(),
        16
    );
    assert_eq!(ta, tree(&b));
}

#[test]
fn gen_data_fixed_count() {
    let tmp = TempDir::new().unwrap();
    let dir = dataset(&tmp, &["--count", "3..3"]);
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.entries.iter().all(|e| e.count == 3));
}

#[test]
fn gen_data_refuses_nonempty_dir() {
    let tmp = TempDir::new().unwrap();
    let dir = dataset(&tmp, &[]);
    let out = gunc(&["gen-data", "--out", s(&dir), "--images", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--force"));
    ok(&["gen-data", "--out", s(&dir), "--images", "2", "--force"]);
    assert_eq!(Manifest::load(&dir.join(MANIFEST_FILE)).unwrap().entries.len(), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&gunc(&["--bogus"])), 1);
    assert_eq!(code(&gunc(&["train", "--fusion"])), 1);
    assert_eq!(code(&gunc(&["--help"])), 0);
    assert_eq!(code(&gunc(&["gen-data", "--out", "x", "--count", "many"])), 1);
}

#[test]
fn train_echoes_gated_model() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let run = tmp.path().join("run");
    short_run(&data, &run, &["--iters", "2", "--gated", "--fusion", "concat"]);
    let model = json(&run.join("model.json"));
    assert_eq!(model["gates"], 4);
    assert_eq!(model["spec"]["fusion"], "concat");
    let cfg = json(&run.join("config.json"));
    assert_eq!(cfg["net.gated"], true);
    assert_eq!(cfg["train.iterations"], 2);
    assert!(run.join("ckpt_2.gunc").is_file());

    let plain = tmp.path().join("plain");
    short_run(&data, &plain, &["--iters", "2", "--gated", "false"]);
    assert_eq!(json(&plain.join("model.json"))["gates"], 0);
}

#[test]
fn echoed_config_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    short_run(&data, &a, &["--iters", "4", "--seed", "3"]);
    ok(&[
        "train",
        "--config",
        s(&a.join("config.json")),
        "--out",
        s(&b),
        "--quiet",
    ]);
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("ckpt_4.gunc")).unwrap(),
        fs::read(b.join("ckpt_4.gunc")).unwrap()
    );
}

#[test]
fn resume_continues_the_trace() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    short_run(&data, &a, &["--iters", "6", "--checkpoint-every", "3"]);
    ok(&[
        "train",
        "--resume",
        s(&a.join("ckpt_3.gunc")),
        "--out",
        s(&b),
        "--iters",
        "6",
        "--quiet",
    ]);
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );

    let out = gunc(&[
        "train",
        "--resume",
        s(&a.join("ckpt_3.gunc")),
        "--out",
        s(&b),
        "--iters",
        "3",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.iterations"));
}

#[test]
fn seed_precedence() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let seed_of = |run: &Path| json(&run.join("config.json"))["train.seed"].clone();
    let base = [
        "train",
        "--data",
        s(&data),
        "--narrow",
        "--iters",
        "1",
        "--batch",
        "1",
        "--quiet",
        "--out",
    ];

    let env_run = tmp.path().join("env");
    let mut args = base.to_vec();
    args.push(s(&env_run));
    assert_eq!(code(&gunc_env(&args, &[("GUNC_SEED", "42")])), 0);
    assert_eq!(seed_of(&env_run), 42);

    let flag_run = tmp.path().join("flag");
    let mut args = base.to_vec();
    args.extend([s(&flag_run), "--seed", "5"]);
    assert_eq!(code(&gunc_env(&args, &[("GUNC_SEED", "42")])), 0);
    assert_eq!(seed_of(&flag_run), 5);

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train.seed": 9}"#).unwrap();
    let file_run = tmp.path().join("file");
    let mut args = base.to_vec();
    args.extend([s(&file_run), "--config", s(&cfg)]);
    assert_eq!(code(&gunc_env(&args, &[("GUNC_SEED", "42")])), 0);
    assert_eq!(seed_of(&file_run), 9);
}

#[test]
fn config_errors_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train.lr": "fast"}"#).unwrap();
    let out = gunc(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.lr"), "{}", stderr(&out));

    let out = gunc(&[
        "train",
        "--iters",
        "10",
        "--eval-every",
        "20",
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.eval_every"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_two_and_keeps_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let run = tmp.path().join("run");
    let out = gunc(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--narrow",
        "--iters",
        "50",
        "--lr",
        "1e8",
        "--checkpoint-every",
        "1",
        "--quiet",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(run.join("ckpt_1.gunc").is_file());
    assert!(run.join("trace.csv").is_file());
}

#[test]
fn oracle_eval_is_all_zero() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let out = tmp.path().join("eval");
    ok(&["eval", "--oracle-gt", "--data", s(&data), "--out", s(&out)]);
    let report = json(&out.join("eval_test.json"));
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["game"].as_array().unwrap().len(), 4);
    assert!(report["game"].as_array().unwrap().iter().all(|g| g == 0.0));
    let csv = fs::read_to_string(out.join("eval_test.csv")).unwrap();
    assert!(csv.starts_with("image_id,predicted,ground_truth,abs_error,game0,game1,game2,game3\n"));
}

#[test]
fn eval_reports_game_levels() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let run = tmp.path().join("run");
    short_run(&data, &run, &["--iters", "2"]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("ckpt_2.gunc")),
        "--game-max",
        "2",
        "--grids",
    ]);
    let report = json(&run.join("eval_test.json"));
    let game = report["game"].as_array().unwrap();
    assert_eq!(game.len(), 3);
    assert_eq!(game[0], report["mae"]);
    assert_eq!(report["images"][0]["grids"][2].as_array().unwrap().len(), 16);
}

#[test]
fn eval_missing_checkpoint_names_path() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let missing = tmp.path().join("nope.gunc");
    let out = gunc(&["eval", "--checkpoint", s(&missing), "--data", s(&data)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.gunc"));
}

#[test]
fn predict_handles_arbitrary_sizes() {
    let tmp = TempDir::new().unwrap();
    let ckpt = zero_checkpoint(tmp.path(), true);
    let blank = tmp.path().join("blank.png");
    save_png(&Image::filled(3, 480, 640, 0.0), &blank).unwrap();
    let out_dir = tmp.path().join("pred");
    let stdout = ok(&["predict", "--checkpoint", s(&ckpt), "--out", s(&out_dir), s(&blank)]);
    assert!(stdout.trim_end().ends_with("0.0000"), "{stdout}");
    let map = DensityMap::load(&out_dir.join("blank.density")).unwrap();
    assert_eq!((map.height(), map.width()), (480, 640));
    assert_eq!(map.sum(), 0.0);
    assert!(out_dir.join("blank.png").is_file());
}

#[test]
fn predict_reports_bad_files_and_continues() {
    let tmp = TempDir::new().unwrap();
    let ckpt = zero_checkpoint(tmp.path(), true);
    let good = tmp.path().join("good.png");
    save_png(&Image::filled(3, 64, 64, 0.5), &good).unwrap();
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let out_dir = tmp.path().join("pred");
    let out = gunc(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out_dir),
        s(&bad),
        s(&good),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.png"));
    assert!(out_dir.join("good.density").is_file());
}

#[test]
fn inspect_gates_zero_model_reports_half() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let ckpt = zero_checkpoint(tmp.path(), true);
    ok(&["inspect-gates", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let report = json(&tmp.path().join("gates.json"));
    let gates = report["gates"].as_array().unwrap();
    assert_eq!(gates.len(), 4);
    assert!(gates.iter().all(|g| g["mean_activation"] == 0.5));
    let csv = fs::read_to_string(tmp.path().join("gates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn inspect_gates_rejects_ungated() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp, &[]);
    let ckpt = zero_checkpoint(tmp.path(), false);
    let out = gunc(&["inspect-gates", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no gating units"));
}

use std::path::Path;
use std::process::{Command, Output};

fn chanfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = chanfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    chanfuse(args).status.code().expect("exit code")
}

const SMALL: [&str; 8] = [
    "--data.height",
    "12",
    "--data.width",
    "12",
    "--data.frames",
    "4",
    "--classes",
    "left,right",
];

const TINY_NET: [&str; 6] = [
    "--model.stem_channels",
    "4",
    "--model.blocks",
    "4:4:1,4:6:2",
    "--gate.hidden_units",
    "6",
];

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> String {
    let path = dir.join(name).display().to_string();
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["gen-data", "--out", &path, "--n", &n, "--seed", &seed];
    args.extend(SMALL);
    ok(&args);
    path
}

#[test]
fn gen_data_writes_the_file_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "d.afsv", 10, 4);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"AFSV1");
    assert_eq!(bytes.len(), 30 + 10 * 2 + 10 * 4 * 144);
    let manifest = std::fs::read_to_string(format!("{path}.manifest")).unwrap();
    assert!(manifest.contains("data.seed=4"), "{manifest}");
    assert!(manifest.contains("data.classes=left,right"), "{manifest}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.afsv", 8, 7);
    let b = gen(dir.path(), "b.afsv", 8, 7);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_then_eval_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.afsv", 24, 1);
    let val = gen(dir.path(), "val.afsv", 12, 2);
    let run = dir.path().join("run").display().to_string();
    let mut args = vec![
        "train",
        "--train-data",
        &train,
        "--val-data",
        &val,
        "--out",
        &run,
        "--gated",
        "all",
        "--train.epochs",
        "2",
        "--train.batch_size=8",
        "--quiet",
    ];
    args.extend(TINY_NET);
    ok(&args);
    let metrics = std::fs::read_to_string(format!("{run}/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["epoch"], 2);
    let echo = std::fs::read_to_string(format!("{run}/config.echo")).unwrap();
    assert!(echo.starts_with("# chanfuse train\n"));
    assert!(echo.contains("train.batch_size=8"));
    assert!(echo.contains("model.frames=4"));
    assert!(echo.contains("data.seed=1"));

    let ckpt = format!("{run}/checkpoint.afck");
    let ev = dir.path().join("eval").display().to_string();
    ok(&["eval", "--data", &val, "--checkpoint", &ckpt, "--out", &ev, "--dump-traces"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{ev}/report.json")).unwrap()).unwrap();
    assert_eq!(report["clips"], 12);
    assert!(report["top5"].is_null(), "two classes have no top-5");
    let fractions: Vec<f64> = serde_json::from_value(report["fractions"].clone()).unwrap();
    assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(report["mean_flops"].as_f64().unwrap() <= report["upper_bound"].as_f64().unwrap());

    let st = dir.path().join("stats").display().to_string();
    let printed = ok(&["stats", "--traces", &format!("{ev}/traces.csv"), "--out", &st]);
    assert!(printed.contains("overall"));
    let csv = std::fs::read_to_string(format!("{st}/per_block.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("block,skip,reuse,keep,"));
}

#[test]
fn eval_without_checkpoint_and_baseline_policies() {
    let dir = tempfile::tempdir().unwrap();
    let val = gen(dir.path(), "val.afsv", 10, 3);
    let read = |name: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(name).join("report.json")).unwrap()).unwrap()
    };
    let out = |name: &str| dir.path().join(name).display().to_string();
    let (keep, skip, random) = (out("keep"), out("skip"), out("random"));
    let mut base = vec!["eval", "--data", &val, "--gated", "all"];
    base.extend(TINY_NET);

    ok(&[&base[..], &["--out", &keep, "--policy", "keep"]].concat());
    ok(&[&base[..], &["--out", &skip, "--policy", "skip"]].concat());
    ok(&[&base[..], &["--out", &random, "--policy", "random", "--dist", "0.2,0.3,0.5"]].concat());
    let (keep, skip, random) = (read("keep"), read("skip"), read("random"));
    assert_eq!(keep["mean_util"], 1.0);
    assert_eq!(keep["mean_flops"], keep["upper_bound"]);
    assert_eq!(skip["mean_util"], 0.0);
    let f = random["mean_flops"].as_f64().unwrap();
    assert!(skip["mean_flops"].as_f64().unwrap() < f && f < keep["mean_flops"].as_f64().unwrap());
}

#[test]
fn flops_upper_bound_matches_plain_eval() {
    let dir = tempfile::tempdir().unwrap();
    let val = gen(dir.path(), "val.afsv", 4, 3);
    let mut args = vec!["flops", "--json", "--model.frames", "4", "--model.height", "12", "--model.width", "12"];
    args.extend(TINY_NET);
    let table: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    let ev = dir.path().join("ev").display().to_string();
    let mut args = vec!["eval", "--data", &val, "--out", &ev];
    args.extend(TINY_NET);
    ok(&args);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{ev}/report.json")).unwrap()).unwrap();
    assert_eq!(table["upper_bound"], report["mean_flops"]);
    assert_eq!(table["layers"].as_array().unwrap().len(), 6);
}

#[test]
fn gradcheck_passes_and_names_a_broken_op() {
    let printed = ok(&["gradcheck"]);
    assert!(printed.contains("conv2d") && printed.contains("PASS"));
    let out = chanfuse(&["gradcheck", "--corrupt-conv"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("conv2d") && l.ends_with("FAIL")), "{text}");
}

#[test]
fn exit_codes_separate_config_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let val = gen(dir.path(), "val.afsv", 4, 3);
    let out = dir.path().join("o").display().to_string();
    assert_eq!(code(&["train", "--bogus"]), 2);
    assert_eq!(code(&["eval", "--data", &val, "--out", &out, "--train.nonsense", "1"]), 2);
    assert_eq!(code(&["eval", "--data", &val, "--out", &out, "--model.frames", "5"]), 2);
    assert_eq!(code(&["eval", "--data", &val, "--out", &out, "--policy", "sometimes"]), 2);
    assert_eq!(code(&["eval", "--data", "/nonexistent.afsv", "--out", &out]), 3);
    assert_eq!(
        code(&["eval", "--data", &val, "--out", &out, "--checkpoint", "/nonexistent.afck"]),
        3
    );
    let junk = dir.path().join("junk.afsv");
    std::fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(code(&["eval", "--data", junk.to_str().unwrap(), "--out", &out]), 3);
    assert_eq!(code(&["stats", "--traces", "/nonexistent.csv", "--out", &out]), 3);
}

#[test]
fn config_file_is_applied_before_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small clips\ndata.height = 12\ndata.width = 12\ndata.frames = 4\ndata.n_samples = 6\n").unwrap();
    let path = dir.path().join("d.afsv").display().to_string();
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", &path, "--n", "3"]);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 12);
}

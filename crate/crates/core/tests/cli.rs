use std::fs;
use std::path::{Path, PathBuf};

use affectfuse::cli::{run, METRICS_HEADER};
use tempfile::TempDir;

const SMALL: &str = "\
# tiny end-to-end run
generator.steps = 8
generator.train_sessions = 16
generator.val_sessions = 8
generator.test_sessions = 8
model.d = 16
model.layers = 1
model.heads = 2
model.ffn_hidden = 32
model.t_max = 8
model.d_k = 8
model.mie_hidden = 8
model.cls_hidden = 16
train.epochs = 2
train.batch_size = 8
";

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Outcome {
    let mut argv = vec!["affectfuse"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    Outcome { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

fn find(dir: &Path, prefix: &str) -> PathBuf {
    let name = files(dir).into_iter().find(|f| f.starts_with(prefix)).unwrap_or_else(|| panic!("no {prefix}* file"));
    dir.join(name)
}

/// Writes the small config, generates data and trains once into `dir`.
fn setup(dir: &Path, threads: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("data.afus");
    let g = cli(&["--threads", threads, "generate-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(g.code, 0, "{}", g.stderr);
    let t = cli(&["--threads", threads, "train", "--config", s(&cfg), "--data", s(&data), "--out", s(dir)]);
    assert_eq!(t.code, 0, "{}", t.stderr);
    (cfg, data)
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let o = cli(&[]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("Usage"), "{}", o.stderr);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cli(&["--help"]).code, 0);
    assert_eq!(cli(&["--version"]).code, 0);
    assert!(cli(&["train", "--help"]).stdout.contains("--data"));
}

#[test]
fn usage_errors_write_nothing() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.afus");
    for args in [
        vec!["frobnicate"],
        vec!["generate-data"],
        vec!["generate-data", "--out", s(&data), "--bogus"],
        vec!["--threads", "0", "generate-data", "--out", s(&data)],
        vec!["sweep-missing", "--data", s(&data), "--rates", "0.1"],
        vec!["check-theory", "everything"],
    ] {
        assert_eq!(cli(&args).code, 1, "{args:?}");
    }
    assert!(files(dir.path()).is_empty());
}

#[test]
fn bad_config_is_rejected_before_writing() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let data = dir.path().join("d.afus");
    for text in ["train.momentum = 0.9\n", "model.heads = 3\n", "generator.self_transition = 1.5\n", "train.lr = 1\ntrain.lr = 2\n"] {
        fs::write(&cfg, text).unwrap();
        let o = cli(&["generate-data", "--config", s(&cfg), "--out", s(&data)]);
        assert_eq!(o.code, 2, "{text}: {}", o.stderr);
        assert!(o.stderr.contains("error"), "{}", o.stderr);
        assert!(!data.exists());
    }
}

#[test]
fn generate_train_eval_sweep_trace_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (_, data) = setup(d, "2");
    let model = find(d, "model_");
    let log = fs::read_to_string(find(d, "train_")).unwrap();
    let header = log.lines().next().unwrap();
    assert_eq!(header, affectfuse::train::HISTORY_HEADER.join(","));
    assert_eq!(log.lines().count(), 3);

    let e = cli(&["eval", "--model", s(&model), "--data", s(&data), "--missing-rate", "0.4", "--out", s(d)]);
    assert_eq!(e.code, 0, "{}", e.stderr);
    let eval = fs::read_to_string(find(d, "eval_")).unwrap();
    let mut lines = eval.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), METRICS_HEADER.len());
    assert_eq!(row[0], "test");
    assert_eq!(row[10], "64");
    assert_eq!(row[11], "0.4");
    let acc: f64 = row[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let sw = cli(&["sweep-missing", "--models", s(&model), "--data", s(&data), "--rates", "0,0.5", "--out", s(d)]);
    assert_eq!(sw.code, 0, "{}", sw.stderr);
    let csv = fs::read_to_string(find(d, "sweep_")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(find(d, "sweep_").with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["rates"].as_array().unwrap().len(), 2);

    let tr = cli(&["trace-confidence", "--model", s(&model), "--data", s(&data), "--session", "24", "--out", s(d)]);
    assert_eq!(tr.code, 0, "{}", tr.stderr);
    let trace = fs::read_to_string(find(d, "trace-24_")).unwrap();
    assert_eq!(trace.lines().count(), 9);

    let missing = cli(&["trace-confidence", "--model", s(&model), "--data", s(&data), "--session", "999", "--out", s(d)]);
    assert_eq!(missing.code, 2);
}

#[test]
fn mismatched_data_is_refused() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (cfg, _) = setup(d, "1");
    let model = find(d, "model_");
    let other_cfg = d.join("other.cfg");
    fs::write(&other_cfg, format!("{}generator.seed = 7\n", fs::read_to_string(&cfg).unwrap())).unwrap();
    let other = d.join("other.afus");
    assert_eq!(cli(&["generate-data", "--config", s(&other_cfg), "--out", s(&other)]).code, 0);
    let out = d.join("out");
    fs::create_dir(&out).unwrap();
    let e = cli(&["eval", "--model", s(&model), "--data", s(&other), "--out", s(&out)]);
    assert_eq!(e.code, 2);
    assert!(e.stderr.contains("trained on data"), "{}", e.stderr);
    assert!(files(&out).is_empty());
}

#[test]
fn corrupted_inputs_are_rejected_with_exit_two() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (cfg, data) = setup(d, "1");
    let model = find(d, "model_");
    let out = d.join("out");
    fs::create_dir(&out).unwrap();

    let mut bytes = fs::read(&data).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad_data = d.join("bad.afus");
    fs::write(&bad_data, &bytes).unwrap();
    let o = cli(&["train", "--config", s(&cfg), "--data", s(&bad_data), "--out", s(&out)]);
    assert_eq!(o.code, 2, "{}", o.stderr);

    let ck = fs::read(&model).unwrap();
    let bad_model = d.join("bad_model.afus");
    fs::write(&bad_model, &ck[..ck.len() - 3]).unwrap();
    let o = cli(&["eval", "--model", s(&bad_model), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.code, 2, "{}", o.stderr);

    // a dataset is not a checkpoint
    let o = cli(&["eval", "--model", s(&data), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    assert!(files(&out).is_empty());
}

#[test]
fn thread_count_does_not_change_any_output() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    setup(a.path(), "1");
    setup(b.path(), "4");
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn fixed_point_check_passes_from_the_command_line() {
    let o = cli(&["check-theory", "fixed-point"]);
    assert_eq!(o.code, 0, "{}{}", o.stdout, o.stderr);
    assert!(o.stdout.trim_end().ends_with("PASS"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use augsearch::data::{generate_synthetic, Dataset, SyntheticKind};
use augsearch::policy::Policy;
use augsearch::raster::TransformId;
use augsearch::search::{PolicyTrace, SearchConfig};

const SMALL: &str = r#"
eval_seeds = [0, 1]
[data]
n = 200
test_n = 100
[search]
n_rounds = 2
n_retrain = 10
n_total = 14
[eval]
epochs = 2
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_augsearch"));
    cmd.env("AUGSEARCH_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn search(cfg: &Path, out: &Path) -> Output {
    run(&["search", "--config", s(cfg), "--out", s(out)])
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("absent.toml");
    let out = search(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("absent.toml"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[search]\nn_roundz = 3\n");
    let out = search(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_roundz"));
}

#[test]
fn inconsistent_schedule_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[search]\nn_retrain = 20\nn_total = 10\n",
    );
    assert_eq!(search(&cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn shipped_config_has_the_default_step_sizes() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let doc: toml::Table = toml::from_str(&fs::read_to_string(root).unwrap()).unwrap();
    let search: SearchConfig = doc["search"].clone().try_into().unwrap();
    assert!((search.alpha * search.lambda - 0.02).abs() < 1e-12);
    assert_eq!(search.n_aug, 8);
    let default = SearchConfig::default();
    assert!((default.alpha * default.lambda - 0.02).abs() < 1e-12);
    assert_eq!(default.n_aug, 8);
}

#[test]
fn zero_rounds_emit_the_uniform_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("n_rounds = 2", "n_rounds = 0"),
    );
    let out_dir = dir.path().join("out");
    let out = search(&cfg, &out_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let policy =
        Policy::from_json_str(&fs::read_to_string(out_dir.join("policy.json")).unwrap()).unwrap();
    let uniform = Policy::uniform(3, &TransformId::ALL, SearchConfig::default().mu_init).unwrap();
    assert_eq!(policy.logits(), uniform.logits());
    assert_eq!(policy.mag_upper(), uniform.mag_upper());
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn search_writes_outputs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(search(&cfg, &a).status.success());
    assert!(search(&cfg, &b).status.success());
    for name in ["policy.json", "trace.csv", "rounds.csv", "pretrained_0.bin"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(
            x,
            fs::read(b.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }
    let trace = PolicyTrace::from_csv(&fs::read_to_string(a.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.records.len(), 2 * 4);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["formats"]["augd"], 1);
    assert_eq!(manifest["config"]["search"]["n_rounds"], 2);
    let input = &manifest["inputs"][0];
    assert!(input["path"].as_str().unwrap().ends_with("c.toml"));
    assert_eq!(input["sha256"].as_str().unwrap().len(), 64);

    let other = search_with_seed(&cfg, &dir.path().join("c"), 7);
    assert!(other.status.success());
    let seeded = fs::read(dir.path().join("c/policy.json")).unwrap();
    assert_ne!(seeded, fs::read(a.join("policy.json")).unwrap());
}

fn search_with_seed(cfg: &Path, out: &Path, seed: u64) -> Output {
    run(&[
        "search",
        "--config",
        s(cfg),
        "--out",
        s(out),
        "--seed",
        &seed.to_string(),
    ])
}

#[test]
fn numerical_abort_exits_3_and_flushes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("[search]", "[search]\ninner_lr = 1e8"),
    );
    let out_dir = dir.path().join("out");
    let out = search(&cfg, &out_dir);
    assert_eq!(out.status.code(), Some(3));
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,round,"));
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("aborted"));
}

#[test]
fn report_svgs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run_dir = dir.path().join("run");
    assert!(search(&cfg, &run_dir).status.success());
    let rep = dir.path().join("rep");
    let out = run(&[
        "report",
        "--trace",
        s(&run_dir.join("trace.csv")),
        "--out",
        s(&rep),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["probabilities.svg", "pie.svg"] {
        let text = fs::read_to_string(rep.join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    let svg = fs::read_to_string(rep.join("probabilities.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .collect();
    assert_eq!(lines.len(), 17);
    for l in lines {
        assert_eq!(l.attribute("points").unwrap().split(' ').count(), 8);
    }
    let csv = fs::read_to_string(rep.join("probabilities.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn one_step_trace_gives_one_sample_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL
            .replace("n_rounds = 2", "n_rounds = 1")
            .replace("n_total = 14", "n_total = 11"),
    );
    let run_dir = dir.path().join("run");
    assert!(search(&cfg, &run_dir).status.success());
    let rep = dir.path().join("rep");
    let trace = run_dir.join("trace.csv");
    assert!(run(&["report", "--trace", s(&trace), "--out", s(&rep)])
        .status
        .success());
    let svg = fs::read_to_string(rep.join("probabilities.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count(),
        0
    );
    // one marker per transform, all at the same abscissa
    let xs: Vec<&str> = doc
        .descendants()
        .filter(|n| n.has_tag_name("circle"))
        .map(|n| n.attribute("cx").unwrap())
        .collect();
    assert_eq!(xs.len(), 17);
    assert!(xs.iter().all(|x| *x == xs[0]));
}

#[test]
fn empty_trace_needs_a_policy_for_the_pie() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("n_rounds = 2", "n_rounds = 0"),
    );
    let run_dir = dir.path().join("run");
    assert!(search(&cfg, &run_dir).status.success());
    let trace = run_dir.join("trace.csv");
    let rep = dir.path().join("rep");
    let out = run(&["report", "--trace", s(&trace), "--out", s(&rep)]);
    assert_eq!(out.status.code(), Some(2));
    let policy = run_dir.join("policy.json");
    let args = [
        "report",
        "--trace",
        s(&trace),
        "--policy",
        s(&policy),
        "--out",
        s(&rep),
    ];
    assert!(run(&args).status.success());
    roxmltree::Document::parse(&fs::read_to_string(rep.join("pie.svg")).unwrap()).unwrap();
}

#[test]
fn malformed_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let trace = write_config(dir.path(), "t.csv", "not,a,trace\n");
    let out = run(&["report", "--trace", s(&trace), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exported_policy_reproduces_the_trace_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run_dir = dir.path().join("run");
    assert!(search(&cfg, &run_dir).status.success());
    let trace_path = run_dir.join("trace.csv");
    let exported = dir.path().join("p.json");
    let args = [
        "export-policy",
        "--trace",
        s(&trace_path),
        "--step",
        "3",
        "--out",
        s(&exported),
    ];
    assert!(run(&args).status.success());
    let policy = Policy::from_json_str(&fs::read_to_string(&exported).unwrap()).unwrap();
    let trace = PolicyTrace::from_csv(&fs::read_to_string(&trace_path).unwrap()).unwrap();
    let row = trace.records.iter().find(|r| r.step == 3).unwrap();
    for (a, b) in policy.probs().iter().zip(&row.probs) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(policy.mag_upper(), &row.mag_upper[..]);

    // the last row of the trace is the final policy
    let last = dir.path().join("last.json");
    let args = [
        "export-policy",
        "--trace",
        s(&trace_path),
        "--out",
        s(&last),
    ];
    assert!(run(&args).status.success());
    let last = Policy::from_json_str(&fs::read_to_string(&last).unwrap()).unwrap();
    let final_policy =
        Policy::from_json_str(&fs::read_to_string(run_dir.join("policy.json")).unwrap()).unwrap();
    for (a, b) in last.probs().iter().zip(final_policy.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn convert_csv_to_augd() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_config(dir.path(), "d.csv", "1,0,255,128,64\n0,10,20,30,40\n");
    let augd = dir.path().join("d.augd");
    let args = [
        "convert",
        "--input",
        s(&csv),
        "--output",
        s(&augd),
        "--width",
        "2",
        "--height",
        "2",
        "--classes",
        "2",
    ];
    let out = run(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let data = Dataset::load(&augd).unwrap();
    assert_eq!(data.labels(), &[1, 0]);
    assert_eq!(
        data.images()[0].pixels(),
        &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]
    );

    let bad = write_config(dir.path(), "bad.csv", "1,0,255,128\n");
    let args = [
        "convert",
        "--input",
        s(&bad),
        "--output",
        s(&augd),
        "--width",
        "2",
        "--height",
        "2",
        "--classes",
        "2",
    ];
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn file_backed_data_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.augd");
    let test = dir.path().join("test.augd");
    for (path, n, seed) in [(&train, "200", "3"), (&test, "100", "4")] {
        let args = [
            "generate",
            "--n",
            n,
            "--side",
            "16",
            "--seed",
            seed,
            "--output",
            s(path),
        ];
        assert!(run(&args).status.success());
    }
    let expected = generate_synthetic(SyntheticKind::RotationInvariant, 200, 16, 3).unwrap();
    assert_eq!(Dataset::load(&train).unwrap().labels(), expected.labels());

    let text = SMALL.replace(
        "[data]\nn = 200\ntest_n = 100",
        "[data]\nsynthetic = \"\"\ntrain = \"train.augd\"\ntest = \"test.augd\"",
    );
    // `synthetic` must be absent, not empty, when files are given
    let cfg = write_config(dir.path(), "bad.toml", &text);
    assert_eq!(search(&cfg, &dir.path().join("x")).status.code(), Some(2));

    let data = "[data]\ntrain = \"train.augd\"\ntest = \"test.augd\"";
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("[data]\nn = 200\ntest_n = 100", data),
    );
    let run_dir = dir.path().join("run");
    let out = search(&cfg, &run_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = fs::read_to_string(run_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("train.augd") && manifest.contains("test.augd"));

    let policy = run_dir.join("policy.json");
    let args = [
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&run_dir),
        "--policy",
        s(&policy),
    ];
    assert!(run(&args).status.success());
    let args = [
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&run_dir),
        "--baseline",
        "uniform",
    ];
    assert!(run(&args).status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "uniform");
    assert_eq!(report["accuracies"].as_array().unwrap().len(), 2);
    let ledger = fs::read_to_string(run_dir.join("ledger.csv")).unwrap();
    assert_eq!(ledger.lines().count(), 3);

    // a synthetic kind next to data files is ambiguous
    let cfg = write_config(
        dir.path(),
        "both.toml",
        &SMALL.replace(
            "[data]\nn = 200\ntest_n = 100",
            &format!("{data}\nsynthetic = \"rotation-invariant\""),
        ),
    );
    assert_eq!(search(&cfg, &dir.path().join("x")).status.code(), Some(2));
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ensemble_cpd::experiment::ExperimentConfig;
use ensemble_cpd::scorers::{EnsembleSpec, ScorerSpec};
use ensemble_cpd::synthgen::DatasetSpec;
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ensemble-cpd"));
    c.env_remove("ENSEMBLE_CPD_OUT");
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn small_experiment(base: ScorerSpec, size: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            n_train: 60,
            n_test: 30,
            seq_length: 64,
            theta_range: [16, 48],
            seed: 7,
            ..DatasetSpec::default()
        },
        ensembles: vec![EnsembleSpec::naive(base, size, 0)],
        windows: vec![2, 4],
        ..ExperimentConfig::default()
    }
}

/// Writes a config file and returns its path.
fn config_file(dir: &Path, experiment: &ExperimentConfig, extra: Value) -> PathBuf {
    let mut v = json!({ "experiment": experiment });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

struct Run {
    _dir: TempDir,
    out: PathBuf,
    config: String,
}

impl Run {
    fn new(experiment: &ExperimentConfig, extra: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = config_file(dir.path(), experiment, extra);
        Self {
            out: dir.path().join("out"),
            config: config.to_string_lossy().into_owned(),
            _dir: dir,
        }
    }

    fn small() -> Self {
        Self::new(&small_experiment(ScorerSpec::logistic(4, 0.05, 2), 3), json!({}))
    }

    fn ok(&self, args: &[&str]) -> String {
        let mut all = vec!["--config", &self.config];
        all.extend_from_slice(args);
        ok(&self.out, &all)
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.out.join(rel)).unwrap()).unwrap()
    }

    fn pipeline(&self) {
        for c in ["generate", "score", "calibrate", "evaluate"] {
            self.ok(&[c]);
        }
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `root` with its contents, sorted by path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_generate_lists_every_sequence() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate"]);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("dataset/manifest.json")).unwrap()).unwrap();
    let seqs = manifest["sequences"].as_array().unwrap();
    assert_eq!(seqs.len(), 400 + 200);
    assert_eq!(manifest["n_train"], 400);
    let train = seqs.iter().filter(|s| s["split"] == "train").count();
    assert_eq!(train, 400);
    for s in seqs {
        assert!(dir
            .path()
            .join("dataset")
            .join(s["series"].as_str().unwrap())
            .is_file());
    }
    let labels = fs::read_to_string(dir.path().join("dataset/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 601);
}

#[test]
fn generate_is_byte_identical_for_a_repeated_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "generate",
        "--n-train",
        "12",
        "--n-test",
        "6",
        "--seq-length",
        "40",
        "--theta-range",
        "10,30",
    ];
    ok(a.path(), &args);
    ok(b.path(), &args);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));

    let c = tempfile::tempdir().unwrap();
    let mut other = args.to_vec();
    other.extend(["--seed", "1"]);
    ok(c.path(), &other);
    assert_ne!(snapshot(a.path()), snapshot(c.path()));
}

#[test]
fn invalid_theta_range_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["generate", "--seq-length", "64", "--theta-range", "60,40"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("theta_range"), "{}", stderr(&o));
    assert!(!dir.path().join("dataset").exists());

    let mut e = ExperimentConfig::default();
    e.dataset.theta_range = [10, 500];
    let path = config_file(dir.path(), &e, json!({}));
    let o = run(dir.path(), &["--config", path.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("theta_range"));
}

#[test]
fn unknown_config_keys_and_flags_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"experimant": {}}"#).unwrap();
    let o = run(dir.path(), &["--config", path.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experimant"));
    assert_eq!(
        run(dir.path(), &["generate", "--windows", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["generate", "--calibration", "platt"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ten_member_ensemble_writes_ten_row_matrices() {
    let r = Run::small();
    r.ok(&["generate"]);
    r.ok(&["score", "--ensemble-size", "10"]);
    let ensemble = r.json("model/ensemble.json");
    assert_eq!(ensemble["members"].as_array().unwrap().len(), 10);
    for split in ["holdout", "test"] {
        let dir = r.out.join("scores").join(split);
        let labels = fs::read_to_string(dir.join("labels.csv")).unwrap();
        let first = labels.lines().nth(1).unwrap().split(',').next().unwrap();
        let text = fs::read_to_string(dir.join(format!("{first}.csv"))).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|l| l.split(',').count() == 64));
        assert_eq!(text.lines().filter(|l| l.starts_with("# model_id=")).count(), 10);
    }
    // 30 hold-out sequences from 60 training sequences at the default 0.5.
    assert_eq!(fs::read_dir(r.out.join("scores/holdout")).unwrap().count(), 31);
}

fn external(dir: &Path, matrix: &str, labels: &str) -> (PathBuf, PathBuf) {
    let ext = dir.join("ext");
    fs::create_dir_all(&ext).unwrap();
    fs::write(ext.join("s1.csv"), matrix).unwrap();
    let l = ext.join("labels.csv");
    fs::write(&l, labels).unwrap();
    (ext, l)
}

#[test]
fn external_matrices_pass_through_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = "# model_id=a\n# model_id=b\n0.10, 0.2,0.30\n1,0.000,0.5\n";
    let (ext, labels) = external(dir.path(), matrix, "sequence_id,has_cp,theta,length\ns1,1,1,3\n");
    let out = dir.path().join("out");
    ok(
        &out,
        &[
            "score",
            "--external-scores",
            ext.to_str().unwrap(),
            "--external-labels",
            labels.to_str().unwrap(),
        ],
    );
    assert_eq!(
        fs::read_to_string(out.join("scores/test/s1.csv")).unwrap(),
        matrix
    );
    assert_eq!(
        fs::read(out.join("scores/test/labels.csv")).unwrap(),
        fs::read(&labels).unwrap()
    );
}

#[test]
fn invalid_external_matrices_exit_with_data_code() {
    let labels = "sequence_id,has_cp,theta,length\ns1,1,1,3\n";
    for (matrix, needle) in [
        ("0.1,0.2,0.3\n0.5,0.4,1.5\n", "row 1 col 2"),
        ("0.1,0.2,0.3\n0.5,x,0.2\n", "row 1 col 1"),
        ("0.1,0.2,0.3\n0.5,0.2\n", "length"),
        ("0.1,0.2\n0.5,0.2\n", "labels say length 3"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let (ext, l) = external(dir.path(), matrix, labels);
        let out = dir.path().join("out");
        let o = run(
            &out,
            &[
                "score",
                "--external-scores",
                ext.to_str().unwrap(),
                "--external-labels",
                l.to_str().unwrap(),
            ],
        );
        assert_eq!(o.status.code(), Some(3), "{matrix:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{matrix:?}: {}", stderr(&o));
        assert!(!out.join("scores").exists());
    }
}

#[test]
fn calibration_none_echoes_the_raw_ece() {
    let r = Run::small();
    r.ok(&["generate"]);
    r.ok(&["score"]);
    r.ok(&["calibrate", "--calibration", "none"]);
    let report = r.json("calibration/report.json");
    assert_eq!(report["kind"], "none");
    assert_eq!(report["evaluated_on"], "test");
    assert_eq!(report["ece_before"], report["ece_after"]);
    let cals = r.json("calibration/calibrators.json");
    assert!(cals["members"]
        .as_array()
        .unwrap()
        .iter()
        .all(|m| m["calibrator"]["kind"] == "none"));
}

#[test]
fn beta_calibration_lowers_ece_on_warped_scores() {
    let base = ScorerSpec::logistic(4, 0.05, 2).with_miscalibration(2.0);
    let r = Run::new(&small_experiment(base, 3), json!({}));
    r.ok(&["generate"]);
    r.ok(&["score"]);
    r.ok(&["calibrate"]);
    let report = r.json("calibration/report.json");
    assert_eq!(report["kind"], "beta");
    let (before, after) = (
        report["ece_before"].as_f64().unwrap(),
        report["ece_after"].as_f64().unwrap(),
    );
    assert!(after < before, "{after} vs {before}");
    let cals = r.json("calibration/calibrators.json");
    let members = cals["members"].as_array().unwrap();
    assert_eq!(members.len(), 3);
    assert!(members.iter().all(|m| m["calibrator"]["kind"] == "beta"));
}

#[test]
fn single_class_holdout_fails_to_fit_and_names_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let ext = dir.path().join("ext");
    fs::create_dir_all(&ext).unwrap();
    let mut labels = String::from("sequence_id,has_cp,theta,length\n");
    for id in ["quiet_a", "quiet_b"] {
        fs::write(
            ext.join(format!("{id}.csv")),
            "0.1,0.2,0.1,0.3\n0.2,0.2,0.1,0.0\n",
        )
        .unwrap();
        labels.push_str(&format!("{id},0,,4\n"));
    }
    fs::write(ext.join("labels.csv"), labels).unwrap();
    let out = dir.path().join("out");
    let l = ext.join("labels.csv");
    ok(
        &out,
        &[
            "score",
            "--external-scores",
            ext.to_str().unwrap(),
            "--external-labels",
            l.to_str().unwrap(),
            "--split",
            "holdout",
        ],
    );
    let o = run(&out, &["calibrate"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("quiet_a") && stderr(&o).contains("quiet_b"),
        "{}",
        stderr(&o)
    );

    // Identity calibration needs no second class.
    ok(&out, &["calibrate", "--calibration", "none"]);
    assert_eq!(
        serde_json::from_str::<Value>(&fs::read_to_string(out.join("calibration/report.json")).unwrap())
            .unwrap()["evaluated_on"],
        "holdout"
    );
}

#[test]
fn commands_report_missing_inputs_as_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["score", "calibrate", "aggregate", "evaluate"] {
        let o = run(dir.path(), &[c]);
        assert_eq!(o.status.code(), Some(3), "{c}: {}", stderr(&o));
    }
}

#[test]
fn evaluate_report_has_one_row_per_family_and_the_selected_window() {
    let r = Run::small();
    r.pipeline();
    let report = r.json("report.json");
    let per_family = report["per_family"].as_array().unwrap();
    assert_eq!(per_family.len(), 5);
    let window = report["selected_window"].as_u64().unwrap();
    assert!([2, 4].contains(&window));
    assert_eq!(report["window_selected_on"], "holdout");
    assert_eq!(per_family[4]["name"], format!("window-w1-w{window}"));
    // Four pointwise families plus one entry per window size.
    assert_eq!(report["aggregations"].as_array().unwrap().len(), 6);
    for a in report["aggregations"].as_array().unwrap() {
        let best = a["best_f1"].as_f64().unwrap();
        let fixed = a["f1_at_fixed"].as_f64().unwrap();
        assert!(fixed <= best);
        assert_eq!(a["gap"].as_f64().unwrap(), best - fixed);
    }
    let ranks = &report["rank_table"];
    assert_eq!(
        ranks["aggregations"],
        json!(["max", "mean", "median", "min", "window_distance"])
    );
    let mean_ranks: Vec<f64> = ranks["mean_ranks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(mean_ranks.iter().sum::<f64>(), 15.0);

    let counts = fs::read_to_string(r.out.join("plots/threshold_count.csv")).unwrap();
    assert_eq!(counts.lines().next(), Some("n_thresholds,best_f1"));
    assert_eq!(counts.lines().count(), 1 + 9);
    let curve = fs::read_to_string(r.out.join("plots/distance_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("threshold,f1,distance_kind"));
    for kind in ["w1", "w2", "mmd"] {
        assert!(curve.lines().any(|l| l.ends_with(&format!(",{kind}"))));
    }
}

#[test]
fn fixed_protocol_ranks_by_f1_at_half() {
    let r = Run::small();
    r.pipeline();
    r.ok(&["evaluate", "--protocol", "fixed"]);
    let report = r.json("report.json");
    assert_eq!(report["protocol"], "fixed");
    assert_eq!(report["fixed_threshold"], 0.5);
    let fixed: Vec<(String, f64)> = report["per_family"]
        .as_array()
        .unwrap()
        .iter()
        .zip(["mean", "min", "max", "median", "window_distance"])
        .map(|(p, family)| (family.to_string(), p["f1_at_fixed"].as_f64().unwrap()))
        .collect();
    let table = &report["rank_table"];
    let rank_of = |family: &str| {
        let i = table["aggregations"]
            .as_array()
            .unwrap()
            .iter()
            .position(|a| a == family)
            .unwrap();
        table["cells"][0]["ranks"][i].as_f64().unwrap()
    };
    for (fa, a) in &fixed {
        for (fb, b) in &fixed {
            if a > b {
                assert!(rank_of(fa) < rank_of(fb), "{fixed:?} {table}");
            }
            if a == b {
                assert_eq!(rank_of(fa), rank_of(fb));
            }
        }
    }
}

#[test]
fn reruns_produce_identical_artifacts() {
    let a = Run::small();
    let b = Run::small();
    a.pipeline();
    b.pipeline();
    assert_eq!(snapshot(&a.out), snapshot(&b.out));
}

#[test]
fn aggregate_writes_traces_and_detections() {
    let r = Run::small();
    r.pipeline();
    r.ok(&["aggregate", "--threshold", "0.6"]);
    let trace = fs::read_to_string(r.out.join("traces/window-w1-w2/test_00000.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "t,w_t");
    assert_eq!(lines.len(), 1 + 64);
    // A window of 2 leaves the first four steps at zero.
    assert!(lines[1..5].iter().all(|l| l.ends_with(",0.0")));
    let det = fs::read_to_string(r.out.join("detections.csv")).unwrap();
    assert_eq!(
        det.lines().next(),
        Some("aggregation,sequence_id,alarm,tau,has_cp,theta")
    );
    assert_eq!(det.lines().count(), 1 + 6 * 30);
}

#[test]
fn sweep_uses_the_selected_window() {
    let r = Run::small();
    r.pipeline();
    let window = r.json("report.json")["selected_window"].as_u64().unwrap();
    r.ok(&["sweep", "--aggregation", "wwaggr"]);
    let path = r.out.join(format!("sweeps/window-w1-w{window}.csv"));
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("threshold,f1,tp,fp_only,fn_only,fp_fn,tn")
    );
    for line in text.lines().skip(1) {
        let f: Vec<usize> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(f.iter().sum::<usize>(), 30);
    }
    r.ok(&["sweep", "--aggregation", "median"]);
    assert!(r.out.join("sweeps/median.csv").is_file());
}

#[test]
fn rank_combines_reports() {
    let a = Run::small();
    let mut e = small_experiment(ScorerSpec::logistic(4, 0.05, 2), 3);
    e.dataset.seed = 8;
    let b = Run::new(&e, json!({}));
    a.pipeline();
    b.pipeline();
    let dir = tempfile::tempdir().unwrap();
    let ra = a.out.join("report.json");
    let rb = b.out.join("report.json");
    ok(dir.path(), &["rank", ra.to_str().unwrap(), rb.to_str().unwrap()]);
    let rank: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rank.json")).unwrap()).unwrap();
    assert_eq!(rank["table"]["cells"].as_array().unwrap().len(), 2);
    assert_eq!(rank["table"]["mean_ranks"].as_array().unwrap().len(), 5);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_root = dir.path().join("from_env");
    let o = bin()
        .current_dir(dir.path())
        .env("ENSEMBLE_CPD_OUT", &env_root)
        .args(["generate", "--n-train", "4", "--n-test", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_root.join("dataset/manifest.json").is_file());

    let flag_root = dir.path().join("from_flag");
    let o = bin()
        .env("ENSEMBLE_CPD_OUT", &env_root)
        .args(["generate", "--n-train", "4", "--n-test", "2", "--out"])
        .arg(&flag_root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_root.join("dataset/manifest.json").is_file());
}

#[test]
fn thresholds_from_the_config_file_are_used() {
    let r = Run::new(
        &small_experiment(ScorerSpec::logistic(4, 0.05, 2), 3),
        json!({"threshold_counts": [1, 4], "protocol": "fixed"}),
    );
    r.pipeline();
    let counts = fs::read_to_string(r.out.join("plots/threshold_count.csv")).unwrap();
    assert_eq!(counts.lines().count(), 3);
    assert_eq!(r.json("report.json")["protocol"], "fixed");
}

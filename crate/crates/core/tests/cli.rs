use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fmm::cli::ModelArchive;
use fmm::design::{load_dataset, save_dataset, MixedEffectTarget};
use fmm::predict::Predictor;
use fmm::simulate::{generate, SimulationConfig};
use fmm::smoothing::SmoothingMode;
use fmm::solver::{fit, FitConfig};

fn fmm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn data_file(dir: &Path, n: usize, m: usize) -> PathBuf {
    let config = SimulationConfig { n, m, ..Default::default() };
    let (data, _) = generate(&config, 0).unwrap();
    let path = dir.join("data.csv");
    save_dataset(&data, &path).unwrap();
    path
}

/// Data rows of a CSV written with a leading comment line.
fn rows(text: &str) -> Vec<Vec<String>> {
    assert!(text.starts_with("# config_sha256="));
    text.lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fmm(&["fit", "--input", "absent.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    assert_eq!(fmm(&["fit"], dir.path()).status.code(), Some(2));
    assert_eq!(fmm(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(fmm(&["simulate", "--n", "1"], dir.path()).status.code(), Some(2));
    let data = data_file(dir.path(), 20, 2);
    let out = fmm(
        &["fit", "--input", data.to_str().unwrap(), "--smoothing", "fixed", "--lambda", "1.0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixed_smoothing_is_echoed_and_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = data_file(dir.path(), 40, 3);
    let out = fmm(
        &[
            "fit", "--input", "data.csv", "--out", "fit", "--smoothing", "fixed", "--lambda", "1.0", "--eta", "1.0",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let archive = ModelArchive::load(&dir.path().join("fit/model.json")).unwrap();
    assert_eq!(archive.smoothing.lambda, vec![1.0]);
    assert_eq!(archive.smoothing.eta, vec![1.0]);
    let diag = fs::read_to_string(dir.path().join("fit/diagnostics.txt")).unwrap();
    assert!(diag.starts_with(&format!("# config_sha256={}", archive.config_sha256)));
    assert!(diag.contains("converged: true"));

    // the archive rebuilds the library fit exactly
    let data = load_dataset(&data_path, None).unwrap();
    let config = FitConfig {
        smoothing: SmoothingMode::fixed(vec![1.0], vec![1.0]),
        ..FitConfig::default()
    };
    let direct = fit(&data, &config).unwrap();
    assert_eq!(archive.model().unwrap(), direct);

    let out = fmm(
        &["predict", "--input", "data.csv", "--model", "fit/model.json", "--t0", "0.3", "--out", "pred"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("pred/predictions.csv")).unwrap();
    assert_eq!(
        text.lines().nth(1).unwrap(),
        "target,subject,t0,A_naive,A_corrected,MSE_first,MSE_plugin,lower,upper"
    );
    let table = rows(&text);
    assert_eq!(table.len(), data.n());

    let design = direct.design(&data).unwrap();
    let predictor = Predictor::new(&direct, &design).unwrap();
    for (i, row) in table.iter().enumerate() {
        assert_eq!(row[1], data.subjects()[i].id);
        let lib = predictor.predict(&MixedEffectTarget::subject_mean(&data, i, 0.3)).unwrap();
        assert_eq!(num(&row[3]), lib.a_naive);
        assert_eq!(num(&row[4]), lib.a_corrected);
        assert_eq!(num(&row[5]), lib.mse_first_order);
        assert_eq!(num(&row[6]), lib.mse_plugin);
        assert_eq!(num(&row[7]), lib.interval.0);
        assert_eq!(num(&row[8]), lib.interval.1);
    }
}

#[test]
fn fixed_effect_target_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    data_file(dir.path(), 40, 3);
    let config = r#"{"input": "data.csv", "out": "from_config", "basis": {"fixed_order": 4, "fixed_interior_knots": 3,
        "random_order": 4, "random_interior_knots": 3},
        "smoothing": {"lambda": {"rule": "fixed", "values": [5.0]}, "eta": {"rule": "fixed", "values": [2.0]}}}"#;
    fs::write(dir.path().join("run.json"), config).unwrap();
    // --eta overrides the file, everything else comes from it
    let out = fmm(&["fit", "--config", "run.json", "--eta", "3.0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let archive = ModelArchive::load(&dir.path().join("from_config/model.json")).unwrap();
    assert_eq!(archive.config.basis.fixed_interior_knots, 3);
    assert_eq!(archive.smoothing.lambda, vec![5.0]);
    assert_eq!(archive.smoothing.eta, vec![3.0]);

    let targets = r#"[{"l0": [1.0], "d0": {}, "t0": 0.5}, {"l0": [1.0], "d0": {"2": [0.0]}, "t0": 0.5}]"#;
    fs::write(dir.path().join("targets.json"), targets).unwrap();
    let out = fmm(
        &[
            "predict", "--input", "data.csv", "--model", "from_config/model.json", "--targets", "targets.json",
            "--out", "p",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = rows(&fs::read_to_string(dir.path().join("p/predictions.csv")).unwrap());
    assert_eq!(table.len(), 2);
    let model = archive.model().unwrap();
    let basis = model.bases().unwrap().0;
    let fixed_estimate = basis.eval(0.5).unwrap().dot(&model.theta);
    for row in &table {
        assert!((num(&row[3]) - fixed_estimate).abs() < 1e-12);
        let centre = 0.5 * (num(&row[7]) + num(&row[8]));
        assert!((centre - num(&row[4])).abs() < 1e-12);
    }
    assert_eq!(table[0][3..], table[1][3..]);
}

#[test]
fn mismatched_data_is_an_incompatibility() {
    let dir = tempfile::tempdir().unwrap();
    data_file(dir.path(), 40, 3);
    let out = fmm(&["fit", "--input", "data.csv", "--out", "f", "--lambda", "1", "--eta", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let wider: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l},x2") } else { format!("{l},0.5") })
        .collect();
    fs::write(dir.path().join("wide.csv"), wider.join("\n")).unwrap();
    let out = fmm(&["predict", "--input", "wide.csv", "--model", "f/model.json", "--t0", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p = 1") && err.contains("p = 2"), "{err}");
}

#[test]
fn numerical_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // every response identical: the variance score has no root
    let mut csv = String::from("subject,t,y,x1,z1\n");
    for i in 0..12 {
        for j in 0..3 {
            csv.push_str(&format!("s{i},{},1.0,1.0,1.0\n", (i * 3 + j) as f64 / 40.0));
        }
    }
    fs::write(dir.path().join("flat.csv"), csv).unwrap();
    let out = fmm(&["fit", "--input", "flat.csv", "--order", "2", "--knots", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_deterministic_and_recomputable() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--case", "II", "--n", "20", "--K", "6", "--seed", "12"];
    let run = |out: &str, jobs: &str| {
        let mut args = base.to_vec();
        args.extend(["--jobs", jobs, "--out", out]);
        let o = fmm(&args, dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a", "1");
    run("b", "1");
    run("c", "3");
    for file in ["raw.csv", "summary.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap());
        assert_eq!(a, fs::read(dir.path().join("c").join(file)).unwrap());
    }

    let raw = rows(&fs::read_to_string(dir.path().join("a/raw.csv")).unwrap());
    let summary = rows(&fs::read_to_string(dir.path().join("a/summary.csv")).unwrap());
    assert_eq!(raw.len(), 20 * 6);
    let n = 20;
    let k = 6.0;
    let mut sq = vec![0.0; n];
    let mut est = vec![0.0; n];
    let mut hit = vec![0.0; n];
    for r in &raw {
        let i: usize = r[1].parse().unwrap();
        sq[i] += (num(&r[4]) - num(&r[2])).powi(2);
        est[i] += num(&r[6]);
        hit[i] += num(&r[9]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let true_mse: Vec<f64> = sq.iter().map(|v| v / k).collect();
    let rel: Vec<f64> = (0..n).map(|i| (est[i] / k - true_mse[i]) / true_mse[i]).collect();
    let cov: Vec<f64> = hit.iter().map(|h| h / k).collect();
    let row = &summary[0];
    assert!((num(&row[6]) - mean(&cov)).abs() < 1e-12);
    assert!((num(&row[9]) - mean(&rel)).abs() < 1e-12);
    assert!((num(&row[11]) - mean(&true_mse)).abs() < 1e-12);

    let timing = fs::read_to_string(dir.path().join("a/timing.txt")).unwrap();
    assert!(timing.starts_with("# config_sha256="));
}

#[test]
fn cli_simulation_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = fmm(
        &["simulate", "--n", "15", "--K", "3", "--seed", "8", "--m", "2", "--jobs", "1", "--out", "s"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = SimulationConfig {
        n: 15,
        m: 2,
        replicates: 3,
        master_seed: 8,
        ..Default::default()
    };
    let report = fmm::simulate::run_study(&config, &fmm::simulate::RunOptions { jobs: 1, infinite_intervals: false }).unwrap();
    let mut raw = Vec::new();
    fmm::simulate::write_raw_csv(&config, &report, &mut raw).unwrap();
    assert_eq!(raw, fs::read(dir.path().join("s/raw.csv")).unwrap());
    let mut summary = Vec::new();
    fmm::simulate::write_summary_csv(&config, &report, &mut summary).unwrap();
    assert_eq!(summary, fs::read(dir.path().join("s/summary.csv")).unwrap());
}

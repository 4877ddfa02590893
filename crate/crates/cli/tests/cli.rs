use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use addgp::friedman::friedman_rows;
use addgp::oracle::exact_sum_posterior;
use addgp::{Dataset, FittedState, SavedModel};
use addgp_cli::csvio::{format_float, read_table, table_to_string};
use ndarray::{s, Array1, Array2};
use tempfile::TempDir;

fn addgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_addgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = addgp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in report"))
        .to_string()
}

fn write_csv(path: &Path, header: &[&str], rows: &Array2<f64>) {
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    std::fs::write(path, table_to_string(&header, &rows.view())).unwrap();
}

/// `n` points of `sin(5x)` on `[0, 1]` with optional noise-free spacing.
fn sine_data(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let x = (i as f64 + 0.5) / n as f64;
        if j == 0 {
            x
        } else {
            (5.0 * x).sin()
        }
    })
}

fn synth(dir: &Path, name: &str, seed: u64, n: usize, noise: f64) -> PathBuf {
    let p = dir.join(name);
    ok(&[
        "--seed",
        &seed.to_string(),
        "synth",
        "--n",
        &n.to_string(),
        "--noise-sd",
        &noise.to_string(),
        "--output",
        path_str(&p),
    ]);
    p
}

#[test]
fn synth_shape_and_noise_level() {
    let dir = TempDir::new().unwrap();
    let noisy = read_table(&synth(dir.path(), "noisy.csv", 3, 4000, 1.0)).unwrap();
    let clean = read_table(&synth(dir.path(), "clean.csv", 3, 4000, 0.0)).unwrap();
    assert_eq!(noisy.header, ["x1", "x2", "x3", "x4", "x5", "x6", "y"]);
    assert_eq!(noisy.rows.dim(), (4000, 7));
    let x = clean.rows.slice(s![.., ..6]).to_owned();
    assert_eq!(x, noisy.rows.slice(s![.., ..6]));
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    // Without noise the target is the test function itself.
    let f = friedman_rows(&x.view());
    assert_eq!(clean.rows.column(6), f);
    let r = &noisy.rows.column(6) - &f;
    let mean = r.mean().unwrap();
    let var = r.mapv(|v| (v - mean).powi(2)).sum() / (r.len() - 1) as f64;
    assert!((0.9..=1.1).contains(&var), "residual variance {var}");
}

#[test]
fn synth_reports_generator_and_seed() {
    let dir = TempDir::new().unwrap();
    let out = ok(&[
        "--seed",
        "11",
        "synth",
        "--n",
        "5",
        "--output",
        path_str(&dir.path().join("a.csv")),
    ]);
    assert!(out.contains("rng: ChaCha20"));
    assert!(out.contains("seed: 11"));
}

#[test]
fn full_fit_reaches_exact_evidence() {
    let dir = TempDir::new().unwrap();
    let mut rows = sine_data(10);
    rows.column_mut(1)
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v += 0.1 * ((i * 7 % 5) as f64 - 2.0));
    let data = dir.path().join("toy.csv");
    write_csv(&data, &["x", "y"], &rows);
    let model = dir.path().join("toy.json");
    let report = ok(&[
        "fit",
        "--data",
        path_str(&data),
        "--output",
        path_str(&model),
        "--structure",
        "full",
        "--kernel",
        "se",
        "--optimize-hypers",
        "false",
        "--rel-tol",
        "1e-14",
        "--grad-tol",
        "1e-10",
    ]);
    let elbo: f64 = report_value(&report, "elbo").parse().unwrap();
    let saved = SavedModel::from_text(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert!(matches!(saved.state, FittedState::Full(_)));
    let x = rows.slice(s![.., ..1]).to_owned();
    let y: Array1<f64> = rows.column(1).to_owned();
    let noise = saved.lik.noise_variance().unwrap();
    let exact = exact_sum_posterior(
        &saved.specs,
        &Dataset::new(x.clone(), y).unwrap(),
        noise,
        &x.view(),
    )
    .unwrap();
    assert!(elbo <= exact.log_evidence + 1e-8);
    assert!(
        (elbo - exact.log_evidence).abs() < 1e-5,
        "{elbo} vs {}",
        exact.log_evidence
    );
}

#[test]
fn malformed_csv_names_the_row_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "x,y\n0.1,1.0\n0.2,2.0\n0.3,abc\n").unwrap();
    let model = dir.path().join("m.json");
    let out = addgp(&[
        "fit",
        "--data",
        path_str(&data),
        "--output",
        path_str(&model),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3"), "{err}");
    assert!(err.contains('y'), "{err}");
    assert!(!model.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

fn sine_model(dir: &Path, noise_variance: &str) -> PathBuf {
    let data = dir.join("sine.csv");
    write_csv(&data, &["x", "y"], &sine_data(30));
    let model = dir.join("sine.json");
    ok(&[
        "fit",
        "--data",
        path_str(&data),
        "--output",
        path_str(&model),
        "--kernel",
        "se",
        "--inducing",
        "20",
        "--noise-variance",
        noise_variance,
    ]);
    model
}

#[test]
fn predict_empty_query_writes_only_the_header() {
    let dir = TempDir::new().unwrap();
    let model = sine_model(dir.path(), "1e-2");
    let query = dir.path().join("q.csv");
    std::fs::write(&query, "x\n").unwrap();
    let out = ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--query",
        path_str(&query),
    ]);
    assert_eq!(out, "mean,variance\n");
}

#[test]
fn predictions_survive_the_model_file_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let model = sine_model(dir.path(), "1e-2");
    let text = std::fs::read_to_string(&model).unwrap();
    let saved = SavedModel::from_text(&text).unwrap();
    assert_eq!(saved.to_text(), text);
    let xq = Array2::from_shape_fn((17, 1), |(i, _)| i as f64 / 16.0);
    let query = dir.path().join("q.csv");
    write_csv(&query, &["x"], &xq);
    let out = dir.path().join("p.csv");
    ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--query",
        path_str(&query),
        "--output",
        path_str(&out),
    ]);
    let got = read_table(&out).unwrap();
    let want = saved.predict(&xq.view(), false).unwrap();
    assert_eq!(got.header, ["mean", "variance"]);
    for i in 0..17 {
        assert_eq!(got.rows[[i, 0]].to_bits(), want.mu_sum[i].to_bits());
        assert_eq!(got.rows[[i, 1]].to_bits(), want.var_sum[i].to_bits());
    }
}

#[test]
fn near_noiseless_fit_interpolates() {
    let dir = TempDir::new().unwrap();
    let model = sine_model(dir.path(), "1e-6");
    let xq = Array2::from_shape_fn((40, 1), |(i, _)| 0.05 + 0.9 * i as f64 / 39.0);
    let query = dir.path().join("q.csv");
    write_csv(&query, &["x"], &xq);
    let text = ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--query",
        path_str(&query),
    ]);
    let out = dir.path().join("p.csv");
    std::fs::write(&out, text).unwrap();
    let p = read_table(&out).unwrap();
    let se: f64 = (0..40)
        .map(|i| (p.rows[[i, 0]] - (5.0 * xq[[i, 0]]).sin()).powi(2))
        .sum();
    let rmse = (se / 40.0).sqrt();
    assert!(rmse < 0.05, "rmse {rmse}");
    assert!(p.rows.column(1).iter().all(|&v| v > 0.0));
}

#[test]
fn query_with_wrong_width_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let model = sine_model(dir.path(), "1e-2");
    let query = dir.path().join("q.csv");
    std::fs::write(&query, "a,b,c\n0.1,0.2,0.3\n").unwrap();
    let out = addgp(&[
        "predict",
        "--model",
        path_str(&model),
        "--query",
        path_str(&query),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn small_friedman_fit(dir: &Path, extra: &[&str]) -> (PathBuf, String) {
    let data = synth(dir, "train.csv", 5, 300, 1.0);
    let model = dir.join("friedman.json");
    let mut args = vec![
        "--seed",
        "5",
        "fit",
        "--data",
        path_str(&data),
        "--output",
        path_str(&model),
        "--max-iter",
        "40",
    ];
    args.extend_from_slice(extra);
    let report = ok(&args);
    (model, report)
}

#[test]
fn decompose_writes_one_file_per_component() {
    let dir = TempDir::new().unwrap();
    let (model, report) = small_friedman_fit(dir.path(), &[]);
    assert_eq!(report_value(&report, "components"), "7");
    assert_eq!(report_value(&report, "kernel"), "anova");
    let out_dir = dir.path().join("effects");
    let summary = ok(&[
        "decompose",
        "--model",
        path_str(&model),
        "--output-dir",
        path_str(&out_dir),
        "--points",
        "25",
        "--points-2d",
        "6",
    ]);
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let want: Vec<String> = (1..=6)
        .map(|d| format!("component_{}_x{d}.csv", d - 1))
        .chain(["component_6_x1_x2.csv".to_string()])
        .collect();
    assert_eq!(names, want);
    assert_eq!(summary.lines().count(), 7);
    let uni = read_table(&out_dir.join("component_3_x4.csv")).unwrap();
    assert_eq!(uni.header, ["x4", "mean", "variance"]);
    assert_eq!(uni.rows.nrows(), 25);
    assert_eq!(uni.rows[[0, 0]], 0.0);
    assert_eq!(uni.rows[[24, 0]], 1.0);
    let bi = read_table(&out_dir.join("component_6_x1_x2.csv")).unwrap();
    assert_eq!(bi.header, ["x1", "x2", "mean", "variance"]);
    assert_eq!(bi.rows.nrows(), 36);
    assert!(bi.rows.column(3).iter().all(|&v| v > 0.0));
}

#[test]
fn bench_single_cell_reports_no_fit() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("timings.csv");
    let out = ok(&[
        "bench",
        "--c-grid",
        "1",
        "--n-grid",
        "200",
        "--sweep-n",
        "200",
        "--sweep-c",
        "1",
        "--m",
        "4",
        "--repeats",
        "1",
        "--output",
        path_str(&csv),
    ]);
    assert!(out.contains("kl_growth_exponent_c: not fitted"), "{out}");
    assert!(out.contains("elbo_linear_r2_n: not fitted"), "{out}");
    let t = read_table(&csv).unwrap();
    assert_eq!(t.header, ["n", "m", "c", "r", "kl_seconds", "elbo_seconds"]);
    assert_eq!(t.rows.nrows(), 1);
    assert_eq!(&t.rows.row(0).to_vec()[..4], &[200.0, 4.0, 1.0, 4.0]);
    assert!(t.rows[[0, 4]] > 0.0 && t.rows[[0, 5]] > 0.0);
}

#[test]
fn exit_codes() {
    assert_eq!(addgp(&["--help"]).status.code(), Some(0));
    assert_eq!(addgp(&["--version"]).status.code(), Some(0));
    assert_eq!(addgp(&[]).status.code(), Some(1));
    assert_eq!(addgp(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(addgp(&["fit"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.csv");
    let model = dir.path().join("m.json");
    let code = |args: &[&str]| addgp(args).status.code();
    assert_eq!(
        code(&[
            "fit",
            "--data",
            path_str(&missing),
            "--output",
            path_str(&model)
        ]),
        Some(2)
    );
    let data = dir.path().join("d.csv");
    write_csv(&data, &["x", "y"], &sine_data(8));
    assert_eq!(
        code(&[
            "fit",
            "--data",
            path_str(&data),
            "--output",
            path_str(&model),
            "--structure",
            "dense"
        ]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "fit",
            "--data",
            path_str(&data),
            "--output",
            path_str(&model),
            "--likelihood",
            "poisson"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["--threads", "0", "synth", "--output", path_str(&data)]),
        Some(1)
    );
    std::fs::write(&model, "not a model").unwrap();
    assert_eq!(
        code(&[
            "predict",
            "--model",
            path_str(&model),
            "--query",
            path_str(&data)
        ]),
        Some(2)
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 4\n\n[synth]\nn = 12\nnoise_sd = 0.0\noutput = {:?}\n",
            path_str(&out)
        ),
    )
    .unwrap();
    let text = ok(&["--config", path_str(&cfg), "synth"]);
    assert!(text.contains("seed: 4"));
    assert_eq!(read_table(&out).unwrap().rows.nrows(), 12);
    ok(&["--config", path_str(&cfg), "synth", "--n", "3"]);
    assert_eq!(read_table(&out).unwrap().rows.nrows(), 3);
    std::fs::write(&cfg, "[synth]\nrows = 3\n").unwrap();
    assert_eq!(
        addgp(&["--config", path_str(&cfg), "synth"]).status.code(),
        Some(1)
    );
}

#[test]
fn identical_seeds_give_identical_files() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (ma, ra) = small_friedman_fit(a.path(), &["--threads", "2"]);
    let (mb, rb) = small_friedman_fit(b.path(), &["--threads", "2"]);
    assert_eq!(
        std::fs::read(a.path().join("train.csv")).unwrap(),
        std::fs::read(b.path().join("train.csv")).unwrap()
    );
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    let strip = |r: &str| {
        r.lines()
            .filter(|l| !l.starts_with("wall_seconds") && !l.starts_with("model:"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&ra), strip(&rb));
}

#[test]
fn negative_zero_is_written_unsigned() {
    assert_eq!(format_float(-0.0), format_float(0.0));
}

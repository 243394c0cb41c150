use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn cuot(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuot"))
        .args(args)
        .env("CUOT_OUT_DIR", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A run's metrics report without its wall-clock time.
fn metrics(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("metrics.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("wall_seconds");
    v
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

/// Smoke preset echoed to TOML, with `edit` applied to the text.
fn smoke_config(root: &Path, name: &str, edit: impl Fn(String) -> String) -> std::path::PathBuf {
    let out = cuot(
        &[
            "train",
            "--preset",
            "smoke",
            "--out",
            root.join("seed").to_str().unwrap(),
        ],
        root,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = edit(fs::read_to_string(root.join("seed/config.toml")).unwrap());
    let path = root.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn smoke_training_is_fast_and_stamped() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = cuot(&["train", "--preset", "smoke"], tmp.path());
    assert!(t.elapsed().as_secs_f64() < 10.0);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("paper/smoke/seed-0");
    for f in [
        "config.toml",
        "version.txt",
        "metrics.json",
        "checkpoint.json",
        "losses.csv",
        "samples.csv",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(dir.join("version.txt"))
        .unwrap()
        .starts_with("cuot "));
    let echoed = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(echoed.contains("noise = "), "defaults are written out");

    // Re-running from the echoed config reproduces the metrics bitwise.
    let again = tmp.path().join("again");
    let out = cuot(
        &[
            "train",
            "--config",
            dir.join("config.toml").to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(metrics(&dir), metrics(&again));
}

#[test]
fn paper_presets_echo_paper_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cuot(
        &[
            "generate-data",
            "--preset",
            "circles-cuotm",
            "--out",
            tmp.path().join("d").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(tmp.path().join("d/config.toml")).unwrap();
    for needle in [
        "tau = 0.0007",
        "psi1 = \"kl\"",
        "psi2 = \"kl\"",
        "r1_gamma = 0.1",
        "epochs = 800",
        "batch_size = 256",
    ] {
        assert!(text.contains(needle), "{needle}");
    }
    let out = cuot(
        &[
            "generate-data",
            "--preset",
            "circles-cotm",
            "--out",
            tmp.path().join("b").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let base = fs::read_to_string(tmp.path().join("b/config.toml")).unwrap();
    assert!(base.contains("psi1 = \"identity\"") && base.contains("tau = 0.0007"));
}

#[test]
fn generate_data_sizes_outliers_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = cuot(
            &[
                "generate-data",
                "--preset",
                "circles-cuotm",
                "--out",
                d.to_str().unwrap(),
            ],
            tmp.path(),
        );
        assert_eq!(code(&out), 0);
    }
    assert_eq!(lines(&a.join("train.csv")), 20_001);
    assert_eq!(lines(&a.join("test.csv")), 5_001);
    for f in ["train.csv", "test.csv", "stats.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let o = tmp.path().join("o");
    let out = cuot(
        &[
            "generate-data",
            "--preset",
            "circles-outlier-3-4-cuotm",
            "--out",
            o.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let flagged = fs::read_to_string(o.join("train.csv"))
        .unwrap()
        .lines()
        .filter(|l| l.ends_with(",1"))
        .count();
    assert_eq!(flagged, 200);
}

#[test]
fn training_from_generated_data_matches_in_memory_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        code(&cuot(
            &[
                "generate-data",
                "--preset",
                "smoke",
                "--out",
                data.to_str().unwrap()
            ],
            tmp.path()
        )),
        0
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = cuot(
        &[
            "train",
            "--preset",
            "smoke",
            "--data",
            data.to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        code(&cuot(
            &["train", "--preset", "smoke", "--out", b.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    assert_eq!(metrics(&a), metrics(&b));
    // Data generated for another seed is refused.
    let out = cuot(
        &[
            "train",
            "--preset",
            "smoke",
            "--seed",
            "4",
            "--data",
            data.to_str().unwrap(),
            "--out",
            b.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_is_deterministic_and_identity_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(
        code(&cuot(
            &["train", "--preset", "smoke", "--out", run.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    let e1 = cuot(&["evaluate", "--run", run.to_str().unwrap()], tmp.path());
    let e2 = cuot(&["evaluate", "--run", run.to_str().unwrap()], tmp.path());
    assert_eq!(code(&e1), 0);
    assert_eq!(stdout(&e1), stdout(&e2));
    assert!(run.join("evaluation.json").exists());
    let id = cuot(
        &[
            "evaluate",
            "--run",
            run.to_str().unwrap(),
            "--debug-identity",
            "--out",
            tmp.path().join("id.json").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&id), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&id)).unwrap();
    assert_eq!(v["joint_w2"].as_f64().unwrap(), 0.0);
    assert_eq!(v["conditional_w2"].as_f64().unwrap(), 0.0);
}

#[test]
fn outlier_runs_report_clean_and_contaminated_w2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "outliers.toml", |t| {
        t.replace(
            "[train.data]",
            "[train.data.outliers]\nfraction = 0.05\nr_min = 3.0\nr_max = 4.0\n\n[train.data]",
        )
    });
    let run = tmp.path().join("run");
    let out = cuot(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let e = cuot(&["evaluate", "--run", run.to_str().unwrap()], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert!(v["robust"]["clean_w2"].as_f64().unwrap() > 0.0);
    assert!(v["robust"]["contaminated_w2"].as_f64().unwrap() > 0.0);
}

#[test]
fn architecture_mismatch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(
        code(&cuot(
            &["train", "--preset", "smoke", "--out", run.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    let path = run.join("config.toml");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("embed_dim = 8", "embed_dim = 4");
    fs::write(&path, text).unwrap();
    let out = cuot(&["evaluate", "--run", run.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cuot(&["train", "--preset", "nope"], tmp.path())), 2);
    let bad = smoke_config(tmp.path(), "bad.toml", |t| {
        t.replace("[output]", "[output]\ncolour = 3")
    });
    let out = cuot(&["train", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn divergence_exits_with_code_three_and_keeps_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "div.toml", |t| {
        t.replace("max_abs_loss = 1000000.0", "max_abs_loss = 1e-30")
    });
    let run = tmp.path().join("run");
    let out = cuot(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("diverged_state.json").exists());
}

#[test]
fn parallel_seeds_are_namespaced() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cuot(
        &["train", "--preset", "smoke", "--seeds", "0,1"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(tmp.path().join("paper/smoke/seed-0/metrics.json")).unwrap();
    let b = fs::read_to_string(tmp.path().join("paper/smoke/seed-1/metrics.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn oracle_check_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cuot(
        &["oracle-check", "--random", "10", "--size", "5"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("mass 0.36787"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 8);
    assert!(!text.contains("FAIL"));

    let inst = cuot::oracle::DiscreteInstance::outlier();
    let dir = tmp.path().join("inst");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("outlier.json"), inst.to_json().unwrap()).unwrap();
    let out = cuot(
        &["oracle-check", "--instances", dir.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("outlier.plan.json")).unwrap()).unwrap();
    assert_eq!(plan["converged"], true);

    let mut hard = inst.clone();
    hard.psi2 = cuot::divergence::EntropyKind::Identity;
    fs::write(dir.join("outlier.json"), hard.to_json().unwrap()).unwrap();
    assert_eq!(
        code(&cuot(
            &["oracle-check", "--instances", dir.to_str().unwrap()],
            tmp.path()
        )),
        4
    );
    fs::write(dir.join("outlier.json"), "{\"conditions\": []}").unwrap();
    assert_eq!(
        code(&cuot(
            &["oracle-check", "--instances", dir.to_str().unwrap()],
            tmp.path()
        )),
        2
    );
}

#[test]
fn plots_are_deterministic_and_refuse_empty_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(
        code(&cuot(
            &["train", "--preset", "smoke", "--out", run.to_str().unwrap()],
            tmp.path()
        )),
        0
    );
    let out = cuot(
        &["plot", "--run", run.to_str().unwrap(), "--grid", "16"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = (
        fs::read(run.join("scatter.svg")).unwrap(),
        fs::read(run.join("kde.svg")).unwrap(),
    );
    assert_eq!(
        code(&cuot(
            &["plot", "--run", run.to_str().unwrap(), "--grid", "16"],
            tmp.path()
        )),
        0
    );
    assert_eq!(
        first,
        (
            fs::read(run.join("scatter.svg")).unwrap(),
            fs::read(run.join("kde.svg")).unwrap()
        )
    );

    fs::write(run.join("samples.csv"), "y,x,is_outlier\n").unwrap();
    let empty_out = tmp.path().join("empty");
    let out = cuot(
        &[
            "plot",
            "--run",
            run.to_str().unwrap(),
            "--out",
            empty_out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_ne!(code(&out), 0);
    assert!(!empty_out.join("scatter.svg").exists() && !empty_out.join("kde.svg").exists());
}

//! End-to-end runs through the experiment layer on tiny configurations.

use cuot::experiment::{self, Method, Preset, RunCheckpoint, Scale};
use cuot::metrics::{w2_exact, EmpiricalDistribution};
use cuot::nets::ArchConfig;
use cuot::oracle::{self, DiscreteInstance, SolverOptions};
use cuot::synthdata::{Dataset, DatasetKind, PairBatch};
use cuot::trainer::{self, EvalOptions, TrainConfig, TrainState};

fn tiny(preset: Preset) -> TrainConfig {
    let mut c = preset.config(3, Scale::Desk);
    c.data.n_train = 300;
    c.data.n_test = 200;
    c.arch = ArchConfig::with_width(4);
    c.batch_size = 32;
    c.epochs = 2;
    c.eval_every = 1;
    c.eval_points = 100;
    c
}

#[test]
fn smoke_run_writes_artifacts_and_is_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Preset::Smoke.config(0, Scale::Desk);
    let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let report = experiment::execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap();
    for f in [
        experiment::STATE_FILE,
        experiment::CHECKPOINT_FILE,
        experiment::METRICS_FILE,
        experiment::LOSSES_FILE,
        experiment::SAMPLES_FILE,
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(report.joint_w2.is_finite() && report.joint_w2 >= 0.0);
    assert!(report.wall_seconds.is_some());
    assert_eq!(experiment::cached(dir.path(), &cfg), Some(report.clone()));

    let mut other = cfg.clone();
    other.tau *= 2.0;
    assert!(experiment::cached(dir.path(), &other).is_none());

    let again = experiment::execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap();
    assert_eq!(again.joint_w2, report.joint_w2);
    assert_eq!(again.loss_history, report.loss_history);
}

#[test]
fn checkpoint_reproduces_saved_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Preset::Clean {
        kind: DatasetKind::Swissroll,
        method: Method::Cuotm,
    });
    let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let report = experiment::execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap();
    let ck = RunCheckpoint::load(&dir.path().join(experiment::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.best_epoch, report.best_epoch);
    let pairs =
        experiment::generated_test_pairs(&ck.generator().unwrap(), &data, cfg.seed).unwrap();
    let file = std::fs::File::open(dir.path().join(experiment::SAMPLES_FILE)).unwrap();
    let saved = PairBatch::read_csv(DatasetKind::Swissroll, file).unwrap();
    assert_eq!(saved.len(), pairs.len());
    for (a, b) in saved.x.iter().zip(&pairs.x) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in saved.y.iter().zip(&data.test.y) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn outlier_run_reports_both_references() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Preset::Outlier {
        range: (3.0, 4.0),
        method: Method::Cotm,
    });
    let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    assert_eq!(data.test.outlier_count(), 2);
    for ((y, x), o) in data
        .test
        .y
        .iter()
        .zip(&data.test.x)
        .zip(&data.test.is_outlier)
    {
        if *o {
            let r = (y * y + x * x).sqrt();
            assert!((3.0..=4.0).contains(&r), "{r}");
        }
    }
    let report = experiment::execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap();
    let robust = report.robust.expect("outlier runs carry a robust report");
    assert!(robust.clean_w2.is_finite() && robust.contaminated_w2.is_finite());
    assert_eq!(robust.n_sub, 198);
}

#[test]
fn generated_identity_has_zero_distance() {
    let cfg = tiny(Preset::Smoke);
    let data = Dataset::generate(&cfg.data, 0).unwrap();
    let pts = data.test.points();
    let a = EmpiricalDistribution::new(pts.clone()).unwrap();
    let b = EmpiricalDistribution::new(pts).unwrap();
    assert_eq!(w2_exact(&a, &b).unwrap(), 0.0);
}

#[test]
fn oracle_instance_survives_json_and_solves_identically() {
    let mut r = cuot::rng::stream(5, 1);
    let inst = DiscreteInstance::random(
        &mut r,
        2,
        4,
        3,
        (
            cuot::divergence::EntropyKind::Kl,
            cuot::divergence::EntropyKind::ChiSquared,
        ),
        0.5,
    );
    let back = DiscreteInstance::from_json(&inst.to_json().unwrap()).unwrap();
    let opts = SolverOptions::default();
    let a = oracle::solve_primal(&inst, &opts).unwrap();
    let b = oracle::solve_primal(&back, &opts).unwrap();
    assert!(a.converged && b.converged);
    assert_eq!(a.objective, b.objective);
    assert!(a.duality_gap.abs() < 1e-6);
}

#[test]
fn divergence_after_selection_scores_the_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Preset::Clean {
        kind: DatasetKind::Moons,
        method: Method::Cotm,
    });
    let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(cfg.clone()).unwrap();
    trainer::run_epochs(&mut state, &data, 1).unwrap();
    assert_eq!(state.best.as_ref().map(|b| b.epoch), Some(1));

    // Resume the saved epoch under a loss limit the next epoch must exceed.
    cfg.max_abs_loss = 1e-12;
    state.config = cfg.clone();
    state
        .save(&dir.path().join(experiment::STATE_FILE))
        .unwrap();
    let err = experiment::execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap_err();
    assert!(err.is_divergence());
    assert!(dir.path().join("diverged_state.json").exists());

    let report = experiment::cached(dir.path(), &cfg).expect("diverged runs keep a report");
    assert_eq!(report.best_epoch, Some(1));
    assert!(report.diverged.is_some());
    assert!(report.joint_w2.is_finite());
}

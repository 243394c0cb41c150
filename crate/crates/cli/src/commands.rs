//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::Context as _;
use cuot::experiment::{self, Preset, RunCheckpoint, Scale};
use cuot::metrics::{self, EmpiricalDistribution};
use cuot::oracle::{self, DiscreteInstance, SolverOptions};
use cuot::synthdata::{DataConfig, Dataset, PairBatch, StandardizeStats};
use cuot::trainer::{self, write_atomic, EvalOptions, TrainError};
use cuot::validate;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OutputConfig};
use crate::plot::{self, Panel};
use crate::{CliError, Source};

pub type Result<T> = std::result::Result<T, CliError>;

/// `CUOT_OUT_DIR`, or `runs` under the working directory.
pub fn out_root() -> PathBuf {
    std::env::var_os("CUOT_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// The experiment described by `source`, optionally reseeded, and the preset
/// it came from.
pub fn resolve(source: &Source, seed: Option<u64>) -> Result<(ExperimentConfig, Option<Preset>)> {
    let scale: Scale = source.scale.parse().map_err(config_err)?;
    let (mut cfg, preset) = match (&source.config, &source.preset) {
        (Some(path), None) => (
            ExperimentConfig::load(path).map_err(CliError::Config)?,
            None,
        ),
        (None, Some(name)) => {
            let p: Preset = name.parse().map_err(config_err)?;
            let train = p.config(seed.unwrap_or(0), scale);
            let dir = experiment::run_dir(Path::new(""), &p, scale, train.seed);
            let cfg = ExperimentConfig {
                train,
                metric: EvalOptions::default(),
                output: OutputConfig { dir },
            };
            (cfg, Some(p))
        }
        _ => {
            return Err(CliError::Config(
                "give exactly one of --config or --preset".into(),
            ))
        }
    };
    if let Some(s) = seed {
        if preset.is_none() {
            cfg.train.seed = s;
            cfg.output.dir = cfg.output.dir.join(format!("seed-{s}"));
        }
    }
    cfg.train.validate().map_err(config_err)?;
    Ok((cfg.resolved(), preset))
}

fn target_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        if cfg.output.dir.is_absolute() {
            cfg.output.dir.clone()
        } else {
            out_root().join(&cfg.output.dir)
        }
    })
}

pub fn version_stamp() -> String {
    format!("cuot {}\n", env!("CARGO_PKG_VERSION"))
}

/// Echoes the effective configuration and the tool version into `dir`.
fn stamp(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let text = format!("{}config {}\n", version_stamp(), cfg.train.fingerprint());
    write_atomic(&dir.join("version.txt"), text.as_bytes())?;
    Ok(())
}

/// Data provenance stored next to generated CSVs.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct DataManifest {
    data: DataConfig,
    seed: u64,
    stats: StandardizeStats,
}

pub fn generate_data(source: &Source, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let (cfg, _) = resolve(source, seed)?;
    let dir = out.unwrap_or_else(|| {
        out_root()
            .join("data")
            .join(cfg.train.data.kind.name())
            .join(format!("seed-{}", cfg.train.seed))
    });
    let data = Dataset::generate(&cfg.train.data, cfg.train.seed).map_err(config_err)?;
    stamp(&dir, &cfg)?;
    for (name, batch) in [("train.csv", &data.train), ("test.csv", &data.test)] {
        let mut buf = Vec::new();
        batch.write_csv(&mut buf)?;
        write_atomic(&dir.join(name), &buf)?;
    }
    let manifest = DataManifest {
        data: cfg.train.data.clone(),
        seed: cfg.train.seed,
        stats: data.stats,
    };
    write_atomic(
        &dir.join("stats.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    println!(
        "wrote {} train rows ({} outliers) and {} test rows to {}",
        data.train.len(),
        data.train.outlier_count(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

/// Loads a `generate-data` directory and checks it was made for `cfg`.
fn load_data(dir: &Path, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("stats.json"))
        .with_context(|| format!("reading {}", dir.display()))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    let mut want = cfg.clone();
    want.noise = Some(cfg.noise());
    let mut have = manifest.data.clone();
    have.noise = Some(have.noise());
    if have != want || manifest.seed != seed {
        return Err(CliError::Config(format!(
            "data in {} was generated for a different dataset configuration or seed",
            dir.display()
        )));
    }
    let read = |name: &str| -> Result<PairBatch> {
        let f = fs::File::open(dir.join(name)).with_context(|| format!("opening {name}"))?;
        Ok(PairBatch::read_csv(cfg.kind, f)?)
    };
    Ok(Dataset {
        train: read("train.csv")?,
        test: read("test.csv")?,
        stats: manifest.stats,
    })
}

fn dataset_for(cfg: &DataConfig, seed: u64, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(d) => load_data(d, cfg, seed),
        None => Ok(Dataset::generate(cfg, seed).map_err(config_err)?),
    }
}

fn train_error(e: TrainError) -> CliError {
    if e.is_divergence() {
        CliError::Divergence(e.to_string())
    } else if matches!(e, TrainError::Config(_)) {
        CliError::Config(e.to_string())
    } else {
        CliError::Other(e.into())
    }
}

/// Trains the single configuration `cfg` into `dir`.
pub fn train_one(cfg: &ExperimentConfig, dir: &Path, data: Option<&Path>) -> Result<()> {
    let dataset = dataset_for(&cfg.train.data, cfg.train.seed, data)?;
    stamp(dir, cfg)?;
    let report =
        experiment::execute(&cfg.train, &cfg.metric, &dataset, dir).map_err(train_error)?;
    println!(
        "{}: joint W2 {:.5} (raw {:.5}), conditional W2 {:.5}, best epoch {:?}",
        dir.display(),
        report.joint_w2,
        report.joint_w2_raw,
        report.conditional_w2,
        report.best_epoch
    );
    if let Some(r) = &report.robust {
        println!(
            "  clean-reference W2 {:.5}, contaminated {:.5}",
            r.clean_w2, r.contaminated_w2
        );
    }
    Ok(())
}

/// Child `cuot train` process for one prepared run directory; its log goes
/// to `train.log` there.
pub fn spawn_train(dir: &Path, data: Option<&Path>) -> Result<Child> {
    let log = fs::File::create(dir.join("train.log"))?;
    let mut cmd = Command::new(std::env::current_exe()?);
    cmd.arg("train")
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir)
        .stdout(Stdio::null())
        .stderr(log);
    if let Some(d) = data {
        cmd.arg("--data").arg(d);
    }
    Ok(cmd.spawn()?)
}

/// Runs prepared directories with at most `jobs` children at a time.
/// Returns the exit code of each run in order.
pub fn run_parallel(dirs: &[PathBuf], jobs: usize, data: Option<&Path>) -> Result<Vec<i32>> {
    let mut codes = vec![0; dirs.len()];
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    while next < dirs.len() || !running.is_empty() {
        while next < dirs.len() && running.len() < jobs.max(1) {
            log::info!("starting {}", dirs[next].display());
            running.push((next, spawn_train(&dirs[next], data)?));
            next += 1;
        }
        let (k, mut child) = running.remove(0);
        let status = child.wait()?;
        codes[k] = status.code().unwrap_or(1);
        log::info!("finished {} with exit code {}", dirs[k].display(), codes[k]);
    }
    Ok(codes)
}

fn combine_codes(codes: &[i32], dirs: &[PathBuf]) -> Result<()> {
    match codes.iter().zip(dirs).find(|(c, _)| **c != 0) {
        None => Ok(()),
        Some((3, d)) => Err(CliError::Divergence(format!(
            "see {}",
            d.join("train.log").display()
        ))),
        Some((2, d)) => Err(CliError::Config(format!(
            "see {}",
            d.join("train.log").display()
        ))),
        Some((c, d)) => Err(anyhow::anyhow!("run {} exited with {c}", d.display()).into()),
    }
}

pub fn train(
    source: &Source,
    seed: Option<u64>,
    seeds: &[u64],
    jobs: Option<usize>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    if seeds.is_empty() {
        let (cfg, _) = resolve(source, seed)?;
        let dir = target_dir(&cfg, out);
        return train_one(&cfg, &dir, data.as_deref());
    }
    let mut dirs = Vec::new();
    for &s in seeds {
        let (cfg, _) = resolve(source, Some(s))?;
        let dir = match &out {
            Some(o) => o.join(format!("seed-{s}")),
            None => target_dir(&cfg, None),
        };
        stamp(&dir, &cfg)?;
        dirs.push(dir);
    }
    let codes = run_parallel(&dirs, jobs.unwrap_or(seeds.len()), data.as_deref())?;
    combine_codes(&codes, &dirs)
}

/// The run's echoed configuration when present, else one rebuilt from the
/// checkpoint.
fn run_config(run: &Path, ck: &RunCheckpoint) -> Result<ExperimentConfig> {
    let path = run.join("config.toml");
    if path.exists() {
        ExperimentConfig::load(&path).map_err(CliError::Config)
    } else {
        Ok(ExperimentConfig {
            train: ck.config.clone(),
            metric: EvalOptions::default(),
            output: OutputConfig {
                dir: run.to_path_buf(),
            },
        })
    }
}

fn load_checkpoint(run: &Path) -> Result<(RunCheckpoint, ExperimentConfig)> {
    let path = run.join(experiment::CHECKPOINT_FILE);
    let ck = RunCheckpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = run_config(run, &ck)?;
    if cfg.train.arch.hash() != ck.generator.arch_hash {
        return Err(CliError::Config(format!(
            "checkpoint architecture {} does not match the run configuration {}",
            ck.generator.arch_hash,
            cfg.train.arch.hash()
        )));
    }
    Ok((ck, cfg))
}

pub fn evaluate(
    run: &Path,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    debug_identity: bool,
) -> Result<()> {
    let (ck, cfg) = load_checkpoint(run)?;
    let generator = ck.generator().map_err(config_err)?;
    let mut train_cfg = ck.config.clone();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let dataset = dataset_for(&ck.config.data, ck.config.seed, data.as_deref())?;
    let report = if debug_identity {
        let test = dataset.stats.apply(&dataset.test);
        trainer::evaluate_samples(
            &test.x,
            &dataset,
            &cfg.metric,
            &train_cfg,
            ck.best_epoch,
            &[],
        )
    } else {
        trainer::evaluate(
            &generator,
            &dataset,
            &cfg.metric,
            &train_cfg,
            ck.best_epoch,
            &[],
        )
    }
    .map_err(train_error)?;
    let json = serde_json::to_string_pretty(&report)?;
    let path = out.unwrap_or_else(|| run.join("evaluation.json"));
    write_atomic(&path, json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn instance_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e == "json")
                    && !p.to_string_lossy().ends_with(".plan.json")
            })
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

pub fn oracle_check(
    random: usize,
    size: usize,
    seed: u64,
    instances: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let opts = SolverOptions::default();
    if let Some(path) = instances {
        let mut failed = Vec::new();
        for file in instance_files(&path)? {
            let text =
                fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let inst = DiscreteInstance::from_json(&text).map_err(config_err)?;
            let plan =
                oracle::solve_primal(&inst, &opts).map_err(|e| CliError::Oracle(e.to_string()))?;
            let ok = plan.converged && plan.duality_gap.abs() < 1e-6;
            println!(
                "{} {}: objective {:.10} duality gap {:.3e} converged {}",
                if ok { "PASS" } else { "FAIL" },
                file.display(),
                plan.objective,
                plan.duality_gap,
                plan.converged
            );
            if !ok {
                failed.push(file.display().to_string());
            }
            let stem = file
                .file_stem()
                .map_or("instance".into(), |s| s.to_string_lossy().into_owned());
            let dir = out
                .clone()
                .unwrap_or_else(|| file.parent().map_or(PathBuf::from("."), Path::to_path_buf));
            fs::create_dir_all(&dir)?;
            write_atomic(
                &dir.join(format!("{stem}.plan.json")),
                plan.to_json().map_err(config_err)?.as_bytes(),
            )?;
        }
        return if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Oracle(failed.join(", ")))
        };
    }
    if random == 0 || size == 0 {
        return Err(CliError::Config(
            "--random and --size must be positive".into(),
        ));
    }
    let summary =
        validate::oracle_suite(random, size, seed).map_err(|e| CliError::Oracle(e.to_string()))?;
    println!(
        "canonical 1x1 instance (cost 2): mass {:.9}",
        summary.canonical_mass
    );
    println!("alpha  marginal divergence");
    for (a, d) in &summary.alpha_sweep {
        println!("{a:>5}  {d:.6e}");
    }
    for c in &summary.checks {
        println!("{}", c.line());
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        write_atomic(
            &dir.join("oracle_report.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
    }
    let failed: Vec<&str> = summary
        .checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Oracle(failed.join("; ")))
    }
}

fn read_samples(run: &Path, cfg: &DataConfig) -> Result<PairBatch> {
    let path = run.join(experiment::SAMPLES_FILE);
    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(PairBatch::read_csv(cfg.kind, f)?)
}

fn run_label(run: &Path, ck: &RunCheckpoint) -> String {
    let method = match ck.config.psi1 {
        cuot::divergence::EntropyKind::Identity => "COTM",
        _ => "CUOTM",
    };
    let seed = run
        .file_name()
        .map_or(String::new(), |s| format!(" ({})", s.to_string_lossy()));
    format!("{method}{seed}")
}

pub fn plot(
    runs: &[PathBuf],
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    grid: usize,
) -> Result<()> {
    if grid < 2 {
        return Err(CliError::Config("--grid must be at least 2".into()));
    }
    let mut labeled = Vec::new();
    let mut first_cfg = None;
    for run in runs {
        let (ck, _) = load_checkpoint(run)?;
        let samples = read_samples(run, &ck.config.data)?;
        if samples.is_empty() {
            return Err(anyhow::anyhow!("{} has no generated samples", run.display()).into());
        }
        labeled.push((run_label(run, &ck), samples.points()));
        first_cfg.get_or_insert(ck.config);
    }
    let cfg = first_cfg.expect("at least one run");
    let dataset = dataset_for(&cfg.data, cfg.seed, data.as_deref())?;
    let target = dataset.test.points();
    let mut sets: Vec<&[[f64; 2]]> = vec![&target];
    sets.extend(labeled.iter().map(|(_, p)| p.as_slice()));
    let extent = plot::extent_of(&[&target]);

    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut panels = vec![Panel {
        title: "target",
        points: &target,
        color: "#333333",
    }];
    for (k, (label, pts)) in labeled.iter().enumerate() {
        panels.push(Panel {
            title: label,
            points: pts,
            color: colors[k % colors.len()],
        });
    }
    let scatter = plot::scatter_svg(&panels, extent);

    let mut grids = Vec::new();
    for set in &sets {
        let d = EmpiricalDistribution::new(set.to_vec())?;
        grids.push(metrics::kde_grid(&d, extent, (grid, grid), None)?);
    }
    let titles: Vec<&str> = panels.iter().map(|p| p.title).collect();
    let pairs: Vec<(&str, &metrics::KdeGrid)> = titles.into_iter().zip(grids.iter()).collect();
    let kde = plot::kde_svg(&pairs);

    let dir = out.unwrap_or_else(|| runs[0].clone());
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("scatter.svg"), scatter.as_bytes())?;
    write_atomic(&dir.join("kde.svg"), kde.as_bytes())?;
    println!(
        "wrote {} and {}",
        dir.join("scatter.svg").display(),
        dir.join("kde.svg").display()
    );
    Ok(())
}

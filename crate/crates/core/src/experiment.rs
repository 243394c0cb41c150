//! Named run configurations for the reproduced tables.
//!
//! A preset fixes dataset, method and hyperparameters at the paper's scale;
//! [`Scale::Desk`] shrinks width and epoch count so one run fits a laptop
//! budget on a single core.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::EntropyKind;
use crate::metrics::{LossRecord, MetricsReport};
use crate::nets::{ArchConfig, Checkpoint, GeneratorParams, NetError};
use crate::synthdata::{DataConfig, Dataset, DatasetKind, OutlierSpec, PairBatch};
use crate::trainer::{self, write_atomic, EvalOptions, TrainConfig, TrainError, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Unbalanced: KL penalties on both conditional marginals.
    Cuotm,
    /// Balanced baseline: identity conjugates.
    Cotm,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Cuotm, Method::Cotm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cuotm => "cuotm",
            Method::Cotm => "cotm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

impl Scale {
    /// Desk runs use width 32, 150 epochs at three times the learning
    /// rates, and selection every 5 epochs.
    pub fn apply(self, mut cfg: TrainConfig) -> TrainConfig {
        if self == Scale::Desk {
            cfg.arch = ArchConfig::with_width(32);
            cfg.epochs = 150;
            cfg.eval_every = 5;
            cfg.lr_generator *= 3.0;
            cfg.lr_potential *= 3.0;
        }
        cfg
    }
}

impl FromStr for Scale {
    type Err = PresetError;
    fn from_str(s: &str) -> Result<Self, PresetError> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(PresetError(format!(
                "unknown scale {other:?} (paper, desk)"
            ))),
        }
    }
}

/// Published Table I means (×10⁻²) for CUOTM and COTM.
pub fn paper_table1(kind: DatasetKind) -> (f64, f64) {
    match kind {
        DatasetKind::Circles => (4.46, 6.34),
        DatasetKind::Moons => (6.52, 12.00),
        DatasetKind::Swissroll => (4.92, 8.52),
        DatasetKind::Checkerboard => (6.53, 7.81),
    }
}

/// Best-of-seeds limit on the CUOTM joint W2 per dataset.
pub fn table1_limit(kind: DatasetKind) -> f64 {
    match kind {
        DatasetKind::Circles => 0.065,
        DatasetKind::Moons => 0.095,
        DatasetKind::Swissroll => 0.075,
        DatasetKind::Checkerboard => 0.095,
    }
}

/// Datasets on which the CUOTM seed mean must beat the COTM seed mean.
pub const ORDERING_DATASETS: [DatasetKind; 3] = [
    DatasetKind::Moons,
    DatasetKind::Circles,
    DatasetKind::Swissroll,
];

/// Published Table III (×10⁻³) for CUOTM and COTM.
pub fn paper_table3(range: (f64, f64)) -> (f64, f64) {
    match range {
        (r, _) if r == 4.0 => (0.047, 0.205),
        (r, _) if r == 3.0 => (0.062, 0.192),
        (r, _) if r == 2.0 => (0.070, 0.124),
        _ => (0.055, 0.084),
    }
}

/// Outlier ranges where the clean-reference W2 ratio is checked.
pub const RATIO_RANGES: [(f64, f64); 2] = [(3.0, 4.0), (4.0, 5.0)];

/// Largest admissible best-CUOTM over best-COTM clean W2 ratio.
pub const RATIO_LIMIT: f64 = 0.5;

/// Cached reports for `preset` across `seeds`, skipping absent or stale runs.
pub fn cached_reports(
    root: &Path,
    preset: &Preset,
    scale: Scale,
    seeds: &[u64],
) -> Vec<MetricsReport> {
    seeds
        .iter()
        .filter_map(|&s| cached(&run_dir(root, preset, scale, s), &preset.config(s, scale)))
        .collect()
}

/// Radial bands of the outlier annulus, in raw data units.
pub const OUTLIER_RANGES: [(f64, f64); 4] = [(1.5, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0)];

pub const OUTLIER_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct PresetError(pub String);

/// A parsed preset name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    Clean { kind: DatasetKind, method: Method },
    Outlier { range: (f64, f64), method: Method },
    Smoke,
}

fn fmt_bound(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Clean { kind, method } => write!(f, "{}-{}", kind.name(), method.name()),
            Preset::Outlier { range, method } => write!(
                f,
                "circles-outlier-{}-{}-{}",
                fmt_bound(range.0),
                fmt_bound(range.1),
                method.name()
            ),
            Preset::Smoke => f.write_str("smoke"),
        }
    }
}

impl FromStr for Preset {
    type Err = PresetError;
    fn from_str(s: &str) -> Result<Self, PresetError> {
        Preset::all()
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| {
                PresetError(format!(
                    "unknown preset {s:?}; known: {}",
                    Preset::names().join(", ")
                ))
            })
    }
}

impl Preset {
    pub fn all() -> Vec<Preset> {
        let mut out = Preset::table1();
        out.extend(Preset::table3());
        out.push(Preset::Smoke);
        out
    }

    pub fn names() -> Vec<String> {
        Preset::all().iter().map(|p| p.to_string()).collect()
    }

    /// Four datasets, each with both methods.
    pub fn table1() -> Vec<Preset> {
        DatasetKind::ALL
            .into_iter()
            .flat_map(|kind| Method::ALL.map(|method| Preset::Clean { kind, method }))
            .collect()
    }

    /// Circles with 1% outliers in each radial band, both methods.
    pub fn table3() -> Vec<Preset> {
        OUTLIER_RANGES
            .into_iter()
            .flat_map(|range| Method::ALL.map(|method| Preset::Outlier { range, method }))
            .collect()
    }

    pub fn method(&self) -> Option<Method> {
        match self {
            Preset::Clean { method, .. } | Preset::Outlier { method, .. } => Some(*method),
            Preset::Smoke => None,
        }
    }

    /// Training configuration for `seed` at `scale`. The smoke preset ignores
    /// the scale.
    pub fn config(&self, seed: u64, scale: Scale) -> TrainConfig {
        let with_method = |cfg: TrainConfig, m: Method| match m {
            Method::Cuotm => cfg,
            Method::Cotm => TrainConfig {
                psi1: EntropyKind::Identity,
                psi2: EntropyKind::Identity,
                ..cfg
            },
        };
        let mut cfg = match *self {
            Preset::Clean { kind, method } => scale.apply(with_method(
                TrainConfig::paper_defaults(DataConfig::new(kind)),
                method,
            )),
            Preset::Outlier { range, method } => {
                let mut data = DataConfig::new(DatasetKind::Circles);
                data.outliers = Some(OutlierSpec {
                    fraction: OUTLIER_FRACTION,
                    r_min: range.0,
                    r_max: range.1,
                });
                scale.apply(with_method(TrainConfig::paper_defaults(data), method))
            }
            Preset::Smoke => {
                let mut data = DataConfig::new(DatasetKind::Moons);
                data.n_train = 64;
                data.n_test = 64;
                let mut c = TrainConfig::paper_defaults(data);
                c.arch = ArchConfig::with_width(8);
                c.batch_size = 4;
                c.epochs = 1;
                c.eval_every = 1;
                c.eval_points = 64;
                c
            }
        };
        cfg.seed = seed;
        cfg
    }
}

/// `root/<scale>/<preset>/seed-<seed>`.
pub fn run_dir(root: &Path, preset: &Preset, scale: Scale, seed: u64) -> PathBuf {
    let scale = match scale {
        Scale::Paper => "paper",
        Scale::Desk => "desk",
    };
    root.join(scale)
        .join(preset.to_string())
        .join(format!("seed-{seed}"))
}

/// The selected generator with the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub generator: Checkpoint,
}

impl RunCheckpoint {
    pub fn generator(&self) -> Result<GeneratorParams, NetError> {
        GeneratorParams::from_checkpoint(&self.generator, Some(&self.config.arch))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub const STATE_FILE: &str = "state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Report in `dir` if one exists for exactly this configuration.
pub fn cached(dir: &Path, config: &TrainConfig) -> Option<MetricsReport> {
    let text = fs::read_to_string(dir.join(METRICS_FILE)).ok()?;
    let report: MetricsReport = serde_json::from_str(&text).ok()?;
    (report.fingerprint == config.fingerprint()).then_some(report)
}

/// Trains `config` into `dir`, resuming from a saved state with the same
/// configuration. The state is saved after every selection evaluation.
///
/// Writes the selected generator, the metrics report, the loss curve and the
/// generated test pairs (raw units). On divergence the last good state is
/// left in `dir`, the best checkpoint selected so far is scored with the
/// report marked as diverged, and the error is returned.
pub fn execute(
    config: &TrainConfig,
    eval: &EvalOptions,
    data: &Dataset,
    dir: &Path,
) -> Result<MetricsReport, TrainError> {
    config.validate()?;
    let started = std::time::Instant::now();
    fs::create_dir_all(dir)?;
    let state_path = dir.join(STATE_FILE);
    let mut state = match TrainState::load(&state_path) {
        Ok(s) if s.config == *config => {
            log::info!("resuming {} at epoch {}", dir.display(), s.epoch);
            s
        }
        _ => TrainState::new(config.clone())?,
    };
    let base = state.train_seconds;
    let mut diverged = None;
    while state.epoch < config.epochs {
        let until = (state.epoch / config.eval_every + 1) * config.eval_every;
        let result = trainer::run_epochs(&mut state, data, until);
        state.train_seconds = base + started.elapsed().as_secs_f64();
        match result {
            Ok(()) => state.save(&state_path)?,
            Err(e) => {
                let Some(snap) = e.snapshot() else {
                    return Err(e);
                };
                snap.save(&dir.join("diverged_state.json"))?;
                if state.best.is_none() {
                    return Err(e);
                }
                diverged = Some(e);
                break;
            }
        }
    }
    let best_epoch = state.best.as_ref().map(|b| b.epoch);
    let gen = state.selected_generator();
    let mut report = trainer::evaluate(gen, data, eval, config, best_epoch, &state.history)?;
    report.wall_seconds = Some(base + started.elapsed().as_secs_f64());
    report.diverged = diverged.as_ref().map(|e| e.to_string());
    let ck = RunCheckpoint {
        config: config.clone(),
        best_epoch,
        generator: gen.to_checkpoint(),
    };
    write_atomic(
        &dir.join(CHECKPOINT_FILE),
        serde_json::to_string(&ck)?.as_bytes(),
    )?;
    write_losses(&dir.join(LOSSES_FILE), &state.history)?;
    write_samples(&dir.join(SAMPLES_FILE), gen, data, config.seed)?;
    write_atomic(
        &dir.join(METRICS_FILE),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    match diverged {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

pub fn write_losses(path: &Path, history: &[LossRecord]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,loss_potential,loss_generator,r1,alpha,test_w2\n");
    for h in history {
        let w = h.test_w2.map_or(String::new(), |w| w.to_string());
        out += &format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.loss_potential, h.loss_generator, h.r1, h.alpha, w
        );
    }
    write_atomic(path, out.as_bytes())
}

/// Generated pairs on the test conditions, mapped back to raw units.
pub fn generated_test_pairs(
    gen: &GeneratorParams,
    data: &Dataset,
    seed: u64,
) -> Result<PairBatch, TrainError> {
    let test = data.stats.apply(&data.test);
    let u = trainer::generate(gen, &test.y, seed)?;
    let n = u.len();
    let batch = PairBatch::new(data.test.kind, test.y.clone(), u, vec![false; n])?;
    Ok(data.stats.invert(&batch))
}

fn write_samples(
    path: &Path,
    gen: &GeneratorParams,
    data: &Dataset,
    seed: u64,
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    generated_test_pairs(gen, data, seed)?.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}

/// Mean, sample standard deviation and minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Summary {
            mean,
            std: var.sqrt(),
            best: values.iter().copied().fold(f64::INFINITY, f64::min),
            n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Preset::all() {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!(Preset::names().contains(&"circles-outlier-1.5-2-cotm".to_string()));
        assert!(Preset::names().contains(&"checkerboard-cuotm".to_string()));
        assert!("circles-foo".parse::<Preset>().is_err());
        assert_eq!(Preset::table1().len(), 8);
        assert_eq!(Preset::table3().len(), 8);
    }

    #[test]
    fn paper_presets_carry_paper_defaults() {
        let c = "circles-cuotm"
            .parse::<Preset>()
            .unwrap()
            .config(3, Scale::Paper);
        assert_eq!(
            (c.tau, c.r1_gamma, c.batch_size, c.epochs),
            (0.0007, 0.1, 256, 800)
        );
        assert_eq!((c.psi1, c.psi2), (EntropyKind::Kl, EntropyKind::Kl));
        assert_eq!(c.seed, 3);
        let b = "circles-cotm"
            .parse::<Preset>()
            .unwrap()
            .config(3, Scale::Paper);
        assert_eq!(b, c.as_cotm());
        let o = "circles-outlier-3-4-cuotm"
            .parse::<Preset>()
            .unwrap()
            .config(0, Scale::Desk);
        assert_eq!(o.data.outliers.unwrap().r_min, 3.0);
        assert_eq!((o.arch.embed_dim, o.epochs), (32, 150));
        assert_eq!(o.lr_generator, 3.0 * c.lr_generator);
        for p in Preset::all() {
            p.config(0, Scale::Desk).validate().unwrap();
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.best, s.n), (2.0, 1.0, 1.0, 3));
        assert_eq!(Summary::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn smoke_run_writes_artifacts_and_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Preset::Smoke.config(0, Scale::Desk);
        let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
        let report = execute(&cfg, &EvalOptions::default(), &data, dir.path()).unwrap();
        for f in [
            STATE_FILE,
            CHECKPOINT_FILE,
            METRICS_FILE,
            LOSSES_FILE,
            SAMPLES_FILE,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(cached(dir.path(), &cfg).unwrap(), report);
        let mut other = cfg.clone();
        other.seed = 1;
        assert!(cached(dir.path(), &other).is_none());
        let ck = RunCheckpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.config, cfg);
        ck.generator().unwrap();
    }
}

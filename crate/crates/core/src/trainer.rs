//! Alternating semi-dual training of the potential and the generator.
//!
//! One iteration draws target pairs `(y, u)`, builds source pairs `(y, v)` on
//! the same conditions, takes one potential step, redraws `v` and `z` on the
//! same conditions, then takes one generator step.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdamState, AutodiffError, Graph, Tensor, Var};
use crate::divergence::{EntropyFunction, EntropyKind};
use crate::metrics::{
    self, EmpiricalDistribution, LossRecord, MetricError, MetricsReport, RobustReport,
};
use crate::nets::{self, ArchConfig, Checkpoint, GeneratorParams, NetError, PotentialParams};
use crate::rng::{self, streams, Rng, RngState};
use crate::synthdata::{DataConfig, DataError, Dataset, PairBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("epoch {epoch}, iteration {iteration}: {detail}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        detail: String,
        snapshot: Box<TrainState>,
    },
    #[error("epoch {epoch}: |{which}| = {value:e} exceeds the divergence limit")]
    Diverged {
        epoch: usize,
        which: &'static str,
        value: f64,
        snapshot: Box<TrainState>,
    },
    #[error("epoch {epoch}: {fraction:.3} of KL conjugate arguments were clamped")]
    Clamping {
        epoch: usize,
        fraction: f64,
        snapshot: Box<TrainState>,
    },
}

impl TrainError {
    /// State at the moment training stopped, when the error carries one.
    pub fn snapshot(&self) -> Option<&TrainState> {
        match self {
            TrainError::NonFinite { snapshot, .. }
            | TrainError::Diverged { snapshot, .. }
            | TrainError::Clamping { snapshot, .. } => Some(snapshot),
            _ => None,
        }
    }

    /// Training ran and then failed, as opposed to never having started.
    pub fn is_divergence(&self) -> bool {
        self.snapshot().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSchedule {
    Constant {
        value: f64,
    },
    /// `start · (end/start)^(e/R)` for epochs `e < R = ramp_fraction · epochs`,
    /// then `end`.
    Geometric {
        start: f64,
        end: f64,
        ramp_fraction: f64,
    },
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule::Constant { value: 1.0 }
    }
}

impl AlphaSchedule {
    /// The schedule used when scaling is switched on: 1 → 64 over the first half.
    pub fn standard_ramp() -> Self {
        AlphaSchedule::Geometric {
            start: 1.0,
            end: 64.0,
            ramp_fraction: 0.5,
        }
    }

    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            AlphaSchedule::Constant { value } => value,
            AlphaSchedule::Geometric {
                start,
                end,
                ramp_fraction,
            } => {
                let ramp = ((ramp_fraction * epochs as f64).round() as usize).max(1);
                if epoch >= ramp {
                    end
                } else {
                    start * (end / start).powf(epoch as f64 / ramp as f64)
                }
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            AlphaSchedule::Constant { value } if value > 0.0 => Ok(()),
            AlphaSchedule::Constant { value } => Err(format!("alpha {value} must be positive")),
            AlphaSchedule::Geometric {
                start,
                end,
                ramp_fraction,
            } => {
                if start >= 1.0 && end >= start && (0.0..=1.0).contains(&ramp_fraction) {
                    Ok(())
                } else {
                    Err(format!(
                        "geometric alpha needs 1 <= start <= end and ramp in [0, 1], got {start}, {end}, {ramp_fraction}"
                    ))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub tau: f64,
    pub psi1: EntropyKind,
    pub psi2: EntropyKind,
    pub alpha: AlphaSchedule,
    pub lr_generator: f64,
    pub lr_potential: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub r1_gamma: f64,
    /// Epochs between selection evaluations on the test split.
    pub eval_every: usize,
    /// Points per selection evaluation.
    pub eval_points: usize,
    /// Cap on the scaled KL conjugate argument.
    pub kl_clamp: f64,
    /// Largest tolerated fraction of clamped KL arguments in one epoch.
    pub clamp_abort_fraction: f64,
    pub max_abs_loss: f64,
}

impl TrainConfig {
    /// The paper's 2D defaults on `data`.
    pub fn paper_defaults(data: DataConfig) -> Self {
        TrainConfig {
            seed: 0,
            data,
            arch: ArchConfig::default(),
            tau: 0.0007,
            psi1: EntropyKind::Kl,
            psi2: EntropyKind::Kl,
            alpha: AlphaSchedule::default(),
            lr_generator: 1.6e-4,
            lr_potential: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch_size: 256,
            epochs: 800,
            r1_gamma: 0.1,
            eval_every: 25,
            eval_points: 1000,
            kl_clamp: 30.0,
            clamp_abort_fraction: 0.01,
            max_abs_loss: 1e6,
        }
    }

    /// Same configuration with identity conjugates (the balanced baseline).
    pub fn as_cotm(&self) -> Self {
        TrainConfig {
            psi1: EntropyKind::Identity,
            psi2: EntropyKind::Identity,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_generator > 0.0 && self.lr_potential > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.r1_gamma < 0.0 {
            return bad("r1_gamma must be non-negative".into());
        }
        if self.eval_every == 0 || self.eval_points == 0 {
            return bad("eval_every and eval_points must be positive".into());
        }
        if self.eval_points > self.data.n_test {
            return bad(format!(
                "eval_points {} exceeds n_test {}",
                self.eval_points, self.data.n_test
            ));
        }
        if let Some(o) = &self.data.outliers {
            o.validate()?;
        }
        self.arch.validate()?;
        self.alpha.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.data.n_train.div_ceil(self.batch_size)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    /// Hex SHA-256 of the JSON encoding with the data noise resolved, so a
    /// default noise level and the same level spelled out agree.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.data.noise = Some(self.data.noise());
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn objective(&self, alpha: f64) -> Objective {
        Objective {
            tau: self.tau,
            psi1: EntropyFunction::with_alpha(self.psi1, alpha),
            psi2: EntropyFunction::with_alpha(self.psi2, alpha),
            r1_gamma: self.r1_gamma,
            kl_clamp: self.kl_clamp,
        }
    }
}

/// `c = τ (v − u)²` per pair.
pub fn transport_cost(v: &[f64], u: &[f64], tau: f64) -> Vec<f64> {
    v.iter()
        .zip(u)
        .map(|(a, b)| tau * (a - b) * (a - b))
        .collect()
}

/// Loss constants for one step: cost scale, scaled entropies and R1 weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub tau: f64,
    pub psi1: EntropyFunction,
    pub psi2: EntropyFunction,
    pub r1_gamma: f64,
    pub kl_clamp: f64,
}

/// Aligned inputs for one loss evaluation: conditions `y`, source data `v`,
/// noise `z` (`n · z_dim` values) and target data `u`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub y: &'a [f64],
    pub v: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

/// Recorded potential loss with its pieces.
#[derive(Debug, Clone, Copy)]
pub struct PotentialTerms {
    pub loss: Var,
    pub r1: f64,
    pub clamped: usize,
    pub terms: usize,
}

impl Objective {
    /// `mean (αΨ1)*(−[c − φ_fake]) + mean (αΨ2)*(−φ_real)` from recorded columns.
    pub fn potential_objective(
        &self,
        g: &mut Graph,
        cost: Var,
        phi_fake: Var,
        phi_real: Var,
    ) -> Result<(Var, usize), AutodiffError> {
        let arg1 = g.sub(phi_fake, cost)?;
        let (t1, c1) = self.psi1.psi_star_node(g, arg1, self.kl_clamp)?;
        let arg2 = g.neg(phi_real)?;
        let (t2, c2) = self.psi2.psi_star_node(g, arg2, self.kl_clamp)?;
        let m1 = g.mean(t1)?;
        let m2 = g.mean(t2)?;
        Ok((g.add(m1, m2)?, c1 + c2))
    }

    /// `mean (c − φ_fake)`.
    pub fn generator_objective(
        &self,
        g: &mut Graph,
        cost: Var,
        phi_fake: Var,
    ) -> Result<Var, AutodiffError> {
        let d = g.sub(cost, phi_fake)?;
        g.mean(d)
    }

    /// Potential loss with the generator frozen, differentiable in `pot_vars`.
    pub fn potential_loss(
        &self,
        g: &mut Graph,
        generator: &GeneratorParams,
        potential: &PotentialParams,
        pot_vars: &[Var],
        b: &Batch<'_>,
    ) -> Result<PotentialTerms, TrainError> {
        let n = b.y.len();
        let t = generator.apply(b.y, b.v, b.z)?;
        let cost = g.constant(Tensor::column(transport_cost(b.v, &t, self.tau)));
        let y = g.constant(Tensor::column(b.y.to_vec()));
        let tv = g.constant(Tensor::column(t));
        let phi_fake = potential.forward(g, pot_vars, y, tv)?;
        let u = if self.r1_gamma > 0.0 {
            g.leaf(Tensor::column(b.u.to_vec()))
        } else {
            g.constant(Tensor::column(b.u.to_vec()))
        };
        let phi_real = potential.forward(g, pot_vars, y, u)?;
        let (mut loss, clamped) = self.potential_objective(g, cost, phi_fake, phi_real)?;
        let mut r1 = 0.0;
        if self.r1_gamma > 0.0 {
            let s = g.sum(phi_real)?;
            let du = g.grad(s, &[u])?[0].expect("potential depends on its data input");
            let sq = g.row_sq_norm(du)?;
            let pen = g.mean(sq)?;
            r1 = g.value(pen).item();
            let w = g.scale(pen, 0.5 * self.r1_gamma)?;
            loss = g.add(loss, w)?;
        }
        Ok(PotentialTerms {
            loss,
            r1,
            clamped,
            terms: 2 * n,
        })
    }

    /// Generator loss with the potential frozen, differentiable in `gen_vars`.
    pub fn generator_loss(
        &self,
        g: &mut Graph,
        generator: &GeneratorParams,
        gen_vars: &[Var],
        potential: &PotentialParams,
        b: &Batch<'_>,
    ) -> Result<Var, TrainError> {
        let n = b.y.len();
        let k = generator.arch().z_dim();
        let pot_vars = potential.bind(g, false);
        let y = g.constant(Tensor::column(b.y.to_vec()));
        let v = g.constant(Tensor::column(b.v.to_vec()));
        let z = g.constant(Tensor::matrix(n, k, b.z.to_vec())?);
        let t = generator.forward(g, gen_vars, y, v, z)?;
        let d = g.sub(v, t)?;
        let sq = g.square(d)?;
        let cost = g.scale(sq, self.tau)?;
        let phi = potential.forward(g, &pot_vars, y, t)?;
        Ok(self.generator_objective(g, cost, phi)?)
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: GeneratorParams,
    pub potential: PotentialParams,
    pub adam_generator: AdamState,
    pub adam_potential: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub rng: RngState,
    pub best: Option<BestSnapshot>,
    /// Wall-clock seconds spent training, accumulated across resumes.
    pub train_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub test_w2: f64,
    pub generator: GeneratorParams,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    config: TrainConfig,
    generator: Checkpoint,
    potential: Checkpoint,
    adam_generator: AdamState,
    adam_potential: AdamState,
    epoch: usize,
    history: Vec<LossRecord>,
    rng: RngState,
    best: Option<BestFile>,
    #[serde(default)]
    train_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct BestFile {
    epoch: usize,
    test_w2: f64,
    generator: Checkpoint,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (generator, potential) = nets::init_params(&config.arch, config.seed)?;
        let adam =
            |p: &[Tensor], lr| AdamState::new(p, lr, config.beta1, config.beta2, config.adam_eps);
        let adam_generator = adam(generator.tensors(), config.lr_generator);
        let adam_potential = adam(potential.tensors(), config.lr_potential);
        let rng = RngState::capture(config.seed, &rng::stream(config.seed, streams::TRAIN));
        Ok(TrainState {
            config,
            generator,
            potential,
            adam_generator,
            adam_potential,
            epoch: 0,
            history: Vec::new(),
            rng,
            best: None,
            train_seconds: 0.0,
        })
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        let f = StateFile {
            config: self.config.clone(),
            generator: self.generator.to_checkpoint(),
            potential: self.potential.to_checkpoint(),
            adam_generator: self.adam_generator.clone(),
            adam_potential: self.adam_potential.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            rng: self.rng,
            best: self.best.as_ref().map(|b| BestFile {
                epoch: b.epoch,
                test_w2: b.test_w2,
                generator: b.generator.to_checkpoint(),
            }),
            train_seconds: self.train_seconds,
        };
        Ok(serde_json::to_string(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let f: StateFile = serde_json::from_str(s)?;
        let arch = f.config.arch;
        Ok(TrainState {
            generator: GeneratorParams::from_checkpoint(&f.generator, Some(&arch))?,
            potential: PotentialParams::from_checkpoint(&f.potential, Some(&arch))?,
            best: match f.best {
                Some(b) => Some(BestSnapshot {
                    epoch: b.epoch,
                    test_w2: b.test_w2,
                    generator: GeneratorParams::from_checkpoint(&b.generator, Some(&arch))?,
                }),
                None => None,
            },
            config: f.config,
            adam_generator: f.adam_generator,
            adam_potential: f.adam_potential,
            epoch: f.epoch,
            history: f.history,
            rng: f.rng,
            train_seconds: f.train_seconds,
        })
    }

    /// Writes JSON through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The generator chosen by test W2, or the latest one before any evaluation.
    pub fn selected_generator(&self) -> &GeneratorParams {
        self.best.as_ref().map_or(&self.generator, |b| &b.generator)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: MetricsReport,
}

/// Standardized dataset used by the loop.
struct Prepared {
    train: PairBatch,
    test: PairBatch,
}

fn prepare(data: &Dataset) -> Prepared {
    Prepared {
        train: data.stats.apply(&data.train),
        test: data.stats.apply(&data.test),
    }
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs `config` from scratch on freshly generated data and evaluates the
/// selected generator on the full test split.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let data = Dataset::generate(&config.data, config.seed)?;
    let mut state = TrainState::new(config.clone())?;
    run_epochs(&mut state, &data, config.epochs)?;
    let report = evaluate(
        state.selected_generator(),
        &data,
        &EvalOptions::default(),
        config,
        state.best.as_ref().map(|b| b.epoch),
        &state.history,
    )?;
    Ok(TrainOutcome { state, report })
}

/// Advances `state` until `until` epochs are complete.
pub fn run_epochs(state: &mut TrainState, data: &Dataset, until: usize) -> Result<(), TrainError> {
    let cfg = state.config.clone();
    let prep = prepare(data);
    let n_train = prep.train.len();
    let m = cfg.batch_size;
    let k = cfg.arch.z_dim();
    let mut rng = state.rng.restore();
    let its = cfg.iterations_per_epoch();
    while state.epoch < until.min(cfg.epochs) {
        let epoch = state.epoch;
        let alpha = cfg.alpha.at(epoch, cfg.epochs);
        let obj = cfg.objective(alpha);
        let (mut sum_lp, mut sum_lt, mut sum_r1) = (0.0, 0.0, 0.0);
        let (mut clamped, mut terms) = (0usize, 0usize);
        for it in 0..its {
            let idx: Vec<usize> = (0..m)
                .map(|_| rand::Rng::random_range(&mut rng, 0..n_train))
                .collect();
            let y: Vec<f64> = idx.iter().map(|&i| prep.train.y[i]).collect();
            let u: Vec<f64> = idx.iter().map(|&i| prep.train.x[i]).collect();
            let v = normals(m, &mut rng);
            let z = normals(m * k, &mut rng);

            let step = potential_step(
                state,
                &obj,
                &Batch {
                    y: &y,
                    v: &v,
                    z: &z,
                    u: &u,
                },
            );
            let (lp, r1, c) = step.map_err(|e| non_finite(state, epoch, it, e))?;
            clamped += c;
            terms += 2 * m;
            if c > 0 {
                log::warn!("epoch {epoch} iteration {it}: clamped {c} KL conjugate arguments");
            }

            let v2 = normals(m, &mut rng);
            let z2 = normals(m * k, &mut rng);
            let lt = generator_step(
                state,
                &obj,
                &Batch {
                    y: &y,
                    v: &v2,
                    z: &z2,
                    u: &u,
                },
            )
            .map_err(|e| non_finite(state, epoch, it, e))?;

            for (which, value) in [("L_phi", lp), ("L_T", lt)] {
                if value.abs() > cfg.max_abs_loss {
                    state.rng = RngState::capture(cfg.seed, &rng);
                    return Err(TrainError::Diverged {
                        epoch,
                        which,
                        value,
                        snapshot: Box::new(state.clone()),
                    });
                }
            }
            sum_lp += lp;
            sum_lt += lt;
            sum_r1 += r1;
        }
        state.rng = RngState::capture(cfg.seed, &rng);
        let fraction = clamped as f64 / terms as f64;
        if fraction > cfg.clamp_abort_fraction {
            return Err(TrainError::Clamping {
                epoch,
                fraction,
                snapshot: Box::new(state.clone()),
            });
        }
        state.epoch += 1;
        let done = state.epoch;
        let test_w2 = if done % cfg.eval_every == 0 || done == cfg.epochs {
            let w = selection_w2(&state.generator, &prep.test, cfg.eval_points, cfg.seed)?;
            log::info!("epoch {done}: selection W2 {w:.5}");
            if state.best.as_ref().is_none_or(|b| w < b.test_w2) {
                state.best = Some(BestSnapshot {
                    epoch: done,
                    test_w2: w,
                    generator: state.generator.clone(),
                });
            }
            Some(w)
        } else {
            None
        };
        state.history.push(LossRecord {
            epoch: done,
            loss_potential: sum_lp / its as f64,
            loss_generator: sum_lt / its as f64,
            r1: sum_r1 / its as f64,
            alpha,
            test_w2,
        });
    }
    Ok(())
}

fn non_finite(state: &TrainState, epoch: usize, iteration: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Autodiff(AutodiffError::NonFinite { op }) => TrainError::NonFinite {
            epoch,
            iteration,
            detail: format!("{op} produced a non-finite value"),
            snapshot: Box::new(state.clone()),
        },
        other => other,
    }
}

/// One Adam step on the potential. Returns `(L_φ, R1, clamped count)`.
fn potential_step(
    state: &mut TrainState,
    obj: &Objective,
    b: &Batch<'_>,
) -> Result<(f64, f64, usize), TrainError> {
    let mut g = Graph::new();
    let vars = state.potential.bind(&mut g, true);
    let terms = obj.potential_loss(&mut g, &state.generator, &state.potential, &vars, b)?;
    let grads = gradient_tensors(&mut g, terms.loss, &vars)?;
    let loss = g.value(terms.loss).item();
    state
        .adam_potential
        .step(state.potential.tensors_mut(), &grads)?;
    Ok((loss, terms.r1, terms.clamped))
}

fn generator_step(
    state: &mut TrainState,
    obj: &Objective,
    b: &Batch<'_>,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let vars = state.generator.bind(&mut g, true);
    let loss = obj.generator_loss(&mut g, &state.generator, &vars, &state.potential, b)?;
    let grads = gradient_tensors(&mut g, loss, &vars)?;
    let value = g.value(loss).item();
    state
        .adam_generator
        .step(state.generator.tensors_mut(), &grads)?;
    Ok(value)
}

/// Gradient values of `root` for each of `vars`, zeros where it does not depend.
pub fn gradient_tensors(
    g: &mut Graph,
    root: Var,
    vars: &[Var],
) -> Result<Vec<Tensor>, AutodiffError> {
    let nodes = g.grad(root, vars)?;
    Ok(nodes
        .iter()
        .zip(vars)
        .map(|(n, v)| match n {
            Some(n) => g.value(*n).clone(),
            None => Tensor::zeros(g.shape(*v)),
        })
        .collect())
}

/// Generated `(y, T(y, v, z))` for each condition in `y`, drawing `v` and `z`
/// from the evaluation stream of `seed`.
pub fn generate(generator: &GeneratorParams, y: &[f64], seed: u64) -> Result<Vec<f64>, NetError> {
    let mut rng = rng::stream(seed, streams::EVAL);
    let v = normals(y.len(), &mut rng);
    let z = nets::sample_z(generator.arch(), y.len(), &mut rng);
    generator.apply(y, &v, &z)
}

/// Exact W2 between the first `n` standardized test pairs and generated pairs
/// on the same conditions.
fn selection_w2(
    generator: &GeneratorParams,
    test: &PairBatch,
    n: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let y = &test.y[..n];
    let u = generate(generator, y, seed)?;
    let a = EmpiricalDistribution::from_columns(y, &u)?;
    let b = EmpiricalDistribution::from_columns(y, &test.x[..n])?;
    Ok(metrics::w2_exact(&a, &b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Quantile bins for the conditional W2.
    pub bins: usize,
    /// Joint W2 on this many leading test pairs; all of them when `None`.
    pub joint_points: Option<usize>,
    pub robust_repeats: usize,
    /// Subsample size for clean-reference W2; the clean count when `None`.
    pub robust_n_sub: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bins: 20,
            joint_points: None,
            robust_repeats: 1,
            robust_n_sub: None,
        }
    }
}

/// Scores `generator` on the test split of `data`.
///
/// Generated pairs reuse the test conditions. Joint and conditional W2 are in
/// standardized units against the test split as drawn (outliers included);
/// with outliers present the report adds W2 against the clean test rows.
pub fn evaluate(
    generator: &GeneratorParams,
    data: &Dataset,
    opts: &EvalOptions,
    config: &TrainConfig,
    best_epoch: Option<usize>,
    history: &[LossRecord],
) -> Result<MetricsReport, TrainError> {
    let test = data.stats.apply(&data.test);
    let n = opts.joint_points.unwrap_or(test.len()).min(test.len());
    let u = generate(generator, &test.y[..n], config.seed)?;
    evaluate_samples(&u, data, opts, config, best_epoch, history)
}

/// Scores standardized generated values `u`, one per leading test condition.
pub fn evaluate_samples(
    u: &[f64],
    data: &Dataset,
    opts: &EvalOptions,
    config: &TrainConfig,
    best_epoch: Option<usize>,
    history: &[LossRecord],
) -> Result<MetricsReport, TrainError> {
    let test = data.stats.apply(&data.test);
    let n = u.len().min(test.len());
    let (y, u) = (&test.y[..n], &u[..n]);
    let gen_std = EmpiricalDistribution::from_columns(y, &u)?;
    let ref_std = EmpiricalDistribution::from_columns(y, &test.x[..n])?;
    let joint = metrics::w2_exact(&gen_std, &ref_std)?;

    let gen_batch = PairBatch::new(data.test.kind, y.to_vec(), u.to_vec(), vec![false; n])?;
    let gen_raw = data.stats.invert(&gen_batch);
    let test_raw = &data.test;
    let joint_raw = metrics::w2_exact(
        &EmpiricalDistribution::from_columns(&gen_raw.y, &gen_raw.x)?,
        &EmpiricalDistribution::from_columns(&test_raw.y[..n], &test_raw.x[..n])?,
    )?;
    let cond = metrics::w2_conditional_binned(&gen_std, &ref_std, opts.bins)?;

    let robust = if data.test.outlier_count() > 0 {
        let clean = test.inliers();
        let clean_ref = EmpiricalDistribution::from_columns(&clean.y, &clean.x)?;
        let n_sub = opts.robust_n_sub.unwrap_or(clean.len()).min(n);
        let clean_w2 = metrics::robust_w2(
            &gen_std,
            &clean_ref,
            n_sub,
            opts.robust_repeats,
            config.seed,
        )?;
        Some(RobustReport {
            contaminated_w2: joint,
            clean_w2,
            n_sub,
            repeats: opts.robust_repeats,
        })
    } else {
        None
    };

    Ok(MetricsReport {
        joint_w2: joint,
        joint_w2_raw: joint_raw,
        conditional_w2: cond.value,
        conditional_bins: opts.bins,
        per_bin_w2: cond.per_bin,
        n_generated: n,
        n_reference: n,
        protocol: format!(
            "exact assignment on {n} generated vs {n} test pairs sharing conditions; \
             standardized units (raw-frame value alongside); conditional W2 over {} y-quantile bins",
            opts.bins
        ),
        robust,
        fingerprint: config.fingerprint(),
        seed: config.seed,
        best_epoch,
        diverged: None,
        wall_seconds: None,
        loss_history: history.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::DatasetKind;

    fn tiny_config() -> TrainConfig {
        let mut data = DataConfig::new(DatasetKind::Moons);
        data.n_train = 64;
        data.n_test = 32;
        let mut c = TrainConfig::paper_defaults(data);
        c.arch = ArchConfig::with_width(2);
        c.batch_size = 16;
        c.epochs = 2;
        c.eval_every = 1;
        c.eval_points = 16;
        c
    }

    #[test]
    fn fingerprint_ignores_spelled_out_default_noise() {
        let a = tiny_config();
        let mut b = a.clone();
        b.data.noise = Some(a.data.kind.default_noise());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.data.noise = Some(0.2);
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn cost_examples() {
        assert_eq!(transport_cost(&[0.0], &[1.0], 0.0007), vec![0.0007]);
        assert_eq!(transport_cost(&[1.5], &[1.5], 3.0), vec![0.0]);
        assert_eq!(transport_cost(&[1.0], &[4.0], 2.0), vec![18.0]);
    }

    fn scalar_objective(obj: &Objective, c: f64, fake: f64, real: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let c = g.constant(Tensor::column(vec![c]));
        let f = g.constant(Tensor::column(vec![fake]));
        let r = g.constant(Tensor::column(vec![real]));
        let (lp, _) = obj.potential_objective(&mut g, c, f, r).unwrap();
        let lt = obj.generator_objective(&mut g, c, f).unwrap();
        (g.value(lp).item(), g.value(lt).item())
    }

    #[test]
    fn hand_evaluated_losses() {
        let cotm = tiny_config().as_cotm().objective(1.0);
        let (lp, _) = scalar_objective(&cotm, 0.5, 0.2, 0.7);
        assert!((lp + 1.0).abs() < 1e-15);
        let kl = tiny_config().objective(1.0);
        assert_eq!(scalar_objective(&kl, 0.0, 0.0, 0.0).0, 0.0);
        let (_, lt) = scalar_objective(&kl, 0.3, 0.1, 0.0);
        assert!((lt - 0.2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_potential_pulls_generator_to_its_peak() {
        // With φ(u) = −(u − u*)² frozen, c − φ is minimized near u* as τ → 0.
        let u_star = 0.7;
        let v = -1.3;
        let grid: Vec<f64> = (0..=4000).map(|i| -2.0 + i as f64 * 1e-3).collect();
        for tau in [1e-1, 1e-3, 1e-6] {
            let obj = Objective {
                tau,
                ..tiny_config().objective(1.0)
            };
            let best = grid
                .iter()
                .map(|&u| {
                    let (_, lt) = scalar_objective(
                        &obj,
                        tau * (v - u) * (v - u),
                        -(u - u_star) * (u - u_star),
                        0.0,
                    );
                    (u, lt)
                })
                .fold((0.0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
            let exact = (tau * v + u_star) / (1.0 + tau);
            assert!((best.0 - exact).abs() <= 1e-3);
        }
    }

    #[test]
    fn constant_potential_and_zero_tau_leave_generator_flat() {
        let cfg = tiny_config();
        let (gen, pot) = nets::init_params(&cfg.arch, 1).unwrap();
        // Zero the potential head so φ is identically its (zero) bias.
        let mut flat = pot.clone();
        let tensors: Vec<Tensor> = flat
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        flat.set_tensors(tensors).unwrap();
        let obj = Objective {
            tau: 0.0,
            ..cfg.objective(1.0)
        };
        let z = nets::sample_z(&cfg.arch, 3, &mut rng::stream(0, 60));
        let b = Batch {
            y: &[0.1, 0.2, 0.3],
            v: &[1.0, -1.0, 0.5],
            z: &z,
            u: &[0.0; 3],
        };
        let mut g = Graph::new();
        let vars = gen.bind(&mut g, true);
        let l = obj.generator_loss(&mut g, &gen, &vars, &flat, &b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        for t in gradient_tensors(&mut g, l, &vars).unwrap() {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn alpha_schedule_shapes() {
        let c = AlphaSchedule::Constant { value: 1.0 };
        assert_eq!(c.at(5, 10), 1.0);
        let g = AlphaSchedule::standard_ramp();
        let vals: Vec<f64> = (0..20).map(|e| g.at(e, 20)).collect();
        assert_eq!(vals[0], 1.0);
        assert_eq!(vals[10], 64.0);
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
        assert!(AlphaSchedule::Geometric {
            start: 0.5,
            end: 2.0,
            ramp_fraction: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.tau = 0.0;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let mut c = tiny_config();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert_eq!(tiny_config().iterations_per_epoch(), 4);
        let mut c = tiny_config();
        c.data.n_train = 65;
        assert_eq!(c.iterations_per_epoch(), 5);
    }

    #[test]
    fn cotm_differs_only_in_conjugates() {
        let c = TrainConfig::paper_defaults(DataConfig::new(DatasetKind::Circles));
        let b = c.as_cotm();
        assert_eq!(b.psi1, EntropyKind::Identity);
        assert_eq!(b.psi2, EntropyKind::Identity);
        assert_eq!(
            TrainConfig {
                psi1: c.psi1,
                psi2: c.psi2,
                ..b
            },
            c
        );
    }

    #[test]
    fn short_run_is_finite_and_resumable() {
        let cfg = tiny_config();
        let out = train(&cfg).unwrap();
        assert_eq!(out.state.history.len(), 2);
        for r in &out.state.history {
            assert!(r.loss_potential.is_finite() && r.loss_generator.is_finite());
            assert!(r.test_w2.is_some());
        }
        assert!(out.report.joint_w2.is_finite());

        let data = Dataset::generate(&cfg.data, cfg.seed).unwrap();
        let mut half = TrainState::new(cfg.clone()).unwrap();
        run_epochs(&mut half, &data, 1).unwrap();
        let json = half.to_json().unwrap();
        let mut resumed = TrainState::from_json(&json).unwrap();
        run_epochs(&mut resumed, &data, 2).unwrap();
        assert_eq!(resumed.generator.tensors(), out.state.generator.tensors());
        assert_eq!(resumed.potential.tensors(), out.state.potential.tensors());
        assert_eq!(resumed.history, out.state.history);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.state.generator.tensors(), b.state.generator.tensors());
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn huge_losses_abort_with_snapshot() {
        let mut cfg = tiny_config();
        cfg.max_abs_loss = 1e-12;
        let err = train(&cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }));
        assert!(err.snapshot().is_some());
    }
}

//! Exact solver for finite-support conditional unbalanced OT.
//!
//! The problem splits into one convex program per condition,
//! `min_{π ≥ 0} ⟨C, π⟩ + D_{αΨ1}(π1 ‖ a) + D_{αΨ2}(πᵀ1 ‖ b)`, solved by
//! projected gradient with Barzilai–Borwein trial steps and Armijo
//! backtracking. Plan mass is only ever placed on reference atoms.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{EntropyFunction, EntropyKind};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("the {0} entropy is a hard constraint; use the balanced solver instead")]
    Unsupported(&'static str),
    #[error("dual potentials violate φ + ϕ ≤ C at {} pairs, worst (condition {}, {}, {}) by {:e}", .0.len(), .0[0].0, .0[0].1, .0[0].2, .0[0].3)]
    Infeasible(Vec<(usize, usize, usize, f64)>),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One condition `y` with its source and target atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionBlock {
    pub y: f64,
    /// `ν_Y(y)`, shared by source and target.
    pub weight: f64,
    pub source_atoms: Vec<f64>,
    pub source_weights: Vec<f64>,
    pub target_atoms: Vec<f64>,
    pub target_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteInstance {
    pub conditions: Vec<ConditionBlock>,
    pub tau: f64,
    pub psi1: EntropyKind,
    pub psi2: EntropyKind,
    #[serde(default = "one")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl DiscreteInstance {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::Invalid(m));
        if self.conditions.is_empty() {
            return bad("no conditions".into());
        }
        if !(self.tau >= 0.0 && self.alpha > 0.0) {
            return bad(format!(
                "need tau >= 0 and alpha > 0, got {} and {}",
                self.tau, self.alpha
            ));
        }
        let total: f64 = self.conditions.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("condition weights sum to {total}"));
        }
        for (k, c) in self.conditions.iter().enumerate() {
            if !(c.weight > 0.0) {
                return bad(format!("condition {k} has non-positive weight"));
            }
            for (what, atoms, w) in [
                ("source", &c.source_atoms, &c.source_weights),
                ("target", &c.target_atoms, &c.target_weights),
            ] {
                if atoms.is_empty() || atoms.len() != w.len() {
                    return bad(format!("condition {k}: {what} atoms and weights disagree"));
                }
                if w.iter().any(|&x| !(x > 0.0)) {
                    return bad(format!("condition {k}: {what} weights must be positive"));
                }
                let s: f64 = w.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("condition {k}: {what} weights sum to {s}"));
                }
            }
        }
        Ok(())
    }

    pub fn entropies(&self) -> (EntropyFunction, EntropyFunction) {
        (
            EntropyFunction::with_alpha(self.psi1, self.alpha),
            EntropyFunction::with_alpha(self.psi2, self.alpha),
        )
    }

    /// `C_ij = τ (v_i − u_j)²` for condition `k`, row-major.
    pub fn cost(&self, k: usize) -> Matrix {
        let c = &self.conditions[k];
        let (n, m) = (c.source_atoms.len(), c.target_atoms.len());
        let mut data = Vec::with_capacity(n * m);
        for &v in &c.source_atoms {
            for &u in &c.target_atoms {
                data.push(self.tau * (v - u) * (v - u));
            }
        }
        Matrix {
            rows: n,
            cols: m,
            data,
        }
    }

    /// One condition, one source and one target atom, cost `c0`.
    pub fn single_pair(c0: f64) -> Self {
        DiscreteInstance {
            conditions: vec![ConditionBlock {
                y: 0.0,
                weight: 1.0,
                source_atoms: vec![0.0],
                source_weights: vec![1.0],
                target_atoms: vec![c0.sqrt()],
                target_weights: vec![1.0],
            }],
            tau: 1.0,
            psi1: EntropyKind::Kl,
            psi2: EntropyKind::Kl,
            alpha: 1.0,
        }
    }

    /// A source at 0 against targets ±1 and a far atom at 10 holding 1% of the
    /// mass, so the far atom costs 100 times a near one.
    pub fn outlier() -> Self {
        DiscreteInstance {
            conditions: vec![ConditionBlock {
                y: 0.0,
                weight: 1.0,
                source_atoms: vec![0.0],
                source_weights: vec![1.0],
                target_atoms: vec![-1.0, 1.0, 10.0],
                target_weights: vec![0.495, 0.495, 0.01],
            }],
            tau: 1.0,
            psi1: EntropyKind::Kl,
            psi2: EntropyKind::Kl,
            alpha: 1.0,
        }
    }

    /// Random instance: atoms uniform on `[-1, 1]`, weights uniform on
    /// `[0.1, 1]` then normalized.
    pub fn random(
        rng: &mut Rng,
        conditions: usize,
        n_source: usize,
        n_target: usize,
        kinds: (EntropyKind, EntropyKind),
        tau: f64,
    ) -> Self {
        let weights = |n: usize, rng: &mut Rng| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let cw = weights(conditions, rng);
        let blocks = cw
            .into_iter()
            .enumerate()
            .map(|(k, w)| ConditionBlock {
                y: k as f64,
                weight: w,
                source_atoms: (0..n_source).map(|_| rng.random_range(-1.0..1.0)).collect(),
                source_weights: weights(n_source, rng),
                target_atoms: (0..n_target).map(|_| rng.random_range(-1.0..1.0)).collect(),
                target_weights: weights(n_target, rng),
            })
            .collect();
        DiscreteInstance {
            conditions: blocks,
            tau,
            psi1: kinds.0,
            psi2: kinds.1,
            alpha: 1.0,
        }
    }

    pub fn to_json(&self) -> Result<String, OracleError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, OracleError> {
        let inst: DiscreteInstance = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols) {
            for (a, b) in s.iter_mut().zip(r) {
                *a += b;
            }
        }
        s
    }

    pub fn rows_vec(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPlan {
    pub plan: Matrix,
    /// Objective of this condition alone, before weighting by `ν_Y(y)`.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub conditions: Vec<ConditionPlan>,
    pub objective: f64,
    pub converged: bool,
    /// Primal minus dual at the recovered potentials.
    pub duality_gap: f64,
    /// Set when uniqueness of the optimum is not guaranteed.
    pub caveat: Option<String>,
}

impl TransportPlan {
    pub fn to_json(&self) -> Result<String, OracleError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-condition source potentials `φ` and target potentials `ϕ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-11,
            max_iter: 200_000,
        }
    }
}

/// Smallest ratio used inside `log` so KL gradients stay finite at zero mass.
const RATIO_FLOOR: f64 = 1e-300;

/// `αΨ′(t)` with `t` kept inside the open domain where the derivative is finite.
fn deriv(f: &EntropyFunction, t: f64) -> f64 {
    let hi = f.kind.domain().1;
    let t = if hi.is_finite() {
        t.min(hi * (1.0 - f64::EPSILON))
    } else {
        t
    };
    f.psi_deriv(t.max(RATIO_FLOOR))
}

struct Problem<'a> {
    cost: &'a Matrix,
    a: &'a [f64],
    b: &'a [f64],
    f1: EntropyFunction,
    f2: EntropyFunction,
}

impl Problem<'_> {
    fn objective(&self, x: &[f64]) -> f64 {
        let m = self.cost.cols;
        let mut rows = vec![0.0; self.cost.rows];
        let mut cols = vec![0.0; m];
        let mut lin = 0.0;
        for (idx, &p) in x.iter().enumerate() {
            lin += self.cost.data[idx] * p;
            rows[idx / m] += p;
            cols[idx % m] += p;
        }
        let d1 = self.f1.divergence(&rows, self.a).unwrap_or(f64::INFINITY);
        let d2 = self.f2.divergence(&cols, self.b).unwrap_or(f64::INFINITY);
        lin + d1 + d2
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let m = self.cost.cols;
        let mut rows = vec![0.0; self.cost.rows];
        let mut cols = vec![0.0; m];
        for (idx, &p) in x.iter().enumerate() {
            rows[idx / m] += p;
            cols[idx % m] += p;
        }
        let gr: Vec<f64> = rows
            .iter()
            .zip(self.a)
            .map(|(r, a)| deriv(&self.f1, r / a))
            .collect();
        let gc: Vec<f64> = cols
            .iter()
            .zip(self.b)
            .map(|(s, b)| deriv(&self.f2, s / b))
            .collect();
        (0..x.len())
            .map(|idx| self.cost.data[idx] + gr[idx / m] + gc[idx % m])
            .collect()
    }

    /// Diagonal of the Hessian; entries with zero marginal mass see the
    /// curvature at the floored ratio.
    fn hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        let m = self.cost.cols;
        let mut rows = vec![0.0; self.cost.rows];
        let mut cols = vec![0.0; m];
        for (idx, &p) in x.iter().enumerate() {
            rows[idx / m] += p;
            cols[idx % m] += p;
        }
        let curv = |f: &EntropyFunction, mass: f64, w: f64| {
            let hi = f.kind.domain().1;
            let mut t = (mass / w).max(RATIO_FLOOR);
            if hi.is_finite() {
                t = t.min(hi * (1.0 - f64::EPSILON));
            }
            f.psi_second(t) / w
        };
        let hr: Vec<f64> = rows
            .iter()
            .zip(self.a)
            .map(|(&r, &a)| curv(&self.f1, r, a))
            .collect();
        let hc: Vec<f64> = cols
            .iter()
            .zip(self.b)
            .map(|(&s, &b)| curv(&self.f2, s, b))
            .collect();
        (0..x.len()).map(|idx| hr[idx / m] + hc[idx % m]).collect()
    }
}

fn kkt(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&p, &d)| p.min(d).abs())
        .fold(0.0, f64::max)
}

/// Projected gradient scaled by the inverse Hessian diagonal, with Armijo
/// backtracking along the projection arc. The scaling lets entries whose
/// optimal mass is many orders of magnitude below the rest grow back
/// geometrically after the projection zeroes them.
fn solve_condition(p: &Problem<'_>, init: Vec<f64>, opts: &SolverOptions) -> ConditionPlan {
    let mut x = init;
    let mut fx = p.objective(&x);
    let mut g = p.gradient(&x);
    let mut step: f64 = 1.0;
    let mut res = kkt(&x, &g);
    let mut decrease = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter && !(res < opts.tol && decrease < opts.tol) {
        iterations += 1;
        let h = p.hessian_diag(&x);
        let dir: Vec<f64> = g.iter().zip(&h).map(|(g, h)| -g / h).collect();
        let mut s = step;
        let mut accepted = None;
        for _ in 0..100 {
            let xn: Vec<f64> = x
                .iter()
                .zip(&dir)
                .map(|(xi, di)| (xi + s * di).max(0.0))
                .collect();
            let fnew = p.objective(&xn);
            let d: f64 = g
                .iter()
                .zip(xn.iter().zip(&x))
                .map(|(gi, (a, b))| gi * (a - b))
                .sum();
            // Allow for rounding in the objective once progress is tiny.
            let slack = 8.0 * f64::EPSILON * fx.abs().max(1.0);
            if fnew.is_finite() && fnew <= fx + 1e-4 * d + slack {
                accepted = Some((xn, fnew));
                break;
            }
            s *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        decrease = (fx - fnew).abs() / fx.abs().max(1.0);
        let gn = p.gradient(&xn);
        // Barzilai-Borwein length measured in the scaled metric.
        let (mut sds, mut sy) = (0.0, 0.0);
        for i in 0..xn.len() {
            let dx = xn[i] - x[i];
            sds += dx * dx * h[i];
            sy += dx * (gn[i] - g[i]);
        }
        step = if sy > 0.0 && sds > 0.0 {
            (sds / sy).clamp(1e-8, 1e8)
        } else {
            (2.0 * s).min(1e8)
        };
        x = xn;
        fx = fnew;
        g = gn;
        res = kkt(&x, &g);
    }
    ConditionPlan {
        plan: Matrix {
            rows: p.cost.rows,
            cols: p.cost.cols,
            data: x,
        },
        objective: fx,
        kkt_residual: res,
        iterations,
        converged: res < opts.tol && decrease < opts.tol,
    }
}

fn check_supported(inst: &DiscreteInstance) -> Result<(), OracleError> {
    inst.validate()?;
    for k in [inst.psi1, inst.psi2] {
        if k == EntropyKind::Identity {
            return Err(OracleError::Unsupported(k.name()));
        }
    }
    Ok(())
}

/// Solves from the product initialization `π⁰_ij = a_i b_j`.
pub fn solve_primal(
    inst: &DiscreteInstance,
    opts: &SolverOptions,
) -> Result<TransportPlan, OracleError> {
    check_supported(inst)?;
    let init = inst
        .conditions
        .iter()
        .map(|c| {
            c.source_weights
                .iter()
                .flat_map(|a| c.target_weights.iter().map(move |b| a * b))
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    solve_primal_from(inst, &init, opts)
}

/// Solves from a caller-supplied nonnegative initialization per condition.
pub fn solve_primal_from(
    inst: &DiscreteInstance,
    init: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<TransportPlan, OracleError> {
    check_supported(inst)?;
    if init.len() != inst.conditions.len() {
        return Err(OracleError::Invalid(
            "one initial plan per condition required".into(),
        ));
    }
    let (f1, f2) = inst.entropies();
    for (k, c) in inst.conditions.iter().enumerate() {
        let size = c.source_atoms.len() * c.target_atoms.len();
        if init[k].len() != size || init[k].iter().any(|&v| !(v >= 0.0)) {
            return Err(OracleError::Invalid(format!(
                "initial plan {k} has wrong size or sign"
            )));
        }
    }
    let solve = |k: usize| {
        let c = &inst.conditions[k];
        let cost = inst.cost(k);
        let p = Problem {
            cost: &cost,
            a: &c.source_weights,
            b: &c.target_weights,
            f1,
            f2,
        };
        solve_condition(&p, init[k].clone(), opts)
    };
    let n = inst.conditions.len();
    let workers = std::thread::available_parallelism()
        .map_or(1, |w| w.get())
        .min(n);
    let plans: Vec<ConditionPlan> = if workers <= 1 {
        (0..n).map(solve).collect()
    } else {
        // Strided split; results are put back in condition order.
        let mut slots: Vec<Option<ConditionPlan>> = vec![None; n];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let solve = &solve;
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|k| (k, solve(k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (k, p) in h.join().expect("oracle worker panicked") {
                    slots[k] = Some(p);
                }
            }
        });
        slots
            .into_iter()
            .map(|p| p.expect("every condition solved"))
            .collect()
    };
    let objective = inst
        .conditions
        .iter()
        .zip(&plans)
        .map(|(c, p)| c.weight * p.objective)
        .sum();
    let converged = plans.iter().all(|p| p.converged);
    let mut plan = TransportPlan {
        conditions: plans,
        objective,
        converged,
        duality_gap: f64::NAN,
        caveat: (!(inst.psi1.is_strictly_convex() && inst.psi2.is_strictly_convex())).then(|| {
            "softplus entropy: uniqueness of the optimal plan is not guaranteed".to_string()
        }),
    };
    let duals = recover_duals(inst, &plan);
    plan.duality_gap = plan.objective - eval_dual(inst, &duals)?;
    Ok(plan)
}

/// Objective of arbitrary plans, recomputed from their entries.
pub fn primal_objective(inst: &DiscreteInstance, plans: &[Matrix]) -> f64 {
    let (f1, f2) = inst.entropies();
    inst.conditions
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let cost = inst.cost(k);
            let p = Problem {
                cost: &cost,
                a: &c.source_weights,
                b: &c.target_weights,
                f1,
                f2,
            };
            c.weight * p.objective(&plans[k].data)
        })
        .sum()
}

/// Potentials from first-order conditions, `φ_i = −αΨ1′(r_i/a_i)` and
/// `ϕ_j = −αΨ2′(s_j/b_j)`, with `φ` lowered where needed so that
/// `φ_i + ϕ_j ≤ C_ij` holds exactly.
pub fn recover_duals(inst: &DiscreteInstance, plan: &TransportPlan) -> DualPotentials {
    let (f1, f2) = inst.entropies();
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (k, c) in inst.conditions.iter().enumerate() {
        let p = &plan.conditions[k].plan;
        let r = p.row_sums();
        let s = p.col_sums();
        let psi: Vec<f64> = s
            .iter()
            .zip(&c.target_weights)
            .map(|(s, b)| -deriv(&f2, s / b))
            .collect();
        let cost = inst.cost(k);
        let (ct, _) = c_transform_discrete(&psi, &cost);
        let phi: Vec<f64> = r
            .iter()
            .zip(&c.source_weights)
            .zip(&ct)
            .map(|((r, a), &cap)| (-deriv(&f1, r / a)).min(cap))
            .collect();
        source.push(phi);
        target.push(psi);
    }
    DualPotentials { source, target }
}

/// `Σ_y ν_Y(y) [Σ_i −(αΨ1)*(−φ_i) a_i + Σ_j −(αΨ2)*(−ϕ_j) b_j]`.
pub fn eval_dual(inst: &DiscreteInstance, duals: &DualPotentials) -> Result<f64, OracleError> {
    let (f1, f2) = inst.entropies();
    let mut violations = Vec::new();
    let mut total = 0.0;
    for (k, c) in inst.conditions.iter().enumerate() {
        let cost = inst.cost(k);
        let (phi, psi) = (&duals.source[k], &duals.target[k]);
        if phi.len() != cost.rows || psi.len() != cost.cols {
            return Err(OracleError::Invalid(format!(
                "dual sizes wrong for condition {k}"
            )));
        }
        for i in 0..cost.rows {
            for j in 0..cost.cols {
                let excess = phi[i] + psi[j] - cost.at(i, j);
                if excess > 1e-10 {
                    violations.push((k, i, j, excess));
                }
            }
        }
        let d1: f64 = phi
            .iter()
            .zip(&c.source_weights)
            .map(|(p, a)| -f1.psi_star(-p) * a)
            .sum();
        let d2: f64 = psi
            .iter()
            .zip(&c.target_weights)
            .map(|(p, b)| -f2.psi_star(-p) * b)
            .sum();
        total += c.weight * (d1 + d2);
    }
    if !violations.is_empty() {
        violations.sort_by(|a, b| b.3.total_cmp(&a.3));
        return Err(OracleError::Infeasible(violations));
    }
    Ok(total)
}

/// `ϕ^c_i = min_j (C_ij − ϕ_j)` with the minimizing index (smallest on ties).
pub fn c_transform_discrete(psi: &[f64], cost: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(cost.rows);
    let mut args = Vec::with_capacity(cost.rows);
    for i in 0..cost.rows {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (j, p) in psi.iter().enumerate() {
            let v = cost.at(i, j) - p;
            if v < best {
                best = v;
                arg = j;
            }
        }
        vals.push(best);
        args.push(arg);
    }
    (vals, args)
}

/// Reweighted atom masses `Ψ1*′(−φ_i) a_i` and `Ψ2*′(−ϕ_j) b_j`.
pub fn relaxed_marginals(
    inst: &DiscreteInstance,
    duals: &DualPotentials,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (f1, f2) = inst.entropies();
    let src = inst
        .conditions
        .iter()
        .zip(&duals.source)
        .map(|(c, phi)| {
            phi.iter()
                .zip(&c.source_weights)
                .map(|(p, a)| f1.psi_star_deriv(-p) * a)
                .collect()
        })
        .collect();
    let tgt = inst
        .conditions
        .iter()
        .zip(&duals.target)
        .map(|(c, psi)| {
            psi.iter()
                .zip(&c.target_weights)
                .map(|(p, b)| f2.psi_star_deriv(-p) * b)
                .collect()
        })
        .collect();
    (src, tgt)
}

/// Optimal balanced plan for the quadratic cost on the line: the monotone
/// (north-west corner) coupling of the sorted atoms. Both weight vectors must
/// carry the same total mass.
pub fn balanced_plan_1d(src: &[f64], a: &[f64], tgt: &[f64], b: &[f64]) -> Matrix {
    let mut si: Vec<usize> = (0..src.len()).collect();
    let mut ti: Vec<usize> = (0..tgt.len()).collect();
    si.sort_by(|&i, &j| src[i].total_cmp(&src[j]));
    ti.sort_by(|&i, &j| tgt[i].total_cmp(&tgt[j]));
    let mut plan = Matrix::zeros(src.len(), tgt.len());
    let (mut ra, mut rb) = (a[si[0]], b[ti[0]]);
    let (mut p, mut q) = (0, 0);
    while p < si.len() && q < ti.len() {
        let mass = ra.min(rb);
        plan.data[si[p] * tgt.len() + ti[q]] += mass;
        ra -= mass;
        rb -= mass;
        if ra <= rb {
            p += 1;
            if p < si.len() {
                ra = a[si[p]];
            }
        } else {
            q += 1;
            if q < ti.len() {
                rb = b[ti[q]];
            }
        }
    }
    plan
}

/// `(W2^{ν_Y})²(η, ν) = Σ_y ν_Y(y) W2²(η(·|y), ν(·|y))` for the instance.
pub fn conditional_w2_squared(inst: &DiscreteInstance) -> f64 {
    inst.conditions
        .iter()
        .map(|c| {
            let plan = balanced_plan_1d(
                &c.source_atoms,
                &c.source_weights,
                &c.target_atoms,
                &c.target_weights,
            );
            let mut s = 0.0;
            for (i, v) in c.source_atoms.iter().enumerate() {
                for (j, u) in c.target_atoms.iter().enumerate() {
                    s += plan.at(i, j) * (v - u) * (v - u);
                }
            }
            c.weight * s
        })
        .sum()
}

/// `Σ_y ν_Y(y) [D_{Ψ1}(π1 ‖ η) + D_{Ψ2}(π2 ‖ ν)]` with the unscaled entropies.
pub fn marginal_divergence(inst: &DiscreteInstance, plan: &TransportPlan) -> f64 {
    let f1 = EntropyFunction::new(inst.psi1);
    let f2 = EntropyFunction::new(inst.psi2);
    inst.conditions
        .iter()
        .zip(&plan.conditions)
        .map(|(c, p)| {
            let d1 = f1
                .divergence(&p.plan.row_sums(), &c.source_weights)
                .unwrap_or(f64::INFINITY);
            let d2 = f2
                .divergence(&p.plan.col_sums(), &c.target_weights)
                .unwrap_or(f64::INFINITY);
            c.weight * (d1 + d2)
        })
        .sum()
}

/// `τ (W2^{ν_Y})² − Σ_y ν_Y(y)[D_{αΨ1}(η̃‖η) + D_{αΨ2}(ν̃‖ν)]`, with the relaxed
/// marginals taken from the recovered duals. Non-negative by the bound.
pub fn divergence_bound_margin(inst: &DiscreteInstance, plan: &TransportPlan) -> f64 {
    let duals = recover_duals(inst, plan);
    let (src, tgt) = relaxed_marginals(inst, &duals);
    let (f1, f2) = inst.entropies();
    let div: f64 = inst
        .conditions
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let d1 = f1
                .divergence(&src[k], &c.source_weights)
                .unwrap_or(f64::INFINITY);
            let d2 = f2
                .divergence(&tgt[k], &c.target_weights)
                .unwrap_or(f64::INFINITY);
            c.weight * (d1 + d2)
        })
        .sum();
    inst.tau * conditional_w2_squared(inst) - div
}

/// Total variation `½ Σ |p − q|` summed over conditions, weighted.
pub fn marginal_tv(inst: &DiscreteInstance, plan: &TransportPlan) -> f64 {
    inst.conditions
        .iter()
        .zip(&plan.conditions)
        .map(|(c, p)| {
            let tv = |x: &[f64], y: &[f64]| {
                0.5 * x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>()
            };
            c.weight
                * (tv(&p.plan.row_sums(), &c.source_weights)
                    + tv(&p.plan.col_sums(), &c.target_weights))
        })
        .sum()
}

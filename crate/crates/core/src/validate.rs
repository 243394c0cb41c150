//! Numerical property suites with measured residuals.
//!
//! Each check reports what it measured next to the limit it is held to, so a
//! caller can print or assert either.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{grad_check, AutodiffError, Graph, OpKind, Tensor, Var};
use crate::divergence::{EntropyFunction, EntropyKind};
use crate::nets::{self, ArchConfig, GeneratorParams, PotentialParams};
use crate::oracle::{self, DiscreteInstance, SolverOptions};
use crate::rng;
use crate::synthdata::{DataConfig, DatasetKind};
use crate::trainer::{Batch, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    /// `true` when the measured value must not exceed the limit; `false` when
    /// it must not fall below it.
    pub upper: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            limit,
            upper: true,
        }
    }

    fn at_least(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            limit,
            upper: false,
        }
    }

    pub fn passed(&self) -> bool {
        if self.upper {
            self.measured <= self.limit
        } else {
            self.measured >= self.limit
        }
    }

    pub fn line(&self) -> String {
        let rel = if self.upper { "<=" } else { ">=" };
        format!(
            "{} {}: measured {:.3e} {rel} {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.limit
        )
    }
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("literal shape")
}

/// Each op applied to a 2×3 input and reduced with fixed weights to a scalar.
fn op_as_scalar(op: OpKind, g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let w = g.constant(t(&[3, 2], &[0.5, -1.0, 0.25, 2.0, -0.75, 1.5]));
    let other = g.constant(t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]));
    let out = match op {
        OpKind::MatMul => g.apply(op, &[x, w])?,
        OpKind::Add | OpKind::Sub | OpKind::ConcatLastAxis => g.apply(op, &[x, other])?,
        OpKind::Log => {
            let sq = g.square(x)?;
            let pos = g.add_scalar(sq, 0.5)?;
            g.apply(op, &[pos])?
        }
        _ => g.apply(op, &[x])?,
    };
    let n = g.value(out).len();
    if n == 1 {
        return g.sum(out);
    }
    let shape = g.shape(out).to_vec();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let wt = g.constant(Tensor::new(shape, weights)?);
    let p = g.mul(out, wt)?;
    g.sum(p)
}

/// Worst finite-difference error over all tensors of a network, perturbing
/// one tensor at a time.
fn network_error<F>(params: &[Tensor], f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let err = grad_check(
            |g, x| {
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == k { x } else { g.constant(p.clone()) })
                    .collect();
                f(g, &vars)
            },
            &params[k],
            1e-4,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn net_err(e: crate::nets::NetError) -> AutodiffError {
    match e {
        crate::nets::NetError::Autodiff(a) => a,
        other => panic!("tiny network evaluation failed: {other}"),
    }
}

/// Every op, both tiny networks, and a double-backward R1 penalty.
pub fn gradient_suite() -> Result<Vec<Check>, AutodiffError> {
    let mut out = Vec::new();
    let x0 = t(&[2, 3], &[0.3, -0.8, 1.1, -0.2, 0.6, -1.4]);
    let mut worst_op: f64 = 0.0;
    for op in OpKind::ALL {
        worst_op = worst_op.max(grad_check(|g, x| op_as_scalar(op, g, x), &x0, 1e-6)?);
    }
    out.push(Check::at_most(
        "gradient: every op vs central differences",
        worst_op,
        1e-5,
    ));

    let arch = ArchConfig::with_width(2);
    let (gen, pot) = nets::init_params(&arch, 5).map_err(net_err)?;
    let y = [0.3, -0.6, 1.1];
    let v = [-1.0, 0.2, 0.9];
    let z = nets::sample_z(&arch, 3, &mut rng::stream(5, 52));
    let ge = network_error(gen.tensors(), |g, w| {
        let yv = g.constant(Tensor::column(y.to_vec()));
        let vv = g.constant(Tensor::column(v.to_vec()));
        let zv = g.constant(Tensor::matrix(3, arch.z_dim(), z.clone())?);
        let out = gen.forward(g, w, yv, vv, zv)?;
        let sq = g.square(out)?;
        g.mean(sq)
    })?;
    out.push(Check::at_most("gradient: tiny generator", ge, 1e-4));
    let pe = network_error(pot.tensors(), |g, w| {
        let yv = g.constant(Tensor::column(y.to_vec()));
        let uv = g.constant(Tensor::column(v.to_vec()));
        let out = pot.forward(g, w, yv, uv)?;
        g.mean(out)
    })?;
    out.push(Check::at_most("gradient: tiny potential", pe, 1e-4));
    let r1 = network_error(pot.tensors(), |g, w| {
        let yv = g.constant(Tensor::column(y.to_vec()));
        let uv = g.leaf(Tensor::column(v.to_vec()));
        let phi = pot.forward(g, w, yv, uv)?;
        let s = g.sum(phi)?;
        let du = g.grad(s, &[uv])?[0].expect("potential depends on u");
        let sq = g.row_sq_norm(du)?;
        g.mean(sq)
    })?;
    out.push(Check::at_most(
        "gradient: double-backward R1 penalty",
        r1,
        1e-4,
    ));
    Ok(out)
}

/// `t` in 0.01..=3 (step 0.01) inside the domain, and `x` in −5..=5 (step 0.1).
fn grids(kind: EntropyKind) -> (Vec<f64>, Vec<f64>) {
    let hi = kind.domain().1;
    let ts = (1..=300)
        .map(|i| i as f64 * 0.01)
        .filter(|&t| t < hi)
        .collect();
    let xs = (-50..=50).map(|i| i as f64 * 0.1).collect();
    (ts, xs)
}

/// Fenchel–Young gap, numeric conjugacy, α-scaling and closed-form values.
pub fn divergence_suite() -> Vec<Check> {
    let mut min_gap = f64::INFINITY;
    let mut tangent_gap: f64 = 0.0;
    let mut conj: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for kind in EntropyKind::CSISZAR {
        let e = EntropyFunction::new(kind);
        let (ts, xs) = grids(kind);
        for &t in &ts {
            for &x in &xs {
                min_gap = min_gap.min(e.conjugate_gap(t, x).expect("grid inside domain"));
            }
            let h = 1e-6 * t.min(1.0);
            let slope = (e.psi(t + h).expect("domain") - e.psi(t - h).expect("domain")) / (2.0 * h);
            tangent_gap = tangent_gap.max(e.conjugate_gap(t, slope).expect("domain").abs());
        }
        let hi = if kind == EntropyKind::Softplus {
            1.0
        } else {
            160.0
        };
        let fine: Vec<(f64, f64)> = (0..=400_000)
            .map(|i| i as f64 * hi / 400_000.0)
            .map(|t| (t, e.psi(t).expect("domain")))
            .collect();
        for &x in &xs {
            let sup = fine
                .iter()
                .map(|(t, p)| t * x - p)
                .fold(f64::NEG_INFINITY, f64::max);
            conj = conj.max((sup - e.psi_star(x)).abs());
            for a in [0.25, 2.0, 64.0] {
                let lhs = EntropyFunction::with_alpha(kind, a).psi_star(x);
                let rhs = a * e.psi_star(x / a);
                scale = scale.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            }
        }
    }
    let spot = [
        EntropyFunction::new(EntropyKind::Kl).psi_star(0.0).abs(),
        (EntropyFunction::new(EntropyKind::ChiSquared).psi_star(-3.0) + 1.0).abs(),
        (EntropyFunction::new(EntropyKind::Softplus).psi_star(0.0) - std::f64::consts::LN_2).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    vec![
        Check::at_least(
            "divergence: minimum Fenchel-Young gap on grid",
            min_gap,
            -1e-12,
        ),
        Check::at_most(
            "divergence: gap at finite-difference tangent",
            tangent_gap,
            1e-8,
        ),
        Check::at_most(
            "divergence: grid supremum vs closed-form conjugate",
            conj,
            1e-4,
        ),
        Check::at_most("divergence: alpha-scaling identity", scale, 1e-12),
        Check::at_most("divergence: closed-form spot values", spot, 1e-12),
    ]
}

/// Oracle summary used by the suite and by the command-line check.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub checks: Vec<Check>,
    pub canonical_mass: f64,
    /// Unscaled marginal divergence at α = 1, 10, 100 for the sweep instance.
    pub alpha_sweep: Vec<(f64, f64)>,
}

/// Duality, uniqueness, the canonical instance, the divergence bound,
/// α-tightening and outlier deflection.
pub fn oracle_suite(
    n_random: usize,
    size: usize,
    seed: u64,
) -> Result<OracleSummary, oracle::OracleError> {
    let opts = SolverOptions::default();
    let mut r = rng::stream(seed, 400);
    let kl = (EntropyKind::Kl, EntropyKind::Kl);
    let (mut gap, mut uniq): (f64, f64) = (0.0, 0.0);
    let mut all_converged = true;
    for _ in 0..n_random {
        let inst = DiscreteInstance::random(&mut r, 1, size, size, kl, 1.0);
        let a = solve_random_init(&inst, &mut r, &opts)?;
        let b = solve_random_init(&inst, &mut r, &opts)?;
        all_converged &= a.converged && b.converged;
        gap = gap.max(a.duality_gap.abs()).max(b.duality_gap.abs());
        for (x, y) in a.conditions[0]
            .plan
            .data
            .iter()
            .zip(&b.conditions[0].plan.data)
        {
            uniq = uniq.max((x - y).abs());
        }
    }

    let canon = oracle::solve_primal(&DiscreteInstance::single_pair(2.0), &opts)?;
    let m = canon.conditions[0].plan.data[0];

    let mut margin = f64::INFINITY;
    for _ in 0..20 {
        let inst = DiscreteInstance::random(&mut r, 3, 4, 4, kl, 1.0);
        let plan = oracle::solve_primal(&inst, &opts)?;
        margin = margin.min(oracle::divergence_bound_margin(&inst, &plan));
    }

    let mut sweep_inst = DiscreteInstance::random(&mut r, 1, 3, 3, kl, 1.0);
    let mut sweep = Vec::new();
    let mut increase: f64 = 0.0;
    let mut tv = f64::NAN;
    for alpha in [1.0, 10.0, 100.0] {
        sweep_inst.alpha = alpha;
        let plan = oracle::solve_primal(&sweep_inst, &opts)?;
        let d = oracle::marginal_divergence(&sweep_inst, &plan);
        if let Some(&(_, prev)) = sweep.last() {
            increase = increase.max(d - prev);
        }
        sweep.push((alpha, d));
        tv = oracle::marginal_tv(&sweep_inst, &plan);
    }

    let out_inst = DiscreteInstance::outlier();
    let out_plan = oracle::solve_primal(&out_inst, &opts)?;
    let far = out_plan.conditions[0].plan.col_sums()[2] / out_inst.conditions[0].target_weights[2];

    let checks = vec![
        Check::at_most(
            format!("oracle: duality gap on {n_random} random {size}x{size} KL/KL instances"),
            gap,
            1e-6,
        ),
        Check::at_most(
            "oracle: uniqueness residual from independent initializations",
            uniq,
            1e-6,
        ),
        Check::at_most(
            "oracle: all random solves converged (0 = yes)",
            if all_converged { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::at_most(
            "oracle: canonical 1x1 mass vs e^-1",
            (m - (-1f64).exp()).abs(),
            1e-6,
        ),
        Check::at_least(
            "oracle: divergence bound margin over 20 random instances",
            margin,
            -1e-8,
        ),
        Check::at_most(
            "oracle: largest divergence increase along alpha 1,10,100",
            increase,
            0.0,
        ),
        Check::at_most("oracle: marginal TV at alpha 100", tv, 0.01),
        Check::at_most("oracle: far-outlier mass fraction of nominal", far, 0.1),
    ];
    Ok(OracleSummary {
        checks,
        canonical_mass: m,
        alpha_sweep: sweep,
    })
}

fn solve_random_init(
    inst: &DiscreteInstance,
    r: &mut rng::Rng,
    opts: &SolverOptions,
) -> Result<oracle::TransportPlan, oracle::OracleError> {
    let init: Vec<Vec<f64>> = inst
        .conditions
        .iter()
        .map(|c| {
            (0..c.source_atoms.len() * c.target_atoms.len())
                .map(|_| r.random::<f64>())
                .collect()
        })
        .collect();
    oracle::solve_primal_from(inst, &init, opts)
}

/// `L(α = a; τ, φ, γ) = a · L(1; τ/a, φ/a, aγ)` for both trainer losses at
/// `points` random networks, batches and scales. Returns the worst relative
/// difference.
pub fn alpha_scaling_identity(points: usize, seed: u64) -> Result<f64, TrainError> {
    let mut r = rng::stream(seed, 401);
    let mut worst: f64 = 0.0;
    let kinds = [
        EntropyKind::Kl,
        EntropyKind::ChiSquared,
        EntropyKind::Softplus,
    ];
    for p in 0..points {
        let arch = ArchConfig::with_width(2 + p % 3);
        let (gen, pot) = nets::init_params(&arch, seed.wrapping_add(p as u64))?;
        let mut cfg = TrainConfig::paper_defaults(DataConfig::new(DatasetKind::Moons));
        cfg.arch = arch;
        cfg.tau = r.random_range(0.0005..2.0);
        cfg.psi1 = kinds[p % 3];
        cfg.psi2 = kinds[(p / 3) % 3];
        cfg.r1_gamma = if p % 2 == 0 {
            0.0
        } else {
            r.random_range(0.01..1.0)
        };
        let a: f64 = r.random_range(0.5..64.0);
        let n = 8;
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..n * arch.z_dim())
            .map(|_| r.random_range(-2.0..2.0))
            .collect();
        let batch = Batch {
            y: &y,
            v: &v,
            z: &z,
            u: &u,
        };

        let full = cfg.objective(a);
        let mut unit = cfg.objective(1.0);
        unit.tau = cfg.tau / a;
        unit.r1_gamma = cfg.r1_gamma * a;
        let pot_unit = pot.scaled(1.0 / a);

        let (lp_full, lt_full) = losses(&full, &gen, &pot, &batch)?;
        let (lp_unit, lt_unit) = losses(&unit, &gen, &pot_unit, &batch)?;
        worst = worst
            .max((lp_full - a * lp_unit).abs() / lp_full.abs().max(1.0))
            .max((lt_full - a * lt_unit).abs() / lt_full.abs().max(1.0));
    }
    Ok(worst)
}

fn losses(
    obj: &crate::trainer::Objective,
    gen: &GeneratorParams,
    pot: &PotentialParams,
    b: &Batch<'_>,
) -> Result<(f64, f64), TrainError> {
    let mut g = Graph::new();
    let pv = pot.bind(&mut g, true);
    let lp = obj.potential_loss(&mut g, gen, pot, &pv, b)?.loss;
    let mut h = Graph::new();
    let gv = gen.bind(&mut h, true);
    let lt = obj.generator_loss(&mut h, gen, &gv, pot, b)?;
    Ok((g.value(lp).item(), h.value(lt).item()))
}

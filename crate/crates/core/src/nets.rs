//! Generator `T_θ(y, v, z)` and potential `φ_ω(y, u)` networks.
//!
//! Parameters live in a flat, ordered list of named tensors. A network's
//! layout holds indices into that list, so the same forward code runs with
//! parameters bound either as trainable leaves or as frozen constants.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input lengths differ: {0}")]
    InputLength(String),
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint is for a {found} network, expected {expected}")]
    WrongNetwork { expected: String, found: String },
    #[error("architecture hash mismatch: checkpoint {found}, config {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("invalid architecture: {0}")]
    BadArch(&'static str),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Width of each scalar embedding; the fused width and `z_dim` are twice this.
    pub embed_dim: usize,
    pub gen_y_blocks: usize,
    pub gen_x_blocks: usize,
    pub pot_embed_blocks: usize,
    pub head_blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 128,
            gen_y_blocks: 2,
            gen_x_blocks: 3,
            pot_embed_blocks: 3,
            head_blocks: 2,
        }
    }
}

impl ArchConfig {
    pub fn with_width(embed_dim: usize) -> Self {
        ArchConfig {
            embed_dim,
            ..Self::default()
        }
    }

    pub fn z_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.embed_dim == 0 {
            return Err(NetError::BadArch("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("arch config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Embed {
    lift: Linear,
    blocks: Vec<(Linear, Linear)>,
}

/// Ordered parameter names and shapes, filled in while a layout is built.
#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.push(format!("{name}.weight"), vec![fan_in, fan_out]);
        let b = self.push(format!("{name}.bias"), vec![fan_out]);
        Linear { w, b }
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn blocks(&mut self, prefix: &str, count: usize, d: usize) -> Vec<(Linear, Linear)> {
        (0..count)
            .map(|i| {
                (
                    self.linear(&format!("{prefix}.block{i}.fc1"), d, d),
                    self.linear(&format!("{prefix}.block{i}.fc2"), d, d),
                )
            })
            .collect()
    }

    fn embed(&mut self, prefix: &str, blocks: usize, d: usize) -> Embed {
        Embed {
            lift: self.linear(&format!("{prefix}.lift"), 1, d),
            blocks: self.blocks(prefix, blocks, d),
        }
    }
}

fn linear(g: &mut Graph, p: &[Var], l: Linear, x: Var) -> Result<Var, AutodiffError> {
    let h = g.matmul(x, p[l.w])?;
    g.add_bias(h, p[l.b])
}

fn res_blocks(
    g: &mut Graph,
    p: &[Var],
    blocks: &[(Linear, Linear)],
    mut h: Var,
) -> Result<Var, AutodiffError> {
    for &(fc1, fc2) in blocks {
        let a = linear(g, p, fc1, h)?;
        let a = g.silu(a)?;
        let a = linear(g, p, fc2, a)?;
        h = g.add(h, a)?;
    }
    Ok(h)
}

fn embed(g: &mut Graph, p: &[Var], e: &Embed, x: Var) -> Result<Var, AutodiffError> {
    let h = linear(g, p, e.lift, x)?;
    res_blocks(g, p, &e.blocks, h)
}

/// Named parameter tensor, the checkpoint's unit of storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: String,
    pub arch: ArchConfig,
    pub arch_hash: String,
    pub params: Vec<NamedTensor>,
}

/// Fills weights with a normal of std `1/√fan_in` truncated at two standard
/// deviations; biases start at zero.
fn init_tensors(shapes: &[Vec<usize>], rng: &mut Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|shape| match shape.as_slice() {
            [fan_in, _] => {
                let std = 1.0 / (*fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let s: f64 = StandardNormal.sample(rng);
                        if s.abs() <= 2.0 {
                            break s * std;
                        }
                    })
                    .collect();
                Tensor::new(shape.clone(), data).expect("shape product")
            }
            _ => Tensor::zeros(shape),
        })
        .collect()
}

macro_rules! network {
    ($name:ident, $label:literal, $layout:ident) => {
        impl $name {
            pub fn arch(&self) -> &ArchConfig {
                &self.arch
            }

            pub fn names(&self) -> &[String] {
                &self.names
            }

            pub fn tensors(&self) -> &[Tensor] {
                &self.tensors
            }

            pub fn tensors_mut(&mut self) -> &mut [Tensor] {
                &mut self.tensors
            }

            pub fn parameter_count(&self) -> usize {
                self.tensors.iter().map(Tensor::len).sum()
            }

            /// Records the parameters on `g`, as leaves when `trainable`.
            pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
                self.tensors
                    .iter()
                    .map(|t| {
                        if trainable {
                            g.leaf(t.clone())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect()
            }

            /// Replaces every tensor; shapes must match the layout.
            pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), NetError> {
                if tensors.len() != self.tensors.len() {
                    return Err(NetError::ParamCount {
                        expected: self.tensors.len(),
                        got: tensors.len(),
                    });
                }
                for (i, t) in tensors.iter().enumerate() {
                    if t.shape() != self.tensors[i].shape() {
                        return Err(NetError::ParamShape {
                            name: self.names[i].clone(),
                            expected: self.tensors[i].shape().to_vec(),
                            got: t.shape().to_vec(),
                        });
                    }
                }
                self.tensors = tensors;
                Ok(())
            }

            pub fn to_checkpoint(&self) -> Checkpoint {
                Checkpoint {
                    network: $label.to_string(),
                    arch: self.arch,
                    arch_hash: self.arch.hash(),
                    params: self
                        .names
                        .iter()
                        .zip(&self.tensors)
                        .map(|(n, t)| NamedTensor {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        })
                        .collect(),
                }
            }

            /// Rebuilds the network, rejecting checkpoints whose stored hash
            /// disagrees with `expected` (or with their own arch when `None`).
            pub fn from_checkpoint(
                ck: &Checkpoint,
                expected: Option<&ArchConfig>,
            ) -> Result<Self, NetError> {
                if ck.network != $label {
                    return Err(NetError::WrongNetwork {
                        expected: $label.to_string(),
                        found: ck.network.clone(),
                    });
                }
                let want = expected.copied().unwrap_or(ck.arch);
                if ck.arch_hash != want.hash() {
                    return Err(NetError::ArchMismatch {
                        expected: want.hash(),
                        found: ck.arch_hash.clone(),
                    });
                }
                let mut net = Self::zeros(&want)?;
                if ck.params.len() != net.tensors.len() {
                    return Err(NetError::ParamCount {
                        expected: net.tensors.len(),
                        got: ck.params.len(),
                    });
                }
                let mut tensors = Vec::with_capacity(ck.params.len());
                for (i, p) in ck.params.iter().enumerate() {
                    if p.name != net.names[i] {
                        return Err(NetError::ParamShape {
                            name: p.name.clone(),
                            expected: net.tensors[i].shape().to_vec(),
                            got: p.shape.clone(),
                        });
                    }
                    tensors.push(Tensor::new(p.shape.clone(), p.data.clone())?);
                }
                net.set_tensors(tensors)?;
                Ok(net)
            }

            pub fn to_json(&self) -> Result<String, NetError> {
                Ok(serde_json::to_string(&self.to_checkpoint())?)
            }

            pub fn from_json(s: &str, expected: Option<&ArchConfig>) -> Result<Self, NetError> {
                let ck: Checkpoint = serde_json::from_str(s)?;
                Self::from_checkpoint(&ck, expected)
            }

            fn zeros(arch: &ArchConfig) -> Result<Self, NetError> {
                arch.validate()?;
                let mut b = Builder::default();
                let layout = $layout::build(&mut b, arch);
                let tensors = b.shapes.iter().map(|s| Tensor::zeros(s)).collect();
                Ok($name {
                    arch: *arch,
                    layout,
                    names: b.names,
                    tensors,
                })
            }

            /// Deterministic initialization from `(seed, stream)`.
            pub fn init_with(arch: &ArchConfig, rng: &mut Rng) -> Result<Self, NetError> {
                let mut net = Self::zeros(arch)?;
                let shapes: Vec<Vec<usize>> =
                    net.tensors.iter().map(|t| t.shape().to_vec()).collect();
                net.tensors = init_tensors(&shapes, rng);
                Ok(net)
            }
        }
    };
}

#[derive(Debug, Clone)]
struct GeneratorLayout {
    y: Embed,
    x: Embed,
    head: Vec<(Linear, Linear)>,
    out: Linear,
}

impl GeneratorLayout {
    fn build(b: &mut Builder, a: &ArchConfig) -> Self {
        let d = a.embed_dim;
        GeneratorLayout {
            y: b.embed("y_embed", a.gen_y_blocks, d),
            x: b.embed("x_embed", a.gen_x_blocks, d),
            head: b.blocks("head", a.head_blocks, 2 * d),
            out: b.linear("out", 2 * d, 1),
        }
    }
}

#[derive(Debug, Clone)]
struct PotentialLayout {
    y: Embed,
    x: Embed,
    head: Vec<(Linear, Linear)>,
    out: Linear,
}

impl PotentialLayout {
    fn build(b: &mut Builder, a: &ArchConfig) -> Self {
        let d = a.embed_dim;
        PotentialLayout {
            y: b.embed("y_embed", a.pot_embed_blocks, d),
            x: b.embed("x_embed", a.pot_embed_blocks, d),
            head: b.blocks("head", a.head_blocks, 2 * d),
            out: b.linear("out", 2 * d, 1),
        }
    }
}

/// `T_θ(y, v, z)`: embeds y and v, concatenates, adds z, then a residual head.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    arch: ArchConfig,
    layout: GeneratorLayout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

network!(GeneratorParams, "generator", GeneratorLayout);

/// `φ_ω(y, u)`: identical embeddings for y and u, concatenated, residual head.
#[derive(Debug, Clone)]
pub struct PotentialParams {
    arch: ArchConfig,
    layout: PotentialLayout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

network!(PotentialParams, "potential", PotentialLayout);

impl GeneratorParams {
    /// Forward pass on columns `y, v: [n, 1]` and `z: [n, z_dim]`; returns `[n, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        y: Var,
        v: Var,
        z: Var,
    ) -> Result<Var, AutodiffError> {
        let l = &self.layout;
        let hy = embed(g, params, &l.y, y)?;
        let hx = embed(g, params, &l.x, v)?;
        let h = g.concat(hy, hx)?;
        let h = g.add(h, z)?;
        let h = res_blocks(g, params, &l.head, h)?;
        linear(g, params, l.out, h)
    }

    /// Evaluates `T_θ` without recording gradients, in chunks.
    pub fn apply(&self, y: &[f64], v: &[f64], z: &[f64]) -> Result<Vec<f64>, NetError> {
        let k = self.arch.z_dim();
        if y.len() != v.len() || z.len() != y.len() * k {
            return Err(NetError::InputLength(format!(
                "y={}, v={}, z={} (z_dim {k})",
                y.len(),
                v.len(),
                z.len()
            )));
        }
        let mut out = Vec::with_capacity(y.len());
        for start in (0..y.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(y.len());
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let yv = g.constant(Tensor::column(y[start..end].to_vec()));
            let vv = g.constant(Tensor::column(v[start..end].to_vec()));
            let zv = g.constant(Tensor::matrix(
                end - start,
                k,
                z[start * k..end * k].to_vec(),
            )?);
            let t = self.forward(&mut g, &p, yv, vv, zv)?;
            out.extend_from_slice(g.value(t).data());
        }
        Ok(out)
    }

    /// The triangular map `(y, v, z) ↦ (y, T_θ(y, v, z))`; the condition is
    /// passed through untouched.
    pub fn transport(
        &self,
        y: &[f64],
        v: &[f64],
        z: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let u = self.apply(y, v, z)?;
        Ok((y.to_vec(), u))
    }

    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NetError> {
        Self::init_with(arch, &mut rng::stream(seed, streams::INIT_GENERATOR))
    }
}

impl PotentialParams {
    /// Forward pass on columns `y, u: [n, 1]`; returns `[n, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        y: Var,
        u: Var,
    ) -> Result<Var, AutodiffError> {
        let l = &self.layout;
        let hy = embed(g, params, &l.y, y)?;
        let hx = embed(g, params, &l.x, u)?;
        let h = g.concat(hy, hx)?;
        let h = res_blocks(g, params, &l.head, h)?;
        linear(g, params, l.out, h)
    }

    pub fn apply(&self, y: &[f64], u: &[f64]) -> Result<Vec<f64>, NetError> {
        if y.len() != u.len() {
            return Err(NetError::InputLength(format!(
                "y={}, u={}",
                y.len(),
                u.len()
            )));
        }
        let mut out = Vec::with_capacity(y.len());
        for start in (0..y.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(y.len());
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let yv = g.constant(Tensor::column(y[start..end].to_vec()));
            let uv = g.constant(Tensor::column(u[start..end].to_vec()));
            let f = self.forward(&mut g, &p, yv, uv)?;
            out.extend_from_slice(g.value(f).data());
        }
        Ok(out)
    }

    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NetError> {
        Self::init_with(arch, &mut rng::stream(seed, streams::INIT_POTENTIAL))
    }

    /// The same network computing `s · φ(y, u)`: the output layer is rescaled.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        let l = self.layout.out;
        for idx in [l.w, l.b] {
            out.tensors[idx] = out.tensors[idx].map(|x| x * s);
        }
        out
    }
}

const CHUNK: usize = 1024;

/// Both networks from one seed, on separate streams.
pub fn init_params(
    arch: &ArchConfig,
    seed: u64,
) -> Result<(GeneratorParams, PotentialParams), NetError> {
    Ok((
        GeneratorParams::init(arch, seed)?,
        PotentialParams::init(arch, seed)?,
    ))
}

/// Standard normal auxiliary noise for `n` samples.
pub fn sample_z(arch: &ArchConfig, n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n * arch.z_dim())
        .map(|_| StandardNormal.sample(rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn tiny() -> ArchConfig {
        ArchConfig::with_width(2)
    }

    fn linear_count(a: usize, b: usize) -> usize {
        a * b + b
    }

    #[test]
    fn parameter_counts_match_formula() {
        let a = ArchConfig::default();
        let d = a.embed_dim;
        let block = 2 * linear_count(d, d);
        let head = 2 * 2 * linear_count(2 * d, 2 * d);
        let (g, p) = init_params(&a, 0).unwrap();
        assert_eq!(
            g.parameter_count(),
            2 * linear_count(1, d) + 5 * block + head + linear_count(2 * d, 1)
        );
        assert_eq!(
            p.parameter_count(),
            2 * linear_count(1, d) + 6 * block + head + linear_count(2 * d, 1)
        );
        assert_eq!(g.parameter_count(), 429_057);
        assert_eq!(p.parameter_count(), 462_081);
    }

    #[test]
    fn shapes_and_determinism() {
        let a = tiny();
        let (g, p) = init_params(&a, 1).unwrap();
        let mut rng = rng::stream(0, 50);
        let z = sample_z(&a, 3, &mut rng);
        let y = [0.1, -0.4, 1.3];
        let v = [0.5, 0.0, -2.0];
        let u1 = g.apply(&y, &v, &z).unwrap();
        let u2 = g.apply(&y, &v, &z).unwrap();
        assert_eq!(u1.len(), 3);
        assert_eq!(u1, u2);
        let z2 = sample_z(&a, 3, &mut rng);
        assert_ne!(u1, g.apply(&y, &v, &z2).unwrap());
        let f = p.apply(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.iter().all(|x| x.is_finite()));
        assert!(g.apply(&y, &v[..2], &z).is_err());
    }

    #[test]
    fn triangular_map_keeps_condition() {
        let a = tiny();
        let g = GeneratorParams::init(&a, 4).unwrap();
        let y = vec![0.25, -3.5, 7.0];
        let z = sample_z(&a, 3, &mut rng::stream(0, 51));
        let (yo, _) = g.transport(&y, &[0.0, 1.0, 2.0], &z).unwrap();
        assert_eq!(yo, y);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ArchConfig::with_width(16);
        let (g1, _) = init_params(&a, 7).unwrap();
        let (g2, _) = init_params(&a, 7).unwrap();
        let (g3, _) = init_params(&a, 8).unwrap();
        assert_eq!(g1.tensors(), g2.tensors());
        assert_ne!(g1.tensors(), g3.tensors());
        for t in g1.tensors() {
            if let [fan_in, _] = t.shape() {
                let scale = 1.0 / (*fan_in as f64).sqrt();
                assert!(t.max_abs() < 3.0 * scale);
            }
        }
    }

    #[test]
    fn potential_input_gradient_is_finite() {
        let a = tiny();
        let p = PotentialParams::init(&a, 3).unwrap();
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let y = g.constant(Tensor::column(vec![0.2, -1.0]));
        let u = g.leaf(Tensor::column(vec![0.7, 0.3]));
        let f = p.forward(&mut g, &w, y, u).unwrap();
        let s = g.sum(f).unwrap();
        let du = g.backward(s).unwrap().tensor(&g, u);
        assert!(du.all_finite());
        assert!(du.max_abs() > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = tiny();
        let (g, p) = init_params(&a, 9).unwrap();
        let gj = g.to_json().unwrap();
        let back = GeneratorParams::from_json(&gj, Some(&a)).unwrap();
        assert_eq!(back.tensors(), g.tensors());
        let other = ArchConfig::with_width(3);
        assert!(matches!(
            GeneratorParams::from_json(&gj, Some(&other)),
            Err(NetError::ArchMismatch { .. })
        ));
        assert!(matches!(
            PotentialParams::from_json(&gj, None),
            Err(NetError::WrongNetwork { .. })
        ));
        let pj = p.to_json().unwrap();
        assert_eq!(
            PotentialParams::from_json(&pj, None).unwrap().tensors(),
            p.tensors()
        );
    }

    #[test]
    fn scaled_potential() {
        let p = PotentialParams::init(&tiny(), 2).unwrap();
        let y = [0.3, -0.2];
        let u = [1.0, 0.5];
        let f = p.apply(&y, &u).unwrap();
        let h = p.scaled(0.25).apply(&y, &u).unwrap();
        for i in 0..2 {
            assert!((h[i] - 0.25 * f[i]).abs() < 1e-14);
        }
    }

    /// Gradient check on every parameter of a network, one tensor at a time.
    fn check_network(
        params: &[Tensor],
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..params.len() {
            let err = grad_check(
                |g, x| {
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                        .collect();
                    f(g, &vars)
                },
                &params[k],
                1e-4,
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn networks_pass_gradient_check() {
        let a = tiny();
        let (gen, pot) = init_params(&a, 5).unwrap();
        let z = sample_z(&a, 3, &mut rng::stream(5, 52));
        let err = check_network(gen.tensors(), |g, w| {
            let y = g.constant(Tensor::column(vec![0.3, -0.6, 1.1]));
            let v = g.constant(Tensor::column(vec![-1.0, 0.2, 0.9]));
            let zv = g.constant(Tensor::matrix(3, a.z_dim(), z.clone())?);
            let t = gen.forward(g, w, y, v, zv)?;
            let sq = g.square(t)?;
            g.mean(sq)
        });
        assert!(err < 1e-4, "generator {err}");
        let err = check_network(pot.tensors(), |g, w| {
            let y = g.constant(Tensor::column(vec![0.3, -0.6, 1.1]));
            let u = g.constant(Tensor::column(vec![-1.0, 0.2, 0.9]));
            let f = pot.forward(g, w, y, u)?;
            g.mean(f)
        });
        assert!(err < 1e-4, "potential {err}");
    }
}

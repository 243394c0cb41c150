//! Exact empirical Wasserstein-2 distances, binned conditional W2, outlier
//! robust evaluation and KDE grids.

use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("exact W2 needs equal sizes ({0} vs {1}); subsample the larger set first")]
    UnequalSizes(usize, usize),
    #[error("empirical distribution must be nonempty")]
    Empty,
    #[error("non-finite coordinate at row {0}")]
    NonFinite(usize),
    #[error("need at least {needed} points, have {have}")]
    Insufficient { needed: usize, have: usize },
    #[error("invalid argument: {0}")]
    Invalid(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Equally weighted `(y, x)` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    points: Vec<[f64; 2]>,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, MetricError> {
        if points.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(MetricError::NonFinite(i));
        }
        Ok(EmpiricalDistribution { points })
    }

    pub fn from_columns(y: &[f64], x: &[f64]) -> Result<Self, MetricError> {
        if y.len() != x.len() {
            return Err(MetricError::Invalid("column lengths differ"));
        }
        Self::new(y.iter().zip(x).map(|(&a, &b)| [a, b]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `n` distinct points chosen uniformly; the whole set when `n == len`.
    pub fn subsample(&self, n: usize, rng: &mut rng::Rng) -> Result<Self, MetricError> {
        if n > self.len() {
            return Err(MetricError::Insufficient {
                needed: n,
                have: self.len(),
            });
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut idx = sample(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        Self::new(idx.into_iter().map(|i| self.points[i]).collect())
    }
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    d0 * d0 + d1 * d1
}

/// Optimal assignment for an `n × n` cost given by `cost(i, j)`.
///
/// Shortest augmenting paths with potentials (the Hungarian method in its
/// O(n³) form). Returns `assignment[i] = j` and the total cost.
pub fn solve_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based internally; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost(i, assignment[i])).sum();
    (assignment, total)
}

/// `√(min_σ (1/n) Σ ‖a_i − b_σ(i)‖²)` by exact assignment.
pub fn w2_exact(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::UnequalSizes(a.len(), b.len()));
    }
    let (pa, pb) = (a.points(), b.points());
    let (_, total) = solve_assignment(pa.len(), |i, j| sq_dist(&pa[i], &pb[j]));
    Ok((total / pa.len() as f64).max(0.0).sqrt())
}

/// Exact 1-d W2 between two equally weighted samples of any sizes, by merging
/// the breakpoints of the two quantile functions.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < sa.len() && j < sb.len() {
        let ea = (i + 1) as f64 / na;
        let eb = (j + 1) as f64 / nb;
        let next = ea.min(eb);
        let d = sa[i] - sb[j];
        total += (next - prev) * d * d;
        prev = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalW2 {
    pub value: f64,
    /// Per-bin W2 on the data coordinate; `None` where `a` had no points.
    pub per_bin: Vec<Option<f64>>,
    pub bin_edges: Vec<f64>,
    pub skipped_bins: usize,
}

/// Conditional W2 with y discretized into quantile bins of `b`'s y-marginal.
pub fn w2_conditional_binned(
    a: &EmpiricalDistribution,
    b: &EmpiricalDistribution,
    bins: usize,
) -> Result<ConditionalW2, MetricError> {
    if bins == 0 {
        return Err(MetricError::Invalid("bins must be positive"));
    }
    let mut ys: Vec<f64> = b.points().iter().map(|p| p[0]).collect();
    ys.sort_by(f64::total_cmp);
    let n = ys.len();
    // Interior edges at the k/bins quantiles of b's conditions.
    let edges: Vec<f64> = (1..bins).map(|k| ys[(k * n / bins).min(n - 1)]).collect();
    let bin_of = |y: f64| edges.partition_point(|&e| e <= y);
    let mut xa = vec![Vec::new(); bins];
    let mut xb = vec![Vec::new(); bins];
    for p in a.points() {
        xa[bin_of(p[0])].push(p[1]);
    }
    for p in b.points() {
        xb[bin_of(p[0])].push(p[1]);
    }
    let mut per_bin = Vec::with_capacity(bins);
    let mut acc = 0.0;
    let mut mass = 0.0;
    let mut skipped = 0;
    for k in 0..bins {
        if xb[k].is_empty() {
            per_bin.push(None);
            continue;
        }
        if xa[k].is_empty() {
            log::warn!("conditional W2: bin {k} has no generated points; skipped");
            skipped += 1;
            per_bin.push(None);
            continue;
        }
        let w = w2_1d(&xa[k], &xb[k])?;
        let m = xb[k].len() as f64 / n as f64;
        acc += m * w * w;
        mass += m;
        per_bin.push(Some(w));
    }
    if mass == 0.0 {
        return Err(MetricError::Empty);
    }
    Ok(ConditionalW2 {
        value: (acc / mass).sqrt(),
        per_bin,
        bin_edges: edges,
        skipped_bins: skipped,
    })
}

/// Mean exact W2 over `repeats` paired subsamples of size `n_sub`.
pub fn robust_w2(
    generated: &EmpiricalDistribution,
    clean_reference: &EmpiricalDistribution,
    n_sub: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if repeats == 0 || n_sub == 0 {
        return Err(MetricError::Invalid("n_sub and repeats must be positive"));
    }
    let have = generated.len().min(clean_reference.len());
    if have < n_sub {
        return Err(MetricError::Insufficient {
            needed: n_sub,
            have,
        });
    }
    let mut rng = rng::stream(seed, streams::METRIC);
    let mut total = 0.0;
    for _ in 0..repeats {
        let g = generated.subsample(n_sub, &mut rng)?;
        let r = clean_reference.subsample(n_sub, &mut rng)?;
        total += w2_exact(&g, &r)?;
    }
    Ok(total / repeats as f64)
}

/// Scott's rule bandwidth `n^(-1/6) σ` per axis.
pub fn scott_bandwidth(samples: &EmpiricalDistribution) -> [f64; 2] {
    let n = samples.len() as f64;
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        let m = samples.points().iter().map(|p| p[c]).sum::<f64>() / n;
        let var = samples
            .points()
            .iter()
            .map(|p| (p[c] - m).powi(2))
            .sum::<f64>()
            / n;
        *o = n.powf(-1.0 / 6.0) * var.sqrt();
    }
    out
}

/// Axis-aligned region `[x0, x1] × [y0, y1]` in plot coordinates, where the
/// horizontal axis is the condition `y` and the vertical one the data `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

/// Gaussian KDE sampled at cell centers of a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub extent: Extent,
    pub nx: usize,
    pub ny: usize,
    pub bandwidth: [f64; 2],
    /// Row-major, `ny` rows of `nx` values; row 0 is the bottom edge.
    pub density: Vec<f64>,
}

impl KdeGrid {
    pub fn cell_area(&self) -> f64 {
        (self.extent.x1 - self.extent.x0) / self.nx as f64 * (self.extent.y1 - self.extent.y0)
            / self.ny as f64
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let e = &self.extent;
        [
            e.x0 + (ix as f64 + 0.5) * (e.x1 - e.x0) / self.nx as f64,
            e.y0 + (iy as f64 + 0.5) * (e.y1 - e.y0) / self.ny as f64,
        ]
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.density[iy * self.nx + ix]
    }

    pub fn max(&self) -> f64 {
        self.density.iter().cloned().fold(0.0, f64::max)
    }

    /// Grid as a CSV matrix, one line per row starting at the bottom.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), MetricError> {
        for row in self.density.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn kde_grid(
    samples: &EmpiricalDistribution,
    extent: Extent,
    resolution: (usize, usize),
    bandwidth: Option<[f64; 2]>,
) -> Result<KdeGrid, MetricError> {
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(MetricError::Invalid(
            "resolution must be at least 2 per axis",
        ));
    }
    if !(extent.x1 > extent.x0 && extent.y1 > extent.y0) {
        return Err(MetricError::Invalid("empty extent"));
    }
    let h = bandwidth.unwrap_or_else(|| scott_bandwidth(samples));
    if !(h[0] > 0.0 && h[1] > 0.0) {
        return Err(MetricError::Invalid("bandwidth must be positive"));
    }
    let mut grid = KdeGrid {
        extent,
        nx,
        ny,
        bandwidth: h,
        density: vec![0.0; nx * ny],
    };
    let norm = 1.0 / (2.0 * std::f64::consts::PI * h[0] * h[1] * samples.len() as f64);
    let gx: Vec<f64> = (0..nx).map(|i| grid.center(i, 0)[0]).collect();
    let gy: Vec<f64> = (0..ny).map(|j| grid.center(0, j)[1]).collect();
    let mut kx = vec![0.0; nx];
    let mut ky = vec![0.0; ny];
    for p in samples.points() {
        for (k, &c) in kx.iter_mut().zip(&gx) {
            let t = (c - p[0]) / h[0];
            *k = (-0.5 * t * t).exp();
        }
        for (k, &c) in ky.iter_mut().zip(&gy) {
            let t = (c - p[1]) / h[1];
            *k = (-0.5 * t * t).exp();
        }
        for (j, &wy) in ky.iter().enumerate() {
            if wy < 1e-300 {
                continue;
            }
            let row = &mut grid.density[j * nx..(j + 1) * nx];
            for (d, &wx) in row.iter_mut().zip(&kx) {
                *d += wy * wx;
            }
        }
    }
    grid.density.iter_mut().for_each(|d| *d *= norm);
    Ok(grid)
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_potential: f64,
    pub loss_generator: f64,
    pub r1: f64,
    pub alpha: f64,
    /// Selection W2 on the test split, only at evaluation epochs.
    pub test_w2: Option<f64>,
}

/// W2 of generated samples against the contaminated and the clean test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub contaminated_w2: f64,
    pub clean_w2: f64,
    pub n_sub: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Joint W2 in standardized units.
    pub joint_w2: f64,
    /// Joint W2 in the raw data frame.
    pub joint_w2_raw: f64,
    pub conditional_w2: f64,
    pub conditional_bins: usize,
    pub per_bin_w2: Vec<Option<f64>>,
    pub n_generated: usize,
    pub n_reference: usize,
    /// Human-readable description of how the numbers were computed.
    pub protocol: String,
    pub robust: Option<RobustReport>,
    pub fingerprint: String,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    /// Set when training diverged; the report then scores the best checkpoint
    /// selected before the divergence.
    #[serde(default)]
    pub diverged: Option<String>,
    /// Wall-clock seconds of training, accumulated across resumes, plus the
    /// final evaluation.
    #[serde(default)]
    pub wall_seconds: Option<f64>,
    #[serde(default)]
    pub loss_history: Vec<LossRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(pts: &[[f64; 2]]) -> EmpiricalDistribution {
        EmpiricalDistribution::new(pts.to_vec()).unwrap()
    }

    fn brute_force(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        fn rec(a: &[[f64; 2]], b: &[[f64; 2]], used: &mut Vec<bool>, i: usize) -> f64 {
            if i == a.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(sq_dist(&a[i], &b[j]) + rec(a, b, used, i + 1));
                    used[j] = false;
                }
            }
            best
        }
        (rec(a, b, &mut vec![false; b.len()], 0) / a.len() as f64).sqrt()
    }

    #[test]
    fn w2_spot_values() {
        let a = dist(&[[0.0, 0.0]]);
        let b = dist(&[[3.0, 4.0]]);
        assert_eq!(w2_exact(&a, &b).unwrap(), 5.0);
        let c = dist(&[[0.1, 0.2], [1.0, -1.0], [3.0, 0.5]]);
        assert_eq!(w2_exact(&c, &c).unwrap(), 0.0);
        assert!(matches!(
            w2_exact(&a, &c),
            Err(MetricError::UnequalSizes(1, 3))
        ));
    }

    #[test]
    fn w2_matches_permutations_on_three_points() {
        let mut rng = rng::stream(1, 200);
        for _ in 0..50 {
            let pts = |rng: &mut rng::Rng| -> Vec<[f64; 2]> {
                (0..3)
                    .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
                    .collect()
            };
            let a = pts(&mut rng);
            let b = pts(&mut rng);
            let w = w2_exact(&dist(&a), &dist(&b)).unwrap();
            assert!((w - brute_force(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_w2() {
        assert_eq!(w2_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((w2_1d(&[0.0, 1.0], &[2.0, 3.0]).unwrap() - 2.0).abs() < 1e-15);
        // Unequal sizes: {0} against {−1, 1} costs 1.
        assert!((w2_1d(&[0.0], &[-1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        // {0, 1} vs {0, 0, 3}: quantile pieces [0,1/3]:0, [1/3,1/2]:0,
        // [1/2,2/3]:1, [2/3,1]:(1-3)² → 1/6 + 4/3 = 1.5.
        assert!((w2_1d(&[0.0, 1.0], &[0.0, 0.0, 3.0]).unwrap() - 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn conditional_w2_translation() {
        let b: Vec<[f64; 2]> = (0..400)
            .map(|i| [i as f64 / 400.0, (i as f64 * 0.37).sin()])
            .collect();
        let a: Vec<[f64; 2]> = b.iter().map(|p| [p[0], p[1] + 0.3]).collect();
        let cw = w2_conditional_binned(&dist(&a), &dist(&b), 20).unwrap();
        assert!((cw.value - 0.3).abs() < 1e-12);
        let same = w2_conditional_binned(&dist(&b), &dist(&b), 20).unwrap();
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn conditional_w2_two_bins_by_hand() {
        // b: bin 0 holds y ∈ {0, 1} with x {0, 2}; bin 1 holds y ∈ {2, 3}
        // with x {0, 0}. The edge is b's median y = 2.
        let b = dist(&[[0.0, 0.0], [1.0, 2.0], [2.0, 0.0], [3.0, 0.0]]);
        // a: bin 0 x {1}, bin 1 x {1, 3}.
        let a = dist(&[[0.5, 1.0], [2.5, 1.0], [2.5, 3.0]]);
        // bin 0: {1} vs {0, 2} → 1. bin 1: sorted pairing (1,0),(3,0) → 5.
        let cw = w2_conditional_binned(&a, &b, 2).unwrap();
        assert_eq!(cw.bin_edges, vec![2.0]);
        assert!((cw.per_bin[0].unwrap() - 1.0).abs() < 1e-15);
        assert!((cw.per_bin[1].unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!((cw.value - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_generated_bin_is_skipped() {
        let b = dist(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let a = dist(&[[2.5, 1.0]]);
        let cw = w2_conditional_binned(&a, &b, 2).unwrap();
        assert_eq!(cw.skipped_bins, 1);
        assert!((cw.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn robust_w2_behaviour() {
        let mut rng = rng::stream(3, 201);
        let clean: Vec<[f64; 2]> = (0..200).map(|_| [rng.random(), rng.random()]).collect();
        let c = dist(&clean);
        assert_eq!(robust_w2(&c, &c, 200, 1, 0).unwrap(), 0.0);
        let mut dirty = clean.clone();
        dirty[0] = [40.0, 40.0];
        dirty[1] = [-40.0, 30.0];
        let with = robust_w2(&dist(&dirty), &c, 200, 1, 0).unwrap();
        assert!(with > 0.0);
        let r1 = robust_w2(&dist(&dirty), &c, 50, 5, 9).unwrap();
        let r2 = robust_w2(&dist(&dirty), &c, 50, 5, 9).unwrap();
        assert_eq!(r1, r2);
        assert!(robust_w2(&c, &c, 201, 1, 0).is_err());
    }

    #[test]
    fn kde_basics() {
        let one = dist(&[[0.0, 0.0]]);
        let e = Extent {
            x0: -3.0,
            x1: 3.0,
            y0: -3.0,
            y1: 3.0,
        };
        let g = kde_grid(&one, e, (61, 61), Some([0.3, 0.3])).unwrap();
        let (imax, _) =
            g.density.iter().enumerate().fold(
                (0, 0.0),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        assert_eq!((imax % 61, imax / 61), (30, 30));
        let mass: f64 = g.density.iter().sum::<f64>() * g.cell_area();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!(kde_grid(&one, e, (1, 5), None).is_err());
        assert!(kde_grid(&one, e, (5, 5), Some([0.0, 1.0])).is_err());
    }

    #[test]
    fn kde_of_normal_sample_is_near_gaussian() {
        use statrs::distribution::{ContinuousCDF, Normal};
        // Stratified normal quantiles rather than random draws: a random
        // 1000-point sample carries pointwise noise of about 7% of the peak.
        let q: Vec<f64> = (0..32)
            .map(|i| Normal::standard().inverse_cdf((i as f64 + 0.5) / 32.0))
            .collect();
        let pts: Vec<[f64; 2]> = q
            .iter()
            .flat_map(|&a| q.iter().map(move |&b| [a, b]))
            .collect();
        let s = dist(&pts);
        let e = Extent {
            x0: -4.0,
            x1: 4.0,
            y0: -4.0,
            y1: 4.0,
        };
        let g = kde_grid(&s, e, (41, 41), None).unwrap();
        // Smoothing a unit normal with the kernel widens each axis' variance.
        let h = g.bandwidth;
        let (vx, vy) = (1.0 + h[0] * h[0], 1.0 + h[1] * h[1]);
        let mut worst: f64 = 0.0;
        let mut argmax = (0, 0);
        let mut best = 0.0;
        for iy in 0..41 {
            for ix in 0..41 {
                let [cx, cy] = g.center(ix, iy);
                let analytic = (-(cx * cx) / (2.0 * vx) - (cy * cy) / (2.0 * vy)).exp()
                    / (2.0 * std::f64::consts::PI * (vx * vy).sqrt());
                worst = worst.max((g.at(ix, iy) - analytic).abs());
                if g.at(ix, iy) > best {
                    best = g.at(ix, iy);
                    argmax = (ix, iy);
                }
            }
        }
        assert!(worst < 0.05 * g.max(), "{worst} vs peak {}", g.max());
        assert!(argmax.0.abs_diff(20) <= 2 && argmax.1.abs_diff(20) <= 2);
    }

    fn arb_points(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(a, b)| [a, b]), n)
    }

    proptest! {
        #[test]
        fn w2_is_a_metric_on_samples(
            (a, b, c) in (1usize..12).prop_flat_map(|n| (arb_points(n), arb_points(n), arb_points(n)))
        ) {
            let (a, b, c) = (dist(&a), dist(&b), dist(&c));
            prop_assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
            let ab = w2_exact(&a, &b).unwrap();
            let ba = w2_exact(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let bc = w2_exact(&b, &c).unwrap();
            let ac = w2_exact(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn w2_equals_brute_force(
            (a, b) in (1usize..=7).prop_flat_map(|n| (arb_points(n), arb_points(n)))
        ) {
            let w = w2_exact(&dist(&a), &dist(&b)).unwrap();
            prop_assert!((w - brute_force(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn one_d_w2_matches_assignment(
            (a, b) in (1usize..8).prop_flat_map(|n| (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(-3.0f64..3.0, n),
            ))
        ) {
            let pa: Vec<[f64; 2]> = a.iter().map(|&x| [0.0, x]).collect();
            let pb: Vec<[f64; 2]> = b.iter().map(|&x| [0.0, x]).collect();
            let exact = w2_exact(&dist(&pa), &dist(&pb)).unwrap();
            prop_assert!((w2_1d(&a, &b).unwrap() - exact).abs() < 1e-9);
        }
    }
}

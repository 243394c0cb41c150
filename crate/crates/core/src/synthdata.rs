//! Synthetic 2D conditional datasets, the product source and outlier injection.
//!
//! A joint sample `(y, x)` uses its first coordinate as the condition and the
//! second as the data variable.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset kind {0:?} (expected moons, circles, swissroll or checkerboard)")]
    UnknownKind(String),
    #[error("sample count must be positive")]
    EmptyRequest,
    #[error("invalid outlier spec: {0}")]
    BadOutlierSpec(String),
    #[error("column lengths differ: y={y}, x={x}, flags={flags}")]
    Ragged { y: usize, x: usize, flags: usize },
    #[error("cannot fit standardization: {0}")]
    Degenerate(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Circles,
    Swissroll,
    Checkerboard,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Moons,
        DatasetKind::Circles,
        DatasetKind::Swissroll,
        DatasetKind::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Circles => "circles",
            DatasetKind::Swissroll => "swissroll",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }

    /// Default Gaussian noise level. The checkerboard is noise-free.
    pub fn default_noise(self) -> f64 {
        match self {
            DatasetKind::Checkerboard => 0.0,
            _ => 0.05,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

/// Aligned `(y, x)` pairs with outlier flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub kind: DatasetKind,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub is_outlier: Vec<bool>,
}

impl PairBatch {
    pub fn new(
        kind: DatasetKind,
        y: Vec<f64>,
        x: Vec<f64>,
        is_outlier: Vec<bool>,
    ) -> Result<Self, DataError> {
        if y.len() != x.len() || y.len() != is_outlier.len() {
            return Err(DataError::Ragged {
                y: y.len(),
                x: x.len(),
                flags: is_outlier.len(),
            });
        }
        Ok(PairBatch {
            kind,
            y,
            x,
            is_outlier,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn outlier_count(&self) -> usize {
        self.is_outlier.iter().filter(|&&o| o).count()
    }

    /// Rows whose flag is unset.
    pub fn inliers(&self) -> PairBatch {
        self.filter(|o| !o)
    }

    fn filter(&self, keep: impl Fn(bool) -> bool) -> PairBatch {
        let mut out = PairBatch {
            kind: self.kind,
            y: Vec::new(),
            x: Vec::new(),
            is_outlier: Vec::new(),
        };
        for i in 0..self.len() {
            if keep(self.is_outlier[i]) {
                out.y.push(self.y[i]);
                out.x.push(self.x[i]);
                out.is_outlier.push(self.is_outlier[i]);
            }
        }
        out
    }

    /// Points as `[y, x]` rows.
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.y.iter().zip(&self.x).map(|(&y, &x)| [y, x]).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["y", "x", "is_outlier"])?;
        for i in 0..self.len() {
            wr.serialize((self.y[i], self.x[i], u8::from(self.is_outlier[i])))?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(kind: DatasetKind, r: R) -> Result<Self, DataError> {
        #[derive(Deserialize)]
        struct Row {
            y: f64,
            x: f64,
            is_outlier: u8,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut batch = PairBatch {
            kind,
            y: Vec::new(),
            x: Vec::new(),
            is_outlier: Vec::new(),
        };
        for row in rd.deserialize() {
            let row: Row = row?;
            batch.y.push(row.y);
            batch.x.push(row.x);
            batch.is_outlier.push(row.is_outlier != 0);
        }
        Ok(batch)
    }
}

/// Joint samples from one of the four target distributions.
pub fn sample_target(
    kind: DatasetKind,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<PairBatch, DataError> {
    sample_target_with(kind, n, noise, &mut rng::stream(seed, streams::DATA_TRAIN))
}

pub fn sample_target_with(
    kind: DatasetKind,
    n: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<PairBatch, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    match kind {
        DatasetKind::Moons => {
            let outer = n / 2;
            for i in 0..n {
                let t = rng.random::<f64>() * PI;
                pts.push(if i < outer {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                });
            }
        }
        DatasetKind::Circles => {
            let outer = n / 2;
            for i in 0..n {
                let t = rng.random::<f64>() * 2.0 * PI;
                let r = if i < outer { 1.0 } else { 0.5 };
                pts.push([r * t.cos(), r * t.sin()]);
            }
        }
        DatasetKind::Swissroll => {
            for _ in 0..n {
                let t = 1.5 * PI + rng.random::<f64>() * 3.0 * PI;
                pts.push([t * t.cos() / 10.0, t * t.sin() / 10.0]);
            }
        }
        DatasetKind::Checkerboard => {
            for _ in 0..n {
                let cell = rng.random_range(0..8usize);
                let i = cell / 2;
                let j = 2 * (cell % 2) + i % 2;
                let a = -4.0 + 2.0 * i as f64 + 2.0 * rng.random::<f64>();
                let b = -4.0 + 2.0 * j as f64 + 2.0 * rng.random::<f64>();
                pts.push([a, b]);
            }
        }
    }
    if noise > 0.0 {
        for p in &mut pts {
            let e0: f64 = StandardNormal.sample(rng);
            let e1: f64 = StandardNormal.sample(rng);
            p[0] += noise * e0;
            p[1] += noise * e1;
        }
    }
    pts.shuffle(rng);
    Ok(PairBatch {
        kind,
        y: pts.iter().map(|p| p[0]).collect(),
        x: pts.iter().map(|p| p[1]).collect(),
        is_outlier: vec![false; n],
    })
}

/// Source pairs `(y_j, v_j)` with the given conditions and `v_j ~ N(0, 1)`.
pub fn make_source(kind: DatasetKind, target_y: &[f64], rng: &mut Rng) -> PairBatch {
    let v = (0..target_y.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    PairBatch {
        kind,
        y: target_y.to_vec(),
        x: v,
        is_outlier: vec![false; target_y.len()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub fraction: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl OutlierSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(DataError::BadOutlierSpec(format!(
                "fraction {} not in [0, 1)",
                self.fraction
            )));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(DataError::BadOutlierSpec(format!(
                "need 0 < r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    /// `⌈fraction · n⌉`, immune to products like `0.01 · 20000 = 200.00000000000003`.
    pub fn count(&self, n: usize) -> usize {
        let raw = self.fraction * n as f64;
        let rounded = raw.round();
        if (raw - rounded).abs() < 1e-9 * raw.max(1.0) {
            rounded as usize
        } else {
            raw.ceil() as usize
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectReport {
    pub replaced: usize,
    /// Set when a positive fraction rounded to zero points.
    pub rounded_to_zero: bool,
}

/// Replaces `⌈fraction · n⌉` random rows with points uniform (by area) on the
/// annulus `r ∈ [r_min, r_max]` around the origin.
pub fn inject_outliers(
    batch: &PairBatch,
    spec: &OutlierSpec,
    rng: &mut Rng,
) -> Result<(PairBatch, InjectReport), DataError> {
    spec.validate()?;
    let k = spec.count(batch.len());
    let mut out = batch.clone();
    if k == 0 {
        if spec.fraction > 0.0 {
            log::warn!(
                "outlier fraction {} of {} rows rounds to zero points",
                spec.fraction,
                batch.len()
            );
        }
        return Ok((
            out,
            InjectReport {
                replaced: 0,
                rounded_to_zero: spec.fraction > 0.0,
            },
        ));
    }
    let mut idx = rand::seq::index::sample(rng, batch.len(), k).into_vec();
    idx.sort_unstable();
    let (lo2, hi2) = (spec.r_min * spec.r_min, spec.r_max * spec.r_max);
    for i in idx {
        let r = (lo2 + (hi2 - lo2) * rng.random::<f64>()).sqrt();
        let t = 2.0 * PI * rng.random::<f64>();
        out.y[i] = r * t.cos();
        out.x[i] = r * t.sin();
        out.is_outlier[i] = true;
    }
    Ok((
        out,
        InjectReport {
            replaced: k,
            rounded_to_zero: false,
        },
    ))
}

/// Per-coordinate affine normalization fitted on clean rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl StandardizeStats {
    pub fn identity() -> Self {
        StandardizeStats {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn fit(batch: &PairBatch) -> Result<Self, DataError> {
        let clean = batch.inliers();
        let n = clean.len();
        if n < 2 {
            return Err(DataError::Degenerate("need at least two clean rows"));
        }
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for (c, col) in [&clean.y, &clean.x].into_iter().enumerate() {
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            if !(var > 0.0) {
                return Err(DataError::Degenerate("zero variance coordinate"));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(StandardizeStats { mean, std })
    }

    pub fn apply(&self, batch: &PairBatch) -> PairBatch {
        let mut out = batch.clone();
        for v in &mut out.y {
            *v = (*v - self.mean[0]) / self.std[0];
        }
        for v in &mut out.x {
            *v = (*v - self.mean[1]) / self.std[1];
        }
        out
    }

    pub fn invert(&self, batch: &PairBatch) -> PairBatch {
        let mut out = batch.clone();
        for v in &mut out.y {
            *v = *v * self.std[0] + self.mean[0];
        }
        for v in &mut out.x {
            *v = *v * self.std[1] + self.mean[1];
        }
        out
    }
}

/// Everything a run needs: raw train and test batches plus the stats used to
/// standardize them. Outliers, when requested, contaminate both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    /// Defaults to the dataset's own noise level.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub outliers: Option<OutlierSpec>,
}

fn default_train() -> usize {
    20_000
}

fn default_test() -> usize {
    5_000
}

impl DataConfig {
    pub fn new(kind: DatasetKind) -> Self {
        DataConfig {
            kind,
            n_train: default_train(),
            n_test: default_test(),
            noise: None,
            outliers: None,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or_else(|| self.kind.default_noise())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: PairBatch,
    pub test: PairBatch,
    pub stats: StandardizeStats,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self, DataError> {
        let noise = cfg.noise();
        let mut train = sample_target_with(
            cfg.kind,
            cfg.n_train,
            noise,
            &mut rng::stream(seed, streams::DATA_TRAIN),
        )?;
        let mut test = sample_target_with(
            cfg.kind,
            cfg.n_test,
            noise,
            &mut rng::stream(seed, streams::DATA_TEST),
        )?;
        let stats = StandardizeStats::fit(&train)?;
        if let Some(spec) = &cfg.outliers {
            train =
                inject_outliers(&train, spec, &mut rng::stream(seed, streams::OUTLIER_TRAIN))?.0;
            test = inject_outliers(&test, spec, &mut rng::stream(seed, streams::OUTLIER_TEST))?.0;
        }
        Ok(Dataset { train, test, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circles_stay_inside_radius() {
        let b = sample_target(DatasetKind::Circles, 1000, 0.05, 3).unwrap();
        for (y, x) in b.y.iter().zip(&b.x) {
            assert!((y * y + x * x).sqrt() < 1.2);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_target(DatasetKind::Moons, 4, 0.05, 11).unwrap();
        let b = sample_target(DatasetKind::Moons, 4, 0.05, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_target(DatasetKind::Moons, 4, 0.05, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkerboard_respects_lattice() {
        let b = sample_target(DatasetKind::Checkerboard, 10_000, 0.0, 5).unwrap();
        let mut counts = [[0usize; 4]; 4];
        for (y, x) in b.y.iter().zip(&b.x) {
            let i = (((y + 4.0) / 2.0).floor() as usize).min(3);
            let j = (((x + 4.0) / 2.0).floor() as usize).min(3);
            counts[i][j] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if (i + j) % 2 == 1 {
                    assert!((c as f64) < 0.005 * 10_000.0, "cell ({i},{j}) holds {c}");
                } else {
                    assert!(c > 1000);
                }
            }
        }
    }

    #[test]
    fn source_copies_conditions() {
        let mut rng = rng::stream(1, 99);
        let s = make_source(DatasetKind::Moons, &[0.3, -1.2], &mut rng);
        assert_eq!(s.y, vec![0.3, -1.2]);
        assert_ne!(s.x[0], s.x[1]);
        let one = make_source(DatasetKind::Moons, &[2.0], &mut rng);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn source_noise_moments() {
        let mut rng = rng::stream(2, 99);
        let s = make_source(DatasetKind::Moons, &vec![0.0; 100_000], &mut rng);
        let n = s.len() as f64;
        let m = s.x.iter().sum::<f64>() / n;
        let v = s.x.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 0.02, "{m}");
        assert!((0.97..1.03).contains(&v), "{v}");
    }

    #[test]
    fn outlier_injection_counts_and_radii() {
        let b = sample_target(DatasetKind::Circles, 20_000, 0.05, 1).unwrap();
        let spec = OutlierSpec {
            fraction: 0.01,
            r_min: 4.0,
            r_max: 5.0,
        };
        let (o, rep) = inject_outliers(&b, &spec, &mut rng::stream(1, 3)).unwrap();
        assert_eq!(rep.replaced, 200);
        assert_eq!(o.outlier_count(), 200);
        for i in 0..o.len() {
            let r = (o.y[i] * o.y[i] + o.x[i] * o.x[i]).sqrt();
            if o.is_outlier[i] {
                assert!((4.0..=5.0).contains(&r));
            } else {
                assert_eq!((o.y[i], o.x[i]), (b.y[i], b.x[i]));
            }
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let b = sample_target(DatasetKind::Moons, 50, 0.05, 1).unwrap();
        let spec = OutlierSpec {
            fraction: 0.0,
            r_min: 1.0,
            r_max: 2.0,
        };
        let (o, rep) = inject_outliers(&b, &spec, &mut rng::stream(1, 3)).unwrap();
        assert_eq!(o, b);
        assert!(!rep.rounded_to_zero);
        let tiny = OutlierSpec {
            fraction: 0.001,
            ..spec
        };
        let small = sample_target(DatasetKind::Moons, 10, 0.05, 1).unwrap();
        let (o, rep) = inject_outliers(&small, &tiny, &mut rng::stream(1, 3)).unwrap();
        assert_eq!(rep.replaced, 1);
        assert_eq!(o.outlier_count(), 1);
        assert_eq!(tiny.count(400), 1);
        assert_eq!(
            OutlierSpec {
                fraction: 0.0001,
                ..spec
            }
            .count(1000),
            1
        );
    }

    #[test]
    fn bad_specs_rejected() {
        let bad = OutlierSpec {
            fraction: 0.01,
            r_min: 3.0,
            r_max: 2.0,
        };
        assert!(bad.validate().is_err());
        assert!("spiral".parse::<DatasetKind>().is_err());
        assert!(sample_target(DatasetKind::Moons, 0, 0.05, 0).is_err());
    }

    #[test]
    fn standardize_round_trip() {
        let b = sample_target(DatasetKind::Swissroll, 500, 0.05, 4).unwrap();
        let s = StandardizeStats::fit(&b).unwrap();
        let z = s.apply(&b);
        let m: f64 = z.y.iter().sum::<f64>() / 500.0;
        assert!(m.abs() < 1e-12);
        let back = s.invert(&z);
        for i in 0..500 {
            assert!((back.y[i] - b.y[i]).abs() < 1e-12);
            assert!((back.x[i] - b.x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let b = sample_target(DatasetKind::Moons, 20, 0.05, 4).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"y,x,is_outlier\n"));
        let back = PairBatch::read_csv(DatasetKind::Moons, buf.as_slice()).unwrap();
        assert_eq!(back, b);
    }
}

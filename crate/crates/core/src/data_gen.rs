//! Long-tailed count profiles, synthetic Gaussian-mixture datasets, CSV
//! ingestion, two-view noise augmentation and shuffled batching.
//!
//! Every random draw comes from a `ChaCha8Rng` keyed by an explicit seed
//! (and stream), so regenerating with the same arguments is bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassProfile;
use crate::numerics::{l2_normalize, Mat, NORM_EPS};

/// Balanced test-set size per class for synthetic mixtures.
pub const DEFAULT_TEST_PER_CLASS: usize = 100;

// RNG streams, so adding draws to one stage never shifts another.
const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;

fn round_count(v: f64) -> usize {
    v.round_ties_even().max(1.0) as usize
}

/// `n_c = round(n_max · imbalance^(−c/(C−1)))`, clamped to ≥ 1.
pub fn exponential_profile(num_classes: usize, n_max: usize, imbalance: f64) -> Result<ClassProfile> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(Error::invalid(format!("imbalance factor {imbalance} must be ≥ 1")));
    }
    if (n_max as f64) < imbalance {
        return Err(Error::invalid(format!(
            "n_max {n_max} is below the imbalance factor {imbalance}; the tail would be empty"
        )));
    }
    let last = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|c| round_count(n_max as f64 * imbalance.powf(-(c as f64) / last)))
        .collect();
    ClassProfile::new(counts)
}

/// `n_c = round(n_max · (c+1)^(−a))` with `a = ln(n_max/n_min) / ln C`, so
/// the head has `n_max` and the tail `n_min`.
pub fn pareto_profile(num_classes: usize, n_max: usize, n_min: usize) -> Result<ClassProfile> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if n_min < 1 || n_max <= n_min {
        return Err(Error::invalid(format!(
            "need n_max > n_min ≥ 1, got n_max {n_max}, n_min {n_min}"
        )));
    }
    let a = (n_max as f64 / n_min as f64).ln() / (num_classes as f64).ln();
    let counts = (0..num_classes)
        .map(|c| round_count(n_max as f64 * ((c + 1) as f64).powf(-a)).max(n_min))
        .collect();
    ClassProfile::new(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled feature vectors. `profile` holds this split's own per-class
/// counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub profile: ClassProfile,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let profile = ClassProfile::new(class_counts(&labels))?;
        Ok(Self {
            features,
            labels,
            profile,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.profile.num_classes()
    }

    /// Rows `indices` as a new matrix, in order.
    pub fn gather(&self, indices: &[usize]) -> Mat {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Mat::from_vec(indices.len(), d, data).expect("sized above")
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        batch_iterator(self.len(), batch_size, seed, epoch)
    }
}

/// Per-class counts for labels `0..=max`.
pub fn class_counts(labels: &[usize]) -> Vec<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; c];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_classes(
    means: &[Vec<f64>],
    counts: &[usize],
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Result<Dataset> {
    let dim = means[0].len();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, (&n, mean)) in counts.iter().zip(means).enumerate() {
        for _ in 0..n {
            data.extend(mean.iter().map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + e
            }));
            labels.push(c);
        }
    }
    Dataset::new(Mat::from_vec(total, dim, data)?, labels, split)
}

/// Gaussian mixture with class means `separation · u_c` for random unit
/// directions `u_c` and identity covariance. Train counts follow `profile`;
/// the test split has `test_per_class` instances of every class.
pub fn gaussian_mixture_sized(
    profile: &ClassProfile,
    dim: usize,
    separation: f64,
    seed: u64,
    test_per_class: usize,
) -> Result<(Dataset, Dataset)> {
    if dim < 2 {
        return Err(Error::invalid(format!("dimension {dim} must be at least 2")));
    }
    if !(separation >= 0.0) {
        return Err(Error::invalid(format!("separation {separation} must be non-negative")));
    }
    if test_per_class == 0 {
        return Err(Error::invalid("test split needs at least one instance per class"));
    }
    let mut rng = seeded(seed, STREAM_MEANS);
    let means: Vec<Vec<f64>> = (0..profile.num_classes())
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            l2_normalize(&dir, NORM_EPS).into_iter().map(|v| v * separation).collect()
        })
        .collect();
    let train = sample_classes(&means, profile.counts(), &mut seeded(seed, STREAM_TRAIN), Split::Train)?;
    let test_counts = vec![test_per_class; profile.num_classes()];
    let test = sample_classes(&means, &test_counts, &mut seeded(seed, STREAM_TEST), Split::Test)?;
    Ok((train, test))
}

pub fn gaussian_mixture(profile: &ClassProfile, dim: usize, separation: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    gaussian_mixture_sized(profile, dim, separation, seed, DEFAULT_TEST_PER_CLASS)
}

/// Reads `label,f_1,…,f_D` rows (no header). Blank lines are skipped.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut dim = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {label_field:?} is not a non-negative integer")))?;
        let start = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line_no, format!("feature {f:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("feature {f:?} is not finite")));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match dim {
            None if width == 0 => return Err(parse_err(line_no, "row has no features".into())),
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(parse_err(line_no, format!("row has {width} features, expected {d}")))
            }
            _ => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| parse_err(0, "no data rows".into()))?;
    let features = Mat::from_vec(labels.len(), dim, data)?;
    Dataset::new(features, labels, Split::Train)
        .map_err(|e| parse_err(0, format!("class counts invalid: {e}")))
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (row, label) in dataset.features.row_iter().zip(&dataset.labels) {
        write!(out, "{label}").expect("string write");
        for v in row {
            // Display for f64 is the shortest exact round-trip form
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Per-class sampling without replacement down to `profile`'s counts.
/// Selected instances keep their original relative order.
pub fn subsample(dataset: &Dataset, profile: &ClassProfile, seed: u64) -> Result<Dataset> {
    let available = dataset.profile.counts();
    if profile.num_classes() != available.len() {
        return Err(Error::invalid(format!(
            "profile has {} classes, dataset has {}",
            profile.num_classes(),
            available.len()
        )));
    }
    let mut rng = seeded(seed, STREAM_SUBSAMPLE);
    let mut keep = vec![false; dataset.len()];
    for (c, (&want, &have)) in profile.counts().iter().zip(available).enumerate() {
        if want > have {
            return Err(Error::invalid(format!(
                "class {c} needs {want} instances, only {have} available"
            )));
        }
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[..want] {
            keep[i] = true;
        }
    }
    let indices: Vec<usize> = (0..dataset.len()).filter(|&i| keep[i]).collect();
    let labels = indices.iter().map(|&i| dataset.labels[i]).collect();
    Dataset::new(dataset.gather(&indices), labels, dataset.split)
}

/// Two noisy views of one source instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_main: Vec<f64>,
    pub view_momentum: Vec<f64>,
}

/// Each view is `feature + N(0, noise_sigma²)` per coordinate, independently.
pub fn make_views<R: Rng>(feature: &[f64], noise_sigma: f64, rng: &mut R) -> Result<ViewPair> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let view = |rng: &mut R| -> Vec<f64> {
        feature
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(rng);
                v + noise_sigma * e
            })
            .collect()
    };
    let view_main = view(rng);
    let view_momentum = view(rng);
    Ok(ViewPair {
        view_main,
        view_momentum,
    })
}

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`. The last
/// batch may be short.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded(seed, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

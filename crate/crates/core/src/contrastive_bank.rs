//! The momentum branch: a FIFO queue of past keys, the per-step key bank
//! that contrastive losses read positives and negatives from, and the EMA
//! shadow of the encoder and projection head.
//!
//! Every bank element is a candidate for `A⁻`. The query itself comes from
//! the main branch and is never in the bank, so nothing is excluded; the
//! instance's own momentum key (its second view) is kept and counts as a
//! positive.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{norm2, Mat};
use crate::trainer::model::{embed, Mlp, ModelParams};

const UNIT_NORM_TOL: f64 = 1e-9;

/// Default EMA coefficient.
pub const DEFAULT_MOMENTUM: f64 = 0.999;

fn check_unit_rows(keys: &Mat) -> Result<()> {
    for (i, row) in keys.row_iter().enumerate() {
        let n = norm2(row);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("key {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of labeled unit-norm keys, oldest first.
#[derive(Debug, Clone)]
pub struct KeyQueue {
    capacity: usize,
    dim: Option<usize>,
    keys: VecDeque<(Vec<f64>, usize)>,
    pushed: u64,
    evicted: u64,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            dim: None,
            keys: VecDeque::with_capacity(capacity),
            pushed: 0,
            evicted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn total_evicted(&self) -> u64 {
        self.evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.keys.iter().map(|(k, l)| (k.as_slice(), *l))
    }

    /// Appends the rows of `keys`, evicting the oldest entries past capacity.
    pub fn enqueue(&mut self, keys: &Mat, labels: &[usize]) -> Result<()> {
        if keys.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} keys with {} labels",
                keys.rows(),
                labels.len()
            )));
        }
        if keys.rows() == 0 {
            return Ok(());
        }
        match self.dim {
            Some(d) if d != keys.cols() => {
                return Err(Error::shape(format!(
                    "key dimension {} does not match queue dimension {d}",
                    keys.cols()
                )))
            }
            _ => self.dim = Some(keys.cols()),
        }
        check_unit_rows(keys)?;
        for (row, &label) in keys.row_iter().zip(labels) {
            self.pushed += 1;
            if self.capacity == 0 {
                self.evicted += 1;
                continue;
            }
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
                self.evicted += 1;
            }
            self.keys.push_back((row.to_vec(), label));
        }
        Ok(())
    }
}

/// Current-batch momentum keys followed by a snapshot of the queue.
#[derive(Debug, Clone)]
pub struct KeyBank {
    keys: Mat,
    labels: Vec<usize>,
    batch_len: usize,
}

impl KeyBank {
    pub fn new(batch_keys: &Mat, batch_labels: &[usize], queue: &KeyQueue) -> Result<Self> {
        if batch_keys.rows() != batch_labels.len() {
            return Err(Error::shape(format!(
                "{} batch keys with {} labels",
                batch_keys.rows(),
                batch_labels.len()
            )));
        }
        if let Some(d) = queue.dim() {
            if batch_keys.rows() > 0 && batch_keys.cols() != d {
                return Err(Error::shape(format!(
                    "batch key dimension {} vs queue dimension {d}",
                    batch_keys.cols()
                )));
            }
        }
        check_unit_rows(batch_keys)?;
        let dim = if batch_keys.rows() > 0 {
            batch_keys.cols()
        } else {
            queue.dim().unwrap_or(batch_keys.cols())
        };
        let n = batch_keys.rows() + queue.len();
        let mut data = Vec::with_capacity(n * dim);
        data.extend_from_slice(batch_keys.as_slice());
        let mut labels = batch_labels.to_vec();
        for (k, l) in queue.iter() {
            data.extend_from_slice(k);
            labels.push(l);
        }
        Ok(Self {
            keys: Mat::from_vec(n, dim, data)?,
            labels,
            batch_len: batch_keys.rows(),
        })
    }

    /// A bank holding only explicit keys (no queue part).
    pub fn from_keys(keys: Mat, labels: Vec<usize>) -> Result<Self> {
        if keys.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} keys with {} labels",
                keys.rows(),
                labels.len()
            )));
        }
        check_unit_rows(&keys)?;
        let batch_len = keys.rows();
        Ok(Self {
            keys,
            labels,
            batch_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn batch_len(&self) -> usize {
        self.batch_len
    }

    pub fn queue_len(&self) -> usize {
        self.len() - self.batch_len
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn key(&self, k: usize) -> &[f64] {
        self.keys.row(k)
    }

    /// `|P_i⁻|` for a query with `label`.
    pub fn positive_count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `(P_i⁻, A⁻)` as bank indices.
    ///
    /// `instance_index` identifies the query's batch slot; its momentum key
    /// stays in both sets.
    pub fn positive_and_all_sets(&self, _instance_index: usize, label: usize) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.len()).collect();
        let positives = all
            .iter()
            .copied()
            .filter(|&k| self.labels[k] == label)
            .collect();
        (positives, all)
    }
}

/// EMA shadow of the encoder and projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumParams {
    pub encoder: Mlp,
    pub projection: Mlp,
    momentum: f64,
}

impl MomentumParams {
    /// Shadow initialized as an exact copy of `main`.
    pub fn from_main(main: &ModelParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            encoder: main.encoder.clone(),
            projection: main.projection.clone(),
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.projection.layers.iter_mut())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// `shadow ← m·shadow + (1 − m)·main` on every encoder/projection tensor.
    pub fn ema_update(&mut self, main: &ModelParams) -> Result<()> {
        let m = self.momentum;
        let sources: Vec<&[f64]> = main
            .encoder
            .layers
            .iter()
            .chain(&main.projection.layers)
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect();
        let targets = self.tensors_mut();
        if sources.len() != targets.len() {
            return Err(Error::shape("shadow and main layer counts differ"));
        }
        // all shapes first, so a mismatch leaves the shadow untouched
        let mismatch = sources.iter().zip(&targets).any(|(s, t)| s.len() != t.len());
        if mismatch {
            return Err(Error::shape("shadow and main tensor sizes differ"));
        }
        for (dst, src) in targets.into_iter().zip(sources) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = m * *d + (1.0 - m) * s;
            }
        }
        Ok(())
    }

    /// Momentum-branch embeddings for a batch of inputs.
    pub fn embed(&self, batch: &Mat) -> Result<Mat> {
        embed(&self.encoder, &self.projection, batch)
    }
}

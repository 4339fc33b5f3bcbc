//! Deterministic end-to-end training.
//!
//! Each step: two noisy views per instance; the main branch embeds and
//! classifies the first, the EMA branch embeds the second into momentum
//! keys; keys plus the queue form the bank; the configured loss is
//! back-propagated into the main branch only; SGD, EMA update, enqueue.
//!
//! Identical configs give identical logs, bit for bit: every random stream
//! is derived from `run.seed` and the loop is single-threaded.

pub mod config;
pub mod model;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::Config;
pub use model::{backward, forward, HeadKind, ModelParams};
pub use optim::{sgd_step, OptimizerState, Schedule, ScheduleKind};

use crate::contrastive_bank::{KeyBank, KeyQueue, MomentumParams};
use crate::data_gen::{make_views, Dataset};
use crate::error::{Error, Result};
use crate::losses::{evaluate_loss, BatchInputs};
use crate::numerics::{norm2, Mat};

const EVAL_CHUNK: usize = 512;

/// Independent seed per purpose, via splitmix64.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_BATCHES: u64 = 2;
const SEED_VIEWS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean unweighted classifier cross-entropy.
    pub ce_component: f64,
    /// Mean unweighted supervised contrastive loss.
    pub scl_component: f64,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_counts: Vec<usize>,
    pub steps: usize,
    pub keys_enqueued: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// A finished run: its log and the final main-branch parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub log: TrainingLog,
    pub params: ModelParams,
    pub initial_params: ModelParams,
}

/// Per-class accuracy of argmax predictions (ties to the lowest class).
pub fn evaluate(params: &ModelParams, dataset: &Dataset, head: HeadKind, gamma_t: f64) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let c = params.num_classes();
    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = params.encoder.apply(&dataset.gather(chunk))?;
        let scores = model::classifier_outputs(&x, &params.classifier, head, gamma_t)?;
        for (row, &i) in chunk.iter().enumerate() {
            let label = dataset.labels[i];
            if label >= c {
                return Err(Error::LabelOutOfRange { label, num_classes: c });
            }
            seen[label] += 1;
            if argmax(scores.row(row)) == label {
                correct[label] += 1;
            }
        }
    }
    Ok(correct
        .iter()
        .zip(&seen)
        .map(|(&k, &n)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
        .collect())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn train(config: &Config) -> Result<TrainingLog> {
    config.validate()?;
    let (train_set, test_set) = config.datasets()?;
    Ok(train_on(config, &train_set, &test_set)?.log)
}

/// Trains on explicit splits; `config.data` is ignored apart from
/// `noise_sigma`.
pub fn train_on(config: &Config, train_set: &Dataset, test_set: &Dataset) -> Result<TrainedModel> {
    let schedule = config.schedule()?;
    let profile = &train_set.profile;
    let head = config.head_kind();
    let weights = config.weights();
    let kind = config.loss.kind;
    let seed = config.run.seed;

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_INIT));
    let mut params = ModelParams::init(
        train_set.dim(),
        &config.model.encoder_widths,
        config.model.embedding_dim,
        profile.num_classes(),
        &mut init_rng,
    )?;
    let initial_params = params.clone();
    let mut shadow = MomentumParams::from_main(&params, config.bank.momentum_m)?;
    let mut opt = OptimizerState::new(&params, config.optim.momentum, config.optim.weight_decay)?;
    let mut queue = KeyQueue::new(config.bank.queue_capacity);
    let mut view_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_VIEWS));
    let batch_seed = derive_seed(seed, SEED_BATCHES);

    let mut log = TrainingLog {
        train_counts: profile.counts().to_vec(),
        steps: 0,
        keys_enqueued: 0,
        epochs: Vec::with_capacity(config.optim.epochs),
    };

    for epoch in 0..config.optim.epochs {
        let lr = schedule.lr_at(epoch)?;
        let (mut loss_sum, mut ce_sum, mut scl_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, indices) in train_set
            .batches(config.optim.batch_size, batch_seed, epoch as u64)?
            .iter()
            .enumerate()
        {
            let labels: Vec<usize> = indices.iter().map(|&i| train_set.labels[i]).collect();
            let d = train_set.dim();
            let mut main_data = Vec::with_capacity(indices.len() * d);
            let mut momentum_data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                let pair = make_views(train_set.features.row(i), config.data.noise_sigma, &mut view_rng)?;
                main_data.extend(pair.view_main);
                momentum_data.extend(pair.view_momentum);
            }
            let main_view = Mat::from_vec(indices.len(), d, main_data)?;
            let momentum_view = Mat::from_vec(indices.len(), d, momentum_data)?;

            let out = forward(&params, &main_view, head, config.model.gamma_t)?;
            let keys = shadow.embed(&momentum_view)?;
            // a collapsed or overflowed momentum encoder yields keys that
            // are not unit vectors
            if keys.row_iter().any(|k| !((norm2(k) - 1.0).abs() <= 1e-9)) {
                return Err(Error::NumericalFailure { epoch, batch: b });
            }
            let bank = KeyBank::new(&keys, &labels, &queue)?;
            let inputs = BatchInputs {
                features: &out.features,
                labels: &labels,
                embeddings: &out.embeddings,
            };
            let eval = evaluate_loss(kind, head, &inputs, &params.classifier, Some(&bank), profile, &weights)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NumericalFailure { epoch, batch: b },
                    other => other,
                })?;
            if !eval.result.total.is_finite() {
                return Err(Error::NumericalFailure { epoch, batch: b });
            }
            let r = &eval.result;
            let grads = backward(&params, &out.cache, &r.grad_features, &r.grad_theta, &r.grad_embeddings)?;
            sgd_step(&mut params, &grads, &mut opt, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::NumericalFailure { epoch, batch: b },
                other => other,
            })?;
            shadow.ema_update(&params)?;
            queue.enqueue(&keys, &labels)?;

            log.steps += 1;
            log.keys_enqueued += labels.len() as u64;
            loss_sum += r.total;
            ce_sum += eval.ce_component;
            scl_sum += eval.scl_component;
            n_batches += 1;
        }
        let denom = n_batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / denom,
            ce_component: ce_sum / denom,
            scl_component: scl_sum / denom,
            train_acc: evaluate(&params, train_set, head, config.model.gamma_t)?,
            test_acc: evaluate(&params, test_set, head, config.model.gamma_t)?,
        });
    }
    Ok(TrainedModel {
        log,
        params,
        initial_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_gen::Split;
    use crate::losses::ClassProfile;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.data.num_classes = 3;
        cfg.data.n_max = 40;
        cfg.data.imbalance = 8.0;
        cfg.data.dim = 4;
        cfg.data.test_per_class = 10;
        cfg.model.encoder_widths = vec![8];
        cfg.model.embedding_dim = 4;
        cfg.optim.batch_size = 16;
        cfg.optim.epochs = 3;
        cfg.optim.warmup_epochs = 1;
        cfg.bank.queue_capacity = 32;
        cfg
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0, -0.5]), 1);
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let cfg = tiny_config();
        let (_, test) = cfg.datasets().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(4, &[8], 4, 3, &mut rng).unwrap();
        params.classifier = Mat::zeros(8, 3);
        let acc = evaluate(&params, &test, HeadKind::Linear, 1.0).unwrap();
        assert_eq!(acc, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_classifier_is_perfect() {
        // identity encoder on one-hot inputs, classifier = identity
        use model::{Activation, Dense, Mlp};
        let id = |n| Dense::new(Mat::identity(n), vec![0.0; n], Activation::Identity).unwrap();
        let params = ModelParams::new(Mlp::new(vec![id(3)]).unwrap(), Mlp::new(vec![id(3)]).unwrap(), Mat::identity(3)).unwrap();
        let features = Mat::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 3.0, 0.1]]).unwrap();
        let ds = Dataset::new(features, vec![0, 1, 2, 1], Split::Test).unwrap();
        assert_eq!(evaluate(&params, &ds, HeadKind::Linear, 1.0).unwrap(), vec![1.0; 3]);
        assert_eq!(evaluate(&params, &ds, HeadKind::Cosine, 0.1).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn positive_rescaling_keeps_predictions() {
        let cfg = tiny_config();
        let (_, test) = cfg.datasets().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ModelParams::init(4, &[8], 4, 3, &mut rng).unwrap();
        let before = evaluate(&params, &test, HeadKind::Linear, 1.0).unwrap();
        params.classifier.scale(17.5);
        assert_eq!(evaluate(&params, &test, HeadKind::Linear, 1.0).unwrap(), before);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut cfg = tiny_config();
        cfg.optim.base_lr = 0.0;
        cfg.optim.epochs = 1;
        cfg.optim.warmup_epochs = 0;
        let (train, test) = cfg.datasets().unwrap();
        let run = train_on(&cfg, &train, &test).unwrap();
        assert_eq!(run.params, run.initial_params);
        let head = cfg.head_kind();
        let untrained = evaluate(&run.initial_params, &test, head, cfg.model.gamma_t).unwrap();
        assert_eq!(run.log.epochs[0].test_acc, untrained);
    }

    #[test]
    fn identical_configs_identical_logs() {
        for kind in crate::losses::LossKind::ALL {
            let mut cfg = tiny_config();
            cfg.loss.kind = kind;
            let a = train(&cfg).unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(a.epochs.len(), 3);
            assert!(a.epochs.iter().all(|e| e.loss.is_finite()));
        }
    }

    #[test]
    fn queue_bookkeeping() {
        let cfg = tiny_config();
        let (train, test) = cfg.datasets().unwrap();
        let run = train_on(&cfg, &train, &test).unwrap();
        let per_epoch = train.len().div_ceil(cfg.optim.batch_size);
        assert_eq!(run.log.steps, per_epoch * cfg.optim.epochs);
        assert_eq!(run.log.keys_enqueued, (train.len() * cfg.optim.epochs) as u64);
    }

    #[test]
    fn balanced_accuracy_identity() {
        let cfg = tiny_config();
        let (train, test) = cfg.datasets().unwrap();
        let run = train_on(&cfg, &train, &test).unwrap();
        let per_class = &run.log.last().unwrap().test_acc;
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        let mut correct = 0usize;
        for (i, &label) in test.labels.iter().enumerate() {
            let x = run.params.encoder.apply(&test.gather(&[i])).unwrap();
            let s = x.matmul(&run.params.classifier).unwrap();
            correct += usize::from(argmax(s.row(0)) == label);
        }
        assert!((mean - correct as f64 / test.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(2, &[3], 2, 2, &mut rng).unwrap();
        let empty = Dataset {
            features: Mat::zeros(0, 2),
            labels: vec![],
            profile: ClassProfile::new(vec![1, 1]).unwrap(),
            split: Split::Test,
        };
        assert!(evaluate(&params, &empty, HeadKind::Linear, 1.0).is_err());
    }

    #[test]
    fn seeds_are_independent_per_purpose() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}

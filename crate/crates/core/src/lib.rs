//! Long-tailed classification losses and the machinery to study them.
//!
//! | Module | Contents |
//! |---|---|
//! | [`numerics`] | dense matrices, stable reductions, finite-difference oracle |
//! | [`losses`] | Balanced-Softmax CE, supervised contrastive, summed, PaCo, CIBL, cosine CE |
//! | [`contrastive_bank`] | FIFO key queue, key bank with positive/all sets, EMA shadow weights |
//! | [`data_gen`] | exponential and Pareto count profiles, Gaussian mixtures, CSV, views, batching |
//! | [`trainer`] | MLP encoder with projection head, SGD with momentum, schedules, training loop |
//! | [`metrics_report`] | Many/Medium/Few splits, overfit-gap fit, report files |
//! | [`gradcheck`] | analytic-vs-numeric gradient verification for every loss and the full chain |
//! | [`sweep`] | parameter sweeps over config paths with median aggregation |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive_bank;
pub mod data_gen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics_report;
pub mod numerics;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};

//! Long-tailed classification losses with analytic gradients.
//!
//! Every loss returns per-instance values, their batch mean, and the exact
//! gradient of that mean with respect to the features `x` (B×D), the
//! classifier `Θ` (D×C) and the query embeddings `z` (B×E). Inputs a loss
//! does not touch get an explicit zero gradient.
//!
//! Bank keys (momentum-branch embeddings and queue entries) are constants:
//! no gradient flows to them.
//!
//! The classifier side always carries the Balanced-Softmax adjustment: the
//! logit of class `c` is shifted by `ln n_c` during training.

use serde::{Deserialize, Serialize};

use crate::contrastive_bank::KeyBank;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, logsumexp, Mat};
use crate::trainer::model::{classifier_outputs, normalize_rows, normalize_rows_backward, HeadKind};

/// Training-set instance counts `n_c`, one per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassProfile {
    counts: Vec<usize>,
}

impl ClassProfile {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(format!(
                "a profile needs at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has count 0")));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn log_counts(&self) -> Vec<f64> {
        self.counts.iter().map(|&n| (n as f64).ln()).collect()
    }

    /// Same profile with every count multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Result<Self> {
        Self::new(self.counts.iter().map(|n| n * factor).collect())
    }
}

impl TryFrom<Vec<usize>> for ClassProfile {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassProfile> for Vec<usize> {
    fn from(p: ClassProfile) -> Self {
        p.counts
    }
}

/// One batch as seen by the losses.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    /// Encoder features, B×D.
    pub features: &'a Mat,
    pub labels: &'a [usize],
    /// Unit-norm main-branch embeddings, B×E.
    pub embeddings: &'a Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub per_instance_loss: Vec<f64>,
    /// Mean of `per_instance_loss`.
    pub total: f64,
    pub grad_features: Mat,
    pub grad_theta: Mat,
    pub grad_embeddings: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_scl: f64,
    /// PaCo weight on contrastive positives.
    pub alpha: f64,
    /// PaCo weight on the classifier positive.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Cosine-classifier temperature.
    pub gamma_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_scl: 0.03,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.05,
            gamma_t: 0.05,
        }
    }
}

/// Loss selected by a training config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Balanced-Softmax cross-entropy alone.
    Ce,
    /// `λ^CE·L_CE + λ^SCL·L_SCL`.
    Summed,
    Paco,
    Cibl,
    /// CIBL on a cosine classifier.
    Ncibl,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Summed,
        LossKind::Paco,
        LossKind::Cibl,
        LossKind::Ncibl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Summed => "summed",
            LossKind::Paco => "paco",
            LossKind::Cibl => "cibl",
            LossKind::Ncibl => "ncibl",
        }
    }

    /// NCIBL fixes the cosine head and PaCo the linear one; the rest follow
    /// the model config.
    pub fn resolve_head(self, configured: HeadKind) -> HeadKind {
        match self {
            LossKind::Ncibl => HeadKind::Cosine,
            LossKind::Paco => HeadKind::Linear,
            _ => configured,
        }
    }

    pub fn uses_bank(self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind {s:?}")))
    }
}

/// A loss value together with its unweighted classifier and contrastive
/// parts (batch means), for logging.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub result: LossResult,
    pub ce_component: f64,
    pub scl_component: f64,
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Linear,
    Cosine { gamma: f64 },
}

impl Head {
    fn new(kind: HeadKind, gamma_t: f64) -> Result<Self> {
        match kind {
            HeadKind::Linear => Ok(Head::Linear),
            HeadKind::Cosine => {
                if !(gamma_t > 0.0) {
                    return Err(Error::invalid(format!("gamma_t {gamma_t} must be positive")));
                }
                Ok(Head::Cosine { gamma: gamma_t })
            }
        }
    }

    fn logits(self, features: &Mat, theta: &Mat) -> Result<Mat> {
        if features.cols() != theta.rows() {
            return Err(Error::shape(format!(
                "features {:?} against classifier {:?}",
                features.shape(),
                theta.shape()
            )));
        }
        let out = match self {
            Head::Linear => classifier_outputs(features, theta, HeadKind::Linear, 1.0)?,
            Head::Cosine { gamma } => classifier_outputs(features, theta, HeadKind::Cosine, gamma)?,
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        Ok(out)
    }

    /// Pulls a logit gradient back to (features, classifier).
    fn backward(self, features: &Mat, theta: &Mat, dlogits: &Mat) -> Result<(Mat, Mat)> {
        match self {
            Head::Linear => Ok((dlogits.matmul_t(theta)?, features.t_matmul(dlogits)?)),
            Head::Cosine { gamma } => {
                let xn = normalize_rows(features);
                let theta_t = theta.transpose();
                let tn = normalize_rows(&theta_t);
                let mut ds = dlogits.clone();
                ds.scale(1.0 / gamma);
                let dxn = ds.matmul(&tn)?;
                let dtn = ds.t_matmul(&xn)?;
                let dx = normalize_rows_backward(features, &dxn);
                let dtheta = normalize_rows_backward(&theta_t, &dtn).transpose();
                Ok((dx, dtheta))
            }
        }
    }
}

/// How the adjusted softmax cross-entropy is evaluated.
#[derive(Debug, Clone, Copy)]
enum CeRoute {
    /// `logsumexp(logit + ln n) − (logit_y + ln n_y)`.
    LogDomain,
    /// `−ln(n_y e^{logit_y − m} / Σ n_c e^{logit_c − m})`, counts kept as
    /// multiplicative weights.
    Ratio,
}

/// Per-instance classifier cross-entropy and its gradient w.r.t. the logits
/// (per instance, not batch-averaged).
struct CeTerm {
    loss: Vec<f64>,
    dlogits: Mat,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

fn ce_term(logits: &Mat, labels: &[usize], profile: &ClassProfile, route: CeRoute) -> Result<CeTerm> {
    let c = profile.num_classes();
    if logits.cols() != c {
        return Err(Error::shape(format!(
            "{} logits per instance for {c} classes",
            logits.cols()
        )));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    check_labels(labels, c)?;
    let log_n = profile.log_counts();
    let counts: Vec<f64> = profile.counts().iter().map(|&n| n as f64).collect();
    let mut loss = Vec::with_capacity(labels.len());
    let mut dlogits = Mat::zeros(logits.rows(), c);
    let mut adjusted = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let d = dlogits.row_mut(i);
        match route {
            CeRoute::LogDomain => {
                for ((a, l), ln) in adjusted.iter_mut().zip(row).zip(&log_n) {
                    *a = l + ln;
                }
                let lse = logsumexp(&adjusted)?;
                loss.push(lse - adjusted[y]);
                for (g, a) in d.iter_mut().zip(&adjusted) {
                    *g = (a - lse).exp();
                }
            }
            CeRoute::Ratio => {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut den = 0.0;
                for ((g, l), n) in d.iter_mut().zip(row).zip(&counts) {
                    *g = n * (l - m).exp();
                    den += *g;
                }
                let num = d[y];
                loss.push(-(num / den).ln());
                d.iter_mut().for_each(|g| *g /= den);
            }
        }
        d[y] -= 1.0;
    }
    if loss.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok(CeTerm { loss, dlogits })
}

/// Per-instance supervised contrastive loss against the bank, its gradient
/// w.r.t. each query embedding, and `|P_i⁻|`.
struct SclTerm {
    loss: Vec<f64>,
    grad: Mat,
    positives: Vec<usize>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau {tau} must be positive")))
    }
}

fn check_bank(queries: &Mat, labels: &[usize], bank: &KeyBank) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if queries.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} labels",
            queries.rows(),
            labels.len()
        )));
    }
    if queries.cols() != bank.dim() {
        return Err(Error::shape(format!(
            "embedding dimension {} vs key dimension {}",
            queries.cols(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Scaled similarities `z·k/τ` of one query against every bank key.
fn similarities(query: &[f64], bank: &KeyBank, tau: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(bank.keys().row_iter().map(|k| dot(query, k) / tau));
}

fn scl_term(queries: &Mat, bank: &KeyBank, labels: &[usize], tau: f64) -> Result<SclTerm> {
    check_tau(tau)?;
    check_bank(queries, labels, bank)?;
    let keys = bank.keys();
    let bank_labels = bank.labels();
    let mut loss = Vec::with_capacity(labels.len());
    let mut positives = Vec::with_capacity(labels.len());
    let mut grad = Mat::zeros(queries.rows(), queries.cols());
    let mut s = Vec::with_capacity(bank.len());
    for (i, &y) in labels.iter().enumerate() {
        let n_pos = bank.positive_count(y);
        positives.push(n_pos);
        if n_pos == 0 {
            loss.push(0.0);
            continue;
        }
        similarities(queries.row(i), bank, tau, &mut s);
        let lse = logsumexp(&s)?;
        let inv_pos = 1.0 / n_pos as f64;
        let mut pos_sum = 0.0;
        let g = grad.row_mut(i);
        for (k, &sk) in s.iter().enumerate() {
            let mut w = (sk - lse).exp();
            if bank_labels[k] == y {
                pos_sum += sk;
                w -= inv_pos;
            }
            axpy(w / tau, keys.row(k), g);
        }
        loss.push(lse - pos_sum * inv_pos);
    }
    if loss.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(SclTerm {
        loss,
        grad,
        positives,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_batch(batch: usize) -> Result<()> {
    if batch == 0 {
        Err(Error::invalid("empty batch"))
    } else {
        Ok(())
    }
}

/// Averages per-instance gradients over the batch and maps the logit part
/// through the classifier head.
fn finish(
    per_instance_loss: Vec<f64>,
    dlogits: Mat,
    dembeddings: Mat,
    features: &Mat,
    theta: &Mat,
    head: Head,
) -> Result<LossResult> {
    let b = per_instance_loss.len() as f64;
    let (mut grad_features, mut grad_theta) = head.backward(features, theta, &dlogits)?;
    let mut grad_embeddings = dembeddings;
    grad_features.scale(1.0 / b);
    grad_theta.scale(1.0 / b);
    grad_embeddings.scale(1.0 / b);
    let total = mean(&per_instance_loss);
    let finite = total.is_finite()
        && grad_features.is_finite()
        && grad_theta.is_finite()
        && grad_embeddings.is_finite();
    if !finite {
        return Err(Error::NonFinite("loss gradients".into()));
    }
    Ok(LossResult {
        per_instance_loss,
        total,
        grad_features,
        grad_theta,
        grad_embeddings,
    })
}

fn classifier_loss(
    features: &Mat,
    theta: &Mat,
    labels: &[usize],
    profile: &ClassProfile,
    head: Head,
    route: CeRoute,
) -> Result<LossResult> {
    check_batch(labels.len())?;
    let logits = head.logits(features, theta)?;
    let ce = ce_term(&logits, labels, profile, route)?;
    // no embeddings involved; E is unknown here, so the zero gradient is B×0
    finish(ce.loss, ce.dlogits, Mat::zeros(labels.len(), 0), features, theta, head)
}

/// Balanced-Softmax cross-entropy on a linear classifier.
pub fn balanced_ce(features: &Mat, theta: &Mat, labels: &[usize], profile: &ClassProfile) -> Result<LossResult> {
    classifier_loss(features, theta, labels, profile, Head::Linear, CeRoute::LogDomain)
}

/// Balanced-Softmax cross-entropy on a cosine classifier with temperature
/// `gamma_t`, evaluated with the counts as multiplicative weights.
pub fn nce_loss(
    features: &Mat,
    theta: &Mat,
    labels: &[usize],
    profile: &ClassProfile,
    gamma_t: f64,
) -> Result<LossResult> {
    let head = Head::new(HeadKind::Cosine, gamma_t)?;
    classifier_loss(features, theta, labels, profile, head, CeRoute::Ratio)
}

/// The same cosine loss with `ln n_c` moved into the exponent as an additive
/// margin on every logit.
pub fn nce_margin_form(
    features: &Mat,
    theta: &Mat,
    labels: &[usize],
    profile: &ClassProfile,
    gamma_t: f64,
) -> Result<LossResult> {
    let head = Head::new(HeadKind::Cosine, gamma_t)?;
    classifier_loss(features, theta, labels, profile, head, CeRoute::LogDomain)
}

/// Supervised contrastive loss of main-branch queries against the key bank.
///
/// Instances with no positive in the bank contribute zero loss and zero
/// gradient. Only `grad_embeddings` is populated; the feature and classifier
/// gradients are empty (B×0 and 0×0).
pub fn supcon(query_embeddings: &Mat, bank: &KeyBank, labels: &[usize], tau: f64) -> Result<LossResult> {
    check_batch(labels.len())?;
    let scl = scl_term(query_embeddings, bank, labels, tau)?;
    let b = labels.len() as f64;
    let mut grad_embeddings = scl.grad;
    grad_embeddings.scale(1.0 / b);
    Ok(LossResult {
        total: mean(&scl.loss),
        per_instance_loss: scl.loss,
        grad_features: Mat::zeros(labels.len(), 0),
        grad_theta: Mat::zeros(0, 0),
        grad_embeddings,
    })
}

fn check_lambdas(weights: &LossWeights) -> Result<()> {
    let LossWeights {
        lambda_ce,
        lambda_scl,
        ..
    } = *weights;
    if !(lambda_ce >= 0.0 && lambda_scl >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative (lambda_ce {lambda_ce}, lambda_scl {lambda_scl})"
        )));
    }
    if lambda_ce + lambda_scl <= 0.0 {
        return Err(Error::invalid("lambda_ce and lambda_scl are both zero"));
    }
    Ok(())
}

fn check_inputs(inputs: &BatchInputs<'_>) -> Result<()> {
    check_batch(inputs.labels.len())?;
    if inputs.features.rows() != inputs.labels.len() || inputs.embeddings.rows() != inputs.labels.len() {
        return Err(Error::shape(format!(
            "batch of {} labels with {} feature rows and {} embedding rows",
            inputs.labels.len(),
            inputs.features.rows(),
            inputs.embeddings.rows()
        )));
    }
    Ok(())
}

fn summed_with_head(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
    head: Head,
) -> Result<LossEvaluation> {
    check_lambdas(weights)?;
    check_inputs(inputs)?;
    let logits = head.logits(inputs.features, theta)?;
    let mut ce = ce_term(&logits, inputs.labels, profile, CeRoute::LogDomain)?;
    let mut scl = scl_term(inputs.embeddings, bank, inputs.labels, weights.tau)?;
    let per_instance: Vec<f64> = ce
        .loss
        .iter()
        .zip(&scl.loss)
        .map(|(c, s)| weights.lambda_ce * c + weights.lambda_scl * s)
        .collect();
    let (ce_component, scl_component) = (mean(&ce.loss), mean(&scl.loss));
    ce.dlogits.scale(weights.lambda_ce);
    scl.grad.scale(weights.lambda_scl);
    let result = finish(per_instance, ce.dlogits, scl.grad, inputs.features, theta, head)?;
    Ok(LossEvaluation {
        result,
        ce_component,
        scl_component,
    })
}

/// `λ^CE·L_CE + λ^SCL·L_SCL` per instance, linear classifier.
pub fn summed_loss(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
) -> Result<LossResult> {
    summed_with_head(inputs, theta, bank, profile, weights, Head::Linear).map(|e| e.result)
}

fn cibl_with_head(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
    head: Head,
) -> Result<LossEvaluation> {
    check_lambdas(weights)?;
    check_inputs(inputs)?;
    let logits = head.logits(inputs.features, theta)?;
    let mut ce = ce_term(&logits, inputs.labels, profile, CeRoute::LogDomain)?;
    let mut scl = scl_term(inputs.embeddings, bank, inputs.labels, weights.tau)?;
    let (ce_component, scl_component) = (mean(&ce.loss), mean(&scl.loss));
    let mut per_instance = Vec::with_capacity(inputs.labels.len());
    for i in 0..inputs.labels.len() {
        let n_pos = scl.positives[i] as f64;
        let norm = weights.lambda_ce + weights.lambda_scl * n_pos;
        if norm <= 0.0 {
            return Err(Error::invalid(format!(
                "instance {i} has no positives and lambda_ce is zero"
            )));
        }
        // Σ_{j∈P} −log-ratio_j = |P|·L_SCL,i
        let ce_w = weights.lambda_ce / norm;
        let scl_w = weights.lambda_scl * n_pos / norm;
        per_instance.push(ce_w * ce.loss[i] + scl_w * scl.loss[i]);
        ce.dlogits.row_mut(i).iter_mut().for_each(|g| *g *= ce_w);
        scl.grad.row_mut(i).iter_mut().for_each(|g| *g *= scl_w);
    }
    let result = finish(per_instance, ce.dlogits, scl.grad, inputs.features, theta, head)?;
    Ok(LossEvaluation {
        result,
        ce_component,
        scl_component,
    })
}

/// Class-instance-balanced loss: per instance,
/// `(λ^CE·L_CE + λ^SCL·Σ_{j∈P} −log-ratio_j) / (λ^CE + λ^SCL·|P_i⁻|)`.
///
/// With `HeadKind::Cosine` the classifier term is the cosine cross-entropy
/// with temperature `weights.gamma_t` (NCIBL).
pub fn cibl_loss(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
    head_kind: HeadKind,
) -> Result<LossResult> {
    let head = Head::new(head_kind, weights.gamma_t)?;
    cibl_with_head(inputs, theta, bank, profile, weights, head).map(|e| e.result)
}

fn paco_with_head(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
    head: Head,
) -> Result<LossEvaluation> {
    let LossWeights { alpha, beta, tau, .. } = *weights;
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta {beta} must be positive")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha {alpha} must be non-negative")));
    }
    check_tau(tau)?;
    check_inputs(inputs)?;
    check_bank(inputs.embeddings, inputs.labels, bank)?;
    let logits = head.logits(inputs.features, theta)?;
    let c = profile.num_classes();
    if logits.cols() != c {
        return Err(Error::shape(format!("{} logits for {c} classes", logits.cols())));
    }
    check_labels(inputs.labels, c)?;
    let log_n = profile.log_counts();
    let keys = bank.keys();
    let bank_labels = bank.labels();
    let n_keys = bank.len();

    let b = inputs.labels.len();
    let mut per_instance = Vec::with_capacity(b);
    let mut dlogits = Mat::zeros(b, c);
    let mut dz = Mat::zeros(b, inputs.embeddings.cols());
    let mut exponents = Vec::with_capacity(n_keys + c);
    for (i, &y) in inputs.labels.iter().enumerate() {
        // one softmax over [z·k/τ for every key] ++ [logit_c + ln n_c]
        similarities(inputs.embeddings.row(i), bank, tau, &mut exponents);
        exponents.extend(logits.row(i).iter().zip(&log_n).map(|(l, ln)| l + ln));
        let lse = logsumexp(&exponents)?;
        let n_pos = bank.positive_count(y) as f64;
        let gamma_i = 1.0 / (alpha * n_pos + beta);
        let mut pos_sum = 0.0;
        let g = dz.row_mut(i);
        for k in 0..n_keys {
            let mut w = (exponents[k] - lse).exp();
            if bank_labels[k] == y {
                pos_sum += exponents[k];
                w -= gamma_i * alpha;
            }
            axpy(w / tau, keys.row(k), g);
        }
        let dl = dlogits.row_mut(i);
        for (cc, d) in dl.iter_mut().enumerate() {
            *d = (exponents[n_keys + cc] - lse).exp();
        }
        dl[y] -= gamma_i * beta;
        // γ_i(α|P| + β) = 1, so the shared denominator enters with weight 1
        per_instance.push(lse - gamma_i * (alpha * pos_sum + beta * exponents[n_keys + y]));
    }
    if per_instance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PaCo loss".into()));
    }
    let ce_component = mean(&ce_term(&logits, inputs.labels, profile, CeRoute::LogDomain)?.loss);
    let scl_component = mean(&scl_term(inputs.embeddings, bank, inputs.labels, tau)?.loss);
    let result = finish(per_instance, dlogits, dz, inputs.features, theta, head)?;
    Ok(LossEvaluation {
        result,
        ce_component,
        scl_component,
    })
}

/// PaCo: classifier logits `η_{i,c} = n_c·e^{xᵀθ_c}` join the contrastive
/// softmax as extra candidates, weighted `α` for contrastive positives and
/// `β` for the classifier positive, normalized by `1/(α|P_i⁻| + β)`.
pub fn paco_loss(
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: &KeyBank,
    profile: &ClassProfile,
    weights: &LossWeights,
) -> Result<LossResult> {
    paco_with_head(inputs, theta, bank, profile, weights, Head::Linear).map(|e| e.result)
}

/// Evaluates the loss a training config selects, on the head it resolves to.
///
/// `bank` may be `None` only for [`LossKind::Ce`].
pub fn evaluate_loss(
    kind: LossKind,
    head_kind: HeadKind,
    inputs: &BatchInputs<'_>,
    theta: &Mat,
    bank: Option<&KeyBank>,
    profile: &ClassProfile,
    weights: &LossWeights,
) -> Result<LossEvaluation> {
    let head = Head::new(kind.resolve_head(head_kind), weights.gamma_t)?;
    let need_bank = || bank.ok_or(Error::EmptyBank);
    match kind {
        LossKind::Ce => {
            check_inputs(inputs)?;
            let logits = head.logits(inputs.features, theta)?;
            let ce = ce_term(&logits, inputs.labels, profile, CeRoute::LogDomain)?;
            let scl_component = match bank {
                Some(bank) => mean(&scl_term(inputs.embeddings, bank, inputs.labels, weights.tau)?.loss),
                None => 0.0,
            };
            let ce_component = mean(&ce.loss);
            let zero_dz = Mat::zeros(inputs.labels.len(), inputs.embeddings.cols());
            let result = finish(ce.loss, ce.dlogits, zero_dz, inputs.features, theta, head)?;
            Ok(LossEvaluation {
                result,
                ce_component,
                scl_component,
            })
        }
        LossKind::Summed => summed_with_head(inputs, theta, need_bank()?, profile, weights, head),
        LossKind::Paco => paco_with_head(inputs, theta, need_bank()?, profile, weights, head),
        LossKind::Cibl | LossKind::Ncibl => cibl_with_head(inputs, theta, need_bank()?, profile, weights, head),
    }
}

//! Finite-difference verification of every analytic loss gradient and of
//! the backward pass through the full encoder chain.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive_bank::KeyBank;
use crate::error::{Error, Result};
use crate::losses::{
    balanced_ce, cibl_loss, evaluate_loss, nce_loss, nce_margin_form, paco_loss, summed_loss, supcon, BatchInputs,
    ClassProfile, LossKind, LossResult, LossWeights,
};
use crate::numerics::{finite_diff_grad, l2_normalize, relative_error, Mat, NORM_EPS};
use crate::trainer::model::{backward, forward, HeadKind, ModelParams};

pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so all-zero gradients compare
/// by absolute difference.
pub const ERROR_FLOOR: f64 = 1e-8;

/// What a check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    BalancedCe,
    Nce,
    NceMargin,
    Supcon,
    Summed,
    Paco,
    Cibl,
    Ncibl,
    /// The loss a config selects, differentiated w.r.t. every model
    /// parameter through encoder, projection, normalization and head.
    Chain(LossKind),
}

impl Target {
    pub fn all() -> Vec<Target> {
        let mut v = vec![
            Target::BalancedCe,
            Target::Nce,
            Target::NceMargin,
            Target::Supcon,
            Target::Summed,
            Target::Paco,
            Target::Cibl,
            Target::Ncibl,
        ];
        v.extend(LossKind::ALL.iter().map(|&k| Target::Chain(k)));
        v
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::all()
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck target {s:?}")))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::BalancedCe => f.write_str("balanced_ce"),
            Target::Nce => f.write_str("nce"),
            Target::NceMargin => f.write_str("nce_margin"),
            Target::Supcon => f.write_str("supcon"),
            Target::Summed => f.write_str("summed"),
            Target::Paco => f.write_str("paco"),
            Target::Cibl => f.write_str("cibl"),
            Target::Ncibl => f.write_str("ncibl"),
            Target::Chain(k) => write!(f, "chain/{}", k.name()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Scales every analytic gradient by 1.01 before comparing; a correct
    /// checker must then fail.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub target: Target,
    pub trial: usize,
    pub seed: u64,
    /// Worst relative error over the differentiated inputs.
    pub max_rel_err: f64,
    /// Which input the worst error came from.
    pub input: &'static str,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub outcomes: Vec<CheckOutcome>,
    pub tolerance: f64,
    pub warning: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    /// Largest relative error seen for `target`.
    pub fn worst(&self, target: Target) -> Option<f64> {
        self.outcomes
            .iter()
            .filter(|o| o.target == target)
            .map(|o| o.max_rel_err)
            .reduce(f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(w) = &self.warning {
            out.push_str(&format!("warning: {w}\n"));
        }
        for t in Target::all() {
            let n = self.outcomes.iter().filter(|o| o.target == t).count();
            if n == 0 {
                continue;
            }
            let bad = self.failures().filter(|o| o.target == t).count();
            let status = if bad == 0 { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<18} {status:<4} trials={n:<3} max_rel_err={:.3e}\n",
                t.to_string(),
                self.worst(t).unwrap_or(0.0)
            ));
        }
        for o in self.failures() {
            out.push_str(&format!(
                "  failed: {} trial {} seed {} input {} rel_err {:.3e} > {:.1e}\n",
                o.target, o.trial, o.seed, o.input, o.max_rel_err, self.tolerance
            ));
        }
        out
    }
}

/// A small random loss-level problem.
#[derive(Debug, Clone)]
pub struct Case {
    pub features: Mat,
    pub theta: Mat,
    pub embeddings: Mat,
    pub labels: Vec<usize>,
    pub bank: KeyBank,
    pub profile: ClassProfile,
    pub weights: LossWeights,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).expect("sized buffer")
}

fn unit_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let raw = uniform_mat(rng, rows, cols);
    let normalized: Vec<Vec<f64>> = raw.row_iter().map(|r| l2_normalize(r, NORM_EPS)).collect();
    Mat::from_rows(&normalized).expect("rectangular rows")
}

/// B ≤ 4, C ≤ 5, D and E ≤ 6, at most 8 bank keys.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..=6);
    let e = rng.random_range(2..=6);
    let keys = rng.random_range(1..=8);
    let features = uniform_mat(&mut rng, b, d);
    let theta = uniform_mat(&mut rng, d, c);
    let embeddings = unit_mat(&mut rng, b, e);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    // the first key shares instance 0's label so at least one |P| > 0
    let mut key_labels: Vec<usize> = (0..keys).map(|_| rng.random_range(0..c)).collect();
    key_labels[0] = labels[0];
    let bank = KeyBank::from_keys(unit_mat(&mut rng, keys, e), key_labels).expect("consistent bank");
    let profile = ClassProfile::new((0..c).map(|_| rng.random_range(1..=500)).collect()).expect("valid counts");
    let weights = LossWeights {
        lambda_ce: rng.random_range(0.5..1.5),
        lambda_scl: rng.random_range(0.01..0.5),
        alpha: rng.random_range(0.5..1.5),
        beta: rng.random_range(0.5..1.5),
        tau: rng.random_range(0.2..1.0),
        gamma_t: rng.random_range(0.2..1.0),
    };
    Case {
        features,
        theta,
        embeddings,
        labels,
        bank,
        profile,
        weights,
    }
}

fn eval_target(target: Target, case: &Case, features: &Mat, theta: &Mat, embeddings: &Mat) -> Result<LossResult> {
    let inputs = BatchInputs {
        features,
        labels: &case.labels,
        embeddings,
    };
    let (p, w) = (&case.profile, &case.weights);
    match target {
        Target::BalancedCe => balanced_ce(features, theta, &case.labels, p),
        Target::Nce => nce_loss(features, theta, &case.labels, p, w.gamma_t),
        Target::NceMargin => nce_margin_form(features, theta, &case.labels, p, w.gamma_t),
        Target::Supcon => supcon(embeddings, &case.bank, &case.labels, w.tau),
        Target::Summed => summed_loss(&inputs, theta, &case.bank, p, w),
        Target::Paco => paco_loss(&inputs, theta, &case.bank, p, w),
        Target::Cibl => cibl_loss(&inputs, theta, &case.bank, p, w, HeadKind::Linear),
        Target::Ncibl => cibl_loss(&inputs, theta, &case.bank, p, w, HeadKind::Cosine),
        Target::Chain(_) => Err(Error::invalid("chain targets are checked on model parameters")),
    }
}

fn uses_classifier(target: Target) -> bool {
    target != Target::Supcon
}

fn uses_embeddings(target: Target) -> bool {
    matches!(
        target,
        Target::Supcon | Target::Summed | Target::Paco | Target::Cibl | Target::Ncibl
    )
}

fn compare(analytic: &[f64], numeric: &[f64], inject_fault: bool) -> f64 {
    if inject_fault {
        let faulty: Vec<f64> = analytic.iter().map(|g| g * 1.01).collect();
        relative_error(&faulty, numeric, ERROR_FLOOR)
    } else {
        relative_error(analytic, numeric, ERROR_FLOOR)
    }
}

/// Worst relative error over the inputs `target` consumes.
pub fn check_case(target: Target, case: &Case, options: &GradcheckOptions) -> Result<(f64, &'static str)> {
    let h = options.step;
    let r = eval_target(target, case, &case.features, &case.theta, &case.embeddings)?;
    let mut worst = (0.0_f64, "none");
    let mut record = |err: f64, name: &'static str| {
        if err > worst.0 || worst.1 == "none" {
            worst = (err, name);
        }
    };

    if uses_classifier(target) {
        let (rows, cols) = case.features.shape();
        let numeric = finite_diff_grad(
            |x| {
                let f = Mat::from_vec(rows, cols, x.to_vec()).expect("sized");
                eval_target(target, case, &f, &case.theta, &case.embeddings).map_or(f64::NAN, |r| r.total)
            },
            case.features.as_slice(),
            h,
        )?;
        record(compare(r.grad_features.as_slice(), &numeric, options.inject_fault), "features");

        let (rows, cols) = case.theta.shape();
        let numeric = finite_diff_grad(
            |x| {
                let t = Mat::from_vec(rows, cols, x.to_vec()).expect("sized");
                eval_target(target, case, &case.features, &t, &case.embeddings).map_or(f64::NAN, |r| r.total)
            },
            case.theta.as_slice(),
            h,
        )?;
        record(compare(r.grad_theta.as_slice(), &numeric, options.inject_fault), "theta");
    }
    if uses_embeddings(target) {
        let (rows, cols) = case.embeddings.shape();
        let numeric = finite_diff_grad(
            |x| {
                let z = Mat::from_vec(rows, cols, x.to_vec()).expect("sized");
                eval_target(target, case, &case.features, &case.theta, &z).map_or(f64::NAN, |r| r.total)
            },
            case.embeddings.as_slice(),
            h,
        )?;
        record(compare(r.grad_embeddings.as_slice(), &numeric, options.inject_fault), "embeddings");
    }
    Ok(worst)
}

/// A small model, input batch and key bank for the chain check.
#[derive(Debug, Clone)]
pub struct ChainCase {
    pub params: ModelParams,
    pub batch: Mat,
    pub labels: Vec<usize>,
    pub bank: KeyBank,
    pub profile: ClassProfile,
    pub weights: LossWeights,
}

pub fn random_chain_case(seed: u64) -> Result<ChainCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let input_dim = rng.random_range(2..=5);
    let width = rng.random_range(2..=6);
    let e = rng.random_range(2..=6);
    let keys = rng.random_range(1..=8);
    let mut params = ModelParams::init(input_dim, &[width], e, c, &mut rng)?;
    // a generic point: zero biases with a dead ReLU row would leave an
    // embedding of zero norm, where normalization is not differentiable
    let flat: Vec<f64> = (0..params.num_parameters()).map(|_| rng.random_range(-1.0..1.0)).collect();
    params.assign_flat(&flat)?;
    let batch = uniform_mat(&mut rng, b, input_dim);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let mut key_labels: Vec<usize> = (0..keys).map(|_| rng.random_range(0..c)).collect();
    key_labels[0] = labels[0];
    let bank = KeyBank::from_keys(unit_mat(&mut rng, keys, e), key_labels)?;
    let profile = ClassProfile::new((0..c).map(|_| rng.random_range(1..=500)).collect())?;
    let weights = LossWeights {
        tau: rng.random_range(0.2..1.0),
        gamma_t: rng.random_range(0.2..1.0),
        lambda_scl: rng.random_range(0.01..0.5),
        ..LossWeights::default()
    };
    Ok(ChainCase {
        params,
        batch,
        labels,
        bank,
        profile,
        weights,
    })
}

fn chain_loss(kind: LossKind, case: &ChainCase, params: &ModelParams, with_grads: bool) -> Result<(f64, Option<ModelParams>)> {
    let out = forward(params, &case.batch, kind.resolve_head(HeadKind::Linear), case.weights.gamma_t)?;
    let inputs = BatchInputs {
        features: &out.features,
        labels: &case.labels,
        embeddings: &out.embeddings,
    };
    let eval = evaluate_loss(
        kind,
        HeadKind::Linear,
        &inputs,
        &params.classifier,
        Some(&case.bank),
        &case.profile,
        &case.weights,
    )?;
    let r = &eval.result;
    if !with_grads {
        return Ok((r.total, None));
    }
    let grads = backward(params, &out.cache, &r.grad_features, &r.grad_theta, &r.grad_embeddings)?;
    Ok((r.total, Some(grads)))
}

pub fn check_chain(kind: LossKind, case: &ChainCase, options: &GradcheckOptions) -> Result<f64> {
    let (_, grads) = chain_loss(kind, case, &case.params, true)?;
    let analytic = grads.expect("gradients computed").flatten();
    let mut scratch = case.params.clone();
    let numeric = finite_diff_grad(
        |x| {
            if scratch.assign_flat(x).is_err() {
                return f64::NAN;
            }
            chain_loss(kind, case, &scratch, false).map_or(f64::NAN, |(l, _)| l)
        },
        &case.params.flatten(),
        options.step,
    )?;
    Ok(compare(&analytic, &numeric, options.inject_fault))
}

fn trial_seed(base: u64, target_index: usize, trial: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((target_index as u64) << 32)
        .wrapping_add(trial as u64)
}

/// Runs `options.trials` random trials for every target.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    run_targets(&Target::all(), options)
}

pub fn run_targets(targets: &[Target], options: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(options.step > 0.0) || !(options.tolerance > 0.0) {
        return Err(Error::invalid("step and tolerance must be positive"));
    }
    let all = Target::all();
    let mut outcomes = Vec::new();
    for &target in targets {
        let ti = all.iter().position(|t| *t == target).expect("known target");
        for trial in 0..options.trials {
            let seed = trial_seed(options.seed, ti, trial);
            let (err, input) = match target {
                Target::Chain(kind) => (check_chain(kind, &random_chain_case(seed)?, options)?, "parameters"),
                _ => check_case(target, &random_case(seed), options)?,
            };
            outcomes.push(CheckOutcome {
                target,
                trial,
                seed,
                max_rel_err: err,
                input,
                passed: err <= options.tolerance,
            });
        }
    }
    let warning = (options.trials == 0).then(|| "0 trials requested; nothing was checked".to_string());
    Ok(GradcheckReport {
        outcomes,
        tolerance: options.tolerance,
        warning,
    })
}

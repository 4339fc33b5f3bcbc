//! Encoder, projection head and classifier, with forward caches and the
//! hand-written backward pass through the whole chain.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, norm2, Mat, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `pre` and output `out`.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Which classifier sits on top of the encoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Logits `xᵀθ_c`.
    Linear,
    /// Logits `cos(x, θ_c) / γ`.
    Cosine,
}

/// Fully connected layer computing `act(x·W + b)` with `W` stored in×out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(format!(
                "bias of length {} for a {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// He-style initialization: weights ~ N(0, 2/fan_in), zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Mat::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Mat::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs and pre-activations of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    output: Mat,
}

impl MlpCache {
    pub fn output(&self) -> &Mat {
        &self.output
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer output {} feeds layer input {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Chain of layers `widths[0] → widths[1] → …`, all using `activation`
    /// except that `last` overrides the final layer's activation.
    pub fn init<R: Rng>(widths: &[usize], activation: Activation, last: Activation, rng: &mut R) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { activation };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(Dense::in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(Dense::out_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn forward(&self, input: &Mat) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut out = z.clone();
            out.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Output only, no cache.
    pub fn apply(&self, input: &Mat) -> Result<Mat> {
        let mut h = input.clone();
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Returns (parameter gradients, gradient w.r.t. the input).
    pub fn backward(&self, cache: &MlpCache, grad_output: &Mat) -> Result<(Mlp, Mat)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::invalid("stale forward cache: layer count differs"));
        }
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} for output {:?}",
                grad_output.shape(),
                cache.output.shape()
            )));
        }
        let mut grads = self.zeros_like();
        let mut upstream = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            if pre.cols() != layer.out_dim() {
                return Err(Error::invalid("stale forward cache: layer width differs"));
            }
            // through the activation
            let mut delta = upstream;
            let out_of = |r: usize, c: usize| layer.activation.apply(pre[(r, c)]);
            for r in 0..delta.rows() {
                for c in 0..delta.cols() {
                    delta[(r, c)] *= layer.activation.derivative(pre[(r, c)], out_of(r, c));
                }
            }
            let g = &mut grads.layers[l];
            g.weight = cache.inputs[l].t_matmul(&delta)?;
            for r in 0..delta.rows() {
                for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            upstream = delta.matmul_t(&layer.weight)?;
        }
        Ok((grads, upstream))
    }
}

/// Backpropagates through row-wise `z = v / max(‖v‖, eps)`.
pub fn normalize_rows_backward(pre_norm: &Mat, grad_normalized: &Mat) -> Mat {
    let mut out = Mat::zeros(pre_norm.rows(), pre_norm.cols());
    for r in 0..pre_norm.rows() {
        let v = pre_norm.row(r);
        let g = grad_normalized.row(r);
        let n = norm2(v);
        let dst = out.row_mut(r);
        if n < NORM_EPS {
            for (d, gi) in dst.iter_mut().zip(g) {
                *d = gi / NORM_EPS;
            }
            continue;
        }
        // (I − u uᵀ) g / ‖v‖
        let proj = dot(v, g) / (n * n);
        for ((d, gi), vi) in dst.iter_mut().zip(g).zip(v) {
            *d = (gi - proj * vi) / n;
        }
    }
    out
}

pub fn normalize_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let u = l2_normalize(m.row(r), NORM_EPS);
        out.row_mut(r).copy_from_slice(&u);
    }
    out
}

/// Encoder, projection head and classifier `Θ` (D×C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub projection: Mlp,
    pub classifier: Mat,
}

impl ModelParams {
    pub fn new(encoder: Mlp, projection: Mlp, classifier: Mat) -> Result<Self> {
        let d = encoder.out_dim().ok_or_else(|| Error::invalid("encoder has no layers"))?;
        if projection.in_dim() != Some(d) {
            return Err(Error::shape(format!(
                "projection input {:?} does not match feature dim {d}",
                projection.in_dim()
            )));
        }
        if classifier.rows() != d {
            return Err(Error::shape(format!(
                "classifier has {} rows, feature dim is {d}",
                classifier.rows()
            )));
        }
        Ok(Self {
            encoder,
            projection,
            classifier,
        })
    }

    /// Encoder `input → widths… (ReLU)`, projection `D → D (ReLU) → E`,
    /// classifier `D × C` with small Gaussian entries.
    pub fn init<R: Rng>(
        input_dim: usize,
        encoder_widths: &[usize],
        embedding_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if encoder_widths.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(encoder_widths);
        let encoder = Mlp::init(&widths, Activation::Relu, Activation::Relu, rng);
        let d = *encoder_widths.last().expect("non-empty");
        let projection = Mlp::init(&[d, d, embedding_dim], Activation::Relu, Activation::Identity, rng);
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        let data = (0..d * num_classes).map(|_| normal.sample(rng)).collect();
        let classifier = Mat::from_vec(d, num_classes, data)?;
        Self::new(encoder, projection, classifier)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            projection: self.projection.zeros_like(),
            classifier: Mat::zeros(self.classifier.rows(), self.classifier.cols()),
        }
    }

    /// Every parameter tensor in a fixed order: encoder (W, b)…,
    /// projection (W, b)…, classifier.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter().chain(&self.projection.layers) {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.classifier.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .layers
            .iter_mut()
            .chain(self.projection.layers.iter_mut())
        {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier.as_mut_slice());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Everything the backward pass needs from one main-branch forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: MlpCache,
    projection: MlpCache,
    batch: usize,
}

/// Main-branch outputs for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Encoder features `x` (B×D).
    pub features: Mat,
    /// Unit-norm embeddings `z` (B×E).
    pub embeddings: Mat,
    /// Linear logits `xΘ` or scaled cosine similarities, per head.
    pub logits: Mat,
    pub cache: ForwardCache,
}

/// Cosine similarity matrix between rows of `x` and columns of `theta`.
pub fn cosine_similarities(features: &Mat, theta: &Mat) -> Result<Mat> {
    let xn = normalize_rows(features);
    let tn = normalize_rows(&theta.transpose());
    xn.matmul_t(&tn)
}

pub fn classifier_outputs(features: &Mat, theta: &Mat, head: HeadKind, gamma_t: f64) -> Result<Mat> {
    match head {
        HeadKind::Linear => features.matmul(theta),
        HeadKind::Cosine => {
            let mut s = cosine_similarities(features, theta)?;
            s.scale(1.0 / gamma_t);
            Ok(s)
        }
    }
}

pub fn forward(params: &ModelParams, batch: &Mat, head: HeadKind, gamma_t: f64) -> Result<ForwardOutput> {
    let encoder = params.encoder.forward(batch)?;
    let features = encoder.output().clone();
    let projection = params.projection.forward(&features)?;
    let embeddings = normalize_rows(projection.output());
    let logits = classifier_outputs(&features, &params.classifier, head, gamma_t)?;
    Ok(ForwardOutput {
        features,
        embeddings,
        logits,
        cache: ForwardCache {
            encoder,
            projection,
            batch: batch.rows(),
        },
    })
}

/// Embeddings from an encoder/projection pair, no cache.
pub fn embed(encoder: &Mlp, projection: &Mlp, batch: &Mat) -> Result<Mat> {
    let x = encoder.apply(batch)?;
    Ok(normalize_rows(&projection.apply(&x)?))
}

/// Chain rule from loss gradients w.r.t. features, classifier and
/// embeddings back to every main-branch parameter.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_features: &Mat,
    grad_theta: &Mat,
    grad_embeddings: &Mat,
) -> Result<ModelParams> {
    if grad_features.rows() != cache.batch || grad_embeddings.rows() != cache.batch {
        return Err(Error::invalid(format!(
            "stale forward cache: cached batch {} vs gradients for {}",
            cache.batch,
            grad_features.rows()
        )));
    }
    if grad_theta.shape() != params.classifier.shape() {
        return Err(Error::shape(format!(
            "classifier gradient {:?} for classifier {:?}",
            grad_theta.shape(),
            params.classifier.shape()
        )));
    }
    let grad_proj_out = normalize_rows_backward(cache.projection.output(), grad_embeddings);
    let (projection, grad_from_proj) = params.projection.backward(&cache.projection, &grad_proj_out)?;
    let mut grad_x = grad_features.clone();
    grad_x.add_scaled(1.0, &grad_from_proj)?;
    let (encoder, _) = params.encoder.backward(&cache.encoder, &grad_x)?;
    Ok(ModelParams {
        encoder,
        projection,
        classifier: grad_theta.clone(),
    })
}

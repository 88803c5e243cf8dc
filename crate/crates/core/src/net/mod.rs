//! A minimal deterministic differentiable network.
//!
//! Networks are a flat sequence of layers ending in softmax, with one tanh
//! layer designated as the feature layer: everything up to and including it
//! is the feature extractor, everything after it is the classifier head.
//! The training objective combines per-sample weighted cross-entropy with a
//! quantization term that pushes tanh features toward the corners of the
//! (-1, 1) hypercube:
//!
//! ```text
//! total = sum_i w_i * (-ln p_i[y_i])  +  lambda * ( -sum_i ||features_i||^2 )
//! ```
//!
//! Gradients are exact reverse-mode derivatives of `total` with respect to
//! every parameter; the sample weights are treated as constants. All
//! computation is in `f64` and fully determined by the configuration seed.

mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::SampleWeights;
use crate::math;
use crate::tensor::Tensor;

use layers::{backward_layer, forward_layer, LayerCache};

/// One layer of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    Tanh,
    Softmax,
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Shapes of this layer's parameter tensors (weights, then bias).
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { in_dim, out_dim } => {
                vec![vec![*out_dim, *in_dim], vec![*out_dim]]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
            ],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { in_dim, .. } => *in_dim,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Network architecture plus the seed its parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    /// Index of the tanh layer whose output is the extracted feature vector.
    pub feature_layer_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("network must contain at least one layer")]
    EmptyNetwork,
    #[error("feature layer index {0} is out of range")]
    FeatureLayerOutOfRange(usize),
    #[error("layer {0} is designated as the feature layer but is not tanh")]
    FeatureLayerNotTanh(usize),
    #[error("the final layer must be softmax")]
    FinalLayerNotSoftmax,
    #[error("softmax is only supported as the final layer, found one at layer {0}")]
    SoftmaxNotLast(usize),
    #[error("layer {index}: {message}")]
    BadLayerSpec { index: usize, message: String },
    #[error("layer {index}: shape mismatch: {message}")]
    ShapeMismatch { index: usize, message: String },
    #[error("input batch contains non-finite values")]
    NonFiniteInput,
    #[error("gradients contain non-finite values")]
    NonFiniteGradient,
    #[error("{0}")]
    BadLabels(String),
    #[error("sample weights are off the simplex by {0:.3e} (tolerance 1e-8)")]
    WeightsOffSimplex(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("gradient tensors do not match the network parameters")]
    GradientShapeMismatch,
}

/// What the chain validator knows about the per-sample shape between layers.
enum ChainState {
    /// Flattened width is known exactly.
    Vector(usize),
    /// Channel count is known; spatial extent is only known at forward time.
    Spatial(usize),
    /// Nothing known yet (before the first size-carrying layer).
    Unknown,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::EmptyNetwork);
        }
        if self.feature_layer_index >= self.layers.len() {
            return Err(NetError::FeatureLayerOutOfRange(self.feature_layer_index));
        }
        if !matches!(self.layers[self.feature_layer_index], LayerSpec::Tanh) {
            return Err(NetError::FeatureLayerNotTanh(self.feature_layer_index));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(NetError::FinalLayerNotSoftmax);
        }

        let mut state = ChainState::Unknown;
        for (index, layer) in self.layers.iter().enumerate() {
            let bad = |message: String| NetError::BadLayerSpec { index, message };
            match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if *in_dim == 0 || *out_dim == 0 {
                        return Err(bad("dense dimensions must be positive".into()));
                    }
                    if let ChainState::Vector(d) = state {
                        if d != *in_dim {
                            return Err(NetError::ShapeMismatch {
                                index,
                                message: format!(
                                    "dense expects {in_dim} inputs but the previous layer produces {d}"
                                ),
                            });
                        }
                    }
                    state = ChainState::Vector(*out_dim);
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("conv sizes must be positive".into()));
                    }
                    match state {
                        ChainState::Vector(_) => {
                            return Err(bad("conv2d cannot follow a dense output".into()));
                        }
                        ChainState::Spatial(c) if c != *in_channels => {
                            return Err(NetError::ShapeMismatch {
                                index,
                                message: format!(
                                    "conv2d expects {in_channels} channels but the previous layer produces {c}"
                                ),
                            });
                        }
                        _ => {}
                    }
                    state = ChainState::Spatial(*out_channels);
                }
                LayerSpec::Maxpool2d { window, stride } => {
                    if *window == 0 || *stride == 0 {
                        return Err(bad("pool sizes must be positive".into()));
                    }
                    if matches!(state, ChainState::Vector(_)) {
                        return Err(bad("maxpool2d cannot follow a dense output".into()));
                    }
                }
                LayerSpec::Relu | LayerSpec::Tanh => {}
                LayerSpec::Softmax => {
                    if index + 1 != self.layers.len() {
                        return Err(NetError::SoftmaxNotLast(index));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A configured network with its parameter tensors.
///
/// Parameters are stored in layer order, weights before bias; the split
/// between feature-extractor and head parameters falls at
/// `feature_layer_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Tensor>,
}

/// One gradient tensor per parameter tensor, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

/// The decomposed training objective.
///
/// `total = weighted_ce + lambda * quantization`; `quantization` is the
/// negated sum of squared feature norms, so it becomes more negative as
/// features approach saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub weighted_ce: f64,
    pub quantization: f64,
    pub lambda: f64,
}

/// Builds a network, drawing every parameter from a ChaCha stream seeded by
/// `config.seed`: uniform in `[-s, s)` with `s = 1/sqrt(fan_in)` of the layer.
pub fn build_network(config: NetworkConfig) -> Result<Network, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    for layer in &config.layers {
        if !layer.has_params() {
            continue;
        }
        let scale = 1.0 / math::sqrt(layer.fan_in() as f64);
        for shape in layer.param_shapes() {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(rng.random_range(-scale..scale));
            }
            params.push(Tensor::new(shape, data).expect("init values are finite"));
        }
    }
    Ok(Network { config, params })
}

/// Everything the backward pass needs from a forward evaluation.
struct ForwardTrace {
    /// `activations[i]` is the output of layer `i`.
    activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
}

impl Network {
    /// Index into `params` of the first parameter tensor owned by `layer`.
    fn param_offset(&self, layer: usize) -> usize {
        self.config.layers[..layer]
            .iter()
            .map(|l| l.param_shapes().len())
            .sum()
    }

    fn layer_params(&self, layer: usize) -> (Option<&Tensor>, Option<&Tensor>) {
        if self.config.layers[layer].has_params() {
            let off = self.param_offset(layer);
            (Some(&self.params[off]), Some(&self.params[off + 1]))
        } else {
            (None, None)
        }
    }

    /// Number of parameter tensors belonging to the feature extractor.
    pub fn extractor_param_count(&self) -> usize {
        self.param_offset(self.config.feature_layer_index + 1)
    }

    /// Parameter tensors of the feature extractor (layers up to and
    /// including the feature layer).
    pub fn extractor_params(&self) -> &[Tensor] {
        &self.params[..self.extractor_param_count()]
    }

    /// Parameter tensors of the classifier head (layers after the feature
    /// layer).
    pub fn head_params(&self) -> &[Tensor] {
        &self.params[self.extractor_param_count()..]
    }

    /// Total scalar parameter count.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Output dimension of the softmax head.
    pub fn num_classes(&self) -> usize {
        // The softmax preserves width, so walk back to the last sized layer.
        for layer in self.config.layers.iter().rev() {
            match layer {
                LayerSpec::Dense { out_dim, .. } => return *out_dim,
                LayerSpec::Conv2d { .. } | LayerSpec::Maxpool2d { .. } => break,
                _ => {}
            }
        }
        0
    }

    fn forward_trace(&self, batch: &Tensor) -> Result<ForwardTrace, NetError> {
        if !batch.all_finite() {
            return Err(NetError::NonFiniteInput);
        }
        let mut activations = Vec::with_capacity(self.config.layers.len());
        let mut caches = Vec::with_capacity(self.config.layers.len());
        let mut current = batch;
        for (index, layer) in self.config.layers.iter().enumerate() {
            let (w, b) = self.layer_params(index);
            let (out, cache) = forward_layer(index, layer, current, w, b)?;
            activations.push(out);
            caches.push(cache);
            current = activations.last().expect("just pushed");
        }
        Ok(ForwardTrace {
            activations,
            caches,
        })
    }

    /// Runs the network on a batch, returning the feature-layer output and
    /// the softmax probabilities.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor), NetError> {
        let mut trace = self.forward_trace(batch)?;
        let probs = trace.activations.pop().expect("network is non-empty");
        let features = if self.config.feature_layer_index == self.config.layers.len() - 1 {
            probs.clone()
        } else {
            trace
                .activations
                .swap_remove(self.config.feature_layer_index)
        };
        Ok((features, probs))
    }

    /// Functional SGD update: returns a new network with `p - lr * g`.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<Network, NetError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NetError::BadLearningRate(lr));
        }
        if grads.0.len() != self.params.len()
            || grads
                .0
                .iter()
                .zip(&self.params)
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(NetError::GradientShapeMismatch);
        }
        if grads.0.iter().any(|g| !g.all_finite()) {
            return Err(NetError::NonFiniteGradient);
        }
        let mut next = self.clone();
        for (p, g) in next.params.iter_mut().zip(&grads.0) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(next)
    }
}

fn check_loss_inputs(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    weights: &SampleWeights,
    lambda: f64,
) -> Result<(), NetError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(NetError::BadLambda(lambda));
    }
    let n = batch.rows();
    if labels.len() != n {
        return Err(NetError::BadLabels(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    let classes = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NetError::BadLabels(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if weights.len() != n {
        return Err(NetError::BadLabels(format!(
            "expected {n} sample weights, got {}",
            weights.len()
        )));
    }
    let gap = math::abs(weights.as_slice().iter().sum::<f64>() - 1.0);
    if gap > 1e-8 {
        return Err(NetError::WeightsOffSimplex(gap));
    }
    Ok(())
}

fn breakdown_from_trace(
    net: &Network,
    trace: &ForwardTrace,
    labels: &[usize],
    weights: &SampleWeights,
    lambda: f64,
) -> LossBreakdown {
    // A valid config always has a tanh feature layer before the softmax,
    // so there are at least two layers and the logits sit one below the top.
    let depth = net.config.layers.len();
    let logits = &trace.activations[depth - 2];
    let features = &trace.activations[net.config.feature_layer_index];
    let w = weights.as_slice();

    let classes = logits.row_len();
    let mut weighted_ce = 0.0;
    for (i, (&y, &wi)) in labels.iter().zip(w).enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += math::exp(z - max);
        }
        let lse = max + math::ln(sum);
        debug_assert!(y < classes);
        weighted_ce += wi * (lse - row[y]);
    }

    let quantization = -features.data().iter().map(|f| f * f).sum::<f64>();
    LossBreakdown {
        total: weighted_ce + lambda * quantization,
        weighted_ce,
        quantization,
        lambda,
    }
}

/// Evaluates the objective without materializing gradients.
pub fn loss_only(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    weights: &SampleWeights,
    lambda: f64,
) -> Result<LossBreakdown, NetError> {
    check_loss_inputs(net, batch, labels, weights, lambda)?;
    let trace = net.forward_trace(batch)?;
    Ok(breakdown_from_trace(net, &trace, labels, weights, lambda))
}

/// Evaluates the objective and its exact reverse-mode gradient with respect
/// to every parameter. The sample weights are constants: no gradient flows
/// into them.
pub fn loss_and_grad(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    weights: &SampleWeights,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients), NetError> {
    check_loss_inputs(net, batch, labels, weights, lambda)?;
    let trace = net.forward_trace(batch)?;
    let breakdown = breakdown_from_trace(net, &trace, labels, weights, lambda);

    let depth = net.config.layers.len();
    let probs = &trace.activations[depth - 1];
    let n = batch.rows();
    let classes = probs.row_len();
    let w = weights.as_slice();

    // d total / d logits for the fused softmax + weighted cross-entropy head.
    let mut grad = Tensor::zeros(vec![n, classes]);
    {
        let g = grad.data_mut();
        for i in 0..n {
            let p = probs.row(i);
            let row = &mut g[i * classes..(i + 1) * classes];
            for (k, (gv, &pv)) in row.iter_mut().zip(p).enumerate() {
                *gv = w[i] * (pv - if k == labels[i] { 1.0 } else { 0.0 });
            }
        }
    }

    let mut grads: Vec<Tensor> = net
        .params
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();

    // Walk backwards from the layer below the softmax head.
    for index in (0..depth - 1).rev() {
        let output = &trace.activations[index];
        if index == net.config.feature_layer_index {
            // Quantization term: d(-sum ||f||^2)/df = -2f, scaled by lambda.
            let g = grad.data_mut();
            for (gv, &fv) in g.iter_mut().zip(output.data()) {
                *gv += lambda * (-2.0 * fv);
            }
        }
        let input = if index == 0 {
            batch
        } else {
            &trace.activations[index - 1]
        };
        let (weight, _) = net.layer_params(index);
        let (dx, dparams) = backward_layer(
            &net.config.layers[index],
            input,
            output,
            &trace.caches[index],
            weight,
            &grad,
        );
        if let Some((dw, db)) = dparams {
            let off = net.param_offset(index);
            grads[off] = dw;
            grads[off + 1] = db;
        }
        grad = dx;
    }

    Ok((breakdown, Gradients(grads)))
}

/// Compares the analytic gradient against central finite differences of the
/// objective, returning the worst relative error over all parameters:
/// `|analytic - difference| / max(|analytic|, |difference|, 1e-12)`.
pub fn gradient_check(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    weights: &SampleWeights,
    lambda: f64,
    eps: f64,
) -> Result<f64, NetError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(NetError::BadEpsilon(eps));
    }
    let (_, analytic) = loss_and_grad(net, batch, labels, weights, lambda)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for pi in 0..probe.params.len() {
        for ei in 0..probe.params[pi].len() {
            let original = probe.params[pi].data()[ei];
            probe.params[pi].data_mut()[ei] = original + eps;
            let plus = loss_only(&probe, batch, labels, weights, lambda)?.total;
            probe.params[pi].data_mut()[ei] = original - eps;
            let minus = loss_only(&probe, batch, labels, weights, lambda)?.total;
            probe.params[pi].data_mut()[ei] = original;
            let difference = (plus - minus) / (2.0 * eps);
            let a = analytic.0[pi].data()[ei];
            let err = math::abs(a - difference)
                / math::abs(a).max(math::abs(difference)).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;

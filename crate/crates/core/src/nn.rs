//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Weights are stored `out x in`, so a layer maps a row-major batch `A`
//! (`batch x in`) to `A * W^T + b`. Hidden layers apply the network's
//! activation; the last layer is always linear and produces softmax inputs.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the activation output, which is all the
    /// supported activations need.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::None => 1.0,
        }
    }

    /// Variance of the zero-mean Gaussian used for a layer with `fan_in` inputs.
    pub fn init_variance(self, fan_in: usize) -> f64 {
        let gain = if self == Activation::Relu { 2.0 } else { 1.0 };
        gain / fan_in as f64
    }
}

/// Architecture of a network: `layer_widths[0]` is the input dimension and
/// the last entry is the number of classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, use_bias: bool) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            use_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Multinomial logistic regression: one linear layer.
    pub fn logistic_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            layer_widths: vec![input_dim, num_classes],
            activation: Activation::None,
            use_bias: true,
        }
    }

    /// An MLP with the given hidden widths between `input_dim` and `num_classes`.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        use_bias: bool,
    ) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input_dim);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(num_classes);
        Self {
            layer_widths,
            activation,
            use_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Spec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!("layer width {pos} is zero")));
        }
        Ok(())
    }

    /// Number of weight matrices (L).
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn is_logistic_regression(&self) -> bool {
        self.depth() == 1 && self.activation == Activation::None
    }
}

/// Weights (`out x in`) and optional bias of one layer. Also used for
/// per-layer gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl LayerParams {
    fn zeros(fan_out: usize, fan_in: usize, use_bias: bool) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: use_bias.then(|| Array1::zeros(fan_out)),
        }
    }

    fn zeros_like(other: &LayerParams) -> Self {
        Self {
            weights: Array2::zeros(other.weights.raw_dim()),
            bias: other.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    fn same_shape(&self, other: &LayerParams) -> bool {
        self.weights.shape() == other.weights.shape()
            && self.bias.as_ref().map(|b| b.len()) == other.bias.as_ref().map(|b| b.len())
    }

    pub fn num_values(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

fn check_congruent(a: &[LayerParams], b: &[LayerParams], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "{what}: layer count {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (l, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.same_shape(y) {
            return Err(Error::Shape {
                layer: l,
                expected: format!("{:?}", x.weights.shape()),
                got: format!("{:?}", y.weights.shape()),
            });
        }
    }
    Ok(())
}

/// All learnable values of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| LayerParams::zeros(w[1], w[0], spec.use_bias))
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(LayerParams::num_values).sum()
    }

    /// Every learnable value, layer by layer, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            if let Some(b) = &layer.bias {
                out.extend(b.iter().copied());
            }
        }
        out
    }

    /// Weight-matrix entries only, in layer order.
    pub fn flatten_weights(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().copied())
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        squared_norm(&self.layers).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite())
                && l.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        })
    }

    pub(crate) fn check_congruent(&self, other: &[LayerParams], what: &str) -> Result<()> {
        check_congruent(&self.layers, other, what)
    }
}

fn squared_norm(layers: &[LayerParams]) -> f64 {
    layers
        .iter()
        .map(|l| {
            l.weights.iter().map(|v| v * v).sum::<f64>()
                + l.bias.as_ref().map_or(0.0, |b| b.iter().map(|v| v * v).sum())
        })
        .sum()
}

/// Partial derivatives of the mean batch loss, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        squared_norm(&self.layers).sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            if let Some(b) = &layer.bias {
                out.extend(b.iter().copied());
            }
        }
        out
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) -> Result<()> {
        check_congruent(&self.layers, &other.layers, "gradient accumulation")?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            if let (Some(x), Some(y)) = (a.bias.as_mut(), b.bias.as_ref()) {
                x.scaled_add(alpha, y);
            }
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian initialization with zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(spec);
    for layer in &mut params.layers {
        let fan_in = layer.weights.ncols();
        let std = spec.activation.init_variance(fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("finite positive std");
        layer.weights.mapv_inplace(|_| normal.sample(&mut rng));
    }
    params
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    inputs: ArrayView2<'a, f64>,
    /// Pre-activations of every layer; the last one holds the logits.
    pub pre_activations: Vec<Array2<f64>>,
    /// Post-activations of the hidden layers.
    pub post_activations: Vec<Array2<f64>>,
}

impl ForwardCache<'_> {
    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("at least one layer")
    }
}

fn affine(input: &ArrayView2<'_, f64>, layer: &LayerParams) -> Array2<f64> {
    let mut z = input.dot(&layer.weights.t());
    if let Some(b) = &layer.bias {
        z += b;
    }
    z
}

/// Logits for a batch, plus the cache needed by [`backward`].
pub fn forward<'a>(
    params: &ModelParams,
    inputs: ArrayView2<'a, f64>,
) -> Result<(Array2<f64>, ForwardCache<'a>)> {
    check_input(params, &inputs)?;
    let act = params.spec.activation;
    let depth = params.depth();
    let mut pre_activations = Vec::with_capacity(depth);
    let mut post_activations: Vec<Array2<f64>> = Vec::with_capacity(depth - 1);
    for (l, layer) in params.layers.iter().enumerate() {
        let z = match post_activations.last() {
            Some(prev) => affine(&prev.view(), layer),
            None => affine(&inputs, layer),
        };
        if l + 1 < depth {
            post_activations.push(z.mapv(|v| act.apply(v)));
        }
        pre_activations.push(z);
    }
    let logits = pre_activations[depth - 1].clone();
    Ok((
        logits,
        ForwardCache {
            inputs,
            pre_activations,
            post_activations,
        },
    ))
}

/// Logits only; skips building a cache.
pub fn logits(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_input(params, &inputs)?;
    let act = params.spec.activation;
    let depth = params.depth();
    let mut current = affine(&inputs, &params.layers[0]);
    for layer in &params.layers[1..] {
        current.mapv_inplace(|v| act.apply(v));
        current = affine(&current.view(), layer);
    }
    debug_assert_eq!(current.ncols(), params.layers[depth - 1].weights.nrows());
    Ok(current)
}

fn check_input(params: &ModelParams, inputs: &ArrayView2<'_, f64>) -> Result<()> {
    let d = params.spec.input_dim();
    if inputs.ncols() != d {
        return Err(Error::Shape {
            layer: 0,
            expected: format!("{d} input columns"),
            got: format!("{} columns", inputs.ncols()),
        });
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let want = (params.spec.layer_widths[l + 1], params.spec.layer_widths[l]);
        if layer.weights.dim() != want {
            return Err(Error::Shape {
                layer: l,
                expected: format!("{want:?}"),
                got: format!("{:?}", layer.weights.dim()),
            });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy minus `beta` times the mean output entropy,
/// and its gradient with respect to the logits.
pub fn softmax_xent(
    logits: &Array2<f64>,
    labels: &[usize],
    confidence_beta: f64,
) -> Result<(f64, Array2<f64>)> {
    let (batch, k) = logits.dim();
    if labels.len() != batch {
        return Err(Error::input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    if !(confidence_beta >= 0.0) {
        return Err(Error::input(format!(
            "confidence penalty must be nonnegative, got {confidence_beta}"
        )));
    }

    let mut dlogits = Array2::zeros((batch, k));
    let mut total = 0.0;
    let scale = 1.0 / batch as f64;
    let mut log_p = vec![0.0; k];
    for ((row, &y), mut grad) in logits.outer_iter().zip(labels).zip(dlogits.outer_iter_mut()) {
        log_softmax_into(row, &mut log_p);
        let mut entropy = 0.0;
        for &lp in &log_p {
            entropy -= lp.exp() * lp;
        }
        total += -log_p[y] - confidence_beta * entropy;
        for (j, g) in grad.iter_mut().enumerate() {
            let p = log_p[j].exp();
            let mut d = p;
            if j == y {
                d -= 1.0;
            }
            // d(-H)/dz_j = p_j (log p_j + H)
            d += confidence_beta * p * (log_p[j] + entropy);
            *g = d * scale;
        }
    }
    Ok((total * scale, dlogits))
}

fn log_softmax_into(row: ndarray::ArrayView1<'_, f64>, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(row.iter()) {
        *o = *v;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = out.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for v in out.iter_mut() {
        *v -= log_z;
    }
}

/// Exact gradient of the loss whose logit-gradient is `dlogits`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache<'_>,
    dlogits: &Array2<f64>,
) -> Result<Gradients> {
    let depth = params.depth();
    if cache.pre_activations.len() != depth || cache.post_activations.len() + 1 != depth {
        return Err(Error::contract(format!(
            "cache has {} layers, model has {depth}",
            cache.pre_activations.len()
        )));
    }
    let batch = cache.batch_size();
    for (l, (z, layer)) in cache.pre_activations.iter().zip(&params.layers).enumerate() {
        if z.dim() != (batch, layer.weights.nrows()) {
            return Err(Error::contract(format!(
                "cache layer {l} has shape {:?}, model expects ({batch}, {})",
                z.dim(),
                layer.weights.nrows()
            )));
        }
    }
    if dlogits.dim() != cache.logits().dim() {
        return Err(Error::contract(format!(
            "dlogits shape {:?} does not match logits {:?}",
            dlogits.dim(),
            cache.logits().dim()
        )));
    }

    let act = params.spec.activation;
    let mut grads = Vec::with_capacity(depth);
    let mut delta = dlogits.clone();
    for l in (0..depth).rev() {
        let layer = &params.layers[l];
        let input = if l == 0 {
            cache.inputs.view()
        } else {
            cache.post_activations[l - 1].view()
        };
        let weights = delta.t().dot(&input);
        let bias = layer.bias.as_ref().map(|_| delta.sum_axis(Axis(0)));
        if l > 0 {
            let mut upstream = delta.dot(&layer.weights);
            Zip::from(&mut upstream)
                .and(&cache.post_activations[l - 1])
                .for_each(|d, &a| *d *= act.derivative_from_output(a));
            delta = upstream;
        }
        grads.push(LayerParams { weights, bias });
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Loss and parameter gradient for one batch.
pub fn loss_and_gradients(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    confidence_beta: f64,
) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward(params, inputs)?;
    let (loss, dlogits) = softmax_xent(&logits, labels, confidence_beta)?;
    let grads = backward(params, &cache, &dlogits)?;
    Ok((loss, grads))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(params, inputs)?))
}

/// Mean Shannon entropy (nats) of the softmax rows.
pub fn output_entropy(logits: &Array2<f64>) -> f64 {
    if logits.nrows() == 0 {
        return 0.0;
    }
    let k = logits.ncols();
    let mut log_p = vec![0.0; k];
    let mut total = 0.0;
    for row in logits.outer_iter() {
        log_softmax_into(row, &mut log_p);
        total -= log_p.iter().map(|&lp| lp.exp() * lp).sum::<f64>();
    }
    total / logits.nrows() as f64
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use ndarray::array;

    use super::*;

    fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng))
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3], Activation::Relu, true).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], Activation::Relu, true).is_err());
        let lr = NetworkSpec::new(vec![4, 3], Activation::None, true).unwrap();
        assert!(lr.is_logistic_regression());
        assert_eq!(lr.depth(), 1);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Relu, true).unwrap();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 8));
        for layer in &a.layers {
            assert!(layer.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let spec = NetworkSpec::new(vec![4, 100, 100, 100, 3], Activation::Relu, false).unwrap();
        for l in 0..spec.depth() {
            let mut values = Vec::new();
            for seed in 0..10 {
                values.extend(init_params(&spec, seed).layers[l].weights.iter().copied());
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expected = 2.0 / spec.layer_widths[l] as f64;
            assert!(
                (var - expected).abs() / expected < 0.2,
                "layer {l}: variance {var} vs {expected}"
            );
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = NetworkSpec::new(vec![3, 5, 4], Activation::Tanh, false).unwrap();
        let params = ModelParams::zeros(&spec);
        let x = random_inputs(6, 3, 1);
        let (out, _) = forward(&params, x.view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::None, false).unwrap();
        let params = init_params(&spec, 3);
        let x = random_inputs(5, 3, 4);
        let (out, _) = forward(&params, x.view()).unwrap();
        let expected = x.dot(&params.layers[0].weights.t());
        assert_eq!(out, expected);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, true).unwrap();
        let params = init_params(&spec, 0);
        let x = random_inputs(2, 5, 0);
        match forward(&params, x.view()) {
            Err(Error::Shape { layer: 0, .. }) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn logits_scale_by_lambda_to_the_depth() {
        let spec = NetworkSpec::new(vec![5, 8, 8, 3], Activation::Relu, false).unwrap();
        let params = init_params(&spec, 11);
        let x = random_inputs(20, 5, 12);
        let base = logits(&params, x.view()).unwrap();
        let mut scaled = params.clone();
        for layer in &mut scaled.layers {
            layer.weights *= 0.7;
        }
        let shrunk = logits(&scaled, x.view()).unwrap();
        for (a, b) in base.iter().zip(shrunk.iter()) {
            assert_relative_eq!(0.7f64.powi(3) * a, *b, max_relative = 1e-10);
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_k() {
        let logits = Array2::zeros((4, 10));
        let (loss, _) = softmax_xent(&logits, &[0, 3, 9, 5], 0.0).unwrap();
        assert_relative_eq!(loss, 10f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(output_entropy(&Array2::zeros((2, 4))), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_logits_have_vanishing_loss_and_entropy() {
        let logits = array![[0.0, 0.0, 1e4]];
        let (loss, d) = softmax_xent(&logits, &[2], 0.0).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(d.iter().all(|v| v.abs() < 1e-300));
        assert!(output_entropy(&logits) < 1e-300);
    }

    #[test]
    fn xent_matches_direct_evaluation() {
        // Oracle: plain-formula softmax at (1,2,3), label 2.
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let expected_loss = -(p[2].ln());
        let logits = array![[1.0, 2.0, 3.0]];
        let (loss, d) = softmax_xent(&logits, &[2], 0.0).unwrap();
        assert_relative_eq!(loss, 0.407_605_964_444_379_6, epsilon = 1e-14);
        assert_relative_eq!(loss, expected_loss, epsilon = 1e-14);
        assert_relative_eq!(d[[0, 0]], 0.09003057317038046, epsilon = 1e-14);
        assert_relative_eq!(d[[0, 1]], 0.24472847105479764, epsilon = 1e-14);
        assert_relative_eq!(d[[0, 2]], -0.334_759_044_225_178_1, epsilon = 1e-14);
    }

    #[test]
    fn xent_gradient_with_confidence_penalty_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 2.0, 0.1], [1.0, 1.0, -0.5, 0.0]];
        let labels = [2, 1];
        let beta = 0.7;
        let (_, d) = softmax_xent(&logits, &labels, beta).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut up = logits.clone();
                up[[i, j]] += h;
                let mut down = logits.clone();
                down[[i, j]] -= h;
                let fd = (softmax_xent(&up, &labels, beta).unwrap().0
                    - softmax_xent(&down, &labels, beta).unwrap().0)
                    / (2.0 * h);
                assert_relative_eq!(d[[i, j]], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn xent_rejects_bad_labels() {
        let logits = Array2::zeros((1, 3));
        assert!(matches!(softmax_xent(&logits, &[3], 0.0), Err(Error::Input(_))));
        assert!(softmax_xent(&logits, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn xent_is_finite_for_huge_logits() {
        let logits = array![[1e4, -1e4, 0.0], [-1e4, -1e4, 1e4]];
        let (loss, d) = softmax_xent(&logits, &[1, 0], 0.5).unwrap();
        assert!(loss.is_finite());
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Sigmoid, true).unwrap();
        let params = init_params(&spec, 1);
        let x = random_inputs(5, 3, 2);
        let (out, cache) = forward(&params, x.view()).unwrap();
        let grads = backward(&params, &cache, &Array2::zeros(out.raw_dim())).unwrap();
        assert_eq!(grads.l2_norm(), 0.0);
    }

    #[test]
    fn logistic_regression_gradient_is_closed_form() {
        let spec = NetworkSpec::logistic_regression(4, 3);
        let params = init_params(&spec, 5);
        let x = random_inputs(7, 4, 6);
        let labels = [0, 1, 2, 2, 1, 0, 1];
        let (_, grads) = loss_and_gradients(&params, x.view(), &labels, 0.0).unwrap();

        let z = x.dot(&params.layers[0].weights.t());
        let mut residual = Array2::zeros((7, 3));
        for i in 0..7 {
            let m = z.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.row(i).iter().map(|v| (v - m).exp()).sum();
            for j in 0..3 {
                residual[[i, j]] = (z[[i, j]] - m).exp() / s - if labels[i] == j { 1.0 } else { 0.0 };
            }
        }
        let expected_w = residual.t().dot(&x) / 7.0;
        let expected_b = residual.sum_axis(Axis(0)) / 7.0;
        for (a, b) in grads.layers[0].weights.iter().zip(expected_w.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in grads.layers[0].bias.as_ref().unwrap().iter().zip(expected_b.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let spec_a = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, true).unwrap();
        let spec_b = NetworkSpec::new(vec![3, 4, 4, 2], Activation::Relu, true).unwrap();
        let a = init_params(&spec_a, 1);
        let b = init_params(&spec_b, 1);
        let x = random_inputs(5, 3, 2);
        let (out, cache) = forward(&a, x.view()).unwrap();
        assert!(matches!(
            backward(&b, &cache, &out),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = array![[0.0, 0.0, 5.0], [1.0, 1.0, 0.0], [2.0, 2.0, 2.0]];
        assert_eq!(argmax_rows(&logits), vec![2, 0, 0]);
    }
}

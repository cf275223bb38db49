//! Minimal multi-layer perceptron engine with manual backpropagation.
//!
//! Forward, cross-entropy, and exact reverse-mode gradients with respect to
//! both parameters and inputs; the input gradient is what chains predictor
//! losses back through a shared extractor. Plain SGD/GD steps and the
//! parameter arithmetic used for federated aggregation live here too.
//! Everything is f64.

pub mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture: layer widths input -> hidden... -> output and one
/// activation per affine layer. The final activation should be `Identity`
/// so the network emits raw logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config("MlpSpec needs at least one layer"));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("MlpSpec layer dims must be positive"));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(Error::config(format!(
                "MlpSpec has {} layers but {} activations",
                layer_dims.len() - 1,
                activations.len()
            )));
        }
        Ok(Self {
            layer_dims,
            activations,
        })
    }

    /// Hidden layers `Elu`, output layer `Identity`.
    pub fn elu_stack(layer_dims: Vec<usize>) -> Result<Self> {
        let n_layers = layer_dims.len().saturating_sub(1);
        let mut activations = vec![Activation::Elu; n_layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self::new(layer_dims, activations)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Concatenates two architectures, composing other after self.
    pub fn compose(&self, head: &MlpSpec) -> Result<MlpSpec> {
        if self.output_dim() != head.input_dim() {
            return Err(Error::config(format!(
                "cannot compose: output dim {} vs head input dim {}",
                self.output_dim(),
                head.input_dim()
            )));
        }
        let mut dims = self.layer_dims.clone();
        dims.extend_from_slice(&head.layer_dims[1..]);
        let mut acts = self.activations.clone();
        acts.extend_from_slice(&head.activations);
        MlpSpec::new(dims, acts)
    }
}

/// One affine layer: weights are (fan_in x fan_out), so a batch row-vector
/// maps as x * W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Weights and biases of one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn spec(&self) -> MlpSpec {
        let mut dims = vec![self.layers[0].weights.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weights.ncols()));
        MlpSpec {
            layer_dims: dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Gradients of a scalar loss with respect to every parameter, plus the
/// gradient with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub inputs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    /// Element-wise g += c * other over the parameter gradients.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::contract("gradient layer count mismatch"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.dim() != b.weights.dim() {
                return Err(Error::contract("gradient shape mismatch"));
            }
            a.weights.scaled_add(c, &b.weights);
            a.bias.scaled_add(c, &b.bias);
        }
        Ok(())
    }

    pub fn zeros_like(params: &MlpParams) -> Gradients {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            inputs: Array2::zeros((0, params.input_dim())),
        }
    }

    /// Scales every parameter gradient by `c`.
    pub fn scale(&mut self, c: f64) {
        for layer in &mut self.layers {
            layer.weights.mapv_inplace(|x| x * c);
            layer.bias.mapv_inplace(|x| x * c);
        }
    }
}

/// Activations cached by `forward` for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (first entry is the batch itself).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    preacts: Vec<Array2<f64>>,
}

/// Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases;
/// deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = substream(seed, domain::INIT, 0, 0);
    let layers = spec
        .layer_dims
        .windows(2)
        .zip(&spec.activations)
        .map(|(dims, &activation)| {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
                activation,
            }
        })
        .collect();
    MlpParams { layers }
}

/// Forward pass over a batch (rows are samples). Returns logits and the
/// cache needed by `backward`.
pub fn forward(params: &MlpParams, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::contract(format!(
            "batch width {} does not match input dim {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut preacts = Vec::with_capacity(params.layers.len());
    let mut current = batch.to_owned();
    for layer in &params.layers {
        let z = current.dot(&layer.weights) + &layer.bias;
        layer_inputs.push(current);
        let activated = z.mapv(|v| layer.activation.apply(v));
        preacts.push(z);
        current = activated;
    }
    Ok((
        current,
        ForwardCache {
            layer_inputs,
            preacts,
        },
    ))
}

/// Forward pass without building a cache; evaluation fast path.
pub fn forward_logits(params: &MlpParams, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::contract(format!(
            "batch width {} does not match input dim {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    let mut current = batch.to_owned();
    for layer in &params.layers {
        let mut z = current.dot(&layer.weights) + &layer.bias;
        z.mapv_inplace(|v| layer.activation.apply(v));
        current = z;
    }
    Ok(current)
}

/// Mean cross-entropy of softmax(logits) against the labels, and its
/// gradient (softmax - onehot) / batch_size. Log-sum-exp stabilized.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (rows, cols) = logits.dim();
    if labels.len() != rows {
        return Err(Error::contract(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    let mut grad = Array2::zeros((rows, cols));
    let mut loss = 0.0;
    let inv_n = 1.0 / rows as f64;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[i]]) * inv_n;
        for (j, &v) in row.iter().enumerate() {
            let softmax = (v - log_denom).exp();
            grad[[i, j]] = (softmax - if j == labels[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Exact reverse-mode gradients of the scalar loss whose logit gradient is
/// `dlogits`, for every parameter and for the input batch.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Result<Gradients> {
    let n_layers = params.layers.len();
    if cache.layer_inputs.len() != n_layers || cache.preacts.len() != n_layers {
        return Err(Error::contract("cache does not match network depth"));
    }
    let last = &cache.preacts[n_layers - 1];
    if dlogits.dim() != last.dim() {
        return Err(Error::contract(format!(
            "dlogits shape {:?} does not match logits {:?}",
            dlogits.dim(),
            last.dim()
        )));
    }
    for (layer, input) in params.layers.iter().zip(&cache.layer_inputs) {
        if input.ncols() != layer.weights.nrows() {
            return Err(Error::contract("stale cache: layer input width mismatch"));
        }
    }

    let mut layer_grads = vec![
        LayerGrad {
            weights: Array2::zeros((0, 0)),
            bias: Array1::zeros(0),
        };
        n_layers
    ];
    let mut upstream = dlogits.clone();
    for idx in (0..n_layers).rev() {
        let layer = &params.layers[idx];
        // dZ = upstream (*) act'(preact)
        let mut dz = upstream;
        dz.zip_mut_with(&cache.preacts[idx], |u, &z| {
            *u *= layer.activation.derivative(z);
        });
        layer_grads[idx] = LayerGrad {
            weights: cache.layer_inputs[idx].t().dot(&dz),
            bias: dz.sum_axis(Axis(0)),
        };
        upstream = dz.dot(&layer.weights.t());
    }
    Ok(Gradients {
        layers: layer_grads,
        inputs: upstream,
    })
}

/// In-place params -= lr * grads.
pub fn sgd_step(params: &mut MlpParams, grads: &Gradients, lr: f64) -> Result<()> {
    if params.layers.len() != grads.layers.len() {
        return Err(Error::contract("gradient layer count mismatch"));
    }
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        if layer.weights.dim() != grad.weights.dim() || layer.bias.len() != grad.bias.len() {
            return Err(Error::contract("gradient shape mismatch"));
        }
        layer.weights.scaled_add(-lr, &grad.weights);
        layer.bias.scaled_add(-lr, &grad.bias);
    }
    Ok(())
}

/// Full-batch gradient descent step; same contract as `sgd_step`.
pub fn gd_step(params: &mut MlpParams, grads: &Gradients, lr: f64) -> Result<()> {
    sgd_step(params, grads, lr)
}

/// Convex combination of parameter sets with weights normalized to sum 1.
pub fn weighted_average(params: &[&MlpParams], weights: &[f64]) -> Result<MlpParams> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} parameter sets with {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract("weights must be finite and >= 0"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("weights must sum to a positive value"));
    }
    let reference = params[0];
    for p in &params[1..] {
        if p.layers.len() != reference.layers.len() {
            return Err(Error::contract("parameter layer count mismatch"));
        }
        for (a, b) in p.layers.iter().zip(&reference.layers) {
            if a.weights.dim() != b.weights.dim() {
                return Err(Error::contract("parameter shape mismatch"));
            }
        }
    }
    let mut out = reference.clone();
    let w0 = weights[0] / total;
    for layer in &mut out.layers {
        layer.weights.mapv_inplace(|x| x * w0);
        layer.bias.mapv_inplace(|x| x * w0);
    }
    for (p, &w) in params.iter().zip(weights).skip(1) {
        let c = w / total;
        for (acc, layer) in out.layers.iter_mut().zip(&p.layers) {
            acc.weights.scaled_add(c, &layer.weights);
            acc.bias.scaled_add(c, &layer.bias);
        }
    }
    Ok(out)
}

/// How per-agent predictors combine into the ensemble model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Weighted average of per-predictor logits.
    Function,
    /// Forward pass through the weighted average of the parameters.
    Parameter,
}

/// Ensemble logits of a predictor set over a feature batch.
pub fn ensemble_logits(
    predictors: &[&MlpParams],
    weights: &[f64],
    features: ArrayView2<f64>,
    mode: EnsembleMode,
) -> Result<Array2<f64>> {
    if predictors.is_empty() {
        return Err(Error::contract("ensemble requires at least one predictor"));
    }
    if predictors.len() != weights.len() {
        return Err(Error::contract("one weight per predictor required"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("ensemble weights must sum to a positive value"));
    }
    match mode {
        EnsembleMode::Function => {
            let mut acc: Option<Array2<f64>> = None;
            for (p, &w) in predictors.iter().zip(weights) {
                let logits = forward_logits(p, features)?;
                let c = w / total;
                match &mut acc {
                    None => acc = Some(logits * c),
                    Some(a) => a.scaled_add(c, &logits),
                }
            }
            Ok(acc.expect("non-empty predictor list"))
        }
        EnsembleMode::Parameter => {
            let avg = weighted_average(predictors, weights)?;
            forward_logits(&avg, features)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;
    use proptest::prelude::*;

    fn fixed_params(spec: &MlpSpec, seed: u64) -> MlpParams {
        // Init with random biases too, so bias gradients are exercised off zero.
        let mut params = init_params(spec, seed);
        let mut rng = substream(seed, 99, 0, 0);
        for layer in &mut params.layers {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        params
    }

    /// Scalar-loop forward pass, independent of the ndarray implementation.
    fn forward_oracle(params: &MlpParams, batch: &Array2<f64>) -> Array2<f64> {
        let mut current: Vec<Vec<f64>> = batch.rows().into_iter().map(|r| r.to_vec()).collect();
        for layer in &params.layers {
            let (fan_in, fan_out) = layer.weights.dim();
            current = current
                .iter()
                .map(|x| {
                    (0..fan_out)
                        .map(|j| {
                            let mut z = layer.bias[j];
                            for i in 0..fan_in {
                                z += x[i] * layer.weights[[i, j]];
                            }
                            layer.activation.apply(z)
                        })
                        .collect()
                })
                .collect();
        }
        let rows = current.len();
        let cols = current[0].len();
        Array2::from_shape_fn((rows, cols), |(i, j)| current[i][j])
    }

    fn loss_of(params: &MlpParams, batch: &Array2<f64>, labels: &[usize]) -> f64 {
        let (logits, _) = forward(params, batch.view()).unwrap();
        cross_entropy(&logits, labels).unwrap().0
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences over every parameter and input entry.
    fn check_gradients(spec: &MlpSpec, seed: u64, batch_rows: usize, tol: f64) {
        let params = fixed_params(spec, seed);
        let mut rng = substream(seed, 98, 0, 0);
        let batch = Array2::from_shape_fn((batch_rows, spec.input_dim()), |_| {
            rng.random_range(-1.5..1.5)
        });
        let labels: Vec<usize> = (0..batch_rows)
            .map(|_| rng.random_range(0..spec.output_dim()))
            .collect();

        let (logits, cache) = forward(&params, batch.view()).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let grads = backward(&params, &cache, &dlogits).unwrap();

        let h = 1e-5;
        for l in 0..params.layers.len() {
            let (rows, cols) = params.layers[l].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = params.clone();
                    plus.layers[l].weights[[r, c]] += h;
                    let mut minus = params.clone();
                    minus.layers[l].weights[[r, c]] -= h;
                    let fd = (loss_of(&plus, &batch, &labels) - loss_of(&minus, &batch, &labels))
                        / (2.0 * h);
                    let an = grads.layers[l].weights[[r, c]];
                    assert!(
                        rel_err(an, fd) <= tol,
                        "weight grad mismatch at layer {l} ({r},{c}): {an} vs {fd}"
                    );
                }
            }
            for b in 0..params.layers[l].bias.len() {
                let mut plus = params.clone();
                plus.layers[l].bias[b] += h;
                let mut minus = params.clone();
                minus.layers[l].bias[b] -= h;
                let fd =
                    (loss_of(&plus, &batch, &labels) - loss_of(&minus, &batch, &labels)) / (2.0 * h);
                let an = grads.layers[l].bias[b];
                assert!(
                    rel_err(an, fd) <= tol,
                    "bias grad mismatch at layer {l} ({b}): {an} vs {fd}"
                );
            }
        }
        for i in 0..batch_rows {
            for j in 0..spec.input_dim() {
                let mut plus = batch.clone();
                plus[[i, j]] += h;
                let mut minus = batch.clone();
                minus[[i, j]] -= h;
                let fd =
                    (loss_of(&params, &plus, &labels) - loss_of(&params, &minus, &labels)) / (2.0 * h);
                let an = grads.inputs[[i, j]];
                assert!(
                    rel_err(an, fd) <= tol,
                    "input grad mismatch at ({i},{j}): {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::elu_stack(vec![6, 8, 2]).unwrap();
        let a = init_params(&spec, 5);
        let b = init_params(&spec, 5);
        assert_eq!(a, b);
        for layer in &a.layers {
            assert!(layer.bias.iter().all(|&x| x == 0.0));
            let bound = (6.0 / (layer.weights.nrows() + layer.weights.ncols()) as f64).sqrt();
            assert!(layer.weights.iter().all(|&w| w.abs() < bound));
        }
        assert_ne!(a, init_params(&spec, 6));
    }

    #[test]
    fn init_weight_mean_is_centered() {
        let spec = MlpSpec::elu_stack(vec![400, 64]).unwrap();
        let params = init_params(&spec, 17);
        let w = &params.layers[0].weights;
        let n = w.len() as f64;
        let bound = (6.0_f64 / (400.0 + 64.0)).sqrt();
        let std = bound / 3.0_f64.sqrt();
        let mean = w.sum() / n;
        // Three standard errors of the mean of a uniform(-bound, bound).
        assert!(mean.abs() < 3.0 * std / n.sqrt(), "init mean {mean}");
    }

    #[test]
    fn forward_zero_params_and_identity() {
        let spec = MlpSpec::new(vec![3, 2], vec![Activation::Identity]).unwrap();
        let mut params = init_params(&spec, 1);
        for layer in &mut params.layers {
            layer.weights.fill(0.0);
        }
        let batch = array![[1.0, -2.0, 0.5]];
        let (logits, _) = forward(&params, batch.view()).unwrap();
        assert_eq!(logits, array![[0.0, 0.0]]);

        let ident_spec = MlpSpec::new(vec![2, 2], vec![Activation::Identity]).unwrap();
        let mut ident = init_params(&ident_spec, 1);
        ident.layers[0].weights = Array2::eye(2);
        let batch = array![[0.3, -0.7], [1.5, 2.5]];
        let (logits, _) = forward(&ident, batch.view()).unwrap();
        assert_eq!(logits, batch);
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let spec = MlpSpec::new(
            vec![4, 5, 3],
            vec![Activation::Relu, Activation::Identity],
        )
        .unwrap();
        let params = fixed_params(&spec, 33);
        let mut rng = substream(33, 98, 0, 0);
        let batch = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
        let (logits, _) = forward(&params, batch.view()).unwrap();
        let expect = forward_oracle(&params, &batch);
        for (a, b) in logits.iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert!(forward(&params, Array2::<f64>::zeros((2, 7)).view()).is_err());
    }

    #[test]
    fn cross_entropy_known_values() {
        let logits = array![[0.0, 0.0]];
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);
        assert_abs_diff_eq!(grad[[0, 0]], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[[0, 1]], 0.5, epsilon = 1e-12);

        // Large correct-class margin drives the loss to zero.
        let confident = array![[60.0, 0.0]];
        let (loss, _) = cross_entropy(&confident, &[0]).unwrap();
        assert!(loss < 1e-20);
        assert!(loss >= 0.0);

        assert!(cross_entropy(&logits, &[2]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = substream(44, 0, 0, 0);
        let logits = Array2::from_shape_fn((4, 3), |_| rng.random_range(-3.0..3.0));
        let labels = vec![0, 2, 1, 2];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus[[i, j]] += h;
                let mut minus = logits.clone();
                minus[[i, j]] -= h;
                let fd = (cross_entropy(&plus, &labels).unwrap().0
                    - cross_entropy(&minus, &labels).unwrap().0)
                    / (2.0 * h);
                assert!(rel_err(grad[[i, j]], fd) <= 1e-6);
            }
        }
    }

    #[test]
    fn backward_closed_form_single_linear_layer() {
        let spec = MlpSpec::new(vec![3, 2], vec![Activation::Identity]).unwrap();
        let params = fixed_params(&spec, 7);
        let batch = array![[0.5, -1.0, 2.0]];
        let (logits, cache) = forward(&params, batch.view()).unwrap();
        let dlogits = array![[0.3, -0.8]];
        let grads = backward(&params, &cache, &dlogits).unwrap();
        // dW = x^T . dlogits for a single sample.
        for i in 0..3 {
            for j in 0..2 {
                assert_relative_eq!(
                    grads.layers[0].weights[[i, j]],
                    batch[[0, i]] * dlogits[[0, j]],
                    max_relative = 1e-12
                );
            }
        }
        assert_eq!(grads.layers[0].bias, array![0.3, -0.8]);
        drop(logits);

        // Zero upstream gradient kills all parameter gradients.
        let (_, cache) = forward(&params, batch.view()).unwrap();
        let zeros = Array2::zeros((1, 2));
        let grads = backward(&params, &cache, &zeros).unwrap();
        assert!(grads.layers[0].weights.iter().all(|&x| x == 0.0));
        assert!(grads.inputs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_small_nets() {
        check_gradients(
            &MlpSpec::new(vec![4, 6, 2], vec![Activation::Elu, Activation::Identity]).unwrap(),
            3,
            5,
            1e-5,
        );
        check_gradients(
            &MlpSpec::new(
                vec![3, 4, 4, 3],
                vec![Activation::Relu, Activation::Elu, Activation::Identity],
            )
            .unwrap(),
            4,
            4,
            1e-5,
        );
    }

    #[test]
    fn sgd_step_examples() {
        let spec = MlpSpec::elu_stack(vec![2, 2]).unwrap();
        let params = fixed_params(&spec, 9);
        let batch = array![[1.0, -1.0]];
        let (logits, cache) = forward(&params, batch.view()).unwrap();
        let (_, dl) = cross_entropy(&logits, &[0]).unwrap();
        let grads = backward(&params, &cache, &dl).unwrap();

        let mut zero_lr = params.clone();
        sgd_step(&mut zero_lr, &grads, 0.0).unwrap();
        assert_eq!(zero_lr, params);

        // lr = 1 with grads equal to the params zeroes everything.
        let self_grads = Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            inputs: Array2::zeros((0, 2)),
        };
        let mut zeroed = params.clone();
        gd_step(&mut zeroed, &self_grads, 1.0).unwrap();
        assert!(zeroed
            .layers
            .iter()
            .all(|l| l.weights.iter().all(|&x| x == 0.0) && l.bias.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn weighted_average_examples() {
        let spec = MlpSpec::elu_stack(vec![2, 2]).unwrap();
        let a = fixed_params(&spec, 1);
        let avg = weighted_average(&[&a, &a, &a], &[1.0, 1.0, 1.0]).unwrap();
        for (la, lb) in avg.layers.iter().zip(&a.layers) {
            for (x, y) in la.weights.iter().zip(lb.weights.iter()) {
                assert_relative_eq!(x, y, max_relative = 1e-15);
            }
        }

        // Scalar check: weights (2,1) on values (0,3) -> 1.
        let mut p0 = a.clone();
        let mut p3 = a.clone();
        for l in &mut p0.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        for l in &mut p3.layers {
            l.weights.fill(3.0);
            l.bias.fill(3.0);
        }
        let avg = weighted_average(&[&p0, &p3], &[2.0, 1.0]).unwrap();
        for l in &avg.layers {
            for x in l.weights.iter().chain(l.bias.iter()) {
                assert_relative_eq!(*x, 1.0, max_relative = 1e-12);
            }
        }

        // One-hot weights return that participant exactly.
        let b = fixed_params(&spec, 2);
        let picked = weighted_average(&[&a, &b], &[0.0, 1.0]).unwrap();
        assert_eq!(picked, b);

        assert!(weighted_average(&[&a, &b], &[0.0, 0.0]).is_err());
        assert!(weighted_average(&[], &[]).is_err());
    }

    #[test]
    fn ensemble_modes_agree_only_for_identical_or_linear_predictors() {
        let spec = MlpSpec::elu_stack(vec![3, 4, 2]).unwrap();
        let a = fixed_params(&spec, 11);
        let b = fixed_params(&spec, 12);
        let mut rng = substream(13, 0, 0, 0);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));

        let own = ensemble_logits(&[&a], &[1.0], x.view(), EnsembleMode::Function).unwrap();
        let direct = forward_logits(&a, x.view()).unwrap();
        assert_eq!(own, direct);

        let f_same =
            ensemble_logits(&[&a, &a], &[1.0, 1.0], x.view(), EnsembleMode::Function).unwrap();
        let p_same =
            ensemble_logits(&[&a, &a], &[1.0, 1.0], x.view(), EnsembleMode::Parameter).unwrap();
        for (u, v) in f_same.iter().zip(p_same.iter()) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }

        let f_mix =
            ensemble_logits(&[&a, &b], &[1.0, 1.0], x.view(), EnsembleMode::Function).unwrap();
        let p_mix =
            ensemble_logits(&[&a, &b], &[1.0, 1.0], x.view(), EnsembleMode::Parameter).unwrap();
        let max_gap = f_mix
            .iter()
            .zip(p_mix.iter())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0f64, f64::max);
        assert!(max_gap > 1e-6, "nonlinear ensemble modes should differ");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weighted_average_is_permutation_equivariant(seed in 0u64..500) {
            let spec = MlpSpec::elu_stack(vec![2, 3, 2]).unwrap();
            let p: Vec<MlpParams> = (0..3).map(|i| fixed_params(&spec, seed + i)).collect();
            let w = [1.0, 2.0, 3.0];
            let fwd = weighted_average(&[&p[0], &p[1], &p[2]], &w).unwrap();
            let rev = weighted_average(&[&p[2], &p[0], &p[1]], &[3.0, 1.0, 2.0]).unwrap();
            for (la, lb) in fwd.layers.iter().zip(&rev.layers) {
                for (x, y) in la.weights.iter().zip(lb.weights.iter()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn forward_rows_are_independent(seed in 0u64..500) {
            let spec = MlpSpec::elu_stack(vec![3, 4, 2]).unwrap();
            let params = fixed_params(&spec, seed);
            let mut rng = substream(seed, 97, 0, 0);
            let batch = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let (full, _) = forward(&params, batch.view()).unwrap();
            for i in 0..5 {
                let row = batch.row(i).insert_axis(ndarray::Axis(0));
                let (single, _) = forward(&params, row.view()).unwrap();
                for j in 0..2 {
                    prop_assert_eq!(full[[i, j]], single[[0, j]]);
                }
            }
        }

        #[test]
        fn cross_entropy_is_nonnegative(seed in 0u64..500) {
            let mut rng = substream(seed, 96, 0, 0);
            let logits = Array2::from_shape_fn((6, 4), |_| rng.random_range(-10.0..10.0));
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let (loss, _) = cross_entropy(&logits, &labels).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}

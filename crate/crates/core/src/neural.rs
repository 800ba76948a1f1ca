//! Feedforward Q-network with hand-derived gradients and an Adam optimizer.
//!
//! Weight matrices are stored `(fan_out, fan_in)` in row-major order. The
//! canonical flattening, used by model files and federation, walks the layers
//! in order and emits each layer's weights followed by its biases.

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::ops::AddAssign;
use thiserror::Error;

use crate::seed::rng_from_seed;

/// Default hidden layer widths of the Q-network.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + AddAssign + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + LinalgScalar + ScalarOperand + FromPrimitive + AddAssign + Debug + Send + Sync + 'static
{
}

fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("invalid layer dims {0:?}: need at least two dims, all >= 1")]
    InvalidDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("action {action} out of range for {outputs} outputs")]
    ActionOutOfRange { action: usize, outputs: usize },
    #[error("parameter shapes differ")]
    ShapeMismatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `(fan_out, fan_in)`.
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

/// Parameters of a ReLU MLP with an identity output layer. Gradients and
/// optimizer moments reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<Dense<T>>,
}

pub fn validate_dims(dims: &[usize]) -> Result<(), NeuralError> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(NeuralError::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

/// Number of scalars in a network with these dims.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`, and the
/// same values (up to rounding) for every scalar type.
pub fn init_params<T: Scalar>(dims: &[usize], seed: u64) -> Result<MlpParams<T>, NeuralError> {
    validate_dims(dims)?;
    let mut rng = rng_from_seed(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                Array2::from_shape_simple_fn((fan_out, fan_in), || lit(rng.random_range(-limit..=limit)));
            Dense {
                weights,
                biases: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

impl<T: Scalar> MlpParams<T> {
    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return Err(NeuralError::InvalidDims(vec![]));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weights.dim();
            if out == 0 || inp == 0 || layer.biases.len() != out {
                return Err(NeuralError::ShapeMismatch);
            }
            if i > 0 && layers[i - 1].weights.nrows() != inp {
                return Err(NeuralError::ShapeMismatch);
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NeuralError> {
        validate_dims(dims)?;
        Ok(Self {
            layers: dims
                .windows(2)
                .map(|w| Dense {
                    weights: Array2::zeros((w[1], w[0])),
                    biases: Array1::zeros(w[1]),
                })
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.dims())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.biases.len() == b.biases.len())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    /// Iterates scalars in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    pub fn from_flat(dims: &[usize], flat: &[T]) -> Result<Self, NeuralError> {
        validate_dims(dims)?;
        let expected = param_count(dims);
        if flat.len() != expected {
            return Err(NeuralError::DimensionMismatch { expected, got: flat.len() });
        }
        let mut params = Self::zeros(dims)?;
        params.assign_flat(flat)?;
        Ok(params)
    }

    /// Overwrites every scalar from a canonical flat vector.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), NeuralError> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(NeuralError::DimensionMismatch { expected, got: flat.len() });
        }
        for (dst, &src) in self.iter_mut().zip(flat) {
            *dst = src;
        }
        Ok(())
    }

    pub fn global_norm(&self) -> T {
        self.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    fn scale(&mut self, factor: T) {
        for x in self.iter_mut() {
            *x = *x * factor;
        }
    }

    /// Q-values for a single input.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NeuralError> {
        let view = ArrayView2::from_shape((1, input.len()), input).map_err(|_| NeuralError::ShapeMismatch)?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Q-values for a `(batch, input_dim)` matrix.
    pub fn forward_batch(&self, inputs: ArrayView2<T>) -> Result<Array2<T>, NeuralError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine(&h, layer);
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    /// Squared-error loss on the taken actions and its gradient, with the
    /// gradient rescaled to global norm at most `max_grad_norm`.
    pub fn loss_and_gradients(
        &self,
        inputs: ArrayView2<T>,
        actions: &[usize],
        targets: &[T],
        max_grad_norm: T,
    ) -> Result<(T, MlpParams<T>), NeuralError> {
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(NeuralError::EmptyBatch);
        }
        if actions.len() != batch {
            return Err(NeuralError::DimensionMismatch { expected: batch, got: actions.len() });
        }
        if targets.len() != batch {
            return Err(NeuralError::DimensionMismatch { expected: batch, got: targets.len() });
        }
        if inputs.ncols() != self.input_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("inputs"));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("targets"));
        }
        let outputs = self.output_dim();
        if let Some(&action) = actions.iter().find(|&&a| a >= outputs) {
            return Err(NeuralError::ActionOutOfRange { action, outputs });
        }

        // forward, keeping every post-activation
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = affine(&acts[i], layer);
            if i < last {
                h.mapv_inplace(relu);
            }
            acts.push(h);
        }

        let q = &acts[self.layers.len()];
        let n = T::from_usize(batch).expect("batch size");
        let two = lit::<T>(2.0);
        let mut delta = Array2::<T>::zeros((batch, outputs));
        let mut loss = T::zero();
        for (b, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = q[[b, a]] - y;
            loss = loss + err * err;
            delta[[b, a]] = two * err / n;
        }
        loss = loss / n;

        let mut grads = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            grads.layers[l].weights = delta.t().dot(&acts[l]);
            grads.layers[l].biases = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weights);
                Zip::from(&mut back).and(&acts[l]).for_each(|g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
                delta = back;
            }
        }

        let norm = grads.global_norm();
        if norm > max_grad_norm && norm > T::zero() {
            grads.scale(max_grad_norm / norm);
        }
        Ok((loss, grads))
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn affine<T: Scalar>(h: &Array2<T>, layer: &Dense<T>) -> Array2<T> {
    let mut z = h.dot(&layer.weights.t());
    z += &layer.biases;
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 10.0,
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub first_moment: MlpParams<T>,
    pub second_moment: MlpParams<T>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &MlpParams<T>, config: AdamConfig) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// Zeroes both moments and the step counter.
    pub fn reset(&mut self) {
        self.first_moment = self.first_moment.zeros_like();
        self.second_moment = self.second_moment.zeros_like();
        self.step = 0;
    }

    pub fn max_grad_norm(&self) -> T {
        lit(self.config.max_grad_norm)
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn optimizer_step<T: Scalar>(
    params: &mut MlpParams<T>,
    grads: &MlpParams<T>,
    opt: &mut OptState<T>,
) -> Result<(), NeuralError> {
    if !params.same_shape(grads) || !params.same_shape(&opt.first_moment) || !params.same_shape(&opt.second_moment) {
        return Err(NeuralError::ShapeMismatch);
    }
    opt.step += 1;
    let cfg = &opt.config;
    let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
    let lr = lit::<T>(cfg.learning_rate);
    let eps = lit::<T>(cfg.epsilon);
    let t = i32::try_from(opt.step).unwrap_or(i32::MAX);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let one = T::one();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
    {
        *m = b1 * *m + (one - b1) * *g;
        *v = b2 * *v + (one - b2) * *g * *g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

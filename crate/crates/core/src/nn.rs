//! Small dense network with explicit forward/backward passes and SGD with momentum.
//!
//! Layout for `layer_dims = [input, hidden.., bottleneck, classes]`:
//!
//! - every hidden layer applies `tanh`,
//! - the bottleneck layer is linear and its output is the feature vector,
//! - the classifier head is linear and its output goes through softmax.
//!
//! With only two dims (`[input, classes]`) the single layer is the classifier
//! head and the features are the inputs themselves.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = act(x Wᵀ + b)`; `weights` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_transpose(&self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `outputs[0]` is the input batch, `outputs[l + 1]` the output of layer `l`.
    outputs: Vec<Matrix>,
    pub probs: Matrix,
}

impl Forward {
    pub fn logits(&self) -> &Matrix {
        self.outputs.last().expect("forward has at least one layer")
    }

    /// The bottleneck output, i.e. the input of the classifier head.
    pub fn features(&self) -> &Matrix {
        &self.outputs[self.outputs.len() - 2]
    }

    pub fn input(&self) -> &Matrix {
        &self.outputs[0]
    }
}

fn activation_for(layer: usize, num_layers: usize) -> Activation {
    // Last layer is the classifier head, the one before it the bottleneck.
    if layer + 2 >= num_layers {
        Activation::Identity
    } else {
        Activation::Tanh
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer_dims needs at least input and class dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer_dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_layers = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let data = (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect();
                Dense {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: activation_for(l, num_layers),
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let num_layers = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense {
                weights: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation: activation_for(l, num_layers),
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    /// Rebuilds a model from `(weights, bias)` pairs, one per layer.
    pub fn from_parameters(layer_dims: &[usize], params: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        if params.len() != model.layers.len() {
            return Err(Error::shape(
                "Mlp::from_parameters",
                format!("{} layers", model.layers.len()),
                format!("{} layers", params.len()),
            ));
        }
        for (layer, (w, b)) in model.layers.iter_mut().zip(params) {
            w.ensure_same_shape("Mlp::from_parameters", &layer.weights)?;
            if b.len() != layer.bias.len() {
                return Err(Error::shape(
                    "Mlp::from_parameters",
                    layer.bias.len(),
                    b.len(),
                ));
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite parameter".into()));
            }
            layer.weights = w;
            layer.bias = b;
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Mlp::forward",
                format!("{} input columns", self.input_dim()),
                format!("{} input columns", x.cols()),
            ));
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(outputs.last().expect("non-empty"))?;
            outputs.push(next);
        }
        let probs = outputs.last().expect("non-empty").softmax_rows();
        Ok(Forward { outputs, probs })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.probs)
    }

    /// Backpropagates `dL/dlogits` through the cached forward pass.
    pub fn backward(&self, fwd: &Forward, grad_logits: &Matrix) -> Result<Gradients> {
        grad_logits.ensure_same_shape("Mlp::backward", fwd.logits())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_logits.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let output = &fwd.outputs[l + 1];
            let input = &fwd.outputs[l];
            // dL/dz = dL/dy * act'(z)
            if layer.activation != Activation::Identity {
                for (g, &y) in upstream.data_mut().iter_mut().zip(output.data()) {
                    *g *= layer.activation.derivative_from_output(y);
                }
            }
            let d_weights = upstream.transpose_matmul(input)?;
            let d_bias = upstream.column_sums();
            grads.push((d_weights, d_bias));
            if l > 0 {
                upstream = upstream.matmul(&layer.weights)?;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Parameters as slices in a fixed order: per layer, weights then bias.
    pub fn parameter_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.parameter_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.layer_dims {
            hash = fnv_mix(hash, *d as u64);
        }
        for slice in self.parameter_slices() {
            for v in slice {
                hash = fnv_mix(hash, v.to_bits());
            }
        }
        hash
    }
}

fn fnv_mix(mut hash: u64, word: u64) -> u64 {
    for byte in word.to_le_bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Per-layer `(d_weights, d_bias)`, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.out_dim(), l.in_dim()),
                        vec![0.0; l.out_dim()],
                    )
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w.data_mut(), b.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "Gradients::add_assign",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            if dst.len() != src.len() {
                return Err(Error::shape("Gradients::add_assign", dst.len(), src.len()));
            }
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }

    fn matches(&self, model: &Mlp) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|((w, b), l)| w.shape() == l.weights.shape() && b.len() == l.bias.len())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v − lr·(g + wd·θ)`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &Mlp, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) || !self.velocity.matches(model) {
            return Err(Error::shape(
                "Sgd::step",
                format!("{:?}", model.layer_dims),
                "mismatched gradient or velocity shapes",
            ));
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for ((param, grad), vel) in model
            .parameter_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.velocity.slices_mut())
        {
            for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v - lr * (g + wd * *p);
                *p += *v;
            }
        }
        Ok(())
    }
}

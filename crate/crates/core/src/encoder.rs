//! Feedforward embedding network with exact analytic gradients.
//!
//! Hidden layers apply `tanh(W x + b)`; the output layer is affine and is
//! followed by L2 normalization when enabled.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Default architecture: input → 32 → 32 → 16.
pub const DEFAULT_HIDDEN: [usize; 2] = [32, 32];
pub const DEFAULT_EMBEDDING_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major, shape `(out, in)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    normalize: bool,
}

/// Output of [`EncoderParams::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    /// Set when normalization was requested but the pre-normalization vector was zero.
    degenerate: bool,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Embedding {
            vector,
            degenerate: false,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// Parameter gradients, shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`
    /// (post-tanh for hidden layers, pre-normalization for the last layer).
    activations: Vec<Vec<f64>>,
}

fn affine(layer: &Layer, input: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = input.len();
    (0..out_dim)
        .map(|r| {
            let row = &layer.weights[r * in_dim..(r + 1) * in_dim];
            row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + layer.bias[r]
        })
        .collect()
}

impl EncoderParams {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(layer_dims: &[usize], normalize: bool, rng: &mut Rng) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect(),
                    bias: (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect(),
                }
            })
            .collect();
        Ok(EncoderParams {
            layer_dims: layer_dims.to_vec(),
            layers,
            normalize,
        })
    }

    pub fn from_layers(layer_dims: Vec<usize>, layers: Vec<Layer>, normalize: bool) -> Result<Self> {
        validate_dims(&layer_dims)?;
        if layers.len() != layer_dims.len() - 1 {
            return Err(Error::shape(format!(
                "{} layers given for {} layer dims",
                layers.len(),
                layer_dims.len()
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(layer_dims.windows(2)).enumerate() {
            if layer.weights.len() != w[0] * w[1] || layer.bias.len() != w[1] {
                return Err(Error::shape(format!(
                    "layer {l}: expected {}x{} weights and {} biases",
                    w[1], w[0], w[1]
                )));
            }
        }
        let params = EncoderParams {
            layer_dims,
            layers,
            normalize,
        };
        params.check_finite()?;
        Ok(params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    fn check_finite(&self) -> Result<()> {
        if self.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite encoder parameter".into()))
        }
    }

    fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has length {}, encoder expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &activations[l], self.layer_dims[l + 1]);
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Embedding> {
        let trace = self.trace(input)?;
        let raw = trace.activations.into_iter().last().unwrap();
        Ok(self.finish(raw))
    }

    fn finish(&self, raw: Vec<f64>) -> Embedding {
        if !self.normalize {
            return Embedding::new(raw);
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            Embedding {
                vector: raw,
                degenerate: true,
            }
        } else {
            Embedding::new(raw.into_iter().map(|v| v / norm).collect())
        }
    }

    pub fn forward_batch<I: AsRef<[f64]>>(&self, inputs: &[I]) -> Result<Vec<Embedding>> {
        inputs.iter().map(|x| self.forward(x.as_ref())).collect()
    }

    /// Gradient of `sum_i <upstream_i, forward(batch_i)>` with respect to every parameter.
    pub fn backward<I: AsRef<[f64]>, G: AsRef<[f64]>>(&self, batch: &[I], upstream_grads: &[G]) -> Result<Gradients> {
        if batch.len() != upstream_grads.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} upstream gradients",
                batch.len(),
                upstream_grads.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let last = self.layers.len() - 1;
        for (input, upstream) in batch.iter().zip(upstream_grads) {
            let upstream = upstream.as_ref();
            if upstream.len() != self.embedding_dim() {
                return Err(Error::shape(format!(
                    "upstream gradient has length {}, embedding dim is {}",
                    upstream.len(),
                    self.embedding_dim()
                )));
            }
            if upstream.iter().all(|g| *g == 0.0) {
                continue;
            }
            let trace = self.trace(input.as_ref())?;
            let raw = &trace.activations[last + 1];

            // Through the normalization: dy/dz = (I - y y^T) / |z|.
            let mut delta: Vec<f64> = upstream.to_vec();
            if self.normalize {
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let y: Vec<f64> = raw.iter().map(|v| v / norm).collect();
                    let proj: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
                    delta = upstream.iter().zip(&y).map(|(g, yi)| (g - yi * proj) / norm).collect();
                }
            }

            for l in (0..=last).rev() {
                let a_in = &trace.activations[l];
                let in_dim = self.layer_dims[l];
                let out_dim = self.layer_dims[l + 1];
                let g = &mut grads.layers[l];
                for (r, &d) in delta.iter().enumerate().take(out_dim) {
                    g.bias[r] += d;
                    let row = &mut g.weights[r * in_dim..(r + 1) * in_dim];
                    row.iter_mut().zip(a_in).for_each(|(w, a)| *w += d * a);
                }
                if l == 0 {
                    break;
                }
                let weights = &self.layers[l].weights;
                // a_in is tanh output of layer l-1: d tanh = 1 - a^2.
                delta = (0..in_dim)
                    .map(|c| {
                        let s: f64 = (0..out_dim).map(|r| weights[r * in_dim + c] * delta[r]).sum();
                        s * (1.0 - a_in[c] * a_in[c])
                    })
                    .collect();
            }
        }
        Ok(grads)
    }

    /// `params - learning_rate * grads`; refuses non-finite gradients.
    pub fn sgd_step(&self, grads: &Gradients, learning_rate: f64) -> Result<EncoderParams> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, p)| g.weights.len() != p.weights.len() || g.bias.len() != p.bias.len())
        {
            return Err(Error::shape("gradient shape does not match parameters"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let mut next = self.clone();
        next.iter_mut()
            .zip(grads.iter())
            .for_each(|(p, g)| *p -= learning_rate * g);
        next.check_finite()?;
        Ok(next)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            normalize: self.normalize,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported checkpoint version {}", ckpt.format_version),
            ));
        }
        if ckpt.weights.len() != ckpt.biases.len() {
            return Err(Error::shape("checkpoint weight and bias arrays differ in length"));
        }
        let layers = ckpt
            .weights
            .into_iter()
            .zip(ckpt.biases)
            .map(|(weights, bias)| Layer { weights, bias })
            .collect();
        EncoderParams::from_layers(ckpt.layer_dims, layers, ckpt.normalize)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        EncoderParams::from_checkpoint(serde_json::from_str(&text)?)
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::config("layer_dims", "need at least an input and an output dim"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::config("layer_dims", "dims must be positive"));
    }
    Ok(())
}

/// JSON checkpoint. Weight arrays are row-major `(out, in)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub normalize: bool,
}

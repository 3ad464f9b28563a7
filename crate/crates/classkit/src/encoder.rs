//! Small feed-forward encoder with hand-rolled reverse-mode differentiation,
//! L2 output normalization, and vector-space observation augmentation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input dim {got} does not match spec input dim {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("upstream gradient dim {got} does not match output dim {expected}")]
    GradDimMismatch { expected: usize, got: usize },
    #[error("parameter vector length {got} does not match spec ({expected})")]
    ParamLenMismatch { expected: usize, got: usize },
    #[error("near-zero latent (norm {norm:.3e}); encoder output is degenerate")]
    DegenerateLatent { norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture of the encoder MLP. `hidden_dims` may be empty, which gives
/// a plain linear map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl EncoderSpec {
    /// (in, out) shape of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// Flat parameter storage plus the layer layout needed to slice it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

/// Half-open range of one parameter group (a weight matrix or a bias vector)
/// within the flat parameter array.
#[derive(Debug, Clone, Copy)]
pub struct ParamSegment {
    pub offset: usize,
    pub len: usize,
}

impl ParamVector {
    pub fn zeros_like(spec: &EncoderSpec) -> Self {
        ParamVector {
            data: vec![0.0; spec.param_count()],
            shapes: spec.layer_shapes(),
        }
    }

    pub fn from_data(spec: &EncoderSpec, data: Vec<f64>) -> Result<Self, EncoderError> {
        if data.len() != spec.param_count() {
            return Err(EncoderError::ParamLenMismatch {
                expected: spec.param_count(),
                got: data.len(),
            });
        }
        Ok(ParamVector {
            data,
            shapes: spec.layer_shapes(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offsets of (weights, biases) for layer `layer`.
    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut offset = 0;
        for &(i, o) in &self.shapes[..layer] {
            offset += i * o + o;
        }
        let (i, o) = self.shapes[layer];
        (offset, offset + i * o)
    }

    /// Parameter groups in layer order: weight matrix then bias vector per
    /// layer. The per-group granularity is what the layer-wise optimizer
    /// adapts over.
    pub fn segments(&self) -> Vec<ParamSegment> {
        let mut segs = Vec::with_capacity(self.shapes.len() * 2);
        let mut offset = 0;
        for &(i, o) in &self.shapes {
            segs.push(ParamSegment { offset, len: i * o });
            offset += i * o;
            segs.push(ParamSegment { offset, len: o });
            offset += o;
        }
        segs
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }
}

/// Gaussian-noise and coordinate-masking augmentation. Masking stands in for
/// random cropping on vector observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.01,
            mask_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> bool {
        self.noise_sigma >= 0.0 && (0.0..1.0).contains(&self.mask_prob)
    }
}

/// Fan-in-scaled symmetric uniform weights, zero biases, deterministic in
/// the seed.
pub fn init_encoder(spec: &EncoderSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros_like(spec);
    for layer in 0..params.num_layers() {
        let (w_off, b_off) = params.layer_offsets(layer);
        let (fan_in, _) = params.shapes[layer];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in &mut params.data[w_off..b_off] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    params
}

fn apply_activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// Derivative of the activation expressed through its output value.
fn activation_grad_from_output(act: Activation, y: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - y * y,
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Forward pass keeping every layer's post-activation output, for reuse in
/// the backward pass. activations[0] is the input row.
fn forward_cached(
    spec: &EncoderSpec,
    params: &ParamVector,
    input: &[f64],
) -> Result<Vec<Vec<f64>>, EncoderError> {
    if input.len() != spec.input_dim {
        return Err(EncoderError::InputDimMismatch {
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    let num_layers = params.num_layers();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(num_layers + 1);
    acts.push(input.to_vec());
    for layer in 0..num_layers {
        let (in_dim, out_dim) = params.shapes[layer];
        let (w_off, b_off) = params.layer_offsets(layer);
        let prev = &acts[layer];
        let mut out = vec![0.0; out_dim];
        for (o, out_val) in out.iter_mut().enumerate() {
            let row = &params.data[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            let mut sum = params.data[b_off + o];
            for (w, x) in row.iter().zip(prev) {
                sum += w * x;
            }
            // The final layer stays linear.
            *out_val = if layer + 1 < num_layers {
                apply_activation(spec.activation, sum)
            } else {
                sum
            };
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Deterministic forward pass over a batch of observation rows.
pub fn encode(
    spec: &EncoderSpec,
    params: &ParamVector,
    obs_batch: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, EncoderError> {
    obs_batch
        .iter()
        .map(|row| {
            forward_cached(spec, params, row).map(|mut acts| acts.pop().expect("output layer"))
        })
        .collect()
}

pub const NORM_EPSILON: f64 = 1e-9;

/// z / ||z||_2; errors when the norm falls below the degeneracy guard.
pub fn normalize(z: &[f64]) -> Result<Vec<f64>, EncoderError> {
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPSILON {
        return Err(EncoderError::DegenerateLatent { norm });
    }
    Ok(z.iter().map(|x| x / norm).collect())
}

/// Chains an upstream gradient on z_hat = z/||z|| back to a gradient on z:
/// multiplies by the Jacobian (I - z_hat z_hat^T) / ||z||.
pub fn normalize_backward(z: &[f64], upstream: &[f64]) -> Result<Vec<f64>, EncoderError> {
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPSILON {
        return Err(EncoderError::DegenerateLatent { norm });
    }
    let z_hat: Vec<f64> = z.iter().map(|x| x / norm).collect();
    let dot: f64 = z_hat.iter().zip(upstream).map(|(a, b)| a * b).sum();
    Ok(z_hat
        .iter()
        .zip(upstream)
        .map(|(zh, g)| (g - dot * zh) / norm)
        .collect())
}

/// Adds i.i.d. Gaussian noise and independently zeroes coordinates.
pub fn augment(obs: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    debug_assert!(cfg.validate());
    let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    obs.iter()
        .map(|&x| {
            let noisy = if cfg.noise_sigma > 0.0 {
                x + normal.sample(rng)
            } else {
                x
            };
            if cfg.mask_prob > 0.0 && rng.gen::<f64>() < cfg.mask_prob {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

/// Exact reverse-mode gradient of the forward pass contracted with the
/// upstream gradient on the batch outputs. Returns a flat parameter
/// gradient of the same length as `params`.
pub fn backward(
    spec: &EncoderSpec,
    params: &ParamVector,
    obs_batch: &[Vec<f64>],
    upstream_grad_on_z: &[Vec<f64>],
) -> Result<Vec<f64>, EncoderError> {
    assert_eq!(
        obs_batch.len(),
        upstream_grad_on_z.len(),
        "batch and upstream gradient must have equal length"
    );
    let mut grad = vec![0.0; params.len()];
    let num_layers = params.num_layers();
    for (input, upstream) in obs_batch.iter().zip(upstream_grad_on_z) {
        if upstream.len() != spec.output_dim {
            return Err(EncoderError::GradDimMismatch {
                expected: spec.output_dim,
                got: upstream.len(),
            });
        }
        let acts = forward_cached(spec, params, input)?;
        // delta holds dL/d(pre-activation output) of the current layer.
        let mut delta = upstream.clone();
        for layer in (0..num_layers).rev() {
            let (in_dim, out_dim) = params.shapes[layer];
            let (w_off, b_off) = params.layer_offsets(layer);
            if layer + 1 < num_layers {
                for (o, d) in delta.iter_mut().enumerate() {
                    *d *= activation_grad_from_output(spec.activation, acts[layer + 1][o]);
                }
            }
            let prev = &acts[layer];
            for o in 0..out_dim {
                let d = delta[o];
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                for (g, x) in row.iter_mut().zip(prev) {
                    *g += d * x;
                }
            }
            if layer > 0 {
                let mut next_delta = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let d = delta[o];
                    let row = &params.data[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                    for (nd, w) in next_delta.iter_mut().zip(row) {
                        *nd += d * w;
                    }
                }
                delta = next_delta;
            }
        }
    }
    Ok(grad)
}

//! Training machinery: batch construction with injected positives, LARS and
//! SGD steps, warmup + cosine learning-rate schedule, EMA shadow parameters,
//! checkpoint I/O, and the contrastive and behavior-cloning training loops.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contrastive::{
    self, BatchWeights, ContrastiveError,
};
use crate::demo::{observation_at, ActionWindow, Dataset, DemoError};
use crate::encoder::{
    augment, backward, encode, init_encoder, normalize, normalize_backward, Activation,
    AugmentConfig, EncoderError, EncoderSpec, ParamVector,
};
use crate::mining::{PairTable, SoftWeights};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CLSCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch size {batch} exceeds window count {windows}")]
    BatchTooLarge { batch: usize, windows: usize },
    #[error("window ordinal {0} out of dataset range")]
    OrdinalOutOfRange(usize),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

/// Shared training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub ema_power: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub trust_coeff: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.4,
            momentum: 0.9,
            weight_decay: 1e-6,
            tau: 0.05,
            epochs: 30,
            warmup_steps: 500,
            grad_clip_norm: 0.5,
            ema_power: 0.75,
            seed: 0,
            optimizer: OptimizerKind::Lars,
            trust_coeff: 0.001,
            augment: AugmentConfig::default(),
        }
    }
}

/// SHA-256 over the canonical JSON form of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> [u8; 32] {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: EncoderSpec,
    pub params: ParamVector,
    pub ema_params: ParamVector,
    pub step: usize,
    pub config_hash: [u8; 32],
}

/// Positive adjacency lists extracted once from a pair table, so batch
/// construction stays O(B).
#[derive(Debug, Clone)]
pub struct BatchSampler {
    positives: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(table: &PairTable) -> Self {
        let mut positives = vec![Vec::new(); table.window_count];
        for p in &table.pairs {
            positives[p.i].push(p.j);
            positives[p.j].push(p.i);
        }
        BatchSampler { positives }
    }

    pub fn window_count(&self) -> usize {
        self.positives.len()
    }
}

/// One training batch: window ordinals, their (unaugmented) observations,
/// and the in-batch weight matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ordinals: Vec<usize>,
    pub obs: Vec<Vec<f64>>,
    pub weights: BatchWeights,
}

/// Samples B/2 anchors without replacement, injects one positive per anchor
/// that has any, and fills remaining slots uniformly. The emitted weight
/// matrix restricts the soft weights to the batch.
pub fn build_batch(
    dataset: &Dataset,
    windows: &[ActionWindow],
    sampler: &BatchSampler,
    soft_weights: &SoftWeights,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    let n = windows.len();
    if batch_size > n {
        return Err(TrainError::BatchTooLarge {
            batch: batch_size,
            windows: n,
        });
    }
    if sampler.window_count() != n {
        return Err(TrainError::OrdinalOutOfRange(sampler.window_count()));
    }
    let anchor_count = batch_size / 2;
    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(rng);
    let anchors: Vec<usize> = pool[..anchor_count].to_vec();

    let mut ordinals = Vec::with_capacity(batch_size);
    ordinals.extend(&anchors);
    for &a in &anchors {
        if ordinals.len() >= batch_size {
            break;
        }
        let pos = &sampler.positives[a];
        if !pos.is_empty() {
            ordinals.push(pos[rng.gen_range(0..pos.len())]);
        }
    }
    while ordinals.len() < batch_size {
        ordinals.push(rng.gen_range(0..n));
    }

    let mut obs = Vec::with_capacity(batch_size);
    for &ord in &ordinals {
        let (o, _) = observation_at(dataset, windows[ord].index)?;
        obs.push(o.to_vec());
    }

    let b = ordinals.len();
    let mut w = vec![vec![0.0; b]; b];
    for p in 0..b {
        for q in (p + 1)..b {
            let weight = soft_weights.get(ordinals[p], ordinals[q]);
            w[p][q] = weight;
            w[q][p] = weight;
        }
    }
    Ok(Batch {
        ordinals,
        obs,
        weights: BatchWeights::new(w).expect("soft weights are in [0,1] with zero diagonal"),
    })
}

const LARS_EPSILON: f64 = 1e-9;

/// One LARS update. The trust ratio is computed per parameter group
/// (each weight matrix and bias vector); groups with zero weight norm fall
/// back to ratio 1.
pub fn lars_step(
    params: &mut ParamVector,
    momentum_buf: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coeff: f64,
) -> Result<(), TrainError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step: 0 });
    }
    for seg in params.segments() {
        let range = seg.offset..seg.offset + seg.len;
        let w_norm: f64 = params.data[range.clone()]
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt();
        let g_norm: f64 = grads[range.clone()].iter().map(|g| g * g).sum::<f64>().sqrt();
        let ratio = if w_norm == 0.0 {
            1.0
        } else {
            trust_coeff * w_norm / (g_norm + weight_decay * w_norm + LARS_EPSILON)
        };
        for k in range {
            let g = grads[k] + weight_decay * params.data[k];
            momentum_buf[k] = momentum * momentum_buf[k] + g;
            params.data[k] -= lr * ratio * momentum_buf[k];
        }
    }
    Ok(())
}

/// Plain momentum SGD with decoupled-from-nothing weight decay folded into
/// the gradient; the ablation fallback for the small toy encoders.
pub fn sgd_step(
    params: &mut ParamVector,
    momentum_buf: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step: 0 });
    }
    for (k, g) in grads.iter().enumerate() {
        let g = g + weight_decay * params.data[k];
        momentum_buf[k] = momentum * momentum_buf[k] + g;
        params.data[k] -= lr * momentum_buf[k];
    }
    Ok(())
}

pub const EMA_DECAY_CAP: f64 = 0.9999;

/// Power-law warmup of the EMA decay: d = min(1 - (1 + step)^(-power), cap).
pub fn ema_decay(step: usize, power: f64) -> f64 {
    (1.0 - (1.0 + step as f64).powf(-power)).min(EMA_DECAY_CAP)
}

pub fn ema_update(ema: &mut ParamVector, params: &ParamVector, step: usize, power: f64) {
    let d = ema_decay(step, power);
    for (e, p) in ema.data.iter_mut().zip(&params.data) {
        *e = d * *e + (1.0 - d) * p;
    }
}

/// lr(step): linear warmup to `lr` over `warmup` steps, then cosine decay to
/// zero at `total` steps. Continuous at the warmup boundary.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let progress = progress.clamp(0.0, 1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales the gradient in place so its global L2 norm is at most `max_norm`.
pub fn clip_gradient(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

fn optimizer_step(
    cfg: &TrainConfig,
    params: &mut ParamVector,
    momentum_buf: &mut [f64],
    grads: &[f64],
    lr: f64,
    step: usize,
) -> Result<(), TrainError> {
    let result = match cfg.optimizer {
        OptimizerKind::Lars => lars_step(
            params,
            momentum_buf,
            grads,
            lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.trust_coeff,
        ),
        OptimizerKind::Sgd => sgd_step(
            params,
            momentum_buf,
            grads,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        ),
    };
    result.map_err(|e| match e {
        TrainError::NonFiniteGradient { .. } => TrainError::NonFiniteGradient { step },
        other => other,
    })
}

/// Training outcome: the checkpoint plus the per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<f64>,
}

/// Representation-only training: build batch, augment, encode, normalize,
/// soft InfoNCE gradient, clip, optimizer step, EMA update. Fully
/// deterministic in cfg.seed.
pub fn train_class(
    dataset: &Dataset,
    windows: &[ActionWindow],
    table: &PairTable,
    soft_weights: &SoftWeights,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let sampler = BatchSampler::new(table);
    let mut params = init_encoder(spec, cfg.seed);
    let mut ema = params.clone();
    let mut momentum_buf = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let steps_per_epoch = (windows.len() / cfg.batch_size).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut loss_trace = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            step += 1;
            let batch = build_batch(
                dataset,
                windows,
                &sampler,
                soft_weights,
                cfg.batch_size,
                &mut rng,
            )?;
            let augmented: Vec<Vec<f64>> = batch
                .obs
                .iter()
                .map(|o| augment(o, &cfg.augment, &mut rng))
                .collect();
            let z = encode(spec, &params, &augmented)?;
            let z_hat: Vec<Vec<f64>> = match z.iter().map(|row| normalize(row)).collect() {
                Ok(rows) => rows,
                Err(EncoderError::DegenerateLatent { .. }) => {
                    // Masking can zero out a whole observation, which at a
                    // zero-bias initialization maps to a zero latent. Skip
                    // the batch rather than divide by zero.
                    loss_trace.push(f64::NAN);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let sim = contrastive::similarity_matrix(&z_hat, cfg.tau)?;

            let report = match contrastive::soft_infonce(&sim, &batch.weights) {
                Ok(r) => r,
                Err(ContrastiveError::AllWeightRowsZero) => {
                    // No in-batch positives at all; skip the update.
                    loss_trace.push(f64::NAN);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if !report.mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            loss_trace.push(report.mean_loss);

            let grad_z_hat = contrastive::soft_infonce_grad(&sim, &batch.weights, &z_hat)?;
            let grad_z: Vec<Vec<f64>> = z
                .iter()
                .zip(&grad_z_hat)
                .map(|(zi, gi)| normalize_backward(zi, gi))
                .collect::<Result<_, _>>()?;
            let mut grads = backward(spec, &params, &augmented, &grad_z)?;
            clip_gradient(&mut grads, cfg.grad_clip_norm);
            let lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps, total_steps);
            optimizer_step(cfg, &mut params, &mut momentum_buf, &grads, lr, step)?;
            ema_update(&mut ema, &params, step, cfg.ema_power);
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            spec: spec.clone(),
            params,
            ema_params: ema,
            step,
            config_hash: config_hash(cfg),
        },
        loss_trace,
    })
}

/// Behavior-cloning baseline: one MLP from (obs, proprio) to the flattened
/// action window, trained with mean squared error under the same optimizer
/// and schedule machinery.
pub fn train_bc(
    dataset: &Dataset,
    windows: &[ActionWindow],
    encoder_spec: &EncoderSpec,
    head_dims: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let horizon = windows
        .first()
        .map(|w| w.actions.len())
        .unwrap_or(0);
    let action_dim = dataset
        .demos
        .first()
        .map(|d| d.action_dim())
        .unwrap_or(0);
    let proprio_dim = dataset
        .demos
        .first()
        .map(|d| d.proprio_dim())
        .unwrap_or(0);

    let mut hidden = encoder_spec.hidden_dims.clone();
    hidden.push(encoder_spec.output_dim);
    hidden.extend_from_slice(head_dims);
    let spec = EncoderSpec {
        input_dim: encoder_spec.input_dim + proprio_dim,
        hidden_dims: hidden,
        output_dim: horizon * action_dim,
        activation: encoder_spec.activation,
    };

    let mut params = init_encoder(&spec, cfg.seed);
    let mut ema = params.clone();
    let mut momentum_buf = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let steps_per_epoch = (windows.len() / cfg.batch_size).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut loss_trace = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            step += 1;
            let ords: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..windows.len()))
                .collect();
            let mut inputs = Vec::with_capacity(ords.len());
            let mut targets = Vec::with_capacity(ords.len());
            for &ord in &ords {
                let w = &windows[ord];
                let (obs, proprio) = observation_at(dataset, w.index)?;
                let mut x = augment(obs, &cfg.augment, &mut rng);
                x.extend_from_slice(proprio);
                inputs.push(x);
                targets.push(w.actions.iter().flatten().copied().collect::<Vec<f64>>());
            }
            let preds = encode(&spec, &params, &inputs)?;
            let b = preds.len() as f64;
            let mut loss = 0.0;
            let upstream: Vec<Vec<f64>> = preds
                .iter()
                .zip(&targets)
                .map(|(p, t)| {
                    p.iter()
                        .zip(t)
                        .map(|(pi, ti)| {
                            let diff = pi - ti;
                            loss += diff * diff / b;
                            2.0 * diff / b
                        })
                        .collect()
                })
                .collect();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            loss_trace.push(loss);

            let mut grads = backward(&spec, &params, &inputs, &upstream)?;
            clip_gradient(&mut grads, cfg.grad_clip_norm);
            let lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps, total_steps);
            optimizer_step(cfg, &mut params, &mut momentum_buf, &grads, lr, step)?;
            ema_update(&mut ema, &params, step, cfg.ema_power);
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            spec,
            params,
            ema_params: ema,
            step,
            config_hash: config_hash(cfg),
        },
        loss_trace,
    })
}

fn write_activation(act: Activation) -> u8 {
    match act {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    }
}

fn read_activation(byte: u8) -> Result<Activation, TrainError> {
    match byte {
        0 => Ok(Activation::Tanh),
        1 => Ok(Activation::Relu),
        other => Err(TrainError::Corrupt(format!("unknown activation tag {other}"))),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(ckpt.spec.input_dim as u64)?;
        w.write_u64::<LittleEndian>(ckpt.spec.hidden_dims.len() as u64)?;
        for &h in &ckpt.spec.hidden_dims {
            w.write_u64::<LittleEndian>(h as u64)?;
        }
        w.write_u64::<LittleEndian>(ckpt.spec.output_dim as u64)?;
        w.write_all(&[write_activation(ckpt.spec.activation)])?;
        for arr in [&ckpt.params.data, &ckpt.ema_params.data] {
            w.write_u64::<LittleEndian>(arr.len() as u64)?;
            for &x in arr.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.write_u64::<LittleEndian>(ckpt.step as u64)?;
        w.write_all(&ckpt.config_hash)?;
        w.flush()
    };
    write().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| TrainError::Corrupt("file shorter than header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let mut read = || -> std::io::Result<Checkpoint> {
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported version {version}"),
            ));
        }
        let input_dim = r.read_u64::<LittleEndian>()? as usize;
        let hidden_count = r.read_u64::<LittleEndian>()? as usize;
        let mut hidden_dims = Vec::with_capacity(hidden_count);
        for _ in 0..hidden_count {
            hidden_dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let output_dim = r.read_u64::<LittleEndian>()? as usize;
        let mut act_byte = [0u8; 1];
        r.read_exact(&mut act_byte)?;
        let activation = read_activation(act_byte[0]).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?;
        let spec = EncoderSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        let mut arrays = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.read_f64::<LittleEndian>()?);
            }
            arrays.push(data);
        }
        let step = r.read_u64::<LittleEndian>()? as usize;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let mut trailing = Vec::new();
        r.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "trailing bytes",
            ));
        }
        let ema_data = arrays.pop().expect("two arrays");
        let params_data = arrays.pop().expect("two arrays");
        let params = ParamVector::from_data(&spec, params_data).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?;
        let ema_params = ParamVector::from_data(&spec, ema_data).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?;
        Ok(Checkpoint {
            spec,
            params,
            ema_params,
            step,
            config_hash,
        })
    };
    read().map_err(|e| TrainError::Corrupt(e.to_string()))
}

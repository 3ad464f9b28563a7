//! Non-parametric control: a brute-force cosine index over fused
//! (proprio, latent) keys, softmax-weighted neighbor ensembling, and the
//! controller implementations used for closed-loop evaluation.

use thiserror::Error;

use crate::demo::{observation_at, ActionWindow, Dataset, DemoError};
use crate::encoder::{encode, normalize, EncoderError, EncoderSpec, ParamVector};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be positive")]
    ZeroK,
    #[error("tau_nn must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("key dimension {got} does not match index dimension {expected}")]
    KeyDimMismatch { got: usize, expected: usize },
    #[error("degenerate key with norm {0}")]
    DegenerateKey(f64),
    #[error("execute horizon {t_a} exceeds stored window length {t_p}")]
    HorizonTooLong { t_a: usize, t_p: usize },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Brute-force index: unit-norm keys plus the action window stored at each
/// entry. Entry ordinals follow the window enumeration order.
#[derive(Debug, Clone)]
pub struct LatentIndex {
    pub keys: Vec<Vec<f64>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub key_dim: usize,
}

impl LatentIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueryConfig {
    pub k_nn: usize,
    pub tau_nn: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            k_nn: 64,
            tau_nn: 0.1,
        }
    }
}

fn joint_key(parts: &[&[f64]]) -> Result<Vec<f64>, RetrievalError> {
    let concat: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    normalize(&concat).map_err(|e| match e {
        EncoderError::DegenerateLatent { norm } => RetrievalError::DegenerateKey(norm),
        other => RetrievalError::Encoder(other),
    })
}

/// Fused key: raw proprio concatenated with the unit-normalized latent of the
/// observation, then jointly L2-normalized.
pub fn latent_key(
    spec: &EncoderSpec,
    params: &ParamVector,
    obs: &[f64],
    proprio: &[f64],
) -> Result<Vec<f64>, RetrievalError> {
    let z = encode(spec, params, std::slice::from_ref(&obs.to_vec()))?;
    let z_hat = normalize(&z[0])?;
    joint_key(&[proprio, &z_hat])
}

/// Raw-feature key for the no-learning baseline: unit-normalized
/// concatenation of observation and proprio.
pub fn raw_key(obs: &[f64], proprio: &[f64]) -> Result<Vec<f64>, RetrievalError> {
    joint_key(&[obs, proprio])
}

fn build_index<F>(
    dataset: &Dataset,
    windows: &[ActionWindow],
    mut key_fn: F,
) -> Result<LatentIndex, RetrievalError>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>, RetrievalError>,
{
    if windows.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let mut keys = Vec::with_capacity(windows.len());
    let mut actions = Vec::with_capacity(windows.len());
    for w in windows {
        let (obs, proprio) = observation_at(dataset, w.index)?;
        keys.push(key_fn(obs, proprio)?);
        actions.push(w.actions.clone());
    }
    let key_dim = keys[0].len();
    Ok(LatentIndex {
        keys,
        actions,
        key_dim,
    })
}

/// Indexes every window under the (typically EMA) encoder parameters.
pub fn build_latent_index(
    dataset: &Dataset,
    windows: &[ActionWindow],
    spec: &EncoderSpec,
    params: &ParamVector,
) -> Result<LatentIndex, RetrievalError> {
    build_index(dataset, windows, |obs, proprio| {
        latent_key(spec, params, obs, proprio)
    })
}

pub fn build_raw_index(
    dataset: &Dataset,
    windows: &[ActionWindow],
) -> Result<LatentIndex, RetrievalError> {
    build_index(dataset, windows, raw_key)
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    /// (entry ordinal, cosine similarity), descending similarity with ties
    /// broken by ascending ordinal.
    pub neighbors: Vec<(usize, f64)>,
    /// Softmax ensemble weights over the neighbors; sums to 1.
    pub weights: Vec<f64>,
    /// Weight-blended action window of the stored length.
    pub blended: Vec<Vec<f64>>,
}

/// Top-k cosine retrieval with softmax(sim / tau_nn) ensemble weights.
pub fn query(
    index: &LatentIndex,
    key: &[f64],
    cfg: &QueryConfig,
) -> Result<QueryResult, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if cfg.k_nn == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if !(cfg.tau_nn.is_finite() && cfg.tau_nn > 0.0) {
        return Err(RetrievalError::BadTau(cfg.tau_nn));
    }
    if key.len() != index.key_dim {
        return Err(RetrievalError::KeyDimMismatch {
            got: key.len(),
            expected: index.key_dim,
        });
    }

    let mut scored: Vec<(usize, f64)> = index
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| (i, k.iter().zip(key).map(|(a, b)| a * b).sum::<f64>()))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite similarities")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(cfg.k_nn.min(scored.len()));

    let max_c = scored
        .iter()
        .map(|(_, s)| s / cfg.tau_nn)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scored
        .iter()
        .map(|(_, s)| (s / cfg.tau_nn - max_c).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let t_p = index.actions[scored[0].0].len();
    let action_dim = index.actions[scored[0].0]
        .first()
        .map(|a| a.len())
        .unwrap_or(0);
    let mut blended = vec![vec![0.0; action_dim]; t_p];
    for ((ord, _), w) in scored.iter().zip(&weights) {
        for (t, step) in index.actions[*ord].iter().enumerate() {
            for (d, a) in step.iter().enumerate() {
                blended[t][d] += w * a;
            }
        }
    }
    Ok(QueryResult {
        neighbors: scored,
        weights,
        blended,
    })
}

/// A closed-loop policy: given the current observation and proprio, emit the
/// next chunk of actions to execute.
pub trait Controller {
    fn plan(&mut self, obs: &[f64], proprio: &[f64]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

fn take_chunk(mut blended: Vec<Vec<f64>>, t_a: usize) -> Result<Vec<Vec<f64>>, RetrievalError> {
    if t_a > blended.len() {
        return Err(RetrievalError::HorizonTooLong {
            t_a,
            t_p: blended.len(),
        });
    }
    blended.truncate(t_a);
    Ok(blended)
}

/// Retrieval controller over learned latents.
pub struct RetrievalController {
    pub index: LatentIndex,
    pub spec: EncoderSpec,
    pub params: ParamVector,
    pub cfg: QueryConfig,
    pub execute_horizon: usize,
}

impl Controller for RetrievalController {
    fn plan(&mut self, obs: &[f64], proprio: &[f64]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let key = latent_key(&self.spec, &self.params, obs, proprio)?;
        let result = query(&self.index, &key, &self.cfg)?;
        take_chunk(result.blended, self.execute_horizon)
    }
}

/// Same ensembling over raw features; the no-representation baseline.
pub struct RawKnnController {
    pub index: LatentIndex,
    pub cfg: QueryConfig,
    pub execute_horizon: usize,
}

impl Controller for RawKnnController {
    fn plan(&mut self, obs: &[f64], proprio: &[f64]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let key = raw_key(obs, proprio)?;
        let result = query(&self.index, &key, &self.cfg)?;
        take_chunk(result.blended, self.execute_horizon)
    }
}

/// Behavior-cloning controller: a trained regression network predicting the
/// flattened action window from (obs, proprio).
pub struct BcController {
    pub spec: EncoderSpec,
    pub params: ParamVector,
    pub action_dim: usize,
    pub execute_horizon: usize,
}

impl Controller for BcController {
    fn plan(&mut self, obs: &[f64], proprio: &[f64]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut x = obs.to_vec();
        x.extend_from_slice(proprio);
        let flat = encode(&self.spec, &self.params, std::slice::from_ref(&x))?
            .pop()
            .expect("one output row");
        let window: Vec<Vec<f64>> = flat
            .chunks(self.action_dim)
            .map(|c| c.to_vec())
            .collect();
        take_chunk(window, self.execute_horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::WindowIndex;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalize(v).unwrap()
    }

    fn index_from(keys: Vec<Vec<f64>>, actions: Vec<Vec<Vec<f64>>>) -> LatentIndex {
        let key_dim = keys[0].len();
        LatentIndex {
            keys,
            actions,
            key_dim,
        }
    }

    fn simple_index() -> LatentIndex {
        // four unit keys in the plane at 0, 30, 90, 180 degrees
        let angles: [f64; 4] = [0.0, 30f64.to_radians(), 90f64.to_radians(), std::f64::consts::PI];
        let keys = angles.iter().map(|a| vec![a.cos(), a.sin()]).collect();
        let actions = (0..4)
            .map(|i| vec![vec![i as f64, -(i as f64)]; 3])
            .collect();
        index_from(keys, actions)
    }

    #[test]
    fn k1_returns_exact_match() {
        let index = simple_index();
        let cfg = QueryConfig {
            k_nn: 1,
            tau_nn: 0.1,
        };
        let q = unit(&[0.5, 3f64.sqrt() / 2.0 * 0.5 + 0.01]); // closest to 30 deg? compute below
        let result = query(&index, &index.keys[2].clone(), &cfg).unwrap();
        assert_eq!(result.neighbors[0].0, 2);
        assert!((result.neighbors[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(result.weights, vec![1.0]);
        assert_eq!(result.blended, index.actions[2]);
        let _ = q;
    }

    #[test]
    fn equal_similarities_give_equal_weights_and_mean_blend() {
        // two keys symmetric about the query direction
        let keys = vec![unit(&[1.0, 0.1]), unit(&[1.0, -0.1])];
        let actions = vec![vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2]];
        let index = index_from(keys, actions);
        let cfg = QueryConfig {
            k_nn: 2,
            tau_nn: 0.05,
        };
        let result = query(&index, &[1.0, 0.0], &cfg).unwrap();
        assert!((result.weights[0] - 0.5).abs() < 1e-12);
        assert!((result.weights[1] - 0.5).abs() < 1e-12);
        for step in &result.blended {
            assert!((step[0] - 0.5).abs() < 1e-12);
            assert!((step[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one_and_order_is_descending() {
        let index = simple_index();
        let cfg = QueryConfig {
            k_nn: 4,
            tau_nn: 0.3,
        };
        let result = query(&index, &unit(&[0.9, 0.2]), &cfg).unwrap();
        let sum: f64 = result.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for pair in result.neighbors.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
        // higher similarity gets higher weight
        for pair in result.weights.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn small_tau_concentrates_on_nearest() {
        let index = simple_index();
        let cfg = QueryConfig {
            k_nn: 4,
            tau_nn: 1e-4,
        };
        let result = query(&index, &unit(&[0.95, 0.3]), &cfg).unwrap();
        assert!(result.weights[0] > 1.0 - 1e-9);
    }

    #[test]
    fn exact_ties_break_by_ordinal() {
        let keys = vec![unit(&[0.0, 1.0]), unit(&[1.0, 0.0]), unit(&[1.0, 0.0])];
        let actions = vec![vec![vec![9.0]]; 3];
        let index = index_from(keys, actions);
        let cfg = QueryConfig {
            k_nn: 2,
            tau_nn: 0.1,
        };
        let result = query(&index, &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(result.neighbors[0].0, 1);
        assert_eq!(result.neighbors[1].0, 2);
        assert!((result.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_index_uses_all_entries() {
        let index = simple_index();
        let cfg = QueryConfig {
            k_nn: 64,
            tau_nn: 0.1,
        };
        let result = query(&index, &unit(&[1.0, 1.0]), &cfg).unwrap();
        assert_eq!(result.neighbors.len(), 4);
    }

    #[test]
    fn query_validation_errors() {
        let index = simple_index();
        let good = QueryConfig {
            k_nn: 2,
            tau_nn: 0.1,
        };
        assert!(matches!(
            query(&index, &[1.0, 0.0, 0.0], &good),
            Err(RetrievalError::KeyDimMismatch { got: 3, expected: 2 })
        ));
        assert!(matches!(
            query(&index, &[1.0, 0.0], &QueryConfig { k_nn: 0, tau_nn: 0.1 }),
            Err(RetrievalError::ZeroK)
        ));
        assert!(matches!(
            query(&index, &[1.0, 0.0], &QueryConfig { k_nn: 2, tau_nn: 0.0 }),
            Err(RetrievalError::BadTau(_))
        ));
        let empty = LatentIndex {
            keys: vec![],
            actions: vec![],
            key_dim: 2,
        };
        assert!(matches!(
            query(&empty, &[1.0, 0.0], &good),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn keys_are_unit_norm_and_key_builders_reject_zero() {
        let k = raw_key(&[3.0, 0.0], &[4.0]).unwrap();
        let norm: f64 = k.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(matches!(
            raw_key(&[0.0, 0.0], &[0.0]),
            Err(RetrievalError::DegenerateKey(_))
        ));
    }

    #[test]
    fn raw_controller_executes_prefix_of_blend() {
        let index = simple_index();
        let mut ctrl = RawKnnController {
            index,
            cfg: QueryConfig {
                k_nn: 1,
                tau_nn: 0.1,
            },
            execute_horizon: 2,
        };
        // raw key for obs=[1,0], no proprio dims in this toy index
        let plan = ctrl.plan(&[1.0, 0.0], &[]).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0], vec![0.0, 0.0]);
        let mut too_long = RawKnnController {
            index: simple_index(),
            cfg: QueryConfig {
                k_nn: 1,
                tau_nn: 0.1,
            },
            execute_horizon: 5,
        };
        assert!(matches!(
            too_long.plan(&[1.0, 0.0], &[]),
            Err(RetrievalError::HorizonTooLong { t_a: 5, t_p: 3 })
        ));
    }

    #[test]
    fn latent_index_matches_per_query_keys() {
        use crate::demo::{enumerate_windows, Demonstration};
        use crate::encoder::{init_encoder, Activation};
        use std::collections::BTreeMap;

        let demos = (0..3)
            .map(|d| Demonstration {
                id: format!("d{d}"),
                observations: (0..5).map(|t| vec![d as f64 + 1.0, t as f64 * 0.3]).collect(),
                proprio: (0..5).map(|t| vec![t as f64 * 0.1]).collect(),
                actions: (0..5).map(|_| vec![0.01, 0.02]).collect(),
                meta: BTreeMap::new(),
            })
            .collect();
        let dataset = Dataset::new(demos).unwrap();
        let windows = enumerate_windows(&dataset, 3, 1).unwrap();
        let spec = EncoderSpec {
            input_dim: 2,
            hidden_dims: vec![8],
            output_dim: 3,
            activation: Activation::Tanh,
        };
        let params = init_encoder(&spec, 11);
        let index = build_latent_index(&dataset, &windows, &spec, &params).unwrap();
        assert_eq!(index.len(), windows.len());
        assert_eq!(index.key_dim, 1 + 3); // proprio + latent

        // querying with the key of entry 4 must return entry 4 first
        let w = &windows[4];
        let (obs, proprio) = observation_at(&dataset, w.index).unwrap();
        let key = latent_key(&spec, &params, obs, proprio).unwrap();
        let result = query(
            &index,
            &key,
            &QueryConfig {
                k_nn: 1,
                tau_nn: 0.1,
            },
        )
        .unwrap();
        assert_eq!(result.neighbors[0].0, 4);
        let _ = WindowIndex { demo_ord: 0, t: 0 };
    }
}

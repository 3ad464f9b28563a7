//! Dynamic Time Warping over multivariate action sequences, the index-aligned
//! L2 baseline metric, and an exhaustive-path oracle used by the test suites.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtwError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("oracle size limit exceeded: |A|*|B| = {size} > {limit}")]
    OracleTooLarge { size: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqMetric {
    Dtw,
    L2,
}

impl SeqMetric {
    pub fn tag(&self) -> &'static str {
        match self {
            SeqMetric::Dtw => "dtw",
            SeqMetric::L2 => "l2",
        }
    }
}

/// Metric choice plus per-dimension multiplicative scaling applied to every
/// action vector before the local Euclidean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqDistanceConfig {
    pub metric: SeqMetric,
    pub dim_scale: Vec<f64>,
}

impl SeqDistanceConfig {
    pub fn unit(metric: SeqMetric, dim: usize) -> Self {
        SeqDistanceConfig {
            metric,
            dim_scale: vec![1.0; dim],
        }
    }

    fn check_dims(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(), DtwError> {
        if a.is_empty() || b.is_empty() {
            return Err(DtwError::EmptySequence);
        }
        let dim = self.dim_scale.len();
        for v in a.iter().chain(b.iter()) {
            if v.len() != dim {
                return Err(DtwError::DimensionMismatch {
                    left: dim,
                    right: v.len(),
                });
            }
        }
        debug_assert!(self.dim_scale.iter().all(|s| s.is_finite() && *s > 0.0));
        Ok(())
    }

    /// Euclidean distance between two scaled action vectors.
    fn local_cost(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0;
        for ((x, y), s) in a.iter().zip(b).zip(&self.dim_scale) {
            let d = (x - y) * s;
            sum += d * d;
        }
        sum.sqrt()
    }

    /// Dispatches on the configured metric.
    pub fn distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, DtwError> {
        match self.metric {
            SeqMetric::Dtw => dtw_distance(a, b, self),
            SeqMetric::L2 => l2_sequence_distance(a, b, self),
        }
    }
}

/// Minimum cumulative local cost over monotone alignments anchored at
/// (first, first) and (last, last), with steps (1,0), (0,1), (1,1).
pub fn dtw_distance(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    cfg: &SeqDistanceConfig,
) -> Result<f64, DtwError> {
    cfg.check_dims(a, b)?;
    let (n, m) = (a.len(), b.len());
    // Rolling two-row dynamic program over the cumulative cost matrix.
    let mut prev = vec![f64::INFINITY; m];
    let mut curr = vec![f64::INFINITY; m];
    for i in 0..n {
        for j in 0..m {
            let cost = cfg.local_cost(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(prev[j]);
                }
                if j > 0 {
                    best = best.min(curr[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = best.min(prev[j - 1]);
                }
                best
            };
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1])
}

pub const ORACLE_SIZE_LIMIT: usize = 64;

/// Exhaustively enumerates every boundary-anchored monotone path and returns
/// the minimal cumulative cost. Only tractable for tiny inputs; kept as an
/// independent check on the dynamic program.
pub fn dtw_oracle(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    cfg: &SeqDistanceConfig,
) -> Result<f64, DtwError> {
    cfg.check_dims(a, b)?;
    let size = a.len() * b.len();
    if size > ORACLE_SIZE_LIMIT {
        return Err(DtwError::OracleTooLarge {
            size,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    fn walk(
        a: &[Vec<f64>],
        b: &[Vec<f64>],
        cfg: &SeqDistanceConfig,
        i: usize,
        j: usize,
        acc: f64,
        best: &mut f64,
    ) {
        let acc = acc + cfg.local_cost(&a[i], &b[j]);
        if i == a.len() - 1 && j == b.len() - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, cfg, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, cfg, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, cfg, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, cfg, 0, 0, 0.0, &mut best);
    Ok(best)
}

/// Index-aligned distance without warping: sum over t of the local cost
/// between a[t] and b[t]. Requires equal lengths.
pub fn l2_sequence_distance(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    cfg: &SeqDistanceConfig,
) -> Result<f64, DtwError> {
    cfg.check_dims(a, b)?;
    if a.len() != b.len() {
        return Err(DtwError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| cfg.local_cost(x, y))
        .sum())
}

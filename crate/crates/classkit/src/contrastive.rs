//! Soft InfoNCE over a batch similarity matrix: the weighted log-softmax
//! loss, its analytic gradient on the latents, and the per-anchor
//! KL + entropy decomposition used as a runtime diagnostic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("latent row {row} has norm {norm} (must be unit within 1e-6)")]
    NotNormalized { row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("batch must have at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("shape mismatch: similarity is {sim}x{sim}, weights are {weights}x{weights}")]
    ShapeMismatch { sim: usize, weights: usize },
    #[error("every anchor has an all-zero weight row")]
    AllWeightRowsZero,
    #[error("weight matrix invalid: {0}")]
    BadWeights(String),
}

/// Temperature-scaled pairwise similarity logits S_ij. The diagonal is
/// present but never enters a softmax denominator.
#[derive(Debug, Clone)]
pub struct BatchSimilarity {
    pub s: Vec<Vec<f64>>,
    pub tau: f64,
}

impl BatchSimilarity {
    /// Wraps raw logits without the unit-norm check; used by diagnostics and
    /// tests that probe the loss with arbitrary similarity matrices.
    pub fn from_logits(s: Vec<Vec<f64>>, tau: f64) -> Self {
        BatchSimilarity { s, tau }
    }

    pub fn batch_size(&self) -> usize {
        self.s.len()
    }
}

/// Nonnegative in-batch positive weights with zero diagonal.
#[derive(Debug, Clone)]
pub struct BatchWeights {
    pub w: Vec<Vec<f64>>,
}

impl BatchWeights {
    pub fn new(w: Vec<Vec<f64>>) -> Result<Self, ContrastiveError> {
        let b = w.len();
        for (i, row) in w.iter().enumerate() {
            if row.len() != b {
                return Err(ContrastiveError::BadWeights(format!(
                    "row {i} has length {} in a {b}-row matrix",
                    row.len()
                )));
            }
            if row[i] != 0.0 {
                return Err(ContrastiveError::BadWeights(format!(
                    "diagonal entry ({i},{i}) is {}, must be 0",
                    row[i]
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ContrastiveError::BadWeights(format!(
                        "entry ({i},{j}) = {v} outside [0,1]"
                    )));
                }
            }
        }
        Ok(BatchWeights { w })
    }
}

/// Loss values per batch: the mean over anchors with a nonzero weight row,
/// plus the per-anchor breakdown (None for inactive anchors).
#[derive(Debug, Clone)]
pub struct LossReport {
    pub mean_loss: f64,
    pub per_anchor: Vec<Option<f64>>,
    pub active_anchor_count: usize,
}

/// S_ij = z_hat_i . z_hat_j / tau. Rows must be unit-norm within 1e-6.
pub fn similarity_matrix(
    z_hat_batch: &[Vec<f64>],
    tau: f64,
) -> Result<BatchSimilarity, ContrastiveError> {
    if tau <= 0.0 {
        return Err(ContrastiveError::BadTemperature(tau));
    }
    let b = z_hat_batch.len();
    if b < 2 {
        return Err(ContrastiveError::BatchTooSmall(b));
    }
    for (row, z) in z_hat_batch.iter().enumerate() {
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ContrastiveError::NotNormalized { row, norm });
        }
    }
    let mut s = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in i..b {
            let dot: f64 = z_hat_batch[i]
                .iter()
                .zip(&z_hat_batch[j])
                .map(|(a, c)| a * c)
                .sum();
            s[i][j] = dot / tau;
            s[j][i] = s[i][j];
        }
    }
    Ok(BatchSimilarity { s, tau })
}

fn check_shapes(sim: &BatchSimilarity, weights: &BatchWeights) -> Result<(), ContrastiveError> {
    if sim.s.len() != weights.w.len() {
        return Err(ContrastiveError::ShapeMismatch {
            sim: sim.s.len(),
            weights: weights.w.len(),
        });
    }
    Ok(())
}

/// Stable log-softmax of row i with the diagonal excluded:
/// log p_ij = S_ij - log sum_{k != i} exp(S_ik), computed with
/// max-subtraction.
fn log_softmax_row(s_row: &[f64], i: usize) -> Vec<f64> {
    let max = s_row
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s_row
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let log_z = max + sum.ln();
    s_row.iter().map(|&v| v - log_z).collect()
}

/// Weighted log-softmax loss over positive pairs. Anchors whose in-batch
/// weight row is all zero are skipped; the mean is over active anchors.
pub fn soft_infonce(
    sim: &BatchSimilarity,
    weights: &BatchWeights,
) -> Result<LossReport, ContrastiveError> {
    check_shapes(sim, weights)?;
    let b = sim.s.len();
    let mut per_anchor = Vec::with_capacity(b);
    let mut total = 0.0;
    let mut active = 0usize;
    for i in 0..b {
        let w_row = &weights.w[i];
        let w_sum: f64 = w_row.iter().sum();
        if w_sum <= 0.0 {
            per_anchor.push(None);
            continue;
        }
        let log_p = log_softmax_row(&sim.s[i], i);
        let weighted: f64 = w_row
            .iter()
            .zip(&log_p)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (&w, &lp))| w * lp)
            .sum();
        let loss = -weighted / w_sum;
        per_anchor.push(Some(loss));
        total += loss;
        active += 1;
    }
    if active == 0 {
        return Err(ContrastiveError::AllWeightRowsZero);
    }
    Ok(LossReport {
        mean_loss: total / active as f64,
        per_anchor,
        active_anchor_count: active,
    })
}

/// Exact gradient of the mean loss with respect to each latent row. The
/// caller chains the normalization Jacobian when the latents came from an
/// unnormalized encoder output.
pub fn soft_infonce_grad(
    sim: &BatchSimilarity,
    weights: &BatchWeights,
    z_hat_batch: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, ContrastiveError> {
    check_shapes(sim, weights)?;
    let b = sim.s.len();
    assert_eq!(z_hat_batch.len(), b, "latent batch size mismatch");
    let active = weights
        .w
        .iter()
        .filter(|row| row.iter().sum::<f64>() > 0.0)
        .count();
    if active == 0 {
        return Err(ContrastiveError::AllWeightRowsZero);
    }

    // dL/dS_ij = (p_ij - q_ij) / active for active anchors, 0 otherwise.
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let w_sum: f64 = weights.w[i].iter().sum();
        if w_sum <= 0.0 {
            continue;
        }
        let log_p = log_softmax_row(&sim.s[i], i);
        for j in 0..b {
            if j == i {
                continue;
            }
            let p = log_p[j].exp();
            let q = weights.w[i][j] / w_sum;
            g[i][j] = (p - q) / active as f64;
        }
    }

    // S_ij = z_i . z_j / tau, so dL/dz_a = ((G + G^T) z)_a / tau.
    let dim = z_hat_batch[0].len();
    let mut grad = vec![vec![0.0; dim]; b];
    for i in 0..b {
        for j in 0..b {
            let coeff = (g[i][j] + g[j][i]) / sim.tau;
            if coeff == 0.0 {
                continue;
            }
            for (gd, zj) in grad[i].iter_mut().zip(&z_hat_batch[j]) {
                *gd += coeff * zj;
            }
        }
    }
    Ok(grad)
}

/// Per-anchor KL(Q_i || P_i) and entropy H(Q_i), where Q is the normalized
/// weight row and P the diagonal-excluded softmax of the similarity row.
/// The per-anchor loss equals kl + entropy exactly.
pub fn kl_decomposition(
    sim: &BatchSimilarity,
    weights: &BatchWeights,
) -> Result<Vec<Option<(f64, f64)>>, ContrastiveError> {
    check_shapes(sim, weights)?;
    let b = sim.s.len();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let w_sum: f64 = weights.w[i].iter().sum();
        if w_sum <= 0.0 {
            out.push(None);
            continue;
        }
        let log_p = log_softmax_row(&sim.s[i], i);
        let mut kl = 0.0;
        let mut entropy = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            let q = weights.w[i][j] / w_sum;
            if q > 0.0 {
                // 0 * log 0 := 0 is handled by the q > 0 guard.
                kl += q * (q.ln() - log_p[j]);
                entropy -= q * q.ln();
            }
        }
        out.push(Some((kl, entropy)));
    }
    Ok(out)
}

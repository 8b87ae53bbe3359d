//! Retrieval objective: similarity distribution matching plus the balance
//! penalty.
//!
//! For a batch of N image/text feature pairs with identity labels, the true
//! match distribution `q` puts uniform mass on same-identity pairs per row.
//! The predicted distribution `p` is a row softmax of cosine similarities
//! divided by a temperature. The loss is the mean-over-rows KL divergence
//! `(1/N)·Σ_ij p_ij·log(p_ij/(q_ij+ε))`, applied in both retrieval
//! directions (image→text and text→image via the transposed match matrix).
//! The total objective adds `α·(lb_image + lb_text)` on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Temperature and log-guard for the matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdmConfig {
    /// Softmax temperature on cosine similarities.
    pub tau: f64,
    /// Added to `q` inside the log's denominator, exactly as the loss is
    /// written; terms where `q + epsilon == 0` are skipped (see below).
    pub epsilon: f64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        SdmConfig {
            tau: 0.02,
            epsilon: 1e-8,
        }
    }
}

impl SdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// True-match distribution from identity labels: row i is uniform over
/// `{j : id_j = id_i}`. Every row sums to 1 (each element matches itself).
/// Returned row-major, N×N.
pub fn match_distribution(identity_ids: &[u64]) -> Result<Vec<f64>> {
    let n = identity_ids.len();
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "match_distribution",
            msg: "empty batch".into(),
        });
    }
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        let matches = identity_ids
            .iter()
            .filter(|&&id| id == identity_ids[i])
            .count() as f64;
        for j in 0..n {
            if identity_ids[j] == identity_ids[i] {
                q[i * n + j] = 1.0 / matches;
            }
        }
    }
    Ok(q)
}

/// One direction of the matching loss over unit-norm feature rows.
///
/// `p = softmax(V·Tᵀ / τ)` per row; returns
/// `(1/N)·Σ_ij p_ij·(log p_ij − log(q_ij + ε))` as a scalar node,
/// differentiable through `V` and `T`. Where `q_ij + ε` is exactly zero the
/// true divergence is infinite for any `p_ij > 0`; those terms are skipped
/// (their mask constant is 0), which keeps ε = 0 usable on saturated cases.
/// At the default ε nothing is ever skipped.
pub fn sdm_i2t(
    tape: &mut Tape,
    v: TensorId,
    t: TensorId,
    q: &[f64],
    cfg: &SdmConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let (n, d) = batch_shape(tape, v, t)?;
    if q.len() != n * n {
        return Err(Error::InvalidArgument {
            op: "sdm_i2t",
            msg: format!("q has {} entries, batch needs {}", q.len(), n * n),
        });
    }
    check_unit_rows(tape, v, n, d, "V")?;
    check_unit_rows(tape, t, n, d, "T")?;
    check_q_rows(q, n)?;

    let tt = tape.transpose(t)?;
    let sims = tape.matmul(v, tt)?;
    let scaled = tape.scale(sims, 1.0 / cfg.tau)?;
    let p = tape.softmax(scaled, 1)?;
    let logp = tape.log(p)?;

    let mut log_dq = vec![0.0; n * n];
    let mut mask = vec![0.0; n * n];
    for (i, &qv) in q.iter().enumerate() {
        let dq = qv + cfg.epsilon;
        if dq > 0.0 {
            log_dq[i] = dq.ln();
            mask[i] = 1.0;
        }
    }
    let log_dq = tape.constant(log_dq, &[n, n])?;
    let mask = tape.constant(mask, &[n, n])?;
    let diff = tape.sub(logp, log_dq)?;
    let terms = tape.mul(p, diff)?;
    let kept = tape.mul(terms, mask)?;
    let total = tape.sum_all(kept)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Both retrieval directions: image→text plus text→image, the latter built
/// from the transposed match matrix.
pub fn sdm_bidirectional(
    tape: &mut Tape,
    v: TensorId,
    t: TensorId,
    q: &[f64],
    cfg: &SdmConfig,
) -> Result<TensorId> {
    let (n, _) = batch_shape(tape, v, t)?;
    if q.len() != n * n {
        return Err(Error::InvalidArgument {
            op: "sdm_bidirectional",
            msg: format!("q has {} entries, batch needs {}", q.len(), n * n),
        });
    }
    let i2t = sdm_i2t(tape, v, t, q, cfg)?;
    let mut qt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            qt[j * n + i] = q[i * n + j];
        }
    }
    let t2i = sdm_i2t(tape, t, v, &qt, cfg)?;
    tape.add(i2t, t2i)
}

/// Total objective: `sdm + α·(lb_image + lb_text)`. Branches without hooked
/// layers contribute nothing; α is applied exactly once, here.
pub fn total_loss(
    tape: &mut Tape,
    sdm: TensorId,
    lb_image: Option<TensorId>,
    lb_text: Option<TensorId>,
    alpha: f64,
) -> Result<TensorId> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument {
            op: "total_loss",
            msg: format!("alpha must be >= 0, got {alpha}"),
        });
    }
    let lb_sum = match (lb_image, lb_text) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    };
    match lb_sum {
        Some(lb) if alpha != 0.0 => {
            let scaled = tape.scale(lb, alpha)?;
            tape.add(sdm, scaled)
        }
        _ => Ok(sdm),
    }
}

fn batch_shape(tape: &Tape, v: TensorId, t: TensorId) -> Result<(usize, usize)> {
    let vs = tape.shape(v).to_vec();
    let ts = tape.shape(t).to_vec();
    if vs.len() != 2 || ts.len() != 2 || vs != ts {
        return Err(Error::ShapeMismatch {
            op: "sdm",
            left: vs,
            right: ts,
        });
    }
    Ok((vs[0], vs[1]))
}

fn check_unit_rows(tape: &Tape, x: TensorId, n: usize, d: usize, which: &str) -> Result<()> {
    let data = tape.data(x);
    for i in 0..n {
        let norm: f64 = data[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>();
        if (norm.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "{which} row {i} has L2 norm {:.9}, expected 1 (features must be unit-normalized)",
                norm.sqrt()
            )));
        }
    }
    Ok(())
}

fn check_q_rows(q: &[f64], n: usize) -> Result<()> {
    for i in 0..n {
        let row = &q[i * n..(i + 1) * n];
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "match distribution row {i} has negative entries"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "match distribution row {i} sums to {sum:.9}, expected 1"
            )));
        }
    }
    Ok(())
}

//! Training objectives: masked next-token prediction, in-batch contrastive
//! loss over cosine similarities, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{GemError, Result};
use crate::masking::LossMask;
use crate::tensor::{log_sum_exp, Real};

/// Upper temperature bound, `ln 100`.
pub const MAX_TEMPERATURE: f64 = 4.605_170_185_988_092;
pub const DEFAULT_SWITCH_STEP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub cl: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Mean cross-entropy over included rows.
///
/// `logits` is `[mask.len(), vocab]`; row `i` predicts `targets[i]`.
pub fn ntp_loss<T: Real>(logits: &[T], targets: &[TokenId], mask: &LossMask, vocab: usize) -> Result<T> {
    ntp_loss_grad(logits, targets, mask, vocab).map(|(l, _)| l)
}

/// [`ntp_loss`] together with its gradient w.r.t. `logits`.
pub fn ntp_loss_grad<T: Real>(
    logits: &[T],
    targets: &[TokenId],
    mask: &LossMask,
    vocab: usize,
) -> Result<(T, Vec<T>)> {
    let rows = mask.len();
    if targets.len() != rows || logits.len() != rows * vocab {
        return Err(GemError::invalid(format!(
            "ntp shapes: {} logits, {} targets, {rows} mask rows, vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(GemError::invalid("loss mask excludes every position"));
    }
    let inv = T::one() / T::c(count as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &inc) in mask.include().iter().enumerate() {
        if !inc {
            continue;
        }
        let target = targets[i] as usize;
        if target >= vocab {
            return Err(GemError::TokenOutOfRange {
                id: targets[i],
                size: vocab,
            });
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let lse = log_sum_exp(row);
        total += lse - row[target];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for (gj, &lj) in g.iter_mut().zip(row) {
            *gj = (lj - lse).exp() * inv;
        }
        g[target] -= inv;
    }
    Ok((total * inv, grad))
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        None
    } else {
        Some(dot / (na * nb))
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveGrad<T> {
    pub loss: T,
    /// Gradient w.r.t. the query rows, `[B, dim]`.
    pub d_query: Vec<T>,
    /// Gradient w.r.t. the document rows, `[B, dim]`.
    pub d_doc: Vec<T>,
    pub d_temperature: T,
}

fn check_batch<T: Real>(q: &[T], d: &[T], dim: usize) -> Result<usize> {
    if dim == 0 || !q.len().is_multiple_of(dim) || q.len() != d.len() {
        return Err(GemError::invalid("query and document batches must be [B, dim]"));
    }
    let b = q.len() / dim;
    if b < 2 {
        return Err(GemError::invalid(format!("contrastive loss needs B >= 2, got {b}")));
    }
    for (i, row) in q.chunks_exact(dim).chain(d.chunks_exact(dim)).enumerate() {
        if row.iter().all(|&x| x == T::zero()) {
            return Err(GemError::ZeroNorm { row: i % b });
        }
    }
    Ok(b)
}

/// InfoNCE with cosine similarity: row `i` of `doc` is the positive for row
/// `i` of `query`, every other row of `doc` is a negative.
pub fn contrastive_loss<T: Real>(query: &[T], doc: &[T], dim: usize, temperature: T) -> Result<T> {
    contrastive_loss_grad(query, doc, dim, temperature, false).map(|g| g.loss)
}

/// Loss and gradients. With `symmetric`, the doc-to-query direction is
/// averaged in.
pub fn contrastive_loss_grad<T: Real>(
    query: &[T],
    doc: &[T],
    dim: usize,
    temperature: T,
    symmetric: bool,
) -> Result<ContrastiveGrad<T>> {
    let b = check_batch(query, doc, dim)?;
    let norm = |row: &[T]| row.iter().map(|&x| x * x).sum::<T>().sqrt();
    let qn: Vec<T> = query.chunks_exact(dim).map(norm).collect();
    let dn: Vec<T> = doc.chunks_exact(dim).map(norm).collect();
    let qrow = |i: usize| &query[i * dim..(i + 1) * dim];
    let drow = |j: usize| &doc[j * dim..(j + 1) * dim];

    let mut sim = vec![T::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            let dot: T = qrow(i).iter().zip(drow(j)).map(|(&x, &y)| x * y).sum();
            sim[i * b + j] = dot / (qn[i] * dn[j]);
        }
    }

    // dL/dsim accumulated over the requested directions
    let mut dsim = vec![T::zero(); b * b];
    let mut loss = T::zero();
    let mut d_temp = T::zero();
    let directions: &[bool] = if symmetric { &[false, true] } else { &[false] };
    let count = T::c((b * directions.len()) as f64);
    let weight = T::one() / count;
    let mut row = vec![T::zero(); b];
    for &transposed in directions {
        for i in 0..b {
            let at = |j: usize| if transposed { sim[j * b + i] } else { sim[i * b + j] };
            for (j, r) in row.iter_mut().enumerate() {
                *r = temperature * at(j);
            }
            let lse = log_sum_exp(&row);
            loss += lse - row[i];
            let mut expected = T::zero();
            for j in 0..b {
                let p = (row[j] - lse).exp();
                expected += p * at(j);
                let g = (p - if i == j { T::one() } else { T::zero() }) * temperature * weight;
                if transposed {
                    dsim[j * b + i] += g;
                } else {
                    dsim[i * b + j] += g;
                }
            }
            d_temp += (expected - at(i)) * weight;
        }
    }

    // chain through cosine: ds/dq = d/(|q||d|) - s q/|q|^2
    let mut d_query = vec![T::zero(); b * dim];
    let mut d_doc = vec![T::zero(); b * dim];
    for i in 0..b {
        for j in 0..b {
            let g = dsim[i * b + j];
            if g == T::zero() {
                continue;
            }
            let s = sim[i * b + j];
            let inv = T::one() / (qn[i] * dn[j]);
            let (q, d) = (qrow(i), drow(j));
            let dq = &mut d_query[i * dim..(i + 1) * dim];
            for c in 0..dim {
                dq[c] += g * (d[c] * inv - s * q[c] / (qn[i] * qn[i]));
            }
            let dd = &mut d_doc[j * dim..(j + 1) * dim];
            for c in 0..dim {
                dd[c] += g * (q[c] * inv - s * d[c] / (dn[j] * dn[j]));
            }
        }
    }
    Ok(ContrastiveGrad {
        loss: loss / count,
        d_query,
        d_doc,
        d_temperature: d_temp,
    })
}

pub fn combined_loss(ntp: f64, cl: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GemError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(LossBreakdown {
        ntp,
        cl,
        alpha,
        total: (1.0 - alpha) * ntp + alpha * cl,
    })
}

/// Pure NTP before `switch_step`, pure contrastive from it on.
pub fn alpha_schedule(step: usize, switch_step: usize) -> f64 {
    if step < switch_step {
        0.0
    } else {
        1.0
    }
}

pub fn clamp_temperature<T: Real>(temperature: T) -> T {
    temperature.max(T::zero()).min(T::c(MAX_TEMPERATURE))
}

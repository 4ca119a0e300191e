//! Text embeddings read off the final-layer states of appended special
//! tokens, plus the plain mean-pool baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab, EMB};
use crate::error::{GemError, Result};
use crate::masking::{AttentionMask, SegmentedSequence, SequenceKind};
use crate::model::{forward_batch, ModelState, SeqInput};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Concat,
}

impl std::str::FromStr for Pooling {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "concat" => Ok(Self::Concat),
            other => Err(GemError::invalid(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub pooling: Pooling,
    /// Token count of the encoded input before any truncation.
    pub source_len: usize,
    pub truncated: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Pools `k` consecutive `d`-wide rows starting at `first`.
pub(crate) fn pool<T: Real>(hidden: &[T], first: usize, k: usize, d: usize, pooling: Pooling) -> Vec<T> {
    let rows = &hidden[first * d..(first + k) * d];
    match pooling {
        Pooling::Concat => rows.to_vec(),
        Pooling::Mean => {
            let mut out = vec![T::zero(); d];
            for row in rows.chunks_exact(d) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            let inv = T::one() / T::c(k as f64);
            out.iter_mut().for_each(|o| *o *= inv);
            out
        }
    }
}

/// Scatters the gradient of a pooled vector back onto the pooled rows.
pub(crate) fn pool_backward<T: Real>(
    d_pooled: &[T],
    d_hidden: &mut [T],
    first: usize,
    k: usize,
    d: usize,
    pooling: Pooling,
) {
    let rows = &mut d_hidden[first * d..(first + k) * d];
    match pooling {
        Pooling::Concat => {
            for (r, &g) in rows.iter_mut().zip(d_pooled) {
                *r += g;
            }
        }
        Pooling::Mean => {
            let inv = T::one() / T::c(k as f64);
            for row in rows.chunks_exact_mut(d) {
                for (r, &g) in row.iter_mut().zip(d_pooled) {
                    *r += g * inv;
                }
            }
        }
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

fn prepare(tokens: &[TokenId], budget: usize) -> Result<(Vec<TokenId>, bool)> {
    if tokens.is_empty() {
        return Err(GemError::invalid("cannot embed empty text"));
    }
    if tokens.contains(&EMB) {
        return Err(GemError::invalid("input already contains the special token"));
    }
    if tokens.len() > budget {
        log::warn!("input of {} tokens truncated to {budget}", tokens.len());
        Ok((tokens[..budget].to_vec(), true))
    } else {
        Ok((tokens.to_vec(), false))
    }
}

/// Embeds an already-encoded text by appending `k` special tokens.
pub fn embed_tokens<T: Real>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    k: usize,
    pooling: Pooling,
) -> Result<Embedding> {
    if k == 0 {
        return Err(GemError::invalid("k must be at least 1"));
    }
    let cfg = state.config();
    let budget = cfg.max_positions.checked_sub(k).filter(|&b| b > 0).ok_or_else(|| {
        GemError::invalid(format!("k = {k} leaves no room under {} positions", cfg.max_positions))
    })?;
    let (mut body, truncated) = prepare(tokens, budget)?;
    let m = body.len();
    body.extend(std::iter::repeat_n(EMB, k));
    let seq = SegmentedSequence::new(body, m, k, 0, SequenceKind::Compress)?;
    let mask = seq.mask();
    let positions: Vec<usize> = (0..seq.len()).collect();
    let acts = forward_batch(
        state,
        &[SeqInput {
            tokens: seq.tokens(),
            positions: &positions,
            mask: &mask,
        }],
        None,
    )?;
    Ok(Embedding {
        vector: to_f64(&pool(&acts.hidden, m, k, cfg.d_model, pooling)),
        pooling,
        source_len: tokens.len(),
        truncated,
    })
}

pub fn embed_text<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocab,
    text: &str,
    k: usize,
    pooling: Pooling,
) -> Result<Embedding> {
    embed_tokens(state, &vocab.encode(text), k, pooling)
}

/// Mean of the last-layer states over every token of a plain causal pass.
pub fn embed_baseline_tokens<T: Real>(state: &ModelState<T>, tokens: &[TokenId]) -> Result<Embedding> {
    let cfg = state.config();
    let (body, truncated) = prepare(tokens, cfg.max_positions)?;
    let mask = AttentionMask::causal(body.len());
    let positions: Vec<usize> = (0..body.len()).collect();
    let acts = forward_batch(
        state,
        &[SeqInput {
            tokens: &body,
            positions: &positions,
            mask: &mask,
        }],
        None,
    )?;
    Ok(Embedding {
        vector: to_f64(&pool(&acts.hidden, 0, body.len(), cfg.d_model, Pooling::Mean)),
        pooling: Pooling::Mean,
        source_len: tokens.len(),
        truncated,
    })
}

pub fn embed_baseline_meanpool<T: Real>(state: &ModelState<T>, vocab: &Vocab, text: &str) -> Result<Embedding> {
    embed_baseline_tokens(state, &vocab.encode(text))
}

pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_vec(&a.vector, &b.vector)
}

pub fn cosine_vec(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GemError::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    crate::objective::cosine(a, b)
        .map(|c| c.clamp(-1.0, 1.0))
        .ok_or(GemError::ZeroNorm { row: 0 })
}

/// How a batch of texts is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum EmbedMethod {
    Special { k: usize, pooling: Pooling },
    Baseline,
}

impl EmbedMethod {
    pub fn embed<T: Real>(&self, state: &ModelState<T>, tokens: &[TokenId]) -> Result<Embedding> {
        match *self {
            Self::Special { k, pooling } => embed_tokens(state, tokens, k, pooling),
            Self::Baseline => embed_baseline_tokens(state, tokens),
        }
    }
}

/// Embeds every input in parallel; output order follows input order and
/// matches sequential evaluation exactly.
pub fn embed_many<T: Real>(
    state: &ModelState<T>,
    inputs: &[Vec<TokenId>],
    method: EmbedMethod,
) -> Result<Vec<Embedding>> {
    inputs.par_iter().map(|t| method.embed(state, t)).collect()
}

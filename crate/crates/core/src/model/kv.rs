//! Special-token KV capture and decoding from that cache alone.
//!
//! Decoded tokens keep the absolute positions they would have had as the
//! suffix of the full sequence: token `t` sits at `m + k + t`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_batch, head_forward, SeqInput};
use super::ModelState;
use crate::corpus::{TokenId, EOS};
use crate::error::{GemError, Result};
use crate::masking::SegmentedSequence;
use crate::tensor::{gemm, layer_norm, linear, Real, View};

#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheSnapshot<T> {
    /// `keys[layer]` is `[k, d_model]`, i.e. `(k, n_heads, head_dim)` row-major.
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    /// Absolute positions of the special tokens, `m..m+k`.
    pub positions: Vec<usize>,
    pub k: usize,
    pub m: usize,
    /// Final hidden state of the last special token; its logits predict the
    /// first decoded token.
    pub last_hidden: Vec<T>,
}

impl<T> KVCacheSnapshot<T> {
    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Position the first decoded token occupies.
    pub fn next_position(&self) -> usize {
        self.m + self.k
    }
}

pub fn capture_special_kv<T: Real>(
    state: &ModelState<T>,
    seq: &SegmentedSequence,
) -> Result<KVCacheSnapshot<T>> {
    if seq.k() == 0 {
        return Err(GemError::invalid("cannot capture a cache without special tokens"));
    }
    let d = state.config().d_model;
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
    let specials = seq.special_positions();
    let rows = |buf: &[T]| buf[specials.start * d..specials.end * d].to_vec();
    let last = specials.end - 1;
    Ok(KVCacheSnapshot {
        keys: acts.layers.iter().map(|l| rows(l.k())).collect(),
        values: acts.layers.iter().map(|l| rows(l.v())).collect(),
        positions: specials.collect(),
        k: seq.k(),
        m: seq.m(),
        last_hidden: acts.hidden[last * d..(last + 1) * d].to_vec(),
    })
}

/// Incremental decoder whose context is exactly the special-token cache plus
/// the tokens fed so far.
pub struct BottleneckDecoder<'a, T: Real> {
    state: &'a ModelState<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    cached: usize,
    next_pos: usize,
    first_logits: Vec<T>,
}

impl<'a, T: Real> BottleneckDecoder<'a, T> {
    pub fn new(state: &'a ModelState<T>, cache: &KVCacheSnapshot<T>) -> Result<Self> {
        let cfg = state.config();
        if cache.keys.len() != cfg.n_layers || cache.values.len() != cfg.n_layers {
            return Err(GemError::invalid("cache layer count does not match the model"));
        }
        if cache.keys.iter().chain(&cache.values).any(|t| t.len() != cache.k * cfg.d_model) {
            return Err(GemError::invalid("cache tensor shape does not match the model"));
        }
        Ok(Self {
            state,
            keys: cache.keys.clone(),
            values: cache.values.clone(),
            cached: cache.k,
            next_pos: cache.next_position(),
            first_logits: head_forward(state, &cache.last_hidden),
        })
    }

    /// Logits predicting the first suffix token.
    pub fn first_logits(&self) -> &[T] {
        &self.first_logits
    }

    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    /// Feeds `token` at the next position and returns the logits it produces.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<T>> {
        let state = self.state;
        let cfg = state.config();
        let layout = state.layout();
        let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        if self.next_pos >= cfg.max_positions {
            return Err(GemError::PositionOverflow {
                position: self.next_pos,
                max: cfg.max_positions,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(GemError::TokenOutOfRange {
                id: token,
                size: cfg.vocab_size,
            });
        }
        let te = state.slice(layout.tok_emb + token as usize * d, d);
        let pe = state.slice(layout.pos_emb + self.next_pos * d, d);
        let mut x: Vec<T> = te.iter().zip(pe).map(|(&a, &b)| a + b).collect();

        let ctx = self.cached + 1;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut scores = vec![T::zero(); ctx];
        for (li, lo) in layout.layers.iter().enumerate() {
            let p = |off: usize, len: usize| state.slice(off, len);
            let (a, _, _) = layer_norm(&x, p(lo.ln1_g, d), p(lo.ln1_b, d), d);
            let q = linear(&a, p(lo.wq, d * d), p(lo.bq, d), 1, d, d);
            let k = linear(&a, p(lo.wk, d * d), p(lo.bk, d), 1, d, d);
            let v = linear(&a, p(lo.wv, d * d), p(lo.bv, d), 1, d, d);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);

            let keys = &self.keys[li];
            let values = &self.values[li];
            let mut cat = vec![T::zero(); d];
            for h in 0..nh {
                let qv = View::block(0, 1, d, h * dh, dh);
                let kv = View::block(0, ctx, d, h * dh, dh);
                gemm(scale, &q, qv, keys, kv.t(), T::zero(), &mut scores, View::rm(1, ctx));
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                for s in scores.iter_mut() {
                    *s *= inv;
                }
                gemm(T::one(), &scores, View::rm(1, ctx), values, kv, T::zero(), &mut cat, qv);
            }
            let attn = linear(&cat, p(lo.wo, d * d), p(lo.bo, d), 1, d, d);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += *ai;
            }
            let (b, _, _) = layer_norm(&x, p(lo.ln2_g, d), p(lo.ln2_b, d), d);
            let u = linear(&b, p(lo.w1, d * ff), p(lo.b1, ff), 1, d, ff);
            let g: Vec<T> = u.iter().map(|&z| crate::tensor::gelu(z)).collect();
            let mlp = linear(&g, p(lo.w2, ff * d), p(lo.b2, d), 1, ff, d);
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += *mi;
            }
            if !crate::tensor::all_finite(&x) {
                return Err(GemError::NonFiniteActivation { layer: li });
            }
        }
        let (hidden, _, _) = layer_norm(
            &x,
            state.slice(layout.lnf_g, d),
            state.slice(layout.lnf_b, d),
            d,
        );
        self.cached += 1;
        self.next_pos += 1;
        Ok(head_forward(state, &hidden))
    }

    /// Logits for each position when the given suffix is teacher-forced:
    /// entry 0 predicts `suffix[0]`, entry `i + 1` is produced by `suffix[i]`.
    pub fn teacher_force(mut self, suffix: &[TokenId]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(suffix.len() + 1);
        out.push(self.first_logits.clone());
        for &tok in suffix {
            out.push(self.step(tok)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Sample { seed: u64 },
}

fn argmax<T: Real>(logits: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Generates up to `max_new` tokens from the cache alone, stopping before
/// an EOS.
pub fn decode_from_cache<T: Real>(
    state: &ModelState<T>,
    cache: &KVCacheSnapshot<T>,
    max_new: usize,
    strategy: Decoding,
) -> Result<Vec<TokenId>> {
    if max_new == 0 {
        return Err(GemError::invalid("max_new must be at least 1"));
    }
    let mut dec = BottleneckDecoder::new(state, cache)?;
    let mut rng = match strategy {
        Decoding::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut pick = |logits: &[T]| -> TokenId {
        match rng.as_mut() {
            None => argmax(logits),
            Some(rng) => {
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let w: Vec<f64> = logits
                    .iter()
                    .map(|&l| (l - max).exp().to_f64().unwrap())
                    .collect();
                WeightedIndex::new(&w).expect("finite weights").sample(rng) as TokenId
            }
        }
    };
    let mut out = Vec::with_capacity(max_new);
    let mut next = pick(dec.first_logits());
    loop {
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        let logits = dec.step(next)?;
        next = pick(&logits);
    }
    Ok(out)
}

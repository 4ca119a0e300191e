//! Batched forward pass with activation caching, and its hand-derived
//! backward pass.
//!
//! Sequences of different lengths are packed row-wise into one `[N, d]`
//! activation matrix so the dense projections run as single GEMMs; attention
//! is computed per sequence and head on strided views.

use rand::{Rng, RngCore};

use super::{LayerOffsets, ModelState};
use crate::corpus::TokenId;
use crate::error::{GemError, Result};
use crate::masking::AttentionMask;
use crate::tensor::{
    all_finite, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    Real, View,
};

#[derive(Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [TokenId],
    pub positions: &'a [usize],
    pub mask: &'a AttentionMask,
}

pub(crate) struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    cat: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
}

impl<T> LayerCache<T> {
    pub(crate) fn k(&self) -> &[T] {
        &self.k
    }

    pub(crate) fn v(&self) -> &[T] {
        &self.v
    }
}

/// Everything the backward pass needs, plus the final hidden states.
pub struct BatchActivations<T> {
    pub(crate) offsets: Vec<usize>,
    pub(crate) lens: Vec<usize>,
    prob_offsets: Vec<usize>,
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    drop0: Option<Vec<T>>,
    pub(crate) layers: Vec<LayerCache<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    /// Final-layer (post-norm) hidden states, `[N, d]`.
    pub hidden: Vec<T>,
}

impl<T: Real> BatchActivations<T> {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_count(&self) -> usize {
        self.offsets.len()
    }

    /// Global row index of position `pos` in sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }
}

fn validate<T: Real>(state: &ModelState<T>, seq: &SeqInput<'_>) -> Result<()> {
    let cfg = state.config();
    let t = seq.tokens.len();
    if t == 0 {
        return Err(GemError::invalid("empty sequence"));
    }
    if seq.mask.size() != t || seq.positions.len() != t {
        return Err(GemError::invalid(format!(
            "length mismatch: tokens {t}, mask {}, positions {}",
            seq.mask.size(),
            seq.positions.len()
        )));
    }
    if let Some(&p) = seq.positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(GemError::PositionOverflow {
            position: p,
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = seq.tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(GemError::TokenOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

/// Row-wise softmax restricted to allowed columns; disallowed entries are
/// exactly zero.
fn masked_softmax<T: Real>(scores: &[T], mask: &AttentionMask, out: &mut [T]) {
    let t = mask.size();
    for i in 0..t {
        let row = mask.row(i);
        let s = &scores[i * t..(i + 1) * t];
        let o = &mut out[i * t..(i + 1) * t];
        let mut max = T::neg_infinity();
        for j in 0..t {
            if row[j] && s[j] > max {
                max = s[j];
            }
        }
        let mut sum = T::zero();
        for j in 0..t {
            if row[j] {
                let e = (s[j] - max).exp();
                o[j] = e;
                sum += e;
            } else {
                o[j] = T::zero();
            }
        }
        if sum > T::zero() {
            let inv = T::one() / sum;
            for x in o.iter_mut() {
                *x *= inv;
            }
        }
    }
}

/// Runs the stack over a batch of sequences. Dropout is active iff `rng` is
/// given and the configured rate is positive.
pub fn forward_batch<T: Real>(
    state: &ModelState<T>,
    seqs: &[SeqInput<'_>],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<BatchActivations<T>> {
    let cfg = state.config();
    let layout = state.layout();
    let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let rate = cfg.dropout_rate;
    let train = rng.is_some() && rate > 0.0;

    let mut offsets = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    let mut prob_offsets = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut prob_len = 0;
    for s in seqs {
        validate(state, s)?;
        offsets.push(tokens.len());
        lens.push(s.tokens.len());
        prob_offsets.push(prob_len);
        prob_len += nh * s.tokens.len() * s.tokens.len();
        tokens.extend_from_slice(s.tokens);
        positions.extend_from_slice(s.positions);
    }
    let n = tokens.len();

    let tok_emb = state.slice(layout.tok_emb, cfg.vocab_size * d);
    let pos_emb = state.slice(layout.pos_emb, cfg.max_positions * d);
    let mut x = Vec::with_capacity(n * d);
    for (&tok, &pos) in tokens.iter().zip(&positions) {
        let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos_emb[pos * d..(pos + 1) * d];
        x.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
    }
    let drop0 = if train {
        Some(dropout_mask(n * d, rate, rng.as_deref_mut().unwrap()))
    } else {
        None
    };
    apply_mask(&mut x, &drop0);

    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut scores = Vec::new();
    for (li, lo) in layout.layers.iter().enumerate() {
        let p = |off: usize, len: usize| state.slice(off, len);
        let (a, xhat1, rstd1) = layer_norm(&x, p(lo.ln1_g, d), p(lo.ln1_b, d), d);
        let q = linear(&a, p(lo.wq, d * d), p(lo.bq, d), n, d, d);
        let k = linear(&a, p(lo.wk, d * d), p(lo.bk, d), n, d, d);
        let v = linear(&a, p(lo.wv, d * d), p(lo.bv, d), n, d, d);

        let mut probs = vec![T::zero(); prob_len];
        let mut cat = vec![T::zero(); n * d];
        for (si, s) in seqs.iter().enumerate() {
            let (off, t) = (offsets[si], lens[si]);
            scores.resize(t * t, T::zero());
            for h in 0..nh {
                let hv = View::block(off, t, d, h * dh, dh);
                gemm(scale, &q, hv, &k, hv.t(), T::zero(), &mut scores, View::rm(t, t));
                let po = prob_offsets[si] + h * t * t;
                let pslice = &mut probs[po..po + t * t];
                masked_softmax(&scores, s.mask, pslice);
                gemm(T::one(), pslice, View::rm(t, t), &v, hv, T::zero(), &mut cat, hv);
            }
        }

        let mut attn_out = linear(&cat, p(lo.wo, d * d), p(lo.bo, d), n, d, d);
        let drop1 = if train {
            Some(dropout_mask(n * d, rate, rng.as_deref_mut().unwrap()))
        } else {
            None
        };
        apply_mask(&mut attn_out, &drop1);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += *ai;
        }

        let (b, xhat2, rstd2) = layer_norm(&x, p(lo.ln2_g, d), p(lo.ln2_b, d), d);
        let u = linear(&b, p(lo.w1, d * ff), p(lo.b1, ff), n, d, ff);
        let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        let mut mlp_out = linear(&g, p(lo.w2, ff * d), p(lo.b2, d), n, ff, d);
        let drop2 = if train {
            Some(dropout_mask(n * d, rate, rng.as_deref_mut().unwrap()))
        } else {
            None
        };
        apply_mask(&mut mlp_out, &drop2);
        for (xi, mi) in x.iter_mut().zip(&mlp_out) {
            *xi += *mi;
        }
        if !all_finite(&x) {
            return Err(GemError::NonFiniteActivation { layer: li });
        }

        layers.push(LayerCache {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            probs,
            cat,
            drop1,
            xhat2,
            rstd2,
            b,
            u,
            g,
            drop2,
        });
    }

    let (hidden, xhat_f, rstd_f) = layer_norm(
        &x,
        state.slice(layout.lnf_g, d),
        state.slice(layout.lnf_b, d),
        d,
    );
    Ok(BatchActivations {
        offsets,
        lens,
        prob_offsets,
        tokens,
        positions,
        drop0,
        layers,
        xhat_f,
        rstd_f,
        hidden,
    })
}

/// Logits for the given `[rows, d]` hidden states.
pub(crate) fn head_forward<T: Real>(state: &ModelState<T>, hidden: &[T]) -> Vec<T> {
    let cfg = state.config();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let layout = state.layout();
    linear(
        hidden,
        state.slice(layout.w_out, d * v),
        state.slice(layout.b_out, v),
        hidden.len() / d,
        d,
        v,
    )
}

/// Accumulates output-head gradients into `grads` and returns `d hidden`.
pub(crate) fn head_backward<T: Real>(
    state: &ModelState<T>,
    hidden: &[T],
    d_logits: &[T],
    grads: &mut [T],
) -> Vec<T> {
    let cfg = state.config();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let layout = state.layout();
    let rows = hidden.len() / d;
    let (head, tail) = grads.split_at_mut(layout.b_out);
    linear_backward(
        hidden,
        state.slice(layout.w_out, d * v),
        d_logits,
        rows,
        d,
        v,
        &mut head[layout.w_out..layout.w_out + d * v],
        &mut tail[..v],
    )
}

fn two_mut<T>(g: &mut [T], a: (usize, usize), b: (usize, usize)) -> (&mut [T], &mut [T]) {
    debug_assert!(a.0 + a.1 <= b.0);
    let (lo, hi) = g.split_at_mut(b.0);
    (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
}

/// Backpropagates `d_hidden` (gradient w.r.t. [`BatchActivations::hidden`])
/// through the stack, accumulating into `grads`.
pub(crate) fn backward<T: Real>(
    state: &ModelState<T>,
    acts: &BatchActivations<T>,
    d_hidden: &[T],
    grads: &mut [T],
) {
    let cfg = state.config();
    let layout = state.layout();
    let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let n = acts.rows();
    assert_eq!(d_hidden.len(), n * d);
    assert_eq!(grads.len(), layout.total());

    let (dg, db) = two_mut(grads, (layout.lnf_g, d), (layout.lnf_b, d));
    let mut dx = layer_norm_backward(
        d_hidden,
        &acts.xhat_f,
        &acts.rstd_f,
        state.slice(layout.lnf_g, d),
        d,
        dg,
        db,
    );

    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dp = Vec::new();
    for (lo, cache) in layout.layers.iter().zip(&acts.layers).rev() {
        let lo: &LayerOffsets = lo;
        let p = |off: usize, len: usize| state.slice(off, len);

        // MLP branch
        let mut dy2 = dx.clone();
        apply_mask(&mut dy2, &cache.drop2);
        let (dw2, db2) = two_mut(grads, (lo.w2, ff * d), (lo.b2, d));
        let dgel = linear_backward(&cache.g, p(lo.w2, ff * d), &dy2, n, ff, d, dw2, db2);
        let du: Vec<T> = dgel
            .iter()
            .zip(&cache.u)
            .map(|(&gr, &u)| gr * gelu_grad(u))
            .collect();
        let (dw1, db1) = two_mut(grads, (lo.w1, d * ff), (lo.b1, ff));
        let dbn = linear_backward(&cache.b, p(lo.w1, d * ff), &du, n, d, ff, dw1, db1);
        let (dg2, db2n) = two_mut(grads, (lo.ln2_g, d), (lo.ln2_b, d));
        let dln2 = layer_norm_backward(&dbn, &cache.xhat2, &cache.rstd2, p(lo.ln2_g, d), d, dg2, db2n);
        for (a, b) in dx.iter_mut().zip(&dln2) {
            *a += *b;
        }

        // attention branch
        let mut dy1 = dx.clone();
        apply_mask(&mut dy1, &cache.drop1);
        let (dwo, dbo) = two_mut(grads, (lo.wo, d * d), (lo.bo, d));
        let dcat = linear_backward(&cache.cat, p(lo.wo, d * d), &dy1, n, d, d, dwo, dbo);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        for si in 0..acts.seq_count() {
            let (off, t) = (acts.offsets[si], acts.lens[si]);
            dp.resize(t * t, T::zero());
            for h in 0..nh {
                let hv = View::block(off, t, d, h * dh, dh);
                let po = acts.prob_offsets[si] + h * t * t;
                let probs = &cache.probs[po..po + t * t];
                // dV = P^T dO ; dP = dO V^T
                gemm(T::one(), probs, View::rm(t, t).t(), &dcat, hv, T::zero(), &mut dv, hv);
                gemm(T::one(), &dcat, hv, &cache.v, hv.t(), T::zero(), &mut dp, View::rm(t, t));
                for i in 0..t {
                    let prow = &probs[i * t..(i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pp) in drow.iter_mut().zip(prow) {
                        *g = pp * (*g - dot);
                    }
                }
                gemm(scale, &dp, View::rm(t, t), &cache.k, hv, T::zero(), &mut dq, hv);
                gemm(scale, &dp, View::rm(t, t).t(), &cache.q, hv, T::zero(), &mut dk, hv);
            }
        }

        let (dwq, dbq) = two_mut(grads, (lo.wq, d * d), (lo.bq, d));
        let mut da = linear_backward(&cache.a, p(lo.wq, d * d), &dq, n, d, d, dwq, dbq);
        let (dwk, dbk) = two_mut(grads, (lo.wk, d * d), (lo.bk, d));
        let dak = linear_backward(&cache.a, p(lo.wk, d * d), &dk, n, d, d, dwk, dbk);
        let (dwv, dbv) = two_mut(grads, (lo.wv, d * d), (lo.bv, d));
        let dav = linear_backward(&cache.a, p(lo.wv, d * d), &dv, n, d, d, dwv, dbv);
        for ((a, b), c) in da.iter_mut().zip(&dak).zip(&dav) {
            *a += *b + *c;
        }
        let (dg1, db1n) = two_mut(grads, (lo.ln1_g, d), (lo.ln1_b, d));
        let dln1 = layer_norm_backward(&da, &cache.xhat1, &cache.rstd1, p(lo.ln1_g, d), d, dg1, db1n);
        for (a, b) in dx.iter_mut().zip(&dln1) {
            *a += *b;
        }
    }

    apply_mask(&mut dx, &acts.drop0);
    for (row, (&tok, &pos)) in acts.tokens.iter().zip(&acts.positions).enumerate() {
        let g = &dx[row * d..(row + 1) * d];
        let te = layout.tok_emb + tok as usize * d;
        for (dst, &v) in grads[te..te + d].iter_mut().zip(g) {
            *dst += v;
        }
        let pe = layout.pos_emb + pos * d;
        for (dst, &v) in grads[pe..pe + d].iter_mut().zip(g) {
            *dst += v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[T, d_model]`, row-major.
    pub hidden: Vec<T>,
    /// `[T, vocab_size]`, row-major.
    pub logits: Vec<T>,
}

/// Single-sequence forward. Dropout is active iff `train_rng` is given.
pub fn forward<T: Real>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    positions: &[usize],
    train_rng: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput<T>> {
    let acts = forward_batch(state, &[SeqInput { tokens, positions, mask }], train_rng)?;
    let logits = head_forward(state, &acts.hidden);
    Ok(ForwardOutput {
        hidden: acts.hidden,
        logits,
    })
}

/// Eval-mode forward that also exposes attention probabilities and the
/// per-layer key/value projections.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
    /// `attention[layer][head]` is a row-major `T x T` probability matrix.
    pub attention: Vec<Vec<Vec<T>>>,
    /// `keys[layer]` is `[T, d_model]` (heads contiguous within a row).
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

pub fn forward_trace<T: Real>(
    state: &ModelState<T>,
    tokens: &[TokenId],
    mask: &AttentionMask,
    positions: &[usize],
) -> Result<ForwardTrace<T>> {
    let acts = forward_batch(state, &[SeqInput { tokens, positions, mask }], None)?;
    let t = tokens.len();
    let nh = state.config().n_heads;
    let logits = head_forward(state, &acts.hidden);
    let attention = acts
        .layers
        .iter()
        .map(|l| (0..nh).map(|h| l.probs[h * t * t..(h + 1) * t * t].to_vec()).collect())
        .collect();
    let keys = acts.layers.iter().map(|l| l.k.clone()).collect();
    let values = acts.layers.iter().map(|l| l.v.clone()).collect();
    Ok(ForwardTrace {
        hidden: acts.hidden,
        logits,
        attention,
        keys,
        values,
    })
}

/// Plain causal language-model loss over whole sequences (mean token-level
/// cross-entropy) and its gradient w.r.t. the flat parameters.
pub fn lm_loss_grad<T: Real>(
    state: &ModelState<T>,
    seqs: &[&[TokenId]],
    rng: Option<&mut dyn RngCore>,
) -> Result<(T, Vec<T>)> {
    let masks: Vec<AttentionMask> = seqs.iter().map(|s| AttentionMask::causal(s.len())).collect();
    let positions: Vec<Vec<usize>> = seqs.iter().map(|s| (0..s.len()).collect()).collect();
    let inputs: Vec<SeqInput<'_>> = seqs
        .iter()
        .zip(&masks)
        .zip(&positions)
        .map(|((tokens, mask), positions)| SeqInput { tokens, positions, mask })
        .collect();
    let acts = forward_batch(state, &inputs, rng)?;
    let mut targets = Vec::with_capacity(acts.rows());
    let mut include = Vec::with_capacity(acts.rows());
    for s in seqs {
        targets.extend_from_slice(&s[1..]);
        targets.push(0);
        include.extend(std::iter::repeat_n(true, s.len() - 1));
        include.push(false);
    }
    let vocab = state.config().vocab_size;
    let logits = head_forward(state, &acts.hidden);
    let (loss, d_logits) =
        crate::objective::ntp_loss_grad(&logits, &targets, &crate::masking::LossMask::from_vec(include), vocab)?;
    let mut grads = vec![T::zero(); state.layout().total()];
    let d_hidden = head_backward(state, &acts.hidden, &d_logits, &mut grads);
    backward(state, &acts, &d_hidden, &mut grads);
    Ok((loss, grads))
}

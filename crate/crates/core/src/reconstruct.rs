//! Compress a text into the key/value cache of its special tokens and decode
//! it back from that cache alone.

use crate::corpus::{TokenId, Vocab, EMB};
use crate::error::{GemError, Result};
use crate::masking::{SegmentedSequence, SequenceKind};
use crate::model::{capture_special_kv, decode_from_cache, Decoding, KVCacheSnapshot, ModelState};
use crate::tensor::Real;

pub fn compress_tokens<T: Real>(state: &ModelState<T>, tokens: &[TokenId], k: usize) -> Result<KVCacheSnapshot<T>> {
    if tokens.is_empty() {
        return Err(GemError::invalid("cannot compress empty text"));
    }
    if k == 0 {
        return Err(GemError::invalid("k must be at least 1"));
    }
    let mut seq = tokens.to_vec();
    seq.extend(std::iter::repeat_n(EMB, k));
    let seq = SegmentedSequence::new(seq, tokens.len(), k, 0, SequenceKind::Compress)?;
    capture_special_kv(state, &seq)
}

pub fn compress<T: Real>(state: &ModelState<T>, vocab: &Vocab, text: &str, k: usize) -> Result<KVCacheSnapshot<T>> {
    compress_tokens(state, &vocab.encode(text), k)
}

/// Greedy decode of at most `max_len` tokens from the cache.
pub fn reconstruct_tokens<T: Real>(
    state: &ModelState<T>,
    cache: &KVCacheSnapshot<T>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    decode_from_cache(state, cache, max_len, Decoding::Greedy)
}

pub fn reconstruct_text<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocab,
    cache: &KVCacheSnapshot<T>,
    max_len: usize,
) -> Result<String> {
    vocab.decode(&reconstruct_tokens(state, cache, max_len)?)
}

/// Fraction of reference positions matched by the hypothesis at the same
/// index; missing hypothesis positions count as mismatches.
///
/// # Panics
/// If `reference` is empty.
pub fn token_accuracy(reference: &[TokenId], hypothesis: &[TokenId]) -> f64 {
    assert!(!reference.is_empty(), "reference must be non-empty");
    let hits = reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len() as f64
}

//! Bottleneck attention masks and NTP loss masks.
//!
//! A segmented sequence is laid out as `prefix (m) | specials (k) | suffix (n)`.
//! On top of the causal rule, specials see the prefix and themselves only, and
//! suffix tokens see the specials and earlier suffix tokens only.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EMB};
use crate::error::{GemError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Plain,
    Compress,
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedSequence {
    tokens: Vec<TokenId>,
    m: usize,
    k: usize,
    n: usize,
    kind: SequenceKind,
}

impl SegmentedSequence {
    pub fn new(tokens: Vec<TokenId>, m: usize, k: usize, n: usize, kind: SequenceKind) -> Result<Self> {
        if tokens.len() != m + k + n {
            return Err(GemError::invalid(format!(
                "length {} != m + k + n = {}",
                tokens.len(),
                m + k + n
            )));
        }
        if tokens[..m].contains(&EMB) || tokens[m + k..].contains(&EMB) {
            return Err(GemError::invalid("special token outside the special slots"));
        }
        if tokens[m..m + k].iter().any(|&t| t != EMB) {
            return Err(GemError::invalid("special slots must hold the special token"));
        }
        match kind {
            SequenceKind::Plain if k != 0 => {
                return Err(GemError::invalid("plain sequence with special tokens"))
            }
            SequenceKind::Reconstruct if tokens[..m] != tokens[m + k..] => {
                return Err(GemError::invalid("reconstruct suffix must replicate the prefix"))
            }
            _ => {}
        }
        Ok(Self { tokens, m, k, n, kind })
    }

    pub fn plain(tokens: Vec<TokenId>) -> Result<Self> {
        let m = tokens.len();
        Self::new(tokens, m, 0, 0, SequenceKind::Plain)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.tokens[..self.m]
    }

    pub fn suffix(&self) -> &[TokenId] {
        &self.tokens[self.m + self.k..]
    }

    pub fn special_positions(&self) -> std::ops::Range<usize> {
        self.m..self.m + self.k
    }

    /// The same sequence with the suffix dropped. Special-token states are
    /// unaffected by the suffix, so this is all an embedding needs.
    pub fn without_suffix(&self) -> Self {
        Self {
            tokens: self.tokens[..self.m + self.k].to_vec(),
            m: self.m,
            k: self.k,
            n: 0,
            kind: if self.k == 0 { SequenceKind::Plain } else { SequenceKind::Compress },
        }
    }

    pub fn mask(&self) -> AttentionMask {
        build_gem_mask(self.m, self.k, self.n).expect("sequence is non-empty")
    }
}

/// Dense `T x T` allowance matrix, row = query, column = key.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            allowed[i * size..=i * size + i].fill(true);
        }
        Self { size, allowed }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }

    /// Rows of `0`/`1` separated by spaces.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.size * self.size * 2);
        for i in 0..self.size {
            let row: Vec<&str> = self.row(i).iter().map(|&a| if a { "1" } else { "0" }).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttentionMask({})\n{}", self.size, self.render())
    }
}

pub fn build_gem_mask(m: usize, k: usize, n: usize) -> Result<AttentionMask> {
    let size = m + k + n;
    if size == 0 {
        return Err(GemError::invalid("mask needs at least one token"));
    }
    let mut mask = AttentionMask::causal(size);
    if k == 0 {
        // no bottleneck to route through
        return Ok(mask);
    }
    let suffix_start = m + k;
    for i in m..size {
        let row = &mut mask.allowed[i * size..(i + 1) * size];
        if i < suffix_start {
            // special: prefix + itself
            row[m..i].fill(false);
        } else {
            // suffix: specials + suffix so far
            row[..m].fill(false);
        }
    }
    Ok(mask)
}

/// `include[i]` says whether the prediction made at position `i` (of token
/// `i + 1`) counts towards the NTP loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    include: Vec<bool>,
}

impl LossMask {
    pub fn all(len: usize) -> Self {
        Self { include: vec![true; len] }
    }

    pub fn from_vec(include: Vec<bool>) -> Self {
        Self { include }
    }

    pub fn include(&self) -> &[bool] {
        &self.include
    }

    pub fn len(&self) -> usize {
        self.include.len()
    }

    pub fn is_empty(&self) -> bool {
        self.include.is_empty()
    }

    pub fn count(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }
}

pub fn build_loss_mask(seq: &SegmentedSequence) -> Result<LossMask> {
    if seq.len() < 2 {
        return Err(GemError::invalid("loss mask needs at least two tokens"));
    }
    Ok(LossMask {
        include: seq.tokens()[1..].iter().map(|&t| t != EMB).collect(),
    })
}

pub mod oracle {
    //! Pointwise restatement of the bottleneck rule, kept independent of
    //! [`build_gem_mask`](super::build_gem_mask) for cross-checking. Without
    //! special tokens there is no bottleneck and the rule is plain causal.

    use crate::error::{GemError, Result};

    pub fn oracle_allowed(m: usize, k: usize, n: usize, i: usize, j: usize) -> Result<bool> {
        let t = m + k + n;
        if i >= t || j >= t {
            return Err(GemError::invalid(format!("({i}, {j}) outside a {t}x{t} mask")));
        }
        let is_special = |x: usize| x >= m && x < m + k;
        let causal = j <= i;
        if k == 0 {
            return Ok(causal);
        }
        let prefix_row = i < m && j <= i;
        let special_row = is_special(i) && (j < m || j == i);
        let suffix_row = i >= m + k && (is_special(j) || (j >= m + k && j <= i));
        Ok(causal && (prefix_row || special_row || suffix_row))
    }
}

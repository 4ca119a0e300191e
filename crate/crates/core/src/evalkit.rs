//! Small evaluation suites: noisy-query retrieval, a similarity-correlation
//! set with known overlap, and plain-text perplexity.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{words, Document, TokenId, EMB};
use crate::embedder::cosine_vec;
use crate::error::{GemError, Result};
use crate::masking::AttentionMask;
use crate::model::{forward, ModelState};
use crate::tensor::{log_sum_exp, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    /// `(id, text)` pairs.
    pub corpus_docs: Vec<(String, String)>,
    pub queries: Vec<RetrievalQuery>,
}

fn delete_tokens<R: Rng + ?Sized>(tokens: &[String], rate: f64, rng: &mut R) -> Vec<String> {
    let mut kept: Vec<String> = tokens
        .iter()
        .filter(|_| rng.gen::<f64>() >= rate)
        .cloned()
        .collect();
    if kept.is_empty() {
        kept.push(tokens[rng.gen_range(0..tokens.len())].clone());
    }
    kept
}

/// One query per usable document: the document with each word deleted
/// independently at `noise_rate`, at least one word kept. Documents under
/// four words are left out of both sides.
pub fn make_retrieval_set<R: Rng + ?Sized>(docs: &[Document], noise_rate: f64, rng: &mut R) -> Result<RetrievalSet> {
    if docs.len() < 10 {
        return Err(GemError::invalid(format!("retrieval needs >= 10 documents, got {}", docs.len())));
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(GemError::invalid(format!("noise_rate {noise_rate} outside [0, 1)")));
    }
    let mut corpus_docs = Vec::new();
    let mut queries = Vec::new();
    for doc in docs {
        let toks: Vec<String> = words(&doc.text).collect();
        if toks.len() < 4 {
            log::warn!("document {} has fewer than 4 tokens, skipped", doc.id);
            continue;
        }
        queries.push(RetrievalQuery {
            text: delete_tokens(&toks, noise_rate, rng).join(" "),
            gold: doc.id.clone(),
        });
        corpus_docs.push((doc.id.clone(), toks.join(" ")));
    }
    Ok(RetrievalSet { corpus_docs, queries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub ndcg_at_10: f64,
    pub queries: usize,
}

fn embed_all<F>(texts: &[(&str, &str)], embed: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    texts
        .par_iter()
        .map(|(id, text)| {
            embed(text).map_err(|e| GemError::EmbedFailed {
                doc: id.to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// 1-based rank of `gold` when candidates are sorted by descending
/// similarity, ties going to the smaller id.
pub fn gold_rank(sims: &[f64], ids: &[&str], gold: usize) -> usize {
    let g = sims[gold];
    1 + sims
        .iter()
        .zip(ids)
        .enumerate()
        .filter(|&(j, (&s, id))| j != gold && (s > g || (s == g && *id < ids[gold])))
        .count()
}

/// Single-relevant-document nDCG@10.
pub fn ndcg_at_10(rank: usize) -> f64 {
    if (1..=10).contains(&rank) {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Ranks the corpus for every query by cosine similarity of `embed`.
pub fn eval_retrieval<F>(embed: F, set: &RetrievalSet) -> Result<RetrievalMetrics>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    if set.queries.is_empty() || set.corpus_docs.is_empty() {
        return Err(GemError::invalid("empty retrieval set"));
    }
    let docs: Vec<(&str, &str)> = set.corpus_docs.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let ids: Vec<&str> = docs.iter().map(|d| d.0).collect();
    let doc_emb = embed_all(&docs, &embed)?;
    let qs: Vec<(&str, &str)> = set.queries.iter().map(|q| (q.gold.as_str(), q.text.as_str())).collect();
    let q_emb = embed_all(&qs, &embed)?;

    let mut hits = 0usize;
    let mut ndcg = 0.0;
    for (q, qe) in set.queries.iter().zip(&q_emb) {
        let gold = ids
            .iter()
            .position(|&id| id == q.gold)
            .ok_or_else(|| GemError::invalid(format!("gold id {} not in corpus", q.gold)))?;
        let sims = doc_emb.iter().map(|d| cosine_vec(qe, d)).collect::<Result<Vec<_>>>()?;
        let rank = gold_rank(&sims, &ids, gold);
        hits += usize::from(rank == 1);
        ndcg += ndcg_at_10(rank);
    }
    let n = set.queries.len() as f64;
    Ok(RetrievalMetrics {
        recall_at_1: hits as f64 / n,
        ndcg_at_10: ndcg / n,
        queries: set.queries.len(),
    })
}

pub const STS_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub text_a: String,
    pub text_b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsSet {
    pub pairs: Vec<StsPair>,
}

/// For consecutive document pairs `(A, B)` truncated to a common length `L`,
/// emits one pair per ratio `r`: `A` against a copy of `B` in which a random
/// `round(r * L)` positions carry `A`'s words instead.
pub fn make_sts_set<R: Rng + ?Sized>(docs: &[Document], rng: &mut R) -> Result<StsSet> {
    let toks: Vec<Vec<String>> = docs
        .iter()
        .map(|d| words(&d.text).collect::<Vec<_>>())
        .filter(|t| t.len() >= 4)
        .collect();
    let mut pairs = Vec::new();
    for chunk in toks.chunks_exact(2) {
        let len = chunk[0].len().min(chunk[1].len());
        let (a, b) = (&chunk[0][..len], &chunk[1][..len]);
        for &ratio in &STS_RATIOS {
            let take = (ratio * len as f64).round() as usize;
            let mut spliced = b.to_vec();
            for i in sample(rng, len, take) {
                spliced[i] = a[i].clone();
            }
            pairs.push(StsPair {
                text_a: a.join(" "),
                text_b: spliced.join(" "),
                gold: ratio,
            });
        }
    }
    if pairs.len() < 20 {
        return Err(GemError::invalid(format!("only {} similarity pairs, need >= 20", pairs.len())));
    }
    Ok(StsSet { pairs })
}

/// Ranks with ties sharing their average 1-based rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(GemError::invalid("spearman needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GemError::Undefined("rank correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn eval_sts<F>(embed: F, set: &StsSet) -> Result<f64>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    let sims = set
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let wrap = |e: GemError| GemError::EmbedFailed {
                doc: format!("pair-{i}"),
                message: e.to_string(),
            };
            let a = embed(&p.text_a).map_err(wrap)?;
            let b = embed(&p.text_b).map_err(wrap)?;
            cosine_vec(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    let gold: Vec<f64> = set.pairs.iter().map(|p| p.gold).collect();
    spearman(&sims, &gold)
}

/// `exp` of the mean token-level cross-entropy under plain causal masking.
/// Texts under two tokens are skipped; longer ones are cut to the model's
/// position budget.
pub fn eval_perplexity<T: Real>(state: &ModelState<T>, texts: &[Vec<TokenId>]) -> Result<f64> {
    let max = state.config().max_positions;
    let v = state.config().vocab_size;
    if texts.iter().any(|t| t.contains(&EMB)) {
        return Err(GemError::invalid("perplexity texts must not contain the special token"));
    }
    let parts = texts
        .par_iter()
        .filter(|t| t.len() >= 2)
        .map(|t| {
            let t = &t[..t.len().min(max)];
            let mask = AttentionMask::causal(t.len());
            let positions: Vec<usize> = (0..t.len()).collect();
            let out = forward(state, t, &mask, &positions, None)?;
            let mut nll = 0.0;
            for i in 0..t.len() - 1 {
                let row = &out.logits[i * v..(i + 1) * v];
                nll += (log_sum_exp(row) - row[t[i + 1] as usize]).to_f64().unwrap();
            }
            Ok((nll, t.len() - 1))
        })
        .collect::<Result<Vec<(f64, usize)>>>()?;
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(GemError::invalid("no text with at least two tokens"));
    }
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    Ok((nll / count as f64).exp())
}

//! Batch composition, the two-phase optimization step, and the training
//! loop with CSV logging, checkpointing and resume.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, load_corpus, Document, TokenId, Vocab, DEFAULT_VOCAB_CAP, EMB};
use crate::embedder::{pool, pool_backward, Pooling};
use crate::error::{GemError, Result};
use crate::masking::{build_loss_mask, SegmentedSequence, SequenceKind};
use crate::model::{
    backward, forward_batch, head_backward, head_forward, init_model, Checkpoint, ModelConfig,
    ModelState, OptimizerSnapshot, SeqInput,
};
use crate::objective::{
    alpha_schedule, clamp_temperature, combined_loss, contrastive_loss_grad, ntp_loss_grad,
    LossBreakdown, DEFAULT_SWITCH_STEP,
};
use crate::tensor::Real;

/// Longest sequence the trainer accepts.
pub const MAX_SEQ_LEN_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Probability that a batch slot holds a plain example.
    pub p_raw: f64,
    pub k_specials: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub lr_ntp: f64,
    pub lr_cl: f64,
    pub switch_step: usize,
    pub total_steps: usize,
    pub dropout_rate_prefix: f64,
    /// Share of segmented examples that are reconstruction examples.
    pub reconstruct_share: f64,
    pub seed: u64,
    pub pooling: Pooling,
    /// Average in the doc-to-query contrastive direction.
    pub symmetric: bool,
    pub clip_norm: f64,
    pub vocab_cap: usize,
    /// Start from these weights (and their vocabulary) instead of a fresh init.
    pub init_checkpoint: Option<PathBuf>,
    /// Completed-step counts at which an extra checkpoint is written.
    pub snapshot_steps: Vec<usize>,
    /// Periodic checkpoint interval for resumption; 0 disables it.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_raw: 0.8,
            k_specials: 1,
            batch_size: 32,
            max_seq_len: 128,
            lr_ntp: 1e-4,
            lr_cl: 1e-5,
            switch_step: DEFAULT_SWITCH_STEP,
            total_steps: 2000,
            dropout_rate_prefix: 0.15,
            reconstruct_share: 0.5,
            seed: 42,
            pooling: Pooling::Mean,
            symmetric: false,
            clip_norm: 1.0,
            vocab_cap: DEFAULT_VOCAB_CAP,
            init_checkpoint: None,
            snapshot_steps: Vec::new(),
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GemError::invalid(msg));
        if !(0.0..=1.0).contains(&self.p_raw) {
            return bad(format!("p_raw {} outside [0, 1]", self.p_raw));
        }
        if !(0.0..=1.0).contains(&self.reconstruct_share) {
            return bad(format!("reconstruct_share {} outside [0, 1]", self.reconstruct_share));
        }
        if !(self.lr_ntp > 0.0 && self.lr_cl > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate_prefix) {
            return bad(format!("dropout_rate_prefix {} outside [0, 1)", self.dropout_rate_prefix));
        }
        if self.k_specials == 0 {
            return bad("k_specials must be at least 1".into());
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if self.switch_step < self.total_steps && self.batch_size < 2 {
            return bad("the contrastive phase needs batch_size >= 2".into());
        }
        if self.max_seq_len > MAX_SEQ_LEN_CAP {
            return bad(format!("max_seq_len {} exceeds {MAX_SEQ_LEN_CAP}", self.max_seq_len));
        }
        if self.max_seq_len < 2 * self.k_specials + 2 {
            return bad(format!(
                "max_seq_len {} too short for {} special tokens",
                self.max_seq_len, self.k_specials
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Examples of one step; `positive_partners[i]` is the prefix-dropout twin of
/// a segmented `examples[i]` and `None` for plain ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub examples: Vec<SegmentedSequence>,
    pub positive_partners: Vec<Option<SegmentedSequence>>,
}

impl TrainingBatch {
    pub fn segmented_count(&self) -> usize {
        self.positive_partners.iter().filter(|p| p.is_some()).count()
    }
}

/// Encoded training documents; documents under two tokens are dropped.
#[derive(Debug, Clone)]
pub struct TrainCorpus {
    docs: Vec<Vec<TokenId>>,
}

impl TrainCorpus {
    pub fn new(docs: &[Document], vocab: &Vocab) -> Result<Self> {
        Self::from_token_seqs(docs.iter().map(|d| vocab.encode(&d.text)).collect())
    }

    pub fn from_token_seqs(seqs: Vec<Vec<TokenId>>) -> Result<Self> {
        let total = seqs.len();
        let docs: Vec<Vec<TokenId>> = seqs.into_iter().filter(|s| s.len() >= 2).collect();
        if docs.len() < total {
            log::warn!("skipped {} documents shorter than 2 tokens", total - docs.len());
        }
        if docs.is_empty() {
            return Err(GemError::EmptyCorpus);
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, i: usize) -> &[TokenId] {
        &self.docs[i]
    }

    /// Document indices for a step: consecutive slices of a per-epoch
    /// shuffled order.
    pub fn batch_indices(&self, step: usize, batch_size: usize, seed: u64) -> Vec<usize> {
        let n = self.docs.len();
        let start = step * batch_size;
        let mut out = Vec::with_capacity(batch_size);
        let mut epoch = usize::MAX;
        let mut order: Vec<usize> = Vec::new();
        for slot in start..start + batch_size {
            if slot / n != epoch {
                epoch = slot / n;
                order = (0..n).collect();
                order.shuffle(&mut stream_rng(seed, EPOCH_STREAMS + epoch as u64));
            }
            out.push(order[slot % n]);
        }
        out
    }
}

const EPOCH_STREAMS: u64 = 1 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random stream that composes the batch of `step`.
pub fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * step as u64)
}

/// Random stream for activation dropout at `step`.
pub fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * step as u64 + 1)
}

/// Builds a segmented sequence. `position` is ignored for reconstruction,
/// whose prefix is always the whole input.
pub fn insert_specials(
    tokens: &[TokenId],
    position: usize,
    k: usize,
    kind: SequenceKind,
) -> Result<SegmentedSequence> {
    if tokens.contains(&EMB) {
        return Err(GemError::invalid("input already contains the special token"));
    }
    let specials = std::iter::repeat_n(EMB, k);
    match kind {
        SequenceKind::Plain => SegmentedSequence::plain(tokens.to_vec()),
        _ if k == 0 => Err(GemError::invalid("segmented sequences need k >= 1")),
        SequenceKind::Compress => {
            if position == 0 || position > tokens.len() {
                return Err(GemError::invalid(format!(
                    "insertion position {position} outside [1, {}]",
                    tokens.len()
                )));
            }
            let mut out = tokens[..position].to_vec();
            out.extend(specials);
            out.extend_from_slice(&tokens[position..]);
            SegmentedSequence::new(out, position, k, tokens.len() - position, kind)
        }
        SequenceKind::Reconstruct => {
            if tokens.is_empty() {
                return Err(GemError::invalid("cannot reconstruct an empty input"));
            }
            let mut out = tokens.to_vec();
            out.extend(specials);
            out.extend_from_slice(tokens);
            SegmentedSequence::new(out, tokens.len(), k, tokens.len(), kind)
        }
    }
}

/// Deletes each prefix token with probability `rate`, keeping at least one.
/// The result is tagged `Compress` since its suffix no longer replicates the
/// prefix.
pub fn dropout_prefix<R: Rng + ?Sized>(
    seq: &SegmentedSequence,
    rate: f64,
    rng: &mut R,
) -> Result<SegmentedSequence> {
    if seq.k() == 0 {
        return Err(GemError::invalid("prefix dropout needs special tokens"));
    }
    if seq.m() == 0 {
        return Err(GemError::invalid("prefix dropout on an empty prefix"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(GemError::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let prefix = seq.prefix();
    let mut kept: Vec<TokenId> = prefix
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= rate)
        .collect();
    if kept.is_empty() {
        kept.push(prefix[rng.gen_range(0..prefix.len())]);
    }
    let m = kept.len();
    kept.extend_from_slice(&seq.tokens()[seq.m()..]);
    SegmentedSequence::new(kept, m, seq.k(), seq.n(), SequenceKind::Compress)
}

/// Composes the batch for `step`. From the switch step on every slot is
/// segmented; before it each slot is plain with probability `p_raw`.
pub fn compose_batch<R: Rng + ?Sized>(
    corpus: &TrainCorpus,
    config: &TrainConfig,
    rng: &mut R,
    step: usize,
) -> Result<TrainingBatch> {
    let contrastive = alpha_schedule(step, config.switch_step) > 0.0;
    let k = config.k_specials;
    let mut examples = Vec::with_capacity(config.batch_size);
    let mut partners = Vec::with_capacity(config.batch_size);
    for idx in corpus.batch_indices(step, config.batch_size, config.seed) {
        let doc = corpus.doc(idx);
        let plain = !contrastive && rng.gen_bool(config.p_raw);
        if plain {
            let len = doc.len().min(config.max_seq_len);
            examples.push(SegmentedSequence::plain(doc[..len].to_vec())?);
            partners.push(None);
            continue;
        }
        let seq = if rng.gen_bool(config.reconstruct_share) {
            let len = doc.len().min((config.max_seq_len - k) / 2);
            insert_specials(&doc[..len], len, k, SequenceKind::Reconstruct)?
        } else {
            let len = doc.len().min(config.max_seq_len - k);
            let position = rng.gen_range(1..=len);
            insert_specials(&doc[..len], position, k, SequenceKind::Compress)?
        };
        partners.push(Some(dropout_prefix(&seq, config.dropout_rate_prefix, rng)?));
        examples.push(seq);
    }
    Ok(TrainingBatch {
        examples,
        positive_partners: partners,
    })
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, base_lr: f64, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub pooling: Pooling,
    pub symmetric: bool,
}

struct Packed {
    masks: Vec<crate::masking::AttentionMask>,
    positions: Vec<Vec<usize>>,
}

impl Packed {
    fn new(seqs: &[&SegmentedSequence]) -> Self {
        Self {
            masks: seqs.iter().map(|s| s.mask()).collect(),
            positions: seqs.iter().map(|s| (0..s.len()).collect()).collect(),
        }
    }

    fn inputs<'a>(&'a self, seqs: &'a [&SegmentedSequence]) -> Vec<SeqInput<'a>> {
        seqs.iter()
            .zip(&self.masks)
            .zip(&self.positions)
            .map(|((s, mask), positions)| SeqInput {
                tokens: s.tokens(),
                positions,
                mask,
            })
            .collect()
    }
}

/// Loss of a batch under weight `alpha` and its gradient. The gradient has
/// one entry per parameter followed by the temperature's.
///
/// NTP runs over every example with its attention and loss masks; the
/// contrastive term pairs each segmented example with its partner, both
/// without suffix. A term whose weight is zero is not evaluated.
pub fn batch_loss_grad<T: Real>(
    state: &ModelState<T>,
    batch: &TrainingBatch,
    alpha: f64,
    opts: LossOptions,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(LossBreakdown, Vec<T>)> {
    let n_params = state.layout().total();
    let mut grads = vec![T::zero(); n_params + 1];
    let mut ntp = 0.0;
    let mut cl = 0.0;

    if alpha < 1.0 {
        let seqs: Vec<&SegmentedSequence> = batch.examples.iter().collect();
        let packed = Packed::new(&seqs);
        let acts = forward_batch(state, &packed.inputs(&seqs), rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let mut targets = Vec::with_capacity(acts.rows());
        let mut include = Vec::with_capacity(acts.rows());
        for s in &seqs {
            targets.extend_from_slice(&s.tokens()[1..]);
            targets.push(0);
            include.extend_from_slice(build_loss_mask(s)?.include());
            include.push(false);
        }
        let vocab = state.config().vocab_size;
        let logits = head_forward(state, &acts.hidden);
        let mask = crate::masking::LossMask::from_vec(include);
        let (loss, mut d_logits) = ntp_loss_grad(&logits, &targets, &mask, vocab)?;
        drop(logits);
        let w = T::c(1.0 - alpha);
        d_logits.iter_mut().for_each(|g| *g *= w);
        let d_hidden = head_backward(state, &acts.hidden, &d_logits, &mut grads[..n_params]);
        drop(d_logits);
        backward(state, &acts, &d_hidden, &mut grads[..n_params]);
        ntp = loss.to_f64().unwrap();
    }

    if alpha > 0.0 {
        let pairs: Vec<(SegmentedSequence, SegmentedSequence)> = batch
            .examples
            .iter()
            .zip(&batch.positive_partners)
            .filter_map(|(e, p)| p.as_ref().map(|p| (e.without_suffix(), p.without_suffix())))
            .collect();
        if pairs.len() < 2 {
            return Err(GemError::invalid(format!(
                "contrastive loss needs at least 2 pairs, batch has {}",
                pairs.len()
            )));
        }
        let seqs: Vec<&SegmentedSequence> =
            pairs.iter().map(|p| &p.0).chain(pairs.iter().map(|p| &p.1)).collect();
        let packed = Packed::new(&seqs);
        let acts = forward_batch(state, &packed.inputs(&seqs), rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let d = state.config().d_model;
        let pooled: Vec<Vec<T>> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| pool(&acts.hidden, acts.row(i, s.m()), s.k(), d, opts.pooling))
            .collect();
        let dim = pooled[0].len();
        let b = pairs.len();
        let query: Vec<T> = pooled[..b].concat();
        let doc: Vec<T> = pooled[b..].concat();
        let g = contrastive_loss_grad(&query, &doc, dim, state.temperature, opts.symmetric)?;
        let w = T::c(alpha);
        let mut d_hidden = vec![T::zero(); acts.hidden.len()];
        for (i, s) in seqs.iter().enumerate() {
            let src = if i < b {
                &g.d_query[i * dim..(i + 1) * dim]
            } else {
                &g.d_doc[(i - b) * dim..(i - b + 1) * dim]
            };
            let scaled: Vec<T> = src.iter().map(|&x| x * w).collect();
            pool_backward(&scaled, &mut d_hidden, acts.row(i, s.m()), s.k(), d, opts.pooling);
        }
        backward(state, &acts, &d_hidden, &mut grads[..n_params]);
        grads[n_params] += g.d_temperature * w;
        cl = g.loss.to_f64().unwrap();
    }

    Ok((combined_loss(ntp, cl, alpha)?, grads))
}

/// Adam with bias correction over the parameters and the temperature.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Completed updates.
    pub t: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// Applies one update. `grads` and the moments cover `params` followed
    /// by the temperature.
    pub fn update(&mut self, params: &mut [T], temperature: &mut T, grads: &[T], lr: f64) {
        assert_eq!(grads.len(), params.len() + 1);
        assert_eq!(self.m.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let step = T::c(lr / bc1);
        let vscale = T::c(1.0 / bc2);
        let eps = T::c(ADAM_EPS);
        let n = params.len();
        for i in 0..=n {
            let g = grads[i];
            let m = b1 * self.m[i] + c1 * g;
            let v = b2 * self.v[i] + c2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let delta = step * m / ((v * vscale).sqrt() + eps);
            if i < n {
                params[i] -= delta;
            } else {
                *temperature -= delta;
            }
        }
    }
}

/// Scales `grads` in place to norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Owns the model and optimizer for the duration of a run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    state: ModelState<T>,
    config: TrainConfig,
    adam: Adam<T>,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(state: ModelState<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.max_seq_len > state.config().max_positions {
            return Err(GemError::invalid(format!(
                "max_seq_len {} exceeds the model's {} positions",
                config.max_seq_len,
                state.config().max_positions
            )));
        }
        let len = state.layout().total() + 1;
        Ok(Self {
            state,
            config,
            adam: Adam::new(len),
            step: 0,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(state: ModelState<T>, config: TrainConfig, opt: &OptimizerSnapshot) -> Result<Self> {
        let mut tr = Self::new(state, config)?;
        if opt.m.len() != tr.adam.m.len() || opt.v.len() != tr.adam.v.len() {
            return Err(GemError::Checkpoint("optimizer state does not match the model".into()));
        }
        let cast = |v: &[f32]| v.iter().map(|&x| T::c(x as f64)).collect();
        tr.adam.m = cast(&opt.m);
        tr.adam.v = cast(&opt.v);
        tr.adam.t = opt.step;
        tr.step = opt.step;
        Ok(tr)
    }

    /// Index of the next step to run.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn into_state(self) -> ModelState<T> {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer_snapshot(&self) -> OptimizerSnapshot {
        let cast = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect();
        OptimizerSnapshot {
            step: self.step,
            m: cast(&self.adam.m),
            v: cast(&self.adam.v),
        }
    }

    pub fn next_batch(&self, corpus: &TrainCorpus) -> Result<TrainingBatch> {
        compose_batch(corpus, &self.config, &mut batch_rng(self.config.seed, self.step), self.step)
    }

    /// Learning rate and loss weight of the next step.
    pub fn schedule(&self) -> (f64, f64) {
        let alpha = alpha_schedule(self.step, self.config.switch_step);
        let base = if alpha > 0.0 { self.config.lr_cl } else { self.config.lr_ntp };
        (cosine_lr(self.step, base, self.config.total_steps), alpha)
    }

    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<StepReport> {
        let (lr, alpha) = self.schedule();
        let opts = LossOptions {
            pooling: self.config.pooling,
            symmetric: self.config.symmetric,
        };
        let mut rng = dropout_rng(self.config.seed, self.step);
        let (loss, mut grads) = batch_loss_grad(&self.state, batch, alpha, opts, Some(&mut rng))?;
        if !loss.total.is_finite() || !crate::tensor::all_finite(&grads) {
            return Err(GemError::NonFiniteLoss { step: self.step });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        let state = &mut self.state;
        self.adam.update(&mut state.params, &mut state.temperature, &grads, lr);
        state.temperature = clamp_temperature(state.temperature);
        let report = StepReport {
            step: self.step,
            lr,
            loss,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }
}

/// File locations of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainRun {
    pub corpus: PathBuf,
    /// Vocabulary to use when starting fresh; built from the corpus if absent.
    pub vocab: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Continue from `checkpoint` if it exists.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub first_step: usize,
    pub steps_run: usize,
    pub snapshots: Vec<PathBuf>,
    pub last: Option<StepReport>,
}

/// `model.ckpt` at 100 steps becomes `model.step100.ckpt`.
pub fn snapshot_path(checkpoint: &Path, steps: usize) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match checkpoint.extension() {
        Some(ext) => format!("{stem}.step{steps}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{steps}"),
    };
    checkpoint.with_file_name(name)
}

const LOG_HEADER: &str = "step,lr,alpha,loss_ntp,loss_cl,loss_total";

fn log_row(r: &StepReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step, r.lr, r.loss.alpha, r.loss.ntp, r.loss.cl, r.loss.total
    )
}

/// Rewrites `path` to keep only its comments, header and rows before `step`.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| GemError::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| GemError::io(path, e))?;
        let row_step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        match row_step {
            Some(s) if s >= step => {}
            _ => kept.push(line),
        }
    }
    let mut out = kept.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| GemError::io(path, e))
}

fn checkpoint_for<T: Real>(tr: &Trainer<T>, vocab: &Vocab, with_optimizer: bool) -> Checkpoint {
    Checkpoint {
        state: tr.state().cast(),
        vocab: Some(vocab.clone()),
        optimizer: with_optimizer.then(|| tr.optimizer_snapshot()),
        meta: serde_json::json!({
            "train_config": tr.config(),
            "steps_completed": tr.step(),
        }),
    }
}

/// Runs (or resumes) training, writing the CSV log and checkpoints.
pub fn train(run: &TrainRun, config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let docs = load_corpus(&run.corpus)?;
    let resuming = run.resume && run.checkpoint.exists();

    let (mut trainer, vocab) = if resuming {
        let ck = Checkpoint::load(&run.checkpoint)?;
        let vocab = ck
            .vocab
            .ok_or_else(|| GemError::Checkpoint("checkpoint has no vocabulary".into()))?;
        let opt = ck
            .optimizer
            .ok_or_else(|| GemError::Checkpoint("checkpoint has no optimizer state".into()))?;
        log::info!("resuming from step {}", opt.step);
        (Trainer::<f32>::resume(ck.state, config.clone(), &opt)?, vocab)
    } else if let Some(init) = &config.init_checkpoint {
        let ck = Checkpoint::load(init)?;
        let vocab = match (&run.vocab, ck.vocab) {
            (Some(p), _) => Vocab::load(p)?,
            (None, Some(v)) => v,
            (None, None) => build_vocab(&docs, config.vocab_cap)?,
        };
        if vocab.len() > ck.state.config().vocab_size {
            return Err(GemError::invalid("vocabulary larger than the initial model's"));
        }
        (Trainer::new(ck.state, config.clone())?, vocab)
    } else {
        let vocab = match &run.vocab {
            Some(p) => Vocab::load(p)?,
            None => build_vocab(&docs, config.vocab_cap)?,
        };
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            ..config.model.clone()
        };
        (Trainer::new(init_model::<f32>(&model_cfg)?, config.clone())?, vocab)
    };
    let corpus = TrainCorpus::new(&docs, &vocab)?;
    let first_step = trainer.step();

    let mut log = if resuming && run.log.exists() {
        truncate_log(&run.log, first_step)?;
        fs::OpenOptions::new()
            .append(true)
            .open(&run.log)
            .map_err(|e| GemError::io(&run.log, e))?
    } else {
        let mut f = fs::File::create(&run.log).map_err(|e| GemError::io(&run.log, e))?;
        let header = format!(
            "# config: {}\n# model: {}\n{LOG_HEADER}\n",
            serde_json::to_string(config)?,
            serde_json::to_string(trainer.state().config())?
        );
        f.write_all(header.as_bytes()).map_err(|e| GemError::io(&run.log, e))?;
        f
    };
    let mut log_buf = std::io::BufWriter::new(&mut log);

    let mut snapshots = Vec::new();
    let mut last = None;
    while trainer.step() < config.total_steps {
        let batch = trainer.next_batch(&corpus)?;
        let report = trainer.train_step(&batch)?;
        writeln!(log_buf, "{}", log_row(&report)).map_err(|e| GemError::io(&run.log, e))?;
        if report.step % 50 == 0 {
            log::info!(
                "step {} lr {:.3e} alpha {} ntp {:.4} cl {:.4}",
                report.step,
                report.lr,
                report.loss.alpha,
                report.loss.ntp,
                report.loss.cl
            );
        }
        last = Some(report);
        let done = trainer.step();
        if config.snapshot_steps.contains(&done) {
            let path = snapshot_path(&run.checkpoint, done);
            checkpoint_for(&trainer, &vocab, false).save(&path)?;
            snapshots.push(path);
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.total_steps {
            log_buf.flush().map_err(|e| GemError::io(&run.log, e))?;
            checkpoint_for(&trainer, &vocab, true).save(&run.checkpoint)?;
        }
    }
    log_buf.flush().map_err(|e| GemError::io(&run.log, e))?;
    checkpoint_for(&trainer, &vocab, true).save(&run.checkpoint)?;
    Ok(TrainSummary {
        checkpoint: run.checkpoint.clone(),
        log: run.log.clone(),
        first_step,
        steps_run: trainer.step() - first_step,
        snapshots,
        last,
    })
}

//! Training-trend criteria on the synthetic corpus.
//!
//! One pretrained base model is shared by every finetune; finetunes are run
//! lazily and cached by `(p_raw, k)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gem_core::corpus::{Document, TokenId, Vocab};
use gem_core::embedder::{EmbedMethod, Pooling};
use gem_core::evalkit::{eval_perplexity, eval_retrieval, make_retrieval_set, RetrievalSet};
use gem_core::model::{init_model, Checkpoint, ModelState};
use gem_core::reconstruct::{compress_tokens, reconstruct_tokens, token_accuracy};
use gem_core::synth::{generate_corpus, SynthConfig};
use gem_core::trainer::{snapshot_path, train, TrainConfig, TrainRun};

use super::Outcome;

pub const NAMES: [(u32, &str); 5] = [
    (7, "desk-scale embedding gain"),
    (8, "contrastive-phase gain"),
    (9, "mix-ratio trend"),
    (10, "k-token trend"),
    (11, "reconstruction"),
];

const DISTINCT: usize = 2000;
const ROWS: usize = 32_000;
const HELD: usize = 200;
const CORPUS_SEED: u64 = 1;
const PRETRAIN_STEPS: usize = 1000;
const PRETRAIN_LR: f64 = 1e-3;
const FINETUNE_STEPS: usize = 2000;
const SNAPSHOT: usize = 100;
const NOISE_RATE: f64 = 0.3;
const RETRIEVAL_SEED: u64 = 11;

const RECON_STEPS: usize = 4000;
const RECON_DISTINCT: usize = 20_000;
const RECON_LR: f64 = 1e-3;
const RECON_PROBES: usize = 200;
const RECON_LEN: usize = 5;

struct Finetune {
    last: ModelState<f32>,
    early: ModelState<f32>,
}

pub struct Lab {
    dir: PathBuf,
    corpus: PathBuf,
    base_ckpt: PathBuf,
    base: ModelState<f32>,
    vocab: Vocab,
    held: Vec<Vec<TokenId>>,
    retrieval: RetrievalSet,
    runs: BTreeMap<(u32, usize), Finetune>,
}

fn write_lines(path: &Path, rows: &[String]) -> Result<()> {
    let mut s = rows.join("\n");
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn fresh_dir(name: &str) -> Result<PathBuf> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run_paths(dir: &Path, corpus: &Path, tag: &str) -> TrainRun {
    TrainRun {
        corpus: corpus.to_path_buf(),
        vocab: None,
        checkpoint: dir.join(format!("{tag}.ckpt")),
        log: dir.join(format!("{tag}.csv")),
        resume: false,
    }
}

impl Lab {
    pub fn new() -> Result<Self> {
        let dir = fresh_dir("acceptance-trends")?;
        let synth = generate_corpus(&SynthConfig::default(), DISTINCT, ROWS, HELD, CORPUS_SEED)?;
        let corpus = dir.join("corpus.txt");
        write_lines(&corpus, &synth.rows)?;
        let held_docs: Vec<Document> = synth
            .held_out
            .iter()
            .enumerate()
            .map(|(i, text)| Document {
                id: format!("held-{i}"),
                text: text.clone(),
            })
            .collect();

        let pretrain = TrainConfig {
            p_raw: 1.0,
            lr_ntp: PRETRAIN_LR,
            switch_step: PRETRAIN_STEPS,
            total_steps: PRETRAIN_STEPS,
            ..TrainConfig::default()
        };
        let run = run_paths(&dir, &corpus, "base");
        train(&run, &pretrain).context("pretraining")?;
        let ck = Checkpoint::load(&run.checkpoint)?;
        let vocab = ck.vocab.context("base checkpoint has no vocabulary")?;
        let held = held_docs.iter().map(|d| vocab.encode(&d.text)).collect();
        let retrieval = make_retrieval_set(&held_docs, NOISE_RATE, &mut ChaCha8Rng::seed_from_u64(RETRIEVAL_SEED))?;
        Ok(Self {
            dir,
            corpus,
            base_ckpt: run.checkpoint,
            base: ck.state,
            vocab,
            held,
            retrieval,
            runs: BTreeMap::new(),
        })
    }

    fn finetune(&mut self, p_raw: f64, k: usize) -> Result<&Finetune> {
        let key = ((p_raw * 1000.0).round() as u32, k);
        if !self.runs.contains_key(&key) {
            let cfg = TrainConfig {
                p_raw,
                k_specials: k,
                total_steps: FINETUNE_STEPS,
                init_checkpoint: Some(self.base_ckpt.clone()),
                snapshot_steps: vec![SNAPSHOT],
                ..TrainConfig::default()
            };
            let run = run_paths(&self.dir, &self.corpus, &format!("gem-p{}-k{k}", key.0));
            train(&run, &cfg).with_context(|| format!("finetuning p={p_raw} k={k}"))?;
            let last = Checkpoint::load(&run.checkpoint)?.state;
            let early = Checkpoint::load(snapshot_path(&run.checkpoint, SNAPSHOT))?.state;
            self.runs.insert(key, Finetune { last, early });
        }
        Ok(&self.runs[&key])
    }

    fn recall(&self, state: &ModelState<f32>, method: EmbedMethod) -> Result<f64> {
        let m = eval_retrieval(|t| method.embed(state, &self.vocab.encode(t)).map(|e| e.vector), &self.retrieval)?;
        Ok(m.recall_at_1)
    }

    fn perplexity(&self, state: &ModelState<f32>) -> Result<f64> {
        Ok(eval_perplexity(state, &self.held)?)
    }

    pub fn embedding_gain(&mut self) -> Outcome {
        let mut run = || -> Result<Outcome> {
            let gem = EmbedMethod::Special { k: 1, pooling: Pooling::Mean };
            let untrained: ModelState<f32> = init_model(self.base.config())?;
            let last = self.finetune(0.8, 1)?.last.clone();
            let ours = self.recall(&last, gem)?;
            let pooled = self.recall(&last, EmbedMethod::Baseline)?;
            let fresh = self.recall(&untrained, gem)?;
            Ok(Outcome::check(
                ours - pooled >= 0.15 && ours - fresh >= 0.30,
                format!("recall@1 special {ours:.3}, mean-pool {pooled:.3}, untrained special {fresh:.3}"),
            ))
        };
        run().into()
    }

    pub fn contrastive_gain(&mut self) -> Outcome {
        let mut run = || -> Result<Outcome> {
            let gem = EmbedMethod::Special { k: 1, pooling: Pooling::Mean };
            let ft = self.finetune(0.8, 1)?;
            let (last, early) = (ft.last.clone(), ft.early.clone());
            let after = self.recall(&last, gem)?;
            let before = self.recall(&early, gem)?;
            Ok(Outcome::check(
                after - before >= 0.05,
                format!("recall@1 at step {SNAPSHOT} {before:.3}, at step {FINETUNE_STEPS} {after:.3}"),
            ))
        };
        run().into()
    }

    pub fn mix_ratio_trend(&mut self) -> Outcome {
        let mut run = || -> Result<Outcome> {
            let gem = EmbedMethod::Special { k: 1, pooling: Pooling::Mean };
            let base_ppl = self.perplexity(&self.base)?;
            let mut rows = Vec::new();
            for p in [0.0, 0.8, 0.99] {
                let last = self.finetune(p, 1)?.last.clone();
                let degradation = self.perplexity(&last)? - base_ppl;
                rows.push((p, degradation, self.recall(&last, gem)?));
            }
            let [(_, d0, r0), (_, d8, r8), (_, d99, r99)] = [rows[0], rows[1], rows[2]];
            let ppl_ok = d99 < d8 && d99 < d0 && d0 > d8;
            let recall_ok = r8 >= r0 && r8 >= r99;
            let detail = rows
                .iter()
                .map(|(p, d, r)| format!("p={p}: ppl +{d:.3}, recall@1 {r:.3}"))
                .collect::<Vec<_>>()
                .join("; ");
            Ok(Outcome::check(ppl_ok && recall_ok, format!("base ppl {base_ppl:.3}; {detail}")))
        };
        run().into()
    }

    pub fn k_token_trend(&mut self) -> Outcome {
        let mut run = || -> Result<Outcome> {
            let one = self.finetune(0.8, 1)?.last.clone();
            let five = self.finetune(0.8, 5)?.last.clone();
            let r1 = self.recall(&one, EmbedMethod::Special { k: 1, pooling: Pooling::Mean })?;
            let r5 = self.recall(&five, EmbedMethod::Special { k: 5, pooling: Pooling::Mean })?;
            Ok(Outcome::check(r5 >= r1 - 0.02, format!("recall@1 k=1 {r1:.3}, k=5 {r5:.3}")))
        };
        run().into()
    }

    pub fn reconstruction(&mut self) -> Outcome {
        let run = || -> Result<Outcome> {
            let dir = fresh_dir("acceptance-reconstruct")?;
            let synth_cfg = SynthConfig {
                min_len: RECON_LEN,
                max_len: 10,
                ..SynthConfig::default()
            };
            let synth = generate_corpus(&synth_cfg, RECON_DISTINCT, ROWS, RECON_PROBES, CORPUS_SEED + 1)?;
            let corpus = dir.join("short.txt");
            write_lines(&corpus, &synth.rows)?;
            let cfg = TrainConfig {
                p_raw: 0.0,
                reconstruct_share: 1.0,
                lr_ntp: RECON_LR,
                switch_step: RECON_STEPS,
                total_steps: RECON_STEPS,
                max_seq_len: 32,
                ..TrainConfig::default()
            };
            let run = run_paths(&dir, &corpus, "recon");
            train(&run, &cfg).context("reconstruction training")?;
            let ck = Checkpoint::load(&run.checkpoint)?;
            let vocab = ck.vocab.context("no vocabulary")?;
            let untrained: ModelState<f32> = init_model(ck.state.config())?;
            let probes: Vec<Vec<TokenId>> = synth
                .held_out
                .iter()
                .map(|t| vocab.encode(t).into_iter().take(RECON_LEN).collect())
                .collect();
            let score = |state: &ModelState<f32>| -> Result<f64> {
                let mut total = 0.0;
                for p in &probes {
                    let cache = compress_tokens(state, p, 1)?;
                    total += token_accuracy(p, &reconstruct_tokens(state, &cache, RECON_LEN)?);
                }
                Ok(total / probes.len() as f64)
            };
            let trained = score(&ck.state)?;
            let fresh = score(&untrained)?;
            Ok(Outcome::check(
                trained >= 0.6 && trained - fresh >= 0.3,
                format!("{} held-out 5-token inputs: accuracy {trained:.3}, untrained {fresh:.3}", probes.len()),
            ))
        };
        run().into()
    }
}

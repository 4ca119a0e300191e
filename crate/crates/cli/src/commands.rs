use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use gem_core::corpus::{build_vocab, load_corpus, Vocab};
use gem_core::embedder::EmbedMethod;
use gem_core::evalkit::{eval_perplexity, eval_retrieval, eval_sts, make_retrieval_set, make_sts_set};
use gem_core::masking::build_gem_mask;
use gem_core::model::{Checkpoint, ModelState};
use gem_core::reconstruct::{compress_tokens, reconstruct_tokens, token_accuracy};
use gem_core::synth::{generate_corpus, SynthConfig};
use gem_core::trainer::{train, TrainRun};
use gem_core::TrainConfig;

use crate::{Cli, Command, Suite, TrainArgs};

const DEFAULT_SEED: u64 = 42;

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildVocab { corpus, out, cap } => {
            let docs = load_corpus(&corpus)?;
            let vocab = build_vocab(&docs, cap)?;
            vocab.save(&out)?;
            log::info!("{} tokens written to {}", vocab.len(), out.display());
        }
        Command::Train(args) => run_train(args, seed)?,
        Command::Embed {
            ckpt,
            input,
            out,
            k,
            pooling,
            baseline,
        } => {
            let method = method(baseline, k, pooling.into());
            let (state, vocab) = load_model(&ckpt)?;
            let docs = load_corpus(&input)?;
            let tokens: Vec<_> = docs.iter().map(|d| vocab.encode(&d.text)).collect();
            let embs = gem_core::embedder::embed_many(&state, &tokens, method)?;
            let mut buf = String::new();
            for (doc, e) in docs.iter().zip(&embs) {
                if e.truncated {
                    log::warn!("document {} was truncated", doc.id);
                }
                buf.push_str(&serde_json::to_string(&json!({
                    "id": doc.id,
                    "dim": e.dim(),
                    "vector": e.vector,
                }))?);
                buf.push('\n');
            }
            write(&out, buf.as_bytes())?;
            let meta = json!({
                "command": "embed",
                "ckpt": ckpt,
                "input": input,
                "method": method,
                "seed": seed.unwrap_or(DEFAULT_SEED),
                "count": embs.len(),
            });
            write(&sidecar(&out), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        }
        Command::Eval {
            ckpt,
            corpus,
            suite,
            out,
            noise_rate,
            k,
            pooling,
            baseline,
        } => {
            let seed = seed.unwrap_or(DEFAULT_SEED);
            let method = method(baseline, k, pooling.into());
            let (state, vocab) = load_model(&ckpt)?;
            let docs = load_corpus(&corpus)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let embed = |t: &str| method.embed(&state, &vocab.encode(t)).map(|e| e.vector);
            let metrics: Vec<(&str, f64)> = match suite {
                Suite::Retrieval => {
                    let set = make_retrieval_set(&docs, noise_rate, &mut rng)?;
                    let m = eval_retrieval(embed, &set)?;
                    vec![("recall_at_1", m.recall_at_1), ("ndcg_at_10", m.ndcg_at_10)]
                }
                Suite::Sts => {
                    let set = make_sts_set(&docs, &mut rng)?;
                    vec![("spearman", eval_sts(embed, &set)?)]
                }
                Suite::Ppl => {
                    let texts: Vec<_> = docs.iter().map(|d| vocab.encode(&d.text)).collect();
                    vec![("perplexity", eval_perplexity(&state, &texts)?)]
                }
            };
            let suite_name = match suite {
                Suite::Retrieval => "retrieval",
                Suite::Sts => "sts",
                Suite::Ppl => "ppl",
            };
            let config = json!({
                "command": "eval",
                "suite": suite_name,
                "corpus": corpus,
                "noise_rate": noise_rate,
                "method": method,
            });
            let mut text = format!("# config: {config}\nsuite,metric,value,seed,ckpt\n");
            for (name, value) in metrics {
                text.push_str(&format!("{suite_name},{name},{value},{seed},{}\n", ckpt.display()));
            }
            write(&out, text.as_bytes())?;
        }
        Command::Reconstruct { ckpt, text, k, max_len } => {
            let (state, vocab) = load_model(&ckpt)?;
            let tokens = vocab.encode(&text);
            let cache = compress_tokens(&state, &tokens, k)?;
            let hyp = reconstruct_tokens(&state, &cache, max_len)?;
            println!("input:     {}", vocab.decode(&tokens)?);
            println!("recovered: {}", vocab.decode(&hyp)?);
            println!("accuracy:  {:.4}", token_accuracy(&tokens, &hyp));
        }
        Command::MaskDump { m, k, n } => {
            print!("{}", build_gem_mask(m, k, n)?.render());
        }
        Command::GenCorpus {
            out,
            held_out,
            distinct,
            rows,
            held,
            min_len,
            max_len,
            config,
        } => {
            let mut cfg: SynthConfig = match &config {
                Some(p) => read_json(p)?,
                None => SynthConfig::default(),
            };
            if let Some(v) = min_len {
                cfg.min_len = v;
            }
            if let Some(v) = max_len {
                cfg.max_len = v;
            }
            let seed = seed.unwrap_or(DEFAULT_SEED);
            let corpus = generate_corpus(&cfg, distinct, rows, held, seed)?;
            write(&out, lines(&corpus.rows).as_bytes())?;
            if let Some(p) = &held_out {
                write(p, lines(&corpus.held_out).as_bytes())?;
            } else if held > 0 {
                log::warn!("{held} held-out documents generated but --held-out not given");
            }
            let meta = json!({
                "command": "gen-corpus",
                "synth": cfg,
                "distinct": distinct,
                "rows": rows,
                "held": held,
                "seed": seed,
            });
            write(&sidecar(&out), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        }
    }
    Ok(())
}

fn method(baseline: bool, k: usize, pooling: gem_core::Pooling) -> EmbedMethod {
    if baseline {
        EmbedMethod::Baseline
    } else {
        EmbedMethod::Special { k, pooling }
    }
}

fn lines(rows: &[String]) -> String {
    let mut s = rows.join("\n");
    s.push('\n');
    s
}

/// `emb.jsonl` -> `emb.jsonl.meta.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<(ModelState<f32>, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let Some(vocab) = ck.vocab else {
        bail!("checkpoint {} carries no vocabulary", path.display());
    };
    Ok((ck.state, vocab))
}

/// Defaults, then the config file, then flags.
pub fn effective_train_config(args: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field.clone() { cfg.$field = v.into(); })*
        };
    }
    set!(
        p_raw,
        k_specials,
        batch_size,
        max_seq_len,
        lr_ntp,
        lr_cl,
        switch_step,
        total_steps,
        dropout_rate_prefix,
        reconstruct_share,
        pooling,
        vocab_cap,
        checkpoint_every
    );
    if args.init_ckpt.is_some() {
        cfg.init_checkpoint = args.init_ckpt.clone();
    }
    if args.symmetric {
        cfg.symmetric = true;
    }
    if !args.snapshot_steps.is_empty() {
        cfg.snapshot_steps = args.snapshot_steps.clone();
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = effective_train_config(&args, seed)?;
    let log = args
        .log
        .clone()
        .unwrap_or_else(|| args.ckpt.with_extension("csv"));
    let run = TrainRun {
        corpus: args.corpus.clone(),
        vocab: args.vocab.clone(),
        checkpoint: args.ckpt.clone(),
        log,
        resume: args.resume,
    };
    let summary = train(&run, &cfg)?;
    if let Some(last) = summary.last {
        log::info!(
            "finished at step {} (ntp {:.4}, cl {:.4})",
            last.step,
            last.loss.ntp,
            last.loss.cl
        );
    }
    Ok(())
}

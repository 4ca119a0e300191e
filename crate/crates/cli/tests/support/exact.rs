use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gem_core::corpus::{TokenId, EMB};
use gem_core::masking::oracle::oracle_allowed;
use gem_core::masking::{build_gem_mask, AttentionMask, SegmentedSequence, SequenceKind};
use gem_core::model::{
    capture_special_kv, forward, forward_trace, init_model, lm_loss_grad, BottleneckDecoder, ModelConfig,
    ModelState,
};
use gem_core::objective::{clamp_temperature, contrastive_loss, MAX_TEMPERATURE};
use gem_core::trainer::{
    batch_loss_grad, batch_rng, compose_batch, dropout_rng, Adam, LossOptions, TrainConfig, TrainCorpus,
    Trainer, TrainingBatch,
};

use super::Outcome;

/// Independent statement of the bottleneck rule.
fn reference_allowed(m: usize, k: usize, n: usize, i: usize, j: usize) -> bool {
    let _ = n;
    if j > i {
        return false;
    }
    if k == 0 {
        return true;
    }
    let special = |x: usize| x >= m && x < m + k;
    if i < m {
        true
    } else if special(i) {
        j < m || j == i
    } else {
        special(j) || j >= m + k
    }
}

pub fn mask_oracle() -> Outcome {
    let t = std::time::Instant::now();
    let mut cases = 0;
    for m in 0..=6 {
        for k in 0..=4 {
            for n in 0..=6 {
                if m + k + n == 0 {
                    continue;
                }
                let mask = match build_gem_mask(m, k, n) {
                    Ok(mask) => mask,
                    Err(e) => return Outcome::Fail(format!("({m},{k},{n}): {e}")),
                };
                let size = m + k + n;
                for i in 0..size {
                    for j in 0..size {
                        let expected = reference_allowed(m, k, n, i, j);
                        if oracle_allowed(m, k, n, i, j).ok() != Some(expected) {
                            return Outcome::Fail(format!("oracle disagrees at ({m},{k},{n}) ({i},{j})"));
                        }
                        if mask.allowed(i, j) != expected {
                            return Outcome::Fail(format!("({m},{k},{n}) differs at ({i},{j})"));
                        }
                    }
                }
                cases += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::check(secs < 1.0, format!("{cases} layouts agree pointwise in {secs:.3}s"))
}

fn random_seq(rng: &mut ChaCha8Rng, m: usize, k: usize, n: usize, vocab: usize) -> SegmentedSequence {
    let mut draw = |len: usize| -> Vec<TokenId> { (0..len).map(|_| rng.gen_range(5..vocab as TokenId)).collect() };
    let mut tokens = draw(m);
    tokens.extend(std::iter::repeat_n(EMB, k));
    tokens.extend(draw(n));
    let kind = if k == 0 { SequenceKind::Plain } else { SequenceKind::Compress };
    SegmentedSequence::new(tokens, m, k, n, kind).expect("valid layout")
}

fn default_model(vocab: usize) -> ModelState<f32> {
    init_model(&ModelConfig {
        vocab_size: vocab,
        ..ModelConfig::default()
    })
    .expect("valid config")
}

pub fn attention_zeros() -> Outcome {
    let state = default_model(64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_row = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..12 {
        let (m, k, n) = (rng.gen_range(1..10), rng.gen_range(1..5), rng.gen_range(1..10));
        let seq = random_seq(&mut rng, m, k, n, 64);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let mask = seq.mask();
        let trace = match forward_trace(&state, seq.tokens(), &mask, &positions) {
            Ok(t) => t,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let t = seq.len();
        for (l, heads) in trace.attention.iter().enumerate() {
            for (h, p) in heads.iter().enumerate() {
                for i in 0..t {
                    let mut sum = 0.0f64;
                    for j in 0..t {
                        let v = p[i * t + j];
                        let special_pair = i != j && (m..m + k).contains(&i) && (m..m + k).contains(&j);
                        let suffix_prefix = i >= m + k && j < m;
                        if (special_pair || suffix_prefix || !mask.allowed(i, j)) && v != 0.0 {
                            return Outcome::Fail(format!(
                                "layer {l} head {h} ({m},{k},{n}): p({i},{j}) = {v:e}"
                            ));
                        }
                        if mask.allowed(i, j) {
                            sum += v as f64;
                        }
                        checked += 1;
                    }
                    worst_row = worst_row.max((sum - 1.0).abs());
                }
            }
        }
    }
    Outcome::check(
        worst_row <= 1e-6,
        format!("{checked} probabilities checked; max |row sum - 1| = {worst_row:.2e}"),
    )
}

pub fn kv_equivalence() -> Outcome {
    let vocab = 96;
    let state = default_model(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    let configs = 24;
    for _ in 0..configs {
        let (m, k, n) = (rng.gen_range(1..16), rng.gen_range(1..6), rng.gen_range(1..16));
        let seq = random_seq(&mut rng, m, k, n, vocab);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let full = match forward(&state, seq.tokens(), &seq.mask(), &positions, None) {
            Ok(f) => f,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let forced = capture_special_kv(&state, &seq)
            .and_then(|c| BottleneckDecoder::new(&state, &c)?.teacher_force(seq.suffix()));
        let forced = match forced {
            Ok(f) => f,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let causal = forward(&state, seq.tokens(), &AttentionMask::causal(seq.len()), &positions, None)
            .expect("causal forward");
        let last = (m + k + n - 1) * vocab;
        let leak = forced[n]
            .iter()
            .zip(&causal.logits[last..last + vocab])
            .fold(0.0f32, |acc, (a, b)| acc.max((a - b).abs()));
        if leak < 1e-4 {
            return Outcome::Fail(format!("({m},{k},{n}): bottleneck logits match an unmasked pass"));
        }
        for (t, logits) in forced.iter().enumerate() {
            let row = m + k - 1 + t;
            for (a, b) in logits.iter().zip(&full.logits[row * vocab..(row + 1) * vocab]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Outcome::check(
        worst <= 1e-5,
        format!("{configs} layouts, max |teacher-forced - full| = {worst:.2e}"),
    )
}

fn tiny_corpus(seed: u64, docs: usize, vocab: usize, lens: std::ops::RangeInclusive<usize>) -> TrainCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..docs)
        .map(|_| {
            let len = rng.gen_range(lens.clone());
            (0..len).map(|_| rng.gen_range(5..vocab as TokenId)).collect()
        })
        .collect();
    TrainCorpus::from_token_seqs(seqs).expect("corpus")
}

fn loss_at(state: &ModelState<f64>, batch: &TrainingBatch, alpha: f64) -> f64 {
    let mut rng = dropout_rng(7, 0);
    batch_loss_grad(state, batch, alpha, LossOptions::default(), Some(&mut rng))
        .expect("loss")
        .0
        .total
}

pub fn gradient_check() -> Outcome {
    let t0 = std::time::Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 32,
        max_positions: 32,
        dropout_rate: 0.1,
        seed: 11,
    };
    let base: ModelState<f64> = init_model(&cfg).expect("config");
    let corpus = tiny_corpus(5, 20, 32, 4..=9);
    let tc = TrainConfig {
        p_raw: 0.5,
        k_specials: 2,
        batch_size: 6,
        max_seq_len: 24,
        switch_step: 1,
        model: cfg.clone(),
        ..TrainConfig::default()
    };
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst = 0.0f64;
    let mut sampled = 0usize;
    for (step, alpha) in [(0usize, 0.0), (1, 1.0)] {
        let batch = compose_batch(&corpus, &tc, &mut batch_rng(3, step), step).expect("batch");
        let mut drng = dropout_rng(7, 0);
        let (_, grads) =
            batch_loss_grad(&base, &batch, alpha, LossOptions::default(), Some(&mut drng)).expect("grad");
        let n_params = base.params.len();
        let mut indices: Vec<usize> = Vec::new();
        for spec in base.layout().specs() {
            for _ in 0..6 {
                indices.push(spec.offset + rng.gen_range(0..spec.len));
            }
        }
        if alpha > 0.0 {
            indices.push(n_params);
        }
        for &idx in &indices {
            let eval = |delta: f64| {
                let mut s = base.clone();
                if idx == n_params {
                    s.temperature += delta;
                } else {
                    s.params[idx] += delta;
                }
                loss_at(&s, &batch, alpha)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            if rel > worst {
                worst = rel;
            }
            sampled += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::check(
        worst <= 1e-3 && sampled >= 200 && secs < 120.0,
        format!("{sampled} parameters over both phases, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

/// Plain Adam written out independently of the trainer.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

pub fn degenerate_trainer() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: 64,
        max_positions: 48,
        dropout_rate: 0.1,
        seed: 21,
    };
    let corpus = tiny_corpus(8, 100, 64, 5..=40);
    let tc = TrainConfig {
        p_raw: 1.0,
        batch_size: 8,
        max_seq_len: 48,
        lr_ntp: 1e-3,
        total_steps: 50,
        seed: 13,
        model: cfg.clone(),
        ..TrainConfig::default()
    };
    let mut gem = Trainer::new(init_model::<f64>(&cfg).expect("config"), tc.clone()).expect("trainer");
    let mut reference: ModelState<f64> = init_model(&cfg).expect("config");
    let mut adam = RefAdam {
        m: vec![0.0; reference.params.len()],
        v: vec![0.0; reference.params.len()],
        t: 0,
    };
    let mut worst = 0.0f64;
    for step in 0..50 {
        let batch = gem.next_batch(&corpus).expect("batch");
        let report = gem.train_step(&batch).expect("step");

        let ref_batch = compose_batch(&corpus, &tc, &mut batch_rng(tc.seed, step), step).expect("batch");
        if ref_batch.examples.iter().any(|e| e.k() > 0) {
            return Outcome::Fail(format!("step {step}: segmented example with p_raw = 1"));
        }
        let seqs: Vec<&[TokenId]> = ref_batch.examples.iter().map(|e| e.tokens()).collect();
        let mut drng = dropout_rng(tc.seed, step);
        let (loss, mut grads) = lm_loss_grad(&reference, &seqs, Some(&mut drng)).expect("reference");
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 1.0 {
            grads.iter_mut().for_each(|g| *g /= norm);
        }
        let lr = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / 50.0).cos());
        adam.step(&mut reference.params, &grads, lr);

        let rel = (report.loss.total - loss).abs() / loss.abs();
        worst = worst.max(rel);
        if report.loss.alpha != 0.0 {
            return Outcome::Fail(format!("step {step}: alpha {}", report.loss.alpha));
        }
    }
    Outcome::check(worst <= 1e-6, format!("50 steps, max relative loss difference {worst:.2e}"))
}

pub fn contrastive_analytics() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let v = [0.3, -1.2, 0.7, 2.0];
    let rows: Vec<f64> = v.iter().cycle().take(16).copied().collect();
    let equal = contrastive_loss(&rows, &rows, 4, 20f64.ln()).expect("loss");
    let err = (equal - 4f64.ln()).abs();
    ok &= err <= 1e-6;
    notes.push(format!("equal-similarity B=4 error {err:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_zero = 0.0f64;
    for b in [2usize, 3, 4, 7, 32] {
        let q: Vec<f64> = (0..b * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..b * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = contrastive_loss(&q, &d, 8, 0.0).expect("loss");
        worst_zero = worst_zero.max((l - (b as f64).ln()).abs() / (b as f64).ln());
    }
    ok &= worst_zero <= 4.0 * f64::EPSILON;
    notes.push(format!("lambda=0 max relative deviation from ln B {worst_zero:.1e}"));

    // direct adversarial pushes on the temperature through the optimizer
    let mut adam = Adam::<f64>::new(2);
    let mut param = [0.0];
    let mut temperature = 20f64.ln();
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for step in 0..1000 {
        let sign = if (step / 100) % 2 == 0 { -1.0 } else { 1.0 };
        adam.update(&mut param, &mut temperature, &[0.0, sign * 1e6], 0.5);
        temperature = clamp_temperature(temperature);
        lo = lo.min(temperature);
        hi = hi.max(temperature);
    }
    let direct_ok = lo >= 0.0 && hi <= MAX_TEMPERATURE;
    ok &= direct_ok;
    notes.push(format!("1000 adversarial updates kept lambda in [{lo:.3}, {hi:.3}]"));

    // real contrastive steps at an aggressive rate
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 40,
        max_positions: 32,
        dropout_rate: 0.1,
        seed: 4,
    };
    let corpus = tiny_corpus(9, 30, 40, 4..=12);
    let tc = TrainConfig {
        batch_size: 8,
        max_seq_len: 32,
        switch_step: 0,
        lr_cl: 0.5,
        total_steps: 200,
        model: cfg.clone(),
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(init_model::<f32>(&cfg).expect("config"), tc).expect("trainer");
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for _ in 0..200 {
        let batch = tr.next_batch(&corpus).expect("batch");
        if tr.train_step(&batch).is_err() {
            break;
        }
        lo = lo.min(tr.state().temperature);
        hi = hi.max(tr.state().temperature);
    }
    let real_ok = lo >= 0.0 && (hi as f64) <= MAX_TEMPERATURE;
    ok &= real_ok;
    notes.push(format!("200 trainer steps at lr 0.5 kept lambda in [{lo:.3}, {hi:.3}]"));
    Outcome::check(ok, notes.join("; "))
}

fn gem(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gem"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEM_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "gem {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

const CLI_CONFIG: &str = r#"{
  "batch_size": 8,
  "max_seq_len": 64,
  "switch_step": 10,
  "total_steps": 20,
  "lr_ntp": 0.001,
  "lr_cl": 0.0001,
  "model": {"n_layers": 2, "n_heads": 2, "d_model": 32, "d_ff": 64, "max_positions": 64}
}"#;

fn cli_session(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::write(dir.join("cfg.json"), CLI_CONFIG).map_err(|e| e.to_string())?;
    let mut captured = Vec::new();
    gem(dir, &["gen-corpus", "--out", "corpus.txt", "--held-out", "held.txt", "--distinct", "60", "--rows", "200", "--held", "30", "--seed", "5"])?;
    gem(dir, &["build-vocab", "--corpus", "corpus.txt", "--out", "vocab.json", "--cap", "600"])?;
    gem(dir, &["train", "--corpus", "corpus.txt", "--vocab", "vocab.json", "--config", "cfg.json", "--ckpt", "model.ckpt", "--log", "train.csv", "--snapshot-step", "10", "--seed", "7"])?;
    gem(dir, &["embed", "--ckpt", "model.ckpt", "--input", "held.txt", "--out", "emb.jsonl", "--k", "1"])?;
    for suite in ["retrieval", "sts", "ppl"] {
        let out = format!("{suite}.csv");
        gem(dir, &["eval", "--ckpt", "model.ckpt", "--corpus", "held.txt", "--suite", suite, "--out", &out, "--seed", "3"])?;
    }
    captured.push((
        "reconstruct.stdout".to_string(),
        gem(dir, &["reconstruct", "--ckpt", "model.ckpt", "--text", "the of and to in", "--max-len", "8"])?,
    ));
    captured.push(("mask.stdout".to_string(), gem(dir, &["mask-dump", "--m", "1", "--k", "2", "--n", "1"])?));
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    for name in names {
        let bytes = std::fs::read(dir.join(&name)).map_err(|e| e.to_string())?;
        captured.push((name, bytes));
    }
    Ok(captured)
}

pub fn cli_determinism() -> Outcome {
    let run = || -> Result<Outcome, String> {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let first = cli_session(a.path())?;
        let second = cli_session(b.path())?;
        if first.len() != second.len() {
            return Ok(Outcome::Fail(format!("{} vs {} artifacts", first.len(), second.len())));
        }
        for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
            if na != nb || ba != bb {
                return Ok(Outcome::Fail(format!("{na} differs between runs")));
            }
        }
        let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
        Ok(Outcome::Pass(format!("{} artifacts byte-identical: {}", names.len(), names.join(", "))))
    };
    run().into()
}

//! Seeded synthetic text: topic-specific pseudo-words mixed with shared
//! content words and a small set of function words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub topic_words: usize,
    pub common_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position holds a function word.
    pub function_rate: f64,
    /// Probability that a content position draws from the document's topic.
    pub topic_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 24,
            topic_words: 60,
            common_words: 300,
            min_len: 20,
            max_len: 60,
            function_rate: 0.3,
            topic_rate: 0.6,
            seed: 7,
        }
    }
}

const FUNCTION_WORDS: [&str; 24] = [
    "the", "a", "of", "and", "to", "in", "is", "with", "on", "for", "as", "by", "was", "that", "it",
    "from", "at", "be", "this", "an", "or", "which", "are", "its",
];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Builds documents from a fixed lexicon. The lexicon depends only on
/// `config.seed`; documents additionally on the caller's generator.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    config: SynthConfig,
    topics: Vec<Vec<String>>,
    common: Vec<String>,
}

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !FUNCTION_WORDS.contains(&w.as_str()) && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Index drawn with probability proportional to `1 / (i + 1)`.
fn zipf(rng: &mut impl Rng, n: usize) -> usize {
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.gen::<f64>() * h;
    for i in 0..n {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return i;
        }
    }
    n - 1
}

impl SynthGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        if config.n_topics == 0 || config.topic_words == 0 || config.common_words == 0 {
            return Err(GemError::invalid("synthetic lexicon sizes must be positive"));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(GemError::invalid(format!(
                "bad length range [{}, {}]",
                config.min_len, config.max_len
            )));
        }
        for (name, p) in [("function_rate", config.function_rate), ("topic_rate", config.topic_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GemError::invalid(format!("{name} {p} outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut taken = std::collections::HashSet::new();
        let topics = (0..config.n_topics)
            .map(|_| pseudo_words(&mut rng, config.topic_words, &mut taken))
            .collect();
        let common = pseudo_words(&mut rng, config.common_words, &mut taken);
        Ok(Self { config, topics, common })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn document(&self, rng: &mut impl Rng) -> String {
        let topic = &self.topics[rng.gen_range(0..self.topics.len())];
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let mut words: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            let w = if rng.gen_bool(self.config.function_rate) {
                FUNCTION_WORDS[zipf(rng, FUNCTION_WORDS.len())]
            } else if rng.gen_bool(self.config.topic_rate) {
                &topic[zipf(rng, topic.len())]
            } else {
                &self.common[zipf(rng, self.common.len())]
            };
            words.push(w);
        }
        words.join(" ")
    }

    /// `count` pairwise distinct documents.
    pub fn distinct_documents(&self, count: usize, rng: &mut impl Rng) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let d = self.document(rng);
            if seen.insert(d.clone()) {
                out.push(d);
            }
        }
        out
    }
}

/// A training corpus of `rows` lines cycling over `distinct` documents in a
/// shuffled order, plus `held_out` further documents absent from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub rows: Vec<String>,
    pub held_out: Vec<String>,
}

pub fn generate_corpus(
    config: &SynthConfig,
    distinct: usize,
    rows: usize,
    held_out: usize,
    seed: u64,
) -> Result<SynthCorpus> {
    if distinct == 0 {
        return Err(GemError::invalid("need at least one distinct document"));
    }
    let gen = SynthGenerator::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = gen.distinct_documents(distinct + held_out, &mut rng);
    let held: Vec<String> = docs.split_off(distinct);
    let mut order: Vec<usize> = (0..rows).map(|i| i % distinct).collect();
    order.shuffle(&mut rng);
    Ok(SynthCorpus {
        rows: order.into_iter().map(|i| docs[i].clone()).collect(),
        held_out: held,
    })
}

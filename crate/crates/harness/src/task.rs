//! Synthetic prompts: associative recall with needles at chosen depths, and
//! random token streams for probing logit drift.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kvqp::Error;

/// Prompt slots taken by one needle: its key token and its value token.
pub const RESERVED_TOKENS: usize = 2;

/// Token id layout shared with the hand-built recall model:
/// `[fillers][keys][values]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecallVocab {
    pub num_keys: usize,
    pub num_fillers: usize,
}

impl RecallVocab {
    pub fn from_vocab(num_keys: usize, vocab: usize) -> Self {
        Self {
            num_keys,
            num_fillers: vocab.saturating_sub(2 * num_keys),
        }
    }

    pub fn key(&self, i: usize) -> usize {
        self.num_fillers + i
    }

    pub fn value(&self, i: usize) -> usize {
        self.num_fillers + self.num_keys + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needle {
    /// Prompt index of the key token; the value token follows it.
    pub position: usize,
    pub key: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallTask {
    pub prompt: Vec<usize>,
    /// In prompt order.
    pub needles: Vec<Needle>,
    /// The key token to decode after the prompt, and the value it must yield.
    pub query: usize,
    pub answer: usize,
}

/// Prompt index of each needle: `floor(depth * (seq_len - 2))`.
pub fn needle_positions(seq_len: usize, depths: &[f64]) -> kvqp::Result<Vec<usize>> {
    if seq_len < RESERVED_TOKENS {
        return Err(Error::Contract(format!("seq_len {seq_len} cannot hold a needle")));
    }
    let span = (seq_len - RESERVED_TOKENS) as f64;
    let mut out = Vec::with_capacity(depths.len());
    for &d in depths {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::Contract(format!("needle depth {d} outside [0, 1]")));
        }
        out.push((d * span).floor() as usize);
    }
    let mut sorted = out.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[1] - w[0] < RESERVED_TOKENS) {
        return Err(Error::Contract(format!(
            "{} needles overlap in a {seq_len}-token prompt",
            depths.len()
        )));
    }
    Ok(out)
}

/// Key–value needles at the given depths among random fillers. Keys are a
/// seeded permutation, so each needle has its own key; the query is one of
/// them chosen by the seed.
pub fn gen_recall_task(seq_len: usize, vocab: RecallVocab, depths: &[f64], seed: u64) -> kvqp::Result<RecallTask> {
    if depths.is_empty() || depths.len() > vocab.num_keys {
        return Err(Error::Contract(format!(
            "{} needles need between 1 and {} keys",
            depths.len(),
            vocab.num_keys
        )));
    }
    if vocab.num_fillers == 0 {
        return Err(Error::Contract("vocabulary has no filler tokens".into()));
    }
    let positions = needle_positions(seq_len, depths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<usize> = (0..vocab.num_keys).collect();
    keys.shuffle(&mut rng);
    let mut prompt: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..vocab.num_fillers)).collect();
    let mut needles: Vec<Needle> = positions
        .iter()
        .zip(&keys)
        .map(|(&position, &k)| Needle {
            position,
            key: vocab.key(k),
            value: vocab.value(k),
        })
        .collect();
    needles.sort_by_key(|n| n.position);
    for n in &needles {
        prompt[n.position] = n.key;
        prompt[n.position + 1] = n.value;
    }
    let chosen = needles[rng.random_range(0..needles.len())];
    Ok(RecallTask {
        prompt,
        needles,
        query: chosen.key,
        answer: chosen.value,
    })
}

/// Uniform random prompt followed by uniform random probe tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeTask {
    pub prompt: Vec<usize>,
    pub probes: Vec<usize>,
}

pub fn gen_probe_task(seq_len: usize, probe_tokens: usize, vocab: usize, seed: u64) -> ProbeTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n| (0..n).map(|_| rng.random_range(0..vocab)).collect();
    ProbeTask {
        prompt: draw(seq_len),
        probes: draw(probe_tokens),
    }
}

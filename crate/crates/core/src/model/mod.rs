//! Attention-only decoder that runs prefill and decode through the
//! compressed cache.
//!
//! Each layer is multi-head causal attention with a residual connection and
//! nothing else: no FFN, no normalization. Scores are scaled by
//! `1/sqrt(head_dim)`. Positions are not encoded unless
//! [`ModelConfig::positional`] is set, in which case sinusoidal absolute
//! encodings are added to the token embeddings.
//!
//! Prefill and decode share the same row arithmetic, so a full-budget 16-bit
//! cache reproduces dense decoding exactly.
//!
//! # Weights file
//!
//! Little-endian throughout:
//!
//! ```text
//! "KVQW" version:u32=1
//! layers:u32 heads:u32 d_model:u32 vocab:u32 context_limit:u32 seed:u64 positional:u8
//! embedding, then per layer W_Q W_K W_V W_O, then the output head;
//! each matrix as rows:u32 cols:u32 data:f32[rows*cols] (row-major)
//! ```

pub mod recall;

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{CompressedKvCache, KvStates};
use crate::codec::{Decoder, Encoder};
use crate::error::{contract, Error, Result};
use crate::tensor::{dot, softmax_in_place, Matrix};

const WEIGHTS_MAGIC: &[u8; 4] = b"KVQW";
const WEIGHTS_VERSION: usize = 1;

/// Half-width of the uniform distribution used for random weights.
pub const RANDOM_WEIGHT_RANGE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub context_limit: usize,
    pub seed: u64,
    /// Add sinusoidal absolute position encodings to the embeddings.
    pub positional: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.layers, self.heads, self.d_model, self.vocab, self.context_limit];
        if counts.contains(&0) {
            contract!("model counts must all be at least 1: {self:?}");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            contract!("d_model {} is not divisible by {} heads", self.d_model, self.heads);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
    /// `vocab × d_model`.
    pub embedding: Matrix,
    /// `d_model × vocab`.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

/// Full-precision results of running the prompt.
#[derive(Debug, Clone)]
pub struct Prefill {
    /// Next-token logits after the last prompt token.
    pub logits: Vec<f32>,
    pub states: KvStates,
    /// Final hidden state of every position.
    pub hidden: Matrix,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if weights.layers.len() != config.layers {
            contract!("{} layer weights for {} layers", weights.layers.len(), config.layers);
        }
        for (i, l) in weights.layers.iter().enumerate() {
            for (name, m) in [("W_Q", &l.w_q), ("W_K", &l.w_k), ("W_V", &l.w_v), ("W_O", &l.w_o)] {
                if m.shape() != (d, d) {
                    contract!("layer {i} {name} is {:?}, expected {d}x{d}", m.shape());
                }
            }
        }
        if weights.embedding.shape() != (config.vocab, d) {
            contract!("embedding is {:?}, expected {}x{d}", weights.embedding.shape(), config.vocab);
        }
        if weights.output.shape() != (d, config.vocab) {
            contract!("output head is {:?}, expected {d}x{}", weights.output.shape(), config.vocab);
        }
        Ok(Self { config, weights })
    }

    /// Weights drawn from uniform(−0.1, 0.1) seeded by `config.seed`.
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-RANDOM_WEIGHT_RANGE..RANDOM_WEIGHT_RANGE))
                .collect();
            Matrix::new(rows, cols, data).expect("finite draws")
        };
        let embedding = draw(config.vocab, d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                w_q: draw(d, d),
                w_k: draw(d, d),
                w_v: draw(d, d),
                w_o: draw(d, d),
            })
            .collect();
        let output = draw(d, config.vocab);
        Self::new(
            config,
            Weights {
                layers,
                embedding,
                output,
            },
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn embed(&self, token: usize, position: usize) -> Result<Vec<f32>> {
        if token >= self.config.vocab {
            contract!("token {token} outside vocab of {}", self.config.vocab);
        }
        let mut h = self.weights.embedding.row(token).to_vec();
        if self.config.positional {
            for (x, p) in h.iter_mut().zip(sinusoid(position, self.config.d_model)) {
                *x += p;
            }
        }
        Ok(h)
    }

    /// Runs the whole prompt, returning next-token logits and the dense
    /// per-layer/head K, V and attention probabilities.
    pub fn prefill(&self, tokens: &[usize]) -> Result<Prefill> {
        let (hidden, states) = self.forward(tokens)?;
        let logits = match hidden.rows() {
            0 => contract!("empty prompt"),
            n => self.readout(hidden.row(n - 1))?,
        };
        Ok(Prefill {
            logits,
            states,
            hidden,
        })
    }

    /// Next-token logits at every prompt position.
    pub fn logits_all(&self, tokens: &[usize]) -> Result<Matrix> {
        let (hidden, _) = self.forward(tokens)?;
        hidden.matmul(&self.weights.output)
    }

    fn forward(&self, tokens: &[usize]) -> Result<(Matrix, KvStates)> {
        let cfg = &self.config;
        if tokens.len() > cfg.context_limit {
            contract!("prompt of {} tokens exceeds context limit {}", tokens.len(), cfg.context_limit);
        }
        let n = tokens.len();
        let (hd, heads) = (cfg.head_dim(), cfg.heads);
        let scale = attention_scale(hd);
        let rows = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| self.embed(t, p))
            .collect::<Result<Vec<_>>>()?;
        let mut x = if n == 0 {
            Matrix::empty(cfg.d_model)
        } else {
            Matrix::from_rows(&rows)?
        };
        let mut states = KvStates {
            keys: Vec::with_capacity(cfg.layers),
            values: Vec::with_capacity(cfg.layers),
            attn: Vec::with_capacity(cfg.layers),
        };
        for lw in &self.weights.layers {
            let q = x.matmul(&lw.w_q)?;
            let k = x.matmul(&lw.w_k)?;
            let v = x.matmul(&lw.w_v)?;
            let mut concat = Matrix::zeros(n, cfg.d_model);
            let (mut ks, mut vs, mut ps) = (Vec::new(), Vec::new(), Vec::new());
            for h in 0..heads {
                let kh = k.column_block(h * hd, hd)?;
                let vh = v.column_block(h * hd, hd)?;
                let mut probs = Matrix::zeros(n, n);
                for i in 0..n {
                    let qi = &q.row(i)[h * hd..(h + 1) * hd];
                    let (p, o) = attend(qi, &kh, &vh, i + 1, scale);
                    probs.row_mut(i)[..=i].copy_from_slice(&p);
                    concat.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(&o);
                }
                ks.push(kh);
                vs.push(vh);
                ps.push(probs);
            }
            x = x.add(&concat.matmul(&lw.w_o)?)?;
            states.keys.push(ks);
            states.values.push(vs);
            states.attn.push(ps);
        }
        Ok((x, states))
    }

    fn readout(&self, h: &[f32]) -> Result<Vec<f32>> {
        Ok(Matrix::row_vector(h)?.matmul(&self.weights.output)?.into_data())
    }

    /// Feeds `token` at the next position through the compressed cache and
    /// returns its next-token logits.
    pub fn decode_step(&self, cache: &mut CompressedKvCache, token: usize) -> Result<Vec<f32>> {
        let h = self.embed(token, cache.seq_len())?;
        self.decode_hidden(cache, &h)
    }

    /// Decode from an explicit input hidden state.
    pub fn decode_hidden(&self, cache: &mut CompressedKvCache, h: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.config;
        if h.len() != cfg.d_model {
            contract!("hidden state of width {} for d_model {}", h.len(), cfg.d_model);
        }
        if cache.num_layers() != cfg.layers || cache.num_heads() != cfg.heads || cache.head_dim() != cfg.head_dim() {
            contract!("cache geometry does not match the model");
        }
        let (hd, scale) = (cfg.head_dim(), attention_scale(cfg.head_dim()));
        let mut x = Matrix::row_vector(h)?;
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let q = x.matmul(&lw.w_q)?;
            let k = x.matmul(&lw.w_k)?;
            let v = x.matmul(&lw.w_v)?;
            let mut concat = Matrix::zeros(1, cfg.d_model);
            for head in 0..cfg.heads {
                let span = head * hd..(head + 1) * hd;
                cache.decode_append(l, head, &k.row(0)[span.clone()], &v.row(0)[span.clone()])?;
                let (kc, vc) = cache.materialize(l, head)?;
                let (_, o) = attend(&q.row(0)[span.clone()], &kc, &vc, kc.rows(), scale);
                concat.row_mut(0)[span].copy_from_slice(&o);
            }
            x = x.add(&concat.matmul(&lw.w_o)?)?;
        }
        self.readout(x.row(0))
    }

    /// Reference logits for `token` appended to `prompt`, without any cache.
    pub fn dense_decode(&self, prompt: &[usize], token: usize) -> Result<Vec<f32>> {
        let mut tokens = prompt.to_vec();
        tokens.push(token);
        Ok(self.prefill(&tokens)?.logits)
    }

    pub fn write_weights<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let mut e = Encoder::new(w);
        e.bytes(WEIGHTS_MAGIC)?;
        e.u32(WEIGHTS_VERSION)?;
        for v in [c.layers, c.heads, c.d_model, c.vocab, c.context_limit] {
            e.u32(v)?;
        }
        e.u64(c.seed)?;
        e.u8(u8::from(c.positional))?;
        e.matrix(&self.weights.embedding)?;
        for l in &self.weights.layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                e.matrix(m)?;
            }
        }
        e.matrix(&self.weights.output)
    }

    pub fn read_weights<R: Read>(r: R) -> Result<Self> {
        let mut d = Decoder::new(r);
        d.expect_magic(WEIGHTS_MAGIC)?;
        let version = d.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Integrity(format!("unsupported weights version {version}")));
        }
        let config = ModelConfig {
            layers: d.u32()?,
            heads: d.u32()?,
            d_model: d.u32()?,
            vocab: d.u32()?,
            context_limit: d.u32()?,
            seed: d.u64()?,
            positional: d.u8()? != 0,
        };
        config.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        let embedding = d.matrix()?;
        let layers = (0..config.layers)
            .map(|_| {
                Ok(LayerWeights {
                    w_q: d.matrix()?,
                    w_k: d.matrix()?,
                    w_v: d.matrix()?,
                    w_o: d.matrix()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = d.matrix()?;
        let weights = Weights {
            layers,
            embedding,
            output,
        };
        Self::new(config, weights).map_err(|e| Error::Integrity(e.to_string()))
    }
}

pub fn attention_scale(head_dim: usize) -> f32 {
    1.0 / (head_dim as f32).sqrt()
}

/// Softmax attention of `q` over the first `len` rows of `k`/`v`.
/// Returns the probabilities and the weighted value sum.
pub fn attend(q: &[f32], k: &Matrix, v: &Matrix, len: usize, scale: f32) -> (Vec<f32>, Vec<f32>) {
    let mut p: Vec<f32> = (0..len).map(|j| dot(q, k.row(j)) * scale).collect();
    softmax_in_place(&mut p);
    let mut out = vec![0.0f32; v.cols()];
    for (j, &pj) in p.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += pj * x;
        }
    }
    (p, out)
}

/// Sinusoidal absolute position encoding of width `d`.
pub fn sinusoid(position: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf((i - i % 2) as f64 / d as f64);
            let angle = position as f64 / freq;
            (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
        })
        .collect()
}

/// Infinity-norm distance between two logit vectors.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Index of the largest logit, smallest index on ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

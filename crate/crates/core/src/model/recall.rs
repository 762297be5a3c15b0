//! Hand-built one-layer, one-head model that solves associative recall.
//!
//! The vocabulary is `[fillers][keys K_0..P][values V_0..P]`. A prompt holds
//! `K_i V_i` pairs among filler tokens, and querying `K_i` must produce
//! `V_i`. The residual stream has four blocks:
//!
//! ```text
//! [ q-block: P | k-block: P | v-block: P | null: 1 ]
//! ```
//!
//! * `K_i` embeds as one-hot `i` in the q-block only, so it is invisible to
//!   keys and values.
//! * `V_i` embeds as one-hot `i` in both the k-block (its address) and the
//!   v-block (its content), plus bounded noise on the v-block and null.
//! * Fillers embed as 1 on the null dimension plus the same kind of noise.
//!
//! `W_Q` maps q-block `i` to k-block `i` scaled so the matching score is
//! `attention_gain` after `1/sqrt(d)`, `W_K` keeps the k-block, and
//! `W_V`/`W_O` copy the v-block and null. The output head reads v-block `i`
//! into the logit of `V_i` and the null into the logit of the first filler.
//!
//! If the needle's value token is retained, its attention weight is at least
//! `w = e^a / (e^a + n - 1)` among `n` cached tokens, so its logit beats every
//! other by `gain * (2w - 1 - 2*noise)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{attention_scale, LayerWeights, Model, ModelConfig, Weights};
use crate::error::{contract, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallSpec {
    pub num_keys: usize,
    /// Must cover `2 * num_keys` plus at least one filler.
    pub vocab: usize,
    /// Bound on the embedding noise of value and filler tokens.
    pub noise: f32,
    /// Post-scaling score of a matching key.
    pub attention_gain: f32,
    /// Scale of the output head.
    pub output_gain: f32,
    pub context_limit: usize,
    pub seed: u64,
}

impl Default for RecallSpec {
    fn default() -> Self {
        Self {
            num_keys: 16,
            vocab: 40,
            noise: 0.05,
            attention_gain: 16.0,
            output_gain: 10.0,
            context_limit: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecallModel {
    pub model: Model,
    pub spec: RecallSpec,
    /// Guaranteed logit margin with a full context of cached tokens.
    pub margin: f32,
}

impl RecallModel {
    pub fn num_fillers(&self) -> usize {
        self.spec.vocab - 2 * self.spec.num_keys
    }

    pub fn filler(&self, i: usize) -> usize {
        i % self.num_fillers()
    }

    pub fn key(&self, i: usize) -> usize {
        self.num_fillers() + i
    }

    pub fn value(&self, i: usize) -> usize {
        self.num_fillers() + self.spec.num_keys + i
    }

    /// Logit margin guaranteed when `n` tokens are cached and the queried
    /// value token is among them.
    pub fn margin_for(&self, n: usize) -> f32 {
        margin(&self.spec, n)
    }
}

fn margin(spec: &RecallSpec, n: usize) -> f32 {
    let a = f64::from(spec.attention_gain);
    // e^a / (e^a + n - 1), written to stay finite for large a
    let w = 1.0 / (1.0 + (n.max(1) - 1) as f64 * (-a).exp());
    (f64::from(spec.output_gain) * (2.0 * w - 1.0 - 2.0 * f64::from(spec.noise))) as f32
}

/// Builds the recall weights described in the module docs.
pub fn build_recall_model(spec: RecallSpec) -> Result<RecallModel> {
    let p = spec.num_keys;
    if p == 0 {
        contract!("recall model needs at least one key");
    }
    if spec.vocab < 2 * p + 1 {
        contract!("vocab {} cannot hold {p} keys, {p} values and a filler", spec.vocab);
    }
    if !(0.0..0.5).contains(&spec.noise) {
        contract!("noise {} must lie in [0, 0.5)", spec.noise);
    }
    let fillers = spec.vocab - 2 * p;
    let d = 3 * p + 1;
    let (kb, vb, null) = (p, 2 * p, 3 * p);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noisy = |row: &mut [f32]| {
        for x in &mut row[vb..] {
            if spec.noise > 0.0 {
                *x += rng.random_range(-spec.noise..spec.noise);
            }
        }
    };

    let mut embedding = Matrix::zeros(spec.vocab, d);
    for f in 0..fillers {
        let row = embedding.row_mut(f);
        row[null] = 1.0;
        noisy(row);
    }
    for i in 0..p {
        embedding.set(fillers + i, i, 1.0);
        let row = embedding.row_mut(fillers + p + i);
        row[kb + i] = 1.0;
        row[vb + i] = 1.0;
        noisy(row);
    }

    let alpha = spec.attention_gain / attention_scale(d);
    let mut w_q = Matrix::zeros(d, d);
    let mut w_k = Matrix::zeros(d, d);
    let mut copy = Matrix::zeros(d, d);
    let mut output = Matrix::zeros(d, spec.vocab);
    for i in 0..p {
        w_q.set(i, kb + i, alpha);
        w_k.set(kb + i, kb + i, 1.0);
        copy.set(vb + i, vb + i, 1.0);
        output.set(vb + i, fillers + p + i, spec.output_gain);
    }
    copy.set(null, null, 1.0);
    output.set(null, 0, spec.output_gain);

    let config = ModelConfig {
        layers: 1,
        heads: 1,
        d_model: d,
        vocab: spec.vocab,
        context_limit: spec.context_limit,
        seed: spec.seed,
        positional: false,
    };
    let weights = Weights {
        layers: vec![LayerWeights {
            w_q,
            w_k,
            w_v: copy.clone(),
            w_o: copy,
        }],
        embedding,
        output,
    };
    Ok(RecallModel {
        model: Model::new(config, weights)?,
        spec,
        margin: margin(&spec, spec.context_limit),
    })
}

/// Worst-case change of any logit when a one-layer, one-head model attends
/// from `query` (the input hidden state) over `approx` K/V instead of
/// `exact` K/V.
///
/// With per-key score error at most `Δ`, softmax weights move by at most
/// `e^{2Δ} - 1` in L1, so the attention output moves by at most
/// `(e^{2Δ} - 1) * max|V'| + max|V' - V|`, and the logits by that times the
/// largest absolute column sum of `W_O * W_out`.
pub fn perturbation_bound(model: &Model, query: &[f32], exact: (&Matrix, &Matrix), approx: (&Matrix, &Matrix)) -> Result<f32> {
    let cfg = model.config();
    if cfg.layers != 1 || cfg.heads != 1 {
        contract!("perturbation bound needs a one-layer, one-head model");
    }
    if exact.0.shape() != approx.0.shape() || exact.1.shape() != approx.1.shape() {
        contract!("exact and approximate K/V shapes differ");
    }
    let lw = &model.weights().layers[0];
    let q = Matrix::row_vector(query)?.matmul(&lw.w_q)?;
    let scale = f64::from(attention_scale(cfg.head_dim()));
    let mut score_err = 0.0f64;
    for (k, k2) in exact.0.iter_rows().zip(approx.0.iter_rows()) {
        let diff: Vec<f32> = k2.iter().zip(k).map(|(a, b)| a - b).collect();
        score_err = score_err.max(f64::from(dot(q.row(0), &diff)).abs() * scale);
    }
    let v_max = approx.1.data().iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let v_err = exact.1.max_abs_diff(approx.1)?;
    let out_err = ((2.0 * score_err).exp() - 1.0) * f64::from(v_max) + f64::from(v_err);
    let readout = lw.w_o.matmul(&model.weights().output)?;
    let gain = (0..readout.cols())
        .map(|c| (0..readout.rows()).map(|r| f64::from(readout.get(r, c).abs())).sum::<f64>())
        .fold(0.0, f64::max);
    Ok((out_err * gain) as f32)
}

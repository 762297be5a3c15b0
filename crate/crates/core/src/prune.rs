//! Prefill-time token eviction.
//!
//! Every policy returns, for one layer and head, the sorted set of token
//! indices to keep under a token budget. The trailing `recent_window` tokens
//! are always kept. Policies differ in how the remaining slots are filled:
//!
//! * StreamingLLM keeps the first tokens (attention sinks).
//! * H2O keeps the keys with the largest cumulative attention over all
//!   prefill queries.
//! * SnapKV keeps the keys with the largest attention from the trailing
//!   observation window, after centered max-pooling over key positions.
//! * PyramidKV uses SnapKV scoring with a smaller window (8 by default); its
//!   per-layer budgets come from [`crate::budget::pyramid_allocation`].
//!
//! Ties are broken in favour of the smaller index, so selection is fully
//! deterministic.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_RECENT_WINDOW: usize = 32;
pub const PYRAMID_RECENT_WINDOW: usize = 8;
pub const DEFAULT_POOL_WIDTH: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    StreamingLlm,
    H2o,
    SnapKv,
    PyramidKv,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::StreamingLlm,
        PolicyKind::H2o,
        PolicyKind::SnapKv,
        PolicyKind::PyramidKv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::StreamingLlm => "streamingllm",
            PolicyKind::H2o => "h2o",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::PyramidKv => "pyramidkv",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Contract(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub recent_window: usize,
    /// Max-pooling width for SnapKV and PyramidKV; odd.
    pub pool_width: usize,
}

impl PolicyConfig {
    /// Default window and pooling for `kind`.
    pub fn new(kind: PolicyKind) -> Self {
        let recent_window = match kind {
            PolicyKind::PyramidKv => PYRAMID_RECENT_WINDOW,
            _ => DEFAULT_RECENT_WINDOW,
        };
        Self {
            kind,
            recent_window,
            pool_width: DEFAULT_POOL_WIDTH,
        }
    }

    pub fn with_recent_window(mut self, recent_window: usize) -> Self {
        self.recent_window = recent_window;
        self
    }

    pub fn with_pool_width(mut self, pool_width: usize) -> Self {
        self.pool_width = pool_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.recent_window == 0 {
            contract!("recent window must be at least 1");
        }
        if self.pool_width == 0 || self.pool_width.is_multiple_of(2) {
            contract!("pool width must be odd, got {}", self.pool_width);
        }
        Ok(())
    }
}

/// Prefill attention of one head, queries by keys, used to score keys.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub attn_probs: &'a Matrix,
    pub layer_index: usize,
    pub head_index: usize,
}

impl<'a> ScoreContext<'a> {
    /// Wraps a causal, row-normalized attention matrix.
    pub fn new(attn_probs: &'a Matrix, layer_index: usize, head_index: usize) -> Result<Self> {
        let (rows, cols) = attn_probs.shape();
        if rows != cols {
            contract!("attention matrix must be square, got {rows}x{cols}");
        }
        for (i, row) in attn_probs.iter_rows().enumerate() {
            if row[i + 1..].iter().any(|&p| p != 0.0) {
                contract!("attention row {i} has mass beyond the causal prefix");
            }
            let total: f64 = row.iter().map(|&p| f64::from(p)).sum();
            if (total - 1.0).abs() > 1e-5 {
                contract!("attention row {i} sums to {total}");
            }
        }
        Ok(Self {
            attn_probs,
            layer_index,
            head_index,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.attn_probs.rows()
    }
}

/// The retained token indices of one layer and head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneDecision {
    retained: Vec<usize>,
    budget: usize,
}

impl PruneDecision {
    /// Keeps every one of `n` tokens.
    pub fn keep_all(n: usize, budget: usize) -> Self {
        Self {
            retained: (0..n).collect(),
            budget,
        }
    }

    pub fn from_indices(retained: Vec<usize>, budget: usize) -> Result<Self> {
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            contract!("retained indices must be strictly increasing");
        }
        Ok(Self { retained, budget })
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }
}

/// Indices of the `k` largest scores, ties to the smaller index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        contract!("top-k of {} requested from {} scores", k, scores.len());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_score = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

fn check_budget(budget: usize, cfg: &PolicyConfig) -> Result<()> {
    cfg.validate()?;
    if budget < cfg.recent_window {
        contract!(
            "budget {budget} is below the {} policy's recent window {}",
            cfg.kind,
            cfg.recent_window
        );
    }
    Ok(())
}

/// Keeps the first `budget - recent_window` tokens and the last
/// `recent_window`.
pub fn score_streaming(n: usize, budget: usize, cfg: &PolicyConfig) -> Result<PruneDecision> {
    if budget >= n {
        return Ok(PruneDecision::keep_all(n, budget));
    }
    check_budget(budget, cfg)?;
    let sinks = budget - cfg.recent_window;
    let retained = (0..sinks).chain(n - cfg.recent_window..n).collect();
    Ok(PruneDecision { retained, budget })
}

/// Fills the non-recent slots from `scores` (one per candidate key, i.e.
/// every key before the recent window).
fn keep_top_and_recent(scores: &[f64], n: usize, budget: usize, recent: usize) -> Result<PruneDecision> {
    debug_assert_eq!(scores.len(), n - recent);
    let mut retained = top_k_indices(scores, budget - recent)?;
    retained.extend(n - recent..n);
    Ok(PruneDecision { retained, budget })
}

/// Cumulative attention each key receives from every query row.
pub fn cumulative_scores(attn: &Matrix) -> Vec<f64> {
    let mut scores = vec![0.0f64; attn.cols()];
    for row in attn.iter_rows() {
        for (s, &p) in scores.iter_mut().zip(row) {
            *s += f64::from(p);
        }
    }
    scores
}

/// Attention the first `candidates` keys receive from the trailing `window`
/// query rows, max-pooled with a centered window of `pool_width` clamped to
/// the candidate range.
pub fn observation_scores(attn: &Matrix, window: usize, candidates: usize, pool_width: usize) -> Vec<f64> {
    let n = attn.rows();
    let mut raw = vec![0.0f64; candidates];
    for i in n.saturating_sub(window)..n {
        for (s, &p) in raw.iter_mut().zip(attn.row(i)) {
            *s += f64::from(p);
        }
    }
    let half = pool_width / 2;
    (0..candidates)
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + half + 1).min(candidates);
            raw[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// H2O: heavy hitters by cumulative attention plus the recent window.
pub fn score_h2o(ctx: &ScoreContext<'_>, budget: usize, cfg: &PolicyConfig) -> Result<PruneDecision> {
    let n = ctx.seq_len();
    if budget >= n {
        return Ok(PruneDecision::keep_all(n, budget));
    }
    check_budget(budget, cfg)?;
    let mut scores = cumulative_scores(ctx.attn_probs);
    scores.truncate(n - cfg.recent_window);
    keep_top_and_recent(&scores, n, budget, cfg.recent_window)
}

/// SnapKV: pooled observation-window attention plus the window itself.
pub fn score_snapkv(ctx: &ScoreContext<'_>, budget: usize, cfg: &PolicyConfig) -> Result<PruneDecision> {
    let n = ctx.seq_len();
    if budget >= n {
        return Ok(PruneDecision::keep_all(n, budget));
    }
    check_budget(budget, cfg)?;
    let window = cfg.recent_window;
    let scores = observation_scores(ctx.attn_probs, window, n - window, cfg.pool_width);
    keep_top_and_recent(&scores, n, budget, window)
}

/// PyramidKV: SnapKV mechanics with the layer's own budget.
pub fn score_pyramidkv(ctx: &ScoreContext<'_>, layer_budget: usize, cfg: &PolicyConfig) -> Result<PruneDecision> {
    score_snapkv(ctx, layer_budget, cfg)
}

/// Dispatches on `cfg.kind`.
pub fn select(ctx: &ScoreContext<'_>, budget: usize, cfg: &PolicyConfig) -> Result<PruneDecision> {
    match cfg.kind {
        PolicyKind::StreamingLlm => score_streaming(ctx.seq_len(), budget, cfg),
        PolicyKind::H2o => score_h2o(ctx, budget, cfg),
        PolicyKind::SnapKv => score_snapkv(ctx, budget, cfg),
        PolicyKind::PyramidKv => score_pyramidkv(ctx, budget, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn causal_uniform(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, 1.0 / (i + 1) as f32);
            }
        }
        m
    }

    /// Builds a causal attention matrix from per-row logits.
    fn causal_from_logits(logits: &[f32], n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            let row = &mut m.row_mut(i)[..=i];
            row.copy_from_slice(&logits[i * n..i * n + i + 1]);
            crate::tensor::softmax_in_place(row);
        }
        m
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(top_k_indices(&[0.2, 0.1, 0.3], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.2], 0).unwrap(), Vec::<usize>::new());
        assert!(top_k_indices(&[0.2], 2).is_err());
    }

    #[test]
    fn streaming_examples() {
        let cfg = PolicyConfig::new(PolicyKind::StreamingLlm).with_recent_window(4);
        assert_eq!(score_streaming(10, 6, &cfg).unwrap().retained(), &[0, 1, 6, 7, 8, 9]);
        assert_eq!(score_streaming(5, 8, &cfg).unwrap().retained(), &[0, 1, 2, 3, 4]);
        let cfg = PolicyConfig::new(PolicyKind::StreamingLlm);
        let d = score_streaming(100, 32, &cfg).unwrap();
        assert_eq!(d.retained(), (68..100).collect::<Vec<_>>().as_slice());
        assert!(score_streaming(100, 31, &cfg).is_err());
    }

    #[test]
    fn h2o_examples() {
        let attn = causal_uniform(8);
        let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
        let cfg = PolicyConfig::new(PolicyKind::H2o).with_recent_window(2);
        // causal-uniform scores decrease with index, so the earliest keys win
        assert_eq!(score_h2o(&ctx, 4, &cfg).unwrap().retained(), &[0, 1, 6, 7]);

        let attn = causal_uniform(4);
        let scores = cumulative_scores(&attn);
        let expected = [
            1.0 + 0.5 + 1.0 / 3.0 + 0.25,
            0.5 + 1.0 / 3.0 + 0.25,
            1.0 / 3.0 + 0.25,
            0.25,
        ];
        for (s, e) in scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-6);
        }
    }

    #[test]
    fn h2o_keeps_dominant_key() {
        // every query attends fully to key 3 once it is visible
        let n = 10;
        let mut attn = Matrix::zeros(n, n);
        for i in 0..n {
            if i >= 3 {
                attn.set(i, 3, 1.0);
            } else {
                for j in 0..=i {
                    attn.set(i, j, 1.0 / (i + 1) as f32);
                }
            }
        }
        let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
        let cfg = PolicyConfig::new(PolicyKind::H2o).with_recent_window(2);
        assert!(score_h2o(&ctx, 3, &cfg).unwrap().retained().contains(&3));
    }

    #[test]
    fn snapkv_hand_pooling_example() {
        // n=6, window 2: rows 4 and 5 put 0.45 each on key 1
        let mut attn = causal_uniform(6);
        for i in 4..6 {
            let row = attn.row_mut(i);
            row.fill(0.0);
            row[1] = 0.45;
            row[i] = 0.55;
        }
        let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
        let cfg = PolicyConfig::new(PolicyKind::SnapKv)
            .with_recent_window(2)
            .with_pool_width(3);
        let pooled = observation_scores(&attn, 2, 4, 3);
        assert!((pooled[0] - 0.9).abs() < 1e-6);
        assert!((pooled[1] - 0.9).abs() < 1e-6);
        assert!((pooled[2] - 0.9).abs() < 1e-6);
        assert_eq!(pooled[3], 0.0);
        assert_eq!(score_snapkv(&ctx, 4, &cfg).unwrap().retained(), &[0, 1, 4, 5]);
    }

    #[test]
    fn snapkv_unit_pool_is_raw_scoring() {
        let n = 12;
        let logits: Vec<f32> = (0..n * n).map(|i| ((i * 7919) % 13) as f32 / 3.0).collect();
        let attn = causal_from_logits(&logits, n);
        let pooled = observation_scores(&attn, 3, n - 3, 1);
        let mut raw = vec![0.0f64; n - 3];
        for i in n - 3..n {
            for (j, r) in raw.iter_mut().enumerate() {
                *r += f64::from(attn.get(i, j));
            }
        }
        assert_eq!(pooled, raw);
    }

    #[test]
    fn snapkv_spike_survives_pooling() {
        let n = 40;
        let mut attn = causal_uniform(n);
        for i in n - 8..n {
            let row = attn.row_mut(i);
            row.fill(0.0);
            row[17] = 0.5;
            row[i] = 0.5;
        }
        let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
        for kind in [PolicyKind::SnapKv, PolicyKind::PyramidKv] {
            // pooling ties the spike with its 3 left neighbours, so 4 free slots reach it
            let cfg = PolicyConfig::new(kind).with_recent_window(8);
            let d = select(&ctx, 8 + 4, &cfg).unwrap();
            assert_eq!(&d.retained()[..4], &[14, 15, 16, 17]);
        }
    }

    #[test]
    fn context_rejects_non_causal() {
        let attn = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(ScoreContext::new(&attn, 0, 0).is_err());
        let attn = Matrix::new(2, 2, vec![1.0, 0.0, 0.4, 0.4]).unwrap();
        assert!(ScoreContext::new(&attn, 0, 0).is_err());
    }

    #[test]
    fn parse_policy_names() {
        for k in PolicyKind::ALL {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("lru".parse::<PolicyKind>().is_err());
    }

    fn context_strategy() -> impl Strategy<Value = Matrix> {
        (2usize..48).prop_flat_map(|n| {
            prop::collection::vec(0u8..4, n * n)
                .prop_map(move |l| causal_from_logits(&l.iter().map(|&x| f32::from(x)).collect::<Vec<_>>(), n))
        })
    }

    proptest! {
        #[test]
        fn decisions_are_sized_sorted_and_keep_window(
            attn in context_strategy(),
            kind in prop::sample::select(PolicyKind::ALL.to_vec()),
            window in 1usize..6,
            extra in 0usize..50,
        ) {
            let n = attn.rows();
            let cfg = PolicyConfig::new(kind).with_recent_window(window).with_pool_width(3);
            let budget = window + extra;
            let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
            let d = select(&ctx, budget, &cfg).unwrap();
            prop_assert_eq!(d.len(), budget.min(n));
            prop_assert!(d.retained().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.retained().iter().all(|&i| i < n));
            for j in n.saturating_sub(window)..n {
                prop_assert!(d.retained().contains(&j));
            }
        }

        #[test]
        fn selection_is_scale_invariant(
            scores in prop::collection::vec(0u16..50, 1..80),
            k_frac in 0.0f64..1.0,
            exp in -4i32..5,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|s| f64::from(s) / 7.0).collect();
            let k = (k_frac * scores.len() as f64) as usize;
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            prop_assert_eq!(top_k_indices(&scores, k).unwrap(), top_k_indices(&scaled, k).unwrap());
        }

        #[test]
        fn boosted_key_enters_retained_set(
            attn in context_strategy(),
            kind in prop::sample::select(vec![PolicyKind::H2o, PolicyKind::SnapKv]),
            pick in any::<prop::sample::Index>(),
        ) {
            let n = attn.rows();
            let window = 1;
            prop_assume!(n >= 4);
            let budget = window + 1;
            let cfg = PolicyConfig::new(kind).with_recent_window(window).with_pool_width(1);
            let ctx = ScoreContext::new(&attn, 0, 0).unwrap();
            let before = select(&ctx, budget, &cfg).unwrap();
            let candidates: Vec<usize> = (0..n - window).filter(|j| !before.retained().contains(j)).collect();
            let target = candidates[pick.index(candidates.len())];
            // move all of the last row's mass onto the target key
            let mut boosted = attn.clone();
            let row = boosted.row_mut(n - 1);
            row.fill(0.0);
            row[target] = 1.0;
            let ctx = ScoreContext::new(&boosted, 0, 0).unwrap();
            let scores = match kind {
                PolicyKind::H2o => cumulative_scores(&boosted),
                _ => observation_scores(&boosted, window, n - window, 1),
            };
            let best_other = (0..n - window).filter(|&j| j != target).map(|j| scores[j]).fold(f64::MIN, f64::max);
            prop_assume!(scores[target] > best_other);
            let after = select(&ctx, budget, &cfg).unwrap();
            prop_assert!(after.retained().contains(&target));
        }
    }
}

//! Grid expansion and per-point evaluation.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use kvqp::budget::{apply_overrides, BudgetPlan, LayerOverride, QuantScheme, FULL_PRECISION_BITS};
use kvqp::cache::{prefill_compress, CompressedKvCache};
use kvqp::model::recall::{build_recall_model, RecallSpec};
use kvqp::model::{argmax, max_abs_diff, Model, ModelConfig};
use kvqp::prune::{PolicyConfig, PolicyKind};
use kvqp::quant::FULL_PRECISION_BYTES;

use crate::config::{load_weights, override_id, ModelSource, SweepConfig, TaskKind};
use crate::error::{HarnessError, Result};
use crate::task::{gen_probe_task, gen_recall_task, ProbeTask, RecallTask, RecallVocab};

enum Task {
    Recall(RecallTask),
    Probe(ProbeTask),
}

/// One configuration of the grid, evaluated once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub seq_len: usize,
    pub policy: PolicyKind,
    pub bits: u8,
    pub token_multiplier: usize,
    pub group_size: usize,
    pub layout: QuantScheme,
    pub overrides: Vec<LayerOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean over decode steps of the largest absolute logit change against
    /// the uncompressed model.
    pub logit_perturb: f64,
    /// Cache bytes right after prefill compression.
    pub bytes: usize,
    /// Element payload bytes over the 16-bit full-cache bytes.
    pub budget_ratio_raw: f64,
    /// Payload plus quantization metadata over the 16-bit full-cache bytes.
    pub budget_ratio_meta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Measured(Metrics),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub tokens_per_layer: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub wall_time: Duration,
}

impl SweepRow {
    pub fn metrics(&self) -> Option<&Metrics> {
        match &self.outcome {
            Outcome::Measured(m) => Some(m),
            Outcome::Skipped(_) => None,
        }
    }

    pub fn layout_name(&self) -> String {
        self.point.layout.to_string()
    }

    pub fn override_id(&self) -> String {
        override_id(&self.point.overrides)
    }
}

/// Grid points in emission order: seq_len, policy, (bits, multiplier),
/// group size, layout, override set.
pub fn grid_points(cfg: &SweepConfig) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &seq_len in &cfg.seq_lens {
        for &policy in &cfg.policies {
            for (bits, token_multiplier) in cfg.precision_grid() {
                for &group_size in &cfg.group_sizes {
                    for layout in &cfg.layouts {
                        for overrides in &cfg.overrides {
                            out.push(GridPoint {
                                seq_len,
                                policy,
                                bits,
                                token_multiplier,
                                group_size,
                                layout: QuantScheme {
                                    group_size,
                                    ..*layout
                                },
                                overrides: overrides.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-layer token and precision plan of a grid point.
pub fn point_plan(cfg: &SweepConfig, point: &GridPoint, layers: usize) -> kvqp::Result<BudgetPlan> {
    let mut plan =
        BudgetPlan::uniform(layers, cfg.full_cache_tokens, point.token_multiplier, point.bits)?.with_scheme(point.layout);
    if point.policy == PolicyKind::PyramidKv {
        let window = PolicyConfig::new(PolicyKind::PyramidKv).recent_window;
        plan = plan.with_pyramid(cfg.pyramid_min_fraction, window)?;
    }
    apply_overrides(&plan, &point.overrides)
}

/// Evaluates every grid point for every seed. Points run in parallel on the
/// current rayon pool; rows come back in grid order, then seed order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let shared = match &cfg.model {
        ModelSource::File(path) => Some(load_weights(path)?),
        _ => None,
    };
    let jobs: Vec<(GridPoint, u64)> = grid_points(cfg)
        .into_iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    log::info!("running {} jobs ({} seeds)", jobs.len(), cfg.seeds.len());
    jobs.into_par_iter()
        .map(|(point, seed)| run_point(cfg, shared.as_ref(), point, seed))
        .collect()
}

fn build_model(cfg: &SweepConfig, shared: Option<&Model>, seed: u64) -> Result<Model> {
    Ok(match &cfg.model {
        ModelSource::Recall { keys, vocab } => {
            build_recall_model(RecallSpec {
                num_keys: *keys,
                vocab: *vocab,
                context_limit: cfg.context_limit,
                seed,
                ..RecallSpec::default()
            })?
            .model
        }
        ModelSource::Random {
            layers,
            heads,
            d_model,
            vocab,
        } => Model::random(ModelConfig {
            layers: *layers,
            heads: *heads,
            d_model: *d_model,
            vocab: *vocab,
            context_limit: cfg.context_limit,
            seed,
            positional: false,
        })?,
        ModelSource::File(_) => shared.expect("file model loaded up front").clone(),
    })
}

fn run_point(cfg: &SweepConfig, shared: Option<&Model>, point: GridPoint, seed: u64) -> Result<SweepRow> {
    let start = Instant::now();
    let model = build_model(cfg, shared, seed)?;
    let mc = *model.config();
    let tokens_per_layer = cfg.full_cache_tokens * point.token_multiplier;
    let skipped = |reason: String, point: GridPoint| {
        log::warn!("skipping {} {}x@{} seed {seed}: {reason}", point.policy, point.token_multiplier, point.bits);
        Ok(SweepRow {
            point,
            tokens_per_layer,
            seed,
            outcome: Outcome::Skipped(reason),
            wall_time: start.elapsed(),
        })
    };

    let plan = match point_plan(cfg, &point, mc.layers) {
        Ok(p) => p,
        Err(kvqp::Error::Contract(msg)) => return skipped(msg, point),
        Err(e) => return Err(e.into()),
    };
    let task = match cfg.task {
        TaskKind::Recall => {
            let vocab = match cfg.model {
                ModelSource::Recall { keys, vocab } => RecallVocab::from_vocab(keys, vocab),
                _ => return Err(HarnessError::Config("task = recall needs model = recall".into())),
            };
            Task::Recall(gen_recall_task(point.seq_len, vocab, &cfg.needle_depths, seed)?)
        }
        TaskKind::RandomProbe => Task::Probe(gen_probe_task(point.seq_len, cfg.probe_tokens, mc.vocab, seed)),
    };
    let prompt = match &task {
        Task::Recall(t) => &t.prompt,
        Task::Probe(t) => &t.prompt,
    };
    let prefill = model.prefill(prompt)?;
    let policy = PolicyConfig::new(point.policy);
    let cache = match prefill_compress(&prefill.states, &plan, &policy) {
        Ok(c) => c,
        Err(kvqp::Error::Contract(msg)) => return skipped(msg, point),
        Err(e) => return Err(e.into()),
    };
    let lossless_plan = BudgetPlan::uniform(mc.layers, point.seq_len, 1, FULL_PRECISION_BITS)?;
    let lossless = prefill_compress(&prefill.states, &lossless_plan, &policy)?;

    let (accuracy, logit_perturb) = match &task {
        Task::Recall(t) => score_recall(&model, &cache, &lossless, t)?,
        Task::Probe(t) => score_probe(&model, &cache, &lossless, &t.probes)?,
    };
    let bytes = cache.byte_breakdown();
    let reference = (2 * mc.layers * mc.heads * cfg.full_cache_tokens * mc.head_dim() * FULL_PRECISION_BYTES) as f64;
    log::debug!(
        "{} {}x@{} {} seed {seed}: accuracy {accuracy:.3}, bytes {}",
        point.policy,
        point.token_multiplier,
        point.bits,
        point.layout,
        bytes.total()
    );
    Ok(SweepRow {
        point,
        tokens_per_layer,
        seed,
        outcome: Outcome::Measured(Metrics {
            accuracy,
            logit_perturb,
            bytes: bytes.total(),
            budget_ratio_raw: bytes.payload as f64 / reference,
            budget_ratio_meta: bytes.total() as f64 / reference,
        }),
        wall_time: start.elapsed(),
    })
}

/// Queries every needle on its own copy of the cache.
fn score_recall(
    model: &Model,
    cache: &CompressedKvCache,
    lossless: &CompressedKvCache,
    task: &RecallTask,
) -> Result<(f64, f64)> {
    let (mut hits, mut drift) = (0usize, 0.0f64);
    for n in &task.needles {
        let got = model.decode_step(&mut cache.clone(), n.key)?;
        let want = model.decode_step(&mut lossless.clone(), n.key)?;
        hits += usize::from(argmax(&got) == n.value);
        drift += f64::from(max_abs_diff(&got, &want));
    }
    let k = task.needles.len() as f64;
    Ok((hits as f64 / k, drift / k))
}

/// Decodes the probe tokens through both caches in lockstep.
fn score_probe(
    model: &Model,
    cache: &CompressedKvCache,
    lossless: &CompressedKvCache,
    probes: &[usize],
) -> Result<(f64, f64)> {
    let (mut c, mut d) = (cache.clone(), lossless.clone());
    let (mut agree, mut drift) = (0usize, 0.0f64);
    for &t in probes {
        let got = model.decode_step(&mut c, t)?;
        let want = model.decode_step(&mut d, t)?;
        agree += usize::from(argmax(&got) == argmax(&want));
        drift += f64::from(max_abs_diff(&got, &want));
    }
    let k = probes.len() as f64;
    Ok((agree as f64 / k, drift / k))
}

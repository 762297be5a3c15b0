//! Sweep configuration: a flat `key = value` text file.
//!
//! Lines are `key = value`; `#` starts a comment; list values are
//! comma-separated. Every key is optional and falls back to
//! [`SweepConfig::default`]. Recognized keys:
//!
//! | key | value |
//! |-----|-------|
//! | `model` | `recall`, `random`, or `file:<path>` to a weights file |
//! | `recall_keys`, `recall_vocab` | recall model geometry |
//! | `layers`, `heads`, `d_model`, `vocab` | random model geometry |
//! | `context_limit` | longest sequence the model accepts |
//! | `task` | `recall` or `random-probe` |
//! | `needle_depths` | depth fractions in `[0, 1]` |
//! | `needles` | shorthand for `n` evenly spaced depths from 0 to 1 |
//! | `probe_tokens` | decode steps per random-probe run |
//! | `seq_len` | prompt lengths |
//! | `full_cache_tokens` | 16-bit tokens per layer the budget is measured against |
//! | `policies` | `streamingllm`, `h2o`, `snapkv`, `pyramidkv` |
//! | `bits`, `token_multipliers` | precision and token grid |
//! | `pairing` | `zip` (pair bits with multipliers) or `product` |
//! | `group_sizes` | quantization group sizes |
//! | `layouts` | `per-token`, `per-channel`, `kivi`, optionally `+outlier` |
//! | `overrides` | `|`-separated sets of `start..end:bits:mult` joined by `+`, or `none` |
//! | `seeds` | integers or `a..b` ranges |
//! | `pyramid_min_fraction` | bottom-layer share of the mean budget |
//! | `output` | CSV path |

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kvqp::budget::{LayerOverride, QuantScheme, DEFAULT_PYRAMID_MIN_FRACTION, PLAN_BITS};
use kvqp::model::Model;
use kvqp::prune::PolicyKind;

use crate::error::{HarnessError, Result};
use crate::task::needle_positions;

/// Name that `--config` resolves to the built-in demo sweep.
pub const DEMO_NAME: &str = "demo";

/// A small sweep over every policy and the memory-matched precision trades.
pub const DEMO_CONFIG: &str = "\
# associative recall on the hand-built model
model = recall
recall_keys = 8
recall_vocab = 24
context_limit = 512
task = recall
needles = 8
seq_len = 256
full_cache_tokens = 64
policies = streamingllm, h2o, snapkv, pyramidkv
bits = 16, 8, 4, 2
token_multipliers = 1, 2, 4, 8
pairing = zip
group_sizes = 64
layouts = per-token, kivi
overrides = none
seeds = 0..2
";

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Recall { keys: usize, vocab: usize },
    Random { layers: usize, heads: usize, d_model: usize, vocab: usize },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Recall,
    RandomProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    Zip,
    Product,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub model: ModelSource,
    pub context_limit: usize,
    pub task: TaskKind,
    pub needle_depths: Vec<f64>,
    pub probe_tokens: usize,
    pub seq_lens: Vec<usize>,
    pub full_cache_tokens: usize,
    pub policies: Vec<PolicyKind>,
    pub bits: Vec<u8>,
    pub token_multipliers: Vec<usize>,
    pub pairing: Pairing,
    pub group_sizes: Vec<usize>,
    /// Group size inside each scheme is replaced by the grid's group sizes.
    pub layouts: Vec<QuantScheme>,
    pub overrides: Vec<Vec<LayerOverride>>,
    pub seeds: Vec<u64>,
    pub pyramid_min_fraction: f64,
    pub output: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::Recall { keys: 16, vocab: 40 },
            context_limit: 1024,
            task: TaskKind::Recall,
            needle_depths: even_depths(16),
            probe_tokens: 8,
            seq_lens: vec![512],
            full_cache_tokens: 128,
            policies: vec![PolicyKind::SnapKv],
            bits: vec![16, 8, 4],
            token_multipliers: vec![1, 2, 4],
            pairing: Pairing::Zip,
            group_sizes: vec![64],
            layouts: vec![QuantScheme::default()],
            overrides: vec![vec![]],
            seeds: vec![0],
            pyramid_min_fraction: DEFAULT_PYRAMID_MIN_FRACTION,
            output: None,
        }
    }
}

/// `n` depths evenly spaced over `[0, 1]`.
pub fn even_depths(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_one(key, s))
        .collect()
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item.split_once("..") {
            Some((a, b)) => out.extend(parse_one::<u64>("seeds", a)?..parse_one::<u64>("seeds", b)?),
            None => out.push(parse_one("seeds", item)?),
        }
    }
    Ok(out)
}

fn parse_overrides(v: &str) -> Result<Vec<Vec<LayerOverride>>> {
    v.split('|')
        .map(str::trim)
        .map(|set| {
            if set.eq_ignore_ascii_case("none") || set.is_empty() {
                return Ok(vec![]);
            }
            set.split('+')
                .map(|o| o.trim().parse().map_err(|e: kvqp::Error| config_err(format!("overrides: {e}"))))
                .collect()
        })
        .collect()
}

/// Stable identifier of an override set: `none` or its ranges joined by `+`.
pub fn override_id(set: &[LayerOverride]) -> String {
    if set.is_empty() {
        "none".into()
    } else {
        set.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
    }
}

impl FromStr for SweepConfig {
    type Err = HarnessError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = SweepConfig::default();
        let (mut random, mut recall) = ((1, 1, 16, 32), (16, 40));
        let mut model_kind = String::from("recall");
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            match key {
                "model" => model_kind = v.to_string(),
                "recall_keys" => recall.0 = parse_one(key, v)?,
                "recall_vocab" => recall.1 = parse_one(key, v)?,
                "layers" => random.0 = parse_one(key, v)?,
                "heads" => random.1 = parse_one(key, v)?,
                "d_model" => random.2 = parse_one(key, v)?,
                "vocab" => random.3 = parse_one(key, v)?,
                "context_limit" => cfg.context_limit = parse_one(key, v)?,
                "task" => {
                    cfg.task = match v {
                        "recall" => TaskKind::Recall,
                        "random-probe" => TaskKind::RandomProbe,
                        _ => return Err(config_err(format!("task: unknown task '{v}'"))),
                    }
                }
                "needle_depths" => cfg.needle_depths = parse_list(key, v)?,
                "needles" => cfg.needle_depths = even_depths(parse_one(key, v)?),
                "probe_tokens" => cfg.probe_tokens = parse_one(key, v)?,
                "seq_len" => cfg.seq_lens = parse_list(key, v)?,
                "full_cache_tokens" => cfg.full_cache_tokens = parse_one(key, v)?,
                "policies" => cfg.policies = parse_list(key, v)?,
                "bits" => cfg.bits = parse_list(key, v)?,
                "token_multipliers" => cfg.token_multipliers = parse_list(key, v)?,
                "pairing" => {
                    cfg.pairing = match v {
                        "zip" => Pairing::Zip,
                        "product" => Pairing::Product,
                        _ => return Err(config_err(format!("pairing: expected zip or product, got '{v}'"))),
                    }
                }
                "group_sizes" => cfg.group_sizes = parse_list(key, v)?,
                "layouts" => cfg.layouts = parse_list(key, v)?,
                "overrides" => cfg.overrides = parse_overrides(v)?,
                "seeds" => cfg.seeds = parse_seeds(v)?,
                "pyramid_min_fraction" => cfg.pyramid_min_fraction = parse_one(key, v)?,
                "output" => cfg.output = Some(PathBuf::from(v)),
                _ => return Err(config_err(format!("line {}: unknown key '{key}'", lineno + 1))),
            }
        }
        cfg.model = match model_kind.as_str() {
            "recall" => ModelSource::Recall {
                keys: recall.0,
                vocab: recall.1,
            },
            "random" => ModelSource::Random {
                layers: random.0,
                heads: random.1,
                d_model: random.2,
                vocab: random.3,
            },
            other => match other.strip_prefix("file:") {
                Some(path) => ModelSource::File(PathBuf::from(path.trim())),
                None => return Err(config_err(format!("model: unknown model '{other}'"))),
            },
        };
        Ok(cfg)
    }
}

impl SweepConfig {
    /// Reads a config file, or the built-in demo for [`DEMO_NAME`].
    pub fn load(path: &Path) -> Result<Self> {
        if path == Path::new(DEMO_NAME) {
            return DEMO_CONFIG.parse();
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn demo() -> Self {
        DEMO_CONFIG.parse().expect("demo config parses")
    }

    /// Decode steps every run appends after prefill.
    pub fn decode_tokens(&self) -> usize {
        match self.task {
            TaskKind::Recall => 1,
            TaskKind::RandomProbe => self.probe_tokens,
        }
    }

    /// Number of model layers, loading the weights header for file models.
    pub fn model_layers(&self) -> Result<usize> {
        Ok(match &self.model {
            ModelSource::Recall { .. } => 1,
            ModelSource::Random { layers, .. } => *layers,
            ModelSource::File(path) => load_weights(path)?.config().layers,
        })
    }

    /// (bits, token multiplier) pairs in grid order.
    pub fn precision_grid(&self) -> Vec<(u8, usize)> {
        match self.pairing {
            Pairing::Zip => self.bits.iter().copied().zip(self.token_multipliers.iter().copied()).collect(),
            Pairing::Product => self
                .bits
                .iter()
                .flat_map(|&b| self.token_multipliers.iter().map(move |&m| (b, m)))
                .collect(),
        }
    }

    /// Schema and consistency checks; every failure is a config error.
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("seq_len", self.seq_lens.is_empty()),
            ("policies", self.policies.is_empty()),
            ("bits", self.bits.is_empty()),
            ("token_multipliers", self.token_multipliers.is_empty()),
            ("group_sizes", self.group_sizes.is_empty()),
            ("layouts", self.layouts.is_empty()),
            ("overrides", self.overrides.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, empty)| *empty) {
            return Err(config_err(format!("{name}: grid list is empty")));
        }
        if self.pairing == Pairing::Zip && self.bits.len() != self.token_multipliers.len() {
            return Err(config_err(format!(
                "pairing = zip needs as many bits ({}) as token_multipliers ({})",
                self.bits.len(),
                self.token_multipliers.len()
            )));
        }
        if let Some(b) = self.bits.iter().find(|b| !PLAN_BITS.contains(b)) {
            return Err(config_err(format!("bits: {b} is not one of {PLAN_BITS:?}")));
        }
        if self.token_multipliers.contains(&0) || self.group_sizes.contains(&0) || self.full_cache_tokens == 0 {
            return Err(config_err("token multipliers, group sizes and full_cache_tokens must be at least 1"));
        }
        if !(self.pyramid_min_fraction > 0.0 && self.pyramid_min_fraction <= 1.0) {
            return Err(config_err("pyramid_min_fraction must lie in (0, 1]"));
        }
        match &self.model {
            ModelSource::Recall { keys, vocab } => {
                if *keys == 0 || *vocab < 2 * keys + 1 {
                    return Err(config_err(format!(
                        "recall_vocab {vocab} cannot hold {keys} keys, {keys} values and a filler"
                    )));
                }
            }
            ModelSource::Random {
                layers,
                heads,
                d_model,
                vocab,
            } => {
                if [*layers, *heads, *d_model, *vocab].contains(&0) || d_model % heads != 0 {
                    return Err(config_err("random model needs nonzero counts and heads dividing d_model"));
                }
            }
            ModelSource::File(path) => {
                load_weights(path)?;
            }
        }
        let decode = self.decode_tokens();
        for &n in &self.seq_lens {
            if n == 0 || n + decode > self.context_limit {
                return Err(config_err(format!(
                    "seq_len {n} plus {decode} decode tokens must fit context_limit {}",
                    self.context_limit
                )));
            }
        }
        if self.task == TaskKind::Recall {
            let keys = match self.model {
                ModelSource::Recall { keys, .. } => keys,
                _ => return Err(config_err("task = recall needs model = recall")),
            };
            if self.needle_depths.is_empty() || self.needle_depths.len() > keys {
                return Err(config_err(format!(
                    "needle count {} must be between 1 and recall_keys {keys}",
                    self.needle_depths.len()
                )));
            }
            for &n in &self.seq_lens {
                needle_positions(n, &self.needle_depths).map_err(|e| config_err(e.to_string()))?;
            }
        } else if self.probe_tokens == 0 {
            return Err(config_err("probe_tokens must be at least 1"));
        }
        let layers = self.model_layers()?;
        for set in &self.overrides {
            let plan = kvqp::budget::BudgetPlan::uniform(layers, 1, 1, 16).map_err(|e| config_err(e.to_string()))?;
            kvqp::budget::apply_overrides(&plan, set)
                .map_err(|e| config_err(format!("overrides {}: {e}", override_id(set))))?;
        }
        Ok(())
    }
}

pub(crate) fn load_weights(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(format!("opening {}", path.display()), e))?;
    Ok(Model::read_weights(std::io::BufReader::new(file))?)
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Recall => "recall",
            TaskKind::RandomProbe => "random-probe",
        })
    }
}

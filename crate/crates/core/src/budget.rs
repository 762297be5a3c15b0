//! Per-layer (token count, bit width) plans and their exact byte accounting.
//!
//! A plan trades precision for tokens at a fixed budget: the 16-bit
//! reference keeps `base_tokens` per layer, an 8-bit plan keeps twice as
//! many and a 4-bit plan four times as many. Full-precision elements are
//! charged 2 bytes. Quantized tensors are charged their packed codes plus
//! 4 bytes of scale/zero metadata per group, so quantized plans sit slightly
//! above the reference; [`plan_bytes`] reports that overhead rather than
//! hiding it.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::quant::{
    predicted_bytes, Layout, QuantConfig, DEFAULT_GROUP_SIZE, DEFAULT_OUTLIER_THRESHOLD,
    FULL_PRECISION_BYTES, SUPPORTED_BITS,
};

/// Bit widths a plan may assign; 16 means stored unquantized.
pub const PLAN_BITS: [u8; 4] = [2, 4, 8, 16];
pub const FULL_PRECISION_BITS: u8 = 16;
pub const DEFAULT_PYRAMID_MIN_FRACTION: f64 = 0.2;

/// Grouping layouts for keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KvLayout {
    pub key: Layout,
    pub value: Layout,
}

impl KvLayout {
    /// Both keys and values grouped along channels within a token (FlexGen).
    pub const PER_TOKEN: KvLayout = KvLayout {
        key: Layout::PerToken,
        value: Layout::PerToken,
    };
    pub const PER_CHANNEL: KvLayout = KvLayout {
        key: Layout::PerChannel,
        value: Layout::PerChannel,
    };
    /// Keys per channel, values per token (KIVI).
    pub const KIVI: KvLayout = KvLayout {
        key: Layout::PerChannel,
        value: Layout::PerToken,
    };
}

/// Grouping, layout and outlier handling shared by every quantized layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    pub group_size: usize,
    pub layout: KvLayout,
    pub outlier_threshold: Option<f32>,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            layout: KvLayout::PER_TOKEN,
            outlier_threshold: None,
        }
    }
}

impl QuantScheme {
    /// Key and value configs at `bits`, or `None` for full precision.
    pub fn configs(&self, bits: u8) -> Result<Option<(QuantConfig, QuantConfig)>> {
        if bits == FULL_PRECISION_BITS {
            return Ok(None);
        }
        let make = |layout| -> Result<QuantConfig> {
            let mut cfg = QuantConfig::new(bits, self.group_size, layout)?;
            if let Some(t) = self.outlier_threshold {
                cfg = cfg.with_outlier_threshold(t)?;
            }
            Ok(cfg)
        };
        Ok(Some((make(self.layout.key)?, make(self.layout.value)?)))
    }
}

/// Names: `per-token`, `per-channel`, `kivi`, each optionally suffixed with
/// `+outlier` to enable the default outlier threshold.
impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.layout {
            KvLayout::PER_TOKEN => "per-token",
            KvLayout::PER_CHANNEL => "per-channel",
            KvLayout::KIVI => "kivi",
            _ => "value-per-channel",
        };
        f.write_str(base)?;
        if self.outlier_threshold.is_some() {
            f.write_str("+outlier")?;
        }
        Ok(())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, outlier) = match s.strip_suffix("+outlier") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let layout = match base {
            "per-token" | "flexgen" => KvLayout::PER_TOKEN,
            "per-channel" => KvLayout::PER_CHANNEL,
            "kivi" => KvLayout::KIVI,
            _ => return Err(Error::Contract(format!("unknown layout '{s}'"))),
        };
        Ok(Self {
            layout,
            outlier_threshold: outlier.then_some(DEFAULT_OUTLIER_THRESHOLD),
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub tokens: usize,
    pub bits: u8,
    /// Tokens the 16-bit reference keeps in this layer.
    pub base_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub layers: Vec<LayerPlan>,
    pub scheme: QuantScheme,
}

fn check_plan_bits(bits: u8) -> Result<()> {
    if !PLAN_BITS.contains(&bits) {
        contract!("unsupported plan bit width {bits}");
    }
    Ok(())
}

/// Every layer keeps `base_tokens * 16 / bits` tokens at `bits`.
pub fn uniform_plan(layers: usize, base_tokens: usize, bits: u8) -> Result<BudgetPlan> {
    check_plan_bits(bits)?;
    let multiplier = usize::from(FULL_PRECISION_BITS / bits);
    BudgetPlan::uniform(layers, base_tokens, multiplier, bits)
}

impl BudgetPlan {
    /// Every layer keeps `base_tokens * multiplier` tokens at `bits`; the
    /// multiplier need not match the precision trade.
    pub fn uniform(layers: usize, base_tokens: usize, multiplier: usize, bits: u8) -> Result<Self> {
        check_plan_bits(bits)?;
        if base_tokens == 0 || multiplier == 0 {
            contract!("base tokens and multiplier must be at least 1");
        }
        Ok(Self {
            layers: vec![
                LayerPlan {
                    tokens: base_tokens * multiplier,
                    bits,
                    base_tokens,
                };
                layers
            ],
            scheme: QuantScheme::default(),
        })
    }

    pub fn with_scheme(mut self, scheme: QuantScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Redistributes both token totals as a pyramid over the layers.
    pub fn with_pyramid(mut self, min_fraction: f64, min_tokens: usize) -> Result<Self> {
        let total: usize = self.layers.iter().map(|l| l.tokens).sum();
        let base_total: usize = self.layers.iter().map(|l| l.base_tokens).sum();
        let tokens = pyramid_allocation(self.layers.len(), total, min_fraction, min_tokens)?;
        let base = pyramid_allocation(self.layers.len(), base_total, min_fraction, 1)?;
        for ((l, t), b) in self.layers.iter_mut().zip(tokens).zip(base) {
            l.tokens = t;
            l.base_tokens = b;
        }
        Ok(self)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.tokens).sum()
    }

    pub fn min_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.tokens).min().unwrap_or(0)
    }

    /// Bytes the 16-bit reference (base tokens per layer) would occupy: the
    /// budget this plan is measured against.
    pub fn reference_bytes(&self, heads: usize, head_dim: usize) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * heads * l.base_tokens * head_dim * FULL_PRECISION_BYTES)
            .sum()
    }

    pub fn layer_bytes(&self, layer: usize, heads: usize, head_dim: usize) -> usize {
        let l = &self.layers[layer];
        tensor_pair_bytes(l.tokens, l.bits, &self.scheme, head_dim) * heads
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            check_plan_bits(l.bits)?;
            if l.tokens == 0 {
                contract!("layer {i} has a zero token budget");
            }
        }
        if self.scheme.group_size == 0 {
            contract!("group size must be at least 1");
        }
        Ok(())
    }
}

/// Accounted bytes of one head's K and V at `tokens x head_dim`.
pub fn tensor_pair_bytes(tokens: usize, bits: u8, scheme: &QuantScheme, head_dim: usize) -> usize {
    if bits == FULL_PRECISION_BITS {
        return 2 * tokens * head_dim * FULL_PRECISION_BYTES;
    }
    debug_assert!(SUPPORTED_BITS.contains(&bits));
    predicted_bytes(tokens, head_dim, bits, scheme.layout.key, scheme.group_size)
        + predicted_bytes(tokens, head_dim, bits, scheme.layout.value, scheme.group_size)
}

/// Sum over layers of K and V bytes for every head, as if every planned
/// token were stored and no element were an outlier.
pub fn plan_bytes(plan: &BudgetPlan, heads: usize, head_dim: usize) -> usize {
    (0..plan.num_layers())
        .map(|l| plan.layer_bytes(l, heads, head_dim))
        .sum()
}

/// Token counts decreasing linearly with depth. The last layer gets
/// `min_fraction * avg`, the first `2 * avg - last`; rounding uses largest
/// remainders, ties going to earlier layers, so the counts sum exactly to
/// `total_tokens` and stay non-increasing.
pub fn pyramid_allocation(
    layers: usize,
    total_tokens: usize,
    min_fraction: f64,
    min_tokens: usize,
) -> Result<Vec<usize>> {
    if layers == 0 {
        contract!("pyramid allocation needs at least one layer");
    }
    if !(min_fraction > 0.0 && min_fraction <= 1.0) {
        contract!("min_fraction must lie in (0, 1], got {min_fraction}");
    }
    let avg = total_tokens as f64 / layers as f64;
    let bottom = min_fraction * avg;
    let top = 2.0 * avg - bottom;
    let ideal: Vec<f64> = (0..layers)
        .map(|l| {
            if layers == 1 {
                avg
            } else {
                top - (top - bottom) * l as f64 / (layers - 1) as f64
            }
        })
        .collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut residue = total_tokens.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &l in order.iter().cycle() {
        if residue == 0 {
            break;
        }
        counts[l] += 1;
        residue -= 1;
    }
    if let Some((l, &c)) = counts.iter().enumerate().find(|&(_, &c)| c < min_tokens) {
        contract!("pyramid gives layer {l} only {c} tokens, below the minimum {min_tokens}");
    }
    Ok(counts)
}

/// Replaces `[start, end)` with `base_tokens * tokens_multiplier` tokens at
/// `bits`. Only precision-for-tokens trades are allowed
/// (`tokens_multiplier * bits == 16`), which keeps code payload bytes equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOverride {
    pub start: usize,
    pub end: usize,
    pub tokens_multiplier: usize,
    pub bits: u8,
}

impl LayerOverride {
    pub fn new(start: usize, end: usize, tokens_multiplier: usize, bits: u8) -> Result<Self> {
        let o = Self {
            start,
            end,
            tokens_multiplier,
            bits,
        };
        o.validate()?;
        Ok(o)
    }

    fn validate(&self) -> Result<()> {
        if self.start >= self.end {
            contract!("empty override range [{}, {})", self.start, self.end);
        }
        if ![1, 2, 4].contains(&self.tokens_multiplier) || ![4, 8, 16].contains(&self.bits) {
            contract!(
                "override {}x@{}-bit is not one of 1x@16, 2x@8, 4x@4",
                self.tokens_multiplier,
                self.bits
            );
        }
        if self.tokens_multiplier * usize::from(self.bits) != usize::from(FULL_PRECISION_BITS) {
            contract!(
                "override {}x@{}-bit does not trade precision for tokens at equal bytes",
                self.tokens_multiplier,
                self.bits
            );
        }
        Ok(())
    }
}

/// `start..end:bits:multiplier`, e.g. `0..4:16:1`.
impl fmt::Display for LayerOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}:{}:{}", self.start, self.end, self.bits, self.tokens_multiplier)
    }
}

impl FromStr for LayerOverride {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("malformed override '{s}', expected start..end:bits:multiplier"));
        let (range, rest) = s.split_once(':').ok_or_else(bad)?;
        let (bits, mult) = rest.split_once(':').ok_or_else(bad)?;
        let (start, end) = range.split_once("..").ok_or_else(bad)?;
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let bits = u8::try_from(num(bits)?).map_err(|_| bad())?;
        LayerOverride::new(num(start)?, num(end)?, num(mult)?, bits)
    }
}

pub fn apply_overrides(plan: &BudgetPlan, overrides: &[LayerOverride]) -> Result<BudgetPlan> {
    let mut sorted: Vec<&LayerOverride> = overrides.iter().collect();
    sorted.sort_by_key(|o| o.start);
    for o in &sorted {
        o.validate()?;
        if o.end > plan.num_layers() {
            contract!(
                "override range [{}, {}) exceeds {} layers",
                o.start,
                o.end,
                plan.num_layers()
            );
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[0].end > w[1].start) {
        contract!("overlapping overrides {} and {}", w[0], w[1]);
    }
    let mut out = plan.clone();
    for o in sorted {
        for l in &mut out.layers[o.start..o.end] {
            l.tokens = l.base_tokens * o.tokens_multiplier;
            l.bits = o.bits;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_plan_examples() {
        for (bits, tokens) in [(16, 512), (8, 1024), (4, 2048)] {
            let p = uniform_plan(32, 512, bits).unwrap();
            assert!(p.layers.iter().all(|l| l.tokens == tokens && l.bits == bits));
        }
        assert_eq!(uniform_plan(1, 128, 4).unwrap().layers[0].tokens, 512);
        let p = uniform_plan(3, 100, 16).unwrap();
        assert!(p.layers.iter().all(|l| l.tokens == 100 && l.base_tokens == 100));
        assert!(uniform_plan(1, 128, 3).is_err());
        assert!(uniform_plan(1, 0, 4).is_err());
    }

    #[test]
    fn pyramid_examples() {
        assert_eq!(pyramid_allocation(1, 77, 0.2, 1).unwrap(), vec![77]);
        assert_eq!(pyramid_allocation(4, 400, 1.0, 1).unwrap(), vec![100; 4]);
        assert_eq!(pyramid_allocation(4, 400, 0.5, 1).unwrap(), vec![150, 117, 83, 50]);
        assert_eq!(pyramid_allocation(3, 10, 1.0, 1).unwrap(), vec![4, 3, 3]);
        assert!(pyramid_allocation(4, 400, 0.5, 60).is_err());
        assert!(pyramid_allocation(0, 400, 0.5, 1).is_err());
        assert!(pyramid_allocation(4, 400, 0.0, 1).is_err());
    }

    #[test]
    fn plan_bytes_examples() {
        let p = BudgetPlan::uniform(1, 64, 1, 16).unwrap();
        assert_eq!(plan_bytes(&p, 1, 64), 16384);
        let p = BudgetPlan::uniform(1, 64, 1, 4).unwrap();
        assert_eq!(plan_bytes(&p, 1, 64), 4608);
        let p = BudgetPlan::uniform(0, 64, 1, 4).unwrap();
        assert_eq!(plan_bytes(&p, 4, 64), 0);
    }

    #[test]
    fn parity_overhead_is_exactly_group_metadata() {
        // 4 metadata bytes per 64-element group against 2 bytes per reference element
        let reference = plan_bytes(&uniform_plan(2, 128, 16).unwrap(), 4, 64) as f64;
        let q8 = plan_bytes(&uniform_plan(2, 128, 8).unwrap(), 4, 64) as f64;
        let q4 = plan_bytes(&uniform_plan(2, 128, 4).unwrap(), 4, 64) as f64;
        assert_eq!(q8 / reference, 1.0 + 2.0 * 4.0 / 64.0 / 2.0);
        assert_eq!(q4 / reference, 1.0 + 4.0 * 4.0 / 64.0 / 2.0);
    }

    #[test]
    fn override_examples() {
        let base = uniform_plan(32, 128, 4).unwrap();
        assert_eq!(apply_overrides(&base, &[]).unwrap(), base);

        let o = LayerOverride::new(0, 4, 1, 16).unwrap();
        let p = apply_overrides(&base, &[o]).unwrap();
        for l in 0..4 {
            assert_eq!(p.layers[l].tokens * 4, base.layers[l].tokens);
            assert_eq!(p.layers[l].bits, 16);
        }
        assert_eq!(p.layers[4..], base.layers[4..]);

        let o = LayerOverride::new(8, 16, 2, 8).unwrap();
        let p = apply_overrides(&base, &[o]).unwrap();
        for l in 8..16 {
            assert_eq!(p.layers[l].tokens * 2, base.layers[l].tokens);
        }
    }

    #[test]
    fn override_errors() {
        let base = uniform_plan(8, 128, 4).unwrap();
        let a = LayerOverride::new(0, 4, 1, 16).unwrap();
        let b = LayerOverride::new(3, 6, 2, 8).unwrap();
        assert!(apply_overrides(&base, &[a, b]).is_err());
        let c = LayerOverride::new(6, 9, 2, 8).unwrap();
        assert!(apply_overrides(&base, &[c]).is_err());
        assert!(LayerOverride::new(0, 4, 2, 16).is_err());
        assert!(LayerOverride::new(4, 4, 1, 16).is_err());
    }

    #[test]
    fn parse_override_and_scheme() {
        let o: LayerOverride = "0..4:16:1".parse().unwrap();
        assert_eq!(o, LayerOverride::new(0, 4, 1, 16).unwrap());
        assert_eq!(o.to_string().parse::<LayerOverride>().unwrap(), o);
        assert!("0-4:16:1".parse::<LayerOverride>().is_err());
        for name in ["per-token", "per-channel", "kivi", "kivi+outlier", "per-token+outlier"] {
            assert_eq!(name.parse::<QuantScheme>().unwrap().to_string(), name);
        }
        let s: QuantScheme = "kivi+outlier".parse().unwrap();
        assert_eq!(s.layout, KvLayout::KIVI);
        assert_eq!(s.outlier_threshold, Some(6.0));
    }

    proptest! {
        #[test]
        fn pyramid_sums_and_decreases(
            layers in 1usize..40,
            total in 0usize..20_000,
            min_fraction in 0.01f64..=1.0,
        ) {
            let counts = pyramid_allocation(layers, total, min_fraction, 0).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn overrides_only_touch_their_range(
            layers in 4usize..32,
            base in 8usize..256,
            start_frac in 0.0f64..1.0,
            len in 1usize..8,
            choice in 0usize..3,
        ) {
            let plan = uniform_plan(layers, base, 4).unwrap();
            let start = (start_frac * layers as f64) as usize;
            let end = (start + len).min(layers);
            let (mult, bits) = [(1, 16), (2, 8), (4, 4)][choice];
            let o = LayerOverride::new(start, end, mult, bits).unwrap();
            let out = apply_overrides(&plan, &[o]).unwrap();
            for l in 0..layers {
                if l < start || l >= end {
                    prop_assert_eq!(out.layers[l], plan.layers[l]);
                }
            }
        }
    }
}

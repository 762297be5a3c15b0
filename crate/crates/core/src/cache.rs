//! The compressed KV cache.
//!
//! At prefill every (layer, head) is pruned to its planned token budget, the
//! survivors are gathered in their original order, and the gathered K/V are
//! quantized under the layer's bit width. 16-bit layers skip quantization.
//!
//! Decoded tokens are never evicted. They land in a full-precision residual
//! buffer that is quantized as one block once it holds `group_size` rows, so
//! the residual always stays shorter than a group.
//!
//! # Snapshot format
//!
//! All integers are little-endian `u32` unless noted, floats are `f32`.
//!
//! ```text
//! "KVQC" version:u32=1 layers heads head_dim
//! policy:   kind:u8 recent_window pool_width
//! scheme:   group_size key_layout:u8 value_layout:u8 has_threshold:u8 threshold:f32
//! plan:     per layer { tokens bits:u8 base_tokens }
//! per layer, per head:
//!   next_position:u64
//!   budget retained_count retained[..]
//!   position_count positions[..]
//!   store_tag:u8
//!     0 (full):      rows K[rows*head_dim] V[rows*head_dim]
//!     1 (quantized): block_count { tensor(K) tensor(V) }[..]
//!   residual_rows K[rows*head_dim] V[rows*head_dim]
//!
//! tensor: rows cols bits:u8 layout:u8 group_size group_count
//!         { len scale zero_point }[..] packed_len packed:u8[..]
//!         outlier_count { row col value }[..]
//! ```

use std::io::{Read, Write};

use crate::budget::{BudgetPlan, KvLayout, LayerPlan, QuantScheme};
use crate::codec::{Decoder, Encoder};
use crate::error::{contract, Error, Result};
use crate::prune::{self, PolicyConfig, PolicyKind, PruneDecision, ScoreContext};
use crate::quant::{
    dequantize_matrix, quantize_matrix, quantized_bytes, GroupParams, Layout, Outlier, QuantConfig,
    QuantizedTensor, FULL_PRECISION_BYTES,
};
use crate::tensor::Matrix;

const SNAPSHOT_MAGIC: &[u8; 4] = b"KVQC";
const SNAPSHOT_VERSION: usize = 1;

/// Full-precision prefill states, indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvStates {
    pub keys: Vec<Vec<Matrix>>,
    pub values: Vec<Vec<Matrix>>,
    /// Causal attention probabilities used for scoring.
    pub attn: Vec<Vec<Matrix>>,
}

impl KvStates {
    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn num_heads(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn seq_len(&self) -> usize {
        self.keys
            .first()
            .and_then(|l| l.first())
            .map_or(0, Matrix::rows)
    }

    pub fn head_dim(&self) -> usize {
        self.keys
            .first()
            .and_then(|l| l.first())
            .map_or(0, Matrix::cols)
    }
}

/// One quantized chunk of consecutive stored rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub keys: QuantizedTensor,
    pub values: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq)]
enum Store {
    Full { keys: Matrix, values: Matrix },
    Quantized { blocks: Vec<QuantBlock> },
}

/// Compressed K/V of one layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHeadCache {
    head_dim: usize,
    configs: Option<(QuantConfig, QuantConfig)>,
    store: Store,
    residual_k: Matrix,
    residual_v: Matrix,
    retained: PruneDecision,
    positions: Vec<usize>,
    next_position: usize,
}

impl LayerHeadCache {
    fn new(
        keys: &Matrix,
        values: &Matrix,
        retained: PruneDecision,
        configs: Option<(QuantConfig, QuantConfig)>,
    ) -> Result<Self> {
        let head_dim = keys.cols();
        let gathered_k = keys.gather_rows(retained.retained())?;
        let gathered_v = values.gather_rows(retained.retained())?;
        let store = match &configs {
            None => Store::Full {
                keys: gathered_k,
                values: gathered_v,
            },
            Some((kc, vc)) => {
                let mut blocks = Vec::new();
                if gathered_k.rows() > 0 {
                    blocks.push(QuantBlock {
                        keys: quantize_matrix(&gathered_k, kc)?,
                        values: quantize_matrix(&gathered_v, vc)?,
                    });
                }
                Store::Quantized { blocks }
            }
        };
        Ok(Self {
            head_dim,
            configs,
            store,
            residual_k: Matrix::empty(head_dim),
            residual_v: Matrix::empty(head_dim),
            positions: retained.retained().to_vec(),
            retained,
            next_position: keys.rows(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Original token positions of every stored row, in storage order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn retained(&self) -> &PruneDecision {
        &self.retained
    }

    pub fn is_quantized(&self) -> bool {
        self.configs.is_some()
    }

    pub fn token_count(&self) -> usize {
        self.stored_rows() + self.residual_k.rows()
    }

    /// Rows in the quantized section (or the full-precision store).
    pub fn stored_rows(&self) -> usize {
        match &self.store {
            Store::Full { keys, .. } => keys.rows(),
            Store::Quantized { blocks } => blocks.iter().map(|b| b.keys.rows()).sum(),
        }
    }

    pub fn residual_rows(&self) -> usize {
        self.residual_k.rows()
    }

    pub fn blocks(&self) -> &[QuantBlock] {
        match &self.store {
            Store::Quantized { blocks } => blocks,
            Store::Full { .. } => &[],
        }
    }

    fn append(&mut self, h_k: &[f32], h_v: &[f32]) -> Result<()> {
        if h_k.len() != self.head_dim || h_v.len() != self.head_dim {
            contract!(
                "decode rows of width {}/{} do not match head_dim {}",
                h_k.len(),
                h_v.len(),
                self.head_dim
            );
        }
        if h_k.iter().chain(h_v).any(|x| !x.is_finite()) {
            contract!("non-finite decode state");
        }
        match (&mut self.store, &self.configs) {
            (Store::Full { keys, values }, _) => {
                keys.push_row(h_k)?;
                values.push_row(h_v)?;
            }
            (Store::Quantized { blocks }, Some((kc, vc))) => {
                self.residual_k.push_row(h_k)?;
                self.residual_v.push_row(h_v)?;
                if self.residual_k.rows() >= kc.group_size {
                    blocks.push(QuantBlock {
                        keys: quantize_matrix(&self.residual_k, kc)?,
                        values: quantize_matrix(&self.residual_v, vc)?,
                    });
                    self.residual_k = Matrix::empty(self.head_dim);
                    self.residual_v = Matrix::empty(self.head_dim);
                }
            }
            (Store::Quantized { .. }, None) => unreachable!("quantized store without configs"),
        }
        self.positions.push(self.next_position);
        self.next_position += 1;
        Ok(())
    }

    fn materialize(&self) -> Result<(Matrix, Matrix)> {
        match &self.store {
            Store::Full { keys, values } => Ok((keys.clone(), values.clone())),
            Store::Quantized { blocks } => {
                let mut k = Matrix::empty(self.head_dim);
                let mut v = Matrix::empty(self.head_dim);
                for b in blocks {
                    k = k.concat_rows(&dequantize_matrix(&b.keys)?)?;
                    v = v.concat_rows(&dequantize_matrix(&b.values)?)?;
                }
                Ok((k.concat_rows(&self.residual_k)?, v.concat_rows(&self.residual_v)?))
            }
        }
    }

    fn bytes(&self) -> CacheBytes {
        let full = |rows: usize| 2 * rows * self.head_dim * FULL_PRECISION_BYTES;
        let mut out = CacheBytes {
            payload: full(self.residual_k.rows()),
            metadata: 0,
        };
        match &self.store {
            Store::Full { keys, .. } => out.payload += full(keys.rows()),
            Store::Quantized { blocks } => {
                for t in blocks.iter().flat_map(|b| [&b.keys, &b.values]) {
                    let bd = t.byte_breakdown();
                    out.payload += bd.codes;
                    out.metadata += bd.metadata + bd.outliers;
                    debug_assert_eq!(bd.total(), quantized_bytes(t));
                }
            }
        }
        out
    }
}

/// Stored bytes split into element payload and quantization metadata
/// (group scale/zero plus outlier sidecar).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheBytes {
    pub payload: usize,
    pub metadata: usize,
}

impl CacheBytes {
    pub fn total(&self) -> usize {
        self.payload + self.metadata
    }
}

impl std::ops::Add for CacheBytes {
    type Output = CacheBytes;

    fn add(self, rhs: CacheBytes) -> CacheBytes {
        CacheBytes {
            payload: self.payload + rhs.payload,
            metadata: self.metadata + rhs.metadata,
        }
    }
}

/// Per-layer, per-head compressed cache for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKvCache {
    layers: Vec<Vec<LayerHeadCache>>,
    plan: BudgetPlan,
    policy: PolicyConfig,
    head_dim: usize,
}

/// Prunes then quantizes the prefill states of every layer and head.
pub fn prefill_compress(
    states: &KvStates,
    plan: &BudgetPlan,
    policy: &PolicyConfig,
) -> Result<CompressedKvCache> {
    plan.validate()?;
    policy.validate()?;
    if states.num_layers() != plan.num_layers() {
        contract!(
            "plan has {} layers but the states have {}",
            plan.num_layers(),
            states.num_layers()
        );
    }
    let n = states.seq_len();
    let head_dim = states.head_dim();
    let heads = states.num_heads();
    let mut layers = Vec::with_capacity(plan.num_layers());
    for (l, layer_plan) in plan.layers.iter().enumerate() {
        if states.keys[l].len() != heads || states.values[l].len() != heads || states.attn[l].len() != heads {
            contract!("layer {l} does not have {heads} heads in every state");
        }
        let configs = plan.scheme.configs(layer_plan.bits)?;
        let mut layer = Vec::with_capacity(heads);
        for h in 0..heads {
            let (k, v, a) = (&states.keys[l][h], &states.values[l][h], &states.attn[l][h]);
            if k.shape() != (n, head_dim) || v.shape() != (n, head_dim) || a.shape() != (n, n) {
                contract!("inconsistent state shapes at layer {l} head {h}");
            }
            let ctx = ScoreContext {
                attn_probs: a,
                layer_index: l,
                head_index: h,
            };
            let decision = prune::select(&ctx, layer_plan.tokens, policy)?;
            layer.push(LayerHeadCache::new(k, v, decision, configs)?);
        }
        layers.push(layer);
    }
    Ok(CompressedKvCache {
        layers,
        plan: plan.clone(),
        policy: *policy,
        head_dim,
    })
}

impl CompressedKvCache {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.plan
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn layer_head(&self, layer: usize, head: usize) -> &LayerHeadCache {
        &self.layers[layer][head]
    }

    /// Tokens seen so far (prompt plus decoded).
    pub fn seq_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |c| c.next_position)
    }

    /// Stored tokens summed over every layer and head.
    pub fn stored_tokens(&self) -> usize {
        self.layers.iter().flatten().map(LayerHeadCache::token_count).sum()
    }

    /// Appends one decoded token's key and value rows to a sub-cache.
    pub fn decode_append(&mut self, layer: usize, head: usize, h_k: &[f32], h_v: &[f32]) -> Result<()> {
        self.sub_mut(layer, head)?.append(h_k, h_v)
    }

    /// Dequantized keys and values of a sub-cache in position order.
    pub fn materialize(&self, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
        self.sub(layer, head)?.materialize()
    }

    pub fn measured_bytes(&self) -> usize {
        self.byte_breakdown().total()
    }

    pub fn byte_breakdown(&self) -> CacheBytes {
        (0..self.num_layers()).map(|l| self.layer_bytes(l)).fold(CacheBytes::default(), |a, b| a + b)
    }

    pub fn layer_bytes(&self, layer: usize) -> CacheBytes {
        self.layers[layer]
            .iter()
            .map(LayerHeadCache::bytes)
            .fold(CacheBytes::default(), |a, b| a + b)
    }

    fn sub(&self, layer: usize, head: usize) -> Result<&LayerHeadCache> {
        match self.layers.get(layer).and_then(|l| l.get(head)) {
            Some(c) => Ok(c),
            None => contract!("no sub-cache at layer {layer} head {head}"),
        }
    }

    fn sub_mut(&mut self, layer: usize, head: usize) -> Result<&mut LayerHeadCache> {
        match self.layers.get_mut(layer).and_then(|l| l.get_mut(head)) {
            Some(c) => Ok(c),
            None => contract!("no sub-cache at layer {layer} head {head}"),
        }
    }

    /// Serializes the whole cache in the snapshot format.
    pub fn write_snapshot<W: Write>(&self, w: W) -> Result<()> {
        let mut e = Encoder::new(w);
        e.bytes(SNAPSHOT_MAGIC)?;
        e.u32(SNAPSHOT_VERSION)?;
        e.u32(self.num_layers())?;
        e.u32(self.num_heads())?;
        e.u32(self.head_dim)?;
        e.u8(policy_tag(self.policy.kind))?;
        e.u32(self.policy.recent_window)?;
        e.u32(self.policy.pool_width)?;
        let scheme = &self.plan.scheme;
        e.u32(scheme.group_size)?;
        e.u8(scheme.layout.key.to_byte())?;
        e.u8(scheme.layout.value.to_byte())?;
        e.u8(u8::from(scheme.outlier_threshold.is_some()))?;
        e.f32(scheme.outlier_threshold.unwrap_or(0.0))?;
        for l in &self.plan.layers {
            e.u32(l.tokens)?;
            e.u8(l.bits)?;
            e.u32(l.base_tokens)?;
        }
        for c in self.layers.iter().flatten() {
            write_sub(&mut e, c)?;
        }
        Ok(())
    }

    /// Serialized bytes of one layer's sub-caches, for per-layer comparisons.
    pub fn layer_snapshot(&self, layer: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let mut e = Encoder::new(&mut buf);
        for c in &self.layers[layer] {
            write_sub(&mut e, c)?;
        }
        Ok(buf)
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let mut d = Decoder::new(r);
        d.expect_magic(SNAPSHOT_MAGIC)?;
        let version = d.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Integrity(format!("unsupported snapshot version {version}")));
        }
        let (layers, heads, head_dim) = (d.u32()?, d.u32()?, d.u32()?);
        let policy = PolicyConfig {
            kind: policy_from_tag(d.u8()?)?,
            recent_window: d.u32()?,
            pool_width: d.u32()?,
        };
        let group_size = d.u32()?;
        let layout = KvLayout {
            key: Layout::from_byte(d.u8()?)?,
            value: Layout::from_byte(d.u8()?)?,
        };
        let has_threshold = d.u8()? != 0;
        let threshold = d.f32()?;
        let scheme = QuantScheme {
            group_size,
            layout,
            outlier_threshold: has_threshold.then_some(threshold),
        };
        let plan_layers = (0..layers)
            .map(|_| {
                Ok(LayerPlan {
                    tokens: d.u32()?,
                    bits: d.u8()?,
                    base_tokens: d.u32()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = BudgetPlan {
            layers: plan_layers,
            scheme,
        };
        plan.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let configs = plan
                .scheme
                .configs(plan.layers[l].bits)
                .map_err(|e| Error::Integrity(e.to_string()))?;
            let layer = (0..heads)
                .map(|_| read_sub(&mut d, head_dim, configs))
                .collect::<Result<Vec<_>>>()?;
            out.push(layer);
        }
        Ok(Self {
            layers: out,
            plan,
            policy,
            head_dim,
        })
    }
}

fn policy_tag(kind: PolicyKind) -> u8 {
    PolicyKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u8
}

fn policy_from_tag(tag: u8) -> Result<PolicyKind> {
    PolicyKind::ALL
        .get(usize::from(tag))
        .copied()
        .ok_or_else(|| Error::Integrity(format!("unknown policy tag {tag}")))
}

fn write_indices<W: Write>(e: &mut Encoder<W>, xs: &[usize]) -> Result<()> {
    e.u32(xs.len())?;
    xs.iter().try_for_each(|&x| e.u32(x))
}

fn write_sub<W: Write>(e: &mut Encoder<W>, c: &LayerHeadCache) -> Result<()> {
    e.u64(c.next_position as u64)?;
    e.u32(c.retained.budget())?;
    write_indices(e, c.retained.retained())?;
    write_indices(e, &c.positions)?;
    match &c.store {
        Store::Full { keys, values } => {
            e.u8(0)?;
            e.u32(keys.rows())?;
            e.f32s(keys.data())?;
            e.f32s(values.data())?;
        }
        Store::Quantized { blocks } => {
            e.u8(1)?;
            e.u32(blocks.len())?;
            for b in blocks {
                write_tensor(e, &b.keys)?;
                write_tensor(e, &b.values)?;
            }
        }
    }
    e.u32(c.residual_k.rows())?;
    e.f32s(c.residual_k.data())?;
    e.f32s(c.residual_v.data())
}

fn write_tensor<W: Write>(e: &mut Encoder<W>, t: &QuantizedTensor) -> Result<()> {
    e.u32(t.rows())?;
    e.u32(t.cols())?;
    e.u8(t.bits())?;
    e.u8(t.layout().to_byte())?;
    e.u32(t.group_size())?;
    e.u32(t.group_count())?;
    for g in t.group_params() {
        e.u32(g.len)?;
        e.f32(g.scale)?;
        e.f32(g.zero_point)?;
    }
    e.u32(t.packed_codes().len())?;
    e.bytes(t.packed_codes())?;
    e.u32(t.outliers().len())?;
    for o in t.outliers() {
        e.u32(o.row)?;
        e.u32(o.col)?;
        e.f32(o.value)?;
    }
    Ok(())
}

fn read_indices<R: Read>(d: &mut Decoder<R>) -> Result<Vec<usize>> {
    let n = d.u32()?;
    (0..n).map(|_| d.u32()).collect()
}

fn read_rows<R: Read>(d: &mut Decoder<R>, rows: usize, head_dim: usize) -> Result<Matrix> {
    let data = d.f32s(rows * head_dim)?;
    Matrix::new(rows, head_dim, data).map_err(|e| Error::Integrity(e.to_string()))
}

fn read_sub<R: Read>(
    d: &mut Decoder<R>,
    head_dim: usize,
    configs: Option<(QuantConfig, QuantConfig)>,
) -> Result<LayerHeadCache> {
    let next_position = d.u64()? as usize;
    let budget = d.u32()?;
    let retained = PruneDecision::from_indices(read_indices(d)?, budget)
        .map_err(|e| Error::Integrity(e.to_string()))?;
    let positions = read_indices(d)?;
    let store = match (d.u8()?, configs.is_some()) {
        (0, false) => {
            let rows = d.u32()?;
            Store::Full {
                keys: read_rows(d, rows, head_dim)?,
                values: read_rows(d, rows, head_dim)?,
            }
        }
        (1, true) => {
            let count = d.u32()?;
            let blocks = (0..count)
                .map(|_| {
                    Ok(QuantBlock {
                        keys: read_tensor(d)?,
                        values: read_tensor(d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Store::Quantized { blocks }
        }
        (tag, _) => return Err(Error::Integrity(format!("store tag {tag} does not match the layer plan"))),
    };
    let residual_rows = d.u32()?;
    let c = LayerHeadCache {
        head_dim,
        configs,
        store,
        residual_k: read_rows(d, residual_rows, head_dim)?,
        residual_v: read_rows(d, residual_rows, head_dim)?,
        retained,
        positions,
        next_position,
    };
    if c.positions.len() != c.token_count() {
        return Err(Error::Integrity("position count does not match stored rows".into()));
    }
    Ok(c)
}

fn read_tensor<R: Read>(d: &mut Decoder<R>) -> Result<QuantizedTensor> {
    let (rows, cols) = (d.u32()?, d.u32()?);
    let bits = d.u8()?;
    let layout = Layout::from_byte(d.u8()?)?;
    let group_size = d.u32()?;
    let group_count = d.u32()?;
    let groups = (0..group_count)
        .map(|_| {
            Ok(GroupParams {
                len: d.u32()?,
                scale: d.f32()?,
                zero_point: d.f32()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let packed_len = d.u32()?;
    let packed = d.bytes(packed_len)?;
    let outlier_count = d.u32()?;
    let outliers = (0..outlier_count)
        .map(|_| {
            Ok(Outlier {
                row: d.u32()?,
                col: d.u32()?,
                value: d.f32()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedTensor::from_parts(rows, cols, bits, layout, group_size, groups, packed, outliers)
}

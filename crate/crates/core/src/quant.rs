//! Group-wise B-bit min-max quantization of K/V matrices.
//!
//! A group is a contiguous run of at most `group_size` elements that shares
//! one zero point (the group minimum) and one scale
//! `(max - min) / (2^B - 1)`. Codes are `round_half_even((v - min) / scale)`.
//!
//! Two grouping layouts are supported:
//!
//! * [`Layout::PerToken`]: runs along the channel axis inside one row (token).
//! * [`Layout::PerChannel`]: runs along the token axis inside one column.
//!
//! Keys grouped per channel and values per token gives the KIVI scheme;
//! both per token is the FlexGen scheme. Optionally, elements whose magnitude
//! exceeds a threshold are kept exactly in an outlier sidecar and skipped by
//! the grouping, so surviving elements compact within their row or column.
//!
//! Packed format: each group starts on a byte boundary; within a group, codes
//! are packed little-endian with the first code in the least-significant bits
//! of the first byte.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 64;
pub const DEFAULT_OUTLIER_THRESHOLD: f32 = 6.0;

/// Bytes charged per group for its scale and zero point (16 bits each).
pub const GROUP_METADATA_BYTES: usize = 4;
/// Bytes charged per outlier: 4-byte packed position plus a 16-bit value.
pub const OUTLIER_BYTES: usize = 6;
/// Bytes charged per element stored at full precision.
pub const FULL_PRECISION_BYTES: usize = 2;

/// Supported code widths.
pub const SUPPORTED_BITS: [u8; 3] = [2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    PerToken,
    PerChannel,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::PerToken => "per-token",
            Layout::PerChannel => "per-channel",
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Layout::PerToken => 0,
            Layout::PerChannel => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Layout::PerToken),
            1 => Ok(Layout::PerChannel),
            _ => Err(Error::Integrity(format!("unknown layout tag {b}"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-token" => Ok(Layout::PerToken),
            "per-channel" => Ok(Layout::PerChannel),
            _ => Err(Error::Contract(format!("unknown layout '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub layout: Layout,
    /// Elements with `|v| > threshold` bypass quantization.
    pub outlier_threshold: Option<f32>,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize, layout: Layout) -> Result<Self> {
        let cfg = Self {
            bits,
            group_size,
            layout,
            outlier_threshold: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_outlier_threshold(mut self, threshold: f32) -> Result<Self> {
        self.outlier_threshold = Some(threshold);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            contract!("unsupported bit width {}", self.bits);
        }
        if self.group_size == 0 {
            contract!("group size must be at least 1");
        }
        if let Some(t) = self.outlier_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                contract!("outlier threshold must be a finite nonnegative value, got {t}");
            }
        }
        Ok(())
    }
}

/// One quantized group with unpacked codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroup {
    pub codes: Vec<u8>,
    pub zero_point: f32,
    pub scale: f32,
}

impl QuantGroup {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if !SUPPORTED_BITS.contains(&bits) {
        contract!("unsupported bit width {bits}");
    }
    Ok(())
}

/// Min-max quantizes one group. A constant group gets scale 0 and all-zero
/// codes.
pub fn quantize_group(values: &[f32], bits: u8) -> Result<QuantGroup> {
    check_bits(bits)?;
    if values.is_empty() {
        contract!("cannot quantize an empty group");
    }
    if values.iter().any(|v| !v.is_finite()) {
        contract!("cannot quantize non-finite values");
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        return Ok(QuantGroup {
            codes: vec![0; values.len()],
            zero_point: lo,
            scale: 0.0,
        });
    }
    let levels = max_code(bits);
    let mut scale = ((f64::from(hi) - f64::from(lo)) / f64::from(levels)) as f32;
    if scale == 0.0 {
        // range below f32 resolution once divided; keep the scale nonzero
        scale = f32::from_bits(1);
    }
    let (z, s) = (f64::from(lo), f64::from(scale));
    let codes = values
        .iter()
        .map(|&v| {
            let q = ((f64::from(v) - z) / s).round_ties_even();
            q.clamp(0.0, f64::from(levels)) as u8
        })
        .collect();
    Ok(QuantGroup {
        codes,
        zero_point: lo,
        scale,
    })
}

fn dequantize_code(code: u8, scale: f32, zero_point: f32) -> f32 {
    (f64::from(code) * f64::from(scale) + f64::from(zero_point)) as f32
}

/// Inverts [`quantize_group`]: `code * scale + zero_point`.
pub fn dequantize_group(g: &QuantGroup) -> Vec<f32> {
    g.codes
        .iter()
        .map(|&c| dequantize_code(c, g.scale, g.zero_point))
        .collect()
}

/// Scale and zero point of a stored group, with its element count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub len: usize,
    pub scale: f32,
    pub zero_point: f32,
}

/// An element kept at full precision outside the quantized groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outlier {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Byte accounting of a quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteBreakdown {
    pub codes: usize,
    pub metadata: usize,
    pub outliers: usize,
}

impl ByteBreakdown {
    pub fn total(&self) -> usize {
        self.codes + self.metadata + self.outliers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: u8,
    layout: Layout,
    group_size: usize,
    groups: Vec<GroupParams>,
    packed: Vec<u8>,
    outliers: Vec<Outlier>,
}

fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn pack_codes(codes: &[u8], bits: u8, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + packed_len(codes.len(), bits), 0);
    let bits = bits as usize;
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * bits;
        out[start + bit / 8] |= c << (bit % 8);
    }
}

fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Vec<u8> {
    let mask = max_code(bits) as u8;
    let bits = bits as usize;
    (0..count)
        .map(|i| {
            let bit = i * bits;
            (bytes[bit / 8] >> (bit % 8)) & mask
        })
        .collect()
}

/// Walks grouping lines (rows for per-token, columns for per-channel) and
/// yields the flat positions of each group, skipping outlier positions.
fn for_each_group(
    rows: usize,
    cols: usize,
    layout: Layout,
    group_size: usize,
    is_outlier: &[bool],
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let (lines, line_len) = match layout {
        Layout::PerToken => (rows, cols),
        Layout::PerChannel => (cols, rows),
    };
    let mut run = Vec::with_capacity(group_size);
    for line in 0..lines {
        run.clear();
        for k in 0..line_len {
            let flat = match layout {
                Layout::PerToken => line * cols + k,
                Layout::PerChannel => k * cols + line,
            };
            if is_outlier[flat] {
                continue;
            }
            run.push(flat);
            if run.len() == group_size {
                f(&run)?;
                run.clear();
            }
        }
        if !run.is_empty() {
            f(&run)?;
        }
    }
    Ok(())
}

/// Quantizes a matrix group by group under `cfg`.
pub fn quantize_matrix(m: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let (rows, cols) = m.shape();
    let data = m.data();
    let mut is_outlier = vec![false; data.len()];
    let mut outliers = Vec::new();
    if let Some(threshold) = cfg.outlier_threshold {
        for (flat, &v) in data.iter().enumerate() {
            if v.abs() > threshold {
                is_outlier[flat] = true;
                outliers.push(Outlier {
                    row: flat / cols,
                    col: flat % cols,
                    value: v,
                });
            }
        }
    }
    let mut groups = Vec::new();
    let mut packed = Vec::new();
    let mut scratch = Vec::with_capacity(cfg.group_size);
    for_each_group(rows, cols, cfg.layout, cfg.group_size, &is_outlier, |run| {
        scratch.clear();
        scratch.extend(run.iter().map(|&i| data[i]));
        let g = quantize_group(&scratch, cfg.bits)?;
        pack_codes(&g.codes, cfg.bits, &mut packed);
        groups.push(GroupParams {
            len: g.len(),
            scale: g.scale,
            zero_point: g.zero_point,
        });
        Ok(())
    })?;
    Ok(QuantizedTensor {
        rows,
        cols,
        bits: cfg.bits,
        layout: cfg.layout,
        group_size: cfg.group_size,
        groups,
        packed,
        outliers,
    })
}

/// Rebuilds the matrix: groups are inverted in order and outliers are written
/// back exactly.
pub fn dequantize_matrix(q: &QuantizedTensor) -> Result<Matrix> {
    q.check_integrity()?;
    let mut data = vec![0.0f32; q.rows * q.cols];
    let mut is_outlier = vec![false; data.len()];
    for o in &q.outliers {
        let flat = o.row * q.cols + o.col;
        is_outlier[flat] = true;
        data[flat] = o.value;
    }
    let mut group_iter = q.groups.iter();
    let mut offset = 0;
    for_each_group(q.rows, q.cols, q.layout, q.group_size, &is_outlier, |run| {
        let g = group_iter
            .next()
            .ok_or_else(|| Error::Integrity("fewer groups than the layout requires".into()))?;
        if g.len != run.len() {
            return Err(Error::Integrity(format!(
                "group length {} does not match layout run of {}",
                g.len,
                run.len()
            )));
        }
        let nbytes = packed_len(g.len, q.bits);
        let codes = unpack_codes(&q.packed[offset..offset + nbytes], g.len, q.bits);
        offset += nbytes;
        for (&flat, &c) in run.iter().zip(&codes) {
            data[flat] = dequantize_code(c, g.scale, g.zero_point);
        }
        Ok(())
    })?;
    if group_iter.next().is_some() {
        return Err(Error::Integrity("more groups than the layout requires".into()));
    }
    Matrix::new(q.rows, q.cols, data)
}

/// Accounted storage of a quantized tensor in bytes.
pub fn quantized_bytes(q: &QuantizedTensor) -> usize {
    q.byte_breakdown().total()
}

impl QuantizedTensor {
    /// Reassembles a tensor from stored parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        layout: Layout,
        group_size: usize,
        groups: Vec<GroupParams>,
        packed: Vec<u8>,
        outliers: Vec<Outlier>,
    ) -> Result<Self> {
        let q = Self {
            rows,
            cols,
            bits,
            layout,
            group_size,
            groups,
            packed,
            outliers,
        };
        q.check_integrity()?;
        Ok(q)
    }

    fn check_integrity(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) || self.group_size == 0 {
            return Err(Error::Integrity(format!(
                "invalid bits {} or group size {}",
                self.bits, self.group_size
            )));
        }
        let elements: usize = self.groups.iter().map(|g| g.len).sum();
        if elements + self.outliers.len() != self.rows * self.cols {
            return Err(Error::Integrity(format!(
                "{} grouped + {} outlier elements do not cover {}x{}",
                elements,
                self.outliers.len(),
                self.rows,
                self.cols
            )));
        }
        let expected: usize = self.groups.iter().map(|g| packed_len(g.len, self.bits)).sum();
        if expected != self.packed.len() {
            return Err(Error::Integrity(format!(
                "packed code length {} does not match expected {}",
                self.packed.len(),
                expected
            )));
        }
        let mut prev: Option<(usize, usize)> = None;
        for o in &self.outliers {
            if o.row >= self.rows || o.col >= self.cols || !o.value.is_finite() {
                return Err(Error::Integrity(format!(
                    "bad outlier at ({}, {})",
                    o.row, o.col
                )));
            }
            if prev.is_some_and(|p| p >= (o.row, o.col)) {
                return Err(Error::Integrity("outlier positions not strictly increasing".into()));
            }
            prev = Some((o.row, o.col));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_params(&self) -> &[GroupParams] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Number of quantized elements (everything except outliers).
    pub fn code_count(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.packed
    }

    pub fn outliers(&self) -> &[Outlier] {
        &self.outliers
    }

    /// Unpacked codes of every group, in storage order.
    pub fn groups(&self) -> Vec<QuantGroup> {
        let mut offset = 0;
        self.groups
            .iter()
            .map(|g| {
                let nbytes = packed_len(g.len, self.bits);
                let codes = unpack_codes(&self.packed[offset..offset + nbytes], g.len, self.bits);
                offset += nbytes;
                QuantGroup {
                    codes,
                    zero_point: g.zero_point,
                    scale: g.scale,
                }
            })
            .collect()
    }

    /// Largest group scale, the quantity that bounds round-trip error.
    pub fn max_scale(&self) -> f32 {
        self.groups.iter().map(|g| g.scale).fold(0.0, f32::max)
    }

    pub fn byte_breakdown(&self) -> ByteBreakdown {
        ByteBreakdown {
            codes: packed_len(self.code_count(), self.bits),
            metadata: self.groups.len() * GROUP_METADATA_BYTES,
            outliers: self.outliers.len() * OUTLIER_BYTES,
        }
    }
}

/// Number of groups a `rows x cols` matrix splits into when no element is an
/// outlier.
pub fn group_count_for(rows: usize, cols: usize, layout: Layout, group_size: usize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    match layout {
        Layout::PerToken => rows * cols.div_ceil(group_size),
        Layout::PerChannel => cols * rows.div_ceil(group_size),
    }
}

/// Predicted [`quantized_bytes`] for an outlier-free `rows x cols` matrix.
pub fn predicted_bytes(rows: usize, cols: usize, bits: u8, layout: Layout, group_size: usize) -> usize {
    packed_len(rows * cols, bits) + group_count_for(rows, cols, layout, group_size) * GROUP_METADATA_BYTES
}

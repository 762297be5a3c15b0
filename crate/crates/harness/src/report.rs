//! CSV emission/parsing and the plain-text summary table.
//!
//! CSV columns, in order:
//!
//! ```text
//! policy, bits, token_multiplier, tokens_per_layer, group_size, layout,
//! override_id, seed, seq_len, accuracy, logit_perturb, bytes,
//! budget_ratio_raw, budget_ratio_meta
//! ```
//!
//! Floats carry 6 significant digits. Skipped grid points keep their
//! configuration columns and leave the five metric columns empty.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::sweep::SweepRow;

pub const CSV_HEADER: [&str; 14] = [
    "policy",
    "bits",
    "token_multiplier",
    "tokens_per_layer",
    "group_size",
    "layout",
    "override_id",
    "seed",
    "seq_len",
    "accuracy",
    "logit_perturb",
    "bytes",
    "budget_ratio_raw",
    "budget_ratio_meta",
];

/// One CSV line, as written and as parsed back.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub policy: String,
    pub bits: u8,
    pub token_multiplier: usize,
    pub tokens_per_layer: usize,
    pub group_size: usize,
    pub layout: String,
    pub override_id: String,
    pub seed: u64,
    pub seq_len: usize,
    pub accuracy: Option<f64>,
    pub logit_perturb: Option<f64>,
    pub bytes: Option<usize>,
    pub budget_ratio_raw: Option<f64>,
    pub budget_ratio_meta: Option<f64>,
}

impl From<&SweepRow> for CsvRow {
    fn from(r: &SweepRow) -> Self {
        let m = r.metrics();
        CsvRow {
            policy: r.point.policy.to_string(),
            bits: r.point.bits,
            token_multiplier: r.point.token_multiplier,
            tokens_per_layer: r.tokens_per_layer,
            group_size: r.point.group_size,
            layout: r.layout_name(),
            override_id: r.override_id(),
            seed: r.seed,
            seq_len: r.point.seq_len,
            accuracy: m.map(|m| m.accuracy),
            logit_perturb: m.map(|m| m.logit_perturb),
            bytes: m.map(|m| m.bytes),
            budget_ratio_raw: m.map(|m| m.budget_ratio_raw),
            budget_ratio_meta: m.map(|m| m.budget_ratio_meta),
        }
    }
}

impl CsvRow {
    fn record(&self) -> [String; 14] {
        let f = |x: Option<f64>| x.map(format_float).unwrap_or_default();
        [
            self.policy.clone(),
            self.bits.to_string(),
            self.token_multiplier.to_string(),
            self.tokens_per_layer.to_string(),
            self.group_size.to_string(),
            self.layout.clone(),
            self.override_id.clone(),
            self.seed.to_string(),
            self.seq_len.to_string(),
            f(self.accuracy),
            f(self.logit_perturb),
            self.bytes.map(|b| b.to_string()).unwrap_or_default(),
            f(self.budget_ratio_raw),
            f(self.budget_ratio_meta),
        ]
    }
}

/// `%.6g`-style formatting: 6 significant digits, trailing zeros removed,
/// scientific notation outside `[1e-4, 1e6)`.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record(CsvRow::from(r).record())?;
    }
    out.flush().map_err(|e| HarnessError::io("flushing csv", e))
}

/// Writes the CSV to `path`, creating parent directories.
pub fn emit_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn parse_csv<R: Read>(r: R) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Config(format!("unexpected csv header {header:?}")));
    }
    let bad = |field: &str, v: &str| HarnessError::Config(format!("csv field {field}: cannot parse '{v}'"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let req = |i: usize| -> Result<u64> { get(i).parse().map_err(|_| bad(CSV_HEADER[i], get(i))) };
        let opt = |i: usize| -> Result<Option<f64>> {
            match get(i) {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(CSV_HEADER[i], v)),
            }
        };
        out.push(CsvRow {
            policy: get(0).into(),
            bits: u8::try_from(req(1)?).map_err(|_| bad("bits", get(1)))?,
            token_multiplier: req(2)? as usize,
            tokens_per_layer: req(3)? as usize,
            group_size: req(4)? as usize,
            layout: get(5).into(),
            override_id: get(6).into(),
            seed: req(7)?,
            seq_len: req(8)? as usize,
            accuracy: opt(9)?,
            logit_perturb: opt(10)?,
            bytes: match get(11) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("bytes", v))?),
            },
            budget_ratio_raw: opt(12)?,
            budget_ratio_meta: opt(13)?,
        });
    }
    Ok(out)
}

/// Seed-averaged summary, one line per grid point.
pub fn render_table(rows: &[SweepRow]) -> String {
    let mut groups: Vec<(&SweepRow, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(k, _)| k.point == r.point) {
            Some((_, members)) => members.push(r),
            None => groups.push((r, vec![r])),
        }
    }
    let mut lines = vec![[
        "policy", "bits", "mult", "tokens", "group", "layout", "overrides", "seq", "runs", "accuracy", "perturb",
        "bytes", "ratio_raw", "ratio_meta",
    ]
    .map(String::from)
    .to_vec()];
    for (key, members) in &groups {
        let measured: Vec<_> = members.iter().filter_map(|r| r.metrics()).collect();
        let mean = |f: &dyn Fn(&crate::sweep::Metrics) -> f64| {
            if measured.is_empty() {
                "-".to_string()
            } else {
                format!("{:.4}", measured.iter().map(|m| f(m)).sum::<f64>() / measured.len() as f64)
            }
        };
        let p = &key.point;
        lines.push(vec![
            p.policy.to_string(),
            p.bits.to_string(),
            p.token_multiplier.to_string(),
            key.tokens_per_layer.to_string(),
            p.group_size.to_string(),
            key.layout_name(),
            key.override_id(),
            p.seq_len.to_string(),
            format!("{}/{}", measured.len(), members.len()),
            mean(&|m| m.accuracy),
            mean(&|m| m.logit_perturb),
            mean(&|m| m.bytes as f64).trim_end_matches(".0000").to_string(),
            mean(&|m| m.budget_ratio_raw),
            mean(&|m| m.budget_ratio_meta),
        ]);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

//! Attention entropy, relative-distance attention profiles and
//! Jensen-Shannon divergence. All logarithms are natural; units are nats.

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::model::{Decoding, TinyModel};
use crate::report::{fmt_f64, CsvTable};
use crate::rope::RotaryVariant;

/// Probabilities below this are treated as exactly zero.
pub const PROB_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-6;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("distribution has no entries".into()));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::Validation(format!("probability {x} is not in [0, inf)")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Validation(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// `-sum p ln p` over entries above the floor.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > PROB_FLOOR {
            h -= x * x.ln();
        }
    }
    h.max(0.0)
}

// ── Generation entropy ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    /// Mean over layers and heads of the last-row entropy, one per step.
    pub per_step: Vec<f64>,
    /// Context length seen by each step.
    pub context_lengths: Vec<usize>,
    pub mean: f64,
    /// `[layer][head]` entropy averaged over steps.
    pub per_layer_head: Option<Vec<Vec<f64>>>,
}

impl EntropyReport {
    /// Per step: entropy of every (layer, head) final attention row, averaged;
    /// the report mean is the plain average of the per-step values.
    pub fn from_records(records: &[AttentionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no generation steps to score".into()));
        }
        let layers = records[0].layer_count;
        let heads = records[0].head_count;
        let mut grid = vec![vec![0.0; heads]; layers];
        let mut per_step = Vec::with_capacity(records.len());
        let mut context_lengths = Vec::with_capacity(records.len());
        for rec in records {
            if rec.layer_count != layers || rec.head_count != heads {
                return Err(Error::Shape("records disagree on layer/head counts".into()));
            }
            let mut step = 0.0;
            for (l, row) in grid.iter_mut().enumerate() {
                for (h, cell) in row.iter_mut().enumerate() {
                    let e = entropy(&rec.last_row_distribution(l, h)?)?;
                    *cell += e;
                    step += e;
                }
            }
            per_step.push(step / (layers * heads) as f64);
            context_lengths.push(rec.n);
        }
        let steps = records.len() as f64;
        for row in &mut grid {
            for cell in row.iter_mut() {
                *cell /= steps;
            }
        }
        let mean = per_step.iter().sum::<f64>() / steps;
        Ok(Self {
            per_step,
            context_lengths,
            mean,
            per_layer_head: Some(grid),
        })
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["step", "mean_entropy", "context_length"]);
        for (i, (e, n)) in self.per_step.iter().zip(&self.context_lengths).enumerate() {
            t.push(vec![i.to_string(), fmt_f64(*e), n.to_string()]);
        }
        t
    }
}

/// Greedy generation with the model's own variant, scored step by step.
pub fn attention_entropy(model: &TinyModel, prompt: &[usize], max_new_tokens: usize) -> Result<EntropyReport> {
    attention_entropy_with(model, prompt, max_new_tokens, &model.config().variant)
}

pub fn attention_entropy_with(
    model: &TinyModel,
    prompt: &[usize],
    max_new_tokens: usize,
    variant: &RotaryVariant,
) -> Result<EntropyReport> {
    let generation = model.generate_with(prompt, max_new_tokens, Decoding::Greedy, variant)?;
    EntropyReport::from_records(&generation.records)
}

// ── Distance profiles ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceAxis {
    /// Key `i - j`: 0 is the token itself, 1 the previous one.
    #[default]
    Relative,
    /// Key `j`, the absolute position attended to.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceDistribution {
    pub mass: Vec<f64>,
    pub bucket_width: usize,
    /// Attention rows that went into the average.
    pub sample_count: usize,
}

impl DistanceDistribution {
    /// Sample-count weighted average of two profiles with the same width;
    /// the shorter one is zero-padded.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.bucket_width != other.bucket_width {
            return Err(Error::Validation(format!(
                "bucket widths differ: {} vs {}",
                self.bucket_width, other.bucket_width
            )));
        }
        let total = self.sample_count + other.sample_count;
        if total == 0 {
            return Err(Error::Empty("both profiles are empty".into()));
        }
        let wa = self.sample_count as f64 / total as f64;
        let wb = other.sample_count as f64 / total as f64;
        let len = self.mass.len().max(other.mass.len());
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        let mass = (0..len)
            .map(|i| wa * at(&self.mass, i) + wb * at(&other.mass, i))
            .collect();
        Ok(Self {
            mass,
            bucket_width: self.bucket_width,
            sample_count: total,
        })
    }

    pub fn padded(&self, buckets: usize) -> Self {
        let mut out = self.clone();
        if out.mass.len() < buckets {
            out.mass.resize(buckets, 0.0);
        }
        out
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["bucket", "mass"]);
        for (i, m) in self.mass.iter().enumerate() {
            t.push(vec![i.to_string(), fmt_f64(*m)]);
        }
        t
    }
}

/// Mean attention mass per distance bucket over every row of every
/// (layer, head) map of every record, normalized to sum to one.
pub fn aggregate_distance_distribution(
    records: &[AttentionRecord],
    bucket_width: usize,
    axis: DistanceAxis,
) -> Result<DistanceDistribution> {
    if records.is_empty() {
        return Err(Error::Empty("no attention records to aggregate".into()));
    }
    if bucket_width == 0 {
        return Err(Error::Config("bucket_width must be >= 1".into()));
    }
    let max_n = records.iter().map(|r| r.n).max().unwrap_or(0);
    let mut totals = vec![0.0; max_n.div_ceil(bucket_width).max(1)];
    let mut rows = 0usize;
    for rec in records {
        for map in &rec.maps {
            for i in 0..map.n {
                let row = map.row(i);
                for (j, &w) in row[..=i].iter().enumerate() {
                    let key = match axis {
                        DistanceAxis::Relative => i - j,
                        DistanceAxis::Absolute => j,
                    };
                    totals[key / bucket_width] += w;
                }
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::Empty("records contain no attention rows".into()));
    }
    let norm: f64 = totals.iter().sum();
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::Numeric("attention mass sums to zero".into()));
    }
    Ok(DistanceDistribution {
        mass: totals.iter().map(|t| t / norm).collect(),
        bucket_width,
        sample_count: rows,
    })
}

// ── Divergence ──────────────────────────────────────────────────────────

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(m) {
        if a > PROB_FLOOR {
            kl += a * (a / b).ln();
        }
    }
    kl
}

/// `JS(P, Q) = KL(P||M)/2 + KL(Q||M)/2` with `M = (P + Q)/2`, on raw vectors
/// of equal length.
pub fn js_divergence_vec(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Validation(format!(
            "bucket counts differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Requires matching bucket widths and bucket counts.
pub fn js_divergence(p: &DistanceDistribution, q: &DistanceDistribution) -> Result<f64> {
    if p.bucket_width != q.bucket_width {
        return Err(Error::Validation(format!(
            "bucket widths differ: {} vs {}",
            p.bucket_width, q.bucket_width
        )));
    }
    js_divergence_vec(&p.mass, &q.mass)
}

/// Zero-pads the shorter profile before comparing.
pub fn js_divergence_padded(p: &DistanceDistribution, q: &DistanceDistribution) -> Result<f64> {
    let n = p.mass.len().max(q.mass.len());
    js_divergence(&p.padded(n), &q.padded(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsRow {
    pub name_a: String,
    pub name_b: String,
    pub js_nats: f64,
}

/// Every unordered pair of named profiles, in input order, zero-padded.
pub fn js_table(profiles: &[(String, DistanceDistribution)]) -> Result<Vec<JsRow>> {
    let mut out = Vec::new();
    for (i, (a, p)) in profiles.iter().enumerate() {
        for (b, q) in &profiles[i + 1..] {
            out.push(JsRow {
                name_a: a.clone(),
                name_b: b.clone(),
                js_nats: js_divergence_padded(p, q)?,
            });
        }
    }
    Ok(out)
}

pub fn js_csv(rows: &[JsRow]) -> CsvTable {
    let mut t = CsvTable::new(&["name_a", "name_b", "js_nats"]);
    for r in rows {
        t.push(vec![r.name_a.clone(), r.name_b.clone(), fmt_f64(r.js_nats)]);
    }
    t
}

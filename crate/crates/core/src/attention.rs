//! Multi-head causal scaled-dot-product attention with a rotary variant
//! applied to queries and keys. Full weight matrices are materialized so
//! they can be analysed afterwards.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{RotaryVariant, RotationTable};

/// Queries, keys and values for one attention call, indexed
/// `[head][position][lane]`.
#[derive(Debug, Clone)]
pub struct AttentionInput {
    queries: Vec<Vec<Vec<f64>>>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    positions: Vec<usize>,
}

impl AttentionInput {
    /// Positions default to `0..n`.
    pub fn new(
        queries: Vec<Vec<Vec<f64>>>,
        keys: Vec<Vec<Vec<f64>>>,
        values: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = queries.first().map_or(0, Vec::len);
        Self::with_positions(queries, keys, values, (0..n).collect())
    }

    pub fn with_positions(
        queries: Vec<Vec<Vec<f64>>>,
        keys: Vec<Vec<Vec<f64>>>,
        values: Vec<Vec<Vec<f64>>>,
        positions: Vec<usize>,
    ) -> Result<Self> {
        let input = Self {
            queries,
            keys,
            values,
            positions,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn head_count(&self) -> usize {
        self.queries.len()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn head_dim(&self) -> usize {
        self.queries[0][0].len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    fn validate(&self) -> Result<()> {
        let heads = self.queries.len();
        if heads == 0 {
            return Err(Error::Shape("attention needs at least one head".into()));
        }
        if self.keys.len() != heads || self.values.len() != heads {
            return Err(Error::Shape(format!(
                "head counts differ: q={heads} k={} v={}",
                self.keys.len(),
                self.values.len()
            )));
        }
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Shape("attention needs at least one position".into()));
        }
        let d = self.queries[0].first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::Shape("head dimension must be positive".into()));
        }
        for (name, tensor) in [
            ("queries", &self.queries),
            ("keys", &self.keys),
            ("values", &self.values),
        ] {
            for head in tensor {
                if head.len() != n {
                    return Err(Error::Shape(format!(
                        "{name} has {} positions, expected {n}",
                        head.len()
                    )));
                }
                for lanes in head {
                    if lanes.len() != d {
                        return Err(Error::Shape(format!(
                            "{name} vector has {} lanes, expected {d}",
                            lanes.len()
                        )));
                    }
                    if lanes.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numeric(format!("non-finite value in {name}")));
                    }
                }
            }
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "positions must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// One `n x n` row-major causal weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.n - 1)
    }
}

/// Attention weights for every (layer, head) of one forward pass, plus the
/// per-layer attention outputs (heads concatenated, before any projection).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub n: usize,
    pub layer_count: usize,
    pub head_count: usize,
    /// Indexed `layer * head_count + head`.
    pub maps: Vec<AttentionMap>,
    /// Indexed `[layer][position]`.
    pub outputs: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn map(&self, layer: usize, head: usize) -> Result<&AttentionMap> {
        if layer >= self.layer_count {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                limit: self.layer_count,
            });
        }
        if head >= self.head_count {
            return Err(Error::Index {
                what: "head",
                index: head,
                limit: self.head_count,
            });
        }
        Ok(&self.maps[layer * self.head_count + head])
    }

    /// Final row of the selected matrix: the distribution the last token
    /// used to attend over the whole context.
    pub fn last_row_distribution(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        Ok(self.map(layer, head)?.last_row().to_vec())
    }

    /// One JSON object per (layer, head).
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for map in &self.maps {
            serde_json::to_writer(&mut out, map)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads maps written by [`write_ndjson`](Self::write_ndjson). Outputs are
    /// not part of the wire format and come back empty.
    pub fn read_ndjson<R: BufRead>(input: R) -> Result<Self> {
        let mut maps: Vec<AttentionMap> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let map: AttentionMap = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if map.weights.len() != map.n * map.n {
                return Err(Error::Format(format!(
                    "line {}: {} weights for n={}",
                    lineno + 1,
                    map.weights.len(),
                    map.n
                )));
            }
            maps.push(map);
        }
        Self::from_maps(maps)
    }

    /// Assembles a record from maps in any order; every (layer, head) in the
    /// implied grid must be present exactly once.
    pub fn from_maps(mut maps: Vec<AttentionMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("attention record has no maps".into()));
        }
        let n = maps[0].n;
        let layer_count = maps.iter().map(|m| m.layer).max().unwrap_or(0) + 1;
        let head_count = maps.iter().map(|m| m.head).max().unwrap_or(0) + 1;
        if maps.len() != layer_count * head_count || maps.iter().any(|m| m.n != n) {
            return Err(Error::Format(
                "maps do not form a complete layer x head grid of one size".into(),
            ));
        }
        maps.sort_by_key(|m| (m.layer, m.head));
        for (idx, m) in maps.iter().enumerate() {
            if m.layer * head_count + m.head != idx {
                return Err(Error::Format(format!(
                    "duplicate map for layer {} head {}",
                    m.layer, m.head
                )));
            }
        }
        Ok(Self {
            n,
            layer_count,
            head_count,
            maps,
            outputs: Vec::new(),
        })
    }
}

/// Runs causal attention over every head of `input`.
pub fn attend(input: &AttentionInput, variant: &RotaryVariant) -> Result<AttentionRecord> {
    let d = input.head_dim();
    if d != variant.head_dim() {
        return Err(Error::Shape(format!(
            "input head_dim {d} does not match variant head_dim {}",
            variant.head_dim()
        )));
    }
    let n = input.len();
    let table = variant.rotation_table(input.positions());
    let scale = variant.logit_scale();
    let mut maps = Vec::with_capacity(input.head_count());
    let mut outputs = vec![vec![0.0; d * input.head_count()]; n];

    for h in 0..input.head_count() {
        let q = rotate_rows(&input.queries[h], &table);
        let k = rotate_rows(&input.keys[h], &table);
        let v: Vec<f64> = input.values[h].iter().flatten().copied().collect();
        let mut weights = vec![0.0; n * n];
        let mut out = vec![0.0; n * d];
        causal_head(&q, &k, &v, n, d, scale, &mut weights, &mut out);
        if weights.iter().chain(&out).any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite attention in head {h}")));
        }
        for (i, row) in out.chunks(d).enumerate() {
            outputs[i][h * d..(h + 1) * d].copy_from_slice(row);
        }
        maps.push(AttentionMap {
            layer: 0,
            head: h,
            n,
            weights,
        });
    }

    Ok(AttentionRecord {
        n,
        layer_count: 1,
        head_count: input.head_count(),
        maps,
        outputs: vec![outputs],
    })
}

fn rotate_rows(rows: &[Vec<f64>], table: &RotationTable) -> Vec<f64> {
    let mut flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let d = rows[0].len();
    for (i, chunk) in flat.chunks_mut(d).enumerate() {
        table.apply(i, chunk);
    }
    flat
}

/// Causal softmax attention for one head on already-rotated, row-major
/// `[n, d]` operands. Writes row-stochastic `weights` (`[n, n]`, upper
/// triangle left at zero) and `out = weights * v`. Logits are
/// `scale * q.k / sqrt(d)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_head(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    scale: f64,
    weights: &mut [f64],
    out: &mut [f64],
) {
    let factor = scale / (d as f64).sqrt();
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut weights[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let kj = &k[j * d..(j + 1) * d];
            let logit = factor * dot(qi, kj);
            row[j] = logit;
            if logit > max {
                max = logit;
            }
        }
        let mut sum = 0.0;
        for w in row[..=i].iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        let inv = 1.0 / sum;
        for w in row[..=i].iter_mut() {
            *w *= inv;
        }
        for w in row[i + 1..].iter_mut() {
            *w = 0.0;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        oi.fill(0.0);
        for j in 0..=i {
            let w = row[j];
            for (o, &x) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * x;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeConfig;

    fn rope(d: usize) -> RotaryVariant {
        RotaryVariant::rope(RopeConfig::new(d, 10_000.0).unwrap())
    }

    #[test]
    fn single_token_attends_to_itself() {
        let input = AttentionInput::new(
            vec![vec![vec![0.3, -0.2]]],
            vec![vec![vec![1.0, 2.0]]],
            vec![vec![vec![5.0, -7.0]]],
        )
        .unwrap();
        let rec = attend(&input, &rope(2)).unwrap();
        assert_eq!(rec.maps[0].weights, vec![1.0]);
        assert_eq!(rec.outputs[0][0], vec![5.0, -7.0]);
        assert_eq!(rec.last_row_distribution(0, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        // Every position at m = 0 is impossible with strictly increasing
        // positions, so zero out the rotary effect with zero queries instead.
        let q = vec![vec![vec![0.0, 0.0]; 4]];
        let k = vec![vec![vec![1.0, 1.0]; 4]];
        let v = vec![(0..4).map(|i| vec![i as f64, 0.0]).collect()];
        let rec = attend(&AttentionInput::new(q, k, v).unwrap(), &rope(2)).unwrap();
        let m = rec.map(0, 0).unwrap();
        for (a, b) in m.row(2)[..3].iter().zip([1.0 / 3.0; 3]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(rec.last_row_distribution(0, 0).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let q = vec![vec![vec![0.0, 0.0]; 2]];
        let k = vec![vec![vec![0.0, 0.0]; 3]];
        let v = vec![vec![vec![0.0, 0.0]; 2]];
        assert!(matches!(
            AttentionInput::new(q.clone(), k, v.clone()),
            Err(Error::Shape(_))
        ));
        let bad = vec![vec![vec![f64::NAN, 0.0]; 2]];
        assert!(matches!(
            AttentionInput::new(q.clone(), bad, v.clone()),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            AttentionInput::with_positions(q.clone(), q.clone(), v.clone(), vec![3, 3]),
            Err(Error::Validation(_))
        ));
        let input = AttentionInput::new(q.clone(), q, v).unwrap();
        assert!(matches!(attend(&input, &rope(4)), Err(Error::Shape(_))));
    }

    #[test]
    fn record_index_errors() {
        let input = AttentionInput::new(
            vec![vec![vec![0.0, 1.0]]],
            vec![vec![vec![0.0, 1.0]]],
            vec![vec![vec![0.0, 1.0]]],
        )
        .unwrap();
        let rec = attend(&input, &rope(2)).unwrap();
        assert!(matches!(
            rec.last_row_distribution(1, 0),
            Err(Error::Index { what: "layer", .. })
        ));
        assert!(matches!(
            rec.last_row_distribution(0, 1),
            Err(Error::Index { what: "head", .. })
        ));
    }

    #[test]
    fn huge_logits_stay_finite() {
        let q = vec![vec![vec![100.0, 0.0], vec![100.0, 0.0], vec![-100.0, 0.0]]];
        let k = vec![vec![vec![100.0, 0.0], vec![-100.0, 0.0], vec![100.0, 0.0]]];
        let v = vec![vec![vec![1.0, 0.0]; 3]];
        let rec = attend(&AttentionInput::new(q, k, v).unwrap(), &rope(2)).unwrap();
        assert!(rec.maps[0].weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn ndjson_round_trip() {
        let q = vec![vec![vec![0.1, 0.2], vec![0.3, 0.4]]; 2];
        let rec = attend(
            &AttentionInput::new(q.clone(), q.clone(), q).unwrap(),
            &rope(2),
        )
        .unwrap();
        let mut buf = Vec::new();
        rec.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"layer\":0,\"head\":0,\"n\":2,\"weights\":["));
        let back = AttentionRecord::read_ndjson(&buf[..]).unwrap();
        assert_eq!(back.maps, rec.maps);
        assert!(AttentionRecord::read_ndjson(&b"{\"layer\":0,\"head\":0,\"n\":2,\"weights\":[1]}\n"[..]).is_err());
    }
}

//! Diagnostics over attention dumps and cached KV: score CDFs, cumulative
//! attention over a segment, K-distance rankings, percentile ranks of an
//! image's first token, and normalised attention heatmaps.
//!
//! Every tool is a pure function of its inputs and the CSV writers are
//! deterministic, so identical dumps give byte-identical tables.

mod dump;

use std::fmt::Write as _;

pub use dump::{AttentionDump, LayerScores, SegmentSpan, DUMP_MAGIC, DUMP_VERSION, ROW_SUM_TOLERANCE};

use crate::error::{Error, Result};
use crate::kv::KvTensor;

/// Tokens counted as "top" per layer in [`kv_distance_rank`].
pub const DEFAULT_TOP: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct Cdf {
    /// `(score, fraction of samples <= score)` at each distinct score.
    pub points: Vec<(f32, f64)>,
    pub fraction_above: f64,
    pub samples: usize,
}

impl Cdf {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,cdf\n");
        for (x, f) in &self.points {
            let _ = writeln!(out, "{x:e},{f}");
        }
        out
    }
}

/// Empirical CDF of the first output token's attention to image tokens,
/// over all heads of `layer` (or of every layer).
pub fn attention_cdf(dump: &AttentionDump, threshold: f64, layer: Option<usize>) -> Result<Cdf> {
    let layers = layer_range(dump, layer)?;
    let cols = dump.image_columns();
    let mut samples: Vec<f32> = Vec::new();
    for l in layers {
        for row in &dump.rows[l] {
            samples.extend(cols.iter().map(|&c| row[c]));
        }
    }
    samples.sort_by(f32::total_cmp);
    let n = samples.len();
    let mut points: Vec<(f32, f64)> = Vec::new();
    for (i, &x) in samples.iter().enumerate() {
        if i + 1 == n || samples[i + 1] != x {
            points.push((x, (i + 1) as f64 / n as f64));
        }
    }
    let above = samples.iter().filter(|&&x| x as f64 > threshold).count();
    Ok(Cdf {
        points,
        fraction_above: if n == 0 { 0.0 } else { above as f64 / n as f64 },
        samples: n,
    })
}

/// `[layer][i]`: head-averaged attention mass of the segment's first `i + 1`
/// tokens.
pub fn cumulative_attention(dump: &AttentionDump, segment: usize) -> Result<Vec<Vec<f64>>> {
    let span = dump.segment(segment)?;
    let heads = dump.n_heads() as f64;
    Ok(dump
        .rows
        .iter()
        .map(|layer| {
            let mut acc = 0.0;
            (span.start..span.start + span.len)
                .map(|c| {
                    acc += layer.iter().map(|row| row[c] as f64).sum::<f64>() / heads;
                    acc
                })
                .collect()
        })
        .collect())
}

pub fn series_to_csv(series: &[Vec<f64>]) -> String {
    let mut out = String::from("layer,token,cumulative\n");
    for (l, s) in series.iter().enumerate() {
        for (i, v) in s.iter().enumerate() {
            let _ = writeln!(out, "{l},{i},{v}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenImportance {
    /// Token index within the segment.
    pub index: usize,
    /// Per layer L1 distance between stored and recomputed keys.
    pub distances: Vec<f64>,
    /// Layers where this token is among the `top` largest distances.
    pub layers_in_top: usize,
    pub mean_attention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenImportanceTable {
    pub top: usize,
    /// `[layer]`: token indices by decreasing distance, ties to lowest index.
    pub order: Vec<Vec<usize>>,
    /// Sorted by `layers_in_top` then summed distance (both descending),
    /// then index.
    pub rows: Vec<TokenImportance>,
}

impl TokenImportanceTable {
    /// Adds the mean (over layers and heads) attention each token of the
    /// dump's `segment` received from the first output token.
    pub fn with_attention(mut self, dump: &AttentionDump, segment: usize) -> Result<Self> {
        let span = dump.segment(segment)?;
        if span.len != self.rows.len() {
            return Err(Error::Validation(format!(
                "segment {segment} has {} tokens, table has {}",
                span.len,
                self.rows.len()
            )));
        }
        let count = (dump.n_layers() * dump.n_heads()) as f64;
        for row in &mut self.rows {
            let c = span.start + row.index;
            let total: f64 = dump.rows.iter().flatten().map(|r| r[c] as f64).sum();
            row.mean_attention = Some(total / count);
        }
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let layers = self.order.len();
        let mut out = String::from("token,layers_in_top");
        for l in 0..layers {
            let _ = write!(out, ",k_distance_l{l}");
        }
        out.push_str(",mean_attention\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.index, r.layers_in_top);
            for d in &r.distances {
                let _ = write!(out, ",{d}");
            }
            match r.mean_attention {
                Some(a) => {
                    let _ = writeln!(out, ",{a}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Ranks tokens by how far their stored keys are from recomputed ones.
pub fn kv_distance_rank(stored: &KvTensor, recomputed: &KvTensor, top: usize) -> Result<TokenImportanceTable> {
    if stored.n_layers() != recomputed.n_layers()
        || stored.n_tokens() != recomputed.n_tokens()
        || stored.width() != recomputed.width()
    {
        return Err(Error::Validation("stored and recomputed caches differ in shape".into()));
    }
    let n = stored.n_tokens();
    let mut rows: Vec<TokenImportance> = (0..n)
        .map(|index| TokenImportance {
            index,
            distances: Vec::with_capacity(stored.n_layers()),
            layers_in_top: 0,
            mean_attention: None,
        })
        .collect();
    let mut order = Vec::with_capacity(stored.n_layers());
    for layer in 0..stored.n_layers() {
        for (t, row) in rows.iter_mut().enumerate() {
            let d: f64 = stored
                .key_row(layer, t)
                .iter()
                .zip(recomputed.key_row(layer, t))
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum();
            row.distances.push(d);
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| rows[b].distances[layer].total_cmp(&rows[a].distances[layer]).then(a.cmp(&b)));
        for &t in idx.iter().take(top) {
            rows[t].layers_in_top += 1;
        }
        order.push(idx);
    }
    rows.sort_by(|a, b| {
        let (sa, sb): (f64, f64) = (a.distances.iter().sum(), b.distances.iter().sum());
        b.layers_in_top
            .cmp(&a.layers_in_top)
            .then(sb.total_cmp(&sa))
            .then(a.index.cmp(&b.index))
    });
    Ok(TokenImportanceTable { top, order, rows })
}

/// Percentile of `value` among `all`, counting ties at their mean rank:
/// `100 * (less + (equal - 1) / 2) / (N - 1)`, with `equal` including the
/// value itself. A single sample is at 100.
pub fn percentile_of(value: f32, all: &[f32]) -> f64 {
    let n = all.len();
    if n <= 1 {
        return 100.0;
    }
    let less = all.iter().filter(|&&x| x < value).count() as f64;
    let equal = all.iter().filter(|&&x| x == value).count() as f64;
    100.0 * (less + 0.5 * (equal - 1.0)) / (n - 1) as f64
}

/// Per layer `(mean, population stddev)` across heads of the percentile of
/// the segment's first token among all prompt tokens. Defaults to the first
/// image segment.
pub fn percentile_rank(dump: &AttentionDump, segment: Option<usize>) -> Result<Vec<(f64, f64)>> {
    let segment = match segment {
        Some(s) => s,
        None => dump
            .first_image_segment()
            .ok_or_else(|| Error::Validation("dump has no image segment".into()))?,
    };
    let target = dump.segment(segment)?.start;
    let n = dump.n_prompt();
    Ok(dump
        .rows
        .iter()
        .map(|layer| {
            let p: Vec<f64> = layer.iter().map(|row| percentile_of(row[target], &row[..n])).collect();
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p.len() as f64;
            (mean, var.sqrt())
        })
        .collect())
}

pub fn percentiles_to_csv(p: &[(f64, f64)]) -> String {
    let mut out = String::from("layer,mean_percentile,stddev\n");
    for (l, (m, s)) in p.iter().enumerate() {
        let _ = writeln!(out, "{l},{m},{s}");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub n: usize,
    /// Row-major `n x n`, values in `[0, 1]`, zero above the diagonal.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.n.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Negative scores are dropped, each head is min-max normalised over the
/// causal (lower) triangle, then heads are averaged. A head whose triangle
/// is constant contributes zeros.
pub fn heatmap_export(dump: &AttentionDump) -> Result<Heatmap> {
    let scores = dump
        .scores
        .as_ref()
        .ok_or_else(|| Error::Validation("dump has no score matrix".into()))?;
    let n = scores.n;
    let mut values = vec![0.0f64; n * n];
    for head in &scores.heads {
        let cell = |r: usize, c: usize| (head[r * n + c] as f64).max(0.0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..n {
            for c in 0..=r {
                lo = lo.min(cell(r, c));
                hi = hi.max(cell(r, c));
            }
        }
        if hi > lo {
            for r in 0..n {
                for c in 0..=r {
                    values[r * n + c] += (cell(r, c) - lo) / (hi - lo);
                }
            }
        }
    }
    let heads = scores.heads.len() as f64;
    values.iter_mut().for_each(|v| *v /= heads);
    Ok(Heatmap {
        layer: scores.layer,
        n,
        values,
    })
}

fn layer_range(dump: &AttentionDump, layer: Option<usize>) -> Result<std::ops::Range<usize>> {
    match layer {
        None => Ok(0..dump.n_layers()),
        Some(l) if l < dump.n_layers() => Ok(l..l + 1),
        Some(l) => Err(Error::Validation(format!("dump has {} layers, asked for {l}", dump.n_layers()))),
    }
}

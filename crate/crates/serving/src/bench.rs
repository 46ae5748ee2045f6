//! Measurement harnesses. Offline runs a dataset sequentially in several
//! modes and aggregates prefill latency per image count; online replays a
//! seeded Poisson trace against the worker pool.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::pool::WorkerPool;
use crate::request::{BenchRecord, Mode, Request, SegmentSource};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OfflineRow {
    pub mode: String,
    pub images: usize,
    pub runs: usize,
    pub mean_ttft_s: f64,
    pub median_ttft_s: f64,
    pub median_prefill_s: f64,
    pub mean_tokens_recomputed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Superlinear,
    Linear,
    Sublinear,
}

/// How a mode's median prefill time scales with image count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthVerdict {
    pub mode: String,
    /// Share of the fitted time at the largest image count contributed by
    /// the quadratic term of a least-squares `a + b*n + c*n^2` fit.
    pub curvature: f64,
    pub growth: Growth,
}

/// Curvature shares within this band count as linear.
pub const LINEAR_BAND: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OfflineReport {
    pub rows: Vec<OfflineRow>,
    pub growth: Vec<GrowthVerdict>,
    pub records: Vec<BenchRecord>,
}

impl OfflineReport {
    pub fn row(&self, mode: Mode, images: usize) -> Option<&OfflineRow> {
        let mode = mode.to_string();
        self.rows.iter().find(|r| r.mode == mode && r.images == images)
    }

    pub fn growth_of(&self, mode: Mode) -> Option<&GrowthVerdict> {
        let mode = mode.to_string();
        self.growth.iter().find(|g| g.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,images,runs,mean_ttft_s,median_ttft_s,median_prefill_s,mean_tokens_recomputed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.1}\n",
                r.mode, r.images, r.runs, r.mean_ttft_s, r.median_ttft_s, r.median_prefill_s, r.mean_tokens_recomputed
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { sum / n as f64 }
}

/// Least-squares `[a, b, c]` for `y = a + b*x + c*x^2`; `None` with fewer
/// than three distinct `x`.
pub fn quadratic_fit(points: &[(f64, f64)]) -> Option<[f64; 3]> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return None;
    }
    // Normal equations, solved by Gaussian elimination with partial pivoting.
    let mut m = [[0.0f64; 4]; 3];
    for &(x, y) in points {
        let p = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += p[i] * p[j];
            }
            m[i][3] += p[i] * y;
        }
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        m.swap(col, piv);
        if m[col][col].abs() < 1e-300 {
            return None;
        }
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

pub fn classify_growth(points: &[(f64, f64)]) -> Option<(f64, Growth)> {
    let [a, b, c] = quadratic_fit(points)?;
    let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let fitted = a + b * xmax + c * xmax * xmax;
    if fitted <= 0.0 {
        return None;
    }
    let curvature = c * xmax * xmax / fitted;
    let growth = if curvature > LINEAR_BAND {
        Growth::Superlinear
    } else if curvature < -LINEAR_BAND {
        Growth::Sublinear
    } else {
        Growth::Linear
    };
    Some((curvature, growth))
}

/// Runs every request of `dataset` in every mode, `runs` times, strictly
/// sequentially. Image caches are prepared up front so every mode sees the
/// same warm library.
pub fn run_offline(engine: &Engine, dataset: &[Request], modes: &[Mode], runs: usize) -> Result<OfflineReport> {
    if dataset.is_empty() || modes.is_empty() || runs == 0 {
        return Err(Error::Request("offline bench needs requests, modes and at least one run".into()));
    }
    for req in dataset {
        engine.warm(req)?;
    }
    let mut records = Vec::with_capacity(dataset.len() * modes.len() * runs);
    for run in 0..runs {
        for (i, req) in dataset.iter().enumerate() {
            for &mode in modes {
                let mut r = req.clone();
                r.mode = mode;
                if r.request_id.is_empty() {
                    r.request_id = format!("req{i}");
                }
                r.request_id = format!("{}/{mode}/{run}", r.request_id);
                records.push(engine.handle(&r)?.record);
            }
        }
    }

    let mut groups: BTreeMap<(usize, usize), Vec<&BenchRecord>> = BTreeMap::new();
    for rec in &records {
        let m = modes.iter().position(|m| m.to_string() == rec.mode).expect("mode from the list");
        groups.entry((m, rec.images)).or_default().push(rec);
    }
    let rows: Vec<OfflineRow> = groups
        .into_iter()
        .map(|((m, images), recs)| {
            let ttft: Vec<f64> = recs.iter().map(|r| r.ttft_s).collect();
            let prefill: Vec<f64> = recs.iter().map(|r| r.prefill_s).collect();
            OfflineRow {
                mode: modes[m].to_string(),
                images,
                runs: recs.len(),
                mean_ttft_s: mean(ttft.iter().copied()),
                median_ttft_s: median(&ttft),
                median_prefill_s: median(&prefill),
                mean_tokens_recomputed: mean(recs.iter().map(|r| r.prefill_tokens_recomputed as f64)),
            }
        })
        .collect();
    let growth = modes
        .iter()
        .filter_map(|mode| {
            let name = mode.to_string();
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == name)
                .map(|r| (r.images as f64, r.median_prefill_s))
                .collect();
            classify_growth(&pts).map(|(curvature, growth)| GrowthVerdict {
                mode: name,
                curvature,
                growth,
            })
        })
        .collect();
    Ok(OfflineReport { rows, growth, records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSpec {
    /// Prompts sampled uniformly per arrival.
    pub templates: Vec<Request>,
    /// Overrides the templates' modes.
    pub mode: Mode,
    pub rate: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Prepend a text segment unique to each arrival, so no two prompts
    /// share even their first token.
    pub divergent_prefix: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OnlinePoint {
    pub rate: f64,
    pub requests: usize,
    pub output_tokens: usize,
    pub mean_ttft_s: f64,
    pub median_ttft_s: f64,
    /// Output tokens per second of wall time.
    pub throughput_tok_s: f64,
    /// The trace duration, or until the last completion if that is later.
    pub wall_s: f64,
}

/// Seeded Poisson arrival offsets in `[0, duration)`.
pub fn arrivals(rate: f64, duration_s: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Request(format!("rate must be positive, got {rate}")));
    }
    let gap = Exp::new(rate).map_err(|e| Error::Request(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_s {
            return Ok(out);
        }
        out.push(t);
    }
}

/// Replays `trace` against a pool of `parallelism` workers. `None` when the
/// trace has no arrivals.
pub fn run_online(engine: &Arc<Engine>, trace: &TraceSpec, parallelism: usize) -> Result<Option<OnlinePoint>> {
    if trace.templates.is_empty() {
        return Err(Error::Request("trace has no request templates".into()));
    }
    let times = arrivals(trace.rate, trace.duration_s, trace.seed)?;
    if times.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trace.seed.rotate_left(32));
    let requests: Vec<Request> = times
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut r = trace.templates[rng.gen_range(0..trace.templates.len())].clone();
            r.mode = trace.mode;
            r.request_id = format!("online-{}-{i}", trace.seed);
            if trace.divergent_prefix {
                r.segments.insert(0, SegmentSource::text(format!("#{i:06}:")));
            }
            r
        })
        .collect();

    let pool = WorkerPool::new(engine.clone(), parallelism);
    let start = Instant::now();
    let mut pending = Vec::with_capacity(requests.len());
    for (req, &t) in requests.into_iter().zip(&times) {
        let at = start + Duration::from_secs_f64(t);
        if let Some(wait) = at.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        pending.push(pool.submit_at(req, at));
    }
    let mut records = Vec::with_capacity(pending.len());
    for rx in pending {
        let res = rx.recv().map_err(|_| Error::Request("worker exited".into()))?;
        records.push(res?.record);
    }
    let counted = pool.output_tokens();
    pool.shutdown();
    let wall_s = start.elapsed().as_secs_f64().max(trace.duration_s);

    let output_tokens: usize = records.iter().map(|r| r.output_tokens).sum();
    if output_tokens != counted {
        return Err(Error::Request(format!(
            "token accounting mismatch: records {output_tokens}, harness {counted}"
        )));
    }
    let ttft: Vec<f64> = records.iter().map(|r| r.ttft_s).collect();
    Ok(Some(OnlinePoint {
        rate: trace.rate,
        requests: records.len(),
        output_tokens,
        mean_ttft_s: mean(ttft.iter().copied()),
        median_ttft_s: median(&ttft),
        throughput_tok_s: output_tokens as f64 / wall_s,
        wall_s,
    }))
}

/// One point per rate; each rate gets its own arrival seed.
pub fn run_online_sweep(
    engine: &Arc<Engine>,
    trace: &TraceSpec,
    rates: &[f64],
    parallelism: usize,
) -> Result<Vec<OnlinePoint>> {
    let mut out = Vec::new();
    for (i, &rate) in rates.iter().enumerate() {
        let t = TraceSpec {
            rate,
            seed: trace.seed.wrapping_add(i as u64),
            ..trace.clone()
        };
        out.extend(run_online(engine, &t, parallelism)?);
    }
    Ok(out)
}

/// Requests per second the pool sustains: `parallelism` over the mean
/// sequential service time of `samples` requests drawn like a trace would.
pub fn estimate_capacity(engine: &Engine, trace: &TraceSpec, parallelism: usize, samples: usize) -> Result<f64> {
    if trace.templates.is_empty() || samples == 0 {
        return Err(Error::Request("capacity estimate needs templates and samples".into()));
    }
    for req in &trace.templates {
        engine.warm(req)?;
    }
    let mut total = 0.0;
    for i in 0..samples {
        let mut r = trace.templates[i % trace.templates.len()].clone();
        r.mode = trace.mode;
        if trace.divergent_prefix {
            r.segments.insert(0, SegmentSource::text(format!("@{i:06}:")));
        }
        let t = Instant::now();
        engine.handle(&r)?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(parallelism as f64 * samples as f64 / total)
}

/// Coefficient of variation (population std over mean) of the throughput
/// of the last `last` points.
pub fn plateau_variation(points: &[OnlinePoint], last: usize) -> Option<f64> {
    if last < 2 || points.len() < last {
        return None;
    }
    let tail: Vec<f64> = points[points.len() - last..].iter().map(|p| p.throughput_tok_s).collect();
    let m = mean(tail.iter().copied());
    let var = mean(tail.iter().map(|x| (x - m) * (x - m)));
    Some(var.sqrt() / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_fit_recovers_coefficients() {
        let pts: Vec<(f64, f64)> = (1..=8).map(|x| x as f64).map(|x| (x, 2.0 + 0.5 * x + 0.25 * x * x)).collect();
        let [a, b, c] = quadratic_fit(&pts).unwrap();
        assert!((a - 2.0).abs() < 1e-9 && (b - 0.5).abs() < 1e-9 && (c - 0.25).abs() < 1e-9);
        assert_eq!(classify_growth(&pts).unwrap().1, Growth::Superlinear);
        let lin: Vec<(f64, f64)> = (1..=8).map(|x| (x as f64, 1.0 + x as f64)).collect();
        assert_eq!(classify_growth(&lin).unwrap().1, Growth::Linear);
        let sub: Vec<(f64, f64)> = (1..=8).map(|x| (x as f64, (x as f64).sqrt())).collect();
        assert_eq!(classify_growth(&sub).unwrap().1, Growth::Sublinear);
        assert!(quadratic_fit(&[(1.0, 1.0), (2.0, 2.0)]).is_none());
    }

    #[test]
    fn poisson_arrivals() {
        assert!(arrivals(10.0, 0.0, 1).unwrap().is_empty());
        assert!(arrivals(0.0, 1.0, 1).is_err());
        let a = arrivals(200.0, 50.0, 7).unwrap();
        assert_eq!(a, arrivals(200.0, 50.0, 7).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let rate = a.len() as f64 / 50.0;
        assert!((rate - 200.0).abs() < 10.0, "{rate}");
    }

    #[test]
    fn median_and_variation() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let p = |t| OnlinePoint {
            rate: 1.0,
            requests: 1,
            output_tokens: 1,
            mean_ttft_s: 0.0,
            median_ttft_s: 0.0,
            throughput_tok_s: t,
            wall_s: 1.0,
        };
        let v = plateau_variation(&[p(1.0), p(9.0), p(11.0), p(10.0)], 3).unwrap();
        assert!((v - (2.0f64 / 3.0).sqrt() / 10.0).abs() < 1e-12);
        assert!(plateau_variation(&[p(1.0)], 3).is_none());
    }
}

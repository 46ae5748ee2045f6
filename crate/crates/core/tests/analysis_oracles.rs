mod common;

use common::{random_tokens, small_model};
use mpic_core::analysis::{
    attention_cdf, cumulative_attention, heatmap_export, kv_distance_rank, percentile_rank, AttentionDump,
    LayerScores, SegmentSpan,
};
use mpic_core::linker::{Segment, SegmentedPrompt};
use mpic_core::store::CacheKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rows are integer partitions of 4096 scaled by 1/4096, so they sum to one
/// exactly in f32 and ties are common.
fn random_dump(rng: &mut ChaCha8Rng) -> AttentionDump {
    let mut segments = Vec::new();
    let mut start = 0;
    for _ in 0..rng.gen_range(1..5) {
        let len = rng.gen_range(1..12);
        segments.push(SegmentSpan {
            image: rng.gen_bool(0.6),
            start,
            len,
        });
        start += len;
    }
    let cols = start + 1;
    let (layers, heads) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let rows = (0..layers)
        .map(|_| (0..heads).map(|_| partition(rng, cols)).collect())
        .collect();
    let scores = rng.gen_bool(0.5).then(|| LayerScores {
        layer: 0,
        n: start,
        heads: (0..heads)
            .map(|_| {
                let mut m = vec![0.0f32; start * start];
                for r in 0..start {
                    for c in 0..=r {
                        m[r * start + c] = rng.gen_range(-4..6) as f32 * 0.5;
                    }
                }
                m
            })
            .collect(),
    });
    AttentionDump::new(rng.gen(), segments, rows, scores).unwrap()
}

fn partition(rng: &mut ChaCha8Rng, cols: usize) -> Vec<f32> {
    let mut w: Vec<u32> = (0..cols).map(|_| rng.gen_range(0..4) * 64).collect();
    let total: u32 = w[..cols - 1].iter().sum();
    if total > 4096 {
        w.iter_mut().for_each(|x| *x = 0);
        w[0] = 4096;
    } else {
        w[cols - 1] = 4096 - total;
    }
    w.into_iter().map(|x| x as f32 / 4096.0).collect()
}

#[test]
fn cdf_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let d = random_dump(&mut rng);
        let threshold = rng.gen_range(0.0..0.3);
        let cdf = attention_cdf(&d, threshold, None).unwrap();
        let mut raw = Vec::new();
        for c in d.image_columns() {
            for layer in &d.rows {
                for row in layer {
                    raw.push(row[c]);
                }
            }
        }
        raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut distinct = raw.clone();
        distinct.dedup();
        assert_eq!(cdf.samples, raw.len());
        assert_eq!(cdf.points.len(), distinct.len());
        for ((x, f), want) in cdf.points.iter().zip(&distinct) {
            assert_eq!(x, want);
            let le = raw.iter().filter(|v| *v <= want).count();
            assert_eq!(*f, le as f64 / raw.len() as f64);
        }
        let above = raw.iter().filter(|&&v| v as f64 > threshold).count();
        let want = if raw.is_empty() { 0.0 } else { above as f64 / raw.len() as f64 };
        assert_eq!(cdf.fraction_above, want);
    }
}

#[test]
fn cumulative_matches_prefix_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let d = random_dump(&mut rng);
        let seg = rng.gen_range(0..d.segments.len());
        let span = d.segments[seg];
        let series = cumulative_attention(&d, seg).unwrap();
        for (layer, s) in d.rows.iter().zip(&series) {
            assert_eq!(s.len(), span.len);
            for i in 0..span.len {
                let mut want = 0.0;
                for j in 0..=i {
                    let mean: f64 = layer.iter().map(|r| r[span.start + j] as f64).sum::<f64>() / layer.len() as f64;
                    want += mean;
                }
                assert!((s[i] - want).abs() <= 1e-12);
                if i > 0 {
                    assert!(s[i] >= s[i - 1]);
                }
            }
        }
    }
}

#[test]
fn percentile_matches_ranking_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..100 {
        let d = random_dump(&mut rng);
        let seg = rng.gen_range(0..d.segments.len());
        let target = d.segments[seg].start;
        let n = d.n_prompt();
        let got = percentile_rank(&d, Some(seg)).unwrap();
        for (layer, (mean, std)) in d.rows.iter().zip(got) {
            let ps: Vec<f64> = layer
                .iter()
                .map(|row| {
                    let mut sorted: Vec<f32> = row[..n].to_vec();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let positions: Vec<usize> = (0..n).filter(|&i| sorted[i] == row[target]).collect();
                    let mean_pos = positions.iter().sum::<usize>() as f64 / positions.len() as f64;
                    if n == 1 {
                        100.0
                    } else {
                        100.0 * mean_pos / (n - 1) as f64
                    }
                })
                .collect();
            let m = ps.iter().sum::<f64>() / ps.len() as f64;
            let s = (ps.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / ps.len() as f64).sqrt();
            assert!((mean - m).abs() <= 1e-9 && (std - s).abs() <= 1e-9);
            assert!((0.0..=100.0).contains(&mean));
        }
    }
}

#[test]
fn heatmap_is_causal_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut checked = 0;
    while checked < 100 {
        let d = random_dump(&mut rng);
        let Some(scores) = &d.scores else { continue };
        let h = heatmap_export(&d).unwrap();
        let n = scores.n;
        for r in 0..n {
            for c in 0..n {
                let v = h.get(r, c);
                if c > r {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        checked += 1;
    }
}

#[test]
fn kv_distance_matches_elementwise_l1() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let tokens = random_tokens(&mut rng, 64, 20);
    let (stored, _) = m.prefill_at(&tokens, 0).unwrap();
    let (moved, _) = m.prefill_at(&tokens, 4).unwrap();
    let table = kv_distance_rank(&stored, &moved, 5).unwrap();
    let mut in_top = vec![0usize; 20];
    for layer in 0..stored.n_layers() {
        let dist: Vec<f64> = (0..20)
            .map(|t| {
                let (a, b) = (stored.key_row(layer, t), moved.key_row(layer, t));
                let mut s = 0.0;
                for i in 0..a.len() {
                    s += (a[i] as f64 - b[i] as f64).abs();
                }
                s
            })
            .collect();
        for t in 0..20 {
            let row = table.rows.iter().find(|r| r.index == t).unwrap();
            assert_eq!(row.distances[layer], dist[t]);
            let rank = (0..20)
                .filter(|&u| dist[u] > dist[t] || (dist[u] == dist[t] && u < t))
                .count();
            assert_eq!(table.order[layer][rank], t);
            in_top[t] += usize::from(rank < 5);
        }
    }
    for r in &table.rows {
        assert_eq!(r.layers_in_top, in_top[r.index]);
    }
    let same = kv_distance_rank(&stored, &stored, 5).unwrap();
    assert!(same.rows.iter().all(|r| r.distances.iter().all(|&d| d == 0.0)));
}

#[test]
fn captured_dump_is_valid_and_round_trips() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let img = random_tokens(&mut rng, 64, 10);
    let p = SegmentedPrompt::new(
        "u",
        vec![
            Segment::Text(random_tokens(&mut rng, 64, 3)),
            Segment::Image {
                key: CacheKey::for_tokens(&img, m.fingerprint(), "u"),
                tokens: img,
            },
            Segment::Text(random_tokens(&mut rng, 64, 4)),
        ],
    )
    .unwrap();
    let d = AttentionDump::capture(&m, &p, Some(1)).unwrap();
    assert_eq!(d.n_layers(), 2);
    assert_eq!(d.rows[0][0].len(), p.len() + 1);
    for row in d.rows.iter().flatten() {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
    let bytes = d.to_bytes().unwrap();
    assert_eq!(AttentionDump::from_bytes(&bytes).unwrap(), d);
    assert_eq!(d.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[30] ^= 1;
    assert!(AttentionDump::from_bytes(&bad).is_err());
    assert!(AttentionDump::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    // the CDF over a real dump is the sorted image-column scores
    let cdf = attention_cdf(&d, 1e-3, Some(0)).unwrap();
    assert_eq!(cdf.samples, 10 * 2);
    let h = heatmap_export(&d).unwrap();
    assert_eq!(h.n, p.len());
}

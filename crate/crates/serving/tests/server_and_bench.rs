mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;

use common::{image, mixed, request, small_config};
use mpic_serving::bench::{self, TraceSpec};
use mpic_serving::request::{Mode, SegmentSource};
use mpic_serving::{server, workload, Engine};

#[test]
fn socket_round_trip_matches_local_handling() {
    let mut config = small_config();
    config.serving.parallelism = 2;
    let engine = Arc::new(Engine::new(config).unwrap());
    let ids: Vec<String> = (0..2).map(|i| engine.put_image("alice", image(i)).unwrap()).collect();
    let handle = server::spawn(engine.clone(), "127.0.0.1:0").unwrap();
    let addr = handle.local_addr();

    let req = request("alice", Mode::Mpic(Some(3)), mixed(&ids), 4);
    let remote = server::send(addr, &req).unwrap();
    let local = engine.handle(&req).unwrap();
    assert_eq!(remote.output_ids, local.output_ids);
    assert_eq!(remote.text, local.text);
    assert_eq!(remote.prepare, local.prepare);

    let missing = request("alice", Mode::NoCache, vec![SegmentSource::cached("ab".repeat(32))], 1);
    let err = server::send(addr, &missing).unwrap_err().to_string();
    assert!(err.contains("not in alice's library"), "{err}");

    // Several requests on one connection, answered in order.
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut lines = String::new();
    for n in 1..=3 {
        lines.push_str(&serde_json::to_string(&request("alice", Mode::NoCache, mixed(&ids), n)).unwrap());
        lines.push('\n');
    }
    lines.push_str("not json\n");
    stream.write_all(lines.as_bytes()).unwrap();
    let mut reader = BufReader::new(stream);
    for n in 1..=3 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["output_ids"].as_array().unwrap().len(), n);
    }
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("malformed request"));
    handle.stop();
}

#[test]
fn offline_bench_emits_one_row_per_mode() {
    let engine = Engine::new(small_config()).unwrap();
    let ids = workload::install_images(&engine, "bench", 1, 3).unwrap();
    let dataset = workload::image_count_sweep("bench", &ids, 1, 8, 2, 3);
    let modes = [Mode::Mpic(Some(32)), Mode::CacheBlend(Some(15.0)), Mode::Prefix, Mode::FullReuse, Mode::NoCache];
    let report = bench::run_offline(&engine, &dataset, &modes, 2).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert!(report.rows.iter().all(|r| r.runs == 2 && r.images == 1));
    assert_eq!(report.records.len(), 10);
    // No image-count spread, no growth verdict.
    assert!(report.growth.is_empty());
    assert_eq!(report.to_csv().lines().count(), 6);
    assert!(bench::run_offline(&engine, &[], &modes, 1).is_err());
}

#[test]
fn offline_bench_groups_by_image_count() {
    let engine = Engine::new(small_config()).unwrap();
    let ids = workload::install_images(&engine, "bench", 4, 3).unwrap();
    let dataset = workload::image_count_sweep("bench", &ids, 4, 8, 1, 3);
    let report = bench::run_offline(&engine, &dataset, &[Mode::NoCache, Mode::Mpic(Some(2))], 1).unwrap();
    let images: Vec<usize> = report.rows.iter().map(|r| r.images).collect();
    assert_eq!(images, vec![1, 2, 3, 4, 1, 2, 3, 4]);
    assert_eq!(report.growth.len(), 2);
    let n = small_config().model.image_token_count;
    let nocache = report.row(Mode::NoCache, 3).unwrap();
    assert_eq!(nocache.mean_tokens_recomputed, (3 * n + 8) as f64);
    assert_eq!(report.row(Mode::Mpic(Some(2)), 3).unwrap().mean_tokens_recomputed, (3 * 2 + 8) as f64);
}

#[test]
fn online_bench_accounting() {
    let engine = Arc::new(Engine::new(small_config()).unwrap());
    let ids = workload::install_images(&engine, "bench", 2, 5).unwrap();
    let templates = workload::image_count_sweep("bench", &ids, 2, 6, 3, 5);
    let mut trace = TraceSpec {
        templates,
        mode: Mode::Mpic(Some(4)),
        rate: 50.0,
        duration_s: 0.0,
        seed: 1,
        divergent_prefix: true,
    };
    assert!(bench::run_online(&engine, &trace, 1).unwrap().is_none());
    assert!(bench::run_online_sweep(&engine, &trace, &[10.0, 20.0], 1).unwrap().is_empty());

    trace.duration_s = 0.5;
    let point = bench::run_online(&engine, &trace, 2).unwrap().unwrap();
    assert_eq!(point.requests, bench::arrivals(50.0, 0.5, 1).unwrap().len());
    assert_eq!(point.output_tokens, 3 * point.requests);
    assert!(point.wall_s >= 0.5);
    assert!((point.throughput_tok_s - point.output_tokens as f64 / point.wall_s).abs() < 1e-9);
    assert!(bench::estimate_capacity(&engine, &trace, 1, 4).unwrap() > 0.0);
}

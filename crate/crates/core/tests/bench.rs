use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use parcelport_lab::bench::{
    aggregate_runs, append_csv, run_loopback_duo, run_rank, BenchParams, Mode, RunOptions, TraceSpec,
};
use parcelport_lab::parcelport::{Network, VariantConfig};

fn quick(mut p: BenchParams) -> BenchParams {
    p.iterations = 2;
    p.warmup = 1;
    p.timeout = Duration::from_secs(60);
    p
}

#[test]
fn flood_conserves_parcels_and_costs_one_frame_each() {
    let cfg = VariantConfig::base();
    let p = quick(BenchParams::flood(10_000, 8, 1));
    let [r0, r1] = run_loopback_duo(&cfg, Mode::Flood, &p, &TraceSpec::default(), &RunOptions::default()).unwrap();
    assert_eq!(r0.results.len(), 2);
    assert!(r0.results.iter().all(|r| r.parcels == 10_000 && r.rate_per_s() > 0.0));
    assert_eq!(r1.flood_received, 30_000);
    // every flood parcel plus the shutdown notice
    assert_eq!(r0.counters.frames_sent(), 30_000 + 1);
    assert_eq!(r0.stats.completed, 30_001);
    // one acknowledgement per iteration
    assert_eq!(r1.stats.completed, 3);
}

#[test]
fn flood_of_16_kib_parcels_costs_two_frames_each() {
    let cfg = VariantConfig {
        zc_threshold: 8192,
        ..VariantConfig::base()
    };
    let p = quick(BenchParams::flood(500, 16 * 1024, 2));
    let [r0, r1] = run_loopback_duo(&cfg, Mode::Flood, &p, &TraceSpec::default(), &RunOptions::default()).unwrap();
    assert_eq!(r1.flood_received, 1500);
    assert_eq!(r0.counters.frames_sent(), 2 * 1500 + 1);
    assert_eq!((r0.counters.headers_sent(), r0.counters.followup_sent), (1501, 1500));
}

#[test]
fn pingpong_hops_and_latency() {
    for name in ["lci", "block", "try_progress"] {
        let cfg = VariantConfig::preset(name).unwrap();
        let p = quick(BenchParams::pingpong(64, 9, 8, 2));
        let [r0, r1] =
            run_loopback_duo(&cfg, Mode::Pingpong, &p, &TraceSpec::default(), &RunOptions::default()).unwrap();
        assert_eq!(r0.hops + r1.hops, 3 * 64 * 9, "{name}");
        for r in &r0.results {
            assert_eq!(r.parcels, 64 * 9);
            assert_eq!(r.latency().unwrap(), r.elapsed / 9);
        }
        let s = aggregate_runs(&r0.results).unwrap();
        assert!(s.latency_us.unwrap().mean > 0.0);
    }
}

#[test]
fn single_long_chain() {
    let p = quick(BenchParams::pingpong(1, 1000, 8, 1));
    let [r0, r1] = run_loopback_duo(
        &VariantConfig::base(),
        Mode::Pingpong,
        &p,
        &TraceSpec::default(),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(r0.hops + r1.hops, 3000);
    assert_eq!(r0.results[0].latency(), Some(r0.results[0].elapsed / 1000));
}

#[test]
fn trace_delivers_exactly_what_was_sent() {
    let trace = TraceSpec {
        parcels: 300,
        large: (64 * 1024, 256 * 1024),
        weights: (0.9, 0.1),
        seed: 11,
        ..TraceSpec::default()
    };
    let p = quick(BenchParams::flood(1, 1, 2));
    let opts = RunOptions {
        record_digests: true,
        ..Default::default()
    };
    for name in ["lci", "block_d2", "queue_ms"] {
        let cfg = VariantConfig::preset(name).unwrap();
        let [mut r0, mut r1] = run_loopback_duo(&cfg, Mode::Trace, &p, &trace, &opts).unwrap();
        assert_eq!(r0.trace_received, 900);
        assert_eq!(r1.trace_received, 900);
        for v in [
            &mut r0.sent_digests,
            &mut r0.received_digests,
            &mut r1.sent_digests,
            &mut r1.received_digests,
        ] {
            v.sort();
        }
        assert_eq!(r0.sent_digests, r1.received_digests, "{name}");
        assert_eq!(r1.sent_digests, r0.received_digests, "{name}");
        let own: u64 = trace.sizes(0).iter().map(|&s| s as u64).sum();
        let peer: u64 = trace.sizes(1).iter().map(|&s| s as u64).sum();
        assert!(r0.results.iter().all(|r| r.bytes == own + peer && r.parcels == 600));
    }
}

#[test]
fn small_only_trace_is_a_small_message_exchange() {
    let trace = TraceSpec {
        parcels: 200,
        weights: (1.0, 0.0),
        ..TraceSpec::default()
    };
    let p = quick(BenchParams::flood(1, 1, 1));
    let [r0, _] =
        run_loopback_duo(&VariantConfig::base(), Mode::Trace, &p, &trace, &RunOptions::default()).unwrap();
    // no zero-copy chunks; only the few parcels whose nonzero-copy chunk
    // outgrows the piggyback threshold need a follow-up
    let cfg = VariantConfig::base();
    let oversized = trace.sizes(0).iter().filter(|&&s| 16 + 4 + s > cfg.piggyback_threshold).count() as u64;
    assert_eq!(r0.counters.followup_sent, 3 * oversized);
}

#[test]
fn results_append_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.csv");
    let p = BenchParams {
        iterations: 5,
        warmup: 0,
        ..BenchParams::flood(200, 8, 1)
    };
    let [r0, _] =
        run_loopback_duo(&VariantConfig::base(), Mode::Flood, &p, &TraceSpec::default(), &RunOptions::default())
            .unwrap();
    append_csv(&path, &r0.results).unwrap();
    let rows = csv::Reader::from_path(&path).unwrap().records().count();
    assert_eq!(rows, 5);
    assert_eq!(aggregate_runs(&r0.results).unwrap().runs, 5);
}

#[test]
fn ranks_over_tcp() {
    let cfg = VariantConfig::base();
    let listeners: Vec<TcpListener> = (0..2).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let mut endpoints: Vec<_> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    // rank 1 only connects, so its addresses are never bound
    endpoints.extend(endpoints.clone());
    let p = quick(BenchParams::pingpong(8, 20, 8, 2));
    let spawn = |rank: u32, listeners: Vec<TcpListener>| {
        let (cfg, p, endpoints) = (cfg.clone(), p.clone(), endpoints.clone());
        thread::spawn(move || {
            let net = Network::Tcp {
                endpoints,
                listeners,
                connect_timeout: Duration::from_secs(10),
            };
            run_rank(&cfg, Mode::Pingpong, &p, &TraceSpec::default(), rank, net, &RunOptions::default())
        })
    };
    let a = spawn(0, listeners);
    let b = spawn(1, Vec::new());
    let (r0, r1) = (a.join().unwrap().unwrap(), b.join().unwrap().unwrap());
    assert_eq!(r0.hops + r1.hops, 3 * 8 * 20);
    assert_eq!(r0.results.len(), 2);
}

#[test]
fn invalid_parameters_are_rejected() {
    let p = BenchParams::flood(0, 8, 1);
    assert!(run_loopback_duo(&VariantConfig::base(), Mode::Flood, &p, &TraceSpec::default(), &RunOptions::default())
        .is_err());
}

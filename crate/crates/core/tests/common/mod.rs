#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use parcelport_lab::parcel::{build_parcel, parcel_digest, Parcel};
use parcelport_lab::parcelport::{Network, OnComplete, ParcelHandler, Parcelport, VariantConfig};
use parcelport_lab::transport::LoopbackFabric;

#[derive(Default)]
pub struct Recorder {
    pub delivered: Mutex<Vec<(u32, u64)>>,
    pub parcels: Mutex<Vec<Parcel>>,
    pub allocations: AtomicUsize,
    pub keep_parcels: bool,
}

impl ParcelHandler for Recorder {
    fn handle_parcel(&self, source: u32, parcel: Parcel) {
        self.delivered.lock().push((source, parcel_digest(&parcel)));
        if self.keep_parcels {
            self.parcels.lock().push(parcel);
        }
    }

    fn allocate_zc_chunks(&self, _source: u32, _nzc: &[u8], zc_sizes: &[u64]) -> Vec<Vec<u8>> {
        self.allocations.fetch_add(1, Ordering::Relaxed);
        zc_sizes.iter().map(|&n| vec![0u8; n as usize]).collect()
    }
}

impl Recorder {
    pub fn count(&self) -> usize {
        self.delivered.lock().len()
    }
}

pub struct World {
    pub ports: Vec<Arc<Parcelport>>,
    pub recorders: Vec<Arc<Recorder>>,
    pub threads: usize,
}

pub fn loopback_world(cfg: &VariantConfig, ranks: u32, threads: usize) -> World {
    loopback_world_with(cfg, ranks, threads, true)
}

/// `keep_parcels = false` records digests only.
pub fn loopback_world_with(cfg: &VariantConfig, ranks: u32, threads: usize, keep_parcels: bool) -> World {
    let fabric = LoopbackFabric::new(ranks, cfg.num_devices);
    let mut ports = Vec::new();
    let mut recorders = Vec::new();
    for rank in 0..ranks {
        let rec = Arc::new(Recorder {
            keep_parcels,
            ..Default::default()
        });
        let pp = Parcelport::new(cfg.clone(), rec.clone(), rank, ranks, threads, Network::Loopback(fabric.clone()))
            .expect("parcelport");
        ports.push(Arc::new(pp));
        recorders.push(rec);
    }
    World {
        ports,
        recorders,
        threads,
    }
}

impl World {
    /// One background_work call per (rank, thread); returns whether any advanced.
    pub fn sweep(&self) -> bool {
        let mut any = false;
        for pp in &self.ports {
            for t in 0..self.threads {
                any |= pp.background_work(t).expect("background_work");
            }
        }
        any
    }

    pub fn pump_until(&self, cond: impl Fn() -> bool, limit: Duration) -> bool {
        let start = Instant::now();
        while !cond() {
            if start.elapsed() > limit {
                return false;
            }
            self.sweep();
        }
        true
    }

    pub fn quiescent(&self) -> bool {
        self.ports.iter().all(|p| p.backlog().is_empty())
    }
}

pub struct Completions(pub Arc<Mutex<Vec<Result<(), String>>>>);

impl Completions {
    pub fn new() -> Self {
        Completions(Arc::new(Mutex::new(Vec::new())))
    }

    pub fn callback(&self) -> OnComplete {
        let log = self.0.clone();
        Box::new(move |r| log.lock().push(r.map_err(|e| e.to_string())))
    }

    pub fn ok_count(&self) -> usize {
        self.0.lock().iter().filter(|r| r.is_ok()).count()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }
}

/// A parcel whose argument sizes are drawn from `0..=max_arg` with up to
/// `max_zc` large arguments.
pub fn random_parcel(rng: &mut ChaCha8Rng, zc_threshold: usize, max_arg: usize, max_zc: usize) -> Parcel {
    let mut args = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let len = rng.gen_range(0..=zc_threshold.min(max_arg));
        args.push(random_bytes(rng, len));
    }
    for _ in 0..rng.gen_range(0..=max_zc) {
        if max_arg <= zc_threshold {
            break;
        }
        let len = rng.gen_range(zc_threshold + 1..=max_arg);
        args.push(random_bytes(rng, len));
    }
    build_parcel(rng.gen(), &args, zc_threshold).expect("parcel")
}

pub fn random_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

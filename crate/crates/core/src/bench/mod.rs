//! Worker-thread runtime and microbenchmarks.
//!
//! A chain is a sequence of `nsteps + 1` tasks alternating between two
//! ranks, each task sending one `msg_size` parcel that triggers the next.
//! With many chains of one step the sender floods the receiver (message
//! rate); with few long chains the ranks ping-pong (latency). The trace mode
//! has both ranks send a seeded mix of small and occasional large parcels.

mod drivers;
mod runtime;

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::parcelport::ParcelportError;

pub use drivers::{run_loopback_duo, run_rank, RankOutcome, RunOptions};
pub use runtime::{worker_loop, Node, NodeOptions, Task, TaskSource, Worker};

/// Wall-clock limit of one run.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// Parcels a rank keeps in flight at most in flood and trace mode.
pub const DEFAULT_WINDOW: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Flood,
    Pingpong,
    Trace,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Flood => "flood",
            Mode::Pingpong => "pingpong",
            Mode::Trace => "trace",
        })
    }
}

impl FromStr for Mode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flood" => Ok(Mode::Flood),
            "pingpong" | "ping-pong" => Ok(Mode::Pingpong),
            "trace" => Ok(Mode::Trace),
            _ => Err(BenchError::InvalidParams(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("invalid benchmark parameters: {0}")]
    InvalidParams(String),
    #[error("run timed out after {after:?} waiting for {what}")]
    Timeout { what: String, after: Duration },
    #[error(transparent)]
    Parcelport(#[from] ParcelportError),
    #[error("cannot aggregate zero runs")]
    NoRuns,
    #[error("cannot aggregate runs of different modes ({0} and {1})")]
    MixedModes(Mode, Mode),
    #[error("cannot aggregate runs of different variants or parameters")]
    MixedParams,
    #[error("csv: {0}")]
    Csv(String),
    #[error("peer process failed: {0}")]
    Peer(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchParams {
    pub nchains: u64,
    pub nsteps: u64,
    pub msg_size: usize,
    pub threads: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub timeout: Duration,
    pub window: usize,
}

impl BenchParams {
    pub fn flood(nchains: u64, msg_size: usize, threads: usize) -> Self {
        BenchParams {
            nchains,
            nsteps: 1,
            msg_size,
            threads,
            iterations: 5,
            warmup: 1,
            timeout: DEFAULT_TIMEOUT,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn pingpong(nchains: u64, nsteps: u64, msg_size: usize, threads: usize) -> Self {
        BenchParams {
            nsteps,
            ..Self::flood(nchains, msg_size, threads)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |what: &str| Err(BenchError::InvalidParams(format!("{what} must be at least 1")));
        match () {
            _ if self.nchains == 0 => bad("nchains"),
            _ if self.nsteps == 0 => bad("nsteps"),
            _ if self.msg_size == 0 => bad("msg_size"),
            _ if self.threads == 0 => bad("threads"),
            _ if self.iterations == 0 => bad("iterations"),
            _ if self.window == 0 => bad("window"),
            _ if self.nsteps > u32::MAX as u64 || self.nchains > u32::MAX as u64 => Err(BenchError::InvalidParams(
                "nchains and nsteps must fit in 32 bits".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Synthetic mixed-size workload: mostly small parcels with occasional
/// large ones. The default mixture is an approximation, not a measured
/// application profile.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSpec {
    /// Parcels each rank sends per run.
    pub parcels: u64,
    pub small: (usize, usize),
    pub large: (usize, usize),
    pub weights: (f64, f64),
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            parcels: 10_000,
            small: (64, 4096),
            large: (64 * 1024, 1 << 20),
            weights: (0.95, 0.05),
            seed: 1,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidParams(m.into()));
        if self.parcels == 0 {
            return bad("trace needs at least one parcel");
        }
        if self.small.0 == 0 || self.small.0 > self.small.1 || self.large.0 == 0 || self.large.0 > self.large.1 {
            return bad("trace size ranges must be non-empty and start at 1 byte or more");
        }
        if !(self.weights.0 >= 0.0 && self.weights.1 >= 0.0 && self.weights.0 + self.weights.1 > 0.0) {
            return bad("trace weights must be non-negative and not both zero");
        }
        Ok(())
    }

    /// Parcel sizes sent by `rank`; a pure function of the seed and rank.
    pub fn sizes(&self, rank: u32) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let pick = WeightedIndex::new([self.weights.0, self.weights.1]).expect("validated weights");
        (0..self.parcels)
            .map(|_| {
                let (lo, hi) = if pick.sample(&mut rng) == 0 { self.small } else { self.large };
                rng.gen_range(lo..=hi)
            })
            .collect()
    }
}

/// One measured iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub variant: String,
    pub params: BenchParams,
    pub devices: usize,
    pub run_index: usize,
    pub parcels: u64,
    pub elapsed: Duration,
    /// Payload bytes delivered in both directions (trace mode).
    pub bytes: u64,
    /// Unexpected arrivals counted by the transport on the measuring rank.
    pub unexpected: u64,
}

impl RunResult {
    pub fn rate_per_s(&self) -> f64 {
        self.parcels as f64 / self.elapsed.as_secs_f64()
    }

    /// Mean one-way hop latency; ping-pong only.
    pub fn latency(&self) -> Option<Duration> {
        (self.mode == Mode::Pingpong).then(|| self.elapsed / self.params.nsteps as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub stddev: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stddev = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, stddev }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mode: Mode,
    pub variant: String,
    pub runs: usize,
    pub rate_per_s: Stat,
    pub elapsed_s: Stat,
    pub latency_us: Option<Stat>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {:<8} runs={} rate={:.0}/s ±{:.0}",
            self.variant, self.mode, self.runs, self.rate_per_s.mean, self.rate_per_s.stddev
        )?;
        if let Some(l) = self.latency_us {
            write!(f, " latency={:.2}us ±{:.2}", l.mean, l.stddev)?;
        }
        Ok(())
    }
}

pub fn aggregate_runs(results: &[RunResult]) -> Result<Summary, BenchError> {
    let first = results.first().ok_or(BenchError::NoRuns)?;
    for r in results {
        if r.mode != first.mode {
            return Err(BenchError::MixedModes(first.mode, r.mode));
        }
        if r.variant != first.variant || r.params != first.params || r.devices != first.devices {
            return Err(BenchError::MixedParams);
        }
    }
    let rates: Vec<f64> = results.iter().map(RunResult::rate_per_s).collect();
    let elapsed: Vec<f64> = results.iter().map(|r| r.elapsed.as_secs_f64()).collect();
    let latency: Option<Vec<f64>> = results
        .iter()
        .map(|r| r.latency().map(|l| l.as_secs_f64() * 1e6))
        .collect();
    Ok(Summary {
        mode: first.mode,
        variant: first.variant.clone(),
        runs: results.len(),
        rate_per_s: Stat::of(&rates),
        elapsed_s: Stat::of(&elapsed),
        latency_us: latency.map(|l| Stat::of(&l)),
    })
}

pub const CSV_COLUMNS: [&str; 14] = [
    "timestamp",
    "mode",
    "variant",
    "nchains",
    "nsteps",
    "msg_size",
    "threads",
    "devices",
    "run_index",
    "parcels",
    "elapsed_s",
    "rate_per_s",
    "latency_us",
    "unexpected_count",
];

/// Appends one row per result, writing the column header if the file is new or empty.
pub fn append_csv(path: &Path, results: &[RunResult]) -> Result<(), BenchError> {
    let csv_err = |e: &dyn fmt::Display| BenchError::Csv(format!("{}: {e}", path.display()));
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| csv_err(&e))?;
    let empty = file.metadata().map_err(|e| csv_err(&e))?.len() == 0;
    let mut w = csv::Writer::from_writer(file);
    if empty {
        w.write_record(CSV_COLUMNS).map_err(|e| csv_err(&e))?;
    }
    let now = chrono::Utc::now().to_rfc3339();
    for r in results {
        w.write_record([
            now.clone(),
            r.mode.to_string(),
            r.variant.clone(),
            r.params.nchains.to_string(),
            r.params.nsteps.to_string(),
            r.params.msg_size.to_string(),
            r.params.threads.to_string(),
            r.devices.to_string(),
            r.run_index.to_string(),
            r.parcels.to_string(),
            format!("{:.6}", r.elapsed.as_secs_f64()),
            format!("{:.3}", r.rate_per_s()),
            r.latency()
                .map(|l| format!("{:.3}", l.as_secs_f64() * 1e6))
                .unwrap_or_default(),
            r.unexpected.to_string(),
        ])
        .map_err(|e| csv_err(&e))?;
    }
    w.flush().map_err(|e| csv_err(&e))
}

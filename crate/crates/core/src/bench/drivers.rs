use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::runtime::{Node, NodeOptions, TaskSource, Worker};
use super::{BenchError, BenchParams, Mode, RunResult, TraceSpec};
use crate::parcel::{build_parcel, parcel_digest, Parcel};
use crate::parcelport::{Network, ParcelHandler, ParcelportStats, VariantConfig};
use crate::transport::{CounterSnapshot, LoopbackFabric};

const ACT_FLOOD: u64 = 0x100;
const ACT_FLOOD_ACK: u64 = 0x101;
const ACT_HOP: u64 = 0x200;
const ACT_CHAIN_DONE: u64 = 0x201;
const ACT_TRACE: u64 = 0x300;
const ACT_TRACE_START: u64 = 0x301;
const ACT_TRACE_END: u64 = 0x302;
const ACT_SHUTDOWN: u64 = 0x3FF;

/// How long the serving rank waits for the driver beyond the run budget.
const SERVE_SLACK: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub pin: bool,
    /// Keep digests of every sent and delivered benchmark parcel.
    pub record_digests: bool,
}

/// What one rank observed over a whole benchmark invocation.
#[derive(Clone, Debug, Default)]
pub struct RankOutcome {
    pub rank: u32,
    /// Measured iterations; only rank 0 measures.
    pub results: Vec<RunResult>,
    pub stats: ParcelportStats,
    pub counters: CounterSnapshot,
    pub flood_received: u64,
    pub hops: u64,
    pub trace_received: u64,
    pub sent_digests: Vec<u64>,
    pub received_digests: Vec<u64>,
}

struct BenchState {
    rank: u32,
    peer: u32,
    mode: Mode,
    params: BenchParams,
    zc_threshold: usize,
    trace: TraceSpec,
    trace_sizes: Vec<usize>,
    payload: Vec<u8>,
    source: Arc<TaskSource>,
    epoch: Instant,
    flood_recv: AtomicU64,
    acks: AtomicU64,
    ack_ns: AtomicU64,
    hops: AtomicU64,
    chains_done: AtomicU64,
    chains_done_ns: AtomicU64,
    trace_recv: AtomicU64,
    trace_recv_bytes: AtomicU64,
    trace_recv_ns: AtomicU64,
    trace_ends: AtomicU64,
    trace_end_ns: AtomicU64,
    shutdown: AtomicBool,
    shutdown_sent: AtomicBool,
    /// Set when the other rank of an in-process pair failed.
    abort: Arc<AtomicBool>,
    digests: Option<Mutex<(Vec<u64>, Vec<u64>)>>,
}

impl BenchState {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn stamp(&self, slot: &AtomicU64) {
        slot.fetch_max(self.now_ns(), Ordering::AcqRel);
    }

    fn parcel(&self, action: u64, args: &[&[u8]]) -> Parcel {
        build_parcel(action, args, self.zc_threshold).expect("benchmark parcels are well-formed")
    }

    fn control(&self, action: u64, value: u64) -> Parcel {
        self.parcel(action, &[&value.to_le_bytes()])
    }

    fn hop(&self, chain: u32, step: u32) -> Parcel {
        let mut meta = [0u8; 8];
        meta[..4].copy_from_slice(&chain.to_le_bytes());
        meta[4..].copy_from_slice(&step.to_le_bytes());
        self.parcel(ACT_HOP, &[&meta, &self.payload])
    }

    /// Sends from the current worker; a failed send stops the node.
    fn send(self: &Arc<Self>, w: &Worker<'_>, parcel: Parcel, then: Option<Box<dyn FnOnce() + Send>>) {
        if let Some(d) = &self.digests {
            d.lock().0.push(parcel_digest(&parcel));
        }
        let source = self.source.clone();
        w.pp.send(
            w.thread_id,
            self.peer,
            parcel,
            Box::new(move |r| match r {
                Ok(()) => {
                    if let Some(f) = then {
                        f()
                    }
                }
                Err(e) => source.fail(e),
            }),
        );
    }

    fn spawn_send(self: &Arc<Self>, parcel: Parcel) {
        let me = self.clone();
        self.source.spawn(Box::new(move |w| me.send(w, parcel, None)));
    }

    /// Sends `total` parcels built by `make`, keeping at most the configured
    /// window in flight; each completion schedules the next send.
    fn stream(self: &Arc<Self>, total: u64, make: impl Fn(&BenchState, u64) -> Parcel + Send + Sync + 'static) {
        let s = Arc::new(Stream {
            next: AtomicU64::new(0),
            total,
            make: Box::new(make),
        });
        for _ in 0..(self.params.window as u64).min(total) {
            let (me, s) = (self.clone(), s.clone());
            self.source.spawn(Box::new(move |w| me.pump(&s, w)));
        }
    }

    fn pump(self: &Arc<Self>, s: &Arc<Stream>, w: &Worker<'_>) {
        let i = s.next.fetch_add(1, Ordering::Relaxed);
        if i >= s.total {
            return;
        }
        let parcel = (s.make)(self, i);
        let (me, s2) = (self.clone(), s.clone());
        self.send(
            w,
            parcel,
            Some(Box::new(move || {
                let me2 = me.clone();
                me.source.spawn(Box::new(move |w| me2.pump(&s2, w)))
            })),
        );
    }

    fn start_trace_stream(self: &Arc<Self>) {
        self.stream(self.trace.parcels, |st, i| {
            let n = st.trace_sizes[i as usize];
            st.parcel(ACT_TRACE, &[&vec![i as u8; n]])
        });
    }
}

struct Stream {
    next: AtomicU64,
    total: u64,
    #[allow(clippy::type_complexity)]
    make: Box<dyn Fn(&BenchState, u64) -> Parcel + Send + Sync>,
}

/// Receiving side of the benchmark protocol. `Arc<BenchState>` is the
/// registered handler; replies are spawned as tasks.
struct Handler(Arc<BenchState>);

impl ParcelHandler for Handler {
    fn handle_parcel(&self, source: u32, parcel: Parcel) {
        let st = &self.0;
        if source != st.peer {
            log::warn!("benchmark parcel from unexpected rank {source}");
        }
        if let Some(d) = &st.digests {
            d.lock().1.push(parcel_digest(&parcel));
        }
        let arg = |i: usize| -> Option<u64> {
            let layout = parcel.layout().ok()?;
            let raw = layout.small_args.get(i)?;
            Some(match raw.len() {
                8 => u64::from_le_bytes(raw[..].try_into().ok()?),
                _ => return None,
            })
        };
        match parcel.action_id() {
            Ok(ACT_FLOOD) => {
                let n = st.flood_recv.fetch_add(1, Ordering::AcqRel) + 1;
                if n % st.params.nchains == 0 {
                    st.spawn_send(st.control(ACT_FLOOD_ACK, n / st.params.nchains - 1));
                }
            }
            Ok(ACT_FLOOD_ACK) => {
                st.stamp(&st.ack_ns);
                st.acks.fetch_add(1, Ordering::AcqRel);
            }
            Ok(ACT_HOP) => {
                let Some(meta) = arg(0) else {
                    return log::error!("malformed hop parcel");
                };
                let (chain, step) = (meta as u32, (meta >> 32) as u32);
                st.hops.fetch_add(1, Ordering::AcqRel);
                if step as u64 >= st.params.nsteps {
                    if st.rank == 0 {
                        st.stamp(&st.chains_done_ns);
                        st.chains_done.fetch_add(1, Ordering::AcqRel);
                    } else {
                        st.spawn_send(st.control(ACT_CHAIN_DONE, chain as u64));
                    }
                } else {
                    st.spawn_send(st.hop(chain, step + 1));
                }
            }
            Ok(ACT_CHAIN_DONE) => {
                st.stamp(&st.chains_done_ns);
                st.chains_done.fetch_add(1, Ordering::AcqRel);
            }
            Ok(ACT_TRACE) => {
                st.trace_recv_bytes
                    .fetch_add(parcel.zc_chunks.iter().map(|c| c.len() as u64).sum::<u64>(), Ordering::AcqRel);
                if let Ok(l) = parcel.layout() {
                    let small: usize = l.small_args.iter().map(Vec::len).sum();
                    st.trace_recv_bytes.fetch_add(small as u64, Ordering::AcqRel);
                }
                st.stamp(&st.trace_recv_ns);
                let n = st.trace_recv.fetch_add(1, Ordering::AcqRel) + 1;
                if n % st.trace.parcels == 0 {
                    st.spawn_send(st.control(ACT_TRACE_END, n / st.trace.parcels - 1));
                }
            }
            Ok(ACT_TRACE_START) => st.start_trace_stream(),
            Ok(ACT_TRACE_END) => {
                st.stamp(&st.trace_end_ns);
                st.trace_ends.fetch_add(1, Ordering::AcqRel);
            }
            Ok(ACT_SHUTDOWN) => st.shutdown.store(true, Ordering::Release),
            other => log::error!("unknown benchmark action {other:?}"),
        }
    }
}

fn wait_for(st: &BenchState, what: &str, timeout: Duration, cond: impl Fn() -> bool) -> Result<(), BenchError> {
    let start = Instant::now();
    let mut spins = 0u32;
    loop {
        if cond() {
            return Ok(());
        }
        if st.abort.load(Ordering::Acquire) {
            return Err(BenchError::Peer(format!("peer failed while waiting for {what}")));
        }
        if st.source.is_stopped() {
            return Err(match st.source.error() {
                Some(e) => e.into(),
                None => BenchError::Peer(format!("workers stopped while waiting for {what}")),
            });
        }
        if start.elapsed() > timeout {
            return Err(BenchError::Timeout {
                what: what.into(),
                after: timeout,
            });
        }
        spins += 1;
        if spins < 100 {
            thread::yield_now();
        } else {
            thread::sleep(Duration::from_micros(50));
        }
    }
}

/// Runs the measuring side: warmup plus measured iterations, then tells the
/// peer to shut down.
fn drive(node: &Node, st: &Arc<BenchState>, cfg: &VariantConfig) -> Result<Vec<RunResult>, BenchError> {
    let p = &st.params;
    let mut results = Vec::new();
    for i in 0..(p.warmup + p.iterations) as u64 {
        let unexpected0 = node.parcelport().total_counters().unexpected;
        let start = st.now_ns();
        let (parcels, bytes, end) = match st.mode {
            Mode::Flood => {
                st.stream(p.nchains, |st, _| st.parcel(ACT_FLOOD, &[&st.payload]));
                wait_for(st, "flood acknowledgement", p.timeout, || {
                    st.acks.load(Ordering::Acquire) > i
                })?;
                (p.nchains, p.nchains * p.msg_size as u64, st.ack_ns.load(Ordering::Acquire))
            }
            Mode::Pingpong => {
                for chain in 0..p.nchains as u32 {
                    st.spawn_send(st.hop(chain, 1));
                }
                wait_for(st, "chain completion", p.timeout, || {
                    st.chains_done.load(Ordering::Acquire) >= (i + 1) * p.nchains
                })?;
                let hops = p.nchains * p.nsteps;
                (hops, hops * p.msg_size as u64, st.chains_done_ns.load(Ordering::Acquire))
            }
            Mode::Trace => {
                let n = st.trace.parcels;
                let bytes0 = st.trace_recv_bytes.load(Ordering::Acquire);
                st.spawn_send(st.control(ACT_TRACE_START, i));
                st.start_trace_stream();
                wait_for(st, "trace exchange", p.timeout, || {
                    st.trace_recv.load(Ordering::Acquire) >= (i + 1) * n && st.trace_ends.load(Ordering::Acquire) > i
                })?;
                let own: u64 = st.trace_sizes.iter().map(|&s| s as u64).sum();
                let end = st
                    .trace_recv_ns
                    .load(Ordering::Acquire)
                    .max(st.trace_end_ns.load(Ordering::Acquire));
                (2 * n, own + st.trace_recv_bytes.load(Ordering::Acquire) - bytes0, end)
            }
        };
        let elapsed = Duration::from_nanos(end.saturating_sub(start).max(1));
        if i >= p.warmup as u64 {
            results.push(RunResult {
                mode: st.mode,
                variant: cfg.name.clone(),
                params: p.clone(),
                devices: cfg.num_devices,
                run_index: i as usize - p.warmup,
                parcels,
                elapsed,
                bytes,
                unexpected: node.parcelport().total_counters().unexpected - unexpected0,
            });
            log::info!(
                "{} {} run {}: {parcels} parcels in {elapsed:?}",
                cfg.name,
                st.mode,
                i as usize - p.warmup
            );
        }
    }
    let me = st.clone();
    st.source.spawn(Box::new(move |w| {
        let done = me.clone();
        me.send(
            w,
            me.control(ACT_SHUTDOWN, 0),
            Some(Box::new(move || done.shutdown_sent.store(true, Ordering::Release))),
        )
    }));
    wait_for(st, "shutdown delivery", p.timeout, || st.shutdown_sent.load(Ordering::Acquire))?;
    Ok(results)
}

/// Serving side: answers until the driver says it is done and every reply
/// has left.
fn serve(node: &Node, st: &BenchState) -> Result<(), BenchError> {
    let p = &st.params;
    let budget = p.timeout * (p.warmup + p.iterations + 1) as u32 + SERVE_SLACK;
    wait_for(st, "driver shutdown", budget, || st.shutdown.load(Ordering::Acquire))?;
    wait_for(st, "replies to drain", p.timeout, || {
        let b = node.parcelport().backlog();
        st.source.pending() == 0 && b.send_jobs == 0 && b.aggregated == 0
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &VariantConfig,
    mode: Mode,
    params: &BenchParams,
    trace: &TraceSpec,
    rank: u32,
    network: Network,
    opts: &RunOptions,
    core_offset: usize,
    started: Option<&Barrier>,
    abort: Arc<AtomicBool>,
) -> Result<RankOutcome, BenchError> {
    let result = run_one_inner(cfg, mode, params, trace, rank, network, opts, core_offset, started, abort.clone());
    if result.is_err() {
        abort.store(true, Ordering::Release);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn run_one_inner(
    cfg: &VariantConfig,
    mode: Mode,
    params: &BenchParams,
    trace: &TraceSpec,
    rank: u32,
    network: Network,
    opts: &RunOptions,
    core_offset: usize,
    started: Option<&Barrier>,
    abort: Arc<AtomicBool>,
) -> Result<RankOutcome, BenchError> {
    params.validate()?;
    if mode == Mode::Trace {
        trace.validate()?;
    }
    cfg.validate().map_err(crate::parcelport::ParcelportError::from)?;
    let source = TaskSource::new();
    let st = Arc::new(BenchState {
        rank,
        peer: 1 - rank,
        mode,
        params: params.clone(),
        zc_threshold: cfg.zc_threshold,
        trace: trace.clone(),
        trace_sizes: if mode == Mode::Trace { trace.sizes(rank) } else { Vec::new() },
        payload: vec![0x5A; params.msg_size],
        source: source.clone(),
        epoch: Instant::now(),
        flood_recv: AtomicU64::new(0),
        acks: AtomicU64::new(0),
        ack_ns: AtomicU64::new(0),
        hops: AtomicU64::new(0),
        chains_done: AtomicU64::new(0),
        chains_done_ns: AtomicU64::new(0),
        trace_recv: AtomicU64::new(0),
        trace_recv_bytes: AtomicU64::new(0),
        trace_recv_ns: AtomicU64::new(0),
        trace_ends: AtomicU64::new(0),
        trace_end_ns: AtomicU64::new(0),
        shutdown: AtomicBool::new(false),
        shutdown_sent: AtomicBool::new(false),
        abort,
        digests: opts.record_digests.then(|| Mutex::new((Vec::new(), Vec::new()))),
    });
    let node_opts = NodeOptions {
        threads: params.threads,
        pin: opts.pin,
        core_offset,
    };
    let node = Node::start(cfg.clone(), Arc::new(Handler(st.clone())), rank, 2, network, source, &node_opts);
    if let Some(b) = started {
        b.wait();
    }
    let node = node?;
    let outcome = if rank == 0 {
        drive(&node, &st, cfg)
    } else {
        serve(&node, &st).map(|()| Vec::new())
    };
    let pp = node.parcelport().clone();
    let stopped = node.shutdown();
    let results = outcome?;
    stopped?;
    let (sent_digests, received_digests) = st
        .digests
        .as_ref()
        .map(|d| std::mem::take(&mut *d.lock()))
        .unwrap_or_default();
    Ok(RankOutcome {
        rank,
        results,
        stats: pp.stats(),
        counters: pp.total_counters(),
        flood_received: st.flood_recv.load(Ordering::Acquire),
        hops: st.hops.load(Ordering::Acquire),
        trace_received: st.trace_recv.load(Ordering::Acquire),
        sent_digests,
        received_digests,
    })
}

/// Runs one rank of a two-rank benchmark over `network`; rank 0 measures.
pub fn run_rank(
    cfg: &VariantConfig,
    mode: Mode,
    params: &BenchParams,
    trace: &TraceSpec,
    rank: u32,
    network: Network,
    opts: &RunOptions,
) -> Result<RankOutcome, BenchError> {
    if rank > 1 {
        return Err(BenchError::InvalidParams(format!("benchmarks use ranks 0 and 1, not {rank}")));
    }
    run_one(cfg, mode, params, trace, rank, network, opts, 0, None, Arc::default())
}

/// Runs both ranks in this process over the loopback fabric.
pub fn run_loopback_duo(
    cfg: &VariantConfig,
    mode: Mode,
    params: &BenchParams,
    trace: &TraceSpec,
    opts: &RunOptions,
) -> Result<[RankOutcome; 2], BenchError> {
    let fabric = LoopbackFabric::new(2, cfg.num_devices);
    let started = Arc::new(Barrier::new(2));
    let abort = Arc::new(AtomicBool::new(false));
    let server = {
        let (cfg, params, trace, opts, fabric, started, abort) = (
            cfg.clone(),
            params.clone(),
            trace.clone(),
            opts.clone(),
            fabric.clone(),
            started.clone(),
            abort.clone(),
        );
        thread::Builder::new()
            .name("rank1".into())
            .spawn(move || {
                run_one(
                    &cfg,
                    mode,
                    &params,
                    &trace,
                    1,
                    Network::Loopback(fabric),
                    &opts,
                    params.threads,
                    Some(&started),
                    abort,
                )
            })
            .expect("spawn rank 1")
    };
    let r0 = run_one(cfg, mode, params, trace, 0, Network::Loopback(fabric), opts, 0, Some(&started), abort);
    let r1 = server
        .join()
        .map_err(|_| BenchError::Peer("rank 1 panicked".into()))?;
    Ok([r0?, r1?])
}

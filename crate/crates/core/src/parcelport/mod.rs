//! The parcelport: `send` / `background_work` on the caller side,
//! `allocate_zc_chunks` / `handle_parcel` callbacks on the receiver side,
//! implemented as a per-parcel state machine over the progress engine.
//!
//! Protocol per parcel: one header (carrying the tag, device index and zero-copy
//! size table, optionally the nonzero-copy chunk), then the nonzero-copy chunk
//! if it was not piggybacked, then each zero-copy chunk. Every chunk is sent
//! only after the previous one completed, and received only after the
//! previous receive completed. All follow-ups travel on the header's device.

mod aggregate;
mod config;

use std::collections::VecDeque;
use std::fmt;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

pub use aggregate::{merge_parcels, unmerge_nzc};
pub use config::{ConfigError, FollowupCompletion, HeaderCompletion, HeaderPath, VariantConfig, MATRIX_PRESETS};

use crate::completion::{Synchronizer, SynchronizerPool};
use crate::lockstat::{LockReport, TrackedMutex};
use crate::parcel::{
    decode_header, encode_header, Chunk, HeaderFrame, NzcLayout, Parcel, ParcelError, FLAG_PIGGYBACK,
};
use crate::progress::{Descriptor, ProgressEngine, ProgressError, ProgressMode, ProgressStats, Target};
use crate::transport::{
    tcp, Backend, CounterSnapshot, Device, LoopbackFabric, MatchSpec, NetEvent, NetEventKind, Rejected, SendKind,
    TcpConfig, TraceEvent, TransportError,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParcelportError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Progress(#[from] ProgressError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("parcel: {0}")]
    Parcel(#[from] ParcelError),
    #[error("destination {dest} is invalid for rank {rank} in a world of {world}")]
    InvalidDestination { dest: u32, rank: u32, world: u32 },
    #[error("thread {thread} is outside the {threads} worker threads")]
    ThreadOutOfRange { thread: usize, threads: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Upper-layer callbacks invoked by the receiving parcelport.
pub trait ParcelHandler: Send + Sync {
    /// Delivers one complete parcel. Runs outside every internal lock.
    fn handle_parcel(&self, source: u32, parcel: Parcel);

    /// Provides receive buffers for the zero-copy chunks of the parcel
    /// whose nonzero-copy chunk is `nzc`. Called once per parcel, before any
    /// zero-copy receive is posted; buffer `i` must be `zc_sizes[i]` bytes.
    fn allocate_zc_chunks(&self, _source: u32, _nzc: &[u8], zc_sizes: &[u64]) -> Vec<Vec<u8>> {
        zc_sizes.iter().map(|&n| vec![0u8; n as usize]).collect()
    }
}

/// Fired exactly once per sent parcel, after its last chunk completed.
pub type OnComplete = Box<dyn FnOnce(Result<(), ParcelportError>) + Send>;

/// How ranks reach each other.
pub enum Network {
    Loopback(Arc<LoopbackFabric>),
    Tcp {
        /// One address per rank (device `d` listens on port + d) or one per
        /// (rank, device) pair, rank-major.
        endpoints: Vec<SocketAddr>,
        /// Optional pre-bound listeners for this rank, indexed by device.
        listeners: Vec<TcpListener>,
        connect_timeout: Duration,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SendPhase {
    Header,
    Nzc,
    Zc(usize),
}

struct SendJob {
    dest: u32,
    device: usize,
    tag: u32,
    parcel: Parcel,
    piggybacked: bool,
    phase: SendPhase,
    callbacks: Vec<OnComplete>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RecvPhase {
    Nzc,
    Zc(usize),
}

struct RecvJob {
    source: u32,
    device: usize,
    tag: u32,
    header: HeaderFrame,
    phase: RecvPhase,
    /// Nonzero-copy chunks of the (sub-)parcels and their zero-copy counts.
    parts: Vec<(Bytes, usize)>,
    buffers: VecDeque<Vec<u8>>,
    received: Vec<Chunk>,
}

/// Context carried by every operation the parcelport posts; a descriptor
/// without one is a header arrival.
pub struct Job(JobKind);

enum JobKind {
    Send(Box<SendJob>),
    Recv(Box<RecvJob>),
}

impl fmt::Debug for Job {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            JobKind::Send(j) => f
                .debug_struct("SendJob")
                .field("dest", &j.dest)
                .field("device", &j.device)
                .field("tag", &j.tag)
                .field("phase", &j.phase)
                .field("piggybacked", &j.piggybacked)
                .field("nzc_len", &j.parcel.nzc_chunk.len())
                .field("zc_chunks", &j.parcel.zc_chunks.len())
                .field("parcels", &j.callbacks.len())
                .finish(),
            JobKind::Recv(j) => f
                .debug_struct("RecvJob")
                .field("source", &j.source)
                .field("device", &j.device)
                .field("tag", &j.tag)
                .field("phase", &j.phase)
                .field("nzc_size", &j.header.nzc_size)
                .field("zc_sizes", &j.header.zc_sizes)
                .field("received", &j.received.len())
                .finish(),
        }
    }
}

struct AggQueue {
    pending: TrackedMutex<Vec<(Parcel, OnComplete)>>,
    flush: TrackedMutex<()>,
}

#[derive(Default)]
struct Counters {
    sends: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
    delivered: AtomicU64,
    headers: AtomicU64,
    submissions: AtomicU64,
    merged_submissions: AtomicU64,
    send_jobs_live: AtomicU64,
    recv_jobs_live: AtomicU64,
    background_calls: AtomicU64,
    background_productive: AtomicU64,
}

/// Snapshot of parcelport-level counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParcelportStats {
    /// Parcels accepted by `send`.
    pub sends: u64,
    /// `on_complete` callbacks fired with success.
    pub completed: u64,
    /// `on_complete` callbacks fired with an error.
    pub failed: u64,
    /// `handle_parcel` invocations.
    pub delivered: u64,
    /// Header messages processed.
    pub headers: u64,
    /// Wire-level parcels submitted (a merged parcel counts once).
    pub submissions: u64,
    pub merged_submissions: u64,
    pub send_jobs_live: u64,
    pub recv_jobs_live: u64,
    pub background_calls: u64,
    pub background_productive: u64,
}

/// Everything still owned by the parcelport.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Backlog {
    pub send_jobs: u64,
    pub recv_jobs: u64,
    pub aggregated: usize,
    pub pool_entries: usize,
    pub shared_queue: u64,
    pub staged_events: usize,
    pub staged_arrivals: usize,
    pub unexpected: usize,
}

impl Backlog {
    pub fn is_empty(&self) -> bool {
        *self == Backlog::default()
    }

    /// Device events still to be routed (a bound on the work left).
    pub fn pending_events(&self) -> u64 {
        (self.staged_events + self.staged_arrivals + self.unexpected) as u64 + self.shared_queue
    }
}

pub struct Parcelport {
    cfg: VariantConfig,
    rank: u32,
    world: u32,
    threads: usize,
    handler: Arc<dyn ParcelHandler>,
    engine: ProgressEngine<Job>,
    send_pool: SynchronizerPool<Descriptor<Job>>,
    recv_pool: SynchronizerPool<Descriptor<Job>>,
    tags: Vec<AtomicU32>,
    agg: Vec<AggQueue>,
    counters: Counters,
}

impl Parcelport {
    /// Creates the devices (connecting to every peer), posts the internal
    /// header receives and installs the thread-to-device map for `threads`
    /// worker threads.
    pub fn new(
        cfg: VariantConfig,
        handler: Arc<dyn ParcelHandler>,
        rank: u32,
        world: u32,
        threads: usize,
        network: Network,
    ) -> Result<Self, ParcelportError> {
        cfg.validate()?;
        if threads == 0 {
            return Err(ParcelportError::ThreadOutOfRange { thread: 0, threads: 0 });
        }
        let n = cfg.num_devices;
        let mut devices = Vec::with_capacity(n);
        match network {
            Network::Loopback(fabric) => {
                for d in 0..n {
                    devices.push(Device::create(rank, world, d as u8, Backend::Loopback(fabric.clone()))?);
                }
            }
            Network::Tcp {
                endpoints,
                listeners,
                connect_timeout,
            } => {
                let mut listeners: Vec<Option<TcpListener>> = listeners.into_iter().map(Some).collect();
                for d in 0..n {
                    let per_rank = (0..world)
                        .map(|r| tcp::endpoint_for(&endpoints, world, n, r, d))
                        .collect::<Result<Vec<_>, _>>()?;
                    let cfg = TcpConfig {
                        endpoints: per_rank,
                        listener: listeners.get_mut(d).and_then(Option::take),
                        connect_timeout,
                    };
                    devices.push(Device::create(rank, world, d as u8, Backend::Tcp(cfg))?);
                }
            }
        }
        let queue = cfg.uses_shared_queue().then_some(cfg.queue_kind);
        let engine = ProgressEngine::new(cfg.progress_config(), cfg.header_mode(), devices, queue)?;
        Ok(Parcelport {
            rank,
            world,
            threads,
            handler,
            engine,
            send_pool: SynchronizerPool::new(),
            recv_pool: SynchronizerPool::new(),
            tags: (0..world).map(|_| AtomicU32::new(0)).collect(),
            agg: (0..world)
                .map(|_| AggQueue {
                    pending: TrackedMutex::new(Vec::new()),
                    flush: TrackedMutex::new(()),
                })
                .collect(),
            counters: Counters::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Device a worker thread sends on.
    pub fn send_device(&self, thread_id: usize) -> usize {
        thread_id % self.cfg.num_devices
    }

    /// Devices a worker thread progresses. Every device belongs to exactly
    /// one residue class, so all devices are progressed even with fewer
    /// threads than devices.
    pub fn progress_devices(&self, thread_id: usize) -> impl Iterator<Item = usize> {
        let k = self.threads.min(self.cfg.num_devices);
        let class = thread_id % k;
        (0..self.cfg.num_devices).filter(move |d| d % k == class)
    }

    /// Sends `parcel` to `dest`. Never blocks on the network; `on_complete`
    /// fires once the last chunk is out (or immediately on a local error).
    pub fn send(&self, thread_id: usize, dest: u32, parcel: Parcel, on_complete: OnComplete) {
        if thread_id >= self.threads {
            on_complete(Err(ParcelportError::ThreadOutOfRange {
                thread: thread_id,
                threads: self.threads,
            }));
            return;
        }
        if dest == self.rank || dest >= self.world {
            on_complete(Err(ParcelportError::InvalidDestination {
                dest,
                rank: self.rank,
                world: self.world,
            }));
            return;
        }
        self.counters.sends.fetch_add(1, Ordering::Relaxed);
        if self.cfg.aggregation {
            self.agg[dest as usize].pending.lock().push((parcel, on_complete));
            self.flush(thread_id, dest);
        } else {
            self.submit(thread_id, dest, parcel, vec![on_complete]);
        }
    }

    /// Drains `dest`'s aggregation queue if no other thread is doing so.
    fn flush(&self, thread_id: usize, dest: u32) -> bool {
        let q = &self.agg[dest as usize];
        let mut any = false;
        loop {
            let Some(_guard) = q.flush.try_lock() else {
                return any;
            };
            let batch = std::mem::take(&mut *q.pending.lock());
            if batch.is_empty() {
                return any;
            }
            any = true;
            for group in aggregate::plan_groups(batch, |(p, _)| p) {
                let (parcels, callbacks): (Vec<_>, Vec<_>) = group.into_iter().unzip();
                match merge_parcels(&parcels) {
                    Ok(p) => {
                        if p.merged {
                            self.counters.merged_submissions.fetch_add(1, Ordering::Relaxed);
                        }
                        self.submit(thread_id, dest, p, callbacks)
                    }
                    Err(e) => self.fail(callbacks, e.into()),
                }
            }
            drop(_guard);
            // another thread may have enqueued while we held the guard
            if q.pending.lock().is_empty() {
                return any;
            }
        }
    }

    /// Runs `f` while holding `dest`'s flush guard: parcels sent meanwhile
    /// accumulate and go out merged on the next flush.
    pub fn with_flush_held<R>(&self, dest: u32, f: impl FnOnce() -> R) -> R {
        let _guard = self.agg[dest as usize].flush.lock();
        f()
    }

    fn fail(&self, callbacks: Vec<OnComplete>, err: ParcelportError) {
        for cb in callbacks {
            self.counters.failed.fetch_add(1, Ordering::Relaxed);
            cb(Err(err.clone()));
        }
    }

    fn submit(&self, thread_id: usize, dest: u32, parcel: Parcel, callbacks: Vec<OnComplete>) {
        let device = self.send_device(thread_id);
        let tag = self.tags[dest as usize].fetch_add(1, Ordering::Relaxed);
        let header = match encode_header(&parcel, tag, self.rank, device as u8, self.cfg.piggyback_threshold) {
            Ok(h) => h,
            Err(e) => return self.fail(callbacks, e.into()),
        };
        let piggybacked = header[13] & FLAG_PIGGYBACK != 0;
        self.counters.submissions.fetch_add(1, Ordering::Relaxed);
        self.counters.send_jobs_live.fetch_add(1, Ordering::Relaxed);
        let job = Job(JobKind::Send(Box::new(SendJob {
            dest,
            device,
            tag,
            parcel,
            piggybacked,
            phase: SendPhase::Header,
            callbacks,
        })));
        let target = self.send_target();
        let posted = match self.cfg.header_path {
            HeaderPath::Put => self.engine.put(device, dest, &header, target.clone(), job),
            HeaderPath::SendRecv => self
                .engine
                .send(device, dest, SendKind::Header, tag, &header, target.clone(), job),
        };
        if let Err(r) = posted {
            self.refused(device, dest, tag, target, r);
        }
    }

    /// Completion target for one of our own operations.
    fn op_target(&self, pool: &SynchronizerPool<Descriptor<Job>>) -> Target<Job> {
        match self.cfg.followup_completion {
            FollowupCompletion::Queue => Target::Queue,
            FollowupCompletion::SyncPool => {
                let s = Arc::new(Synchronizer::new());
                pool.insert(s.clone());
                Target::Sync(s)
            }
        }
    }

    fn send_target(&self) -> Target<Job> {
        self.op_target(&self.send_pool)
    }

    fn recv_target(&self) -> Target<Job> {
        self.op_target(&self.recv_pool)
    }

    /// A send the device refused completes through the normal path with an
    /// error, so pool entries and job accounting stay consistent.
    fn refused(&self, device: usize, peer: u32, tag: u32, target: Target<Job>, r: Rejected<Job>) {
        let desc = NetEvent {
            kind: NetEventKind::SendDone,
            tag,
            peer,
            device_index: device as u8,
            target_queue: 0,
            payload: Default::default(),
            context: Some(r.context),
            error: Some(r.error),
            ticket: 0,
        };
        self.engine.complete_locally(target, desc);
    }

    fn send_chunk(&self, job: Box<SendJob>, bytes: Bytes) {
        let (device, dest, tag) = (job.device, job.dest, job.tag);
        let target = self.send_target();
        let posted = self.engine.send(
            device,
            dest,
            SendKind::Followup,
            tag,
            &bytes,
            target.clone(),
            Job(JobKind::Send(job)),
        );
        if let Err(r) = posted {
            self.refused(device, dest, tag, target, r);
        }
    }

    fn post_chunk_recv(&self, job: Box<RecvJob>, buffer: Vec<u8>) {
        let spec = MatchSpec::followup(job.source, job.tag);
        let device = job.device;
        let target = self.recv_target();
        self.engine
            .post_recv(device, spec, buffer, target, Job(JobKind::Recv(job)));
    }

    /// Called by idle workers. Drives progress (explicit mode), drains
    /// completions and advances the jobs they belong to. Returns true iff
    /// any state advanced.
    pub fn background_work(&self, thread_id: usize) -> Result<bool, ParcelportError> {
        if thread_id >= self.threads {
            return Err(ParcelportError::ThreadOutOfRange {
                thread: thread_id,
                threads: self.threads,
            });
        }
        self.counters.background_calls.fetch_add(1, Ordering::Relaxed);
        let mut any = false;
        if self.cfg.aggregation {
            for dest in 0..self.world {
                if dest != self.rank && !self.agg[dest as usize].pending.lock().is_empty() {
                    any |= self.flush(thread_id, dest);
                }
            }
        }
        let explicit = self.cfg.progress_mode == ProgressMode::Explicit;
        for d in self.progress_devices(thread_id) {
            if explicit {
                any |= self.engine.progress(d);
            }
            for slot in 0..self.engine.header_slots(d) {
                if let Some(desc) = self.engine.test_header_slot(d, slot) {
                    any = true;
                    self.advance(desc)?;
                }
            }
            if !explicit {
                for pool in [&self.send_pool, &self.recv_pool] {
                    if let Some(desc) = pool.poll_one_with(|s| self.engine.test_with_implicit_progress(s, d)) {
                        any = true;
                        self.advance(desc)?;
                    }
                }
            }
        }
        if self.engine.has_shared_queue() {
            for _ in 0..self.cfg.poll_batch {
                match self.engine.pop_shared() {
                    Some(desc) => {
                        any = true;
                        self.advance(desc)?;
                    }
                    None => break,
                }
            }
        }
        if explicit {
            for pool in [&self.send_pool, &self.recv_pool] {
                if let Some(desc) = pool.poll_one() {
                    any = true;
                    self.advance(desc)?;
                }
            }
        }
        if any {
            self.counters.background_productive.fetch_add(1, Ordering::Relaxed);
        }
        Ok(any)
    }

    /// Applies one completion to the job it belongs to.
    fn advance(&self, mut desc: Descriptor<Job>) -> Result<(), ParcelportError> {
        match desc.context.take() {
            None => self.on_header(desc),
            Some(Job(JobKind::Send(job))) => {
                self.advance_send(job, desc);
                Ok(())
            }
            Some(Job(JobKind::Recv(job))) => self.advance_recv(job, desc),
        }
    }

    fn advance_send(&self, mut job: Box<SendJob>, desc: Descriptor<Job>) {
        if let Some(e) = desc.error {
            self.counters.send_jobs_live.fetch_sub(1, Ordering::Relaxed);
            log::warn!("send to rank {} (tag {}) failed: {e}", job.dest, job.tag);
            return self.fail(std::mem::take(&mut job.callbacks), e.into());
        }
        let next_zc = match job.phase {
            SendPhase::Header if !job.piggybacked => {
                job.phase = SendPhase::Nzc;
                let bytes = job.parcel.nzc_chunk.bytes().clone();
                return self.send_chunk(job, bytes);
            }
            SendPhase::Header | SendPhase::Nzc => 0,
            SendPhase::Zc(i) => i + 1,
        };
        if next_zc < job.parcel.zc_chunks.len() {
            job.phase = SendPhase::Zc(next_zc);
            let bytes = job.parcel.zc_chunks[next_zc].bytes().clone();
            return self.send_chunk(job, bytes);
        }
        self.counters.send_jobs_live.fetch_sub(1, Ordering::Relaxed);
        for cb in job.callbacks {
            self.counters.completed.fetch_add(1, Ordering::Relaxed);
            cb(Ok(()));
        }
    }

    fn on_header(&self, desc: Descriptor<Job>) -> Result<(), ParcelportError> {
        if let Some(e) = desc.error {
            return Err(ParcelportError::Protocol(format!(
                "header from rank {} on device {}: {e}",
                desc.peer, desc.device_index
            )));
        }
        let header = decode_header(&desc.payload).map_err(|e| {
            ParcelportError::Protocol(format!("undecodable header from rank {}: {e}", desc.peer))
        })?;
        drop(desc.payload);
        if header.source_rank != desc.peer
            || header.device_index != desc.device_index
            || header.device_index as usize >= self.cfg.num_devices
        {
            return Err(ParcelportError::Protocol(format!(
                "header claims rank {} device {} but arrived from rank {} on device {}",
                header.source_rank, header.device_index, desc.peer, desc.device_index
            )));
        }
        self.counters.headers.fetch_add(1, Ordering::Relaxed);
        self.counters.recv_jobs_live.fetch_add(1, Ordering::Relaxed);
        let mut job = Box::new(RecvJob {
            source: header.source_rank,
            device: header.device_index as usize,
            tag: header.tag,
            phase: RecvPhase::Nzc,
            parts: Vec::new(),
            buffers: VecDeque::new(),
            received: Vec::new(),
            header,
        });
        match job.header.piggyback.take() {
            Some(nzc) => self.after_nzc(job, nzc),
            None => {
                let len = usize::try_from(job.header.nzc_size)
                    .map_err(|_| ParcelportError::Protocol(format!("nzc size {} too large", job.header.nzc_size)))?;
                self.post_chunk_recv(job, vec![0u8; len]);
                Ok(())
            }
        }
    }

    /// The nonzero-copy chunk is complete: split merged parcels, obtain the
    /// zero-copy buffers and start receiving them.
    fn after_nzc(&self, mut job: Box<RecvJob>, nzc: Bytes) -> Result<(), ParcelportError> {
        let protocol = |job: &RecvJob, what: String| {
            ParcelportError::Protocol(format!("{what}; job {:?}", Job(JobKind::Recv(Box::new(job.dump())))))
        };
        let subs = if job.header.is_merged() {
            unmerge_nzc(&nzc).map_err(|e| protocol(&job, format!("bad merged chunk: {e}")))?
        } else {
            vec![nzc]
        };
        let mut offset = 0usize;
        for sub in subs {
            let sizes: Vec<u64> = if job.header.is_merged() {
                NzcLayout::decode(&sub)
                    .map_err(|e| protocol(&job, format!("bad merged part: {e}")))?
                    .zc_sizes
            } else {
                job.header.zc_sizes.clone()
            };
            let expected = job.header.zc_sizes.get(offset..offset + sizes.len());
            if expected != Some(&sizes[..]) {
                return Err(protocol(&job, "zero-copy size table disagrees with the header".into()));
            }
            offset += sizes.len();
            let bufs = self.handler.allocate_zc_chunks(job.source, &sub, &sizes);
            if bufs.len() != sizes.len() || bufs.iter().zip(&sizes).any(|(b, &s)| b.len() as u64 != s) {
                return Err(protocol(&job, "allocate_zc_chunks returned buffers of the wrong shape".into()));
            }
            job.buffers.extend(bufs);
            job.parts.push((sub, sizes.len()));
        }
        if offset != job.header.zc_sizes.len() {
            return Err(protocol(&job, "header lists more zero-copy chunks than the parcel".into()));
        }
        match job.buffers.pop_front() {
            Some(buf) => {
                job.phase = RecvPhase::Zc(0);
                self.post_chunk_recv(job, buf);
            }
            None => self.deliver(job),
        }
        Ok(())
    }

    fn advance_recv(&self, mut job: Box<RecvJob>, desc: Descriptor<Job>) -> Result<(), ParcelportError> {
        if let Some(e) = desc.error {
            self.counters.recv_jobs_live.fetch_sub(1, Ordering::Relaxed);
            return Err(ParcelportError::Protocol(format!(
                "follow-up receive failed: {e}; job {:?}",
                Job(JobKind::Recv(job))
            )));
        }
        match job.phase {
            RecvPhase::Nzc => {
                let nzc = Bytes::from(desc.payload.into_vec());
                if nzc.len() as u64 != job.header.nzc_size {
                    self.counters.recv_jobs_live.fetch_sub(1, Ordering::Relaxed);
                    return Err(ParcelportError::Protocol(format!(
                        "nonzero-copy chunk of {} bytes, header announced {}",
                        nzc.len(),
                        job.header.nzc_size
                    )));
                }
                self.after_nzc(job, nzc)
            }
            RecvPhase::Zc(i) => {
                let data = desc.payload.into_vec();
                if data.len() as u64 != job.header.zc_sizes[i] {
                    self.counters.recv_jobs_live.fetch_sub(1, Ordering::Relaxed);
                    return Err(ParcelportError::Protocol(format!(
                        "zero-copy chunk {i} of {} bytes, header announced {}",
                        data.len(),
                        job.header.zc_sizes[i]
                    )));
                }
                job.received.push(Chunk::from(data));
                match job.buffers.pop_front() {
                    Some(buf) => {
                        job.phase = RecvPhase::Zc(i + 1);
                        self.post_chunk_recv(job, buf);
                    }
                    None => self.deliver(job),
                }
                Ok(())
            }
        }
    }

    fn deliver(&self, job: Box<RecvJob>) {
        self.counters.recv_jobs_live.fetch_sub(1, Ordering::Relaxed);
        let RecvJob {
            source, parts, received, ..
        } = *job;
        let mut chunks = received.into_iter();
        for (nzc, n) in parts {
            let parcel = Parcel {
                nzc_chunk: Chunk::new(nzc),
                zc_chunks: chunks.by_ref().take(n).collect(),
                merged: false,
            };
            self.counters.delivered.fetch_add(1, Ordering::Relaxed);
            self.handler.handle_parcel(source, parcel);
        }
    }

    pub fn stats(&self) -> ParcelportStats {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ParcelportStats {
            sends: l(&c.sends),
            completed: l(&c.completed),
            failed: l(&c.failed),
            delivered: l(&c.delivered),
            headers: l(&c.headers),
            submissions: l(&c.submissions),
            merged_submissions: l(&c.merged_submissions),
            send_jobs_live: l(&c.send_jobs_live),
            recv_jobs_live: l(&c.recv_jobs_live),
            background_calls: l(&c.background_calls),
            background_productive: l(&c.background_productive),
        }
    }

    pub fn progress_stats(&self) -> ProgressStats {
        self.engine.stats()
    }

    pub fn device_counters(&self, d: usize) -> CounterSnapshot {
        self.engine.device(d).counters()
    }

    /// Counters summed over all devices.
    pub fn total_counters(&self) -> CounterSnapshot {
        (0..self.cfg.num_devices).fold(CounterSnapshot::default(), |acc, d| acc.add(&self.device_counters(d)))
    }

    /// Installs a transport tracer on device `d`.
    pub fn set_tracer(&self, d: usize, tracer: Box<dyn Fn(&TraceEvent) + Send + Sync>) {
        self.engine.device(d).set_tracer(tracer);
    }

    /// What the parcelport still holds. Internal header receives are not
    /// counted; they are permanently posted.
    pub fn backlog(&self) -> Backlog {
        let mut b = Backlog {
            send_jobs: self.counters.send_jobs_live.load(Ordering::Relaxed),
            recv_jobs: self.counters.recv_jobs_live.load(Ordering::Relaxed),
            aggregated: self.agg.iter().map(|q| q.pending.lock().len()).sum(),
            pool_entries: self.send_pool.len() + self.recv_pool.len(),
            shared_queue: self.engine.shared_backlog(),
            ..Default::default()
        };
        for d in 0..self.cfg.num_devices {
            let o = self.engine.occupancy(d);
            b.staged_events += o.staged_events;
            b.staged_arrivals += o.staged_arrivals;
            b.unexpected += o.unexpected;
        }
        b
    }

    /// Every instrumented lock on a communication path.
    pub fn lock_audit(&self) -> Vec<LockReport> {
        let mut out = self.engine.lock_reports();
        out.push(LockReport::new("pool.send", self.send_pool.lock_stats()));
        out.push(LockReport::new("pool.recv", self.recv_pool.lock_stats()));
        for (dest, q) in self.agg.iter().enumerate() {
            out.push(LockReport::new(format!("agg{dest}.pending"), q.pending.stats()));
            out.push(LockReport::new(format!("agg{dest}.flush"), q.flush.stats()));
        }
        out
    }
}

impl RecvJob {
    /// Copy of the bookkeeping fields for diagnostics.
    fn dump(&self) -> RecvJob {
        RecvJob {
            source: self.source,
            device: self.device,
            tag: self.tag,
            header: HeaderFrame {
                piggyback: None,
                ..self.header.clone()
            },
            phase: self.phase,
            parts: Vec::new(),
            buffers: VecDeque::new(),
            received: Vec::new(),
        }
    }
}

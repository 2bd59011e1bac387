//! Emulated native network layer.
//!
//! A [`Device`] is one independent set of communication resources: a channel
//! to every peer, an arrival staging area fed by the "NIC", a match table of
//! posted receives and unexpected arrivals, and a slab pool for one-sided
//! puts. Two backends exist: an in-process [`LoopbackFabric`] supporting any
//! number of ranks, and TCP between processes.
//!
//! Devices are internally synchronized with per-structure locks and lock-free
//! queues only; coarse locking is layered on top by the progress engine.

pub mod buffer;
pub mod tcp;
pub mod wire;

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;

use crossbeam_queue::SegQueue;
use parking_lot::Mutex;
use thiserror::Error;

pub use buffer::{Buffer, BufferPool};
pub use tcp::TcpConfig;
pub use wire::{Frame, FrameKind};

use crate::lockstat::{LockReport, TrackedMutex};
use crate::parcel::HEADER_BOUND;
use tcp::TcpLink;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("rank {0} cannot send to itself")]
    SelfSend(u32),
    #[error("rank {peer} does not exist in a world of {world}")]
    NoSuchPeer { peer: u32, world: u32 },
    #[error("payload of {len} bytes exceeds the {limit}-byte limit")]
    PayloadTooLarge { len: usize, limit: usize },
    #[error("receive buffer of {capacity} bytes cannot hold a {needed}-byte message")]
    Truncated { needed: usize, capacity: usize },
    #[error("channel closed")]
    ChannelClosed,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

/// In-process network connecting `world` ranks with `devices` devices each.
/// Each (rank, device) owns an arrival queue that peers push frames into.
pub struct LoopbackFabric {
    world: u32,
    devices: usize,
    inbound: Vec<Arc<SegQueue<Frame>>>,
}

impl LoopbackFabric {
    pub fn new(world: u32, devices: usize) -> Arc<Self> {
        let inbound = (0..world as usize * devices).map(|_| Arc::new(SegQueue::new())).collect();
        Arc::new(LoopbackFabric {
            world,
            devices,
            inbound,
        })
    }

    fn inbound(&self, rank: u32, device: u8) -> Result<Arc<SegQueue<Frame>>, TransportError> {
        if rank >= self.world || device as usize >= self.devices {
            return Err(TransportError::Startup(format!(
                "rank {rank} device {device} outside a loopback fabric of {} ranks x {} devices",
                self.world, self.devices
            )));
        }
        Ok(self.inbound[rank as usize * self.devices + device as usize].clone())
    }
}

pub enum Backend {
    Loopback(Arc<LoopbackFabric>),
    Tcp(TcpConfig),
}

/// Which kind of frame a posted receive accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchClass {
    Header,
    Followup,
}

/// Receive filter: message class, source rank (`None` = any source) and tag
/// (`None` = any tag).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchSpec {
    pub class: MatchClass,
    pub source: Option<u32>,
    pub tag: Option<u32>,
}

impl MatchSpec {
    pub fn any_header() -> Self {
        MatchSpec {
            class: MatchClass::Header,
            source: None,
            tag: None,
        }
    }

    pub fn header(tag: u32) -> Self {
        MatchSpec {
            class: MatchClass::Header,
            source: None,
            tag: Some(tag),
        }
    }

    pub fn followup(source: u32, tag: u32) -> Self {
        MatchSpec {
            class: MatchClass::Followup,
            source: Some(source),
            tag: Some(tag),
        }
    }

    fn matches(&self, frame: &Frame) -> bool {
        let class = match frame.kind {
            FrameKind::HeaderSendRecv => MatchClass::Header,
            FrameKind::Followup => MatchClass::Followup,
            FrameKind::HeaderPut => return false,
        };
        class == self.class
            && self.source.map_or(true, |s| s == frame.source)
            && self.tag.map_or(true, |t| t == frame.tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendKind {
    Header,
    Followup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetEventKind {
    SendDone,
    RecvDone,
    PutArrived,
}

/// One finished operation observed by polling a device.
pub struct NetEvent<X> {
    pub kind: NetEventKind,
    pub tag: u32,
    pub peer: u32,
    pub device_index: u8,
    /// Receiver-side completion queue a put is addressed to.
    pub target_queue: u32,
    pub payload: Buffer,
    /// Context attached when the operation was posted; absent for puts.
    pub context: Option<X>,
    pub error: Option<TransportError>,
    pub ticket: u64,
}

impl<X> fmt::Debug for NetEvent<X> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetEvent")
            .field("kind", &self.kind)
            .field("tag", &self.tag)
            .field("peer", &self.peer)
            .field("device_index", &self.device_index)
            .field("payload", &self.payload)
            .field("error", &self.error)
            .field("ticket", &self.ticket)
            .finish()
    }
}

/// A request refused before anything was put on the wire; hands the context back.
pub struct Rejected<X> {
    pub error: TransportError,
    pub context: X,
}

impl<X> fmt::Debug for Rejected<X> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rejected({})", self.error)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxTicket(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RxTicket(pub u64);

/// Transport-level instrumentation hook.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Emitted {
        ticket: u64,
        peer: u32,
        kind: FrameKind,
        tag: u32,
    },
    SendDoneDelivered {
        ticket: u64,
        peer: u32,
        tag: u32,
    },
}

pub type Tracer = Box<dyn Fn(&TraceEvent) + Send + Sync>;

#[derive(Debug, Default)]
struct Counters {
    header_sendrecv_sent: AtomicU64,
    header_put_sent: AtomicU64,
    followup_sent: AtomicU64,
    frames_arrived: AtomicU64,
    puts_arrived: AtomicU64,
    unexpected: AtomicU64,
    recvs_posted: AtomicU64,
    recvs_matched: AtomicU64,
    recv_done: AtomicU64,
    send_done: AtomicU64,
    truncations: AtomicU64,
}

/// Point-in-time copy of a device's monotonic counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub header_sendrecv_sent: u64,
    pub header_put_sent: u64,
    pub followup_sent: u64,
    pub frames_arrived: u64,
    pub puts_arrived: u64,
    /// Arrivals with no matching posted receive ("would-be RNR").
    pub unexpected: u64,
    pub recvs_posted: u64,
    pub recvs_matched: u64,
    pub recv_done: u64,
    pub send_done: u64,
    pub truncations: u64,
    pub protocol_errors: u64,
}

impl CounterSnapshot {
    pub fn frames_sent(&self) -> u64 {
        self.header_sendrecv_sent + self.header_put_sent + self.followup_sent
    }

    pub fn headers_sent(&self) -> u64 {
        self.header_sendrecv_sent + self.header_put_sent
    }

    /// Field-wise difference against an earlier snapshot.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            header_sendrecv_sent: self.header_sendrecv_sent - earlier.header_sendrecv_sent,
            header_put_sent: self.header_put_sent - earlier.header_put_sent,
            followup_sent: self.followup_sent - earlier.followup_sent,
            frames_arrived: self.frames_arrived - earlier.frames_arrived,
            puts_arrived: self.puts_arrived - earlier.puts_arrived,
            unexpected: self.unexpected - earlier.unexpected,
            recvs_posted: self.recvs_posted - earlier.recvs_posted,
            recvs_matched: self.recvs_matched - earlier.recvs_matched,
            recv_done: self.recv_done - earlier.recv_done,
            send_done: self.send_done - earlier.send_done,
            truncations: self.truncations - earlier.truncations,
            protocol_errors: self.protocol_errors - earlier.protocol_errors,
        }
    }

    pub fn add(&self, other: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            header_sendrecv_sent: self.header_sendrecv_sent + other.header_sendrecv_sent,
            header_put_sent: self.header_put_sent + other.header_put_sent,
            followup_sent: self.followup_sent + other.followup_sent,
            frames_arrived: self.frames_arrived + other.frames_arrived,
            puts_arrived: self.puts_arrived + other.puts_arrived,
            unexpected: self.unexpected + other.unexpected,
            recvs_posted: self.recvs_posted + other.recvs_posted,
            recvs_matched: self.recvs_matched + other.recvs_matched,
            recv_done: self.recv_done + other.recv_done,
            send_done: self.send_done + other.send_done,
            truncations: self.truncations + other.truncations,
            protocol_errors: self.protocol_errors + other.protocol_errors,
        }
    }
}

enum Link {
    Loopback(Arc<SegQueue<Frame>>),
    Tcp(TcpLink),
}

struct PostedRecv<X> {
    spec: MatchSpec,
    buffer: Vec<u8>,
    context: X,
    ticket: u64,
}

struct MatchTable<X> {
    posted: VecDeque<PostedRecv<X>>,
    unexpected: VecDeque<Frame>,
}

/// Occupancy of a device's internal structures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceOccupancy {
    pub staged_events: usize,
    pub staged_arrivals: usize,
    pub posted_recvs: usize,
    pub unexpected: usize,
}

impl DeviceOccupancy {
    pub fn is_idle(&self) -> bool {
        self.staged_events == 0 && self.staged_arrivals == 0 && self.unexpected == 0
    }
}

pub struct Device<X> {
    rank: u32,
    world: u32,
    index: u8,
    links: Vec<Option<Link>>,
    inbound: Arc<SegQueue<Frame>>,
    backlog: SegQueue<NetEvent<X>>,
    matching: TrackedMutex<MatchTable<X>>,
    pool: Arc<BufferPool>,
    counters: Counters,
    protocol_errors: Arc<AtomicU64>,
    next_ticket: AtomicU64,
    tracer: OnceLock<Tracer>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl<X: Send> Device<X> {
    /// Creates device `device_index` of `rank` and connects it to every peer.
    pub fn create(rank: u32, world: u32, device_index: u8, backend: Backend) -> Result<Self, TransportError> {
        if rank >= world {
            return Err(TransportError::Startup(format!("rank {rank} outside a world of {world}")));
        }
        let protocol_errors = Arc::new(AtomicU64::new(0));
        let mut readers = Vec::new();
        let (inbound, links) = match backend {
            Backend::Loopback(fabric) => {
                if fabric.world != world {
                    return Err(TransportError::Startup(format!(
                        "loopback fabric has {} ranks, world is {world}",
                        fabric.world
                    )));
                }
                let inbound = fabric.inbound(rank, device_index)?;
                let links = (0..world)
                    .map(|p| {
                        if p == rank {
                            Ok(None)
                        } else {
                            fabric.inbound(p, device_index).map(|q| Some(Link::Loopback(q)))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (inbound, links)
            }
            Backend::Tcp(cfg) => {
                let inbound = Arc::new(SegQueue::new());
                let streams = tcp::establish(rank, world, device_index, cfg)?;
                let mut links = Vec::with_capacity(world as usize);
                for (peer, stream) in streams.into_iter().enumerate() {
                    match stream {
                        None => links.push(None),
                        Some(s) => {
                            let (link, handle) =
                                tcp::attach(s, peer as u32, device_index, inbound.clone(), protocol_errors.clone())?;
                            readers.push(handle);
                            links.push(Some(Link::Tcp(link)));
                        }
                    }
                }
                (inbound, links)
            }
        };
        Ok(Device {
            rank,
            world,
            index: device_index,
            links,
            inbound,
            backlog: SegQueue::new(),
            matching: TrackedMutex::new(MatchTable {
                posted: VecDeque::new(),
                unexpected: VecDeque::new(),
            }),
            pool: BufferPool::new(HEADER_BOUND),
            counters: Counters::default(),
            protocol_errors,
            next_ticket: AtomicU64::new(1),
            tracer: OnceLock::new(),
            readers: Mutex::new(readers),
        })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn buffer_pool(&self) -> &Arc<BufferPool> {
        &self.pool
    }

    /// Installs an instrumentation hook; only the first call takes effect.
    pub fn set_tracer(&self, tracer: Tracer) {
        let _ = self.tracer.set(tracer);
    }

    fn trace(&self, ev: TraceEvent) {
        if let Some(t) = self.tracer.get() {
            t(&ev);
        }
    }

    fn ticket(&self) -> u64 {
        self.next_ticket.fetch_add(1, Ordering::Relaxed)
    }

    fn link(&self, peer: u32) -> Result<&Link, TransportError> {
        if peer == self.rank {
            return Err(TransportError::SelfSend(peer));
        }
        self.links
            .get(peer as usize)
            .and_then(Option::as_ref)
            .ok_or(TransportError::NoSuchPeer {
                peer,
                world: self.world,
            })
    }

    fn transmit(&self, peer: u32, kind: FrameKind, tag: u32, bytes: &[u8], ctx: X) -> Result<TxTicket, Rejected<X>> {
        let link = match self.link(peer) {
            Ok(l) => l,
            Err(error) => return Err(Rejected { error, context: ctx }),
        };
        if bytes.len() >= u32::MAX as usize {
            return Err(Rejected {
                error: TransportError::PayloadTooLarge {
                    len: bytes.len(),
                    limit: u32::MAX as usize - 1,
                },
                context: ctx,
            });
        }
        let ticket = self.ticket();
        self.trace(TraceEvent::Emitted { ticket, peer, kind, tag });
        let result = match link {
            Link::Loopback(q) => {
                q.push(Frame {
                    kind,
                    device_index: self.index,
                    tag,
                    source: self.rank,
                    payload: bytes.to_vec(),
                });
                Ok(())
            }
            Link::Tcp(link) => link.transmit(&wire::encode_frame(kind, self.index, tag, self.rank, bytes)),
        };
        if result.is_ok() {
            let counter = match kind {
                FrameKind::HeaderSendRecv => &self.counters.header_sendrecv_sent,
                FrameKind::HeaderPut => &self.counters.header_put_sent,
                FrameKind::Followup => &self.counters.followup_sent,
            };
            counter.fetch_add(1, Ordering::Relaxed);
        }
        self.backlog.push(NetEvent {
            kind: NetEventKind::SendDone,
            tag,
            peer,
            device_index: self.index,
            target_queue: 0,
            payload: Buffer::empty(),
            context: Some(ctx),
            error: result.err(),
            ticket,
        });
        Ok(TxTicket(ticket))
    }

    /// Two-sided send. The frame is handed to the channel immediately; its
    /// `SendDone` event becomes visible to the next poll.
    pub fn tx_send(&self, peer: u32, kind: SendKind, tag: u32, bytes: &[u8], ctx: X) -> Result<TxTicket, Rejected<X>> {
        let kind = match kind {
            SendKind::Header => FrameKind::HeaderSendRecv,
            SendKind::Followup => FrameKind::Followup,
        };
        self.transmit(peer, kind, tag, bytes, ctx)
    }

    /// One-sided put into a runtime-allocated buffer on the receiver, which
    /// reports it as `PutArrived` addressed to `target_queue`.
    pub fn tx_put_dynamic(&self, peer: u32, bytes: &[u8], target_queue: u32, ctx: X) -> Result<TxTicket, Rejected<X>> {
        if bytes.len() > self.pool.slab_len() {
            return Err(Rejected {
                error: TransportError::PayloadTooLarge {
                    len: bytes.len(),
                    limit: self.pool.slab_len(),
                },
                context: ctx,
            });
        }
        self.transmit(peer, FrameKind::HeaderPut, target_queue, bytes, ctx)
    }

    /// Posts a receive. An already-arrived matching message (oldest first) is
    /// consumed at once and its `RecvDone` staged for the next poll.
    pub fn rx_post(&self, spec: MatchSpec, buffer: Vec<u8>, ctx: X) -> RxTicket {
        let ticket = self.ticket();
        self.counters.recvs_posted.fetch_add(1, Ordering::Relaxed);
        let mut table = self.matching.lock();
        let hit = table.unexpected.iter().position(|f| spec.matches(f));
        match hit {
            Some(i) => {
                let frame = table.unexpected.remove(i).expect("index in range");
                drop(table);
                let ev = self.deliver(
                    PostedRecv {
                        spec,
                        buffer,
                        context: ctx,
                        ticket,
                    },
                    frame,
                );
                self.backlog.push(ev);
            }
            None => table.posted.push_back(PostedRecv {
                spec,
                buffer,
                context: ctx,
                ticket,
            }),
        }
        RxTicket(ticket)
    }

    fn deliver(&self, recv: PostedRecv<X>, frame: Frame) -> NetEvent<X> {
        self.counters.recvs_matched.fetch_add(1, Ordering::Relaxed);
        let PostedRecv {
            mut buffer,
            context,
            ticket,
            ..
        } = recv;
        let error = if frame.payload.len() > buffer.len() {
            self.counters.truncations.fetch_add(1, Ordering::Relaxed);
            Some(TransportError::Truncated {
                needed: frame.payload.len(),
                capacity: buffer.len(),
            })
        } else {
            buffer[..frame.payload.len()].copy_from_slice(&frame.payload);
            buffer.truncate(frame.payload.len());
            None
        };
        NetEvent {
            kind: NetEventKind::RecvDone,
            tag: frame.tag,
            peer: frame.source,
            device_index: self.index,
            target_queue: 0,
            payload: Buffer::from_vec(buffer),
            context: Some(context),
            error,
            ticket,
        }
    }

    /// Handles one arrived frame; returns the event it completes, if any.
    fn accept(&self, frame: Frame) -> Option<NetEvent<X>> {
        self.counters.frames_arrived.fetch_add(1, Ordering::Relaxed);
        if frame.kind == FrameKind::HeaderPut {
            self.counters.puts_arrived.fetch_add(1, Ordering::Relaxed);
            let payload = self.pool.fill(&frame.payload);
            return Some(NetEvent {
                kind: NetEventKind::PutArrived,
                tag: frame.tag,
                peer: frame.source,
                device_index: self.index,
                target_queue: frame.tag,
                payload,
                context: None,
                error: None,
                ticket: 0,
            });
        }
        let mut table = self.matching.lock();
        match table.posted.iter().position(|r| r.spec.matches(&frame)) {
            Some(i) => {
                let recv = table.posted.remove(i).expect("index in range");
                drop(table);
                Some(self.deliver(recv, frame))
            }
            None => {
                table.unexpected.push_back(frame);
                self.counters.unexpected.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Drains up to `max_events` completed operations without blocking.
    pub fn tx_rx_poll(&self, max_events: usize) -> Vec<NetEvent<X>> {
        let mut out = Vec::new();
        self.poll_into(max_events, &mut out);
        out
    }

    /// As [`Device::tx_rx_poll`], appending to `out`; returns the number added.
    pub fn poll_into(&self, max_events: usize, out: &mut Vec<NetEvent<X>>) -> usize {
        let max_events = max_events.max(1);
        let start = out.len();
        while out.len() - start < max_events {
            match self.backlog.pop() {
                Some(ev) => out.push(self.observe(ev)),
                None => break,
            }
        }
        let mut budget = max_events;
        while out.len() - start < max_events && budget > 0 {
            let Some(frame) = self.inbound.pop() else { break };
            budget -= 1;
            if let Some(ev) = self.accept(frame) {
                out.push(self.observe(ev));
            }
        }
        out.len() - start
    }

    fn observe(&self, ev: NetEvent<X>) -> NetEvent<X> {
        match ev.kind {
            NetEventKind::SendDone => {
                self.counters.send_done.fetch_add(1, Ordering::Relaxed);
                self.trace(TraceEvent::SendDoneDelivered {
                    ticket: ev.ticket,
                    peer: ev.peer,
                    tag: ev.tag,
                });
            }
            NetEventKind::RecvDone => {
                self.counters.recv_done.fetch_add(1, Ordering::Relaxed);
            }
            NetEventKind::PutArrived => {}
        }
        ev
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            header_sendrecv_sent: l(&c.header_sendrecv_sent),
            header_put_sent: l(&c.header_put_sent),
            followup_sent: l(&c.followup_sent),
            frames_arrived: l(&c.frames_arrived),
            puts_arrived: l(&c.puts_arrived),
            unexpected: l(&c.unexpected),
            recvs_posted: l(&c.recvs_posted),
            recvs_matched: l(&c.recvs_matched),
            recv_done: l(&c.recv_done),
            send_done: l(&c.send_done),
            truncations: l(&c.truncations),
            protocol_errors: self.protocol_errors.load(Ordering::Relaxed),
        }
    }

    pub fn occupancy(&self) -> DeviceOccupancy {
        let table = self.matching.lock();
        DeviceOccupancy {
            staged_events: self.backlog.len(),
            staged_arrivals: self.inbound.len(),
            posted_recvs: table.posted.len(),
            unexpected: table.unexpected.len(),
        }
    }

    pub fn lock_reports(&self) -> Vec<LockReport> {
        let mut out = vec![LockReport::new(format!("device{}.match", self.index), self.matching.stats())];
        for (peer, link) in self.links.iter().enumerate() {
            if let Some(Link::Tcp(l)) = link {
                out.push(LockReport::new(format!("device{}.tx{peer}", self.index), l.lock_stats()));
            }
        }
        out
    }
}

impl<X> Drop for Device<X> {
    fn drop(&mut self) {
        for link in self.links.iter().flatten() {
            if let Link::Tcp(l) = link {
                l.shutdown();
            }
        }
        for h in self.readers.get_mut().drain(..) {
            let _ = h.join();
        }
    }
}

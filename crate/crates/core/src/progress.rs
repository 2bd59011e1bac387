//! Progress engine: drains device events, routes each to its completion
//! target (shared queue or synchronizer), and keeps internal header
//! receives posted. Invocation is either explicit or a side effect of
//! testing a synchronizer; device access is serialized according to the
//! configured lock strategy.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::completion::{CompletionDescriptor, CompletionQueue, QueueKind, Synchronizer};
use crate::lockstat::{enter_domain, LockReport, TrackedMutex};
use crate::parcel::HEADER_BOUND;
use crate::transport::{
    Device, DeviceOccupancy, MatchSpec, NetEvent, NetEventKind, Rejected, RxTicket, SendKind, TransportError,
    TxTicket,
};

pub const DEFAULT_POLL_BATCH: usize = 32;
/// Completion-queue id of the shared queue; the only id puts may address.
pub const SHARED_QUEUE_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProgressMode {
    /// Workers call `progress` from their idle loop.
    Explicit,
    /// Progress only happens inside synchronizer tests.
    OnTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LockStrategy {
    CoarseBlocking,
    CoarseTry,
    Fine,
}

impl LockStrategy {
    pub fn is_coarse(self) -> bool {
        !matches!(self, LockStrategy::Fine)
    }
}

impl fmt::Display for ProgressMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProgressMode::Explicit => "explicit",
            ProgressMode::OnTest => "on_test",
        })
    }
}

impl FromStr for ProgressMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "explicit" => Ok(ProgressMode::Explicit),
            "on_test" | "on-test" | "implicit" => Ok(ProgressMode::OnTest),
            other => Err(format!("unknown progress mode {other:?}")),
        }
    }
}

impl fmt::Display for LockStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LockStrategy::CoarseBlocking => "coarse_blocking",
            LockStrategy::CoarseTry => "coarse_try",
            LockStrategy::Fine => "fine",
        })
    }
}

impl FromStr for LockStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "coarse_blocking" | "blocking" | "block" => Ok(LockStrategy::CoarseBlocking),
            "coarse_try" | "try" => Ok(LockStrategy::CoarseTry),
            "fine" | "lockless" => Ok(LockStrategy::Fine),
            other => Err(format!("unknown lock strategy {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProgressConfig {
    pub mode: ProgressMode,
    pub lock_strategy: LockStrategy,
    pub poll_batch: usize,
}

impl Default for ProgressConfig {
    fn default() -> Self {
        ProgressConfig {
            mode: ProgressMode::Explicit,
            lock_strategy: LockStrategy::Fine,
            poll_batch: DEFAULT_POLL_BATCH,
        }
    }
}

/// How header messages reach the receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeaderMode {
    /// One-sided puts into pool buffers, completed to the shared queue.
    Put,
    /// Wildcard receives kept posted by progress, completed to the shared queue.
    SendRecvQueue { receives: usize },
    /// Wildcard receives, each with its own synchronizer; a receive is
    /// reposted when its synchronizer is consumed.
    SendRecvSync { receives: usize },
}

pub type Descriptor<C> = CompletionDescriptor<C>;

/// Where a user operation's completion is delivered.
pub enum Target<C> {
    Queue,
    Sync(Arc<Synchronizer<Descriptor<C>>>),
}

impl<C> Clone for Target<C> {
    fn clone(&self) -> Self {
        match self {
            Target::Queue => Target::Queue,
            Target::Sync(s) => Target::Sync(s.clone()),
        }
    }
}

/// Device-level context of every posted operation.
pub enum Route<C> {
    HeaderSlot(usize),
    Deliver { target: Target<C>, context: C },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProgressError {
    #[error("poll batch must be at least 1")]
    ZeroBatch,
    #[error("at least one device is required")]
    NoDevices,
    #[error("header mode {0:?} needs a shared completion queue")]
    QueueRequired(HeaderMode),
    #[error("on-test progress cannot drive queue-completed header mode {0:?}")]
    OnTestNeedsSync(HeaderMode),
}

#[derive(Default)]
struct DeviceState {
    /// Threads currently inside this device's progress body.
    inside: AtomicUsize,
    max_inside: AtomicUsize,
    header_outstanding: AtomicUsize,
    max_header_outstanding: AtomicUsize,
}

#[derive(Default)]
struct Counters {
    explicit_calls: AtomicU64,
    implicit_calls: AtomicU64,
    try_failures: AtomicU64,
    productive: AtomicU64,
    routed: AtomicU64,
    misrouted: AtomicU64,
    shared_pushed: AtomicU64,
    shared_popped: AtomicU64,
}

/// Snapshot of engine instrumentation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProgressStats {
    /// Calls to [`ProgressEngine::progress`].
    pub explicit_calls: u64,
    /// Progress invocations made from inside a synchronizer test.
    pub implicit_calls: u64,
    /// Coarse try-lock attempts that found the device busy.
    pub try_failures: u64,
    /// Progress bodies that routed at least one event.
    pub productive: u64,
    pub routed: u64,
    /// Events that had no valid destination (dropped and logged).
    pub misrouted: u64,
    /// Per device: most threads ever observed inside its progress body.
    pub max_inside: Vec<usize>,
    /// Per device: most internal header receives ever outstanding.
    pub max_header_outstanding: Vec<usize>,
}

pub struct ProgressEngine<C> {
    cfg: ProgressConfig,
    header_mode: HeaderMode,
    devices: Vec<Device<Route<C>>>,
    coarse: Vec<TrackedMutex<()>>,
    test_guard: TrackedMutex<()>,
    shared: Option<CompletionQueue<Descriptor<C>>>,
    slots: Vec<Vec<Arc<Synchronizer<Descriptor<C>>>>>,
    state: Vec<DeviceState>,
    counters: Counters,
}

impl<C: Send> ProgressEngine<C> {
    /// Takes ownership of the devices and posts the initial header receives.
    pub fn new(
        cfg: ProgressConfig,
        header_mode: HeaderMode,
        devices: Vec<Device<Route<C>>>,
        shared_queue: Option<QueueKind>,
    ) -> Result<Self, ProgressError> {
        if cfg.poll_batch == 0 {
            return Err(ProgressError::ZeroBatch);
        }
        if devices.is_empty() {
            return Err(ProgressError::NoDevices);
        }
        let needs_queue = matches!(header_mode, HeaderMode::Put | HeaderMode::SendRecvQueue { .. });
        if needs_queue && shared_queue.is_none() {
            return Err(ProgressError::QueueRequired(header_mode));
        }
        if needs_queue && cfg.mode == ProgressMode::OnTest {
            return Err(ProgressError::OnTestNeedsSync(header_mode));
        }
        let n = devices.len();
        let slots = match header_mode {
            HeaderMode::SendRecvSync { receives } => (0..n)
                .map(|_| (0..receives.max(1)).map(|_| Arc::new(Synchronizer::new())).collect())
                .collect(),
            _ => (0..n).map(|_| Vec::new()).collect(),
        };
        let engine = ProgressEngine {
            cfg,
            header_mode,
            devices,
            coarse: (0..n).map(|_| TrackedMutex::new(())).collect(),
            test_guard: TrackedMutex::new(()),
            shared: shared_queue.map(CompletionQueue::new),
            slots,
            state: (0..n).map(|_| DeviceState::default()).collect(),
            counters: Counters::default(),
        };
        let receives = match header_mode {
            HeaderMode::Put => 0,
            HeaderMode::SendRecvQueue { receives } | HeaderMode::SendRecvSync { receives } => receives.max(1),
        };
        for d in 0..n {
            for slot in 0..receives {
                engine.post_header_slot(d, slot);
            }
        }
        Ok(engine)
    }

    pub fn config(&self) -> &ProgressConfig {
        &self.cfg
    }

    pub fn header_mode(&self) -> HeaderMode {
        self.header_mode
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, d: usize) -> &Device<Route<C>> {
        &self.devices[d]
    }

    pub fn has_shared_queue(&self) -> bool {
        self.shared.is_some()
    }

    fn with_device<R>(&self, d: usize, f: impl FnOnce(&Device<Route<C>>) -> R) -> R {
        let _g = self.cfg.lock_strategy.is_coarse().then(|| self.coarse[d].lock());
        f(&self.devices[d])
    }

    fn post_header_slot(&self, d: usize, slot: usize) {
        let st = &self.state[d];
        let now = st.header_outstanding.fetch_add(1, Ordering::AcqRel) + 1;
        st.max_header_outstanding.fetch_max(now, Ordering::AcqRel);
        self.devices[d].rx_post(MatchSpec::any_header(), vec![0; HEADER_BOUND], Route::HeaderSlot(slot));
    }

    /// Two-sided send on device `d`.
    pub fn send(
        &self,
        d: usize,
        peer: u32,
        kind: SendKind,
        tag: u32,
        bytes: &[u8],
        target: Target<C>,
        context: C,
    ) -> Result<TxTicket, Rejected<C>> {
        self.with_device(d, |dev| dev.tx_send(peer, kind, tag, bytes, Route::Deliver { target, context }))
            .map_err(unroute)
    }

    /// One-sided put of a header into the peer's shared queue.
    pub fn put(&self, d: usize, peer: u32, bytes: &[u8], target: Target<C>, context: C) -> Result<TxTicket, Rejected<C>> {
        self.with_device(d, |dev| {
            dev.tx_put_dynamic(peer, bytes, SHARED_QUEUE_ID, Route::Deliver { target, context })
        })
        .map_err(unroute)
    }

    pub fn post_recv(&self, d: usize, spec: MatchSpec, buffer: Vec<u8>, target: Target<C>, context: C) -> RxTicket {
        self.with_device(d, |dev| dev.rx_post(spec, buffer, Route::Deliver { target, context }))
    }

    /// Explicit progress on device `d`. Returns true iff at least one event
    /// was routed.
    pub fn progress(&self, d: usize) -> bool {
        self.counters.explicit_calls.fetch_add(1, Ordering::Relaxed);
        self.progress_body(d)
    }

    fn progress_body(&self, d: usize) -> bool {
        let _domain = enter_domain(d as u32);
        let _guard = match self.cfg.lock_strategy {
            LockStrategy::CoarseBlocking => Some(self.coarse[d].lock()),
            LockStrategy::CoarseTry => match self.coarse[d].try_lock() {
                Some(g) => Some(g),
                None => {
                    self.counters.try_failures.fetch_add(1, Ordering::Relaxed);
                    return false;
                }
            },
            LockStrategy::Fine => None,
        };
        let st = &self.state[d];
        let now = st.inside.fetch_add(1, Ordering::AcqRel) + 1;
        st.max_inside.fetch_max(now, Ordering::AcqRel);
        let mut events = Vec::with_capacity(self.cfg.poll_batch);
        self.devices[d].poll_into(self.cfg.poll_batch, &mut events);
        let any = !events.is_empty();
        for ev in events {
            self.route(d, ev);
        }
        st.inside.fetch_sub(1, Ordering::AcqRel);
        if any {
            self.counters.productive.fetch_add(1, Ordering::Relaxed);
        }
        any
    }

    fn route(&self, d: usize, ev: NetEvent<Route<C>>) {
        self.counters.routed.fetch_add(1, Ordering::Relaxed);
        let NetEvent {
            kind,
            tag,
            peer,
            device_index,
            target_queue,
            payload,
            context,
            error,
            ticket,
        } = ev;
        let mut desc = NetEvent {
            kind,
            tag,
            peer,
            device_index,
            target_queue,
            payload,
            context: None,
            error,
            ticket,
        };
        match context {
            None => {
                debug_assert_eq!(kind, NetEventKind::PutArrived);
                if target_queue != SHARED_QUEUE_ID {
                    desc.error = Some(TransportError::Malformed(format!("put addressed to unknown queue {target_queue}")));
                }
                self.push_shared(desc);
            }
            Some(Route::HeaderSlot(slot)) => {
                self.state[d].header_outstanding.fetch_sub(1, Ordering::AcqRel);
                match self.header_mode {
                    HeaderMode::SendRecvSync { .. } => {
                        if self.slots[d][slot].signal(desc).is_err() {
                            log::error!("device {d}: header slot {slot} signalled while still full");
                            self.counters.misrouted.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    _ => {
                        self.push_shared(desc);
                        // already under this device's coarse lock, if any
                        self.post_header_slot(d, slot);
                    }
                }
            }
            Some(Route::Deliver { target, context }) => {
                desc.context = Some(context);
                self.complete_locally(target, desc);
            }
        }
    }

    /// Delivers a locally produced descriptor (e.g. a refused operation) as
    /// if progress had routed it.
    pub fn complete_locally(&self, target: Target<C>, desc: Descriptor<C>) {
        match target {
            Target::Queue => self.push_shared(desc),
            Target::Sync(s) => {
                if s.signal(desc).is_err() {
                    log::error!("synchronizer signalled twice");
                    self.counters.misrouted.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    fn push_shared(&self, desc: Descriptor<C>) {
        match &self.shared {
            Some(q) => {
                q.push(desc);
                self.counters.shared_pushed.fetch_add(1, Ordering::Release);
            }
            None => {
                log::error!("dropping {desc:?}: no shared completion queue");
                self.counters.misrouted.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Tests `s`; if it is empty, runs one progress pass on device `d` and
    /// tests again. Under a coarse lock strategy the whole call is guarded
    /// by a try lock and returns `None` at once when contended.
    pub fn test_with_implicit_progress(&self, s: &Synchronizer<Descriptor<C>>, d: usize) -> Option<Descriptor<C>> {
        let _guard = if self.cfg.lock_strategy.is_coarse() {
            Some(self.test_guard.try_lock()?)
        } else {
            None
        };
        if let Some(v) = s.test() {
            return Some(v);
        }
        self.counters.implicit_calls.fetch_add(1, Ordering::Relaxed);
        self.progress_body(d);
        s.test()
    }

    /// Tests a header slot's synchronizer (with implicit progress in on-test
    /// mode). A completed slot is re-armed and its receive reposted before
    /// the header is returned.
    pub fn test_header_slot(&self, d: usize, slot: usize) -> Option<Descriptor<C>> {
        let s = self.slots.get(d)?.get(slot)?;
        let got = match self.cfg.mode {
            ProgressMode::OnTest => self.test_with_implicit_progress(s, d),
            ProgressMode::Explicit => s.test(),
        }?;
        s.reset();
        self.with_device(d, |_| self.post_header_slot(d, slot));
        Some(got)
    }

    pub fn header_slots(&self, d: usize) -> usize {
        self.slots[d].len()
    }

    pub fn pop_shared(&self) -> Option<Descriptor<C>> {
        let d = self.shared.as_ref()?.pop()?;
        self.counters.shared_popped.fetch_add(1, Ordering::Release);
        Some(d)
    }

    /// Descriptors pushed to the shared queue and not yet popped.
    pub fn shared_backlog(&self) -> u64 {
        let popped = self.counters.shared_popped.load(Ordering::Acquire);
        self.counters.shared_pushed.load(Ordering::Acquire).saturating_sub(popped)
    }

    pub fn stats(&self) -> ProgressStats {
        let c = &self.counters;
        ProgressStats {
            explicit_calls: c.explicit_calls.load(Ordering::Relaxed),
            implicit_calls: c.implicit_calls.load(Ordering::Relaxed),
            try_failures: c.try_failures.load(Ordering::Relaxed),
            productive: c.productive.load(Ordering::Relaxed),
            routed: c.routed.load(Ordering::Relaxed),
            misrouted: c.misrouted.load(Ordering::Relaxed),
            max_inside: self.state.iter().map(|s| s.max_inside.load(Ordering::Relaxed)).collect(),
            max_header_outstanding: self
                .state
                .iter()
                .map(|s| s.max_header_outstanding.load(Ordering::Relaxed))
                .collect(),
        }
    }

    /// Internal header receives currently posted on device `d`.
    pub fn header_outstanding(&self, d: usize) -> usize {
        self.state[d].header_outstanding.load(Ordering::Relaxed)
    }

    pub fn occupancy(&self, d: usize) -> DeviceOccupancy {
        self.devices[d].occupancy()
    }

    /// Runs `f` while holding device `d`'s coarse lock (test support for
    /// contention experiments).
    pub fn hold_device_lock<R>(&self, d: usize, f: impl FnOnce() -> R) -> R {
        let _g = self.coarse[d].lock();
        f()
    }

    pub fn lock_reports(&self) -> Vec<LockReport> {
        let mut out = Vec::new();
        for (d, m) in self.coarse.iter().enumerate() {
            out.push(LockReport::new(format!("progress.coarse{d}"), m.stats()));
        }
        out.push(LockReport::new("progress.test_guard", self.test_guard.stats()));
        if let Some(stats) = self.shared.as_ref().and_then(|q| q.lock_stats()) {
            out.push(LockReport::new("cq.shared", stats));
        }
        for dev in &self.devices {
            out.extend(dev.lock_reports());
        }
        out
    }
}

fn unroute<C>(r: Rejected<Route<C>>) -> Rejected<C> {
    match r.context {
        Route::Deliver { context, .. } => Rejected {
            error: r.error,
            context,
        },
        Route::HeaderSlot(_) => unreachable!("header receives are never sent"),
    }
}

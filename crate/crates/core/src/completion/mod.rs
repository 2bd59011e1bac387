//! Completion-notification mechanisms: one-slot synchronizers, a
//! round-robin synchronizer pool, and three unbounded MPMC queues.
//!
//! The queues are generic; the runtime instantiates them with device
//! events ([`CompletionDescriptor`]) carrying an owned user context, so
//! payload and context ownership move to whoever pops or tests.

mod lcrq;
mod lockq;
mod msq;
mod synchronizer;

use std::fmt;
use std::str::FromStr;

pub use lcrq::{Lcrq, RING_CAPACITY, STARVATION_LIMIT};
pub use lockq::LockQueue;
pub use msq::MsQueue;
pub use synchronizer::{SignalError, Synchronizer, SynchronizerPool};

/// A finished communication operation as delivered to the parcelport.
pub type CompletionDescriptor<C> = crate::transport::NetEvent<C>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueueKind {
    Lcrq,
    Msq,
    LockQ,
}

impl QueueKind {
    pub const ALL: [QueueKind; 3] = [QueueKind::Lcrq, QueueKind::Msq, QueueKind::LockQ];
}

impl fmt::Display for QueueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueKind::Lcrq => "lcrq",
            QueueKind::Msq => "msq",
            QueueKind::LockQ => "lockq",
        })
    }
}

impl FromStr for QueueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lcrq" => Ok(QueueKind::Lcrq),
            "msq" | "ms" => Ok(QueueKind::Msq),
            "lockq" | "lock" => Ok(QueueKind::LockQ),
            other => Err(format!("unknown queue kind {other:?}")),
        }
    }
}

/// Structural counters exposed for tests and diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueueStats {
    /// Ring segments (LCRQ) or list nodes including the sentinel (MSQ)
    /// currently allocated.
    pub live_blocks: u64,
    /// Ring segments (LCRQ) or list nodes (MSQ) ever allocated.
    pub blocks_created: u64,
}

/// Unbounded MPMC FIFO. Pop never blocks; push never blocks indefinitely
/// (the lock-based variant may wait on its lock).
pub enum CompletionQueue<T> {
    Lcrq(Lcrq<T>),
    Msq(MsQueue<T>),
    LockQ(LockQueue<T>),
}

impl<T: Send> CompletionQueue<T> {
    pub fn new(kind: QueueKind) -> Self {
        match kind {
            QueueKind::Lcrq => CompletionQueue::Lcrq(Lcrq::new()),
            QueueKind::Msq => CompletionQueue::Msq(MsQueue::new()),
            QueueKind::LockQ => CompletionQueue::LockQ(LockQueue::new()),
        }
    }

    pub fn kind(&self) -> QueueKind {
        match self {
            CompletionQueue::Lcrq(_) => QueueKind::Lcrq,
            CompletionQueue::Msq(_) => QueueKind::Msq,
            CompletionQueue::LockQ(_) => QueueKind::LockQ,
        }
    }

    pub fn push(&self, value: T) {
        match self {
            CompletionQueue::Lcrq(q) => q.push(value),
            CompletionQueue::Msq(q) => q.push(value),
            CompletionQueue::LockQ(q) => q.push(value),
        }
    }

    pub fn pop(&self) -> Option<T> {
        match self {
            CompletionQueue::Lcrq(q) => q.pop(),
            CompletionQueue::Msq(q) => q.pop(),
            CompletionQueue::LockQ(q) => q.pop(),
        }
    }

    pub fn stats(&self) -> QueueStats {
        match self {
            CompletionQueue::Lcrq(q) => q.stats(),
            CompletionQueue::Msq(q) => q.stats(),
            CompletionQueue::LockQ(_) => QueueStats::default(),
        }
    }

    pub fn lock_stats(&self) -> Option<&crate::lockstat::LockStats> {
        match self {
            CompletionQueue::LockQ(q) => Some(q.lock_stats()),
            _ => None,
        }
    }
}

/// Named suspension points inside the lock-free queues; tests install a
/// per-thread hook to freeze a thread mid-operation.
#[cfg(test)]
pub(crate) mod stall {
    use std::cell::RefCell;

    thread_local! {
        static HOOK: RefCell<Option<Box<dyn Fn(&'static str)>>> = const { RefCell::new(None) };
    }

    pub(crate) fn install(hook: Box<dyn Fn(&'static str)>) {
        HOOK.with(|h| *h.borrow_mut() = Some(hook));
    }

    pub(crate) fn point(site: &'static str) {
        HOOK.with(|h| {
            if let Some(f) = h.borrow().as_ref() {
                f(site)
            }
        });
    }
}

#[cfg(not(test))]
pub(crate) mod stall {
    #[inline(always)]
    pub(crate) fn point(_site: &'static str) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{mpsc, Arc, Barrier};
    use std::thread;
    use std::time::Duration;

    const PRODUCERS: u64 = 8;
    const CONSUMERS: usize = 8;

    #[test]
    fn push_then_pop_single_thread() {
        for kind in QueueKind::ALL {
            let q = CompletionQueue::new(kind);
            assert_eq!(q.pop(), None);
            q.push(7u64);
            assert_eq!(q.pop(), Some(7));
            assert_eq!(q.pop(), None, "{kind}");
        }
    }

    #[test]
    fn interleaved_single_thread_is_strict_fifo() {
        for kind in QueueKind::ALL {
            let q = CompletionQueue::new(kind);
            let mut expect = 0u64;
            let mut next = 0u64;
            for round in 0..5_000u64 {
                for _ in 0..(round % 5) {
                    q.push(next);
                    next += 1;
                }
                for _ in 0..(round % 3) {
                    if let Some(v) = q.pop() {
                        assert_eq!(v, expect, "{kind}");
                        expect += 1;
                    }
                }
            }
            while let Some(v) = q.pop() {
                assert_eq!(v, expect);
                expect += 1;
            }
            assert_eq!(expect, next);
        }
    }

    #[test]
    fn boxed_values_are_dropped_with_the_queue() {
        let live = Arc::new(AtomicUsize::new(0));
        struct Tracked(Arc<AtomicUsize>);
        impl Drop for Tracked {
            fn drop(&mut self) {
                self.0.fetch_sub(1, Ordering::SeqCst);
            }
        }
        for kind in QueueKind::ALL {
            let q = CompletionQueue::new(kind);
            for _ in 0..3000 {
                live.fetch_add(1, Ordering::SeqCst);
                q.push(Tracked(live.clone()));
            }
            drop(q.pop());
            drop(q);
            for _ in 0..64 {
                crossbeam_epoch::pin().flush();
            }
            assert_eq!(live.load(Ordering::SeqCst), 0, "{kind}");
        }
    }

    /// 8 producers x 8 consumers; every item popped exactly once, and each
    /// consumer sees every producer's items in increasing order.
    fn mpmc_stress(kind: QueueKind, per_producer: u64) {
        let q = Arc::new(CompletionQueue::new(kind));
        let done = Arc::new(AtomicBool::new(false));
        let producers: Vec<_> = (0..PRODUCERS)
            .map(|p| {
                let q = q.clone();
                thread::spawn(move || {
                    for i in 0..per_producer {
                        q.push((p << 32) | i);
                    }
                })
            })
            .collect();
        let consumers: Vec<_> = (0..CONSUMERS)
            .map(|_| {
                let q = q.clone();
                let done = done.clone();
                thread::spawn(move || {
                    let mut got = Vec::new();
                    let mut last = vec![None::<u64>; PRODUCERS as usize];
                    loop {
                        match q.pop() {
                            Some(v) => {
                                let (p, i) = ((v >> 32) as usize, v & 0xffff_ffff);
                                assert!(last[p].map_or(true, |l| l < i), "per-producer order violated");
                                last[p] = Some(i);
                                got.push(v);
                            }
                            None if done.load(Ordering::Acquire) => {
                                // final sweep after producers finished
                                match q.pop() {
                                    Some(v) => got.push(v),
                                    None => return got,
                                }
                            }
                            None => thread::yield_now(),
                        }
                    }
                })
            })
            .collect();
        for p in producers {
            p.join().unwrap();
        }
        done.store(true, Ordering::Release);
        let mut seen = HashSet::new();
        for c in consumers {
            for v in c.join().unwrap() {
                assert!(seen.insert(v), "{kind}: duplicate {v:#x}");
            }
        }
        while let Some(v) = q.pop() {
            assert!(seen.insert(v));
        }
        assert_eq!(seen.len() as u64, PRODUCERS * per_producer, "{kind}: items lost");
    }

    #[test]
    fn lcrq_mpmc_conservation() {
        mpmc_stress(QueueKind::Lcrq, 100_000);
    }

    #[test]
    fn msq_mpmc_conservation() {
        mpmc_stress(QueueKind::Msq, 100_000);
    }

    #[test]
    fn lockq_mpmc_conservation() {
        mpmc_stress(QueueKind::LockQ, 100_000);
    }

    /// Freezes one thread inside `site` of a push and checks the others
    /// still complete pushes and pops.
    fn stalled_thread_does_not_block(kind: QueueKind, site: &'static str) {
        let q = Arc::new(CompletionQueue::new(kind));
        for i in 0..10u64 {
            q.push(i);
        }
        let (parked_tx, parked_rx) = mpsc::channel();
        let release = Arc::new(Barrier::new(2));
        let stalled = {
            let q = q.clone();
            let release = release.clone();
            thread::spawn(move || {
                let fired = std::cell::Cell::new(false);
                stall::install(Box::new(move |s| {
                    if s == site && !fired.replace(true) {
                        parked_tx.send(()).unwrap();
                        release.wait();
                    }
                }));
                q.push(1_000_000);
            })
        };
        parked_rx.recv_timeout(Duration::from_secs(10)).expect("stall point reached");
        // stalled thread is parked mid-push; others must make progress
        let workers: Vec<_> = (0..4u64)
            .map(|w| {
                let q = q.clone();
                thread::spawn(move || {
                    let mut popped = 0;
                    for i in 0..5_000u64 {
                        q.push((w + 1) * 10_000_000 + i);
                        if q.pop().is_some() {
                            popped += 1;
                        }
                    }
                    popped
                })
            })
            .collect();
        let popped: u64 = workers.into_iter().map(|w| w.join().unwrap()).sum();
        assert_eq!(popped, 20_000, "{kind}: workers blocked by a stalled thread");
        release.wait();
        stalled.join().unwrap();
        let mut rest = 0;
        while q.pop().is_some() {
            rest += 1;
        }
        assert_eq!(rest, 11);
    }

    #[test]
    fn msq_survives_stalled_pusher() {
        stalled_thread_does_not_block(QueueKind::Msq, "msq.push.before_link");
    }

    #[test]
    fn lcrq_survives_stalled_pusher() {
        stalled_thread_does_not_block(QueueKind::Lcrq, "crq.enqueue.after_faa");
    }

    #[test]
    fn queue_kind_parses() {
        for k in QueueKind::ALL {
            assert_eq!(k.to_string().parse::<QueueKind>().unwrap(), k);
        }
        assert!("nope".parse::<QueueKind>().is_err());
    }
}

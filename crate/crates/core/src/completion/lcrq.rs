//! Linked concurrent ring queue: a list of fixed-size rings indexed by
//! fetch-and-add, with 128-bit compare-and-swap on (safe | index, value)
//! cells. A ring closes when it fills up or an enqueuer starves; the next
//! ring is then linked behind it. Retired rings are reclaimed by epochs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_epoch::{self as epoch, Atomic, Guard, Owned, Shared};
use crossbeam_utils::CachePadded;
use portable_atomic::AtomicU128;

use super::{stall, QueueStats};

pub const RING_CAPACITY: u64 = 1024;
/// Failed enqueue rounds after which an enqueuer closes the ring.
pub const STARVATION_LIMIT: u32 = 10;

const CLOSED: u64 = 1 << 63;
const UNSAFE: u64 = 1 << 63;
const EMPTY: u64 = 0;

/// Cell word: high half is (unsafe bit | index), low half the value
/// (a boxed element's address, or 0 when empty).
#[inline]
fn pack(unsafe_bit: bool, idx: u64, val: u64) -> u128 {
    let hi = if unsafe_bit { idx | UNSAFE } else { idx };
    ((hi as u128) << 64) | val as u128
}

#[inline]
fn unpack(cell: u128) -> (bool, u64, u64) {
    let hi = (cell >> 64) as u64;
    (hi & UNSAFE != 0, hi & !UNSAFE, cell as u64)
}

struct Crq {
    head: CachePadded<AtomicU64>,
    tail: CachePadded<AtomicU64>,
    next: Atomic<Crq>,
    ring: Box<[AtomicU128]>,
}

impl Crq {
    /// A fresh ring whose first cell already holds `first`.
    fn with_first(first: u64) -> Crq {
        let ring = (0..RING_CAPACITY)
            .map(|i| AtomicU128::new(if i == 0 { pack(false, 0, first) } else { pack(false, i, EMPTY) }))
            .collect();
        Crq {
            head: CachePadded::new(AtomicU64::new(0)),
            tail: CachePadded::new(AtomicU64::new(1)),
            next: Atomic::null(),
            ring,
        }
    }

    fn cell(&self, i: u64) -> &AtomicU128 {
        &self.ring[(i & (RING_CAPACITY - 1)) as usize]
    }

    fn cas(cell: &AtomicU128, old: u128, new: u128) -> bool {
        cell.compare_exchange(old, new, Ordering::AcqRel, Ordering::Acquire).is_ok()
    }

    /// Returns false when the ring is (or just became) closed.
    fn enqueue(&self, val: u64) -> bool {
        let mut rounds = 0u32;
        loop {
            let t_raw = self.tail.fetch_add(1, Ordering::AcqRel);
            if t_raw & CLOSED != 0 {
                return false;
            }
            let t = t_raw;
            stall::point("crq.enqueue.after_faa");
            let cell = self.cell(t);
            let cur = cell.load(Ordering::Acquire);
            let (uns, idx, v) = unpack(cur);
            if v == EMPTY
                && idx <= t
                && (!uns || self.head.load(Ordering::Acquire) <= t)
                && Self::cas(cell, cur, pack(false, t, val))
            {
                return true;
            }
            rounds += 1;
            let h = self.head.load(Ordering::Acquire);
            if t.wrapping_sub(h) as i64 >= RING_CAPACITY as i64 || rounds >= STARVATION_LIMIT {
                self.tail.fetch_or(CLOSED, Ordering::AcqRel);
                return false;
            }
        }
    }

    fn dequeue(&self) -> Option<u64> {
        loop {
            let h = self.head.fetch_add(1, Ordering::AcqRel);
            let cell = self.cell(h);
            loop {
                let cur = cell.load(Ordering::Acquire);
                let (uns, idx, v) = unpack(cur);
                if idx > h {
                    break;
                }
                if v != EMPTY {
                    if idx == h {
                        if Self::cas(cell, cur, pack(uns, h + RING_CAPACITY, EMPTY)) {
                            return Some(v);
                        }
                    } else if Self::cas(cell, cur, pack(true, idx, v)) {
                        // an older lap's element still sits here; make sure no
                        // enqueuer of this lap can use the cell
                        break;
                    }
                } else if Self::cas(cell, cur, pack(uns, h + RING_CAPACITY, EMPTY)) {
                    break;
                }
            }
            let t = self.tail.load(Ordering::Acquire) & !CLOSED;
            if t <= h + 1 {
                self.fix_state();
                return None;
            }
        }
    }

    /// Pulls tail up to head after dequeuers overshot an empty ring.
    fn fix_state(&self) {
        loop {
            let t = self.tail.load(Ordering::Acquire);
            let h = self.head.load(Ordering::Acquire);
            if self.tail.load(Ordering::Acquire) != t {
                continue;
            }
            if h <= t {
                return;
            }
            if self
                .tail
                .compare_exchange(t, h, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return;
            }
        }
    }
}

#[derive(Default)]
struct SegmentCounts {
    created: AtomicU64,
    freed: AtomicU64,
}

pub struct Lcrq<T> {
    head: CachePadded<Atomic<Crq>>,
    tail: CachePadded<Atomic<Crq>>,
    counts: Arc<SegmentCounts>,
    _marker: std::marker::PhantomData<Box<T>>,
}

unsafe impl<T: Send> Send for Lcrq<T> {}
unsafe impl<T: Send> Sync for Lcrq<T> {}

impl<T> Default for Lcrq<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> Lcrq<T> {
    pub fn new() -> Self {
        let crq = Crq::with_first(EMPTY);
        crq.tail.store(0, Ordering::Relaxed);
        let counts = Arc::new(SegmentCounts::default());
        counts.created.fetch_add(1, Ordering::Relaxed);
        let q = Lcrq {
            head: CachePadded::new(Atomic::null()),
            tail: CachePadded::new(Atomic::null()),
            counts,
            _marker: std::marker::PhantomData,
        };
        // SAFETY: the queue is not shared yet.
        unsafe {
            let s = Owned::new(crq).into_shared(epoch::unprotected());
            q.head.store(s, Ordering::Relaxed);
            q.tail.store(s, Ordering::Relaxed);
        }
        q
    }

    pub fn push(&self, value: T) {
        let val = Box::into_raw(Box::new(value)) as u64;
        let guard = &epoch::pin();
        loop {
            let tail = self.tail.load(Ordering::Acquire, guard);
            // SAFETY: the tail ring is never null and is guard-protected.
            let crq = unsafe { tail.deref() };
            let next = crq.next.load(Ordering::Acquire, guard);
            if !next.is_null() {
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::AcqRel, Ordering::Acquire, guard);
                continue;
            }
            if crq.enqueue(val) {
                return;
            }
            let fresh = Owned::new(Crq::with_first(val));
            match crq
                .next
                .compare_exchange(Shared::null(), fresh, Ordering::AcqRel, Ordering::Acquire, guard)
            {
                Ok(linked) => {
                    self.counts.created.fetch_add(1, Ordering::Relaxed);
                    let _ = self
                        .tail
                        .compare_exchange(tail, linked, Ordering::AcqRel, Ordering::Acquire, guard);
                    return;
                }
                Err(e) => {
                    // lost the race to link; reuse the element in the next round
                    e.new.ring[0].store(pack(false, 0, EMPTY), Ordering::Relaxed);
                    drop(e.new);
                }
            }
        }
    }

    pub fn pop(&self) -> Option<T> {
        let guard = &epoch::pin();
        loop {
            let head = self.head.load(Ordering::Acquire, guard);
            // SAFETY: the head ring is never null and is guard-protected.
            let crq = unsafe { head.deref() };
            if let Some(v) = crq.dequeue() {
                return Some(unsafe { take(v) });
            }
            let next = crq.next.load(Ordering::Acquire, guard);
            if next.is_null() {
                return None;
            }
            // The ring is closed (a successor exists), but an enqueuer that
            // drew an index before the close may have landed after our
            // first look; check once more before leaving it behind.
            if let Some(v) = crq.dequeue() {
                return Some(unsafe { take(v) });
            }
            self.retire(head, next, guard);
        }
    }

    fn retire(&self, head: Shared<'_, Crq>, next: Shared<'_, Crq>, guard: &Guard) {
        let _ = self
            .tail
            .compare_exchange(head, next, Ordering::AcqRel, Ordering::Acquire, guard);
        if self
            .head
            .compare_exchange(head, next, Ordering::AcqRel, Ordering::Acquire, guard)
            .is_ok()
        {
            let counts = self.counts.clone();
            let raw = head.as_raw() as usize;
            // SAFETY: head and tail have both moved past this ring, so no new
            // reader can reach it; current readers are protected by epochs.
            unsafe {
                guard.defer_unchecked(move || {
                    drop(Box::from_raw(raw as *mut Crq));
                    counts.freed.fetch_add(1, Ordering::Relaxed);
                });
            }
        }
    }

    pub fn stats(&self) -> QueueStats {
        let created = self.counts.created.load(Ordering::Relaxed);
        QueueStats {
            live_blocks: created - self.counts.freed.load(Ordering::Relaxed),
            blocks_created: created,
        }
    }

    /// Number of rings currently linked between head and tail.
    pub fn linked_segments(&self) -> usize {
        let guard = &epoch::pin();
        let mut n = 0;
        let mut cur = self.head.load(Ordering::Acquire, guard);
        while let Some(c) = unsafe { cur.as_ref() } {
            n += 1;
            cur = c.next.load(Ordering::Acquire, guard);
        }
        n
    }
}

/// SAFETY: `v` must be a value stored by `push` and claimed exactly once.
unsafe fn take<T>(v: u64) -> T {
    *Box::from_raw(v as *mut T)
}

impl<T> Drop for Lcrq<T> {
    fn drop(&mut self) {
        // SAFETY: exclusive access.
        unsafe {
            let guard = epoch::unprotected();
            let mut cur = self.head.load(Ordering::Relaxed, guard);
            while !cur.is_null() {
                let crq = cur.into_owned();
                for cell in crq.ring.iter() {
                    let (_, _, v) = unpack(cell.load(Ordering::Relaxed));
                    if v != EMPTY {
                        drop(take::<T>(v));
                        cell.store(0, Ordering::Relaxed);
                    }
                }
                let next = crq.next.load(Ordering::Relaxed, guard);
                drop(crq);
                self.counts.freed.fetch_add(1, Ordering::Relaxed);
                cur = next;
            }
        }
    }
}

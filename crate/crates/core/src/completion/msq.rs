//! Michael-Scott linked-node queue with epoch-based node reclamation.

use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_epoch::{self as epoch, Atomic, Owned, Shared};
use crossbeam_utils::CachePadded;

use super::{stall, QueueStats};

struct Node<T> {
    /// Uninitialized in the sentinel; read exactly once by the popper that
    /// turns this node into the new sentinel.
    data: MaybeUninit<T>,
    next: Atomic<Node<T>>,
}

#[derive(Default)]
struct NodeCounts {
    created: AtomicU64,
    freed: AtomicU64,
}

pub struct MsQueue<T> {
    head: CachePadded<Atomic<Node<T>>>,
    tail: CachePadded<Atomic<Node<T>>>,
    counts: Arc<NodeCounts>,
}

unsafe impl<T: Send> Send for MsQueue<T> {}
unsafe impl<T: Send> Sync for MsQueue<T> {}

impl<T> Default for MsQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> MsQueue<T> {
    pub fn new() -> Self {
        let q = MsQueue {
            head: CachePadded::new(Atomic::null()),
            tail: CachePadded::new(Atomic::null()),
            counts: Arc::new(NodeCounts::default()),
        };
        let sentinel = q.node(MaybeUninit::uninit());
        // SAFETY: the queue is not shared yet.
        unsafe {
            let guard = epoch::unprotected();
            let s = sentinel.into_shared(guard);
            q.head.store(s, Ordering::Relaxed);
            q.tail.store(s, Ordering::Relaxed);
        }
        q
    }

    fn node(&self, data: MaybeUninit<T>) -> Owned<Node<T>> {
        self.counts.created.fetch_add(1, Ordering::Relaxed);
        Owned::new(Node {
            data,
            next: Atomic::null(),
        })
    }

    pub fn push(&self, value: T) {
        let guard = &epoch::pin();
        let mut new = self.node(MaybeUninit::new(value));
        loop {
            let tail = self.tail.load(Ordering::Acquire, guard);
            // SAFETY: tail is never null and is protected by the guard.
            let t = unsafe { tail.deref() };
            let next = t.next.load(Ordering::Acquire, guard);
            if !next.is_null() {
                let _ = self
                    .tail
                    .compare_exchange(tail, next, Ordering::Release, Ordering::Relaxed, guard);
                continue;
            }
            stall::point("msq.push.before_link");
            match t
                .next
                .compare_exchange(Shared::null(), new, Ordering::Release, Ordering::Relaxed, guard)
            {
                Ok(linked) => {
                    let _ = self
                        .tail
                        .compare_exchange(tail, linked, Ordering::Release, Ordering::Relaxed, guard);
                    return;
                }
                Err(e) => new = e.new,
            }
        }
    }

    pub fn pop(&self) -> Option<T> {
        let guard = &epoch::pin();
        loop {
            let head = self.head.load(Ordering::Acquire, guard);
            // SAFETY: head is never null and is protected by the guard.
            let h = unsafe { head.deref() };
            let next = h.next.load(Ordering::Acquire, guard);
            let n = unsafe { next.as_ref() }?;
            if self
                .head
                .compare_exchange(head, next, Ordering::Release, Ordering::Relaxed, guard)
                .is_ok()
            {
                let tail = self.tail.load(Ordering::Relaxed, guard);
                if tail == head {
                    let _ = self
                        .tail
                        .compare_exchange(tail, next, Ordering::Release, Ordering::Relaxed, guard);
                }
                let counts = self.counts.clone();
                let old = head.as_raw() as usize;
                // SAFETY: we won the CAS, so we alone move the value out of the
                // new sentinel and retire the old one; the old sentinel's data
                // was already moved out (or never initialized).
                unsafe {
                    guard.defer_unchecked(move || {
                        drop(Box::from_raw(old as *mut Node<T>));
                        counts.freed.fetch_add(1, Ordering::Relaxed);
                    });
                    return Some(ptr::read(n.data.as_ptr()));
                }
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
}

impl<T> Drop for MsQueue<T> {
    fn drop(&mut self) {
        // SAFETY: exclusive access; no other thread can observe the nodes.
        unsafe {
            let guard = epoch::unprotected();
            let mut cur = self.head.load(Ordering::Relaxed, guard);
            let mut sentinel = true;
            while !cur.is_null() {
                let mut owned = cur.into_owned();
                let next = owned.next.load(Ordering::Relaxed, guard);
                if !sentinel {
                    owned.data.assume_init_drop();
                }
                sentinel = false;
                drop(owned);
                self.counts.freed.fetch_add(1, Ordering::Relaxed);
                cur = next;
            }
        }
    }
}

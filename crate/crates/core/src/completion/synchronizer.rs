use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::lockstat::{LockStats, TrackedMutex};

const EMPTY: u8 = 0;
const WRITING: u8 = 1;
const SIGNALED: u8 = 2;
const TAKEN: u8 = 3;

/// Signalling an already-signalled synchronizer; hands the value back.
#[derive(Error)]
#[error("synchronizer signalled twice")]
pub struct SignalError<T>(pub T);

impl<T> std::fmt::Debug for SignalError<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SignalError")
    }
}

/// One-slot completion cell, the analogue of an MPI request.
pub struct Synchronizer<T> {
    state: AtomicU8,
    slot: UnsafeCell<Option<T>>,
}

// SAFETY: the slot is written only by the thread that moved the state
// EMPTY -> WRITING and read only by the thread that moved it
// SIGNALED -> TAKEN; the state transitions publish the writes.
unsafe impl<T: Send> Send for Synchronizer<T> {}
unsafe impl<T: Send> Sync for Synchronizer<T> {}

impl<T> Default for Synchronizer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> Synchronizer<T> {
    pub fn new() -> Self {
        Synchronizer {
            state: AtomicU8::new(EMPTY),
            slot: UnsafeCell::new(None),
        }
    }

    pub fn signal(&self, value: T) -> Result<(), SignalError<T>> {
        if self
            .state
            .compare_exchange(EMPTY, WRITING, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            return Err(SignalError(value));
        }
        // SAFETY: WRITING grants exclusive access to the slot.
        unsafe { *self.slot.get() = Some(value) };
        self.state.store(SIGNALED, Ordering::Release);
        Ok(())
    }

    /// Returns the signalled value exactly once.
    pub fn test(&self) -> Option<T> {
        if self.state.load(Ordering::Acquire) != SIGNALED {
            return None;
        }
        self.state
            .compare_exchange(SIGNALED, TAKEN, Ordering::Acquire, Ordering::Relaxed)
            .ok()?;
        // SAFETY: TAKEN grants exclusive access to the slot.
        unsafe { (*self.slot.get()).take() }
    }

    pub fn is_signaled(&self) -> bool {
        self.state.load(Ordering::Acquire) == SIGNALED
    }

    /// Re-arms a consumed synchronizer for another lifetime. Returns false if
    /// its value has not been taken yet.
    pub fn reset(&self) -> bool {
        self.state
            .compare_exchange(TAKEN, EMPTY, Ordering::AcqRel, Ordering::Relaxed)
            .is_ok()
    }
}

struct PoolInner<T> {
    entries: VecDeque<Arc<Synchronizer<T>>>,
    cursor: usize,
}

/// Outstanding synchronizers polled one at a time in round-robin order,
/// guarded by a try lock.
pub struct SynchronizerPool<T> {
    inner: TrackedMutex<PoolInner<T>>,
}

impl<T> Default for SynchronizerPool<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> SynchronizerPool<T> {
    pub fn new() -> Self {
        SynchronizerPool {
            inner: TrackedMutex::new(PoolInner {
                entries: VecDeque::new(),
                cursor: 0,
            }),
        }
    }

    pub fn insert(&self, s: Arc<Synchronizer<T>>) {
        self.inner.lock().entries.push_back(s);
    }

    /// Tests the synchronizer under the cursor and advances. A signalled
    /// entry is removed and its value returned. Returns `None` immediately
    /// if another thread holds the guard.
    pub fn poll_one(&self) -> Option<T> {
        self.poll_one_with(|s| s.test())
    }

    /// As [`SynchronizerPool::poll_one`], testing the entry with `test`
    /// (e.g. a test that drives progress when the entry is still empty).
    pub fn poll_one_with(&self, test: impl FnOnce(&Synchronizer<T>) -> Option<T>) -> Option<T> {
        let mut g = self.inner.try_lock()?;
        if g.entries.is_empty() {
            return None;
        }
        let i = g.cursor % g.entries.len();
        match test(&g.entries[i]) {
            Some(v) => {
                g.entries.remove(i);
                g.cursor = i;
                Some(v)
            }
            None => {
                g.cursor = i + 1;
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lock_stats(&self) -> &LockStats {
        self.inner.stats()
    }
}

use std::collections::VecDeque;

use crate::lockstat::{LockStats, TrackedMutex};

/// Blocking-lock FIFO, the baseline against the lock-free variants.
#[derive(Default)]
pub struct LockQueue<T> {
    inner: TrackedMutex<VecDeque<T>>,
}

impl<T> LockQueue<T> {
    pub fn new() -> Self {
        LockQueue {
            inner: TrackedMutex::new(VecDeque::new()),
        }
    }

    pub fn push(&self, value: T) {
        self.inner.lock().push_back(value);
    }

    pub fn pop(&self) -> Option<T> {
        self.inner.lock().pop_front()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lock_stats(&self) -> &LockStats {
        self.inner.stats()
    }
}

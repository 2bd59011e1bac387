//! Instrumented mutexes.
//!
//! Every lock the runtime takes on a communication path is a [`TrackedMutex`].
//! Besides counting acquisitions and failed try-locks, each lock remembers
//! which progress domains (device indices) acquired it while running a
//! progress body, so tests can prove that progressing two different devices
//! never touches a common lock.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, MutexGuard};

thread_local! {
    static PROGRESS_DOMAIN: Cell<Option<u32>> = const { Cell::new(None) };
}

/// Marks the current thread as running a progress body for `domain` until
/// the returned guard is dropped.
pub fn enter_domain(domain: u32) -> DomainGuard {
    let prev = PROGRESS_DOMAIN.with(|d| d.replace(Some(domain)));
    DomainGuard { prev }
}

pub fn current_domain() -> Option<u32> {
    PROGRESS_DOMAIN.with(|d| d.get())
}

#[must_use]
pub struct DomainGuard {
    prev: Option<u32>,
}

impl Drop for DomainGuard {
    fn drop(&mut self) {
        PROGRESS_DOMAIN.with(|d| d.set(self.prev));
    }
}

#[derive(Debug, Default)]
pub struct LockStats {
    acquisitions: AtomicU64,
    try_failures: AtomicU64,
    domains: AtomicU64,
}

impl LockStats {
    fn note_acquire(&self) {
        self.acquisitions.fetch_add(1, Ordering::Relaxed);
        if let Some(d) = current_domain() {
            let bit = 1u64 << (d % 64);
            if self.domains.load(Ordering::Relaxed) & bit == 0 {
                self.domains.fetch_or(bit, Ordering::Relaxed);
            }
        }
    }

    pub fn acquisitions(&self) -> u64 {
        self.acquisitions.load(Ordering::Relaxed)
    }

    pub fn try_failures(&self) -> u64 {
        self.try_failures.load(Ordering::Relaxed)
    }

    /// Bit mask of progress domains that acquired this lock.
    pub fn domain_mask(&self) -> u64 {
        self.domains.load(Ordering::Relaxed)
    }

    /// True when progress bodies of at least two distinct domains took this lock.
    pub fn shared_across_domains(&self) -> bool {
        self.domain_mask().count_ones() >= 2
    }
}

#[derive(Debug, Default)]
pub struct TrackedMutex<T> {
    inner: Mutex<T>,
    stats: LockStats,
}

impl<T> TrackedMutex<T> {
    pub fn new(value: T) -> Self {
        TrackedMutex {
            inner: Mutex::new(value),
            stats: LockStats::default(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, T> {
        let g = self.inner.lock();
        self.stats.note_acquire();
        g
    }

    pub fn try_lock(&self) -> Option<MutexGuard<'_, T>> {
        match self.inner.try_lock() {
            Some(g) => {
                self.stats.note_acquire();
                Some(g)
            }
            None => {
                self.stats.try_failures.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn stats(&self) -> &LockStats {
        &self.stats
    }
}

/// One named lock as reported by an audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockReport {
    pub name: String,
    pub acquisitions: u64,
    pub try_failures: u64,
    pub domain_mask: u64,
}

impl LockReport {
    pub fn new(name: impl Into<String>, stats: &LockStats) -> Self {
        LockReport {
            name: name.into(),
            acquisitions: stats.acquisitions(),
            try_failures: stats.try_failures(),
            domain_mask: stats.domain_mask(),
        }
    }

    pub fn shared_across_domains(&self) -> bool {
        self.domain_mask.count_ones() >= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domains_are_recorded_only_inside_progress() {
        let m = TrackedMutex::new(0u32);
        drop(m.lock());
        assert_eq!(m.stats().domain_mask(), 0);
        {
            let _d = enter_domain(1);
            drop(m.lock());
        }
        assert_eq!(m.stats().domain_mask(), 0b10);
        assert!(!m.stats().shared_across_domains());
        {
            let _d = enter_domain(3);
            drop(m.try_lock());
        }
        assert!(m.stats().shared_across_domains());
        assert_eq!(m.stats().acquisitions(), 3);
        assert_eq!(current_domain(), None);
    }

    #[test]
    fn try_failures_counted() {
        let m = TrackedMutex::new(());
        let g = m.lock();
        assert!(m.try_lock().is_none());
        drop(g);
        assert_eq!(m.stats().try_failures(), 1);
    }

    #[test]
    fn nested_domains_restore() {
        let _a = enter_domain(2);
        {
            let _b = enter_domain(5);
            assert_eq!(current_domain(), Some(5));
        }
        assert_eq!(current_domain(), Some(2));
    }
}

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_queue::SegQueue;

/// Fixed-size receive slabs for one-sided arrivals. Slabs are created on
/// demand and recycled when the [`Buffer`] holding them is dropped.
#[derive(Debug)]
pub struct BufferPool {
    slab_len: usize,
    free: SegQueue<Vec<u8>>,
    allocated: AtomicU64,
    handed_out: AtomicU64,
    returned: AtomicU64,
}

impl BufferPool {
    pub fn new(slab_len: usize) -> Arc<Self> {
        Arc::new(BufferPool {
            slab_len,
            free: SegQueue::new(),
            allocated: AtomicU64::new(0),
            handed_out: AtomicU64::new(0),
            returned: AtomicU64::new(0),
        })
    }

    pub fn slab_len(&self) -> usize {
        self.slab_len
    }

    /// Takes a slab and fills it with `bytes`, which must fit in one slab.
    pub fn fill(self: &Arc<Self>, bytes: &[u8]) -> Buffer {
        debug_assert!(bytes.len() <= self.slab_len);
        let mut data = self.free.pop().unwrap_or_else(|| {
            self.allocated.fetch_add(1, Ordering::Relaxed);
            Vec::with_capacity(self.slab_len)
        });
        self.handed_out.fetch_add(1, Ordering::Relaxed);
        data.clear();
        data.extend_from_slice(bytes);
        Buffer {
            data,
            pool: Some(self.clone()),
        }
    }

    fn release(&self, mut data: Vec<u8>) {
        self.returned.fetch_add(1, Ordering::Relaxed);
        if data.capacity() == self.slab_len {
            data.clear();
            self.free.push(data);
        }
    }

    pub fn slabs_allocated(&self) -> u64 {
        self.allocated.load(Ordering::Relaxed)
    }

    /// Slabs currently held by descriptors.
    pub fn outstanding(&self) -> u64 {
        self.handed_out.load(Ordering::Relaxed) - self.returned.load(Ordering::Relaxed)
    }
}

/// Payload of a completed operation. Pool-backed buffers go back to their
/// pool on drop.
#[derive(Default)]
pub struct Buffer {
    data: Vec<u8>,
    pool: Option<Arc<BufferPool>>,
}

impl Buffer {
    pub fn from_vec(data: Vec<u8>) -> Self {
        Buffer { data, pool: None }
    }

    pub fn empty() -> Self {
        Buffer::default()
    }

    pub fn is_pooled(&self) -> bool {
        self.pool.is_some()
    }

    /// Detaches the bytes; a pooled slab counts as released.
    pub fn into_vec(mut self) -> Vec<u8> {
        let data = std::mem::take(&mut self.data);
        if let Some(pool) = self.pool.take() {
            pool.returned.fetch_add(1, Ordering::Relaxed);
        }
        data
    }
}

impl Deref for Buffer {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.data
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        if let Some(pool) = self.pool.take() {
            pool.release(std::mem::take(&mut self.data));
        }
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Buffer({} bytes{})", self.data.len(), if self.pool.is_some() { ", pooled" } else { "" })
    }
}

//! Pluggable communication layer for an asynchronous many-task runtime,
//! built to compare how completion mechanisms, progress strategies and
//! resource replication affect message rate and latency.
//!
//! Layers, bottom up:
//! - [`parcel`]: message format (nonzero-copy / zero-copy chunks, header codec).
//! - [`transport`]: emulated network devices (loopback and TCP backends).
//! - [`completion`]: completion queues and synchronizers.
//! - [`progress`]: progress engine with configurable locking and trigger mode.
//! - [`parcelport`]: the parcel protocol state machine.
//! - [`bench`]: the runtime scheduler and the benchmark drivers.

pub mod lockstat;
pub mod parcel;
pub mod transport;
pub mod completion;
pub mod progress;
pub mod parcelport;
pub mod bench;

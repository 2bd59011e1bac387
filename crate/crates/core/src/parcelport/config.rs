use std::fmt;

use crate::completion::QueueKind;
use crate::parcel::{DEFAULT_PIGGYBACK_THRESHOLD, DEFAULT_ZC_THRESHOLD};
use crate::progress::{HeaderMode, LockStrategy, ProgressConfig, ProgressMode, DEFAULT_POLL_BATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeaderPath {
    /// One-sided dynamic put into a runtime buffer.
    Put,
    /// Send matched against pre-posted wildcard receives.
    SendRecv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeaderCompletion {
    Queue,
    Sync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FollowupCompletion {
    Queue,
    SyncPool,
}

/// The full knob set of one parcelport variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantConfig {
    pub name: String,
    pub header_path: HeaderPath,
    pub header_completion: HeaderCompletion,
    pub queue_kind: QueueKind,
    pub followup_completion: FollowupCompletion,
    pub progress_mode: ProgressMode,
    pub lock_strategy: LockStrategy,
    pub num_devices: usize,
    pub aggregation: bool,
    pub zc_threshold: usize,
    pub piggyback_threshold: usize,
    pub poll_batch: usize,
    /// Wildcard header receives kept posted per device on the send-receive path.
    pub header_receives: usize,
}

/// The presets exercised by the variant matrix, in reporting order.
pub const MATRIX_PRESETS: [&str; 14] = [
    "lci",
    "sendrecv_queue",
    "sendrecv_sync",
    "sync",
    "queue_lock",
    "queue_ms",
    "block",
    "try",
    "try_progress",
    "block_d2",
    "progress",
    "lci_d1",
    "lci_d4",
    "lci_try_d2",
];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown variant preset {0:?}")]
    UnknownPreset(String),
    #[error("at least one device is required")]
    NoDevices,
    #[error("at most 256 devices are supported (device index is 8 bits)")]
    TooManyDevices,
    #[error("zero-copy threshold must be positive")]
    ZeroThreshold,
    #[error("poll batch must be at least 1")]
    ZeroBatch,
    #[error("the put header path completes through a queue; header completion must be queue")]
    PutNeedsQueue,
    #[error("on-test progress needs synchronizer completion for headers and follow-ups")]
    OnTestNeedsSync,
}

impl VariantConfig {
    /// The base variant: put headers, shared LCRQ completion, explicit
    /// progress, no coarse lock, two devices.
    pub fn base() -> Self {
        VariantConfig {
            name: "lci".into(),
            header_path: HeaderPath::Put,
            header_completion: HeaderCompletion::Queue,
            queue_kind: QueueKind::Lcrq,
            followup_completion: FollowupCompletion::Queue,
            progress_mode: ProgressMode::Explicit,
            lock_strategy: LockStrategy::Fine,
            num_devices: 2,
            aggregation: false,
            zc_threshold: DEFAULT_ZC_THRESHOLD,
            piggyback_threshold: DEFAULT_PIGGYBACK_THRESHOLD,
            poll_batch: DEFAULT_POLL_BATCH,
            header_receives: 1,
        }
    }

    /// Send-receive headers, synchronizers everywhere, progress on test,
    /// one blocking lock, one device.
    fn mpi_like() -> Self {
        VariantConfig {
            header_path: HeaderPath::SendRecv,
            header_completion: HeaderCompletion::Sync,
            followup_completion: FollowupCompletion::SyncPool,
            progress_mode: ProgressMode::OnTest,
            lock_strategy: LockStrategy::CoarseBlocking,
            num_devices: 1,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let lower = name.to_ascii_lowercase();
        let mut cfg = match lower.as_str() {
            "base" | "lci" => Self::base(),
            "sendrecv_queue" => VariantConfig {
                header_path: HeaderPath::SendRecv,
                ..Self::base()
            },
            "sendrecv_sync" => VariantConfig {
                header_path: HeaderPath::SendRecv,
                header_completion: HeaderCompletion::Sync,
                ..Self::base()
            },
            "sync" => VariantConfig {
                followup_completion: FollowupCompletion::SyncPool,
                ..Self::base()
            },
            "queue_lock" => VariantConfig {
                queue_kind: QueueKind::LockQ,
                ..Self::base()
            },
            "queue_ms" => VariantConfig {
                queue_kind: QueueKind::Msq,
                ..Self::base()
            },
            "block" | "mpi_like" => Self::mpi_like(),
            "try" => VariantConfig {
                lock_strategy: LockStrategy::CoarseTry,
                ..Self::mpi_like()
            },
            "try_progress" => VariantConfig {
                lock_strategy: LockStrategy::CoarseTry,
                progress_mode: ProgressMode::Explicit,
                ..Self::mpi_like()
            },
            "progress" => VariantConfig {
                progress_mode: ProgressMode::Explicit,
                ..Self::mpi_like()
            },
            "block_d2" => VariantConfig {
                num_devices: 2,
                ..Self::mpi_like()
            },
            other => {
                let parse = |prefix: &str| other.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok());
                if let Some(n) = parse("lci_try_d") {
                    VariantConfig {
                        lock_strategy: LockStrategy::CoarseTry,
                        num_devices: n,
                        ..Self::base()
                    }
                } else if let Some(n) = parse("lci_d") {
                    VariantConfig {
                        num_devices: n,
                        ..Self::base()
                    }
                } else {
                    return Err(ConfigError::UnknownPreset(name.into()));
                }
            }
        };
        cfg.name = lower;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_devices == 0 {
            return Err(ConfigError::NoDevices);
        }
        if self.num_devices > 256 {
            return Err(ConfigError::TooManyDevices);
        }
        if self.zc_threshold == 0 {
            return Err(ConfigError::ZeroThreshold);
        }
        if self.poll_batch == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if self.header_path == HeaderPath::Put && self.header_completion != HeaderCompletion::Queue {
            return Err(ConfigError::PutNeedsQueue);
        }
        if self.progress_mode == ProgressMode::OnTest
            && (self.header_completion != HeaderCompletion::Sync
                || self.followup_completion != FollowupCompletion::SyncPool)
        {
            return Err(ConfigError::OnTestNeedsSync);
        }
        Ok(())
    }

    /// Explicit progress under a blocking coarse lock: legal, but known to
    /// perform badly.
    pub fn is_footgun(&self) -> bool {
        self.progress_mode == ProgressMode::Explicit && self.lock_strategy == LockStrategy::CoarseBlocking
    }

    pub fn uses_shared_queue(&self) -> bool {
        self.header_completion == HeaderCompletion::Queue || self.followup_completion == FollowupCompletion::Queue
    }

    pub(crate) fn progress_config(&self) -> ProgressConfig {
        ProgressConfig {
            mode: self.progress_mode,
            lock_strategy: self.lock_strategy,
            poll_batch: self.poll_batch,
        }
    }

    pub(crate) fn header_mode(&self) -> HeaderMode {
        match (self.header_path, self.header_completion) {
            (HeaderPath::Put, _) => HeaderMode::Put,
            (HeaderPath::SendRecv, HeaderCompletion::Queue) => HeaderMode::SendRecvQueue {
                receives: self.header_receives,
            },
            (HeaderPath::SendRecv, HeaderCompletion::Sync) => HeaderMode::SendRecvSync {
                receives: self.header_receives,
            },
        }
    }
}

impl fmt::Display for VariantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: header={:?}/{:?} queue={} followup={:?} progress={} lock={} devices={} aggregation={}",
            self.name,
            self.header_path,
            self.header_completion,
            self.queue_kind,
            self.followup_completion,
            self.progress_mode,
            self.lock_strategy,
            self.num_devices,
            self.aggregation
        )
    }
}

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crossbeam_queue::SegQueue;
use parking_lot::Mutex;

use crate::parcelport::{Network, ParcelHandler, Parcelport, ParcelportError, VariantConfig};

/// A unit of user work, run by whichever worker pops it.
pub type Task = Box<dyn FnOnce(&Worker<'_>) + Send>;

/// Idle rounds after which a worker starts yielding its core between polls.
const IDLE_SPINS: u32 = 64;

/// Shared task pool plus the quiesce flag.
#[derive(Default)]
pub struct TaskSource {
    tasks: SegQueue<Task>,
    stop: AtomicBool,
    error: Mutex<Option<ParcelportError>>,
}

impl TaskSource {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn spawn(&self, task: Task) {
        self.tasks.push(task);
    }

    pub fn pending(&self) -> usize {
        self.tasks.len()
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    /// Records the first fatal error and stops every worker.
    pub fn fail(&self, err: ParcelportError) {
        log::error!("worker stopped: {err}");
        self.error.lock().get_or_insert(err);
        self.request_stop();
    }

    pub fn error(&self) -> Option<ParcelportError> {
        self.error.lock().clone()
    }
}

/// What a task sees of the thread running it.
pub struct Worker<'a> {
    pub thread_id: usize,
    pub pp: &'a Parcelport,
    pub source: &'a TaskSource,
}

/// Runs tasks while there are any and calls `background_work` otherwise,
/// until the source is stopped.
pub fn worker_loop(pp: &Parcelport, thread_id: usize, source: &TaskSource) {
    let w = Worker { thread_id, pp, source };
    let mut idle = 0u32;
    while !source.is_stopped() {
        if let Some(task) = source.tasks.pop() {
            task(&w);
            idle = 0;
            continue;
        }
        match pp.background_work(thread_id) {
            Ok(true) => idle = 0,
            Ok(false) => {
                idle = idle.saturating_add(1);
                if idle >= IDLE_SPINS {
                    thread::yield_now();
                }
            }
            Err(e) => source.fail(e),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeOptions {
    pub threads: usize,
    /// Pin worker `t` to core `core_offset + t` when enough cores exist.
    pub pin: bool,
    pub core_offset: usize,
}

/// One rank: a parcelport and its worker threads.
pub struct Node {
    pp: Arc<Parcelport>,
    source: Arc<TaskSource>,
    workers: Vec<JoinHandle<()>>,
}

impl Node {
    pub fn start(
        cfg: VariantConfig,
        handler: Arc<dyn ParcelHandler>,
        rank: u32,
        world: u32,
        network: Network,
        source: Arc<TaskSource>,
        opts: &NodeOptions,
    ) -> Result<Node, ParcelportError> {
        let pp = Arc::new(Parcelport::new(cfg, handler, rank, world, opts.threads, network)?);
        let cores = if opts.pin {
            core_affinity::get_core_ids().unwrap_or_default()
        } else {
            Vec::new()
        };
        let pin = opts.pin && opts.core_offset + opts.threads <= cores.len();
        if opts.pin && !pin {
            log::info!("not pinning: {} workers at offset {} but {} cores", opts.threads, opts.core_offset, cores.len());
        }
        let workers = (0..opts.threads)
            .map(|t| {
                let pp = pp.clone();
                let source = source.clone();
                let core = pin.then(|| cores[opts.core_offset + t]);
                thread::Builder::new()
                    .name(format!("r{rank}-w{t}"))
                    .spawn(move || {
                        if let Some(core) = core {
                            core_affinity::set_for_current(core);
                        }
                        worker_loop(&pp, t, &source)
                    })
                    .expect("spawn worker")
            })
            .collect();
        Ok(Node { pp, source, workers })
    }

    pub fn parcelport(&self) -> &Arc<Parcelport> {
        &self.pp
    }

    pub fn source(&self) -> &Arc<TaskSource> {
        &self.source
    }

    /// Stops and joins the workers; reports the first worker error.
    pub fn shutdown(mut self) -> Result<(), ParcelportError> {
        self.stop_and_join();
        match self.source.error() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn stop_and_join(&mut self) {
        self.source.request_stop();
        for w in self.workers.drain(..) {
            if w.join().is_err() {
                log::error!("worker thread panicked");
            }
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcel::Parcel;
    use crate::transport::LoopbackFabric;
    use std::sync::atomic::AtomicUsize;
    use std::time::{Duration, Instant};

    struct Nop;
    impl ParcelHandler for Nop {
        fn handle_parcel(&self, _: u32, _: Parcel) {}
    }

    #[test]
    fn workers_run_tasks_and_exit_on_stop() {
        let fabric = LoopbackFabric::new(2, 2);
        let source = TaskSource::new();
        let opts = NodeOptions {
            threads: 3,
            pin: false,
            core_offset: 0,
        };
        let node = Node::start(VariantConfig::base(), Arc::new(Nop), 0, 2, Network::Loopback(fabric), source.clone(), &opts)
            .unwrap();
        let ran = Arc::new(AtomicUsize::new(0));
        for _ in 0..100 {
            let ran = ran.clone();
            source.spawn(Box::new(move |w| {
                assert!(w.thread_id < 3);
                ran.fetch_add(1, Ordering::Relaxed);
            }));
        }
        let start = Instant::now();
        while ran.load(Ordering::Relaxed) < 100 {
            assert!(start.elapsed() < Duration::from_secs(10));
            thread::sleep(Duration::from_millis(1));
        }
        let idle_calls = node.parcelport().stats().background_calls;
        node.shutdown().unwrap();
        assert!(idle_calls > 0, "idle workers poll the parcelport");
    }
}

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::{Child, Command as Process, ExitCode};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use parcelport_lab::bench::{
    aggregate_runs, append_csv, run_loopback_duo, run_rank, BenchError, BenchParams, Mode, RunOptions, RunResult,
    TraceSpec, DEFAULT_WINDOW,
};
use parcelport_lab::parcelport::{Network, VariantConfig, MATRIX_PRESETS};
use parcelport_lab::transport::tcp::parse_endpoints;

#[derive(Parser)]
#[command(name = "parcelport-lab", version, about = "Parcelport variant microbenchmarks")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Run every preset of the variant matrix and append all rows to the CSV.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated presets instead of the full matrix.
        #[arg(long, value_delimiter = ',')]
        presets: Option<Vec<String>>,
        /// Permit fewer than five measured runs per preset.
        #[arg(long)]
        allow_few_runs: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Flood,
    Pingpong,
    Trace,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Flood => Mode::Flood,
            ModeArg::Pingpong => Mode::Pingpong,
            ModeArg::Trace => Mode::Trace,
        }
    }
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "flood")]
    mode: ModeArg,
    #[arg(long, default_value = "lci")]
    variant: String,
    /// Concurrent chains [default: 100000 for flood, 1 for pingpong].
    #[arg(long)]
    nchains: Option<u64>,
    /// Hops per chain [default: 1 for flood, 10000 for pingpong].
    #[arg(long)]
    nsteps: Option<u64>,
    #[arg(long, default_value_t = 8)]
    msg_size: usize,
    /// Worker threads per rank [default: available parallelism].
    #[arg(long)]
    threads: Option<usize>,
    /// Override the preset's device count.
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    zc_threshold: Option<usize>,
    #[arg(long)]
    piggyback_threshold: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<OnOff>,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Seed of the trace workload.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Parcels each rank sends per trace run.
    #[arg(long, default_value_t = 10_000)]
    trace_parcels: u64,
    /// Weights of the small and large trace size classes.
    #[arg(long, value_delimiter = ',', default_values_t = [0.95, 0.05])]
    trace_weights: Vec<f64>,
    /// Run a single rank over TCP (requires --endpoints).
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long, default_value_t = 2)]
    world: u32,
    /// host:port per rank (device d on port + d) or per (rank, device), rank-major.
    #[arg(long)]
    endpoints: Option<String>,
    /// Run both ranks as two local processes over TCP.
    #[arg(long, conflicts_with_all = ["rank", "endpoints"])]
    local_duo: bool,
    /// Append one row per measured run.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Wall-clock limit per run, in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Parcels kept in flight by a sending rank.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Pin worker threads to cores when there are enough.
    #[arg(long, value_enum, default_value = "on")]
    pin: OnOff,
}

impl RunArgs {
    fn config(&self, variant: &str) -> Result<VariantConfig, String> {
        let mut cfg = VariantConfig::preset(variant).map_err(|e| e.to_string())?;
        if let Some(d) = self.devices {
            cfg.num_devices = d;
        }
        if let Some(z) = self.zc_threshold {
            cfg.zc_threshold = z;
        }
        if let Some(p) = self.piggyback_threshold {
            cfg.piggyback_threshold = p;
        }
        if let Some(a) = self.aggregation {
            cfg.aggregation = a == OnOff::On;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    fn params(&self) -> BenchParams {
        let mode = Mode::from(self.mode);
        let threads = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        BenchParams {
            nchains: self.nchains.unwrap_or(if mode == Mode::Pingpong { 1 } else { 100_000 }),
            nsteps: self.nsteps.unwrap_or(if mode == Mode::Pingpong { 10_000 } else { 1 }),
            msg_size: self.msg_size,
            threads,
            iterations: self.iterations,
            warmup: self.warmup,
            timeout: Duration::from_secs(self.timeout),
            window: self.window,
        }
    }

    fn trace(&self) -> Result<TraceSpec, String> {
        let [small, large] = self.trace_weights[..] else {
            return Err(format!("--trace-weights takes two values, got {}", self.trace_weights.len()));
        };
        Ok(TraceSpec {
            parcels: self.trace_parcels,
            weights: (small, large),
            seed: self.seed,
            ..TraceSpec::default()
        })
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            pin: self.pin == OnOff::On,
            record_digests: false,
        }
    }

    /// Arguments that make a child process run rank 1 of `variant`.
    fn child_args(&self, variant: &str, endpoints: &str) -> Vec<String> {
        let p = self.params();
        let mut a: Vec<String> = vec![
            "--mode".into(),
            Mode::from(self.mode).to_string(),
            "--variant".into(),
            variant.into(),
            "--nchains".into(),
            p.nchains.to_string(),
            "--nsteps".into(),
            p.nsteps.to_string(),
            "--msg-size".into(),
            p.msg_size.to_string(),
            "--threads".into(),
            p.threads.to_string(),
            "--iterations".into(),
            p.iterations.to_string(),
            "--warmup".into(),
            p.warmup.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--trace-parcels".into(),
            self.trace_parcels.to_string(),
            "--trace-weights".into(),
            format!("{},{}", self.trace_weights[0], self.trace_weights[1]),
            "--timeout".into(),
            self.timeout.to_string(),
            "--window".into(),
            self.window.to_string(),
            "--pin".into(),
            "off".into(),
            "--rank".into(),
            "1".into(),
            "--endpoints".into(),
            endpoints.into(),
        ];
        let optional = [
            ("--devices", self.devices.map(|v| v.to_string())),
            ("--zc-threshold", self.zc_threshold.map(|v| v.to_string())),
            ("--piggyback-threshold", self.piggyback_threshold.map(|v| v.to_string())),
            (
                "--aggregation",
                self.aggregation.map(|v| if v == OnOff::On { "on" } else { "off" }.to_string()),
            ),
        ];
        for (flag, value) in optional {
            if let Some(v) = value {
                a.push(flag.into());
                a.push(v);
            }
        }
        a
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        None => run_variant(&cli.run, &cli.run.variant).and_then(|results| {
            if let Some(path) = &cli.run.csv {
                append_csv(path, &results).map_err(|e| e.to_string())?;
            }
            Ok(())
        }),
        Some(Command::Matrix {
            run,
            presets,
            allow_few_runs,
        }) => matrix(run, presets.as_deref(), *allow_few_runs),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn matrix(run: &RunArgs, presets: Option<&[String]>, allow_few_runs: bool) -> Result<(), String> {
    if run.iterations < 5 && !allow_few_runs {
        return Err(format!(
            "the matrix needs at least 5 measured runs per preset (got {}); pass --allow-few-runs to override",
            run.iterations
        ));
    }
    let names: Vec<String> = match presets {
        Some(p) => p.to_vec(),
        None => MATRIX_PRESETS.iter().map(|s| s.to_string()).collect(),
    };
    let mut failed = Vec::new();
    for name in &names {
        match run_variant(run, name) {
            Ok(results) => {
                if let Some(path) = &run.csv {
                    append_csv(path, &results).map_err(|e| e.to_string())?;
                }
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                failed.push(name.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("presets failed: {}", failed.join(", ")))
    }
}

/// Runs one variant in whichever topology the arguments select and prints
/// its runs and summary. Returns the measured runs (none on rank 1).
fn run_variant(run: &RunArgs, variant: &str) -> Result<Vec<RunResult>, String> {
    let cfg = run.config(variant)?;
    // rank 1 is either a separate launch or the local-duo child; warn once, from rank 0
    if cfg.is_footgun() && run.rank != Some(1) {
        eprintln!(
            "warning: {} combines explicit progress with a blocking coarse lock; \
             idle threads will serialize on the progress engine",
            cfg.name
        );
    }
    let (mode, params, trace, opts) = (Mode::from(run.mode), run.params(), run.trace()?, run.options());
    if run.world != 2 {
        return Err(format!("benchmarks need exactly 2 ranks, not {}", run.world));
    }
    let results = if let Some(rank) = run.rank {
        let list = run.endpoints.as_deref().ok_or("--rank requires --endpoints")?;
        let endpoints = parse_endpoints(list).map_err(|e| e.to_string())?;
        let net = Network::Tcp {
            endpoints,
            listeners: Vec::new(),
            connect_timeout: Duration::from_secs(30),
        };
        run_rank(&cfg, mode, &params, &trace, rank, net, &opts)
            .map_err(|e| e.to_string())?
            .results
    } else if run.local_duo {
        local_duo(run, &cfg, mode, &params, &trace, &opts)?
    } else {
        let [r0, _] = run_loopback_duo(&cfg, mode, &params, &trace, &opts).map_err(|e| e.to_string())?;
        r0.results
    };
    report(&cfg, &results);
    Ok(results)
}

fn local_duo(
    run: &RunArgs,
    cfg: &VariantConfig,
    mode: Mode,
    params: &BenchParams,
    trace: &TraceSpec,
    opts: &RunOptions,
) -> Result<Vec<RunResult>, String> {
    let listeners: Vec<TcpListener> = (0..cfg.num_devices)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<_, _>>()
        .map_err(|e| format!("cannot bind a local port: {e}"))?;
    let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    // rank 1 only connects, so its entries are placeholders
    let list: Vec<String> = addrs.iter().chain(&addrs).map(|a| a.to_string()).collect();
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut child: Child = Process::new(exe)
        .args(run.child_args(&cfg.name, &list.join(",")))
        .spawn()
        .map_err(|e| format!("cannot start rank 1: {e}"))?;
    let net = Network::Tcp {
        endpoints: addrs.iter().chain(&addrs).copied().collect(),
        listeners,
        connect_timeout: Duration::from_secs(30),
    };
    let rank0 = {
        let (cfg, params, trace, opts) = (cfg.clone(), params.clone(), trace.clone(), opts.clone());
        std::thread::spawn(move || run_rank(&cfg, mode, &params, &trace, 0, net, &opts))
    };
    // a rank 1 that dies early would otherwise leave rank 0 waiting for it
    while !rank0.is_finished() {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            if !status.success() {
                return Err(BenchError::Peer(format!("rank 1 exited with {status}")).to_string());
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let outcome = rank0.join().map_err(|_| "rank 0 panicked".to_string())?;
    if outcome.is_err() {
        let _ = child.kill();
    }
    let status = child.wait().map_err(|e| e.to_string())?;
    let results = outcome.map_err(|e| e.to_string())?.results;
    if !status.success() {
        return Err(BenchError::Peer(format!("rank 1 exited with {status}")).to_string());
    }
    Ok(results)
}

fn report(cfg: &VariantConfig, results: &[RunResult]) {
    if results.is_empty() {
        return;
    }
    println!("# {cfg}");
    for r in results {
        let latency = r
            .latency()
            .map(|l| format!(" latency={:.3}us", l.as_secs_f64() * 1e6))
            .unwrap_or_default();
        println!(
            "run {}: parcels={} elapsed={:.6}s rate={:.1}/s{latency} unexpected={}",
            r.run_index,
            r.parcels,
            r.elapsed.as_secs_f64(),
            r.rate_per_s(),
            r.unexpected
        );
    }
    match aggregate_runs(results) {
        Ok(s) => println!("summary {s}"),
        Err(e) => eprintln!("cannot summarize: {e}"),
    }
}

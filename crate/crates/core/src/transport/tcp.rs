//! TCP backend: one stream per (device, peer) pair, a reader thread per
//! stream standing in for the NIC's receive engine.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_queue::SegQueue;

use super::wire::{Frame, FrameHeader, FRAME_HEADER_LEN};
use super::TransportError;
use crate::lockstat::TrackedMutex;

const HANDSHAKE_MAGIC: u32 = 0x5050_4C48;
const HANDSHAKE_LEN: usize = 12;

/// Connection parameters for one device.
#[derive(Debug)]
pub struct TcpConfig {
    /// Listening address of every rank for this device, indexed by rank.
    pub endpoints: Vec<SocketAddr>,
    /// Pre-bound listener for this rank; bound from `endpoints[rank]` when absent.
    pub listener: Option<TcpListener>,
    pub connect_timeout: Duration,
}

impl TcpConfig {
    pub fn new(endpoints: Vec<SocketAddr>) -> Self {
        TcpConfig {
            endpoints,
            listener: None,
            connect_timeout: Duration::from_secs(30),
        }
    }
}

/// Parses a comma-separated `host:port` list.
pub fn parse_endpoints(list: &str) -> Result<Vec<SocketAddr>, TransportError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.to_socket_addrs()
                .ok()
                .and_then(|mut it| it.next())
                .ok_or_else(|| TransportError::Startup(format!("cannot resolve endpoint {s:?}")))
        })
        .collect()
}

/// Resolves the listening address of `(rank, device)`. The list holds either
/// one address per rank (device `d` listens on `port + d`) or one address per
/// (rank, device) pair in rank-major order.
pub fn endpoint_for(
    endpoints: &[SocketAddr],
    world: u32,
    num_devices: usize,
    rank: u32,
    device: usize,
) -> Result<SocketAddr, TransportError> {
    let world = world as usize;
    let rank = rank as usize;
    if endpoints.len() == world * num_devices {
        Ok(endpoints[rank * num_devices + device])
    } else if endpoints.len() == world {
        let mut addr = endpoints[rank];
        let port = addr.port() as usize + device;
        if addr.port() == 0 || port > u16::MAX as usize {
            return Err(TransportError::Startup(format!(
                "cannot derive a port for device {device} from {addr}"
            )));
        }
        addr.set_port(port as u16);
        Ok(addr)
    } else {
        Err(TransportError::Startup(format!(
            "expected {world} or {} endpoints, got {}",
            world * num_devices,
            endpoints.len()
        )))
    }
}

pub(crate) struct TcpLink {
    writer: TrackedMutex<TcpStream>,
    closed: Arc<AtomicBool>,
}

impl TcpLink {
    pub(crate) fn transmit(&self, bytes: &[u8]) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::ChannelClosed);
        }
        let mut w = self.writer.lock();
        w.write_all(bytes).map_err(|e| {
            self.closed.store(true, Ordering::Release);
            TransportError::Io(e.to_string())
        })
    }

    pub(crate) fn lock_stats(&self) -> &crate::lockstat::LockStats {
        self.writer.stats()
    }

    pub(crate) fn shutdown(&self) {
        self.closed.store(true, Ordering::Release);
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }
}

/// Connects this rank's device to every peer: lower ranks listen, higher
/// ranks connect. Returns one stream per peer (`None` at our own rank).
pub(crate) fn establish(
    rank: u32,
    world: u32,
    device_index: u8,
    cfg: TcpConfig,
) -> Result<Vec<Option<TcpStream>>, TransportError> {
    let startup = |what: String| TransportError::Startup(format!("rank {rank} device {device_index}: {what}"));
    if cfg.endpoints.len() != world as usize {
        return Err(startup(format!(
            "need {world} endpoints for this device, got {}",
            cfg.endpoints.len()
        )));
    }
    let deadline = Instant::now() + cfg.connect_timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

    for peer in 0..rank {
        let addr = cfg.endpoints[peer as usize];
        let mut stream = loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::trace!("connect to {addr} failed ({e}), retrying");
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(startup(format!("cannot connect to rank {peer} at {addr}: {e}"))),
            }
        };
        let mut hello = [0u8; HANDSHAKE_LEN];
        hello[0..4].copy_from_slice(&HANDSHAKE_MAGIC.to_le_bytes());
        hello[4..8].copy_from_slice(&rank.to_le_bytes());
        hello[8] = device_index;
        stream
            .write_all(&hello)
            .map_err(|e| startup(format!("handshake with rank {peer}: {e}")))?;
        stream.set_nodelay(true).ok();
        streams[peer as usize] = Some(stream);
    }

    if rank + 1 < world {
        let listener = match cfg.listener {
            Some(l) => l,
            None => TcpListener::bind(cfg.endpoints[rank as usize])
                .map_err(|e| startup(format!("cannot listen on {}: {e}", cfg.endpoints[rank as usize])))?,
        };
        listener
            .set_nonblocking(true)
            .map_err(|e| startup(e.to_string()))?;
        let mut missing = world - rank - 1;
        while missing > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false).map_err(|e| startup(e.to_string()))?;
                    stream
                        .set_read_timeout(Some(Duration::from_secs(5)))
                        .map_err(|e| startup(e.to_string()))?;
                    let mut hello = [0u8; HANDSHAKE_LEN];
                    stream
                        .read_exact(&mut hello)
                        .map_err(|e| startup(format!("reading handshake: {e}")))?;
                    stream.set_read_timeout(None).map_err(|e| startup(e.to_string()))?;
                    let magic = u32::from_le_bytes(hello[0..4].try_into().unwrap());
                    let peer = u32::from_le_bytes(hello[4..8].try_into().unwrap());
                    if magic != HANDSHAKE_MAGIC || hello[8] != device_index {
                        return Err(startup(format!(
                            "bad handshake from rank {peer} (magic {magic:#x}, device {})",
                            hello[8]
                        )));
                    }
                    if peer <= rank || peer >= world || streams[peer as usize].is_some() {
                        return Err(startup(format!("unexpected handshake from rank {peer}")));
                    }
                    stream.set_nodelay(true).ok();
                    streams[peer as usize] = Some(stream);
                    missing -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(startup(format!("timed out waiting for {missing} peer(s) to connect")));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(startup(format!("accept failed: {e}"))),
            }
        }
    }
    Ok(streams)
}

/// Splits an established stream into a locked writer and a reader thread
/// that stages every arriving frame into `inbound`.
pub(crate) fn attach(
    stream: TcpStream,
    peer: u32,
    device_index: u8,
    inbound: Arc<SegQueue<Frame>>,
    protocol_errors: Arc<AtomicU64>,
) -> Result<(TcpLink, JoinHandle<()>), TransportError> {
    let reader = stream.try_clone().map_err(|e| TransportError::Io(e.to_string()))?;
    let closed = Arc::new(AtomicBool::new(false));
    let reader_closed = closed.clone();
    let handle = thread::Builder::new()
        .name(format!("pp-rx-d{device_index}-p{peer}"))
        .spawn(move || {
            if let Err(e) = read_frames(reader, peer, device_index, &inbound) {
                if e.kind() != io::ErrorKind::UnexpectedEof {
                    log::debug!("device {device_index} peer {peer}: reader stopped: {e}");
                    protocol_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
            reader_closed.store(true, Ordering::Release);
        })
        .map_err(|e| TransportError::Io(e.to_string()))?;
    Ok((
        TcpLink {
            writer: TrackedMutex::new(stream),
            closed,
        },
        handle,
    ))
}

fn read_frames(
    mut stream: TcpStream,
    peer: u32,
    device_index: u8,
    inbound: &SegQueue<Frame>,
) -> io::Result<()> {
    let mut raw = [0u8; FRAME_HEADER_LEN];
    loop {
        stream.read_exact(&mut raw)?;
        let header = FrameHeader::decode(&raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        if header.source != peer || header.device_index != device_index {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "frame from rank {} device {} on link to rank {peer} device {device_index}",
                    header.source, header.device_index
                ),
            ));
        }
        let mut payload = vec![0u8; header.payload_len as usize];
        stream.read_exact(&mut payload)?;
        inbound.push(Frame {
            kind: header.kind,
            device_index: header.device_index,
            tag: header.tag,
            source: header.source,
            payload,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_per_rank_derive_device_ports() {
        let eps = parse_endpoints("127.0.0.1:7000, 127.0.0.1:7100").unwrap();
        assert_eq!(endpoint_for(&eps, 2, 3, 1, 2).unwrap().port(), 7102);
        assert_eq!(endpoint_for(&eps, 2, 3, 0, 0).unwrap().port(), 7000);
    }

    #[test]
    fn endpoints_per_rank_and_device() {
        let eps = parse_endpoints("127.0.0.1:1,127.0.0.1:2,127.0.0.1:3,127.0.0.1:4").unwrap();
        assert_eq!(endpoint_for(&eps, 2, 2, 1, 0).unwrap().port(), 3);
        assert!(endpoint_for(&eps, 3, 2, 0, 0).is_err());
    }

    #[test]
    fn bad_endpoint_is_reported() {
        assert!(parse_endpoints("not-an-address").is_err());
    }
}

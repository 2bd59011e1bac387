//! Parcels and their wire encodings.
//!
//! A [`Parcel`] is one nonzero-copy chunk (action id, small arguments and the
//! size table of the large arguments) plus zero or more zero-copy chunks, one
//! per large argument. Every parcel is announced on the wire by a bounded
//! [`HeaderFrame`]; when the nonzero-copy chunk is small enough it rides inside
//! the header instead of travelling as its own message.
//!
//! All integers are little-endian and fixed width.
//!
//! ```text
//! nonzero-copy chunk:
//!   u64 action_id | u32 n_small | n_small x (u32 len, bytes) | u32 n_zc | n_zc x u64 zc_len
//!
//! header frame:
//!   u32 magic | u32 tag | u32 source_rank | u8 device_index | u8 flags | u16 num_zc
//!   | u64 nzc_size | num_zc x u64 zc_len | [nzc bytes if flags & PIGGYBACK]
//! ```

use std::fmt;
use std::ops::Deref;

use bytes::Bytes;
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

/// Upper bound on an encoded header frame, piggybacked bytes included.
pub const HEADER_BOUND: usize = 4096;
/// Default largest nonzero-copy chunk that is inlined into the header.
pub const DEFAULT_PIGGYBACK_THRESHOLD: usize = 4064;
/// Arguments strictly larger than this become zero-copy chunks.
pub const DEFAULT_ZC_THRESHOLD: usize = 8192;
/// Most zero-copy chunks a single parcel may carry.
pub const MAX_ZC: usize = 255;

pub const HEADER_MAGIC: u32 = 0x5050_4C42;
/// Bytes of the header frame that precede the zero-copy size table.
pub const HEADER_FIXED_LEN: usize = 24;

/// The nonzero-copy chunk is inlined after the size table.
pub const FLAG_PIGGYBACK: u8 = 0x01;
/// The parcel is an aggregate of several parcels (see `parcelport::merge_parcels`).
pub const FLAG_MERGED: u8 = 0x02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParcelError {
    #[error("zero-copy chunk threshold must be positive")]
    ZeroThreshold,
    #[error("parcel has {count} zero-copy chunks, at most {max} are supported")]
    TooManyZcChunks { count: usize, max: usize },
    #[error("header metadata needs {needed} bytes, bound is {bound}")]
    HeaderTooLarge { needed: usize, bound: usize },
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad header magic {0:#010x}")]
    BadMagic(u32),
    #[error("frame length {actual} does not match the encoded length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("nonzero-copy chunk lists {listed} zero-copy chunks, parcel carries {actual}")]
    ZcCountMismatch { listed: usize, actual: usize },
    #[error("zero-copy chunk {index} is {actual} bytes, layout says {listed}")]
    ZcSizeMismatch {
        index: usize,
        listed: u64,
        actual: u64,
    },
    #[error("argument of {0} bytes does not fit a 32-bit length prefix")]
    ArgumentTooLarge(usize),
    #[error("cannot merge an empty list of parcels")]
    EmptyMerge,
}

/// One contiguous buffer of a parcel.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Chunk(Bytes);

impl Chunk {
    pub fn new(bytes: impl Into<Bytes>) -> Self {
        Chunk(bytes.into())
    }

    /// A zero-filled chunk of `len` bytes, used as a receive buffer.
    pub fn zeroed(len: usize) -> Self {
        Chunk(Bytes::from(vec![0u8; len]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bytes(&self) -> &Bytes {
        &self.0
    }

    pub fn into_bytes(self) -> Bytes {
        self.0
    }

    /// Converts into an owned vector; free when the chunk is the sole owner.
    pub fn into_vec(self) -> Vec<u8> {
        Vec::from(self.0)
    }
}

impl Deref for Chunk {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for Chunk {
    fn from(v: Vec<u8>) -> Self {
        Chunk(Bytes::from(v))
    }
}

impl From<Bytes> for Chunk {
    fn from(b: Bytes) -> Self {
        Chunk(b)
    }
}

impl fmt::Debug for Chunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Chunk({} bytes)", self.0.len())
    }
}

/// The unit handed to and from the parcelport.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parcel {
    pub nzc_chunk: Chunk,
    pub zc_chunks: Vec<Chunk>,
    /// Set for aggregates built by `merge_parcels`; their nonzero-copy chunk
    /// holds the sub-parcels' chunks instead of a single [`NzcLayout`].
    pub merged: bool,
}

impl Parcel {
    pub fn layout(&self) -> Result<NzcLayout, ParcelError> {
        NzcLayout::decode(&self.nzc_chunk)
    }

    pub fn action_id(&self) -> Result<u64, ParcelError> {
        read_u64(&self.nzc_chunk, 0)
    }

    /// Total payload bytes carried by the parcel.
    pub fn total_len(&self) -> usize {
        self.nzc_chunk.len() + self.zc_chunks.iter().map(|c| c.len()).sum::<usize>()
    }

    /// Number of wire messages this parcel costs with the given piggyback threshold.
    pub fn wire_messages(&self, piggyback_threshold: usize) -> usize {
        let inline = piggyback_fits(self.nzc_chunk.len(), self.zc_chunks.len(), piggyback_threshold);
        1 + usize::from(!inline) + self.zc_chunks.len()
    }

    /// Checks that the zero-copy chunks agree with the size table in the
    /// nonzero-copy chunk.
    pub fn validate(&self) -> Result<(), ParcelError> {
        if self.merged {
            return Ok(());
        }
        let layout = self.layout()?;
        if layout.zc_sizes.len() != self.zc_chunks.len() {
            return Err(ParcelError::ZcCountMismatch {
                listed: layout.zc_sizes.len(),
                actual: self.zc_chunks.len(),
            });
        }
        for (index, (listed, chunk)) in layout.zc_sizes.iter().zip(&self.zc_chunks).enumerate() {
            if *listed != chunk.len() as u64 {
                return Err(ParcelError::ZcSizeMismatch {
                    index,
                    listed: *listed,
                    actual: chunk.len() as u64,
                });
            }
        }
        Ok(())
    }
}

/// Logical content of a nonzero-copy chunk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NzcLayout {
    pub action_id: u64,
    pub small_args: Vec<Vec<u8>>,
    pub zc_sizes: Vec<u64>,
}

impl NzcLayout {
    pub fn encoded_len(&self) -> usize {
        8 + 4 + self.small_args.iter().map(|a| 4 + a.len()).sum::<usize>() + 4 + 8 * self.zc_sizes.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ParcelError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.action_id.to_le_bytes());
        out.extend_from_slice(&len_u32(self.small_args.len())?.to_le_bytes());
        for arg in &self.small_args {
            out.extend_from_slice(&len_u32(arg.len())?.to_le_bytes());
            out.extend_from_slice(arg);
        }
        out.extend_from_slice(&len_u32(self.zc_sizes.len())?.to_le_bytes());
        for size in &self.zc_sizes {
            out.extend_from_slice(&size.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParcelError> {
        let mut cur = Cursor::new(bytes);
        let action_id = cur.u64()?;
        let n_small = cur.u32()? as usize;
        let mut small_args = Vec::with_capacity(n_small.min(bytes.len() / 4));
        for _ in 0..n_small {
            let len = cur.u32()? as usize;
            small_args.push(cur.take(len)?.to_vec());
        }
        let n_zc = cur.u32()? as usize;
        let mut zc_sizes = Vec::with_capacity(n_zc.min(bytes.len() / 8));
        for _ in 0..n_zc {
            zc_sizes.push(cur.u64()?);
        }
        cur.finish()?;
        Ok(NzcLayout {
            action_id,
            small_args,
            zc_sizes,
        })
    }
}

/// Serializes an action invocation into a parcel. Arguments up to
/// `zc_threshold` bytes are embedded in the nonzero-copy chunk, larger ones
/// become zero-copy chunks; both keep their relative order.
pub fn build_parcel<A>(action_id: u64, args: &[A], zc_threshold: usize) -> Result<Parcel, ParcelError>
where
    A: AsRef<[u8]>,
{
    if zc_threshold == 0 {
        return Err(ParcelError::ZeroThreshold);
    }
    let mut layout = NzcLayout {
        action_id,
        ..NzcLayout::default()
    };
    let mut zc_chunks = Vec::new();
    for arg in args {
        let arg = arg.as_ref();
        if arg.len() > zc_threshold {
            layout.zc_sizes.push(arg.len() as u64);
            zc_chunks.push(Chunk::new(Bytes::copy_from_slice(arg)));
        } else {
            layout.small_args.push(arg.to_vec());
        }
    }
    if zc_chunks.len() > MAX_ZC {
        return Err(ParcelError::TooManyZcChunks {
            count: zc_chunks.len(),
            max: MAX_ZC,
        });
    }
    Ok(Parcel {
        nzc_chunk: Chunk::from(layout.encode()?),
        zc_chunks,
        merged: false,
    })
}

/// Decoded header frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeaderFrame {
    pub tag: u32,
    pub source_rank: u32,
    pub device_index: u8,
    pub flags: u8,
    pub nzc_size: u64,
    pub zc_sizes: Vec<u64>,
    pub piggyback: Option<Bytes>,
}

impl HeaderFrame {
    pub fn num_zc(&self) -> usize {
        self.zc_sizes.len()
    }

    pub fn is_piggybacked(&self) -> bool {
        self.flags & FLAG_PIGGYBACK != 0
    }

    pub fn is_merged(&self) -> bool {
        self.flags & FLAG_MERGED != 0
    }
}

fn piggyback_fits(nzc_size: usize, num_zc: usize, threshold: usize) -> bool {
    nzc_size <= threshold && HEADER_FIXED_LEN + 8 * num_zc + nzc_size <= HEADER_BOUND
}

/// Encodes the header announcing `parcel`. The nonzero-copy chunk is inlined
/// when it is at most `piggyback_threshold` bytes and the whole frame still
/// fits in [`HEADER_BOUND`].
pub fn encode_header(
    parcel: &Parcel,
    tag: u32,
    source_rank: u32,
    device_index: u8,
    piggyback_threshold: usize,
) -> Result<Vec<u8>, ParcelError> {
    let num_zc = parcel.zc_chunks.len();
    let meta_len = HEADER_FIXED_LEN + 8 * num_zc;
    if meta_len > HEADER_BOUND || num_zc > u16::MAX as usize {
        return Err(ParcelError::HeaderTooLarge {
            needed: meta_len,
            bound: HEADER_BOUND,
        });
    }
    let nzc = &parcel.nzc_chunk;
    let inline = piggyback_fits(nzc.len(), num_zc, piggyback_threshold);
    let mut flags = 0u8;
    if inline {
        flags |= FLAG_PIGGYBACK;
    }
    if parcel.merged {
        flags |= FLAG_MERGED;
    }
    let mut out = Vec::with_capacity(meta_len + if inline { nzc.len() } else { 0 });
    out.extend_from_slice(&HEADER_MAGIC.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&source_rank.to_le_bytes());
    out.push(device_index);
    out.push(flags);
    out.extend_from_slice(&(num_zc as u16).to_le_bytes());
    out.extend_from_slice(&(nzc.len() as u64).to_le_bytes());
    for chunk in &parcel.zc_chunks {
        out.extend_from_slice(&(chunk.len() as u64).to_le_bytes());
    }
    if inline {
        out.extend_from_slice(nzc);
    }
    debug_assert!(out.len() <= HEADER_BOUND);
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<HeaderFrame, ParcelError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.u32()?;
    if magic != HEADER_MAGIC {
        return Err(ParcelError::BadMagic(magic));
    }
    let tag = cur.u32()?;
    let source_rank = cur.u32()?;
    let device_index = cur.u8()?;
    let flags = cur.u8()?;
    let num_zc = cur.u16()? as usize;
    let nzc_size = cur.u64()?;
    let mut zc_sizes = Vec::with_capacity(num_zc);
    for _ in 0..num_zc {
        zc_sizes.push(cur.u64()?);
    }
    let piggyback = if flags & FLAG_PIGGYBACK != 0 {
        let len = usize::try_from(nzc_size).map_err(|_| ParcelError::HeaderTooLarge {
            needed: usize::MAX,
            bound: HEADER_BOUND,
        })?;
        Some(Bytes::copy_from_slice(cur.take(len)?))
    } else {
        None
    };
    cur.finish()?;
    Ok(HeaderFrame {
        tag,
        source_rank,
        device_index,
        flags,
        nzc_size,
        zc_sizes,
        piggyback,
    })
}

const DIGEST_SEED: u64 = 0x7061_7263_656c_7370;

/// Order-sensitive 64-bit digest over the action id, every small argument and
/// every zero-copy chunk. Lengths are hashed alongside contents so that moving
/// bytes across argument boundaries changes the digest.
pub fn parcel_digest(parcel: &Parcel) -> u64 {
    let mut h = Xxh3::with_seed(DIGEST_SEED);
    match (parcel.merged, parcel.layout()) {
        (false, Ok(layout)) => {
            h.update(&[0u8]);
            h.update(&layout.action_id.to_le_bytes());
            h.update(&(layout.small_args.len() as u64).to_le_bytes());
            for arg in &layout.small_args {
                h.update(&(arg.len() as u64).to_le_bytes());
                h.update(arg);
            }
        }
        _ => {
            h.update(&[1u8]);
            h.update(&(parcel.nzc_chunk.len() as u64).to_le_bytes());
            h.update(&parcel.nzc_chunk);
        }
    }
    h.update(&(parcel.zc_chunks.len() as u64).to_le_bytes());
    for chunk in &parcel.zc_chunks {
        h.update(&(chunk.len() as u64).to_le_bytes());
        h.update(chunk);
    }
    h.digest()
}

fn len_u32(len: usize) -> Result<u32, ParcelError> {
    u32::try_from(len).map_err(|_| ParcelError::ArgumentTooLarge(len))
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64, ParcelError> {
    let raw = bytes.get(at..at + 8).ok_or(ParcelError::Truncated {
        needed: at + 8,
        have: bytes.len(),
    })?;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()))
}

/// Little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ParcelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            ParcelError::Truncated {
                needed: self.pos.saturating_add(n),
                have: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ParcelError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, ParcelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ParcelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ParcelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(self) -> Result<(), ParcelError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(ParcelError::LengthMismatch {
                expected: self.pos,
                actual: self.bytes.len(),
            })
        }
    }
}

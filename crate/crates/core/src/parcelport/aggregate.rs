//! Parcel aggregation. A merged parcel's nonzero-copy chunk is
//!
//! ```text
//! u32 count | count x (u32 len | nzc bytes)
//! ```
//!
//! and its zero-copy chunks are the parts' chunks concatenated in order.

use bytes::{BufMut, Bytes};

use crate::parcel::{Chunk, Parcel, ParcelError, HEADER_BOUND, HEADER_FIXED_LEN, MAX_ZC};

/// Merges `parcels` into one. A single parcel is returned unchanged.
pub fn merge_parcels(parcels: &[Parcel]) -> Result<Parcel, ParcelError> {
    match parcels {
        [] => Err(ParcelError::EmptyMerge),
        [p] => Ok(p.clone()),
        _ => {
            let zc: usize = parcels.iter().map(|p| p.zc_chunks.len()).sum();
            if zc > MAX_ZC {
                return Err(ParcelError::TooManyZcChunks { count: zc, max: MAX_ZC });
            }
            let nzc_len: usize = 4 + parcels.iter().map(|p| 4 + p.nzc_chunk.len()).sum::<usize>();
            let mut nzc = Vec::with_capacity(nzc_len);
            nzc.put_u32_le(parcels.len() as u32);
            for p in parcels {
                let len = u32::try_from(p.nzc_chunk.len()).map_err(|_| ParcelError::ArgumentTooLarge(p.nzc_chunk.len()))?;
                nzc.put_u32_le(len);
                nzc.extend_from_slice(&p.nzc_chunk);
            }
            Ok(Parcel {
                nzc_chunk: Chunk::new(nzc),
                zc_chunks: parcels.iter().flat_map(|p| p.zc_chunks.iter().cloned()).collect(),
                merged: true,
            })
        }
    }
}

/// Splits a merged nonzero-copy chunk into the parts' chunks (zero-copy).
pub fn unmerge_nzc(nzc: &Bytes) -> Result<Vec<Bytes>, ParcelError> {
    let truncated = |needed: usize| ParcelError::Truncated {
        needed,
        have: nzc.len(),
    };
    let read_u32 = |at: usize| -> Result<usize, ParcelError> {
        let raw = nzc.get(at..at + 4).ok_or_else(|| truncated(at + 4))?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
    };
    let count = read_u32(0)?;
    let mut at = 4;
    let mut out = Vec::with_capacity(count.min(nzc.len() / 4));
    for _ in 0..count {
        let len = read_u32(at)?;
        at += 4;
        if at + len > nzc.len() {
            return Err(truncated(at + len));
        }
        out.push(nzc.slice(at..at + len));
        at += len;
    }
    if at != nzc.len() {
        return Err(ParcelError::LengthMismatch {
            expected: at,
            actual: nzc.len(),
        });
    }
    Ok(out)
}

/// Whether a parcel may take part in a merge: the receiver must be able to
/// find its zero-copy chunk count in its own nonzero-copy chunk.
pub(crate) fn mergeable(p: &Parcel) -> bool {
    !p.merged && p.validate().is_ok()
}

/// Splits an ordered list into consecutive merge groups whose header
/// metadata stays within bounds. Order is preserved across and within groups.
pub(crate) fn plan_groups<T>(items: Vec<T>, parcel: impl Fn(&T) -> &Parcel) -> Vec<Vec<T>> {
    let max_zc = MAX_ZC.min((HEADER_BOUND - HEADER_FIXED_LEN) / 8);
    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut cur: Vec<T> = Vec::new();
    let mut cur_zc = 0usize;
    let mut cur_nzc = 4usize;
    for item in items {
        let p = parcel(&item);
        if !mergeable(p) {
            if !cur.is_empty() {
                groups.push(std::mem::take(&mut cur));
            }
            groups.push(vec![item]);
            cur_zc = 0;
            cur_nzc = 4;
            continue;
        }
        let zc = p.zc_chunks.len();
        let nzc = 4 + p.nzc_chunk.len();
        if !cur.is_empty() && (cur_zc + zc > max_zc || cur_nzc + nzc > u32::MAX as usize) {
            groups.push(std::mem::take(&mut cur));
            cur_zc = 0;
            cur_nzc = 4;
        }
        cur_zc += zc;
        cur_nzc += nzc;
        cur.push(item);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups
}

//! Transport frame header.
//!
//! ```text
//! u8 msg_kind | u8 device_index | u16 reserved (0) | u32 tag | u32 source_rank | u32 payload_len | payload
//! ```
//!
//! For `HEADER_PUT` frames the tag slot carries the receiver's target
//! completion-queue id.

use super::TransportError;

pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    HeaderSendRecv = 0,
    HeaderPut = 1,
    Followup = 2,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Result<Self, TransportError> {
        match v {
            0 => Ok(FrameKind::HeaderSendRecv),
            1 => Ok(FrameKind::HeaderPut),
            2 => Ok(FrameKind::Followup),
            other => Err(TransportError::Malformed(format!("unknown frame kind {other}"))),
        }
    }
}

/// A frame in flight or waiting in a device's arrival staging area.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub device_index: u8,
    pub tag: u32,
    pub source: u32,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: FrameKind,
    pub device_index: u8,
    pub tag: u32,
    pub source: u32,
    pub payload_len: u32,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[0] = self.kind as u8;
        out[1] = self.device_index;
        out[4..8].copy_from_slice(&self.tag.to_le_bytes());
        out[8..12].copy_from_slice(&self.source.to_le_bytes());
        out[12..16].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(raw: &[u8; FRAME_HEADER_LEN]) -> Result<Self, TransportError> {
        let kind = FrameKind::from_u8(raw[0])?;
        let reserved = u16::from_le_bytes([raw[2], raw[3]]);
        if reserved != 0 {
            return Err(TransportError::Malformed(format!("reserved field is {reserved:#x}")));
        }
        Ok(FrameHeader {
            kind,
            device_index: raw[1],
            tag: u32::from_le_bytes(raw[4..8].try_into().unwrap()),
            source: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            payload_len: u32::from_le_bytes(raw[12..16].try_into().unwrap()),
        })
    }
}

/// Encodes a complete frame (header and payload) into one buffer.
pub fn encode_frame(kind: FrameKind, device_index: u8, tag: u32, source: u32, payload: &[u8]) -> Vec<u8> {
    let header = FrameHeader {
        kind,
        device_index,
        tag,
        source,
        payload_len: payload.len() as u32,
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    out
}

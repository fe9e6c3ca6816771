//! Wire message catalogue. Every message is framed as a kind byte plus a
//! little-endian length and payload; every send is booked into the overhead
//! ledger and optionally captured for inspection.

use crate::qcode::RealMatrix;
use crate::simharness::ledger::{OverheadLedger, OverheadTag, Party, RunPhase};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    BatchAssignment,
    MaskedEmbedding,
    LabelVector,
    GradientSegment,
    MaskedUpdate,
    BottomParams,
    PublicKeyAnnouncement,
}

impl MsgKind {
    pub fn label(self) -> &'static str {
        match self {
            MsgKind::BatchAssignment => "batch_assignment",
            MsgKind::MaskedEmbedding => "masked_embedding",
            MsgKind::LabelVector => "label_vector",
            MsgKind::GradientSegment => "gradient_segment",
            MsgKind::MaskedUpdate => "masked_update",
            MsgKind::BottomParams => "bottom_params",
            MsgKind::PublicKeyAnnouncement => "pubkey_announcement",
        }
    }

    fn byte(self) -> u8 {
        match self {
            MsgKind::BatchAssignment => 1,
            MsgKind::MaskedEmbedding => 2,
            MsgKind::LabelVector => 3,
            MsgKind::GradientSegment => 4,
            MsgKind::MaskedUpdate => 5,
            MsgKind::BottomParams => 6,
            MsgKind::PublicKeyAnnouncement => 7,
        }
    }
}

/// Frame: kind byte, payload length, payload.
pub const FRAME_OVERHEAD: usize = 5;

/// A delivered message, kept when capture is enabled.
#[derive(Debug, Clone)]
pub struct SentMessage {
    pub from: Party,
    pub to: Party,
    pub kind: MsgKind,
    pub bytes: Vec<u8>,
}

/// Serializes, books, and (optionally) captures every message.
#[derive(Debug, Default)]
pub struct Bus {
    pub capture: bool,
    pub messages: Vec<SentMessage>,
}

impl Bus {
    /// Sends `payload` from `from` to `to`. `overhead` bytes of the framed
    /// total are booked under `tag`; the rest is baseline payload. Returns
    /// the payload for the receiving side to decode.
    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &mut self,
        ledger: &mut OverheadLedger,
        phase: RunPhase,
        kind: MsgKind,
        from: Party,
        to: Party,
        payload: Vec<u8>,
        tag: OverheadTag,
        overhead: u64,
    ) -> Vec<u8> {
        let total = (payload.len() + FRAME_OVERHEAD) as u64;
        ledger.record_send(phase, kind.label(), from, to, total, tag, overhead.min(total));
        if self.capture {
            let mut framed = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
            framed.push(kind.byte());
            framed.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            framed.extend_from_slice(&payload);
            self.messages.push(SentMessage { from, to, kind, bytes: framed });
        }
        payload
    }
}

/// Real-valued tensor payload: dimensions then f64 little-endian words.
pub fn encode_real(m: &RealMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + m.data.len() * 8);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_real(bytes: &[u8]) -> Result<RealMatrix> {
    if bytes.len() < 8 {
        return Err(Error::Protocol("real matrix header truncated".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + rows * cols * 8 {
        return Err(Error::Protocol("real matrix body length mismatch".into()));
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RealMatrix { rows, cols, data })
}

/// Flat parameter vector payload.
pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + params.len() * 8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("parameter header truncated".into()));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + n * 8 {
        return Err(Error::Protocol("parameter body length mismatch".into()));
    }
    Ok(bytes[4..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + labels.len() * 4);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for v in labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() < 4 {
        return Err(Error::Protocol("label header truncated".into()));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + n * 4 {
        return Err(Error::Protocol("label body length mismatch".into()));
    }
    Ok(bytes[4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Assignment body padded to a fixed entry count so every sealed assignment
/// in a round has identical length regardless of ownership counts.
pub fn encode_ids_padded(ids: &[(u64, u32)], pad_to: usize) -> Vec<u8> {
    assert!(ids.len() <= pad_to, "cannot pad below the real entry count");
    let mut out = crate::secure_layer::channel::encode_ids(ids);
    out.resize(4 + pad_to * 12, 0);
    out
}

/// Public key announcement payload.
pub fn encode_pubkey(participant: u32, epoch: u64, pk: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 + 32);
    out.extend_from_slice(&participant.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(pk);
    out
}

pub fn decode_pubkey(bytes: &[u8]) -> Result<(u32, u64, [u8; 32])> {
    if bytes.len() != 44 {
        return Err(Error::Protocol("public key announcement length mismatch".into()));
    }
    let participant = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let epoch = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let pk: [u8; 32] = bytes[12..44].try_into().unwrap();
    Ok((participant, epoch, pk))
}

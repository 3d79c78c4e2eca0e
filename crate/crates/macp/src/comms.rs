//! The V2V channel: bit-exact compressed feature messages, synchronous
//! broadcast rounds, and transmitted-byte accounting.
//!
//! The wire layout is normative:
//!
//! ```text
//! magic   "MACPFM01"                      8 bytes
//! agent_id u32 LE                         4 bytes
//! pose     x, y, yaw as f64 LE           24 bytes
//! shape    H, W, C_latent as u32 LE      12 bytes
//! factor   u32 LE                         4 bytes
//! payload  H*W*C_latent f32 LE, row-major
//! ```
//!
//! Payload values are rounded to single precision on encode — the one
//! precision loss in the whole pipeline.

use thiserror::Error;

use crate::geom::{DenseGrid, Pose2D};

/// Magic header of the feature-message wire format.
pub const MESSAGE_MAGIC: &[u8; 8] = b"MACPFM01";

/// Fixed number of header bytes preceding the payload.
pub const HEADER_BYTES: usize = 8 + 4 + 24 + 12 + 4;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad message magic: expected {MESSAGE_MAGIC:?}, got {0:?}")]
    BadMagic([u8; 8]),
    #[error("truncated message: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("shape/payload mismatch: shape {h}x{w}x{c} implies {expected} payload bytes, got {actual}")]
    PayloadMismatch { h: u32, w: u32, c: u32, expected: usize, actual: usize },
    #[error("grid dimension {0} overflows the u32 header field")]
    ShapeOverflow(usize),
    #[error("average over zero frames is undefined")]
    ZeroFrames,
}

/// Decoded feature message.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub agent_id: u32,
    pub pose: Pose2D,
    pub factor: u32,
    pub grid: DenseGrid,
}

/// Serializes a latent grid into the wire layout. Payload doubles are
/// rounded to the nearest single-precision value.
pub fn encode_message(grid: &DenseGrid, agent_id: u32, pose: Pose2D, factor: u32) -> Result<Vec<u8>, WireError> {
    for dim in [grid.h, grid.w, grid.c] {
        if dim > u32::MAX as usize {
            return Err(WireError::ShapeOverflow(dim));
        }
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + grid.data.len() * 4);
    out.extend_from_slice(MESSAGE_MAGIC);
    out.extend_from_slice(&agent_id.to_le_bytes());
    out.extend_from_slice(&pose.x.to_le_bytes());
    out.extend_from_slice(&pose.y.to_le_bytes());
    out.extend_from_slice(&pose.yaw.to_le_bytes());
    out.extend_from_slice(&(grid.h as u32).to_le_bytes());
    out.extend_from_slice(&(grid.w as u32).to_le_bytes());
    out.extend_from_slice(&(grid.c as u32).to_le_bytes());
    out.extend_from_slice(&factor.to_le_bytes());
    for &v in &grid.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, total_needed: usize) -> Result<&'a [u8], WireError> {
    if *at + n > bytes.len() {
        return Err(WireError::Truncated { expected: total_needed.max(*at + n), actual: bytes.len() });
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

/// Inverse of [`encode_message`]; every malformation maps to a typed error.
pub fn decode_message(bytes: &[u8]) -> Result<FeatureMessage, WireError> {
    let mut at = 0usize;
    let magic = take(bytes, &mut at, 8, HEADER_BYTES)?;
    if magic != MESSAGE_MAGIC {
        let mut m = [0u8; 8];
        m.copy_from_slice(magic);
        return Err(WireError::BadMagic(m));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let f64_at = |b: &[u8]| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
    let agent_id = u32_at(take(bytes, &mut at, 4, HEADER_BYTES)?);
    let x = f64_at(take(bytes, &mut at, 8, HEADER_BYTES)?);
    let y = f64_at(take(bytes, &mut at, 8, HEADER_BYTES)?);
    let yaw = f64_at(take(bytes, &mut at, 8, HEADER_BYTES)?);
    let h = u32_at(take(bytes, &mut at, 4, HEADER_BYTES)?);
    let w = u32_at(take(bytes, &mut at, 4, HEADER_BYTES)?);
    let c = u32_at(take(bytes, &mut at, 4, HEADER_BYTES)?);
    let factor = u32_at(take(bytes, &mut at, 4, HEADER_BYTES)?);
    let count = (h as usize).checked_mul(w as usize).and_then(|v| v.checked_mul(c as usize));
    let Some(count) = count else {
        return Err(WireError::PayloadMismatch { h, w, c, expected: usize::MAX, actual: bytes.len() - at });
    };
    let expected = count * 4;
    let actual = bytes.len() - at;
    if actual != expected {
        return Err(WireError::PayloadMismatch { h, w, c, expected, actual });
    }
    let data = bytes[at..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(FeatureMessage {
        agent_id,
        pose: Pose2D { x, y, yaw },
        factor,
        grid: DenseGrid::from_data(h as usize, w as usize, c as usize, data),
    })
}

/// Per-round byte accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub messages: usize,
    pub payload_bytes: usize,
    pub header_bytes: usize,
}

impl ChannelStats {
    pub fn record(&mut self, serialized_len: usize) {
        self.messages += 1;
        self.header_bytes += HEADER_BYTES;
        self.payload_bytes += serialized_len - HEADER_BYTES;
    }

    pub fn total_bytes(&self) -> usize {
        self.payload_bytes + self.header_bytes
    }

    pub fn merge(&mut self, other: &ChannelStats) {
        self.messages += other.messages;
        self.payload_bytes += other.payload_bytes;
        self.header_bytes += other.header_bytes;
    }
}

/// One synchronous all-to-all round: every agent's serialized message is
/// delivered to every other agent, loss-free and in agent-id order. Returns
/// per-agent inboxes aligned with the input slice, plus the byte stats over
/// all deliveries.
pub fn broadcast_round(outgoing: &[(u32, Vec<u8>)]) -> (Vec<Vec<Vec<u8>>>, ChannelStats) {
    let mut order: Vec<usize> = (0..outgoing.len()).collect();
    order.sort_by_key(|&i| outgoing[i].0);
    let mut inboxes: Vec<Vec<Vec<u8>>> = vec![Vec::new(); outgoing.len()];
    let mut stats = ChannelStats::default();
    for &sender in &order {
        for receiver in 0..outgoing.len() {
            if receiver == sender {
                continue;
            }
            stats.record(outgoing[sender].1.len());
            inboxes[receiver].push(outgoing[sender].1.clone());
        }
    }
    (inboxes, stats)
}

/// Mean megabytes transmitted per frame: `(payload + headers) / frames / 2^20`.
pub fn am_megabytes(stats: &ChannelStats, n_frames: usize) -> Result<f64, WireError> {
    if n_frames == 0 {
        return Err(WireError::ZeroFrames);
    }
    Ok(stats.total_bytes() as f64 / n_frames as f64 / (1u64 << 20) as f64)
}

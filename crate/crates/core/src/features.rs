//! Frame-to-feature encoding.
//!
//! Each frame becomes a fixed vector of [`FEATURE_DIM`] values in `[0, 1]`:
//!
//! * 11 CAN identifier bits, most significant first, each 0.0 or 1.0;
//! * one normalized inter-arrival time: the gap since the previous frame
//!   with the *same* identifier, clamped to `[0, t_max]` and divided by
//!   `t_max`. The first occurrence of an identifier gets the ceiling value
//!   1.0, treating an unseen identifier like one silent for a long time;
//! * 8 payload bytes divided by 255, right-padded for short frames.
//!
//! Interval features depend on per-identifier history, so a stream must be
//! encoded in timestamp order; shuffling for training happens after
//! extraction, not before.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::frame::{CanFrame, MAX_DLC};

/// Identifier bits (11) + inter-arrival time (1) + payload bytes (8).
pub const FEATURE_DIM: usize = 20;

const ID_BITS: usize = 11;

/// One encoded frame.
pub type FeatureVector = [f64; FEATURE_DIM];

/// Tunables of the encoding. Artifacts that embed feature vectors (model
/// checkpoints, reports) carry this struct so mismatched encodings are caught
/// instead of silently degrading scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Saturation point for inter-arrival gaps, in seconds. Gaps at or above
    /// this encode as 1.0.
    pub t_max: f64,
    /// Fill byte for payload slots past the frame's dlc.
    pub padding_byte: u8,
}

impl Default for FeatureConfig {
    fn default() -> FeatureConfig {
        FeatureConfig {
            t_max: 0.1,
            padding_byte: 0,
        }
    }
}

/// Last-seen timestamp per identifier, carried across frames of one stream.
#[derive(Debug, Clone, Default)]
pub struct IdHistory {
    last_seen: HashMap<u16, f64>,
}

impl IdHistory {
    pub fn new() -> IdHistory {
        IdHistory::default()
    }

    /// Records `frame` and returns the gap since the previous frame with the
    /// same identifier, or `None` for a first occurrence.
    fn observe(&mut self, frame: &CanFrame) -> Option<f64> {
        self.last_seen
            .insert(frame.can_id, frame.timestamp)
            .map(|prev| frame.timestamp - prev)
    }
}

/// Encodes one frame, updating `history` with its timestamp.
pub fn extract(frame: &CanFrame, history: &mut IdHistory, config: &FeatureConfig) -> FeatureVector {
    let mut out = [0.0; FEATURE_DIM];

    for bit in 0..ID_BITS {
        let shift = ID_BITS - 1 - bit;
        out[bit] = ((frame.can_id >> shift) & 1) as f64;
    }

    let gap = history.observe(frame).unwrap_or(config.t_max);
    out[ID_BITS] = gap.clamp(0.0, config.t_max) / config.t_max;

    for slot in 0..MAX_DLC as usize {
        let byte = frame
            .payload
            .get(slot)
            .copied()
            .unwrap_or(config.padding_byte);
        out[ID_BITS + 1 + slot] = byte as f64 / 255.0;
    }

    out
}

/// Encodes a whole stream in order, one vector per frame.
pub fn extract_stream(frames: &[CanFrame], config: &FeatureConfig) -> Vec<FeatureVector> {
    let mut history = IdHistory::new();
    frames
        .iter()
        .map(|frame| extract(frame, &mut history, config))
        .collect()
}

/// Reassembles the identifier from the bit features of a vector. Inverse of
/// the identifier part of [`extract`].
pub fn decode_id(features: &FeatureVector) -> u16 {
    let mut id = 0u16;
    for bit in 0..ID_BITS {
        id = (id << 1) | (features[bit] as u16);
    }
    id
}

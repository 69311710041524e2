//! Core CAN frame and class-label types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest valid 11-bit arbitration identifier.
pub const MAX_STANDARD_ID: u16 = 0x7FF;

/// Largest CAN payload length in bytes.
pub const MAX_DLC: u8 = 8;

/// Traffic class of a frame. `Normal` plus the four injected attack types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Normal,
    Dos,
    Fuzzy,
    GearSpoof,
    RpmSpoof,
}

impl ClassLabel {
    /// Number of classes; the softmax in the classifier always runs over this many scores.
    pub const COUNT: usize = 5;

    /// All labels in index order.
    pub const ALL: [ClassLabel; Self::COUNT] = [
        ClassLabel::Normal,
        ClassLabel::Dos,
        ClassLabel::Fuzzy,
        ClassLabel::GearSpoof,
        ClassLabel::RpmSpoof,
    ];

    /// Stable index of this label, `0..COUNT`. `Normal` is index 0 so that
    /// argmax ties resolve toward it.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Normal => 0,
            ClassLabel::Dos => 1,
            ClassLabel::Fuzzy => 2,
            ClassLabel::GearSpoof => 3,
            ClassLabel::RpmSpoof => 4,
        }
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn is_attack(self) -> bool {
        self != ClassLabel::Normal
    }

    /// The four attack labels in index order.
    pub fn attacks() -> impl Iterator<Item = ClassLabel> {
        Self::ALL.into_iter().filter(|l| l.is_attack())
    }

    /// Short machine-readable name, used in CSV output and report keys.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Dos => "dos",
            ClassLabel::Fuzzy => "fuzzy",
            ClassLabel::GearSpoof => "gear_spoof",
            ClassLabel::RpmSpoof => "rpm_spoof",
        }
    }

    /// Human-readable name, used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::Dos => "DoS Attack",
            ClassLabel::Fuzzy => "Fuzzy Attack",
            ClassLabel::GearSpoof => "Gear Spoofing Attack",
            ClassLabel::RpmSpoof => "RPM Spoofing Attack",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassLabel> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("id {id:#x} exceeds 11-bit range")]
    IdOutOfRange { id: u32 },
    #[error("dlc {dlc} exceeds {MAX_DLC}")]
    DlcOutOfRange { dlc: u8 },
    #[error("payload length {len} does not match dlc {dlc}")]
    PayloadLengthMismatch { len: usize, dlc: u8 },
    #[error("timestamp {0} is not a non-negative finite number")]
    BadTimestamp(f64),
}

/// One parsed CAN packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanFrame {
    /// Capture time in seconds.
    pub timestamp: f64,
    /// 11-bit arbitration identifier.
    pub can_id: u16,
    /// Payload length in bytes, 0..=8.
    pub dlc: u8,
    /// Exactly `dlc` bytes. Frames with dlc < 8 stay short here; padding
    /// happens at feature-extraction time.
    pub payload: Vec<u8>,
    pub label: ClassLabel,
}

impl CanFrame {
    /// Builds a frame, enforcing the structural invariants.
    pub fn new(
        timestamp: f64,
        can_id: u16,
        payload: Vec<u8>,
        label: ClassLabel,
    ) -> Result<CanFrame, FrameError> {
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(FrameError::BadTimestamp(timestamp));
        }
        if can_id > MAX_STANDARD_ID {
            return Err(FrameError::IdOutOfRange { id: can_id as u32 });
        }
        if payload.len() > MAX_DLC as usize {
            return Err(FrameError::DlcOutOfRange {
                dlc: payload.len() as u8,
            });
        }
        Ok(CanFrame {
            timestamp,
            can_id,
            dlc: payload.len() as u8,
            payload,
            label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_indices_round_trip() {
        for label in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_index(label.index()), Some(label));
            assert_eq!(ClassLabel::from_name(label.name()), Some(label));
        }
        assert_eq!(ClassLabel::from_index(5), None);
        assert_eq!(ClassLabel::COUNT, 5);
        assert_eq!(ClassLabel::attacks().count(), 4);
    }

    #[test]
    fn frame_invariants_enforced() {
        assert_eq!(
            CanFrame::new(1.0, 0x800, vec![], ClassLabel::Normal),
            Err(FrameError::IdOutOfRange { id: 0x800 })
        );
        assert_eq!(
            CanFrame::new(1.0, 0x10, vec![0; 9], ClassLabel::Normal),
            Err(FrameError::DlcOutOfRange { dlc: 9 })
        );
        assert_eq!(
            CanFrame::new(-1.0, 0x10, vec![], ClassLabel::Normal),
            Err(FrameError::BadTimestamp(-1.0))
        );
        let f = CanFrame::new(0.5, 0x316, vec![1, 2, 3], ClassLabel::Dos).unwrap();
        assert_eq!(f.dlc, 3);
    }
}

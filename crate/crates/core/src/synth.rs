//! Synthetic CAN traffic with scripted attack injections.
//!
//! A [`TrafficProfile`] lists periodic background senders: each identifier
//! fires on its own period with a little timing jitter and a per-byte
//! payload recipe. Attacks are overlaid in time windows, reproducing the
//! classic injection patterns at their usual rates: a flood of the
//! highest-priority identifier, random identifier and payload fuzzing, and
//! forged messages on the gear and engine-speed identifiers.
//!
//! Generated traffic is deterministic in the configured seed: every
//! identifier stream and every attack window draws from its own ChaCha
//! stream, so adding a window never shifts the background bytes.
//!
//! [`write_log`] serializes frames in the common capture layout
//! (`timestamp,id,dlc,bytes...,flag`); with the per-class flag tokens of
//! [`LogFormat::synthetic`] a mixed log survives a write/parse round trip
//! with every float, byte, and label intact.

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{CanFrame, ClassLabel, FrameError, MAX_DLC, MAX_STANDARD_ID};
use crate::ingest::LogFormat;

/// Recipe for one payload byte position of a background sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteSpec {
    /// Always the same value.
    Constant(u8),
    /// `start + step * frame_index`, wrapping; mimics rolling counters and
    /// slowly sweeping sensor values.
    Counter { start: u8, step: u8 },
    /// Fresh random byte every frame.
    Noise,
}

/// One periodic background sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdSpec {
    pub can_id: u16,
    /// Nominal send period in seconds.
    pub period: f64,
    /// Uniform timing slack: each frame lands within `period * k +- jitter`
    /// of its slot.
    pub jitter: f64,
    /// Payload length; only the first `dlc` entries of `payload` are used.
    pub dlc: u8,
    pub payload: [ByteSpec; 8],
}

/// The set of background senders on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficProfile {
    pub ids: Vec<IdSpec>,
}

const fn constant_payload(bytes: [u8; 8]) -> [ByteSpec; 8] {
    let mut spec = [ByteSpec::Constant(0); 8];
    let mut i = 0;
    while i < 8 {
        spec[i] = ByteSpec::Constant(bytes[i]);
        i += 1;
    }
    spec
}

impl Default for TrafficProfile {
    /// Ten senders with periods from 5 to 100 ms, around 750 frames per
    /// second total. Includes the default gear (0x43f) and engine-speed
    /// (0x316) spoofing targets so spoof windows work out of the box.
    fn default() -> TrafficProfile {
        use ByteSpec::{Constant, Counter, Noise};
        let ids = vec![
            IdSpec {
                can_id: 0x002,
                period: 0.005,
                jitter: 0.00025,
                dlc: 8,
                payload: [
                    Counter { start: 0, step: 1 },
                    Constant(0x00),
                    Noise,
                    Constant(0x15),
                    Constant(0x00),
                    Noise,
                    Constant(0x00),
                    Counter { start: 0, step: 4 },
                ],
            },
            IdSpec {
                can_id: 0x130,
                period: 0.010,
                jitter: 0.0005,
                dlc: 8,
                payload: [
                    Constant(0x05),
                    Counter { start: 0x20, step: 1 },
                    Constant(0x68),
                    Constant(0x09),
                    Noise,
                    Constant(0x21),
                    Constant(0x00),
                    Noise,
                ],
            },
            IdSpec {
                can_id: 0x131,
                period: 0.010,
                jitter: 0.0005,
                dlc: 8,
                payload: constant_payload([0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3a]),
            },
            IdSpec {
                can_id: 0x140,
                period: 0.010,
                jitter: 0.0005,
                dlc: 8,
                payload: [
                    Counter { start: 0, step: 1 },
                    Constant(0x00),
                    Constant(0x00),
                    Noise,
                    Constant(0xfe),
                    Noise,
                    Constant(0x00),
                    Constant(0x00),
                ],
            },
            // Engine speed: two sweeping bytes stand in for the rev counter.
            IdSpec {
                can_id: 0x316,
                period: 0.010,
                jitter: 0.0005,
                dlc: 8,
                payload: [
                    Constant(0x05),
                    Counter { start: 0x21, step: 3 },
                    Counter { start: 0x68, step: 1 },
                    Constant(0x09),
                    Constant(0x21),
                    Noise,
                    Constant(0x00),
                    Constant(0x6f),
                ],
            },
            IdSpec {
                can_id: 0x350,
                period: 0.020,
                jitter: 0.001,
                dlc: 8,
                payload: [
                    Constant(0x00),
                    Constant(0x20),
                    Noise,
                    Constant(0x00),
                    Counter { start: 0, step: 2 },
                    Constant(0x00),
                    Constant(0x30),
                    Constant(0x00),
                ],
            },
            // Gear state: a slow counter cycles through plausible values.
            IdSpec {
                can_id: 0x43f,
                period: 0.020,
                jitter: 0.001,
                dlc: 8,
                payload: [
                    Constant(0x01),
                    Counter { start: 0x10, step: 1 },
                    Constant(0x00),
                    Constant(0xff),
                    Noise,
                    Constant(0x00),
                    Constant(0x00),
                    Constant(0x00),
                ],
            },
            IdSpec {
                can_id: 0x4b1,
                period: 0.050,
                jitter: 0.0025,
                dlc: 5,
                payload: constant_payload([0xff, 0x7f, 0x00, 0x05, 0x2f, 0x00, 0x00, 0x00]),
            },
            IdSpec {
                can_id: 0x545,
                period: 0.050,
                jitter: 0.0025,
                dlc: 8,
                payload: [
                    Constant(0xd8),
                    Noise,
                    Constant(0x00),
                    Counter { start: 0x8b, step: 1 },
                    Constant(0x00),
                    Constant(0x00),
                    Constant(0x00),
                    Constant(0x00),
                ],
            },
            IdSpec {
                can_id: 0x5a0,
                period: 0.100,
                jitter: 0.005,
                dlc: 2,
                payload: constant_payload([0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]),
            },
        ];
        TrafficProfile { ids }
    }
}

/// Rates, targets, and payloads for the injected attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    /// Flooded identifier; 0x000 outranks everything on a real bus.
    pub dos_id: u16,
    /// Seconds between flood frames.
    pub dos_period: f64,
    /// Seconds between fuzzing frames.
    pub fuzzy_period: f64,
    /// Seconds between forged frames for both spoofing attacks.
    pub spoof_period: f64,
    pub gear_target: u16,
    pub gear_payload: [u8; 8],
    pub rpm_target: u16,
    pub rpm_payload: [u8; 8],
}

impl Default for AttackParams {
    fn default() -> AttackParams {
        AttackParams {
            dos_id: 0x000,
            dos_period: 0.0003,
            fuzzy_period: 0.0005,
            spoof_period: 0.001,
            gear_target: 0x43f,
            // A gear value the background counter never produces.
            gear_payload: [0x01, 0x00, 0x00, 0xff, 0x00, 0x00, 0x00, 0x00],
            rpm_target: 0x316,
            // Pinned rev counter, as if the engine were redlining forever.
            rpm_payload: [0x05, 0xff, 0xff, 0x09, 0x21, 0x00, 0x00, 0x6f],
        }
    }
}

/// One attack overlaid on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackWindow {
    pub attack: ClassLabel,
    pub start: f64,
    pub end: f64,
}

/// Full description of one synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub profile: TrafficProfile,
    pub attacks: AttackParams,
    /// Capture length in seconds; frames live in `[0, duration)`.
    pub duration: f64,
    pub windows: Vec<AttackWindow>,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Ten quiet seconds of background traffic, seed zero.
    fn default() -> SynthConfig {
        SynthConfig::new(10.0, 0)
    }
}

impl SynthConfig {
    pub fn new(duration: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            profile: TrafficProfile::default(),
            attacks: AttackParams::default(),
            duration,
            windows: Vec::new(),
            seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("duration must be a positive finite number, got {0}")]
    BadDuration(f64),
    #[error("sender {index} invalid: {reason}")]
    BadSender { index: usize, reason: String },
    #[error("window {index} invalid: {reason}")]
    BadWindow { index: usize, reason: String },
    #[error("window {index} is labeled {label:?}, which is not an attack")]
    NotAnAttack { index: usize, label: ClassLabel },
    #[error("{attack:?} targets id {target:#05x}, which no background sender uses")]
    SpoofTargetMissing { attack: ClassLabel, target: u16 },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("log write failed: {0}")]
    Io(#[from] io::Error),
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of grid slots `start + k * period` inside `[start, end)`, counted
/// on the intended real-valued grid. A slot within a relative 1e-9 of the
/// boundary counts as on it, so `k * period` rounding one ulp below the end
/// cannot conjure an extra frame.
fn slot_count(start: f64, end: f64, period: f64) -> u64 {
    if end <= start {
        return 0;
    }
    let q = (end - start) / period;
    let snapped = q.round();
    let n = if (q - snapped).abs() <= 1e-9 * snapped.max(1.0) {
        snapped
    } else {
        q.ceil()
    };
    n as u64
}

/// Streams 0..n are the background senders; windows start here.
const WINDOW_STREAM_BASE: u64 = 10_000;

fn validate(config: &SynthConfig) -> Result<(), SynthError> {
    if !config.duration.is_finite() || config.duration <= 0.0 {
        return Err(SynthError::BadDuration(config.duration));
    }
    for (index, spec) in config.profile.ids.iter().enumerate() {
        let reason = if spec.can_id > MAX_STANDARD_ID {
            Some("identifier exceeds 11-bit range".to_string())
        } else if !spec.period.is_finite() || spec.period <= 0.0 {
            Some(format!("period {} not positive", spec.period))
        } else if !spec.jitter.is_finite() || spec.jitter < 0.0 || spec.jitter >= spec.period {
            Some(format!("jitter {} not in [0, period)", spec.jitter))
        } else if spec.dlc > MAX_DLC {
            Some(format!("dlc {} exceeds {}", spec.dlc, MAX_DLC))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(SynthError::BadSender { index, reason });
        }
    }
    for (index, window) in config.windows.iter().enumerate() {
        if !window.attack.is_attack() {
            return Err(SynthError::NotAnAttack {
                index,
                label: window.attack,
            });
        }
        if !window.start.is_finite()
            || !window.end.is_finite()
            || window.start < 0.0
            || window.end <= window.start
        {
            return Err(SynthError::BadWindow {
                index,
                reason: format!("bounds [{}, {}) are not ordered", window.start, window.end),
            });
        }
        let target = match window.attack {
            ClassLabel::GearSpoof => Some(config.attacks.gear_target),
            ClassLabel::RpmSpoof => Some(config.attacks.rpm_target),
            _ => None,
        };
        if let Some(target) = target {
            if !config.profile.ids.iter().any(|s| s.can_id == target) {
                return Err(SynthError::SpoofTargetMissing {
                    attack: window.attack,
                    target,
                });
            }
        }
    }
    Ok(())
}

fn background_frames(config: &SynthConfig) -> Result<Vec<CanFrame>, SynthError> {
    let mut frames = Vec::new();
    for (i, spec) in config.profile.ids.iter().enumerate() {
        let mut rng = stream_rng(config.seed, i as u64);
        let phase: f64 = rng.random_range(0.0..spec.period);
        for k in 0..slot_count(phase, config.duration, spec.period) {
            let slot = phase + k as f64 * spec.period;
            // Per-frame draw order is jitter first, then noise bytes; the
            // round-trip tests depend on it staying put.
            let t = if spec.jitter > 0.0 {
                slot + rng.random_range(-spec.jitter..spec.jitter)
            } else {
                slot
            };
            let in_range = (0.0..config.duration).contains(&t);
            let mut payload = Vec::with_capacity(spec.dlc as usize);
            for byte_spec in spec.payload.iter().take(spec.dlc as usize) {
                let byte = match *byte_spec {
                    ByteSpec::Constant(v) => v,
                    ByteSpec::Counter { start, step } => {
                        start.wrapping_add(step.wrapping_mul(k as u8))
                    }
                    ByteSpec::Noise => rng.random(),
                };
                payload.push(byte);
            }
            // Jitter can push a frame over either edge; drop it after the
            // draws so the rest of the stream is unaffected.
            if in_range {
                frames.push(CanFrame::new(t, spec.can_id, payload, ClassLabel::Normal)?);
            }
        }
    }
    Ok(frames)
}

fn window_frames(
    window: &AttackWindow,
    params: &AttackParams,
    duration: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<CanFrame>, SynthError> {
    let period = match window.attack {
        ClassLabel::Dos => params.dos_period,
        ClassLabel::Fuzzy => params.fuzzy_period,
        _ => params.spoof_period,
    };
    let end = window.end.min(duration);
    let mut frames = Vec::new();
    for k in 0..slot_count(window.start, end, period) {
        // Slots are multiples of the period from the window start, not an
        // accumulated sum, so counts are exact and drift-free.
        let t = window.start + k as f64 * period;
        let frame = match window.attack {
            ClassLabel::Dos => {
                CanFrame::new(t, params.dos_id, vec![0u8; 8], ClassLabel::Dos)?
            }
            ClassLabel::Fuzzy => {
                let id = rng.random_range(0..=MAX_STANDARD_ID);
                let payload: Vec<u8> = (0..MAX_DLC).map(|_| rng.random()).collect();
                CanFrame::new(t, id, payload, ClassLabel::Fuzzy)?
            }
            ClassLabel::GearSpoof => CanFrame::new(
                t,
                params.gear_target,
                params.gear_payload.to_vec(),
                ClassLabel::GearSpoof,
            )?,
            ClassLabel::RpmSpoof => CanFrame::new(
                t,
                params.rpm_target,
                params.rpm_payload.to_vec(),
                ClassLabel::RpmSpoof,
            )?,
            ClassLabel::Normal => unreachable!("validated as an attack"),
        };
        frames.push(frame);
    }
    Ok(frames)
}

/// Generates the capture described by `config`, sorted by timestamp.
/// Injected frames sort after background frames with the same timestamp,
/// matching bus arbitration losing to an already-transmitting frame.
pub fn generate(config: &SynthConfig) -> Result<Vec<CanFrame>, SynthError> {
    validate(config)?;
    let mut frames = background_frames(config)?;
    for (w, window) in config.windows.iter().enumerate() {
        let mut rng = stream_rng(config.seed, WINDOW_STREAM_BASE + w as u64);
        frames.extend(window_frames(
            window,
            &config.attacks,
            config.duration,
            &mut rng,
        )?);
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(frames)
}

/// Writes frames in the capture layout `timestamp,id,dlc,bytes...,flag`.
///
/// Only the flag tokens and header setting of `fmt` are honored; the column
/// order is always the canonical one above, which is what the format
/// presets describe. Timestamps print in shortest round-trip form, so
/// parsing the output recovers them exactly.
pub fn write_log<W: io::Write>(
    frames: &[CanFrame],
    fmt: &LogFormat,
    mut writer: W,
) -> Result<(), SynthError> {
    if fmt.has_header {
        writeln!(writer, "timestamp,id,dlc,payload,flag")?;
    }
    for frame in frames {
        write!(writer, "{},{:04x},{}", frame.timestamp, frame.can_id, frame.dlc)?;
        for byte in &frame.payload {
            write!(writer, ",{byte:02x}")?;
        }
        writeln!(writer, ",{}", fmt.scheme.token_for(frame.label))?;
    }
    Ok(())
}

/// [`write_log`] straight to a file path.
pub fn write_log_file(
    frames: &[CanFrame],
    fmt: &LogFormat,
    path: &std::path::Path,
) -> Result<(), SynthError> {
    let file = std::fs::File::create(path)?;
    write_log(frames, fmt, io::BufWriter::new(file))
}

//! CAN log parsing and dataset construction.
//!
//! Log files are CSV-like text; the column layout and the flag-to-label
//! mapping are described by a [`LogFormat`] so the parser survives dataset
//! revisions. Two presets ship with the crate:
//!
//! * [`LogFormat::car_hacking`] — `timestamp,id,dlc,b0..b{dlc-1},flag` with a
//!   binary R/T injection flag. Each capture file holds exactly one attack
//!   type, so flagged rows take the label supplied per file and rows flagged
//!   normal are labeled `Normal` even inside an attack capture.
//! * [`LogFormat::synthetic`] — same columns but with one flag token per
//!   class, so a single mixed log can carry all five labels and round-trips
//!   losslessly through [`crate::synth::write_log`].

use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{CanFrame, ClassLabel, MAX_DLC, MAX_STANDARD_ID};

/// Reject the whole file when more than this fraction of rows fail to parse;
/// a high reject rate almost always means the column map is wrong.
pub const REJECT_FRACTION_LIMIT: f64 = 0.01;

/// Where the injection flag lives in a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagPosition {
    /// Immediately after the last payload byte, i.e. column `payload_col + dlc`.
    /// This is the layout of the Car-hacking captures, where short frames
    /// shift the flag left.
    AfterPayload,
    /// A fixed column index.
    Column(usize),
}

/// How flag tokens map to class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagScheme {
    /// Binary normal/attack tokens; the label of flagged rows comes from
    /// per-file context (each capture holds one attack type).
    Binary {
        normal_token: String,
        attack_token: String,
        /// Label assigned to rows carrying the attack token. `None` means the
        /// capture is expected to be attack-free and attack-flagged rows are
        /// rejected rather than silently mislabeled.
        attack_label: Option<ClassLabel>,
    },
    /// One token per class, in [`ClassLabel::ALL`] order.
    PerClass { tokens: [String; ClassLabel::COUNT] },
}

impl FlagScheme {
    fn label_for(&self, token: &str) -> Result<ClassLabel, String> {
        match self {
            FlagScheme::Binary {
                normal_token,
                attack_token,
                attack_label,
            } => {
                if token == normal_token {
                    Ok(ClassLabel::Normal)
                } else if token == attack_token {
                    attack_label
                        .ok_or_else(|| "attack flag in capture with no attack label".to_string())
                } else {
                    Err(format!("unknown flag token {token:?}"))
                }
            }
            FlagScheme::PerClass { tokens } => tokens
                .iter()
                .position(|t| t == token)
                .and_then(ClassLabel::from_index)
                .ok_or_else(|| format!("unknown flag token {token:?}")),
        }
    }

    /// Token written for a label. In the binary scheme every attack label maps
    /// to the single attack token, so mixed logs only round-trip under
    /// [`FlagScheme::PerClass`].
    pub fn token_for(&self, label: ClassLabel) -> &str {
        match self {
            FlagScheme::Binary {
                normal_token,
                attack_token,
                ..
            } => {
                if label.is_attack() {
                    attack_token
                } else {
                    normal_token
                }
            }
            FlagScheme::PerClass { tokens } => &tokens[label.index()],
        }
    }
}

/// Column layout plus flag mapping for one family of log files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFormat {
    /// Skip the first row when reading; write a synthetic header when writing.
    pub has_header: bool,
    pub timestamp_col: usize,
    pub id_col: usize,
    pub dlc_col: usize,
    /// First payload byte column; bytes occupy `payload_col..payload_col+dlc`.
    pub payload_col: usize,
    pub flag: FlagPosition,
    pub scheme: FlagScheme,
}

impl LogFormat {
    /// Layout of the public Car-hacking captures
    /// (`timestamp,id,dlc,b0..b{dlc-1},R|T`).
    pub fn car_hacking(attack_label: Option<ClassLabel>) -> LogFormat {
        LogFormat {
            has_header: false,
            timestamp_col: 0,
            id_col: 1,
            dlc_col: 2,
            payload_col: 3,
            flag: FlagPosition::AfterPayload,
            scheme: FlagScheme::Binary {
                normal_token: "R".to_string(),
                attack_token: "T".to_string(),
                attack_label,
            },
        }
    }

    /// Layout written by the synthetic traffic generator: same columns as the
    /// Car-hacking captures but with per-class flag tokens so one mixed log
    /// keeps all labels.
    pub fn synthetic() -> LogFormat {
        LogFormat {
            has_header: false,
            timestamp_col: 0,
            id_col: 1,
            dlc_col: 2,
            payload_col: 3,
            flag: FlagPosition::AfterPayload,
            scheme: FlagScheme::PerClass {
                tokens: [
                    "R".to_string(),
                    "DOS".to_string(),
                    "FUZZY".to_string(),
                    "GEAR".to_string(),
                    "RPM".to_string(),
                ],
            },
        }
    }
}

impl Default for LogFormat {
    fn default() -> LogFormat {
        LogFormat::car_hacking(None)
    }
}

/// A row the parser could not turn into a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based row number in the source file (header excluded).
    pub row: usize,
    pub reason: String,
}

/// Result of parsing one log file.
#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub frames: Vec<CanFrame>,
    pub rejects: Vec<RejectedRow>,
    pub total_rows: usize,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read log: {0}")]
    Io(#[from] io::Error),
    #[error("failed to read log: {0}")]
    Csv(#[from] csv::Error),
    #[error(
        "{rejected} of {total} rows rejected (limit {limit:.0}%); first: row {first_row}: {first_reason}"
    )]
    TooManyRejects {
        rejected: usize,
        total: usize,
        limit: f64,
        first_row: usize,
        first_reason: String,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("split ratio must be a positive finite number, got {0}")]
    BadRatio(f64),
    #[error("normal ratio must be a non-negative finite number, got {0}")]
    BadNormalRatio(f64),
    #[error("not enough {label:?} frames: need {needed}, have {available} (short {shortfall})")]
    InsufficientFrames {
        label: ClassLabel,
        needed: usize,
        available: usize,
        shortfall: usize,
    },
}

fn parse_row(record: &csv::StringRecord, fmt: &LogFormat) -> Result<CanFrame, String> {
    let field = |col: usize, what: &str| -> Result<&str, String> {
        record
            .get(col)
            .map(str::trim)
            .ok_or_else(|| format!("missing {what} column {col}"))
    };

    let timestamp: f64 = field(fmt.timestamp_col, "timestamp")?
        .parse()
        .map_err(|_| "unparseable timestamp".to_string())?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err("timestamp not a non-negative number".to_string());
    }

    let id_text = field(fmt.id_col, "id")?;
    let id = u32::from_str_radix(id_text, 16).map_err(|_| format!("unparseable id {id_text:?}"))?;
    if id > MAX_STANDARD_ID as u32 {
        return Err("id exceeds 11-bit range".to_string());
    }

    let dlc: u8 = field(fmt.dlc_col, "dlc")?
        .parse()
        .map_err(|_| "unparseable dlc".to_string())?;
    if dlc > MAX_DLC {
        return Err(format!("dlc {dlc} exceeds {MAX_DLC}"));
    }

    let mut payload = Vec::with_capacity(dlc as usize);
    for i in 0..dlc as usize {
        let byte_text = field(fmt.payload_col + i, "payload byte")?;
        let byte = u8::from_str_radix(byte_text, 16)
            .map_err(|_| format!("unparseable payload byte {byte_text:?}"))?;
        payload.push(byte);
    }

    let flag_col = match fmt.flag {
        FlagPosition::AfterPayload => fmt.payload_col + dlc as usize,
        FlagPosition::Column(col) => col,
    };
    let label = fmt.scheme.label_for(field(flag_col, "flag")?)?;

    CanFrame::new(timestamp, id as u16, payload, label).map_err(|e| e.to_string())
}

/// Parses a CSV-like CAN log into frames, in file order.
///
/// Malformed rows are collected in [`ParsedLog::rejects`] with their row
/// number and reason; the call fails outright when more than
/// [`REJECT_FRACTION_LIMIT`] of the rows are rejected.
pub fn parse_log<R: io::Read>(source: R, fmt: &LogFormat) -> Result<ParsedLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(fmt.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut out = ParsedLog::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        out.total_rows += 1;
        let record = record?;
        // A lone empty line yields a single empty field; skip it silently.
        if record.len() == 1 && record.get(0).is_some_and(|f| f.trim().is_empty()) {
            out.total_rows -= 1;
            continue;
        }
        match parse_row(&record, fmt) {
            Ok(frame) => out.frames.push(frame),
            Err(reason) => out.rejects.push(RejectedRow { row, reason }),
        }
    }

    if out.total_rows > 0 {
        let fraction = out.rejects.len() as f64 / out.total_rows as f64;
        if fraction > REJECT_FRACTION_LIMIT {
            let first = &out.rejects[0];
            return Err(IngestError::TooManyRejects {
                rejected: out.rejects.len(),
                total: out.total_rows,
                limit: REJECT_FRACTION_LIMIT * 100.0,
                first_row: first.row,
                first_reason: first.reason.clone(),
            });
        }
    }
    Ok(out)
}

/// Per-label frame counts; indexed by [`ClassLabel::index`].
pub type LabelCounts = [u64; ClassLabel::COUNT];

pub fn count_labels(frames: &[CanFrame]) -> LabelCounts {
    let mut counts = [0u64; ClassLabel::COUNT];
    for frame in frames {
        counts[frame.label.index()] += 1;
    }
    counts
}

/// Bookkeeping for one train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    /// Train:test ratio, e.g. 3.0 for 3:1.
    pub ratio: f64,
    pub train_counts: LabelCounts,
    pub test_counts: LabelCounts,
    /// Source file names, filled in by the caller when known.
    pub sources: Vec<String>,
}

/// A disjoint train/test partition of an ingested frame sequence.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<CanFrame>,
    pub test: Vec<CanFrame>,
    /// Positions of the train frames in the input sequence, ascending.
    pub train_indices: Vec<usize>,
    /// Positions of the test frames in the input sequence, ascending.
    pub test_indices: Vec<usize>,
    pub manifest: SplitManifest,
}

/// Partitions frames uniformly at random into train and test sides with
/// `|train| : |test|` within one frame of `ratio`.
///
/// Both sides keep the input order, so per-ID timestamp monotonicity survives
/// the split and feature extraction stays valid on either side.
pub fn split_train_test(
    frames: &[CanFrame],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit, IngestError> {
    if frames.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(IngestError::BadRatio(ratio));
    }

    let n = frames.len();
    let n_train = ((n as f64) * ratio / (1.0 + ratio)).round() as usize;
    let n_train = n_train.min(n);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);

    let mut train_indices: Vec<usize> = indices[..n_train].to_vec();
    let mut test_indices: Vec<usize> = indices[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    let train: Vec<CanFrame> = train_indices.iter().map(|&i| frames[i].clone()).collect();
    let test: Vec<CanFrame> = test_indices.iter().map(|&i| frames[i].clone()).collect();

    let manifest = SplitManifest {
        seed,
        ratio,
        train_counts: count_labels(&train),
        test_counts: count_labels(&test),
        sources: Vec::new(),
    };
    Ok(DatasetSplit {
        train,
        test,
        train_indices,
        test_indices,
        manifest,
    })
}

/// Counts for one per-attack subset of the balanced training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub attack: ClassLabel,
    pub normal: usize,
    pub attack_frames: usize,
}

/// A class-balanced training subset, with provenance back into the source
/// frame sequence.
#[derive(Debug, Clone)]
pub struct BalancedSubset {
    /// Selected frames, shuffled.
    pub frames: Vec<CanFrame>,
    /// For each entry of `frames`, its index in the input sequence. Training
    /// code uses this to pick up feature vectors extracted from the unshuffled
    /// stream, where inter-arrival times are still meaningful.
    pub source_indices: Vec<usize>,
    pub per_subset: [SubsetCounts; 4],
    pub seed: u64,
}

fn sample_without_replacement(
    pool: &[usize],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    // Partial Fisher-Yates over a copy of the pool.
    let mut pool = pool.to_vec();
    let n = pool.len();
    debug_assert!(k <= n);
    for i in 0..k {
        let j = rand::Rng::random_range(rng, i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Draws the balanced training subset: one subset of `per_attack` frames per
/// attack label, each mixing `normal_ratio : 1` normal to attack frames,
/// sampled uniformly without replacement and shuffled.
///
/// With the defaults (`per_attack = 90_000`, `normal_ratio = 2.0`) the result
/// holds 360,000 frames: 240,000 normal and 30,000 of each attack.
pub fn build_balanced_train_subset(
    frames: &[CanFrame],
    per_attack: usize,
    normal_ratio: f64,
    seed: u64,
) -> Result<BalancedSubset, IngestError> {
    if !normal_ratio.is_finite() || normal_ratio < 0.0 {
        return Err(IngestError::BadNormalRatio(normal_ratio));
    }
    let normal_per_subset =
        ((per_attack as f64) * normal_ratio / (1.0 + normal_ratio)).round() as usize;
    let attack_per_subset = per_attack - normal_per_subset;

    let mut by_label: [Vec<usize>; ClassLabel::COUNT] = Default::default();
    for (i, frame) in frames.iter().enumerate() {
        by_label[frame.label.index()].push(i);
    }

    let need_normal = normal_per_subset * 4;
    let have_normal = by_label[ClassLabel::Normal.index()].len();
    if have_normal < need_normal {
        return Err(IngestError::InsufficientFrames {
            label: ClassLabel::Normal,
            needed: need_normal,
            available: have_normal,
            shortfall: need_normal - have_normal,
        });
    }
    for attack in ClassLabel::attacks() {
        let have = by_label[attack.index()].len();
        if have < attack_per_subset {
            return Err(IngestError::InsufficientFrames {
                label: attack,
                needed: attack_per_subset,
                available: have,
                shortfall: attack_per_subset - have,
            });
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // All normal frames are drawn in one pass so the four subsets stay
    // disjoint, then dealt out in chunks.
    let normal_picks =
        sample_without_replacement(&by_label[ClassLabel::Normal.index()], need_normal, &mut rng);

    let mut source_indices = Vec::with_capacity(per_attack * 4);
    let mut per_subset = [SubsetCounts {
        attack: ClassLabel::Normal,
        normal: 0,
        attack_frames: 0,
    }; 4];
    for (s, attack) in ClassLabel::attacks().enumerate() {
        let normals = &normal_picks[s * normal_per_subset..(s + 1) * normal_per_subset];
        let attacks =
            sample_without_replacement(&by_label[attack.index()], attack_per_subset, &mut rng);
        source_indices.extend_from_slice(normals);
        source_indices.extend_from_slice(&attacks);
        per_subset[s] = SubsetCounts {
            attack,
            normal: normals.len(),
            attack_frames: attacks.len(),
        };
    }
    source_indices.shuffle(&mut rng);

    let frames = source_indices.iter().map(|&i| frames[i].clone()).collect();
    Ok(BalancedSubset {
        frames,
        source_indices,
        per_subset,
        seed,
    })
}

/// Guesses the attack label of a Car-hacking capture from its file name
/// (`DoS_dataset.csv`, `Fuzzy_dataset.csv`, `gear_dataset.csv`,
/// `RPM_dataset.csv`). Attack-free captures return `None`.
pub fn label_from_filename(name: &str) -> Option<ClassLabel> {
    let lower = name.to_ascii_lowercase();
    if lower.contains("dos") {
        Some(ClassLabel::Dos)
    } else if lower.contains("fuzz") {
        Some(ClassLabel::Fuzzy)
    } else if lower.contains("gear") {
        Some(ClassLabel::GearSpoof)
    } else if lower.contains("rpm") {
        Some(ClassLabel::RpmSpoof)
    } else {
        None
    }
}

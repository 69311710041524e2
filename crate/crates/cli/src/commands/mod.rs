//! Subcommand implementations and the plumbing they share: exit-code
//! classification, artifact writing, and capture loading.

pub mod eval;
pub mod gen;
pub mod predict;
pub mod split;
pub mod train;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use canids_core::classifier::Checkpoint;
use canids_core::features::FeatureConfig;
use canids_core::ingest::{parse_log, IngestError, LabelCounts, LogFormat, ParsedLog};
use canids_core::synth::{AttackWindow, SynthError};
use canids_core::{CanFrame, ClassLabel};
use serde::Serialize;

use crate::config::RunConfig;

/// A command failure, split by exit code: configuration and input-shape
/// problems exit 2, failures while doing otherwise valid work exit 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult = Result<(), Failure>;

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

pub fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Ingestion problems that mean "the request does not fit this data" are
/// usage errors; broken files and IO are runtime errors.
pub fn ingest_failure(e: IngestError) -> Failure {
    match &e {
        IngestError::EmptyInput
        | IngestError::BadRatio(_)
        | IngestError::BadNormalRatio(_)
        | IngestError::InsufficientFrames { .. } => usage(e),
        IngestError::Io(_) | IngestError::Csv(_) | IngestError::TooManyRejects { .. } => {
            runtime(e)
        }
    }
}

/// Scenario validation is a usage error; only writing and frame assembly
/// count as runtime failures.
pub fn synth_failure(e: SynthError) -> Failure {
    match &e {
        SynthError::Io(_) | SynthError::Frame(_) => runtime(e),
        _ => usage(e),
    }
}

/// `spec` is `attack:start:end`, e.g. `dos:10:22`.
pub fn parse_window(spec: &str) -> Result<AttackWindow> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [name, start, end] = parts.as_slice() else {
        anyhow::bail!("window {spec:?} is not of the form attack:start:end");
    };
    let attack = ClassLabel::from_name(name)
        .filter(|l| l.is_attack())
        .ok_or_else(|| anyhow!("window {spec:?} names no attack; use dos, fuzzy, gear_spoof, or rpm_spoof"))?;
    let start: f64 = start
        .parse()
        .with_context(|| format!("window {spec:?}: bad start time"))?;
    let end: f64 = end
        .parse()
        .with_context(|| format!("window {spec:?}: bad end time"))?;
    Ok(AttackWindow { attack, start, end })
}

/// Label counts keyed by class name, for human-readable manifests.
pub fn counts_map(counts: &LabelCounts) -> BTreeMap<&'static str, u64> {
    ClassLabel::ALL
        .iter()
        .map(|l| (l.name(), counts[l.index()]))
        .collect()
}

pub fn tally_labels(labels: &[ClassLabel]) -> LabelCounts {
    let mut counts = [0u64; ClassLabel::COUNT];
    for label in labels {
        counts[label.index()] += 1;
    }
    counts
}

/// Pretty-printed JSON plus trailing newline; used for every JSON artifact.
pub fn write_json_artifact(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let write = || -> Result<()> {
        let file = File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut out, value).context("serializing artifact")?;
        out.write_all(b"\n").context("writing artifact")?;
        Ok(())
    };
    write().map_err(runtime)
}

/// `model.ckpt` becomes `model.ckpt.partial`, keeping the original name
/// visible inside the new one.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(".partial");
    PathBuf::from(name)
}

/// Reads and parses one capture, reporting reject counts on stderr so
/// silently dropped rows never go unnoticed.
pub fn load_log(path: &Path, fmt: &LogFormat) -> Result<ParsedLog, Failure> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(runtime)?;
    let parsed = parse_log(BufReader::new(file), fmt).map_err(ingest_failure)?;
    if !parsed.rejects.is_empty() {
        eprintln!(
            "note: {} of {} rows in {} rejected; first: row {}: {}",
            parsed.rejects.len(),
            parsed.total_rows,
            path.display(),
            parsed.rejects[0].row,
            parsed.rejects[0].reason,
        );
    }
    Ok(parsed)
}

/// Loads the checkpoint and settles the effective feature encoding: absent
/// from the config it is inherited from the checkpoint, present it must
/// match exactly, because features encoded differently from training are
/// garbage to the model even when every dimension lines up.
pub fn checkpoint_features(
    checkpoint_path: &Path,
    config: &mut RunConfig,
) -> Result<(Checkpoint, FeatureConfig), Failure> {
    let checkpoint = Checkpoint::load(checkpoint_path).map_err(runtime)?;
    match config.features {
        None => {
            config.features = Some(checkpoint.feature_config);
        }
        Some(requested) if requested != checkpoint.feature_config => {
            return Err(usage(anyhow!(
                "feature config mismatch: checkpoint was trained with {:?}, flags/config ask for {:?}",
                checkpoint.feature_config,
                requested
            )));
        }
        Some(_) => {}
    }
    let features = checkpoint.feature_config;
    Ok((checkpoint, features))
}

/// Frames of a capture whose labels all come out as claimed; the shared
/// front half of `predict` and `eval`.
pub fn load_labeled_input(
    path: &Path,
    config: &RunConfig,
) -> Result<Vec<CanFrame>, Failure> {
    let fmt = effective_format(config, path).map_err(usage)?;
    let parsed = load_log(path, &fmt)?;
    if parsed.frames.is_empty() {
        return Err(usage(anyhow!("{} holds no frames", path.display())));
    }
    Ok(parsed.frames)
}

/// The configured format, with one convenience: a `car_hacking` capture
/// with no configured attack label borrows it from the file name, which is
/// how the published captures are distributed.
pub fn effective_format(config: &RunConfig, path: &Path) -> Result<LogFormat> {
    let mut fmt = config.log_format()?;
    if config.log.format == "car_hacking" && config.attack_label()?.is_none() {
        if let Some(label) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(canids_core::ingest::label_from_filename)
        {
            fmt = LogFormat::car_hacking(Some(label));
        }
    }
    Ok(fmt)
}

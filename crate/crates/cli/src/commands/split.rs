//! `canids split`: carve one labeled capture into train and test logs.

use std::path::PathBuf;

use canids_core::ingest::{split_train_test, LogFormat, SplitManifest};
use canids_core::synth::write_log_file;
use serde::Serialize;

use super::{
    counts_map, effective_format, ingest_failure, load_log, synth_failure, usage,
    write_json_artifact, CmdResult,
};
use crate::config::{config_hash, RunConfig};
use crate::SplitArgs;

#[derive(Serialize)]
struct SplitReport {
    config_hash: String,
    config: RunConfig,
    input: String,
    train_log: String,
    test_log: String,
    split: SplitManifest,
    train_counts: std::collections::BTreeMap<&'static str, u64>,
    test_counts: std::collections::BTreeMap<&'static str, u64>,
    rejected_rows: usize,
}

pub fn run(mut config: RunConfig, args: SplitArgs) -> CmdResult {
    if let Some(ratio) = args.ratio {
        config.dataset.split_ratio = ratio;
    }
    if let Some(seed) = args.seed {
        config.dataset.split_seed = seed;
    }
    if let Some(format) = &args.format {
        config.log.format = format.clone();
    }
    if let Some(label) = &args.attack_label {
        config.log.attack_label = Some(label.clone());
    }
    let hash = config_hash(&config);

    let fmt = effective_format(&config, &args.input).map_err(usage)?;
    let parsed = load_log(&args.input, &fmt)?;
    let mut split = split_train_test(
        &parsed.frames,
        config.dataset.split_ratio,
        config.dataset.split_seed,
    )
    .map_err(ingest_failure)?;
    split
        .manifest
        .sources
        .push(args.input.display().to_string());

    // Both sides go out in the synthetic format so every label survives.
    let out_fmt = LogFormat::synthetic();
    write_log_file(&split.train, &out_fmt, &args.train_out).map_err(synth_failure)?;
    write_log_file(&split.test, &out_fmt, &args.test_out).map_err(synth_failure)?;

    let manifest_path = args
        .manifest
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", args.train_out.display())));
    let report = SplitReport {
        config_hash: hash.clone(),
        config,
        input: args.input.display().to_string(),
        train_log: args.train_out.display().to_string(),
        test_log: args.test_out.display().to_string(),
        train_counts: counts_map(&split.manifest.train_counts),
        test_counts: counts_map(&split.manifest.test_counts),
        split: split.manifest,
        rejected_rows: parsed.rejects.len(),
    };
    write_json_artifact(&manifest_path, &report)?;

    println!(
        "split {} frames into {} train / {} test (manifest {}, config {})",
        parsed.frames.len(),
        split.train.len(),
        split.test.len(),
        manifest_path.display(),
        &hash[..12],
    );
    Ok(())
}

//! `canids gen`: write a synthetic labeled capture and its manifest.

use std::path::PathBuf;

use canids_core::ingest::{count_labels, LogFormat};
use canids_core::synth::{generate, write_log_file};
use serde::Serialize;

use super::{
    counts_map, parse_window, synth_failure, usage, write_json_artifact, CmdResult,
};
use crate::config::{config_hash, RunConfig};
use crate::GenArgs;

#[derive(Serialize)]
struct GenManifest {
    config_hash: String,
    config: RunConfig,
    log: String,
    frames: usize,
    label_counts: std::collections::BTreeMap<&'static str, u64>,
}

pub fn run(mut config: RunConfig, args: GenArgs) -> CmdResult {
    if let Some(duration) = args.duration {
        config.synth.duration = duration;
    }
    if let Some(seed) = args.seed {
        config.synth.seed = seed;
    }
    if !args.windows.is_empty() {
        let parsed: Result<Vec<_>, _> = args.windows.iter().map(|w| parse_window(w)).collect();
        config.synth.windows = parsed.map_err(usage)?;
    }
    let hash = config_hash(&config);

    let frames = generate(&config.synth).map_err(synth_failure)?;
    // The synthetic format is the only one that can carry all five labels.
    write_log_file(&frames, &LogFormat::synthetic(), &args.out).map_err(synth_failure)?;

    let counts = count_labels(&frames);
    let manifest_path = args
        .manifest
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", args.out.display())));
    write_json_artifact(
        &manifest_path,
        &GenManifest {
            config_hash: hash.clone(),
            config,
            log: args.out.display().to_string(),
            frames: frames.len(),
            label_counts: counts_map(&counts),
        },
    )?;

    println!(
        "wrote {} frames to {} (manifest {}, config {})",
        frames.len(),
        args.out.display(),
        manifest_path.display(),
        &hash[..12],
    );
    Ok(())
}

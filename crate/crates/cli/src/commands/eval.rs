//! `canids eval`: score a labeled capture against the model and report
//! detection metrics as a text table and JSON.

use std::fs;
use std::path::PathBuf;

use canids_core::eval::{evaluate, ConfusionMatrix, EvalReport};
use serde::Serialize;

use super::{checkpoint_features, load_labeled_input, runtime, write_json_artifact, CmdResult};
use crate::config::{config_hash, RunConfig};
use crate::EvalArgs;

#[derive(Serialize)]
struct EvalArtifact {
    config_hash: String,
    config: RunConfig,
    checkpoint: String,
    input: String,
    frames: usize,
    k: usize,
    metrics: EvalReport,
}

pub fn run(mut config: RunConfig, args: EvalArgs) -> CmdResult {
    if let Some(k) = args.k {
        config.scoring.k = Some(k);
    }
    if let Some(seed) = args.seed {
        config.scoring.seed = seed;
    }
    if let Some(format) = &args.format {
        config.log.format = format.clone();
    }
    if let Some(label) = &args.attack_label {
        config.log.attack_label = Some(label.clone());
    }

    let (checkpoint, features) = checkpoint_features(&args.checkpoint, &mut config)?;
    let k = config.scoring.k.unwrap_or(checkpoint.model.config.k_predict);
    config.scoring.k = Some(k);
    let hash = config_hash(&config);

    let frames = load_labeled_input(&args.input, &config)?;
    let predictions = checkpoint
        .model
        .classify_log(&frames, &features, k, config.scoring.seed)
        .map_err(runtime)?;

    let cm = ConfusionMatrix::from_pairs(
        frames
            .iter()
            .zip(&predictions)
            .map(|(frame, p)| (frame.label, p.label)),
    );
    let report = evaluate(&cm);

    let text = format!("config_hash {hash}\n{report}");
    print!("{text}");

    if let Some(path) = &args.text_out {
        fs::write(path, &text).map_err(runtime)?;
    }
    let json_path = args
        .json_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.eval.json", args.input.display())));
    write_json_artifact(
        &json_path,
        &EvalArtifact {
            config_hash: hash,
            config,
            checkpoint: args.checkpoint.display().to_string(),
            input: args.input.display().to_string(),
            frames: frames.len(),
            k,
            metrics: report,
        },
    )?;
    Ok(())
}

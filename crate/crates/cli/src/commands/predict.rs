//! `canids predict`: per-frame class probabilities for a capture, one CSV
//! row per input frame in input order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use canids_core::ClassLabel;
use serde::Serialize;

use super::{checkpoint_features, load_labeled_input, runtime, write_json_artifact, CmdResult};
use crate::config::{config_hash, RunConfig};
use crate::PredictArgs;

#[derive(Serialize)]
struct PredictMeta {
    config_hash: String,
    config: RunConfig,
    checkpoint: String,
    input: String,
    output: String,
    frames: usize,
    k: usize,
}

pub fn run(mut config: RunConfig, args: PredictArgs) -> CmdResult {
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

    let write = || -> anyhow::Result<()> {
        let file = File::create(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# config_hash {hash} seed {}", config.scoring.seed)?;
        write!(out, "index,label")?;
        for label in ClassLabel::ALL {
            write!(out, ",p_{}", label.name())?;
        }
        writeln!(out)?;
        for (i, p) in predictions.iter().enumerate() {
            write!(out, "{i},{}", p.label.name())?;
            for prob in p.posterior {
                write!(out, ",{prob}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    };
    write().map_err(runtime)?;

    let meta_path = PathBuf::from(format!("{}.meta.json", args.out.display()));
    write_json_artifact(
        &meta_path,
        &PredictMeta {
            config_hash: hash.clone(),
            config,
            checkpoint: args.checkpoint.display().to_string(),
            input: args.input.display().to_string(),
            output: args.out.display().to_string(),
            frames: frames.len(),
            k,
        },
    )?;

    println!(
        "scored {} frames into {} (config {})",
        frames.len(),
        args.out.display(),
        &hash[..12],
    );
    Ok(())
}

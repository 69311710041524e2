//! `canids train`: fit a classifier and write a checkpoint, a loss trace,
//! and a metadata sidecar.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use canids_core::classifier::{
    prior_from_counts, train, Checkpoint, GenClassifier, TrainError, TrainReport,
};
use canids_core::features::{extract_stream, FeatureConfig, FeatureVector, FEATURE_DIM};
use canids_core::ingest::build_balanced_train_subset;
use canids_core::nn::adam::AdamState;
use canids_core::ClassLabel;
use serde::Serialize;

use super::{
    counts_map, effective_format, ingest_failure, load_log, partial_path, runtime, tally_labels,
    usage, write_json_artifact, CmdResult, Failure,
};
use crate::config::{config_hash, RunConfig};
use crate::TrainArgs;

#[derive(Serialize)]
struct TrainMeta {
    config_hash: String,
    config: RunConfig,
    inputs: Vec<String>,
    resumed_from: Option<String>,
    checkpoint: String,
    trace: String,
    training_counts: BTreeMap<&'static str, u64>,
    epochs_run: usize,
    batches_run: usize,
    final_loss: Option<f64>,
}

fn apply_flags(config: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        config.train.batch_size = batch;
    }
    if let Some(lr) = args.learning_rate {
        config.train.adam.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.sequential {
        config.train.sequential = true;
    }
    if let Some(per_attack) = args.per_attack {
        config.dataset.per_attack = per_attack;
    }
    if let Some(ratio) = args.normal_ratio {
        config.dataset.normal_ratio = ratio;
    }
    if let Some(mode) = args.mode {
        config.model.mode = mode;
    }
    if let Some(k) = args.k {
        config.model.k_predict = k;
    }
    if let Some(format) = &args.format {
        config.log.format = format.clone();
    }
    if let Some(label) = &args.attack_label {
        config.log.attack_label = Some(label.clone());
    }
    if config.features.is_none() {
        config.features = Some(FeatureConfig::default());
    }
    if config.model.x_dim != FEATURE_DIM {
        anyhow::bail!(
            "model.x_dim is {}, but frame features are {} wide",
            config.model.x_dim,
            FEATURE_DIM
        );
    }
    Ok(())
}

/// Features and labels for every frame of every input, extracted per
/// capture so inter-arrival gaps never straddle file boundaries.
fn load_training_rows(
    config: &RunConfig,
    inputs: &[PathBuf],
    features: &FeatureConfig,
) -> Result<(Vec<FeatureVector>, Vec<ClassLabel>), Failure> {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    let mut frames_all = Vec::new();
    for path in inputs {
        let fmt = effective_format(config, path).map_err(usage)?;
        let parsed = load_log(path, &fmt)?;
        xs.extend(extract_stream(&parsed.frames, features));
        labels.extend(parsed.frames.iter().map(|f| f.label));
        frames_all.extend(parsed.frames);
    }
    if xs.is_empty() {
        return Err(usage(anyhow!("no frames in any input")));
    }

    if config.dataset.per_attack > 0 {
        let subset = build_balanced_train_subset(
            &frames_all,
            config.dataset.per_attack,
            config.dataset.normal_ratio,
            config.dataset.split_seed,
        )
        .map_err(ingest_failure)?;
        let xs_subset: Vec<FeatureVector> =
            subset.source_indices.iter().map(|&i| xs[i]).collect();
        let labels_subset: Vec<ClassLabel> = subset.frames.iter().map(|f| f.label).collect();
        Ok((xs_subset, labels_subset))
    } else {
        Ok((xs, labels))
    }
}

fn write_trace(
    path: &Path,
    hash: &str,
    seed: u64,
    first_epoch: usize,
    report: &TrainReport,
) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# config_hash {hash} seed {seed}")?;
    writeln!(out, "epoch,mean_loss,probe_neg_elbo,probe_accuracy")?;
    let probes: BTreeMap<usize, (f64, f64)> = report
        .eval_history
        .iter()
        .map(|p| (p.epoch, (-p.mean_elbo, p.accuracy)))
        .collect();
    for (i, loss) in report.loss_history.iter().enumerate() {
        let epoch = first_epoch + i;
        match probes.get(&epoch) {
            Some((neg_elbo, acc)) => writeln!(out, "{epoch},{loss},{neg_elbo},{acc}")?,
            None => writeln!(out, "{epoch},{loss},,")?,
        }
    }
    Ok(())
}

pub fn run(mut config: RunConfig, args: TrainArgs) -> CmdResult {
    apply_flags(&mut config, &args).map_err(usage)?;
    let features = config.features.expect("defaulted in apply_flags");
    let hash = config_hash(&config);

    let (xs, labels) = load_training_rows(&config, &args.input, &features)?;
    let counts = tally_labels(&labels);
    let prior = prior_from_counts(&counts).map_err(|e| usage(anyhow!(e)))?;

    // Resuming keeps the stored architecture and optimizer and continues
    // the epoch numbering; a fresh run builds everything from the config.
    let (mut model, mut optimizer, first_epoch) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(runtime)?;
            if ck.feature_config != features {
                return Err(usage(anyhow!(
                    "feature config mismatch: checkpoint was trained with {:?}, this run uses {:?}",
                    ck.feature_config,
                    features
                )));
            }
            let prior_epochs = ck.train_config.as_ref().map_or(0, |c| c.first_epoch)
                + ck.train_report.as_ref().map_or(0, |r| r.epochs_run);
            (ck.model, ck.optimizer.unwrap_or_default(), prior_epochs)
        }
        None => {
            let model = GenClassifier::new(config.model, prior, config.train.seed)
                .map_err(|e| usage(anyhow!(e)))?;
            (model, AdamState::new(), 0)
        }
    };

    let mut train_config = config.train.clone();
    train_config.first_epoch = first_epoch;
    let outcome = train(&mut model, &mut optimizer, &xs, &labels, &train_config);

    let mut checkpoint = Checkpoint::new(model, features);
    checkpoint.optimizer = Some(optimizer);
    checkpoint.train_config = Some(train_config);

    let report = match outcome {
        Ok(report) => report,
        Err(e) => {
            // Keep what we have: on divergence the model still holds the
            // last finite parameters.
            let partial = partial_path(&args.out);
            let save = checkpoint.save(&partial);
            let kind = match &e {
                TrainError::Diverged { .. } | TrainError::Model(_) => runtime(anyhow!(e)),
                _ => usage(anyhow!(e)),
            };
            match save {
                Ok(()) => eprintln!("partial checkpoint kept at {}", partial.display()),
                Err(se) => eprintln!("also failed to keep partial checkpoint: {se}"),
            }
            return Err(kind);
        }
    };
    checkpoint.train_report = Some(report.clone());
    checkpoint.save(&args.out).map_err(runtime)?;

    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.trace.csv", args.out.display())));
    write_trace(&trace_path, &hash, config.train.seed, first_epoch, &report).map_err(runtime)?;

    let meta_path = PathBuf::from(format!("{}.meta.json", args.out.display()));
    write_json_artifact(
        &meta_path,
        &TrainMeta {
            config_hash: hash.clone(),
            config: config.clone(),
            inputs: args.input.iter().map(|p| p.display().to_string()).collect(),
            resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
            checkpoint: args.out.display().to_string(),
            trace: trace_path.display().to_string(),
            training_counts: counts_map(&counts),
            epochs_run: report.epochs_run,
            batches_run: report.batches_run,
            final_loss: report.final_loss,
        },
    )?;

    println!(
        "trained on {} frames for {} epochs (final loss {}); checkpoint {}, trace {}, config {}",
        xs.len(),
        report.epochs_run,
        report
            .final_loss
            .map_or("-".to_string(), |l| format!("{l:.4}")),
        args.out.display(),
        trace_path.display(),
        &hash[..12],
    );
    Ok(())
}

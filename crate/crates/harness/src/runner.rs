//! End-to-end experiment runners: two-stage training, evaluation against
//! regenerated datasets, similarity matching with a threshold sweep, and the
//! ablation grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sta_core::adapt::{init_stage1, stage2_mask, train, StepRecord, TrainingSchedule};
use sta_core::checkpoint::{load_checkpoint, save_checkpoint};
use sta_core::encoder::{EncoderConfig, Model, Placement, TemporalOrder};
use sta_core::error::{Error, Result};
use sta_core::lora::{attach_lora, default_lora_targets};
use sta_core::rng::SeededRng;
use sta_core::synthvideo::{gen_dataset, gen_vsm_dataset, Dataset, VideoSample};
use sta_core::tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::eval::{evaluate, sweep_tau, triplet_similarities, vsm_accuracy_at, EvalReport, VsmReport};

pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    gen_dataset(&config.data, SeededRng::derive_seed(config.seed, "data"))
}

fn examples_into(samples: Vec<VideoSample>) -> Vec<(Tensor, usize)> {
    samples.into_iter().map(|s| (s.clip, s.label)).collect()
}

fn examples_of(samples: &[VideoSample]) -> Vec<(Tensor, usize)> {
    samples.iter().map(|s| (s.clip.clone(), s.label)).collect()
}

/// A completed two-stage run, still in memory.
pub struct TrainedRun {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub test: Vec<VideoSample>,
}

/// Runs stage 1 (zero-init temporal branches, frozen base) and stage 2
/// (adapters on the frozen linear layers, trained jointly with the stage-1
/// set) on a freshly generated dataset.
pub fn train_from_config(
    config: &ExperimentConfig,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<TrainedRun> {
    config.validate()?;
    let ds = build_dataset(config)?;
    let mut model = Model::new(
        config.encoder.clone(),
        config.data.classes.len(),
        SeededRng::derive_seed(config.seed, "model"),
    )?;
    let val = examples_of(&ds.val);
    let test = ds.test;
    let train_set = examples_into(ds.train);
    let t = &config.training;
    let steps_per_epoch = train_set.len().div_ceil(t.batch_size);
    let mut log = Vec::new();

    let mask1 = init_stage1(&mut model)?;
    if t.stage1.epochs > 0 {
        let schedule = TrainingSchedule {
            stage: 1,
            total_steps: t.stage1.epochs * steps_per_epoch,
            warmup_steps: t.stage1.warmup_steps.min(t.stage1.epochs * steps_per_epoch),
            base_lr: t.stage1.base_lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            seed: SeededRng::derive_seed(config.seed, "stage1"),
        };
        log.extend(train(&mut model, &train_set, &val, &schedule, &mask1, t.eval_every, &mut on_step)?);
    }

    if t.stage2.epochs > 0 {
        let targets = default_lora_targets(&model);
        attach_lora(
            &mut model,
            &targets,
            t.lora.rank,
            t.lora.alpha,
            SeededRng::derive_seed(config.seed, "lora"),
        )?;
        let mask2 = stage2_mask(&model, &mask1);
        let schedule = TrainingSchedule {
            stage: 2,
            total_steps: t.stage2.epochs * steps_per_epoch,
            warmup_steps: t.stage2.warmup_steps.min(t.stage2.epochs * steps_per_epoch),
            base_lr: t.stage2.base_lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            seed: SeededRng::derive_seed(config.seed, "stage2"),
        };
        log.extend(train(&mut model, &train_set, &val, &schedule, &mask2, t.eval_every, &mut on_step)?);
    }

    Ok(TrainedRun { model, log, test })
}

pub struct TrainArtifacts {
    pub report: EvalReport,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
}

/// Full training run with on-disk artifacts under `out`: the config actually
/// used, a JSON-lines step log, periodic and final checkpoints, and the final
/// test-split report.
pub fn run_train(config: &ExperimentConfig, out: &Path) -> Result<TrainArtifacts> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(config).expect("config serializes"),
    )
    .map_err(|e| Error::io(&config_path, e))?;

    let log_path = out.join("train_log.jsonl");
    let mut log_file =
        fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let checkpoint_every = config.training.checkpoint_every;

    let run = train_from_config(config, |record, model| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if checkpoint_every > 0 && record.step % checkpoint_every == 0 {
            let dir = out.join(format!("checkpoint_stage{}_step{}", record.stage, record.step));
            save_checkpoint(model, &dir)?;
        }
        Ok(())
    })?;

    let checkpoint_dir = out.join("checkpoint");
    save_checkpoint(&run.model, &checkpoint_dir)?;
    let report = evaluate(&run.model, &run.test, &config.data.classes, config.seed, "test")?;
    report.check_identities()?;
    let report_path = out.join("report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&report_path, e))?;
    Ok(TrainArtifacts {
        report,
        checkpoint_dir,
        log_path,
        report_path,
    })
}

/// Loads a checkpoint, verifies it matches the config's encoder, and
/// evaluates it on a regenerated split.
pub fn run_eval(config: &ExperimentConfig, checkpoint: &Path, split: &str) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    check_compatible(&model.config, &config.encoder)?;
    if model.classes != config.data.classes.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} classes, config defines {}",
            model.classes,
            config.data.classes.len()
        )));
    }
    let ds = build_dataset(config)?;
    let samples = ds.split(split)?;
    let report = evaluate(&model, samples, &config.data.classes, config.seed, split)?;
    report.check_identities()?;
    Ok(report)
}

fn check_compatible(checkpoint: &EncoderConfig, config: &EncoderConfig) -> Result<()> {
    if checkpoint != config {
        return Err(Error::Incompatible(format!(
            "checkpoint encoder config differs from experiment config:\n  checkpoint: {}\n  config:     {}",
            serde_json::to_string(checkpoint).expect("serializes"),
            serde_json::to_string(config).expect("serializes"),
        )));
    }
    Ok(())
}

/// Generates validation and test triplet sets, sweeps the similarity
/// threshold on validation, and reports test accuracy at the best threshold.
pub fn run_vsm_eval(config: &ExperimentConfig, model: &Model) -> Result<VsmReport> {
    if config.vsm.triplets == 0 || config.vsm.val_triplets == 0 {
        return Err(Error::Data("triplet counts must be >= 1".into()));
    }
    let val = gen_vsm_dataset(
        &config.data,
        config.vsm.val_triplets,
        config.vsm.positive_ratio,
        SeededRng::derive_seed(config.seed, "vsm-val"),
    )?;
    let test = gen_vsm_dataset(
        &config.data,
        config.vsm.triplets,
        config.vsm.positive_ratio,
        SeededRng::derive_seed(config.seed, "vsm-test"),
    )?;
    let val_sims = triplet_similarities(model, &val)?;
    let grid = config.vsm.tau_grid();
    let (tau, sweep) = sweep_tau(&val_sims, &grid);
    let test_sims = triplet_similarities(model, &test)?;
    let (accuracy, positive_accuracy, negative_accuracy) = vsm_accuracy_at(&test_sims, tau);
    let positives = test_sims
        .iter()
        .filter(|(_, _, a)| *a != sta_core::synthvideo::VsmAnswer::None)
        .count();
    Ok(VsmReport {
        tau,
        accuracy,
        positive_accuracy,
        negative_accuracy,
        total: test_sims.len(),
        positives,
        sweep,
        seed: config.seed,
    })
}

pub fn run_vsm_eval_checkpoint(config: &ExperimentConfig, checkpoint: &Path) -> Result<VsmReport> {
    let model = load_checkpoint(checkpoint)?;
    check_compatible(&model.config, &config.encoder)?;
    run_vsm_eval(config, &model)
}

// ── ablation grid ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub temporal_order: TemporalOrder,
    pub head_scale: f64,
    pub placement: Placement,
    pub seed_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Accuracy reported for the corresponding configuration at production
    /// scale, shown for orientation; never asserted against toy runs.
    pub reference_accuracy: Option<f64>,
}

fn reference_accuracy(order: TemporalOrder, scale: f64, placement: &Placement) -> Option<f64> {
    if *placement != Placement::All {
        return None;
    }
    match (order, scale) {
        (TemporalOrder::SpatialFirst, s) if s == 1.0 => Some(58.34),
        (TemporalOrder::SpatialFirst, s) if s == 0.5 => Some(71.18),
        (TemporalOrder::SpatialFirst, s) if s == 0.25 => Some(76.04),
        (TemporalOrder::TemporalFirst, s) if s == 0.25 => Some(73.20),
        _ => None,
    }
}

/// Trains and evaluates every grid cell over a shared seed set. Cells run
/// the same two-stage pipeline as `run_train` (in memory) and share the
/// per-seed data/init streams so rows are comparable.
pub fn run_ablation(config: &ExperimentConfig, out: &Path) -> Result<Vec<AblationCell>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds: Vec<u64> = (0..config.ablation.n_seeds)
        .map(|i| SeededRng::derive_seed(config.seed, &format!("ablation-seed-{i}")))
        .collect();

    let mut cells = Vec::new();
    for order in &config.ablation.temporal_orders {
        for &scale in &config.ablation.head_scales {
            for placement in &config.ablation.placements {
                let mut accs = Vec::with_capacity(seeds.len());
                for &seed in &seeds {
                    let mut cell_config = config.clone();
                    cell_config.seed = seed;
                    cell_config.encoder.temporal_order = *order;
                    cell_config.encoder.head_scale = scale;
                    cell_config.encoder.sta_placement = placement.clone();
                    cell_config.validate()?;
                    let run = train_from_config(&cell_config, |_, _| Ok(()))?;
                    let report = evaluate(
                        &run.model,
                        &run.test,
                        &cell_config.data.classes,
                        seed,
                        "test",
                    )?;
                    accs.push(report.accuracy);
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                let std = if accs.len() > 1 {
                    (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                        / (accs.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                cells.push(AblationCell {
                    temporal_order: *order,
                    head_scale: scale,
                    placement: placement.clone(),
                    seed_accuracies: accs,
                    mean_accuracy: mean,
                    std_accuracy: std,
                    reference_accuracy: reference_accuracy(*order, scale, placement),
                });
            }
        }
    }

    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, ablation_csv(&cells, &seeds)).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = out.join("ablation.txt");
    fs::write(&txt_path, ablation_table(&cells)).map_err(|e| Error::io(&txt_path, e))?;
    Ok(cells)
}

fn placement_name(p: &Placement) -> String {
    match p {
        Placement::All => "all".into(),
        Placement::FirstHalf => "first_half".into(),
        Placement::UniformHalf => "uniform_half".into(),
        Placement::None => "none".into(),
        Placement::Indices(v) => format!(
            "indices:{}",
            v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
        ),
    }
}

fn order_name(o: TemporalOrder) -> &'static str {
    match o {
        TemporalOrder::SpatialFirst => "spatial_first",
        TemporalOrder::TemporalFirst => "temporal_first",
    }
}

pub fn ablation_csv(cells: &[AblationCell], seeds: &[u64]) -> String {
    let mut out = String::from("temporal_order,head_scale,placement");
    for (i, seed) in seeds.iter().enumerate() {
        out.push_str(&format!(",acc_seed{i}_{seed}"));
    }
    out.push_str(",mean_acc,std_acc,reference_acc_full_scale\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{}",
            order_name(cell.temporal_order),
            cell.head_scale,
            placement_name(&cell.placement)
        ));
        for acc in &cell.seed_accuracies {
            out.push_str(&format!(",{acc:.6}"));
        }
        out.push_str(&format!(",{:.6},{:.6}", cell.mean_accuracy, cell.std_accuracy));
        match cell.reference_accuracy {
            Some(r) => out.push_str(&format!(",{r:.2}\n")),
            None => out.push_str(",\n"),
        }
    }
    out
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>10} {:>14} {:>18} {:>10}\n",
        "Attention Order", "Head Scale", "Placement", "Acc (mean±std)", "Ref Acc"
    ));
    for cell in cells {
        let acc = format!(
            "{:.4}±{:.4}",
            cell.mean_accuracy, cell.std_accuracy
        );
        let reference = cell
            .reference_accuracy
            .map(|r| format!("{r:.2}"))
            .unwrap_or_else(|| "--".into());
        out.push_str(&format!(
            "{:<16} {:>10} {:>14} {:>18} {:>10}\n",
            order_name(cell.temporal_order),
            cell.head_scale,
            placement_name(&cell.placement),
            acc,
            reference
        ));
    }
    out
}

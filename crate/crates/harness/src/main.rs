//! `sta` — train, evaluate and probe the temporal-attention video encoder.
//!
//! Exit codes: 0 success, 1 invalid input (flags, config, data), 2 runtime
//! failure.

use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sta_core::checkpoint::load_checkpoint;
use sta_core::encoder::Model;
use sta_core::error::{Error, Result};
use sta_core::gradcheck::{finite_difference_check, GradCheckOptions};
use sta_core::heatmap::export_attention_maps;
use sta_core::rng::SeededRng;
use sta_core::synthvideo::{gen_vsm_dataset, save_dataset, save_vsm_dataset};
use sta_core::tensor::Tensor;

use sta_harness::config::ExperimentConfig;
use sta_harness::runner::{
    build_dataset, run_ablation, run_eval, run_train, run_vsm_eval_checkpoint, ablation_table,
};

#[derive(Parser)]
#[command(name = "sta", version, about = "Temporal-attention video encoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Machine-readable JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the classification dataset and write clips plus manifest.
    GenData(Common),
    /// Generate the similarity-matching triplet dataset.
    GenVsm(Common),
    /// Two-stage training with logs, checkpoints and a final test report.
    Train(Common),
    /// Evaluate a checkpoint on a regenerated split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Similarity matching with a threshold sweep on the validation triplets.
    EvalVsm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train/evaluate every cell of the configured ablation grid.
    Ablate(Common),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(Common),
    /// Export spatial and temporal attention maps for one block.
    AttnExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Clip tensor file; defaults to the first test-split clip.
        #[arg(long)]
        clip: Option<PathBuf>,
    },
    /// Exact parameter counts per component and the temporal/spatial ratio.
    ParamCount(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let config = load_config(&common)?;
            let ds = build_dataset(&config)?;
            save_dataset(&ds, &common.out)?;
            if common.json {
                print_json(&serde_json::json!({
                    "out": common.out,
                    "train": ds.train.len(),
                    "val": ds.val.len(),
                    "test": ds.test.len(),
                }));
            } else {
                println!(
                    "wrote {} train / {} val / {} test clips to {}",
                    ds.train.len(),
                    ds.val.len(),
                    ds.test.len(),
                    common.out.display()
                );
            }
            Ok(())
        }
        Command::GenVsm(common) => {
            let config = load_config(&common)?;
            let seed = SeededRng::derive_seed(config.seed, "vsm-test");
            let triplets =
                gen_vsm_dataset(&config.data, config.vsm.triplets, config.vsm.positive_ratio, seed)?;
            save_vsm_dataset(&triplets, &config.data, seed, config.vsm.positive_ratio, &common.out)?;
            if common.json {
                print_json(&serde_json::json!({
                    "out": common.out,
                    "triplets": triplets.len(),
                    "positive_ratio": config.vsm.positive_ratio,
                }));
            } else {
                println!("wrote {} triplets to {}", triplets.len(), common.out.display());
            }
            Ok(())
        }
        Command::Train(common) => {
            let config = load_config(&common)?;
            let artifacts = run_train(&config, &common.out)?;
            if common.json {
                print_json(&artifacts.report);
            } else {
                println!(
                    "test accuracy {:.4} (mirror error rate {:.4})",
                    artifacts.report.accuracy, artifacts.report.mirror_error_rate
                );
                println!("checkpoint: {}", artifacts.checkpoint_dir.display());
                println!("log:        {}", artifacts.log_path.display());
                println!("report:     {}", artifacts.report_path.display());
            }
            Ok(())
        }
        Command::Eval { common, checkpoint, split } => {
            let config = load_config(&common)?;
            let report = run_eval(&config, &checkpoint, &split)?;
            write_report(&common.out, "eval_report.json", &report)?;
            if common.json {
                print_json(&report);
            } else {
                println!("{split} accuracy {:.4} over {} samples", report.accuracy, report.total);
                for row in &report.per_class {
                    println!(
                        "  {:<22} support {:>5}  precision {:.4}  recall {:.4}",
                        row.class, row.support, row.precision, row.recall
                    );
                }
                println!("mirror error rate {:.4}", report.mirror_error_rate);
            }
            Ok(())
        }
        Command::EvalVsm { common, checkpoint } => {
            let config = load_config(&common)?;
            let report = run_vsm_eval_checkpoint(&config, &checkpoint)?;
            write_report(&common.out, "vsm_report.json", &report)?;
            if common.json {
                print_json(&report);
            } else {
                println!(
                    "vsm accuracy {:.4} at tau {:.3} over {} triplets ({} positive)",
                    report.accuracy, report.tau, report.total, report.positives
                );
                println!(
                    "  positives {:.4}  negatives {:.4}",
                    report.positive_accuracy, report.negative_accuracy
                );
                println!("  sweep grid: {} points on validation", report.sweep.len());
            }
            Ok(())
        }
        Command::Ablate(common) => {
            let config = load_config(&common)?;
            let cells = run_ablation(&config, &common.out)?;
            if common.json {
                print_json(&cells);
            } else {
                print!("{}", ablation_table(&cells));
                println!("csv: {}", common.out.join("ablation.csv").display());
            }
            Ok(())
        }
        Command::Gradcheck(common) => {
            let config = load_config(&common)?;
            let mut model = Model::new(
                config.encoder.clone(),
                config.data.classes.len(),
                SeededRng::derive_seed(config.seed, "model"),
            )?;
            let mut rng = SeededRng::derive(config.seed, "gradcheck-clip");
            let clip = Tensor::from_fn(
                &[
                    config.encoder.frames,
                    config.encoder.height,
                    config.encoder.width,
                    config.encoder.channels,
                ],
                |_| rng.uniform(0.0, 1.0),
            );
            let opts = GradCheckOptions {
                samples_per_group: config.gradcheck.samples_per_group,
                step: config.gradcheck.step,
                tolerance: config.gradcheck.tolerance,
                seed: config.seed,
            };
            let report = finite_difference_check(&mut model, &clip, &opts)?;
            if common.json {
                print_json(&report);
            } else {
                println!(
                    "max rel err {:.3e} over {} parameter groups (tolerance {:.1e})",
                    report.max_rel_err,
                    report.groups.len(),
                    report.tolerance
                );
                for failure in report.failures() {
                    println!(
                        "  FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e}",
                        failure.path, failure.worst_coord, failure.analytic, failure.numeric
                    );
                }
            }
            if report.passed {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: max rel err {:.3e} > {:.1e}",
                    report.max_rel_err, report.tolerance
                )))
            }
        }
        Command::AttnExport { common, checkpoint, block, clip } => {
            let config = load_config(&common)?;
            let model = match &checkpoint {
                Some(dir) => load_checkpoint(dir)?,
                None => Model::new(
                    config.encoder.clone(),
                    config.data.classes.len(),
                    SeededRng::derive_seed(config.seed, "model"),
                )?,
            };
            let clip = match &clip {
                Some(path) => Tensor::load(path)?,
                None => {
                    let ds = build_dataset(&config)?;
                    ds.test
                        .first()
                        .ok_or_else(|| Error::Data("empty test split".into()))?
                        .clip
                        .clone()
                }
            };
            let files = export_attention_maps(&model, &clip, block, &common.out)?;
            if common.json {
                print_json(&files);
            } else {
                println!("wrote {} attention-map files to {}", files.len(), common.out.display());
            }
            Ok(())
        }
        Command::ParamCount(common) => {
            let config = load_config(&common)?;
            let model = Model::new(
                config.encoder.clone(),
                config.data.classes.len(),
                SeededRng::derive_seed(config.seed, "model"),
            )?;
            let counts = model.count_parameters();
            if common.json {
                let mut value = serde_json::to_value(&counts).expect("serializes");
                value["temporal_spatial_ratio"] =
                    serde_json::json!(counts.temporal_spatial_ratio());
                print_json(&value);
            } else {
                println!("embed                {:>10}", counts.embed);
                println!("spatial attention    {:>10}", counts.spatial_attention);
                println!("temporal attention   {:>10}", counts.temporal_attention);
                println!("mlp                  {:>10}", counts.mlp);
                println!("layer norm           {:>10}", counts.layer_norm);
                println!("projector            {:>10}", counts.projector);
                println!("head                 {:>10}", counts.head);
                if counts.lora > 0 {
                    println!("adapters             {:>10}", counts.lora);
                }
                println!("total                {:>10}", counts.total());
                println!(
                    "temporal/spatial attention ratio per block: {}",
                    counts.temporal_spatial_ratio()
                );
            }
            Ok(())
        }
    }
}

fn write_report<T: serde::Serialize>(out: &Path, name: &str, report: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(name);
    std::fs::write(
        &path,
        serde_json::to_string_pretty(report).expect("serializes"),
    )
    .map_err(|e| Error::io(&path, e))
}

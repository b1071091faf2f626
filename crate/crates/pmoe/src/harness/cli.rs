//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error (bad arguments or config), 2 data
//! or format error, 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{parse_experiment_config, ExperimentConfig};
use super::data::{
    generate_synthetic, ComplementaryParams, GeneratorKind, SyntheticTaskSpec,
};
use super::idx::{load_idx_images, save_idx};
use super::train::{evaluate, train};
use crate::dispatch::DispatchTrace;
use crate::model::PMoEModel;
use crate::numerics::{grad_check, Rng, Tensor};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pmoe",
    about = "Mixture-of-experts prompt tuning on frozen synthetic transformers",
    disable_help_flag = false
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as IDX image/label pairs.
    GenData {
        /// Experiment config file (backbone dims, seeds).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for {train,test}-{images,labels}.idx.
        #[arg(long)]
        out_dir: PathBuf,
        /// Generator kind: plain or complementary.
        #[arg(long, default_value = "plain")]
        kind: String,
        /// Dataset seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        train_per_class: usize,
        #[arg(long, default_value_t = 64)]
        test_per_class: usize,
    },
    /// Train a model from a config file and IDX data.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding {train,test}-{images,labels}.idx.
        #[arg(long)]
        data_dir: PathBuf,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Where to write the metrics CSV.
        #[arg(long)]
        metrics_out: PathBuf,
    },
    /// Accuracy of a checkpoint on an IDX split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Full-model finite-difference gradient check.
    GradCheck {
        /// Experiment config; a built-in toy configuration when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Run traced forwards and export the dispatch trace CSV.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trace at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) | Error::Training { .. } => 3,
        _ => 2,
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    parse_experiment_config(&text)
}

fn build_model(config: &ExperimentConfig) -> Result<PMoEModel> {
    let rng = Rng::new(config.train.seed);
    match &config.expert_seeds {
        Some(seeds) => PMoEModel::with_expert_seeds(&config.model, seeds, &rng),
        None => PMoEModel::new(&config.model, &rng),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out_dir,
            kind,
            seed,
            train_per_class,
            test_per_class,
        } => {
            let cfg = read_config(&config)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let kind = match kind.as_str() {
                "plain" => GeneratorKind::Plain,
                "complementary" => {
                    let seeds = cfg.expert_seeds.clone().ok_or_else(|| {
                        Error::Config(
                            "complementary data needs expert_seeds in the config".into(),
                        )
                    })?;
                    if seeds.len() != 2 {
                        return Err(Error::Config(
                            "complementary data needs exactly two expert seeds".into(),
                        ));
                    }
                    GeneratorKind::Complementary(ComplementaryParams {
                        expert_a_seed: seeds[0],
                        expert_b_seed: seeds[1],
                        backbone: cfg.model.backbone.clone(),
                    })
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown generator kind {other:?} (plain or complementary)"
                    )))
                }
            };
            let spec = SyntheticTaskSpec {
                seed,
                num_classes: cfg.model.num_classes,
                train_per_class,
                test_per_class,
                image_h: cfg.model.backbone.image_h,
                image_w: cfg.model.backbone.image_w,
                channels: cfg.model.backbone.channels,
                kind,
            };
            let ds = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            save_idx(
                &ds.train,
                &out_dir.join("train-images.idx"),
                &out_dir.join("train-labels.idx"),
            )?;
            save_idx(
                &ds.test,
                &out_dir.join("test-images.idx"),
                &out_dir.join("test-labels.idx"),
            )?;
            println!(
                "wrote {} train and {} test samples to {}",
                ds.train.len(),
                ds.test.len(),
                out_dir.display()
            );
            if let Some(cert) = ds.certificate {
                println!(
                    "certificate: union probe {:.3}, single probes {:.3}/{:.3} ({} attempt(s))",
                    cert.union_accuracy,
                    cert.expert_a_accuracy,
                    cert.expert_b_accuracy,
                    cert.attempts
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            data_dir,
            checkpoint_out,
            metrics_out,
        } => {
            let cfg = read_config(&config)?;
            let train_set = load_idx_images(
                &data_dir.join("train-images.idx"),
                &data_dir.join("train-labels.idx"),
            )?;
            let eval_set = load_idx_images(
                &data_dir.join("test-images.idx"),
                &data_dir.join("test-labels.idx"),
            )?;
            let mut model = build_model(&cfg)?;
            let report = train(&mut model, &train_set, &eval_set, &cfg.train)?;
            model.save(&checkpoint_out)?;
            std::fs::write(&metrics_out, report.to_csv())?;
            let last = report.rows.last().expect("at least the epoch-0 row");
            println!(
                "trained {} epochs: train_loss {:.4}, train_acc {:.4}, eval_acc {:.4}",
                last.epoch, last.train_loss, last.train_acc, last.eval_acc
            );
            println!("checkpoint: {}", checkpoint_out.display());
            println!("metrics: {}", metrics_out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            images,
            labels,
        } => {
            let model = PMoEModel::load(&checkpoint)?;
            let ds = load_idx_images(&images, &labels)?;
            let (loss, acc) = evaluate(&model, &ds)?;
            println!("samples {}, loss {:.4}, accuracy {:.4}", ds.len(), loss, acc);
            Ok(())
        }
        Command::GradCheck { config, tol, step } => {
            let (model, image) = match config {
                Some(path) => {
                    let cfg = read_config(&path)?;
                    let model = build_model(&cfg)?;
                    let image = random_image(&cfg.model.backbone, cfg.train.seed ^ 0x1234);
                    (model, image)
                }
                None => {
                    let cfg = toy_experiment();
                    let model = build_model(&cfg)?;
                    let image = random_image(&cfg.model.backbone, 0x1234);
                    (model, image)
                }
            };
            let params: Vec<Tensor> = model.trainable_parameters().into_iter().cloned().collect();
            let report = grad_check(
                |g, vars| {
                    let mvars = model.bind_with_params(g, vars);
                    model.build_loss(g, &mvars, &image, 0)
                },
                &params,
                step,
                tol,
            )?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!(
                    "gradient check failed: max relative error {:.3e} >= tol {:.1e}",
                    report.worst_rel_err, report.tol
                )))
            }
        }
        Command::Trace {
            checkpoint,
            images,
            labels,
            out,
            limit,
        } => {
            let mut model = PMoEModel::load(&checkpoint)?;
            model.trace_enabled = true;
            let ds = load_idx_images(&images, &labels)?;
            let n = limit.unwrap_or(ds.len()).min(ds.len());
            let mut all = DispatchTrace::new();
            for image in ds.images.iter().take(n) {
                let (_, trace) = model.forward(image)?;
                if let Some(t) = trace {
                    all.records.extend(t.records);
                }
            }
            std::fs::write(&out, all.to_csv())?;
            println!("traced {} forwards, {} records -> {}", n, all.len(), out.display());
            for (layer, counts) in all.argmax_histogram(model.config.num_experts) {
                println!("layer {layer}: argmax counts {counts:?}");
            }
            Ok(())
        }
    }
}

fn random_image(backbone: &crate::backbone::BackboneConfig, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = backbone.image_h * backbone.image_w * backbone.channels;
    Tensor::from_vec(
        (0..n).map(|_| rng.uniform01()).collect(),
        &[backbone.image_h, backbone.image_w, backbone.channels],
    )
    .expect("static shape")
}

/// Built-in toy configuration for `grad-check` without a config file.
fn toy_experiment() -> ExperimentConfig {
    let text = "image_h = 32\nimage_w = 32\npatch_size = 8\nembed_dim = 32\nnum_layers = 4\nnum_heads = 4\nmlp_ratio = 2.0\nnum_experts = 2\nprompts_per_expert = 4\nnum_classes = 4\nseed = 7\n";
    parse_experiment_config(text).expect("builtin toy config parses")
}

//! Command-line driver: synthetic data generation, training, evaluation,
//! ablation sweeps, whole-slide inference, benchmarking, and verification
//! checks.

mod commands;
mod common;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "polardet", version, about = "Polar-attention glandular-cell detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Master seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tile dataset with a manifest.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test_gc: Option<usize>,
        #[arg(long)]
        test_nc: Option<usize>,
        #[arg(long)]
        test_fp: Option<usize>,
        /// Object density / occlusion level in [0, 1].
        #[arg(long)]
        difficulty: Option<f64>,
    },
    /// Generate a tiled mosaic slide with planted polar objects.
    GenMosaic {
        #[command(flatten)]
        common: CommonArgs,
        /// Slide side length in pixels (multiple of 1024).
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        planted: Option<usize>,
    },
    /// Train the detector on a dataset manifest.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        decay: Option<f64>,
        /// Comma-separated decay epochs, e.g. 5,10,16.
        #[arg(long)]
        milestones: Option<String>,
        #[arg(long)]
        stage: Option<u32>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Train without the polar module.
        #[arg(long)]
        no_polar: bool,
        /// Border handling of the polar module: zero|replicate.
        #[arg(long)]
        border: Option<String>,
        #[arg(long)]
        polar_weight: Option<f64>,
    },
    /// Evaluate AP50/60/70 and per-class AP; writes the PR curve.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint (manifest mode).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate an existing detection dump instead of running a model.
        #[arg(long)]
        preds: Option<PathBuf>,
        /// Annotation manifest for --preds mode.
        #[arg(long)]
        ann: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated sources, e.g. gc,fp.
        #[arg(long)]
        sources: Option<String>,
    },
    /// Re-fuse stored scores over an alpha grid and report AP50 per alpha.
    SweepAlpha {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated fusion weights.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        sources: Option<String>,
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Train and evaluate one model per feature scale.
    SweepScale {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated stages, e.g. 2,3,4,5.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        sources: Option<String>,
    },
    /// Run the detector over a tiled slide directory.
    InferWsi {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Per-tile latency of the baseline vs polar variants (32-bit path).
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        /// Cap on the number of slide tiles used.
        #[arg(long)]
        tiles: Option<usize>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cross-check kernels and metrics against brute-force oracles.
    OracleCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn resolve(
    common: &CommonArgs,
    subcommand: &str,
    defaults: &[(&str, String)],
) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::new(defaults);
    cfg.set("seed", 0u64);
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    cfg.set_opt("seed", common.seed);
    let out_dir = common
        .out_dir
        .clone()
        .or_else(|| cfg.opt_str("out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(subcommand));
    cfg.set("out_dir", out_dir.display());
    Ok((cfg, out_dir))
}

fn model_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("stage", "5".into()),
        ("width", "32".into()),
        ("alpha", "0.5".into()),
        ("polar", "true".into()),
        ("border", "zero".into()),
        ("nms_iou", "0.45".into()),
        ("conf_floor", "0.05".into()),
        ("max_detections", "300".into()),
    ]
}

fn train_defaults() -> Vec<(&'static str, String)> {
    let mut d = model_defaults();
    d.extend([
        ("epochs", "20".to_string()),
        ("batch_size", "8".to_string()),
        ("lr", "5e-3".to_string()),
        ("decay", "0.1".to_string()),
        ("milestones", "5,10,16".to_string()),
        ("polar_weight", "1.0".to_string()),
    ]);
    d
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            common,
            train,
            val,
            test_gc,
            test_nc,
            test_fp,
            difficulty,
        } => {
            let defaults = [
                ("train", "400".to_string()),
                ("val", "60".to_string()),
                ("test_gc", "60".to_string()),
                ("test_nc", "80".to_string()),
                ("test_fp", "120".to_string()),
                ("difficulty", "0.5".to_string()),
            ];
            let (mut cfg, out_dir) = resolve(&common, "gen", &defaults)?;
            cfg.set_opt("train", train);
            cfg.set_opt("val", val);
            cfg.set_opt("test_gc", test_gc);
            cfg.set_opt("test_nc", test_nc);
            cfg.set_opt("test_fp", test_fp);
            cfg.set_opt("difficulty", difficulty);
            commands::cmd_gen(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::GenMosaic { common, side, planted } => {
            let defaults = [("side", "8192".to_string()), ("planted", "10".to_string())];
            let (mut cfg, out_dir) = resolve(&common, "gen-mosaic", &defaults)?;
            cfg.set_opt("side", side);
            cfg.set_opt("planted", planted);
            commands::cmd_gen_mosaic(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::Train {
            common,
            manifest,
            epochs,
            batch_size,
            lr,
            decay,
            milestones,
            stage,
            width,
            alpha,
            no_polar,
            border,
            polar_weight,
        } => {
            let (mut cfg, out_dir) = resolve(&common, "train", &train_defaults())?;
            cfg.set("manifest", manifest.display());
            cfg.set_opt("epochs", epochs);
            cfg.set_opt("batch_size", batch_size);
            cfg.set_opt("lr", lr);
            cfg.set_opt("decay", decay);
            cfg.set_opt("milestones", milestones);
            cfg.set_opt("stage", stage);
            cfg.set_opt("width", width);
            cfg.set_opt("alpha", alpha);
            if no_polar {
                cfg.set("polar", "false");
            }
            cfg.set_opt("border", border);
            cfg.set_opt("polar_weight", polar_weight);
            commands::cmd_train(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::Eval {
            common,
            ckpt,
            manifest,
            preds,
            ann,
            iou,
            split,
            sources,
        } => {
            let mut defaults = model_defaults();
            defaults.extend([
                ("iou", "0.5".to_string()),
                ("split", "test".to_string()),
                ("sources", "gc,nc,fp".to_string()),
            ]);
            let (mut cfg, out_dir) = resolve(&common, "eval", &defaults)?;
            cfg.set_opt("ckpt", ckpt.map(|p| p.display().to_string()));
            cfg.set_opt("manifest", manifest.map(|p| p.display().to_string()));
            cfg.set_opt("preds", preds.map(|p| p.display().to_string()));
            cfg.set_opt("ann", ann.map(|p| p.display().to_string()));
            cfg.set_opt("iou", iou);
            cfg.set_opt("split", split);
            cfg.set_opt("sources", sources);
            commands::cmd_eval(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::SweepAlpha {
            common,
            ckpt,
            manifest,
            alphas,
            split,
            sources,
            iou,
        } => {
            let defaults = [
                ("alphas", "0,0.25,0.5,0.75,1".to_string()),
                ("split", "test".to_string()),
                ("sources", "gc,fp".to_string()),
                ("iou", "0.5".to_string()),
            ];
            let (mut cfg, out_dir) = resolve(&common, "sweep-alpha", &defaults)?;
            cfg.set("ckpt", ckpt.display());
            cfg.set("manifest", manifest.display());
            cfg.set_opt("alphas", alphas);
            cfg.set_opt("split", split);
            cfg.set_opt("sources", sources);
            cfg.set_opt("iou", iou);
            commands::cmd_sweep_alpha(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::SweepScale {
            common,
            manifest,
            stages,
            epochs,
            sources,
        } => {
            let mut defaults = train_defaults();
            defaults.extend([
                ("stages", "2,3,4,5".to_string()),
                ("sources", "gc,fp".to_string()),
            ]);
            let (mut cfg, out_dir) = resolve(&common, "sweep-scale", &defaults)?;
            cfg.set("manifest", manifest.display());
            cfg.set_opt("stages", stages);
            cfg.set_opt("epochs", epochs);
            cfg.set_opt("sources", sources);
            commands::cmd_sweep_scale(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::InferWsi {
            common,
            ckpt,
            slide,
            top_n,
            workers,
            overlap,
        } => {
            let defaults = [
                ("top_n", "20".to_string()),
                ("workers", "8".to_string()),
                ("overlap", "0".to_string()),
            ];
            let (mut cfg, out_dir) = resolve(&common, "infer-wsi", &defaults)?;
            cfg.set("ckpt", ckpt.display());
            cfg.set("slide", slide.display());
            cfg.set_opt("top_n", top_n);
            cfg.set_opt("workers", workers);
            cfg.set_opt("overlap", overlap);
            commands::cmd_infer_wsi(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::Bench {
            common,
            ckpt,
            slide,
            repeats,
            tiles,
        } => {
            let defaults = [("repeats", "3".to_string()), ("tiles", "8".to_string())];
            let (mut cfg, out_dir) = resolve(&common, "bench", &defaults)?;
            cfg.set("ckpt", ckpt.display());
            cfg.set("slide", slide.display());
            cfg.set_opt("repeats", repeats);
            cfg.set_opt("tiles", tiles);
            commands::cmd_bench(&finish(&cfg, &out_dir)?, &out_dir)
        }
        Command::Gradcheck { common } => {
            let (cfg, out_dir) = resolve(&common, "gradcheck", &[])?;
            commands::cmd_gradcheck(&finish(&cfg, &out_dir)?)
        }
        Command::OracleCheck { common } => {
            let (cfg, out_dir) = resolve(&common, "oracle-check", &[])?;
            commands::cmd_oracle_check(&finish(&cfg, &out_dir)?)
        }
    }
}

/// Create the output directory and persist the resolved configuration.
fn finish(cfg: &RunConfig, out_dir: &std::path::Path) -> anyhow::Result<RunConfig> {
    crate::common::ensure_out_dir(out_dir)?;
    cfg.write(&out_dir.join("run-config.txt"))?;
    Ok(cfg.clone())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

//! radenc: pretrain a self-distilled ViT encoder on radiological images and
//! adapt it to classification, segmentation and captioning; plus evaluation,
//! embedding export and plotting utilities.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 data/integrity, 5 numeric.

mod config;
mod evalcmd;
mod plot;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radenc_core::error::Error;

#[derive(Parser)]
#[command(name = "radenc", version, about = "radiological encoder pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON or key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (or set RADENC_OUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value config overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Self-distillation pretraining of the encoder.
    Pretrain(#[command(flatten)] RunArgs),
    /// Classification adaptation (full / head_only / lora).
    TrainCls {
        #[command(flatten)]
        run: RunArgs,
        /// full | head_only | lora
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        lora_r: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f64>,
    },
    /// Frozen-encoder dense segmentation adaptation.
    TrainSeg(#[command(flatten)] RunArgs),
    /// Frozen-encoder captioning bridge training.
    TrainCap(#[command(flatten)] RunArgs),
    /// Score predictions against references; prints a JSON report.
    Eval {
        /// cls | seg | cap
        #[arg(long)]
        task: String,
        /// Predictions: CSV (cls), directory (seg) or JSONL (cap).
        #[arg(long)]
        pred: PathBuf,
        /// References: CSV (cls), directory (seg) or JSONL (cap).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 2)]
        n_classes: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export class-token embeddings as CSV for latent-space inspection.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "vit_tiny")]
        arch: String,
        #[arg(long, default_value_t = 56)]
        image_size: usize,
        #[arg(long)]
        encoder_layer_scale: Option<f64>,
        /// Manifest path or synth:<kind>:<n>[:<size>].
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a metrics CSV as a line chart, or overlay a mask on an image.
    Plot {
        #[arg(long, conflicts_with_all = ["image", "mask"])]
        csv: Option<PathBuf>,
        #[arg(long, requires = "mask")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Integrity(_) | Error::Io(_) => 4,
        Error::Numeric(_) | Error::Domain(_) | Error::Shape(_) | Error::Range(_) => 5,
    }
}

fn run(cli: Cli) -> radenc_core::Result<()> {
    match cli.cmd {
        Cmd::Pretrain(args) => {
            let (map, dir) = load_run_config(&args)?;
            let out = runs::run_pretrain(map, &dir, args.seed, args.out)?;
            println!("pretrain complete: {}", out.display());
        }
        Cmd::TrainCls {
            run: args,
            regime,
            lora_r,
            lora_alpha,
        } => {
            let (map, dir) = load_run_config(&args)?;
            let flags = runs::ClsFlags {
                regime,
                lora_r,
                lora_alpha,
            };
            let out = runs::run_train_cls(map, &dir, args.seed, args.out, flags)?;
            println!("train-cls complete: {}", out.display());
        }
        Cmd::TrainSeg(args) => {
            let (map, dir) = load_run_config(&args)?;
            let out = runs::run_train_seg(map, &dir, args.seed, args.out)?;
            println!("train-seg complete: {}", out.display());
        }
        Cmd::TrainCap(args) => {
            let (map, dir) = load_run_config(&args)?;
            let out = runs::run_train_cap(map, &dir, args.seed, args.out)?;
            println!("train-cap complete: {}", out.display());
        }
        Cmd::Eval {
            task,
            pred,
            truth,
            n_classes,
            out,
        } => {
            let report = match task.as_str() {
                "seg" => evalcmd::eval_seg(&pred, &truth, n_classes)?,
                "cls" => evalcmd::eval_cls(&pred, &truth, n_classes)?,
                "cap" => evalcmd::eval_cap(&pred, &truth)?,
                other => return Err(Error::config(format!("unknown eval task `{other}`"))),
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
        }
        Cmd::Embed {
            checkpoint,
            arch,
            image_size,
            encoder_layer_scale,
            data,
            split,
            out,
            seed,
        } => {
            runs::run_embed(
                &checkpoint,
                &arch,
                image_size,
                encoder_layer_scale,
                &data,
                &split,
                &out,
                seed,
            )?;
            println!("embeddings written: {}", out.display());
        }
        Cmd::Plot { csv, image, mask, out } => {
            match (csv, image, mask) {
                (Some(csv), None, None) => plot::plot_csv(&csv, &out)?,
                (None, Some(image), Some(mask)) => plot::overlay_mask(&image, &mask, &out)?,
                _ => {
                    return Err(Error::config(
                        "plot needs either --csv or --image with --mask",
                    ))
                }
            }
            println!("plot written: {}", out.display());
        }
    }
    Ok(())
}

fn load_run_config(
    args: &RunArgs,
) -> radenc_core::Result<(std::collections::BTreeMap<String, serde_json::Value>, PathBuf)> {
    let mut map = config::load_config_map(&args.config)?;
    config::apply_overrides(&mut map, &args.set)?;
    let dir = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((map, dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("radenc: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

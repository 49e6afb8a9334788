//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or runtime errors (message on
//! standard error), 2 when `verify` finds a failing group.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dct::spectrum_image;
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, load_rgb_cropped, save_png};
use crate::model::{infer, ModelConfig, Variant};
use crate::train::{
    evaluate, input_scores, load_dataset, load_pairs, train_loop, EpochLog, TrainOptions,
    TrainState, DEFAULT_BATCH, DEFAULT_LR, DEFAULT_WD, TRAIN_CROP,
};
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "deformer",
    version,
    about = "Low-light image enhancement with a DCT frequency branch"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `<data-root>/low` and `<data-root>/high`.
    Train(TrainArgs),
    /// Enhance one PNG.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Mean PSNR and SSIM over a paired dataset.
    Eval {
        #[arg(long)]
        data_root: PathBuf,
        /// Score this checkpoint's outputs.
        #[arg(
            long,
            required_unless_present = "pred_dir",
            conflicts_with = "pred_dir"
        )]
        ckpt: Option<PathBuf>,
        /// Score precomputed predictions, paired by stem with `<data-root>/high`.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Render the per-block log-magnitude luma spectrum.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in oracle and invariant suite.
    Verify,
    /// Train and score one ablation variant.
    Ablate {
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, default_value_t = 1000)]
    epochs: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_WD)]
    wd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TRAIN_CROP)]
    crop: usize,
    /// Checkpoint written after training (and every `--checkpoint-every` epochs).
    #[arg(long, default_value = "deformer.def")]
    out: PathBuf,
    /// CSV log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Model config as `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint instead of fresh weights.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig> {
    let Some(path) = path else {
        return Ok(ModelConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (config, rest) = ModelConfig::from_kv(&text)?;
    if let Some((k, _)) = rest.first() {
        return Err(Error::Config(format!(
            "{}: unknown key `{k}`",
            path.display()
        )));
    }
    Ok(config)
}

fn print_epoch(row: &EpochLog) {
    println!(
        "epoch {} loss {:.6} ({:.1}s)",
        row.epoch, row.loss, row.seconds
    );
}

fn train(args: &TrainArgs, variant: Option<Variant>) -> Result<TrainState> {
    let data = load_dataset(&args.data_root)?;
    let mut state = match &args.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let mut config = read_config(args.config.as_deref())?;
            config.seed = args.seed;
            if let Some(v) = variant {
                config.variant = v;
            }
            TrainState::new(config)?
        }
    };
    state.lr = args.lr;
    state.wd = args.wd;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        crop: args.crop,
        checkpoint_every: args.checkpoint_every,
        checkpoint_path: Some(args.out.clone()),
        log_path: Some(
            args.log
                .clone()
                .unwrap_or_else(|| args.out.with_extension("csv")),
        ),
    };
    for row in train_loop(&mut state, &data, &opts)? {
        print_epoch(&row);
    }
    save_checkpoint(&state, &args.out)?;
    Ok(state)
}

fn enhance(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let original = load_rgb(input)?;
    let (img, cropped) = load_rgb_cropped(input)?;
    if cropped {
        let (s, c) = (original.shape(), img.shape());
        eprintln!(
            "warning: {} is {}x{}; cropped to {}x{}",
            input.display(),
            s[1],
            s[0],
            c[1],
            c[0]
        );
    }
    let out = infer(&state.params, &state.config, &img)?.clamp01();
    save_png(output, &out)
}

fn eval(data_root: &Path, ckpt: Option<&Path>, pred_dir: Option<&Path>) -> Result<()> {
    let scores = match (ckpt, pred_dir) {
        (Some(ckpt), _) => {
            let state = load_checkpoint(ckpt)?;
            evaluate(&state.params, &state.config, &load_dataset(data_root)?)?
        }
        (None, Some(pred)) => input_scores(&load_pairs(pred, &data_root.join("high"))?)?,
        (None, None) => return Err(Error::Usage("eval needs --ckpt or --pred-dir".into())),
    };
    println!("{:.4} {:.6}", scores.psnr, scores.ssim);
    Ok(())
}

fn run_verify() -> i32 {
    let results = verify::run_all(|r| {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("ALL PASS");
        0
    } else {
        println!("{failed} group(s) FAILED");
        2
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => {
            train(&args, None)?;
        }
        Command::Enhance {
            ckpt,
            input,
            output,
        } => enhance(&ckpt, &input, &output)?,
        Command::Eval {
            data_root,
            ckpt,
            pred_dir,
        } => eval(&data_root, ckpt.as_deref(), pred_dir.as_deref())?,
        Command::Spectrum { input, output } => {
            let (img, _) = load_rgb_cropped(&input)?;
            save_png(&output, &spectrum_image(&img)?)?;
        }
        Command::Verify => return Ok(run_verify()),
        Command::Ablate {
            variant,
            train: args,
        } => {
            let variant = Variant::parse(&variant)?;
            let state = train(&args, Some(variant))?;
            let data = load_dataset(&args.data_root)?;
            let before = input_scores(&data)?;
            let after = evaluate(&state.params, &state.config, &data)?;
            println!(
                "{} input {:.4} {:.6} enhanced {:.4} {:.6}",
                variant.label(),
                before.psnr,
                before.ssim,
                after.psnr,
                after.ssim
            );
        }
    }
    Ok(0)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

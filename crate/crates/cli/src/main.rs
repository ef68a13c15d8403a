use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pyrpix_cli::commands::{bench, eval, sample, train, verify};
use pyrpix_cli::exit_code_for;
use pyrpix_core::data::Split;

#[derive(Parser)]
#[command(
    name = "pyrpix",
    about = "Multiscale autoregressive image density estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample images (and traces) from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Zero-temperature limit: argmax decoding.
        #[arg(long, default_value_t = false)]
        argmax: bool,
        /// Upscale this PGM/PPM instead of sampling from scratch.
        #[arg(long)]
        from_lowres: Option<PathBuf>,
        /// Also emit every intermediate pyramid image.
        #[arg(long, default_value_t = false)]
        pyramid: bool,
        /// Class id for class-conditional checkpoints.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Mean NLL (nats and bits per sub-pixel) over a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: String,
        /// Override the checkpoint's data section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the verification oracles; exit 1 on any violation.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Verify a trained checkpoint instead of a fresh random model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seed for the fresh random model and the probes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one mask bit first (self-test of the verifier).
        #[arg(long, default_value_t = false)]
        inject_mask_fault: bool,
    },
    /// Sampling speed: multiscale vs flat at matched resolution and width.
    Bench {
        #[arg(long)]
        multiscale: PathBuf,
        #[arg(long)]
        flat: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> pyrpix_core::Result<i32> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
        } => {
            let outcome = train::cmd_train(&config, &out, resume.as_deref())?;
            println!("checkpoint={}", outcome.checkpoint.display());
            if let Some(v) = outcome.last_val_nats {
                println!("val_nats_per_subpixel={v}");
            }
            Ok(0)
        }
        Command::Sample {
            checkpoint,
            out,
            count,
            seed,
            temperature,
            argmax,
            from_lowres,
            pyramid,
            class,
        } => {
            let written = sample::cmd_sample(&sample::SampleArgs {
                checkpoint,
                out_dir: out,
                count,
                seed,
                temperature,
                argmax,
                from_lowres,
                pyramid,
                class_id: class,
            })?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            split,
            config,
        } => {
            let split = Split::parse(&split)?;
            let report = eval::cmd_eval(&checkpoint, split, config.as_deref())?;
            print!("{report}");
            Ok(0)
        }
        Command::Verify {
            config,
            checkpoint,
            seed,
            inject_mask_fault,
        } => {
            let outcome =
                verify::cmd_verify(&config, checkpoint.as_deref(), seed, inject_mask_fault)?;
            print!("{}", outcome.table);
            Ok(if outcome.passed { 0 } else { 1 })
        }
        Command::Bench {
            multiscale,
            flat,
            reps,
            seed,
        } => {
            let outcome = bench::cmd_bench(&multiscale, &flat, reps, seed)?;
            print!("{}", outcome.table);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("PYRPIX_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}

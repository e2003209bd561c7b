use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sandwich_cli::commands::{self, CcvqOptions, SyntheticOptions};
use sandwich_cli::config;
use sandwich_core::video::LoopFilterTraining;

#[derive(Parser)]
#[command(name = "sandwich", version, about = "Train and evaluate sandwiched image and video codecs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parameter count and MACs per pixel of a U-Net, e.g. "[32];[32,32]".
    CountParams(CountArgs),
    /// MACs per pixel only.
    CountMacs(CountArgs),
    /// Train one model per lambda of a config into its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Config override, `key.path=value` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Actual-codec rate-distortion sweep of a finished run.
    RdSweep {
        #[arg(long)]
        run_dir: PathBuf,
        /// Explicit stepsizes; default is a sweep around each trained stepsize.
        #[arg(long, value_delimiter = ',')]
        stepsizes: Option<Vec<f64>>,
    },
    /// Codelength-constrained (or entropy-constrained) VQ design on CSV samples.
    Ccvq {
        #[arg(long)]
        samples: PathBuf,
        /// Comma-separated integer codelengths, one per cell.
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<u32>,
        #[arg(long)]
        lambda: f64,
        /// Last CSV column is a sample weight.
        #[arg(long)]
        weighted: bool,
        #[arg(long, default_value_t = 16)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ideal codelengths instead of the given ones (cell count from --lengths).
        #[arg(long)]
        ecvq: bool,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrated proxy and reference codec on one 8-bit PNG.
    ProxyRun {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        delta: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the four frozen video loop filters.
    #[command(alias = "pretrain-loop-filter")]
    PretrainLoopfilter {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        clips: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        clip_length: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a seeded synthetic dataset with a hashed manifest.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        clips: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        clip_length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct CountArgs {
    spec: String,
    #[arg(long, default_value_t = 3)]
    cin: usize,
    #[arg(long, default_value_t = 3)]
    cout: usize,
    /// Include a pointwise branch with these hidden widths.
    #[arg(long, value_delimiter = ',')]
    mlp: Option<Vec<usize>>,
}

fn write_or_print(out: Option<&PathBuf>, text: String) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    sandwich_cli::init_threads()?;
    match cli.cmd {
        Cmd::CountParams(a) => {
            let (params, macs) = commands::count(&a.spec, a.cin, a.cout, a.mlp)?;
            println!("{params} {macs}");
        }
        Cmd::CountMacs(a) => {
            let (_, macs) = commands::count(&a.spec, a.cin, a.cout, a.mlp)?;
            println!("{macs}");
        }
        Cmd::Train { config, overrides } => {
            let cfg = config::load(&config, &overrides)?;
            let models = commands::train_run(&cfg, |i, row| {
                eprintln!("lambda {} epoch {} loss {:.6} D {:.6} R {:.4} delta {:.3}", cfg.lambdas[i], row.epoch, row.loss, row.d, row.r, row.delta);
            })?;
            println!("{}", serde_json::to_string_pretty(&models)?);
        }
        Cmd::RdSweep { run_dir, stepsizes } => {
            let r = commands::rd_sweep_run(&run_dir, stepsizes.as_deref())?;
            for g in &r.gains {
                println!(
                    "lambda {}: {:.4} bpp {:.3} dB vs baseline {:.4} bpp {:.3} dB, gain {:+.3} dB",
                    g.sandwich.lambda, g.sandwich.rate, g.sandwich.psnr, g.baseline.rate, g.baseline.psnr, g.gain_db
                );
            }
            println!("wrote {}", run_dir.join("rd.json").display());
        }
        Cmd::Ccvq { samples, lengths, lambda, weighted, starts, seed, ecvq, max_iters, out } => {
            let csv = std::fs::read_to_string(&samples).with_context(|| format!("reading {}", samples.display()))?;
            let r = commands::run_ccvq(&csv, &CcvqOptions { lambda, lengths, weighted, starts, seed, ecvq, max_iters })?;
            for w in &r.report.warnings {
                eprintln!("warning: {w}");
            }
            write_or_print(out.as_ref(), serde_json::to_string_pretty(&r)? + "\n")?;
        }
        Cmd::ProxyRun { image, delta, out } => {
            let t = commands::proxy_run_file(&image, delta)?;
            write_or_print(out.as_ref(), serde_json::to_string_pretty(&t)? + "\n")?;
        }
        Cmd::PretrainLoopfilter { out, clips, size, clip_length, epochs, lr, seed } => {
            commands::pretrain_loopfilter(&out, clips, size, clip_length, &LoopFilterTraining { epochs, lr, seed })?;
            println!("wrote loop filters to {}", out.display());
        }
        Cmd::MakeSynthetic { out, images, clips, size, clip_length, seed } => {
            let opts = SyntheticOptions { images, clips, size, clip_length, seed, ..SyntheticOptions::default() };
            let m = commands::make_synthetic(&out, &opts)?;
            println!("wrote {} entries and {}", m.entries.len(), out.join("manifest.json").display());
        }
    }
    Ok(())
}

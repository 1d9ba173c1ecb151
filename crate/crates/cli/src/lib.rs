//! `weave` command line: data generation, two-stage training, guided
//! sampling, MP-LPIPS evaluation and the joint-vs-independent guidance
//! comparison.

pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use weave_core::data::CharacterSpec;
use weave_core::image::RgbImage;
use weave_core::model::{init_denoiser, SampleRequest};
use weave_core::SeededRng;

use config::RunConfig;
use experiment::Checkpoint;

#[derive(Debug, Parser)]
#[command(name = "weave", version, about = "Garment-conditioned diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write N generated garment/character pairs with masks and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the base denoiser, then the garment plug-in.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the step count of both stages.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw one image conditioned on a garment and caption tokens.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        garment: PathBuf,
        /// Comma-separated caption token ids.
        #[arg(long)]
        tokens: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// MP-LPIPS for every pair of a manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose denoiser provides the matching features; without
        /// it a freshly initialized denoiser (config seed) is used.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Joint vs independent guidance on an eval set; CSV rows plus a JSON
    /// report next to it.
    CompareCfg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = e.print();
            } else {
                eprint!("{}", e.render());
            }
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, n, seed, size } => {
            experiment::write_dataset(&out, n, seed, size)?;
            eprintln!("wrote {n} pairs to {}", out.display());
        }
        Command::Train { config, out, steps } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.train.base_steps = s;
                cfg.train.steps = s;
            }
            experiment::train_to_dir(&cfg, &out)?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Sample {
            config,
            ckpt,
            garment,
            tokens,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = Checkpoint::load(&ckpt, &cfg)?;
            let tokens = experiment::parse_tokens(&tokens)?;
            CharacterSpec::from_tokens(&tokens)?;
            let request = SampleRequest {
                garment: Some(RgbImage::load(&garment)?.to_tensor()),
                tokens,
                seed,
            };
            let img = experiment::sample_images(&cfg, &ckpt, cfg.mode, &[request])?.remove(0);
            img.save(&out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval {
            config,
            manifest,
            out,
            ckpt,
        } => {
            let cfg = RunConfig::load(&config)?;
            let denoiser = match ckpt {
                Some(dir) => Checkpoint::load(&dir, &cfg)?.denoiser,
                None => init_denoiser(&cfg.model, &mut SeededRng::new(cfg.seed).split(0))?,
            };
            let records = experiment::read_manifest(&manifest)?;
            let rows = experiment::eval_manifest(&cfg, &denoiser, &records)?;
            fs::write(&out, experiment::eval_csv(&rows))?;
        }
        Command::CompareCfg {
            config,
            ckpt,
            eval,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = Checkpoint::load(&ckpt, &cfg)?;
            let mut items = experiment::load_eval_dir(&eval)?;
            items.truncate(cfg.compare.n);
            let report = experiment::compare_cfg(&cfg, &ckpt, &items)?;
            fs::write(&out, report.to_csv())?;
            fs::write(out.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "mean MP-LPIPS joint {:.4} independent {:.4} over {} garments",
                report.mean_joint,
                report.mean_independent,
                items.len()
            );
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uie_dal::autodiff::GradCheckConfig;
use uie_dal::datastore::{write_scene_dir, Split};
use uie_dal::pipeline::{self, RunConfig};
use uie_dal::scenes::procedural_scenes;
use uie_dal::verification::gradient_suite;
use uie_dal::Error;

/// Underwater image synthesis and water-type-agnostic enhancement.
#[derive(Debug, Parser)]
#[command(name = "uie-dal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Degrade every scene under all six water types and write a dataset
    /// plus manifest.jsonl.
    Synth {
        /// Directory holding clear/<id>.png and depth/<id>.png (16-bit, mm).
        #[arg(long, value_name = "DIR")]
        scenes: PathBuf,
        /// Coefficient table: `<class_id> <label> <N_r> <N_g> <N_b>` per line.
        #[arg(long, value_name = "FILE")]
        coeffs: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Random draws of background light and depth per water type.
        #[arg(long, value_name = "N", default_value_t = 6)]
        draws: usize,
        #[arg(long, value_name = "S", default_value_t = 0)]
        seed: u64,
    },
    /// Warm up, then train E/G/D with threshold-gated epochs; writes
    /// model.bin, latest.bin, periodic checkpoints and epochs.csv.
    Train {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// JSON with optional `architecture`, `training` and `probe` sections.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Set the adversarial weight to 0 (plain encoder-decoder baseline).
        #[arg(long)]
        no_adversarial: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Per-class SSIM/PSNR of the reconstructions on one split.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Report CSV: class,n,ssim_mean,psnr_mean.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the degraded-input-vs-truth report here.
        #[arg(long, value_name = "FILE")]
        identity_out: Option<PathBuf>,
    },
    /// PCA coordinates, silhouette scores and probe accuracy of the latents.
    Probe {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Summary JSON; PCA coordinates go to <stem>_pca.csv beside it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Config whose `probe` section sets probe training.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Also report decoder SSIM with skip activations zeroed.
        #[arg(long)]
        zero_skips: bool,
    },
    /// Check every op's gradient, the composed model with all losses and a
    /// negative control against central differences.
    Gradcheck,
    /// Write procedural clear scenes with synthetic depth for `synth`.
    Scenes {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 200)]
        count: usize,
        #[arg(long, value_name = "S", default_value_t = 0)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, value_name = "PX", default_value_t = 32)]
        size: usize,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> uie_dal::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn run(cmd: Command) -> uie_dal::Result<ExitCode> {
    match cmd {
        Command::Synth {
            scenes,
            coeffs,
            out,
            draws,
            seed,
        } => {
            let entries = pipeline::synth(&scenes, &coeffs, &out, draws, seed)?;
            println!(
                "wrote {} degraded images and {}",
                entries.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Train {
            manifest,
            config,
            out,
            no_adversarial,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let t = pipeline::train(&manifest, &cfg, &out, no_adversarial, resume.as_deref())?;
            if let Some(w) = &t.state.warmup {
                println!(
                    "warmup: {} epochs, val_G {:.4}{}",
                    w.epochs,
                    w.val_g,
                    if w.guard_tripped { " (guard tripped)" } else { "" }
                );
            }
            println!(
                "trained {} epochs: val_G {:.4} val_D {:.4}; model at {}",
                t.state.epoch,
                t.state.val_g,
                t.state.val_d,
                out.join("model.bin").display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
            identity_out,
        } => {
            let r = pipeline::evaluate(&checkpoint, &manifest, split)?;
            pipeline::write_report_csv(&r.model, &out)?;
            if let Some(p) = identity_out {
                pipeline::write_report_csv(&r.identity, &p)?;
            }
            print!("{}", r.model);
        }
        Command::Probe {
            checkpoint,
            manifest,
            out,
            config,
            zero_skips,
        } => {
            let cfg = load_config(config.as_deref())?;
            let a = pipeline::probe(&checkpoint, &manifest, &cfg.probe, zero_skips)?;
            let csv = pipeline::write_analysis(&a, &out)?;
            let s = &a.summary;
            println!(
                "silhouette by type {:.4}, by content {:.4}, probe accuracy {:.4}; PCA at {}",
                s.silhouette_by_type,
                s.silhouette_by_content,
                s.probe_accuracy,
                csv.display()
            );
        }
        Command::Gradcheck => {
            let cases = gradient_suite(&GradCheckConfig::default())?;
            let mut ok = true;
            for c in &cases {
                let verdict = if c.ok() { "ok" } else { "FAILED" };
                let expect = if c.expect_pass { "" } else { " (expected to fail)" };
                print!("{verdict:6} {}{expect}: {}", c.name, c.report);
                ok &= c.ok();
            }
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Scenes { out, count, seed, size } => {
            let scenes = procedural_scenes(count, seed, size, size)?;
            write_scene_dir(&out, &scenes)?;
            println!("wrote {count} scenes under {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

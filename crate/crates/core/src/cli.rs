//! Command-line front end. [`run_cli`] never exits the process itself, so
//! every command can be driven from tests.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{load_config, preset_model, ModelPreset};
use crate::data::{dump_pairs, generate_pair, load_manifest, manifest_to_toml, plan_native_batch, sample_source};
use crate::objective::{full_model_check_options, pretrain_grad_check};
use crate::probe::probe_from_config;
use crate::trainer::{effective_config, load_checkpoint, train, TrainOptions};
use crate::{Error, Result};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "AIMV2_KIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "aimv2-kit", version, about = "Desk-scale multimodal autoregressive pre-training kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train an encoder/decoder pair from a TOML run configuration.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train at the high resolution with weight decay forced to zero.
        #[arg(long)]
        high_res_adapt: bool,
        /// Branch a linear cooldown from the resumed checkpoint.
        #[arg(long, requires = "resume")]
        cooldown_branch: bool,
        /// Stop after this step (a checkpoint is written there).
        #[arg(long)]
        stop_after: Option<u64>,
        /// Write the first batch's patch grids as PNM images to this directory.
        #[arg(long)]
        dump_patches: Option<PathBuf>,
    },
    /// Train attentive probes on a frozen encoder from a checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic gradients of the full objective with finite differences.
    GradCheck {
        #[arg(long, default_value = "desk_tiny")]
        preset: String,
        /// Pass threshold on the maximum relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Number of random models to check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Draw native-resolution batch plans (patch area and batch size).
    PlanBatches {
        /// Patches per mini-batch (a power of two).
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smallest area exponent.
        #[arg(long, default_value_t = 7)]
        n_min: u32,
        /// Largest area exponent.
        #[arg(long, default_value_t = 12)]
        n_max: u32,
    },
    /// Sample sources from a dataset manifest and report their frequencies.
    SampleMixture {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render the first pairs (at most 16) into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

/// Outcome of one command. Exit codes: 0 success, 1 validation failure
/// (bad arguments, configuration or failed check), 2 runtime failure.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub report_path: Option<PathBuf>,
}

impl CommandResult {
    fn ok(summary: String, report_path: Option<PathBuf>) -> Self {
        Self {
            exit_code: 0,
            summary,
            report_path,
        }
    }

    fn fail(exit_code: i32, summary: String) -> Self {
        Self {
            exit_code,
            summary,
            report_path: None,
        }
    }
}

/// Failure before any work started (1) or while running (2).
enum Failure {
    Setup(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn setup<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Setup)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return CommandResult::ok(e.to_string(), None);
        }
        Err(e) => return CommandResult::fail(1, e.render().to_string()),
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => return CommandResult::fail(1, e.to_string()),
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(r) => r,
        Err(Failure::Setup(e)) => CommandResult::fail(1, format!("error: {e}")),
        Err(Failure::Run(e)) => CommandResult::fail(2, format!("error: {e}")),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn dispatch(command: Command) -> Result<CommandResult, Failure> {
    match command {
        Command::Train {
            config,
            resume,
            high_res_adapt,
            cooldown_branch,
            stop_after,
            dump_patches,
        } => {
            let cfg = setup(load_config(&config))?;
            let opts = TrainOptions {
                resume,
                high_res_adapt,
                cooldown_branch,
                stop_after,
                dump_patches,
            };
            let eff = effective_config(&cfg, &opts);
            setup(crate::config::validate_config(&eff))?;
            let out = train(&cfg, &opts)?;
            let mut s = format!("seed {} config {:016x}\n", cfg.seed, out.config_hash);
            if let Some(m) = out.history.last() {
                writeln!(
                    s,
                    "step {} lr {:.3e} pixel {:.5} text {:.5} total {:.5}",
                    m.step, m.lr, m.report.pixel_loss, m.report.text_loss, m.report.total
                )
                .ok();
            }
            if let Some(c) = &out.last_checkpoint {
                writeln!(s, "checkpoint {}", c.display()).ok();
            }
            write!(s, "metrics {}", out.metrics_path.display()).ok();
            Ok(CommandResult::ok(s, Some(out.metrics_path)))
        }
        Command::Probe { config, checkpoint } => {
            let cfg = setup(load_config(&config))?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let state = ckpt.into_state(&cfg)?;
            let (_, report) = probe_from_config(&cfg, &state.model.encoder)?;
            let path = checkpoint
                .parent()
                .map_or_else(|| PathBuf::from("probe_report.toml"), |d| d.join("probe_report.toml"));
            report.write(&path)?;
            let mut s = format!(
                "seed {} config {:016x} checkpoint step {} (config {:016x})\n",
                cfg.seed,
                cfg.hash(),
                ckpt.step,
                ckpt.config_hash
            );
            writeln!(s, "least-squares train accuracy {:.4}", report.least_squares_train_accuracy).ok();
            for e in &report.run {
                writeln!(
                    s,
                    "lr {:.1e} wd {:.2}: train {:.4} eval {:.4}",
                    e.lr, e.weight_decay, e.train_accuracy, e.eval_accuracy
                )
                .ok();
            }
            let b = report.best_entry();
            write!(s, "best lr {:.1e} wd {:.2} eval accuracy {:.4}", b.lr, b.weight_decay, b.eval_accuracy).ok();
            Ok(CommandResult::ok(s, Some(path)))
        }
        Command::GradCheck { preset, tol, seeds } => {
            let preset: ModelPreset = setup(preset.parse())?;
            if !matches!(preset, ModelPreset::DeskTiny | ModelPreset::DeskSmall) {
                return Err(Failure::Setup(Error::invalid(format!(
                    "grad-check runs on desk presets only, not `{}`",
                    preset.name()
                ))));
            }
            if !(tol > 0.0) || seeds == 0 {
                return Err(Failure::Setup(Error::invalid("need tol > 0 and at least one seed")));
            }
            let cfg = preset_model(preset);
            let mut s = format!("preset {} tol {tol:e} seeds 0..{seeds}\n", preset.name());
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let r = pretrain_grad_check(&cfg, seed, &full_model_check_options(tol, seed))?;
                let w = r.worst().expect("model has parameters");
                writeln!(s, "seed {seed}: max relative error {:.3e} ({})", r.max_rel_error, w.name).ok();
                worst = worst.max(r.max_rel_error);
            }
            let passed = worst <= tol;
            write!(s, "max relative error {worst:.3e} {}", if passed { "PASS" } else { "FAIL" }).ok();
            Ok(CommandResult {
                exit_code: if passed { 0 } else { 1 },
                summary: s,
                report_path: None,
            })
        }
        Command::PlanBatches {
            budget,
            draws,
            seed,
            n_min,
            n_max,
        } => {
            setup(crate::data::validate_budget(budget, (n_min, n_max)))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = format!("# seed {seed} budget {budget} n {n_min}..{n_max}");
            for _ in 0..draws {
                let p = plan_native_batch(budget, &mut rng, (n_min, n_max))?;
                write!(s, "\nz {:+.6} n {} A {} B {} A*B {}", p.z, p.n, p.area, p.batch_size, p.area * p.batch_size).ok();
            }
            Ok(CommandResult::ok(s, None))
        }
        Command::SampleMixture {
            manifest,
            draws,
            seed,
            dump,
        } => {
            let sources = setup(load_manifest(&manifest))?;
            let digest = Sha256::digest(manifest_to_toml(&sources).as_bytes());
            let hash = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = vec![0usize; sources.len()];
            for _ in 0..draws {
                counts[sample_source(&sources, &mut rng)?] += 1;
            }
            let mut s = format!("seed {seed} manifest {hash:016x} draws {draws}\nsource\tprob\tcount\tfreq");
            for (src, &c) in sources.iter().zip(&counts) {
                let freq = if draws > 0 { c as f64 / draws as f64 } else { 0.0 };
                write!(s, "\n{}\t{}\t{c}\t{freq:.5}", src.name, src.prob).ok();
            }
            if let Some(dir) = &dump {
                let pairs = (0..draws.min(16) as u64)
                    .map(|i| generate_pair(seed.wrapping_add(i), &sources))
                    .collect::<Result<Vec<_>>>()?;
                dump_pairs(&pairs, dir)?;
                write!(s, "\ndumped {} pairs to {}", pairs.len(), dir.display()).ok();
            }
            Ok(CommandResult::ok(s, dump))
        }
    }
}

/// Long help of the binary and every subcommand, in declaration order.
pub fn help_text() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        let name = sub.get_name().to_string();
        write!(out, "\n==> {name} <==\n{}", sub.render_long_help()).ok();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> CommandResult {
        run_cli(std::iter::once("aimv2-kit").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_command_and_flag_exit_one_with_usage() {
        for args in [&["frobnicate"][..], &["plan-batches", "--budget", "16", "--draws", "1", "--bogus"]] {
            let r = run(args);
            assert_eq!(r.exit_code, 1, "{}", r.summary);
            assert!(r.summary.contains("Usage"), "{}", r.summary);
        }
    }

    #[test]
    fn missing_config_names_path() {
        let r = run(&["train", "--config", "missing.cfg"]);
        assert_eq!(r.exit_code, 1);
        assert!(r.summary.contains("missing.cfg"), "{}", r.summary);
    }

    #[test]
    fn plan_batches_lines_multiply_to_budget() {
        let r = run(&["plan-batches", "--budget", "16384", "--draws", "3", "--seed", "7"]);
        assert_eq!(r.exit_code, 0);
        let lines: Vec<&str> = r.summary.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len(), 3);
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            let a: usize = f[5].parse().unwrap();
            let b: usize = f[7].parse().unwrap();
            assert_eq!(a * b, 16384, "{l}");
        }
        assert_eq!(run(&["plan-batches", "--budget", "1000", "--draws", "1"]).exit_code, 1);
    }

    #[test]
    fn grad_check_rejects_paper_presets() {
        assert_eq!(run(&["grad-check", "--preset", "aimv2_h"]).exit_code, 1);
        assert_eq!(run(&["grad-check", "--preset", "nope"]).exit_code, 1);
    }

    #[test]
    fn help_lists_every_subcommand() {
        let h = help_text();
        for c in ["train", "probe", "grad-check", "plan-batches", "sample-mixture", "--high-res-adapt", "--tol"] {
            assert!(h.contains(c), "{c}");
        }
        assert_eq!(run(&["--help"]).exit_code, 0);
    }
}

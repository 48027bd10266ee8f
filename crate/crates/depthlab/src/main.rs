//! Experiment runner CLI: train-and-probe runs, sweeps, theorem
//! verification, and report merging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthlab::artifact::{self, load_experiment, preset, theory_summary_csv, ArtifactError};
use depthlab::expconfig::{experiment_from_flat, ExperimentConfig};

#[derive(Parser)]
#[command(name = "depthlab", version, about = "Toy-scale transformer training and depth-utilization diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Experiment config file (flat key = value format).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: smoke, depth-sweep, wd-sweep, seqlen-sweep,
    /// gqa-sweep, moe-vs-dense, stacked.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig, String> {
        match (&self.config, &self.preset) {
            (Some(path), None) => load_experiment(path).map_err(|e| e.to_string()),
            (None, Some(name)) => {
                let text = preset(name).ok_or_else(|| format!("unknown preset {name:?}"))?;
                experiment_from_flat(&text).map_err(|e| e.to_string())
            }
            _ => Err("exactly one of --config or --preset is required".into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write the full artifact set.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Output root directory (overrides output_dir in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one child per sweep value and seed, plus a comparison table.
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override (replaces the sweep's seed list).
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel worker count for child runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the Monte-Carlo theorem battery; exits non-zero if any verdict
    /// fails.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for theorem_checks.json and theory_summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negative control: zero tolerances and halved bounds must fail.
        #[arg(long, default_value_t = false)]
        self_test_corrupt: bool,
    },
    /// Merge run timelines into one long-format CSV on stdout (or --out).
    Report {
        /// Run directories (each must contain a verifying manifest).
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { source, out, seed } => {
            let cfg = match source.load() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match artifact::run(&cfg, out.as_deref(), seed) {
                Ok(art) => {
                    println!("run {} complete", art.name);
                    println!("  dir: {}", art.dir.display());
                    println!(
                        "  final: step {} loss {:.4} last_layer_var {:.4}",
                        art.final_row.step, art.final_row.loss, art.final_row.last_layer_var
                    );
                    println!(
                        "  scores: causal {:.4} permutation {:.4} useful {:.4} (E{}/W{})",
                        art.effectiveness.causal.global,
                        art.effectiveness.permutation.global,
                        art.effectiveness.usefulness.s_useful,
                        art.effectiveness.usefulness.effective,
                        art.effectiveness.usefulness.wasted
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { source, out, seed, jobs } => {
            let cfg = match source.load() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match artifact::sweep(&cfg, out.as_deref(), seed, jobs) {
                Ok(arts) => {
                    println!("sweep {} complete: {} runs", cfg.name, arts.len());
                    for art in &arts {
                        println!(
                            "  {}: loss {:.4} var {:.4} useful {:.4}",
                            art.name,
                            art.final_row.loss,
                            art.final_row.last_layer_var,
                            art.effectiveness.usefulness.s_useful
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::VerifyTheory { seed, out, self_test_corrupt } => {
            match artifact::verify_theory(seed, out.as_deref(), self_test_corrupt) {
                Ok((reports, all_pass)) => {
                    print!("{}", theory_summary_csv(&reports));
                    let n_checks: usize = reports.iter().map(|r| r.checks.len()).sum();
                    let n_fail: usize =
                        reports.iter().flat_map(|r| &r.checks).filter(|c| !c.pass).count();
                    eprintln!("{n_checks} checks, {n_fail} failed");
                    if all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                return fail("report needs at least one run directory");
            }
            match artifact::report(&dirs) {
                Ok(table) => {
                    if let Some(path) = out {
                        if let Err(e) = std::fs::write(&path, table) {
                            return fail(ArtifactError::Io(e));
                        }
                        println!("wrote {}", path.display());
                    } else {
                        print!("{table}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use symvae::equilibrium::{PriorKind, Stream, Variant};
use symvae_cli::error::HarnessError;
use symvae_cli::{load_config, run, verify, Result, RunConfig};

#[derive(Parser)]
#[command(name = "symvae", version, about = "Symmetric equilibrium learning of encoder/decoder pairs")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics, checkpoints and a report.
    Train,
    /// Sample the limiting chain of trained (or freshly initialized) models.
    SampleLimiting {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Infer held-out targets from complete and partially masked data.
    Complete {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Equilibrium uniqueness, moment matching and dual agreement on random lifted games.
    VerifyTheorem1 {
        #[arg(long, default_value_t = 10)]
        starts: usize,
    },
    /// ELBO identity on random decoders and ELBO vs equilibrium decoder updates.
    VerifyProp1 {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 100_000)]
        estimates: usize,
    },
    /// Bitwise agreement of wake-sleep and equilibrium updates.
    VerifyWs {
        #[arg(long, default_value_t = 1000)]
        steps: u64,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or(HarnessError::Validation {
        field: "config".into(),
        message: "this command needs --config".into(),
    })?;
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn check(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train => {
            let o = run::run_train(&config(cli)?)?;
            println!("wrote {}", o.out_dir.join("report.txt").display());
            if let Some((_, d)) = o.trajectory.last() {
                println!("kl_rev {:.4e}  kl_fwd {:.4e}  tv_mixture {:.4e}", d.kl_rev, d.kl_fwd, d.tv_mixture);
            }
            if let Some(a) = o.accuracy {
                println!("heldout accuracy {a:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SampleLimiting { checkpoint } => {
            let o = run::run_sample_limiting(&config(cli)?, checkpoint.as_deref())?;
            println!("{} recorded configurations", o.estimate.records);
            if let Some(t) = o.stationary_tv {
                println!("TV to the exact stationary marginal {t:.4e}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Complete { checkpoint } => {
            let o = run::run_complete(&config(cli)?, checkpoint.as_deref())?;
            println!(
                "{} records: accuracy {:.4} complete, {:.4} masked, majority rate {:.4}",
                o.records, o.accuracy_full, o.accuracy_masked, o.chance
            );
            Ok(check(o.accuracy_masked >= o.accuracy_full - 0.05 && o.accuracy_masked >= 2.0 * o.chance))
        }
        Command::VerifyTheorem1 { starts } => {
            let mut ok = true;
            for r in verify::verify_theorem1(seed, *starts)? {
                println!(
                    "{}x{}: {} starts, pairwise TV {:.2e}, moment gap {:.2e}, dual TV {:.2e}",
                    r.nx, r.nz, r.starts, r.max_pair_tv, r.max_moment_gap, r.max_dual_tv
                );
                ok &= r.max_pair_tv < 1e-4 && r.max_moment_gap < 1e-6 && r.max_dual_tv < 1e-5;
            }
            Ok(check(ok))
        }
        Command::VerifyProp1 { instances, estimates } => {
            let residual = verify::verify_prop1(seed, *instances)?;
            println!("largest residual over {instances} decoders: {residual:.2e}");
            let (s, m) = verify::tabular_instance(Variant::Unsupervised, 4, 3, PriorKind::Learned, seed)?;
            let batch = symvae::equilibrium::EmpiricalData::new()
                .with(Stream::X, verify::label_records(&[0, 1, 2, 3]))
                .full_batch(1);
            let c = verify::elbo_vs_nash(&s, &m, &batch, *estimates, seed)?;
            println!("decoder updates: largest z-score {:.2} over {} coordinates", c.max_z, c.coords);
            Ok(check(residual < 1e-12 && c.max_z < 4.0))
        }
        Command::VerifyWs { steps } => {
            let cfg = config(cli)?;
            let p = run::prepare(&cfg)?;
            let r = verify::wake_sleep_equivalence(
                &p.scenario,
                &p.models,
                &p.data,
                cfg.training.batch_size.max(1),
                cfg.training.alpha,
                *steps,
                cfg.seed,
            )?;
            match r.first_divergence {
                None => println!("identical parameters after {} steps", r.steps),
                Some(s) => println!("parameters differ after step {s}"),
            }
            Ok(check(r.first_divergence.is_none()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

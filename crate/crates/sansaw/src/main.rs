//! Experiment runner binary. Thin argument parsing over the library's
//! `runner` commands; see the crate examples for programmatic use.

use clap::{Parser, Subcommand};
use sansaw::config::{parse_config, Grouping, Overrides};
use sansaw::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sansaw",
    about = "Semantic-aware normalization and whitening experiments on a synthetic multi-domain benchmark"
)]
struct Cli {
    /// JSON run config; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on|off, got `{other}`")),
    }
}

fn parse_grouping(s: &str) -> Result<Grouping, String> {
    s.parse::<Grouping>().map_err(|e| e.to_string())
}

#[derive(clap::Args, Default)]
struct ModelFlags {
    /// Category-level normalization on/off.
    #[arg(long, value_parser = parse_on_off)]
    san: Option<bool>,
    /// Whitening loss on/off.
    #[arg(long, value_parser = parse_on_off)]
    saw: Option<bool>,
    /// Whitening grouping: iw, giw, or saw.
    #[arg(long, value_parser = parse_grouping)]
    grouping: Option<Grouping>,
    /// Branch refinement block on/off.
    #[arg(long, value_parser = parse_on_off)]
    cfr: Option<bool>,
    /// Aligned category count C.
    #[arg(long)]
    c: Option<usize>,
    /// Region cluster count k.
    #[arg(long)]
    k: Option<usize>,
    /// Top clusters forming the region.
    #[arg(long)]
    t: Option<usize>,
    /// Training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda_san: Option<f64>,
    #[arg(long)]
    lambda_saw: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain dataset bundle.
    GenData {
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Train a model on a dataset bundle.
    Train {
        /// Dataset bundle directory.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Evaluate a checkpoint on a dataset bundle.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Identifier written into the metrics rows.
        #[arg(long, default_value = "eval")]
        run_id: String,
    },
    /// Train and evaluate the four ablation arms over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds per arm.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Dump stage-tap features and the cross-domain alignment report.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the finite-difference gradient suite over every operator.
    Gradcheck,
}

fn overrides(cli_seed: Option<u64>, out: &Option<PathBuf>, flags: Option<&ModelFlags>) -> Overrides {
    let mut o = Overrides {
        seed: cli_seed,
        out: out.as_ref().map(|p| p.display().to_string()),
        ..Overrides::default()
    };
    if let Some(f) = flags {
        o.san = f.san;
        o.saw = f.saw;
        o.grouping = f.grouping;
        o.cfr = f.cfr;
        o.c = f.c;
        o.k = f.k;
        o.t = f.t;
        o.iters = f.iters;
        o.lr0 = f.lr0;
        o.batch = f.batch;
        o.lambda_san = f.lambda_san;
        o.lambda_saw = f.lambda_saw;
    }
    o
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf, sansaw::Error> {
    out.clone()
        .ok_or_else(|| sansaw::Error::Config("--out <dir> is required".into()))
}

fn run(cli: Cli) -> Result<ExitCode, sansaw::Error> {
    match &cli.cmd {
        Cmd::GenData { flags } => {
            let cfg = parse_config(
                cli.config.as_deref(),
                &overrides(cli.seed, &cli.out, Some(flags)),
            )?;
            let out = require_out(&cli.out)?;
            let bench = runner::cmd_gen_data(&cfg, &out)?;
            println!(
                "wrote {} train + {} source-test + {}x{} target-test samples to {}",
                bench.train.len(),
                bench.test_source.len(),
                bench.test_targets.len(),
                bench.config.n_test_per_domain,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { data, flags } => {
            let cfg = parse_config(
                cli.config.as_deref(),
                &overrides(cli.seed, &cli.out, Some(flags)),
            )?;
            let out = require_out(&cli.out)?;
            let record = runner::cmd_train(&cfg, data, &out)?;
            println!(
                "trained {} iters; final loss {:.4}; step {:.1} ms; inference {:.2} ms",
                record.losses.len(),
                record.losses.last().map(|l| l.total).unwrap_or(f64::NAN),
                record.mean_step_seconds * 1e3,
                record.inference_ms
            );
            for (domain, miou) in &record.per_domain_miou {
                println!("  {domain}: mIoU {miou:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            checkpoint,
            data,
            run_id,
        } => {
            let out = require_out(&cli.out)?;
            let rows = runner::cmd_eval(checkpoint, data, &out, run_id)?;
            for r in rows.iter().filter(|r| r.class_id == -1) {
                println!("{}: mIoU {:.4}", r.domain, r.miou);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate { data, seeds, flags } => {
            let cfg = parse_config(
                cli.config.as_deref(),
                &overrides(cli.seed, &cli.out, Some(flags)),
            )?;
            let out = require_out(&cli.out)?;
            let table = runner::cmd_ablate(&cfg, data, &out, *seeds)?;
            println!("\nmean mIoU over {seeds} seeds:");
            for (arm, means) in table.aggregated() {
                let cells: Vec<String> = means
                    .iter()
                    .map(|(d, m)| format!("{d}={m:.4}"))
                    .collect();
                println!("  {:<8} {}", arm, cells.join(" "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Diagnose { checkpoint, data } => {
            let out = require_out(&cli.out)?;
            let report = runner::cmd_diagnose(checkpoint, data, &out)?;
            println!(
                "mean center distance {:.4}; off-diagonal {:.4}{}",
                report.mean_center_distance,
                report.offdiag,
                report
                    .grouped_residual
                    .map(|g| format!("; grouped residual {g:.4}"))
                    .unwrap_or_default()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck => {
            let reports = runner::cmd_gradcheck()?;
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<20} worst rel err {:.3e} (tolerance {:.0e}, {} instances)",
                    r.name, r.worst_rel_error, r.tolerance, r.instances
                );
                all_ok &= r.passed();
            }
            Ok(if all_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

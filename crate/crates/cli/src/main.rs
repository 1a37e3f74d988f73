use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedrobust_cli::commands::{
    cmd_diag, cmd_eval, cmd_lab, cmd_train, in_pool, transport_trials, Overrides,
};
use fedrobust_cli::config::{LabCheck, RunConfig};
use fedrobust_cli::error::{CliError, CliResult, EXIT_CHECK, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "fedrobust",
    version,
    about = "Federated training robust to per-device affine shifts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all output files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-node work.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the metrics CSV and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pick the penalty weight by a validation sweep first.
        #[arg(long)]
        lambda_grid: bool,
    },
    /// Accuracy of a checkpoint across the configured attack sweep.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configured checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the convergence bounds on a random quadratic game.
    Lab {
        #[command(flatten)]
        common: Common,
    },
    /// Check the transport bound for affine shifts on random samples.
    TransportCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Complexity, margin risk and heterogeneity of a checkpoint.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ov = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        threads: common.threads,
    };
    if let Some(dir) = &ov.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    ov.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train {
            common,
            lambda_grid,
        } => {
            let cfg = load(&common)?;
            let s = in_pool(common.threads, || cmd_train(&cfg, lambda_grid))??;
            if let Some(choice) = &s.lambda {
                for (lam, pen) in &choice.penalties {
                    println!(
                        "lambda {lam}: mean shift size {pen:.6} (target {:.6})",
                        choice.target
                    );
                }
                println!("selected lambda {}", choice.lam);
            }
            println!("iterations {}", s.outcome.rows.len());
            println!(
                "gradient evaluations per node per iteration {}",
                s.outcome.grad_evals_per_node_iter
            );
            println!("clean test accuracy {:.4}", s.clean_acc);
            println!("attacked test accuracy {:.4}", s.robust_acc);
            println!("metrics {}", s.metrics_path.display());
            println!("checkpoint {}", s.checkpoint_path.display());
            Ok(EXIT_OK)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let path = checkpoint.unwrap_or_else(|| cfg.output.checkpoint_path.clone());
            let table = in_pool(common.threads, || cmd_eval(&cfg, &path))??;
            println!("budget,accuracy");
            for (b, acc) in table {
                println!("{b},{acc:.4}");
            }
            Ok(EXIT_OK)
        }
        Command::Lab { common } => {
            let cfg = load(&common)?;
            let out = in_pool(common.threads, || cmd_lab(&cfg))??;
            let c = &out.constants;
            println!(
                "L1 {:.4} L2 {:.4} L12 {:.4} mu1 {:.4} mu2 {:.4} L_phi {:.4} kappa {:.3} rho_f {:.4}",
                c.l1, c.l2, c.l12, c.mu1, c.mu2, c.l_phi, c.kappa, c.rho_f
            );
            println!(
                "eta1 {:.6e} eta2 {:.6e} tau {}",
                out.hp.eta1, out.hp.eta2, out.hp.tau
            );
            let last = out
                .trace
                .records
                .last()
                .expect("trace has the initial record");
            println!("P_0 {:.6e} P_T {:.6e}", out.trace.records[0].p, last.p);
            let what = match cfg.lab.check {
                LabCheck::Decay => "potential decay bound",
                LabCheck::Stationarity => "stationarity bound",
            };
            println!(
                "{what} {} (margin {:.3e})",
                if out.holds { "holds" } else { "VIOLATED" },
                out.margin
            );
            println!("trace {}", cfg.output.lab_path.display());
            Ok(if out.holds { EXIT_OK } else { EXIT_CHECK })
        }
        Command::TransportCheck { common } => {
            let cfg = load(&common)?;
            let out = transport_trials(&cfg)?;
            println!("{:>5} {:>14} {:>14} {:>14}", "trial", "lhs", "rhs", "slack");
            for (k, r) in out.reports.iter().enumerate() {
                println!(
                    "{k:>5} {:>14.6e} {:>14.6e} {:>14.6e}",
                    r.lhs,
                    r.rhs,
                    r.rhs - r.lhs
                );
            }
            println!("{}", out.summary_line());
            Ok(if out.held == out.reports.len() {
                EXIT_OK
            } else {
                EXIT_CHECK
            })
        }
        Command::Diag { common, checkpoint } => {
            let cfg = load(&common)?;
            let path = checkpoint.unwrap_or_else(|| cfg.output.checkpoint_path.clone());
            let d = in_pool(common.threads, || cmd_diag(&cfg, &path))??;
            let c = d.complexity;
            println!("spectral norm product {:.6}", c.prod_spec);
            println!("frobenius ratio sum {:.6}", c.fro_ratio_sum);
            println!("smoothness proxy {:.6}", c.lip_grad);
            println!("geometric mean norm {:.6}", c.geo_mean);
            println!("complexity score {:.6}", c.score());
            for (g, r) in &d.margin_risk {
                println!("margin risk at gamma {g}: {r:.4}");
            }
            println!("gradient heterogeneity {:.6e}", d.heterogeneity);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

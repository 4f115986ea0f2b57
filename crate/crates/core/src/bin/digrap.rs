use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use digrap::harness::{
    self, FailedCell, RunConfig, RunResult, CONFIG_KEYS, GRAD_CHECK_TOL, SWEEP_MUS,
};

#[derive(Parser)]
#[command(name = "digrap", version, about = "Directional gradient projection experiments on synthetic shift suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the source mixture and save the checkpoint per seed
    Pretrain(Common),
    /// Run the configured method grid and write result files
    Run(Common),
    /// Run vanilla fine-tuning plus one projection row per mu
    Sweep(Common),
    /// Vanilla fine-tuning followed by Mahalanobis shift scores
    ScoreShift(Common),
    /// Finite-difference gradient checks on the reference models
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single run seed (overrides `seeds`)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method names (overrides `methods`)
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated projection learning rates
    #[arg(long)]
    mu: Option<String>,
    /// Comma-separated pinned projection strengths
    #[arg(long = "fixed-omega")]
    fixed_omega: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key as key=value; repeatable
    #[arg(long = "suite-override", value_name = "KEY=VALUE")]
    suite_override: Vec<String>,
}

impl Common {
    fn pairs(&self, sweep: bool) -> digrap::Result<Vec<(String, String)>> {
        let mut pairs = harness::load_pairs(self.config.as_deref())?;
        let has = |pairs: &[(String, String)], k: &str| pairs.iter().any(|(key, _)| key == k);
        if sweep && self.mu.is_none() && !has(&pairs, "mu") {
            let grid: Vec<String> = SWEEP_MUS.iter().map(f64::to_string).collect();
            pairs.push(("mu".into(), grid.join(",")));
        }
        for kv in &self.suite_override {
            let (k, v) = kv.split_once('=').ok_or_else(|| digrap::Error::Parse {
                key: "--suite-override".into(),
                value: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        let flags = [
            ("seeds", self.seed.map(|s| s.to_string())),
            ("output_dir", self.out.as_ref().map(|p| p.to_string_lossy().into_owned())),
            ("methods", self.method.clone()),
            ("mu", self.mu.clone()),
            ("fixed_omega", self.fixed_omega.clone()),
            ("epochs", self.epochs.map(|e| e.to_string())),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(pairs)
    }

    fn config(&self, sweep: bool) -> digrap::Result<RunConfig> {
        RunConfig::from_pairs(&self.pairs(sweep)?)
    }
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (default):\n");
    for (k, d, desc) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<20} {d:<20} {desc}\n"));
    }
    s
}

fn report_failures(failed: &[FailedCell]) -> ExitCode {
    for f in failed {
        eprintln!("failed cell {} seed {}: {}", f.method, f.seed, f.error);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn print_summary(res: &RunResult) {
    println!("run {}", res.run_id);
    println!("{:<24} {:>6} {:>8} {:>8} {:>8} {:>8}", "method", "seeds", "id", "ood_avg", "id_d%", "ood_d%");
    for s in &res.summary {
        let d = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.2}"));
        println!(
            "{:<24} {:>6} {:>8.2} {:>8.2} {:>8} {:>8}",
            s.method,
            s.seeds,
            100.0 * s.id_mean,
            100.0 * s.ood_mean,
            d(s.id_delta_pct),
            d(s.ood_delta_pct)
        );
    }
}

fn run_grid(cfg: &RunConfig) -> digrap::Result<ExitCode> {
    let res = harness::run_experiment(cfg)?;
    let files = harness::write_results(&res, &cfg.output_dir)?;
    print_summary(&res);
    println!("wrote {} files to {}", files.len(), cfg.output_dir.display());
    Ok(report_failures(&res.failed))
}

fn dispatch(cmd: Command) -> digrap::Result<ExitCode> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg = c.config(false)?;
            let mut failed = Vec::new();
            for &seed in &cfg.seeds {
                match harness::pretrain_command(&cfg, seed) {
                    Ok((path, src, id)) => println!(
                        "seed {seed}: source acc {:.2}, ID val acc {:.2} -> {}",
                        100.0 * src,
                        100.0 * id,
                        path.display()
                    ),
                    Err(e) => failed.push(FailedCell {
                        method: "pretrain".into(),
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
            Ok(report_failures(&failed))
        }
        Command::Run(c) => run_grid(&c.config(false)?),
        Command::Sweep(c) => run_grid(&c.config(true)?),
        Command::ScoreShift(c) => {
            let cfg = c.config(false)?;
            let (scores, failed) = harness::score_shift_command(&cfg)?;
            for s in &scores {
                for d in &s.datasets {
                    println!("seed {} {:<20} {:.4}", s.seed, d.dataset, d.mean);
                }
            }
            Ok(report_failures(&failed))
        }
        Command::GradCheck { seed, h } => {
            let mut worst: f64 = 0.0;
            for r in harness::grad_check_command(seed, h)? {
                println!("{:<18} params {:.3e}  inputs {:.3e}", r.model, r.param_error, r.input_error);
                worst = worst.max(r.param_error).max(r.input_error);
            }
            Ok(if worst < GRAD_CHECK_TOL { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

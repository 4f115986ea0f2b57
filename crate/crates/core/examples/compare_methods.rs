//! One seed, every fine-tuning method, evaluated on the full suite.

use digrap::baselines::{Method, DEFAULT_WISE_BETAS};
use digrap::harness::{aggregate, prepare_seed, run_cell, RunConfig};

fn main() -> digrap::Result<()> {
    let cfg = RunConfig::defaults(std::env::temp_dir().join("digrap-compare"));
    let ctx = prepare_seed(&cfg, 0)?;
    let methods = [
        Method::VanillaFt,
        Method::LinearProbe,
        Method::Lpft { lp_epochs: 6 },
        Method::L2sp { lambda: 0.01 },
        Method::WiseFt { betas: DEFAULT_WISE_BETAS.to_vec() },
        Method::MagProj { gamma: 1.0 },
        Method::FullProjection,
        Method::FixedOmega { omega: 0.5 },
        Method::Digrap { mu: 0.5 },
    ];
    let mut cells = Vec::new();
    for m in &methods {
        cells.extend(run_cell(&cfg, &ctx, m)?.into_iter().map(|(c, _)| c));
    }
    println!("{:<20} {:>7} {:>7} {:>7} {:>7}", "method", "ID", "OOD", "ID d%", "OOD d%");
    for s in aggregate(&cells) {
        println!(
            "{:<20} {:>7.2} {:>7.2} {:>+7.2} {:>+7.2}",
            s.method,
            100.0 * s.id_mean,
            100.0 * s.ood_mean,
            s.id_delta_pct.unwrap_or(f64::NAN),
            s.ood_delta_pct.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

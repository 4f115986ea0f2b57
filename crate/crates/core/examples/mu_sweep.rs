//! A reduced sweep over the projection learning rate, written to a temporary
//! directory exactly as the `sweep` command would.

use digrap::harness::{run_experiment, write_results, RunConfig, SWEEP_MUS};

fn main() -> digrap::Result<()> {
    let out = std::env::temp_dir().join("digrap-sweep");
    let mut pairs = vec![
        ("output_dir".to_string(), out.to_string_lossy().into_owned()),
        ("seeds".into(), "0,1".into()),
        ("epochs".into(), "15".into()),
    ];
    let grid: Vec<String> = SWEEP_MUS.iter().map(|m| m.to_string()).collect();
    pairs.push(("mu".into(), grid.join(",")));
    let cfg = RunConfig::from_pairs(&pairs)?;
    let res = run_experiment(&cfg)?;
    for s in &res.summary {
        println!(
            "{:<18} ID {:.2} ± {:.2}  OOD {:.2} ± {:.2}",
            s.method,
            100.0 * s.id_mean,
            100.0 * s.id_std,
            100.0 * s.ood_mean,
            100.0 * s.ood_std
        );
    }
    let files = write_results(&res, &out)?;
    println!("{} files in {}", files.len(), out.display());
    Ok(())
}

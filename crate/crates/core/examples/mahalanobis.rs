//! Feature-space shift scores: fit a Gaussian to ID-train features of a
//! fine-tuned model and score each evaluation split.

use digrap::baselines::Method;
use digrap::harness::{prepare_seed, run_cell, shift_scores, RunConfig};

fn main() -> digrap::Result<()> {
    let mut cfg = RunConfig::defaults(std::env::temp_dir().join("digrap-maha"));
    cfg.epochs = 10;
    cfg.pretrain_epochs = 10;
    let ctx = prepare_seed(&cfg, 0)?;
    let (_, space) = run_cell(&cfg, &ctx, &Method::VanillaFt)?.remove(0);
    let scores = shift_scores(&ctx, &space)?;
    println!("ridge {:.3e}", scores.ridge);
    for d in &scores.datasets {
        println!("{:<20} mean score {:>8.3}", d.dataset, d.mean);
    }
    Ok(())
}

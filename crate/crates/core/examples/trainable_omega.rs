//! Watching the per-layer projection strength adapt during fine-tuning of a
//! small MLP.

use digrap::baselines::{pretrain, TrainConfig};
use digrap::metrics::omega_windows;
use digrap::models::{loss_and_grad, Batch, ModelSpec};
use digrap::optim::{AdamState, OptimConfig};
use digrap::projection::{digrap_step, DigrapConfig, DigrapState};
use digrap::shiftlab::{make_suite, SuiteConfig, TaskSpec};

fn main() -> digrap::Result<()> {
    let task = TaskSpec { n_pretrain: 1000, n_id_train: 256, ..TaskSpec::default() };
    let suite = make_suite(&task, &SuiteConfig::default())?;
    let spec = ModelSpec::mlp(&[16, 32, 32, 8]);

    let cfg = TrainConfig { epochs: 10, batch_size: 64, optim: OptimConfig::constant(1e-3), seed: 1 };
    let mut space = pretrain(&spec.init_params(0)?, &spec, suite.pretrain(), &cfg)?;
    space.capture_snapshot()?;

    let mut adam = AdamState::new(&space);
    let mut state = DigrapState::new(&space);
    let dcfg = DigrapConfig::trainable(0.5);
    let data = suite.id_train();
    let mut means = Vec::new();
    for step in 0..400 {
        let start = (step * 32) % (data.len() - 32);
        let idx: Vec<usize> = (start..start + 32).collect();
        let batch = Batch::new(data.x.select_rows(&idx), idx.iter().map(|&i| data.y[i]).collect())?;
        let (_, g1) = loss_and_grad(&space, &spec, &batch)?;
        let out = digrap_step(&mut space, &mut adam, &mut state, &dcfg, &g1, 1e-2)?;
        means.push(out.trace.mean_omega());
        if step % 80 == 0 || step == 399 {
            let row: Vec<String> = out.trace.rows.iter().map(|r| format!("{}={:.2}", r.group, r.omega)).collect();
            println!("step {:>3}: {}", out.trace.step, row.join(" "));
        }
    }
    let smooth = omega_windows(&means, 50)?;
    println!("mean omega, 50-step window: first {:.3}, last {:.3}", smooth[0], smooth[smooth.len() - 1]);
    Ok(())
}

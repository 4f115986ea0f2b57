//! Projection with a low-rank adapter. The base model is frozen and the
//! adapter factors are pulled toward zero rather than toward a snapshot.

use digrap::baselines::{evaluate, fine_tune, pretrain, Method, TrainConfig};
use digrap::models::{attach_adapter, ModelSpec};
use digrap::optim::OptimConfig;
use digrap::paramspace::ReferenceMode;
use digrap::shiftlab::{make_suite, SuiteConfig, TaskSpec};

fn main() -> digrap::Result<()> {
    let suite = make_suite(&TaskSpec::default(), &SuiteConfig::default())?;
    let base = ModelSpec::mlp(&[16, 64, 64, 8]);
    let cfg = TrainConfig { epochs: 10, batch_size: 128, optim: OptimConfig::constant(1e-3), seed: 3 };
    let pretrained = pretrain(&base.init_params(0)?, &base, suite.pretrain(), &cfg)?;

    let spec = base.clone().with_adapter(1, 4);
    let mut space = pretrained.clone();
    attach_adapter(&mut space, &spec)?;
    space.capture_snapshot()?;
    for g in space.groups() {
        let reference = match g.reference_mode {
            ReferenceMode::Snapshot => "snapshot",
            ReferenceMode::Origin => "origin",
        };
        println!("{:<18} {:?} trainable={} reference={reference}", g.name, g.shape, g.trainable);
    }

    let before = evaluate(&space, &spec, suite.id_val())?;
    let ft = TrainConfig { epochs: 15, optim: OptimConfig::constant(3e-3), ..cfg };
    let out = fine_tune(&space, &spec, &Method::Digrap { mu: 0.5 }, suite.id_train(), suite.id_val(), &ft)?;
    let after = evaluate(&out.selected, &spec, suite.id_val())?;
    println!("ID val accuracy {:.3} -> {:.3}", before, after);
    let last = out.traces.last().expect("trained at least one step");
    for r in &last.rows {
        println!("{:<18} omega {:.2} distance to origin {:.3}", r.group, r.omega, r.reg_norm);
    }
    Ok(())
}

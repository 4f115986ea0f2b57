//! Fine-tuning methods and the shared training loop.
//!
//! Every method runs through [`fine_tune`], which differs per method only in
//! how the gradient is turned into an update (plain Adam, L2-SP folded into
//! the gradient, directional projection, a post-step radius projection) and
//! in which groups are trainable. Mini-batch order depends only on the
//! training seed, so methods with the same seed see the same batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::{loss_and_grad, predict, Batch, ModelSpec};
use crate::optim::{adam_step, l2sp_grad, schedule_lr, AdamState, OptimConfig};
use crate::paramspace::{group_norm_sq, ParamSpace};
use crate::projection::{digrap_step, DigrapConfig, DigrapState, StepTrace};
use crate::rng;
use crate::shiftlab::ShiftedDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    VanillaFt,
    LinearProbe,
    Lpft { lp_epochs: usize },
    L2sp { lambda: f64 },
    WiseFt { betas: Vec<f64> },
    Digrap { mu: f64 },
    FixedOmega { omega: f64 },
    FullProjection,
    MagProj { gamma: f64 },
}

pub const DEFAULT_WISE_BETAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const REPORTED_WISE_BETA: f64 = 0.5;

impl Method {
    /// Stable identifier used in result files.
    pub fn name(&self) -> String {
        match self {
            Method::VanillaFt => "vanilla_ft".into(),
            Method::LinearProbe => "linear_probe".into(),
            Method::Lpft { lp_epochs } => format!("lpft_lp{lp_epochs}"),
            Method::L2sp { lambda } => format!("l2sp_lambda{lambda}"),
            Method::WiseFt { .. } => "wise_ft".into(),
            Method::Digrap { mu } => format!("digrap_mu{mu}"),
            Method::FixedOmega { omega } => format!("digrap_fixed{omega}"),
            Method::FullProjection => "full_projection".into(),
            Method::MagProj { gamma } => format!("magproj_gamma{gamma}"),
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            Method::Lpft { lp_epochs } if *lp_epochs >= epochs && epochs > 0 => bad(format!(
                "lp_epochs={lp_epochs} must be smaller than epochs={epochs}"
            )),
            Method::L2sp { lambda } if !(*lambda >= 0.0) => bad(format!("lambda {lambda} must be >= 0")),
            Method::WiseFt { betas } if betas.is_empty() || betas.iter().any(|b| !(0.0..=1.0).contains(b)) => {
                bad(format!("WiSE-FT betas {betas:?} must be non-empty and in [0, 1]"))
            }
            Method::Digrap { mu } => DigrapConfig::trainable(*mu).validate(),
            Method::FixedOmega { omega } => DigrapConfig::fixed(*omega).validate(),
            Method::MagProj { gamma } if !(*gamma > 0.0) => bad(format!("radius {gamma} must be > 0")),
            _ => Ok(()),
        }
    }

    fn digrap_config(&self) -> Option<DigrapConfig> {
        match self {
            Method::Digrap { mu } => Some(DigrapConfig::trainable(*mu)),
            Method::FixedOmega { omega } => Some(DigrapConfig::fixed(*omega)),
            Method::FullProjection => Some(DigrapConfig::full_projection()),
            _ => None,
        }
    }
}

/// Per-group `θ = (1 − β)·θ₀ + β·θ_ft`. The endpoints return the inputs
/// exactly.
pub fn wise_interpolate(theta0: &ParamSpace, fine_tuned: &ParamSpace, beta: f64) -> Result<ParamSpace> {
    if !theta0.same_layout(fine_tuned) {
        return Err(Error::Shape("WiSE-FT endpoints have different layouts".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    let mut out = fine_tuned.clone();
    for i in 0..out.len() {
        let a = theta0.values(i);
        let b = fine_tuned.values(i);
        for ((o, &x0), &x1) in out.values_mut(i).iter_mut().zip(a).zip(b) {
            *o = if beta == 0.0 {
                x0
            } else if beta == 1.0 {
                x1
            } else {
                (1.0 - beta) * x0 + beta * x1
            };
        }
    }
    Ok(out)
}

/// Freezes everything but the output layer's weight and bias.
pub fn probe_mask(space: &mut ParamSpace, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    let last = spec.num_layers() - 1;
    if space.len() < 2 * (last + 1) {
        return Err(Error::Shape("parameter space does not match the model".into()));
    }
    space.set_all_trainable(false);
    space.set_trainable(2 * last, true);
    space.set_trainable(2 * last + 1, true);
    Ok(())
}

pub fn unfreeze(space: &mut ParamSpace) {
    space.set_all_trainable(true);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Probe,
    Full,
}

pub fn lpft_phase(epoch: usize, lp_epochs: usize) -> Phase {
    if epoch < lp_epochs {
        Phase::Probe
    } else {
        Phase::Full
    }
}

/// Pulls every group back into the ball of radius `gamma` around its
/// reference.
pub fn mag_project(space: &mut ParamSpace, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("radius {gamma} must be > 0")));
    }
    for i in 0..space.len() {
        let gap = space.reg_gradient(i)?;
        let norm = group_norm_sq(&gap).sqrt();
        if norm > gamma {
            let reference = space.reference(i)?.into_owned();
            let scale = gamma / norm;
            for ((v, r), d) in space.values_mut(i).iter_mut().zip(&reference).zip(&gap) {
                *v = r + scale * d;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Drives the mini-batch order.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optim.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

pub fn evaluate(space: &ParamSpace, spec: &ModelSpec, ds: &ShiftedDataset) -> Result<f64> {
    accuracy(&predict(space, spec, &ds.x)?, &ds.y)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
    idx
}

/// Plain Adam training from `init`, returning the final parameters. Used to
/// produce the pre-trained model; the caller captures the snapshot.
pub fn pretrain(init: &ParamSpace, spec: &ModelSpec, data: &ShiftedDataset, cfg: &TrainConfig) -> Result<ParamSpace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty pre-training split".into()));
    }
    let mut space = init.clone();
    let mut adam = AdamState::new(&space);
    let total = (cfg.steps_per_epoch(data.len()) * cfg.epochs) as u64;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            step += 1;
            let lr = schedule_lr(&cfg.optim, step, total)?;
            let batch = Batch {
                x: data.x.select_rows(chunk),
                y: chunk.iter().map(|&i| data.y[i]).collect(),
            };
            let (_, g) = loss_and_grad(&space, spec, &batch)?;
            adam_step(&mut space, &mut adam, &g, lr)?;
        }
    }
    Ok(space)
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// Best-ID-validation checkpoint (earliest on ties).
    pub selected: ParamSpace,
    pub best_epoch: usize,
    pub final_space: ParamSpace,
    pub val_curve: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// Per-step projection diagnostics (projection methods only).
    pub traces: Vec<StepTrace>,
    /// WiSE-FT interpolations of the selected checkpoint, one per beta.
    pub wise: Vec<(f64, ParamSpace)>,
}

impl FineTuneOutcome {
    /// Per-step mean projection strength.
    pub fn omega_means(&self) -> Vec<f64> {
        self.traces.iter().map(StepTrace::mean_omega).collect()
    }
}

/// Trains `start` on `train`, checkpointing the best validation accuracy
/// after each epoch.
pub fn fine_tune(
    start: &ParamSpace,
    spec: &ModelSpec,
    method: &Method,
    train: &ShiftedDataset,
    val: &ShiftedDataset,
    cfg: &TrainConfig,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    method.validate(cfg.epochs)?;
    if !start.has_snapshot() {
        return Err(Error::State("fine-tuning needs a captured pre-trained snapshot".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut space = start.clone();
    let base_trainable: Vec<bool> = space.groups().iter().map(|g| g.trainable).collect();
    let restore = |s: &mut ParamSpace| {
        for (i, &t) in base_trainable.iter().enumerate() {
            s.set_trainable(i, t);
        }
    };
    let mut adam = AdamState::new(&space);
    let digrap_cfg = method.digrap_config();
    let mut dstate = DigrapState::new(&space);
    let steps_per_epoch = cfg.steps_per_epoch(train.len());
    let total = (steps_per_epoch * cfg.epochs) as u64;

    let mut traces = Vec::new();
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamSpace)> = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        match method {
            Method::LinearProbe => probe_mask(&mut space, spec)?,
            Method::Lpft { lp_epochs } => match lpft_phase(epoch, *lp_epochs) {
                Phase::Probe => probe_mask(&mut space, spec)?,
                Phase::Full => restore(&mut space),
            },
            _ => {}
        }
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = schedule_lr(&cfg.optim, step, total)?;
            let batch = Batch {
                x: train.x.select_rows(chunk),
                y: chunk.iter().map(|&i| train.y[i]).collect(),
            };
            let (loss, g1) = loss_and_grad(&space, spec, &batch)?;
            epoch_loss += loss * chunk.len() as f64;
            match (method, &digrap_cfg) {
                (_, Some(dc)) => {
                    let out = digrap_step(&mut space, &mut adam, &mut dstate, dc, &g1, lr)?;
                    traces.push(out.trace);
                }
                (Method::L2sp { lambda }, _) => {
                    let g = l2sp_grad(&space, &g1, *lambda)?;
                    adam_step(&mut space, &mut adam, &g, lr)?;
                }
                (Method::MagProj { gamma }, _) => {
                    adam_step(&mut space, &mut adam, &g1, lr)?;
                    mag_project(&mut space, *gamma)?;
                }
                _ => adam_step(&mut space, &mut adam, &g1, lr)?,
            }
        }
        train_loss.push(epoch_loss / train.len() as f64);
        let acc = evaluate(&space, spec, val)?;
        val_curve.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, space.clone()));
        }
    }
    restore(&mut space);
    let (_, best_epoch, mut selected) = best.expect("at least one epoch");
    restore(&mut selected);
    let wise = match method {
        Method::WiseFt { betas } => {
            let theta0 = selected.snapshot_space()?;
            betas
                .iter()
                .map(|&b| Ok((b, wise_interpolate(&theta0, &selected, b)?)))
                .collect::<Result<Vec<_>>>()?
        }
        _ => Vec::new(),
    };
    Ok(FineTuneOutcome {
        selected,
        best_epoch,
        final_space: space,
        val_curve,
        train_loss,
        traces,
        wise,
    })
}

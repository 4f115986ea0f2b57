//! Base optimizers and the L2-SP gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramspace::{GradSet, ParamSpace};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one flat buffer per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(space: &ParamSpace) -> Self {
        let zeros: Vec<Vec<f64>> = space.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    CosineWithWarmup { warmup_steps: u64, min_lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub l2sp_lambda: f64,
    pub schedule: Schedule,
}

impl OptimConfig {
    pub fn constant(lr: f64) -> Self {
        OptimConfig {
            lr,
            l2sp_lambda: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.l2sp_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "L2-SP strength must be non-negative, got {}",
                self.l2sp_lambda
            )));
        }
        if let Schedule::CosineWithWarmup { min_lr, .. } = self.schedule {
            if !(0.0..=self.lr).contains(&min_lr) {
                return Err(Error::Config(format!(
                    "min_lr {min_lr} must lie in [0, lr={}]",
                    self.lr
                )));
            }
        }
        Ok(())
    }
}

fn ensure_finite(g: &GradSet) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite gradient".into()))
    }
}

/// One bias-corrected Adam step with step size `lr`. Frozen groups are left
/// alone, moments included. Nothing is mutated on error.
pub fn adam_step(space: &mut ParamSpace, state: &mut AdamState, g: &GradSet, lr: f64) -> Result<()> {
    space.check_layout(g)?;
    ensure_finite(g)?;
    if state.m.len() != space.len() {
        return Err(Error::Shape("optimizer state does not match parameter layout".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..space.len() {
        if !space.group(i).trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = space.values_mut(i);
        for (((th, mi), vi), gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g.groups[i]) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *th -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g` on trainable groups.
pub fn sgd_step(space: &mut ParamSpace, g: &GradSet, lr: f64) -> Result<()> {
    space.check_layout(g)?;
    ensure_finite(g)?;
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for i in 0..space.len() {
        if !space.group(i).trainable {
            continue;
        }
        for (th, gi) in space.values_mut(i).iter_mut().zip(&g.groups[i]) {
            *th -= lr * gi;
        }
    }
    Ok(())
}

/// `g̃₁ + λ·(θ − θ_ref)` per trainable group.
pub fn l2sp_grad(space: &ParamSpace, g1: &GradSet, lambda: f64) -> Result<GradSet> {
    space.check_layout(g1)?;
    if !space.has_snapshot() {
        return Err(Error::State("L2-SP needs a captured snapshot".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut out = g1.clone();
    for i in 0..space.len() {
        if !space.group(i).trainable {
            continue;
        }
        let reference = space.reference(i)?;
        for ((o, th), r) in out.groups[i].iter_mut().zip(space.values(i)).zip(reference.iter()) {
            *o += lambda * (th - r);
        }
    }
    Ok(out)
}

/// Learning rate at step `t` of `total`.
pub fn schedule_lr(config: &OptimConfig, t: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let t = t.min(total);
    Ok(match config.schedule {
        Schedule::Constant => config.lr,
        Schedule::CosineWithWarmup {
            warmup_steps,
            min_lr,
        } => {
            if t < warmup_steps {
                config.lr * t as f64 / warmup_steps as f64
            } else if total <= warmup_steps {
                config.lr
            } else {
                let progress = (t - warmup_steps) as f64 / (total - warmup_steps) as f64;
                min_lr + (config.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::ParamGroup;

    fn scalar_space(v: f64) -> ParamSpace {
        ParamSpace::from_groups(vec![ParamGroup::new("w", vec![1], vec![v]).unwrap()], 0).unwrap()
    }

    fn grad(v: &[f64]) -> GradSet {
        GradSet {
            groups: vec![v.to_vec()],
        }
    }

    #[test]
    fn adam_zero_gradient_only_advances_t() {
        let mut p = scalar_space(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &grad(&[0.0]), 0.01).unwrap();
        assert_eq!(p.values(0), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for (g, expect) in [(2.0, -0.01), (-2.0, 0.01)] {
            let mut p = scalar_space(0.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &mut s, &grad(&[g]), 0.01).unwrap();
            let exact = -0.01 * g / (g.abs() + 1e-8);
            assert!((p.values(0)[0] - exact).abs() < 1e-16);
            assert!((p.values(0)[0] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_rejects_non_finite_without_mutation() {
        let mut p = scalar_space(1.0);
        let mut s = AdamState::new(&p);
        let before = (p.clone(), s.clone());
        assert!(matches!(
            adam_step(&mut p, &mut s, &grad(&[f64::NAN]), 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!((p, s), before);
    }

    #[test]
    fn adam_skips_frozen_groups() {
        let mut p = scalar_space(1.0);
        p.set_trainable(0, false);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &grad(&[3.0]), 0.1).unwrap();
        assert_eq!(p.values(0), &[1.0]);
        assert_eq!(s.m[0], vec![0.0]);
    }

    #[test]
    fn sgd_cases() {
        let mut p = scalar_space(1.0);
        sgd_step(&mut p, &grad(&[2.0]), 0.5).unwrap();
        assert_eq!(p.values(0), &[0.0]);
        sgd_step(&mut p, &grad(&[0.0]), 0.5).unwrap();
        assert_eq!(p.values(0), &[0.0]);

        let mut a = scalar_space(0.25);
        let mut b = scalar_space(0.25);
        sgd_step(&mut a, &grad(&[0.5]), 0.5).unwrap();
        sgd_step(&mut a, &grad(&[0.5]), 0.5).unwrap();
        sgd_step(&mut b, &grad(&[1.0]), 0.5).unwrap();
        assert_eq!(a.values(0), b.values(0));
    }

    #[test]
    fn l2sp_cases() {
        let mut p = ParamSpace::from_groups(
            vec![ParamGroup::new("w", vec![2], vec![0.0, 0.0]).unwrap()],
            0,
        )
        .unwrap();
        let g1 = GradSet {
            groups: vec![vec![1.0, -1.0]],
        };
        assert!(matches!(l2sp_grad(&p, &g1, 0.5), Err(Error::State(_))));
        p.capture_snapshot().unwrap();
        assert_eq!(l2sp_grad(&p, &g1, 3.0).unwrap(), g1);
        p.values_mut(0)[1] = 1.0;
        assert_eq!(l2sp_grad(&p, &g1, 0.0).unwrap(), g1);
        assert_eq!(l2sp_grad(&p, &g1, 0.5).unwrap().groups[0], vec![1.0, -0.5]);
    }

    #[test]
    fn schedules() {
        let c = OptimConfig::constant(0.3);
        assert_eq!(schedule_lr(&c, 17, 100).unwrap(), 0.3);
        assert!(schedule_lr(&c, 0, 0).is_err());

        let cos = OptimConfig {
            lr: 1e-3,
            l2sp_lambda: 0.0,
            schedule: Schedule::CosineWithWarmup {
                warmup_steps: 10,
                min_lr: 1e-5,
            },
        };
        assert_eq!(schedule_lr(&cos, 10, 100).unwrap(), 1e-3);
        assert_eq!(schedule_lr(&cos, 0, 100).unwrap(), 0.0);
        assert!((schedule_lr(&cos, 100, 100).unwrap() - 1e-5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in 10..=100 {
            let lr = schedule_lr(&cos, t, 100).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::constant(0.0).validate().is_err());
        let bad = OptimConfig {
            lr: 1e-3,
            l2sp_lambda: 0.0,
            schedule: Schedule::CosineWithWarmup {
                warmup_steps: 0,
                min_lr: 1.0,
            },
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn second_moment_stays_nonnegative(
                gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40)
            ) {
                let mut p = ParamSpace::from_groups(
                    vec![ParamGroup::new("w", vec![3], vec![0.0; 3]).unwrap()], 0).unwrap();
                let mut s = AdamState::new(&p);
                for g in &gs {
                    adam_step(&mut p, &mut s, &GradSet { groups: vec![g.clone()] }, 1e-2).unwrap();
                    prop_assert!(s.v[0].iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn l2sp_at_snapshot_is_identity(
                vals in prop::collection::vec(-5.0f64..5.0, 4),
                g in prop::collection::vec(-5.0f64..5.0, 4),
                lambda in 0.0f64..10.0,
            ) {
                let mut p = ParamSpace::from_groups(
                    vec![ParamGroup::new("w", vec![4], vals).unwrap()], 0).unwrap();
                p.capture_snapshot().unwrap();
                let g1 = GradSet { groups: vec![g] };
                let folded = l2sp_grad(&p, &g1, lambda).unwrap();
                prop_assert_eq!(&folded, &g1);
                let (mut a, mut b) = (p.clone(), p.clone());
                let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
                adam_step(&mut a, &mut sa, &folded, 1e-3).unwrap();
                adam_step(&mut b, &mut sb, &g1, 1e-3).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}

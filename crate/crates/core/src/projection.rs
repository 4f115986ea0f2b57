//! Directional gradient projection with a trainable projection strength.
//!
//! For every parameter group the task gradient `g̃₁` is compared with the
//! regularization gradient `g̃₂ = θ − θ_ref`. When they conflict
//! (`g̃₁·g̃₂ < 0`) the component of `g̃₁` along `g̃₂` is removed with strength
//! `ω ∈ [0, 1]`:
//!
//! ```text
//! g = g̃₁ − ω · (g̃₁·g̃₂ / ‖g̃₂‖²) · g̃₂
//! ```
//!
//! which is L2-SP with a per-group, per-step `λ = −ω·g̃₁·g̃₂/‖g̃₂‖²`.
//! Aligned gradients pass through untouched.
//!
//! `ω` starts at zero and is learned online. Because the previous update was
//! `θ_{t−1} = θ̃_{t−1} + α·ω·proj_{t−1}`, the derivative of the loss at
//! `θ_{t−1}` with respect to `ω` is `α·g̃_{t,1}·proj_{t−1}`. That value is
//! normalized to a cosine in `[−1, 1]` and fed to a scalar Adam with its own
//! learning rate `μ`; the result is clamped to `[0, 1]`. The assembled
//! gradient then goes through one regular Adam step on `θ`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::paramspace::{dot_unchecked, group_norm_sq, GradSet, ParamSpace};

/// `‖g̃₂‖²` at or below this is treated as "no reference gap".
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DigrapConfig {
    /// Learning rate of the projection strength.
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub norm_eps: f64,
    /// Pins every group's strength to this value; `mu` is then ignored.
    pub fixed_omega: Option<f64>,
}

impl Default for DigrapConfig {
    fn default() -> Self {
        DigrapConfig {
            mu: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            norm_eps: NORM_EPS,
            fixed_omega: None,
        }
    }
}

impl DigrapConfig {
    pub fn trainable(mu: f64) -> Self {
        DigrapConfig {
            mu,
            ..Default::default()
        }
    }

    pub fn fixed(omega: f64) -> Self {
        DigrapConfig {
            fixed_omega: Some(omega),
            ..Default::default()
        }
    }

    /// Strength pinned at one: full orthogonal projection on conflict.
    pub fn full_projection() -> Self {
        Self::fixed(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be a finite non-negative number, got {}", self.mu)));
        }
        if let Some(w) = self.fixed_omega {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("fixed omega {w} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("omega Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-group projection state.
#[derive(Debug, Clone, PartialEq)]
pub struct DigrapLayerState {
    pub omega: f64,
    pub m_omega: f64,
    pub v_omega: f64,
    /// Number of strength updates applied so far (drives bias correction).
    pub updates: u64,
    pub prev_proj: Vec<f64>,
    pub prev_lr: f64,
}

impl DigrapLayerState {
    pub fn new(len: usize) -> Self {
        DigrapLayerState {
            omega: 0.0,
            m_omega: 0.0,
            v_omega: 0.0,
            updates: 0,
            prev_proj: vec![0.0; len],
            prev_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigrapState {
    pub layers: Vec<DigrapLayerState>,
    /// Completed steps.
    pub t: u64,
}

impl DigrapState {
    pub fn new(space: &ParamSpace) -> Self {
        DigrapState {
            layers: space.groups().iter().map(|g| DigrapLayerState::new(g.len())).collect(),
            t: 0,
        }
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.omega).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// The gradient to apply.
    pub g: Vec<f64>,
    pub conflicting: bool,
    /// Component of `g̃₁` along `g̃₂` (zero when `g̃₂` vanishes).
    pub proj: Vec<f64>,
    pub dot: f64,
    pub reg_norm_sq: f64,
}

/// `θ − θ_ref`.
pub fn reg_gradient(values: &[f64], reference: &[f64]) -> Vec<f64> {
    crate::paramspace::reference_gap(values, reference)
}

pub fn project_gradient(g1: &[f64], g2: &[f64], omega: f64) -> Result<Projection> {
    project_gradient_with(g1, g2, omega, NORM_EPS)
}

pub fn project_gradient_with(g1: &[f64], g2: &[f64], omega: f64, norm_eps: f64) -> Result<Projection> {
    if g1.len() != g2.len() {
        return Err(Error::Shape(format!(
            "task gradient has {} entries, regularization gradient {}",
            g1.len(),
            g2.len()
        )));
    }
    let dot = dot_unchecked(g1, g2);
    let reg_norm_sq = group_norm_sq(g2);
    if reg_norm_sq <= norm_eps {
        return Ok(Projection {
            g: g1.to_vec(),
            conflicting: false,
            proj: vec![0.0; g1.len()],
            dot,
            reg_norm_sq,
        });
    }
    let coef = dot / reg_norm_sq;
    let proj: Vec<f64> = g2.iter().map(|v| coef * v).collect();
    if dot >= 0.0 {
        return Ok(Projection {
            g: g1.to_vec(),
            conflicting: false,
            proj,
            dot,
            reg_norm_sq,
        });
    }
    let g = if omega == 0.0 {
        g1.to_vec()
    } else {
        g1.iter().zip(&proj).map(|(a, p)| a - omega * p).collect()
    };
    Ok(Projection {
        g,
        conflicting: true,
        proj,
        dot,
        reg_norm_sq,
    })
}

/// The L2-SP strength that reproduces a projection step: zero unless the
/// gradients conflict.
pub fn equivalent_lambda(dot: f64, reg_norm_sq: f64, omega: f64, conflicting: bool) -> f64 {
    if conflicting {
        -omega * dot / reg_norm_sq
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypergradient {
    pub raw: f64,
    pub normalized: f64,
}

/// Derivative of the loss w.r.t. the strength used on the previous step,
/// `prev_lr · g̃_{t,1}·proj_{t−1}`, and its cosine normalization.
pub fn hypergrad_omega(g_t1: &[f64], prev_proj: &[f64], prev_lr: f64, norm_eps: f64) -> Result<Hypergradient> {
    if g_t1.len() != prev_proj.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, stored projection {}",
            g_t1.len(),
            prev_proj.len()
        )));
    }
    let raw = prev_lr * dot_unchecked(g_t1, prev_proj);
    let scale = prev_lr * group_norm_sq(g_t1).sqrt() * group_norm_sq(prev_proj).sqrt() + norm_eps;
    Ok(Hypergradient {
        raw,
        normalized: raw / scale,
    })
}

/// One scalar Adam step on the strength followed by a clamp to `[0, 1]`.
/// Moments track the raw signal even while the strength sits on a bound.
pub fn omega_update(state: &mut DigrapLayerState, grad: f64, cfg: &DigrapConfig) {
    if let Some(w) = cfg.fixed_omega {
        state.omega = w;
        return;
    }
    state.updates += 1;
    let k = state.updates as i32;
    state.m_omega = cfg.beta1 * state.m_omega + (1.0 - cfg.beta1) * grad;
    state.v_omega = cfg.beta2 * state.v_omega + (1.0 - cfg.beta2) * grad * grad;
    let m_hat = state.m_omega / (1.0 - cfg.beta1.powi(k));
    let v_hat = state.v_omega / (1.0 - cfg.beta2.powi(k));
    let proposed = state.omega - cfg.mu * m_hat / (v_hat.sqrt() + cfg.eps);
    state.omega = proposed.clamp(0.0, 1.0);
}

/// Per-group diagnostics for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub group: String,
    pub omega: f64,
    pub lambda_equiv: f64,
    pub conflicting: bool,
    pub dot: f64,
    pub grad_norm: f64,
    pub reg_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub rows: Vec<TraceRow>,
}

impl StepTrace {
    /// Mean strength across the traced groups.
    pub fn mean_omega(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.omega).sum::<f64>() / self.rows.len() as f64
    }
}

/// Output of [`digrap_step`] beyond the mutated state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub trace: StepTrace,
    /// The gradient handed to Adam.
    pub assembled: GradSet,
}

/// One step of Adam with trainable directional gradient projection.
///
/// Per trainable group: form `g̃₂`, project, update `ω` from the stored
/// projection of the previous step (from the second step on), pick the
/// branch with the fresh `ω`, and remember this step's projection and
/// learning rate. Then a single Adam step is taken on the assembled
/// gradient. All state is left untouched if anything fails.
pub fn digrap_step(
    space: &mut ParamSpace,
    adam: &mut AdamState,
    state: &mut DigrapState,
    cfg: &DigrapConfig,
    g1: &GradSet,
    lr: f64,
) -> Result<StepOutcome> {
    cfg.validate()?;
    space.check_layout(g1)?;
    if !g1.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if state.layers.len() != space.len() {
        return Err(Error::Shape("projection state does not match parameter layout".into()));
    }
    let t = state.t + 1;
    let mut next_layers = state.layers.clone();
    let mut assembled = g1.clone();
    let mut rows = Vec::with_capacity(space.num_trainable());
    for (i, layer) in next_layers.iter_mut().enumerate() {
        let group = space.group(i);
        if !group.trainable {
            continue;
        }
        let g1_i = &g1.groups[i];
        let g2 = space.reg_gradient(i)?;
        if t >= 2 {
            let hg = hypergrad_omega(g1_i, &layer.prev_proj, layer.prev_lr, cfg.norm_eps)?;
            omega_update(layer, hg.normalized, cfg);
        } else {
            layer.omega = cfg.fixed_omega.unwrap_or(0.0);
        }
        let p = project_gradient_with(g1_i, &g2, layer.omega, cfg.norm_eps)?;
        rows.push(TraceRow {
            group: group.name.clone(),
            omega: layer.omega,
            lambda_equiv: equivalent_lambda(p.dot, p.reg_norm_sq, layer.omega, p.conflicting),
            conflicting: p.conflicting,
            dot: p.dot,
            grad_norm: group_norm_sq(g1_i).sqrt(),
            reg_norm: p.reg_norm_sq.sqrt(),
        });
        layer.prev_proj = p.proj;
        layer.prev_lr = lr;
        assembled.groups[i] = p.g;
    }
    adam_step(space, adam, &assembled, lr)?;
    state.layers = next_layers;
    state.t = t;
    Ok(StepOutcome {
        trace: StepTrace { step: t, rows },
        assembled,
    })
}

pub const TRACE_HEADER: &str = "step,group_name,omega,lambda_equiv,conflicting,dot,grad_norm,reg_norm";

/// Writes traces as CSV, one row per (step, group).
pub fn write_trace_csv<W: Write>(out: W, traces: &[StepTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER.split(','))?;
    for tr in traces {
        for r in &tr.rows {
            w.write_record([
                tr.step.to_string(),
                r.group.clone(),
                r.omega.to_string(),
                r.lambda_equiv.to_string(),
                u8::from(r.conflicting).to_string(),
                r.dot.to_string(),
                r.grad_norm.to_string(),
                r.reg_norm.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<trace csv>", e))?;
    Ok(())
}

pub fn save_trace_csv(path: &Path, traces: &[StepTrace]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(std::io::BufWriter::new(f), traces)
}

//! Small dense classifiers with exact, hand-written backpropagation.
//!
//! A model is a stack of affine layers stored in a [`ParamSpace`] as
//! `layer{i}.weight` (out × in) and `layer{i}.bias`, with ReLU between
//! hidden layers and softmax cross-entropy on top. An optional low-rank
//! adapter replaces one layer's weight by `W + B·A`, where only `A` and `B`
//! train and both are regularized toward the origin.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::paramspace::{GradSet, ParamGroup, ParamSpace, ReferenceMode};
use crate::rng;

/// Coordinates checked per group by the finite-difference oracles before
/// switching to a seeded subsample.
pub const FD_SUBSAMPLE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub target_layer: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input dimension, hidden widths, number of classes.
    pub layer_sizes: Vec<usize>,
    pub adapter: Option<AdapterSpec>,
}

impl ModelSpec {
    pub fn linear(input: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            layer_sizes: vec![input, classes],
            adapter: None,
        }
    }

    pub fn mlp(layer_sizes: &[usize]) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            layer_sizes: layer_sizes.to_vec(),
            adapter: None,
        }
    }

    pub fn with_adapter(mut self, target_layer: usize, rank: usize) -> Self {
        self.adapter = Some(AdapterSpec { target_layer, rank });
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Linear if self.layer_sizes.len() != 2 => {
                return Err(Error::Config(format!(
                    "linear model needs exactly [input, classes], got {:?}",
                    self.layer_sizes
                )))
            }
            ModelKind::Mlp if self.layer_sizes.len() < 3 => {
                return Err(Error::Config(format!(
                    "mlp needs at least one hidden layer, got {:?}",
                    self.layer_sizes
                )))
            }
            _ => {}
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.classes() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if let Some(a) = self.adapter {
            if a.target_layer >= self.num_layers() {
                return Err(Error::Config(format!(
                    "adapter targets layer {} but the model has {}",
                    a.target_layer,
                    self.num_layers()
                )));
            }
            let (fan_in, fan_out) = self.layer_dims(a.target_layer);
            if a.rank == 0 || a.rank >= fan_in.min(fan_out) {
                return Err(Error::Config(format!(
                    "adapter rank {} must be in [1, {})",
                    a.rank,
                    fan_in.min(fan_out)
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty layer sizes")
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    /// Fresh parameters for this model (without an adapter).
    pub fn init_params(&self, seed: u64) -> Result<ParamSpace> {
        self.validate()?;
        ParamSpace::init(&self.layer_sizes, seed)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    pub logits: Matrix,
    pub features: Matrix,
}

/// Attaches a zero-initialized low-rank adapter to `spec.adapter`'s target
/// layer. `B` starts at zero so the adapted model computes exactly the base
/// function; base groups are frozen and adapter groups use the origin as
/// their regularization reference.
pub fn attach_adapter(space: &mut ParamSpace, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    let a = spec
        .adapter
        .ok_or_else(|| Error::Config("model spec has no adapter".into()))?;
    check_base_layout(space, spec)?;
    let (fan_in, fan_out) = spec.layer_dims(a.target_layer);
    let mut r = rng::stream(space.seed(), "adapter");
    let scale = (1.0 / fan_in as f64).sqrt();
    let a_vals: Vec<f64> = (0..a.rank * fan_in)
        .map(|_| scale * rng::gaussian(&mut r))
        .collect();
    let mut ga = ParamGroup::new(adapter_a_name(a.target_layer), vec![a.rank, fan_in], a_vals)?;
    let mut gb = ParamGroup::new(
        adapter_b_name(a.target_layer),
        vec![fan_out, a.rank],
        vec![0.0; fan_out * a.rank],
    )?;
    ga.reference_mode = ReferenceMode::Origin;
    gb.reference_mode = ReferenceMode::Origin;
    space.set_all_trainable(false);
    space.push_group(ga)?;
    space.push_group(gb)?;
    Ok(())
}

fn adapter_a_name(l: usize) -> String {
    format!("layer{l}.adapter_a")
}

fn adapter_b_name(l: usize) -> String {
    format!("layer{l}.adapter_b")
}

fn check_base_layout(space: &ParamSpace, spec: &ModelSpec) -> Result<()> {
    let layers = spec.num_layers();
    if space.len() < 2 * layers {
        return Err(Error::Shape(format!(
            "model needs {} groups, parameter space has {}",
            2 * layers,
            space.len()
        )));
    }
    for l in 0..layers {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let w = space.group(2 * l);
        let b = space.group(2 * l + 1);
        if w.shape != [fan_out, fan_in] || b.shape != [fan_out] {
            return Err(Error::Shape(format!(
                "layer {l} expects weight ({fan_out}, {fan_in}) and bias ({fan_out},), found {:?} and {:?}",
                w.shape, b.shape
            )));
        }
    }
    Ok(())
}

/// Resolved adapter group indices.
struct AdapterIdx {
    layer: usize,
    rank: usize,
    a: usize,
    b: usize,
}

fn adapter_indices(space: &ParamSpace, spec: &ModelSpec) -> Result<Option<AdapterIdx>> {
    let Some(ad) = spec.adapter else {
        return Ok(None);
    };
    let a = space
        .index_of(&adapter_a_name(ad.target_layer))
        .ok_or_else(|| Error::State("adapter groups missing; call attach_adapter".into()))?;
    let b = space
        .index_of(&adapter_b_name(ad.target_layer))
        .ok_or_else(|| Error::State("adapter groups missing; call attach_adapter".into()))?;
    Ok(Some(AdapterIdx {
        layer: ad.target_layer,
        rank: ad.rank,
        a,
        b,
    }))
}

/// Everything the backward pass needs from the forward pass.
struct Tape {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Matrix>,
    /// Pre-activations of hidden layers, for the ReLU mask.
    hidden_pre: Vec<Matrix>,
    logits: Matrix,
    weights: Vec<Vec<f64>>,
}

fn check_input(spec: &ModelSpec, x: &Matrix) -> Result<()> {
    if x.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.cols(),
            spec.input_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite input".into()));
    }
    Ok(())
}

fn check_labels(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let k = spec.classes();
    if let Some(&bad) = batch.y.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

fn run_forward(space: &ParamSpace, spec: &ModelSpec, x: &Matrix) -> Result<Tape> {
    spec.validate()?;
    check_base_layout(space, spec)?;
    check_input(spec, x)?;
    let adapter = adapter_indices(space, spec)?;
    let layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut hidden_pre = Vec::with_capacity(layers.saturating_sub(1));
    let mut weights = Vec::with_capacity(layers);
    let mut a = x.clone();
    for l in 0..layers {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let mut w = space.values(2 * l).to_vec();
        if let Some(ad) = adapter.as_ref().filter(|ad| ad.layer == l) {
            let ba = crate::linalg::matmul(
                space.values(ad.b),
                space.values(ad.a),
                fan_out,
                ad.rank,
                fan_in,
            );
            for (wi, d) in w.iter_mut().zip(&ba) {
                *wi += d;
            }
        }
        let z = a.affine(&w, space.values(2 * l + 1), fan_out);
        weights.push(w);
        let next = if l + 1 < layers {
            let mut h = z.clone();
            h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            hidden_pre.push(z);
            h
        } else {
            z
        };
        inputs.push(std::mem::replace(&mut a, next));
    }
    Ok(Tape {
        inputs,
        hidden_pre,
        logits: a,
        weights,
    })
}

/// Mean softmax cross-entropy, stabilized with log-sum-exp.
pub fn cross_entropy(logits: &Matrix, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.iter_rows().zip(y) {
        total += log_sum_exp(row) - row[label];
    }
    total / y.len() as f64
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// `(softmax − onehot) / n`, the gradient of the mean loss w.r.t. logits.
fn logit_grad(logits: &Matrix, y: &[usize]) -> Matrix {
    let n = y.len() as f64;
    let mut g = logits.clone();
    for (i, &label) in y.iter().enumerate() {
        let row = g.row_mut(i);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[label] -= 1.0 / n;
    }
    g
}

pub fn forward_loss(space: &ParamSpace, spec: &ModelSpec, batch: &Batch) -> Result<ForwardOutput> {
    check_labels(spec, batch)?;
    let mut tape = run_forward(space, spec, &batch.x)?;
    let loss = cross_entropy(&tape.logits, &batch.y);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let features = tape.inputs.pop().expect("at least one layer");
    Ok(ForwardOutput {
        loss,
        logits: tape.logits,
        features,
    })
}

pub fn logits(space: &ParamSpace, spec: &ModelSpec, x: &Matrix) -> Result<Matrix> {
    Ok(run_forward(space, spec, x)?.logits)
}

/// Arg-max class per row; ties resolve to the lowest index.
pub fn predict(space: &ParamSpace, spec: &ModelSpec, x: &Matrix) -> Result<Vec<usize>> {
    let z = logits(space, spec, x)?;
    Ok(z.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Penultimate activations (the raw input for a linear model).
pub fn extract_features(space: &ParamSpace, spec: &ModelSpec, x: &Matrix) -> Result<Matrix> {
    let mut tape = run_forward(space, spec, x)?;
    Ok(tape.inputs.pop().expect("at least one layer"))
}

/// Loss together with its exact gradient. Frozen groups get zeros.
pub fn loss_and_grad(space: &ParamSpace, spec: &ModelSpec, batch: &Batch) -> Result<(f64, GradSet)> {
    let (loss, grads, _) = backprop(space, spec, batch, false)?;
    Ok((loss, grads))
}

pub fn backward(space: &ParamSpace, spec: &ModelSpec, batch: &Batch) -> Result<GradSet> {
    Ok(loss_and_grad(space, spec, batch)?.1)
}

/// ∂loss/∂x, one row per sample.
pub fn input_grad(space: &ParamSpace, spec: &ModelSpec, batch: &Batch) -> Result<Matrix> {
    let (_, _, dx) = backprop(space, spec, batch, true)?;
    Ok(dx.expect("requested input gradient"))
}

fn backprop(
    space: &ParamSpace,
    spec: &ModelSpec,
    batch: &Batch,
    want_input: bool,
) -> Result<(f64, GradSet, Option<Matrix>)> {
    check_labels(spec, batch)?;
    let tape = run_forward(space, spec, &batch.x)?;
    let loss = cross_entropy(&tape.logits, &batch.y);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let adapter = adapter_indices(space, spec)?;
    let mut grads = space.zero_grad();
    let mut dz = logit_grad(&tape.logits, &batch.y);
    let layers = spec.num_layers();
    let mut dx = None;
    for l in (0..layers).rev() {
        let (fan_in, fan_out) = spec.layer_dims(l);
        let adapted = adapter.as_ref().filter(|ad| ad.layer == l);
        let w_trainable = space.group(2 * l).trainable;
        let need_weight_grad =
            w_trainable || adapted.is_some_and(|ad| space.group(ad.a).trainable || space.group(ad.b).trainable);
        if need_weight_grad {
            let gw = dz.t_matmul_flat(&tape.inputs[l]);
            if let Some(ad) = adapted {
                if space.group(ad.b).trainable {
                    // dB = G · Aᵀ
                    let a = space.values(ad.a);
                    let gb = &mut grads.groups[ad.b];
                    for o in 0..fan_out {
                        for r in 0..ad.rank {
                            let mut acc = 0.0;
                            for i in 0..fan_in {
                                acc += gw[o * fan_in + i] * a[r * fan_in + i];
                            }
                            gb[o * ad.rank + r] = acc;
                        }
                    }
                }
                if space.group(ad.a).trainable {
                    // dA = Bᵀ · G
                    let b = space.values(ad.b);
                    let ga = &mut grads.groups[ad.a];
                    for r in 0..ad.rank {
                        for o in 0..fan_out {
                            let bv = b[o * ad.rank + r];
                            if bv == 0.0 {
                                continue;
                            }
                            for i in 0..fan_in {
                                ga[r * fan_in + i] += bv * gw[o * fan_in + i];
                            }
                        }
                    }
                }
            }
            if w_trainable {
                grads.groups[2 * l] = gw;
            }
        }
        if space.group(2 * l + 1).trainable {
            let gb = &mut grads.groups[2 * l + 1];
            for row in dz.iter_rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        if l > 0 || want_input {
            let mut da = dz.matmul_flat(&tape.weights[l], fan_in);
            if l > 0 {
                let pre = &tape.hidden_pre[l - 1];
                for (d, &z) in da.data_mut().iter_mut().zip(pre.data()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = da;
            } else {
                dx = Some(da);
            }
        }
    }
    Ok((loss, grads, dx))
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

fn coordinates(len: usize, seed: u64, tag: &str) -> Vec<usize> {
    if len <= FD_SUBSAMPLE {
        (0..len).collect()
    } else {
        let mut r = rng::stream(seed, tag);
        let mut idx = index::sample(&mut r, len, FD_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Max relative error between [`backward`] and central differences over
/// every trainable coordinate (seeded subsample for large groups). Frozen
/// groups are skipped: both sides are zero by contract.
pub fn grad_check(space: &ParamSpace, spec: &ModelSpec, batch: &Batch, h: f64) -> Result<f64> {
    check_step(h)?;
    let analytic = backward(space, spec, batch)?;
    let mut probe = space.clone();
    let mut worst: f64 = 0.0;
    for gi in 0..space.len() {
        if !space.group(gi).trainable {
            continue;
        }
        let tag = format!("gradcheck/{}", space.group(gi).name);
        for c in coordinates(space.group(gi).len(), space.seed(), &tag) {
            let orig = probe.values(gi)[c];
            probe.values_mut(gi)[c] = orig + h;
            let plus = forward_loss(&probe, spec, batch)?.loss;
            probe.values_mut(gi)[c] = orig - h;
            let minus = forward_loss(&probe, spec, batch)?.loss;
            probe.values_mut(gi)[c] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic.groups[gi][c]));
        }
    }
    Ok(worst)
}

/// Same as [`grad_check`] for [`input_grad`].
pub fn input_grad_check(space: &ParamSpace, spec: &ModelSpec, batch: &Batch, h: f64) -> Result<f64> {
    check_step(h)?;
    let analytic = input_grad(space, spec, batch)?;
    let mut probe = batch.clone();
    let mut worst: f64 = 0.0;
    for c in coordinates(batch.x.data().len(), space.seed(), "gradcheck/input") {
        let orig = probe.x.data()[c];
        probe.x.data_mut()[c] = orig + h;
        let plus = forward_loss(space, spec, &probe)?.loss;
        probe.x.data_mut()[c] = orig - h;
        let minus = forward_loss(space, spec, &probe)?.loss;
        probe.x.data_mut()[c] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(fd, analytic.data()[c]));
    }
    Ok(worst)
}

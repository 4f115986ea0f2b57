//! Synthetic distribution-shift benchmarks.
//!
//! All data comes from one isotropic Gaussian mixture whose class means sit
//! on a sphere of radius `R`. The pre-training split is the raw mixture; the
//! in-distribution task is the mixture rotated by a small angle, and the
//! evaluation tiers apply larger rotations, additive noise, label-prior
//! skew, or a one-step sign attack against the fine-tuned model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{input_grad, Batch, ModelSpec};
use crate::paramspace::ParamSpace;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_pretrain: usize,
    pub n_id_train: usize,
    pub n_id_val: usize,
    pub n_test: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            dim: 16,
            classes: 8,
            n_pretrain: 4000,
            n_id_train: 500,
            n_id_val: 1000,
            n_test: 1000,
            radius: 4.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        for (name, n) in [
            ("n_pretrain", self.n_pretrain),
            ("n_id_train", self.n_id_train),
            ("n_id_val", self.n_id_val),
            ("n_test", self.n_test),
        ] {
            if n < self.classes {
                return Err(Error::Config(format!(
                    "{name}={n} is smaller than the number of classes ({})",
                    self.classes
                )));
            }
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }

    /// Class means, uniform on the radius-`R` sphere, fixed by the task seed.
    pub fn class_means(&self) -> Matrix {
        let mut r = rng::stream(self.seed, "class-means");
        let mut m = Matrix::zeros(self.classes, self.dim);
        for k in 0..self.classes {
            let row = m.row_mut(k);
            loop {
                row.iter_mut().for_each(|v| *v = rng::gaussian(&mut r));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|v| *v *= self.radius / norm);
                    break;
                }
            }
        }
        m
    }

    pub fn uniform_priors(&self) -> Vec<f64> {
        vec![1.0 / self.classes as f64; self.classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Pretrain,
    Id,
    NearOod,
    FarOod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shift {
    Rotation { degrees: f64 },
    Corruption { sigma: f64 },
    LabelPrior { dirichlet_alpha: f64 },
    Adversarial { eps: f64 },
}

impl Shift {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shift::Rotation { degrees } => (0.0..=180.0).contains(&degrees),
            Shift::Corruption { sigma } => sigma >= 0.0,
            Shift::LabelPrior { dirichlet_alpha } => dirichlet_alpha > 0.0,
            Shift::Adversarial { eps } => eps >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shift {self:?}")))
        }
    }
}

/// How a dataset was produced: the shifts applied in order, and its tier.
/// An empty shift list means the unshifted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub shifts: Vec<Shift>,
    pub tier: Tier,
}

impl ShiftSpec {
    pub fn none(tier: Tier) -> Self {
        ShiftSpec {
            shifts: Vec::new(),
            tier,
        }
    }

    pub fn with(mut self, shift: Shift) -> Self {
        self.shifts.push(shift);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedDataset {
    pub name: String,
    pub x: Matrix,
    pub y: Vec<usize>,
    pub priors: Vec<f64>,
    pub spec: ShiftSpec,
    pub provenance_seed: u64,
}

impl ShiftedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

fn check_simplex(priors: &[f64], classes: usize) -> Result<()> {
    if priors.len() != classes {
        return Err(Error::Config(format!(
            "prior has {} entries for {classes} classes",
            priors.len()
        )));
    }
    if priors.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Config("prior has negative or NaN entries".into()));
    }
    let s: f64 = priors.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("prior sums to {s}, not 1")));
    }
    Ok(())
}

/// `n` draws from the task mixture with class probabilities `priors`.
pub fn gen_gaussian_mixture(task: &TaskSpec, n: usize, priors: &[f64], seed: u64) -> Result<ShiftedDataset> {
    check_simplex(priors, task.classes)?;
    let means = task.class_means();
    let mut r = rng::stream(seed, "mixture");
    let mut x = Matrix::zeros(n, task.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut label = priors.len() - 1;
        for (k, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                label = k;
                break;
            }
        }
        for (xv, mv) in x.row_mut(i).iter_mut().zip(means.row(label)) {
            *xv = mv + rng::gaussian(&mut r);
        }
        y.push(label);
    }
    Ok(ShiftedDataset {
        name: "mixture".into(),
        x,
        y,
        priors: priors.to_vec(),
        spec: ShiftSpec::none(Tier::Pretrain),
        provenance_seed: seed,
    })
}

/// Givens rotation by `degrees` on each coordinate pair (0,1), (2,3), …;
/// with an odd dimension the last coordinate is left as is.
pub fn apply_rotation(x: &Matrix, degrees: f64) -> Matrix {
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let src = x.row(i);
        let dst = out.row_mut(i);
        for p in 0..src.len() / 2 {
            let (a, b) = (src[2 * p], src[2 * p + 1]);
            dst[2 * p] = c * a - s * b;
            dst[2 * p + 1] = s * a + c * b;
        }
    }
    out
}

/// `x + σ·N(0, I)`.
pub fn apply_corruption(x: &Matrix, sigma: f64, seed: u64) -> Matrix {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut r = rng::stream(seed, "corruption");
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += sigma * rng::gaussian(&mut r));
    out
}

/// A draw from the symmetric Dirichlet with concentration `alpha`.
pub fn sample_dirichlet(classes: usize, alpha: f64, seed: u64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::stream(seed, "dirichlet");
    loop {
        let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut p: Vec<f64> = draws.iter().map(|g| g / total).collect();
            // absorb rounding so the simplex check is exact
            let s: f64 = p[..classes - 1].iter().sum();
            p[classes - 1] = (1.0 - s).max(0.0);
            return Ok(p);
        }
    }
}

/// Label shift: a skewed prior drawn from a symmetric Dirichlet, with the
/// class-conditional distributions left unchanged.
pub fn apply_label_prior(task: &TaskSpec, dirichlet_alpha: f64, n: usize, seed: u64) -> Result<ShiftedDataset> {
    let priors = sample_dirichlet(task.classes, dirichlet_alpha, seed)?;
    let mut ds = gen_gaussian_mixture(task, n, &priors, seed)?;
    ds.spec = ShiftSpec::none(Tier::NearOod).with(Shift::LabelPrior { dirichlet_alpha });
    Ok(ds)
}

/// One-step sign attack: `x + ε·sign(∂loss/∂x)` against the given model.
pub fn adversarial_perturb(
    space: &ParamSpace,
    spec: &ModelSpec,
    dataset: &ShiftedDataset,
    eps: f64,
) -> Result<ShiftedDataset> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("attack radius must be non-negative, got {eps}")));
    }
    let mut out = dataset.clone();
    out.spec.shifts.push(Shift::Adversarial { eps });
    if eps == 0.0 || dataset.is_empty() {
        return Ok(out);
    }
    let g = input_grad(space, spec, &dataset.batch())?;
    for (xv, gv) in out.x.data_mut().iter_mut().zip(g.data()) {
        if *gv > 0.0 {
            *xv += eps;
        } else if *gv < 0.0 {
            *xv -= eps;
        }
    }
    Ok(out)
}

/// Shift magnitudes of the evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub id_rotation: f64,
    pub near_rotations: Vec<f64>,
    pub label_alpha: f64,
    pub adversarial_eps: f64,
    pub far_rotation: f64,
    pub far_rotation_sigma: f64,
    pub far_sigma: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            id_rotation: 15.0,
            near_rotations: vec![30.0, 45.0],
            label_alpha: 0.3,
            adversarial_eps: 0.5,
            far_rotation: 90.0,
            far_rotation_sigma: 1.0,
            far_sigma: 2.0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let mut shifts = vec![
            Shift::Rotation { degrees: self.id_rotation },
            Shift::LabelPrior { dirichlet_alpha: self.label_alpha },
            Shift::Adversarial { eps: self.adversarial_eps },
            Shift::Rotation { degrees: self.far_rotation },
            Shift::Corruption { sigma: self.far_rotation_sigma },
            Shift::Corruption { sigma: self.far_sigma },
        ];
        shifts.extend(self.near_rotations.iter().map(|&degrees| Shift::Rotation { degrees }));
        shifts.iter().try_for_each(Shift::validate)
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}").replace('.', "p")
    }
}

pub const PRETRAIN: &str = "pretrain";
pub const ID_TRAIN: &str = "id_train";
pub const ID_VAL: &str = "id_val";
pub const ADVERSARIAL: &str = "near_adversarial";

/// The adversarial split cannot exist before a model is fine-tuned; this
/// holds the clean ID draw and the attack radius.
#[derive(Debug, Clone)]
pub struct LazyAdversarial {
    pub name: String,
    pub clean: ShiftedDataset,
    pub eps: f64,
}

impl LazyAdversarial {
    pub fn materialize(&self, space: &ParamSpace, spec: &ModelSpec) -> Result<ShiftedDataset> {
        let mut ds = adversarial_perturb(space, spec, &self.clean, self.eps)?;
        ds.name.clone_from(&self.name);
        Ok(ds)
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub task: TaskSpec,
    pub config: SuiteConfig,
    /// Materialized datasets in a fixed order.
    pub datasets: Vec<ShiftedDataset>,
    pub adversarial: LazyAdversarial,
}

impl Suite {
    pub fn get(&self, name: &str) -> Option<&ShiftedDataset> {
        self.datasets.iter().find(|d| d.name == name)
    }

    fn require(&self, name: &str) -> &ShiftedDataset {
        self.get(name).expect("suite always contains its fixed splits")
    }

    pub fn pretrain(&self) -> &ShiftedDataset {
        self.require(PRETRAIN)
    }

    pub fn id_train(&self) -> &ShiftedDataset {
        self.require(ID_TRAIN)
    }

    pub fn id_val(&self) -> &ShiftedDataset {
        self.require(ID_VAL)
    }

    /// Materialized near/far OOD splits.
    pub fn ood(&self) -> impl Iterator<Item = &ShiftedDataset> {
        self.datasets
            .iter()
            .filter(|d| matches!(d.spec.tier, Tier::NearOod | Tier::FarOod))
    }

    /// Names of every evaluation split (ID val first, adversarial included).
    pub fn eval_names(&self) -> Vec<String> {
        let mut names = vec![ID_VAL.to_string()];
        let mut ood: Vec<String> = self.ood().map(|d| d.name.clone()).collect();
        let pos = ood.iter().position(|n| n.starts_with("far_")).unwrap_or(ood.len());
        ood.insert(pos, self.adversarial.name.clone());
        names.extend(ood);
        names
    }
}

/// Builds the pretrain / ID / near-OOD / far-OOD splits for a task.
pub fn make_suite(task: &TaskSpec, cfg: &SuiteConfig) -> Result<Suite> {
    task.validate()?;
    cfg.validate()?;
    let uniform = task.uniform_priors();
    let draw = |name: &str, n: usize| -> Result<ShiftedDataset> {
        let seed = rng::derive_seed(task.seed, name);
        let mut ds = gen_gaussian_mixture(task, n, &uniform, seed)?;
        ds.name = name.to_string();
        Ok(ds)
    };
    let rotate = |mut ds: ShiftedDataset, degrees: f64, tier: Tier| {
        ds.x = apply_rotation(&ds.x, degrees);
        ds.spec = ShiftSpec::none(tier).with(Shift::Rotation { degrees });
        ds
    };

    let mut datasets = Vec::new();
    datasets.push(draw(PRETRAIN, task.n_pretrain)?);
    datasets.push(rotate(draw(ID_TRAIN, task.n_id_train)?, cfg.id_rotation, Tier::Id));
    datasets.push(rotate(draw(ID_VAL, task.n_id_val)?, cfg.id_rotation, Tier::Id));

    for &deg in &cfg.near_rotations {
        let name = format!("near_rot{}", fmt_num(deg));
        datasets.push(rotate(draw(&name, task.n_test)?, deg, Tier::NearOod));
    }

    let name = "near_label_prior";
    let seed = rng::derive_seed(task.seed, name);
    let mut lp = apply_label_prior(task, cfg.label_alpha, task.n_test, seed)?;
    lp.x = apply_rotation(&lp.x, cfg.id_rotation);
    lp.spec = ShiftSpec::none(Tier::NearOod)
        .with(Shift::Rotation { degrees: cfg.id_rotation })
        .with(Shift::LabelPrior { dirichlet_alpha: cfg.label_alpha });
    lp.name = name.into();
    datasets.push(lp);

    let name = format!(
        "far_rot{}_noise{}",
        fmt_num(cfg.far_rotation),
        fmt_num(cfg.far_rotation_sigma)
    );
    let mut far = rotate(draw(&name, task.n_test)?, cfg.far_rotation, Tier::FarOod);
    far.x = apply_corruption(&far.x, cfg.far_rotation_sigma, far.provenance_seed);
    far.spec = far.spec.with(Shift::Corruption { sigma: cfg.far_rotation_sigma });
    datasets.push(far);

    let name = format!("far_noise{}", fmt_num(cfg.far_sigma));
    let mut noisy = rotate(draw(&name, task.n_test)?, cfg.id_rotation, Tier::FarOod);
    noisy.x = apply_corruption(&noisy.x, cfg.far_sigma, noisy.provenance_seed);
    noisy.spec = noisy.spec.with(Shift::Corruption { sigma: cfg.far_sigma });
    datasets.push(noisy);

    let clean = rotate(draw(ADVERSARIAL, task.n_test)?, cfg.id_rotation, Tier::NearOod);
    Ok(Suite {
        task: task.clone(),
        config: cfg.clone(),
        datasets,
        adversarial: LazyAdversarial {
            name: ADVERSARIAL.into(),
            clean,
            eps: cfg.adversarial_eps,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    name: String,
    spec: ShiftSpec,
    seed: u64,
    priors: Vec<f64>,
    rows: usize,
    dim: usize,
}

fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

/// Writes `<path>` as CSV (`x0..x{d-1},label`) and a JSON sidecar next to it.
pub fn export_dataset(ds: &ShiftedDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    let d = ds.x.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, y) in ds.x.iter_rows().zip(&ds.y) {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        name: ds.name.clone(),
        spec: ds.spec.clone(),
        seed: ds.provenance_seed,
        priors: ds.priors.clone(),
        rows: ds.len(),
        dim: d,
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Reads a dataset written by [`export_dataset`] or any CSV with the same
/// header layout. The sidecar is optional.
pub fn import_dataset(path: &Path) -> Result<ShiftedDataset> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    let header = rd.headers()?.clone();
    if header.iter().next_back() != Some("label") {
        return Err(Error::Config(format!(
            "{}: last column must be `label`",
            path.display()
        )));
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            if j < d {
                data.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                    key: format!("row {} column {}", i + 1, j),
                    value: field.into(),
                    reason: e.to_string(),
                })?);
            } else {
                y.push(field.trim().parse::<usize>().map_err(|e| Error::Parse {
                    key: format!("row {} label", i + 1),
                    value: field.into(),
                    reason: e.to_string(),
                })?);
            }
        }
    }
    let x = Matrix::from_vec(y.len(), d, data)?;
    let sp = sidecar_path(path);
    let (name, spec, seed, priors) = if sp.exists() {
        let s = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&s)?;
        (side.name, side.spec, side.seed, side.priors)
    } else {
        let stem = path.file_stem().map_or("external".into(), |s| s.to_string_lossy().into_owned());
        (stem, ShiftSpec::none(Tier::Id), 0, Vec::new())
    };
    Ok(ShiftedDataset {
        name,
        x,
        y,
        priors,
        spec,
        provenance_seed: seed,
    })
}

/// Datasets of a suite keyed by name.
pub fn by_name(suite: &Suite) -> BTreeMap<&str, &ShiftedDataset> {
    suite.datasets.iter().map(|d| (d.name.as_str(), d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task() -> TaskSpec {
        TaskSpec {
            n_pretrain: 64,
            n_id_train: 32,
            n_id_val: 32,
            n_test: 32,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_class_counts_concentrate() {
        let task = TaskSpec::default();
        let ds = gen_gaussian_mixture(&task, 8000, &task.uniform_priors(), 4).unwrap();
        // binomial(8000, 1/8): mean 1000, sd sqrt(875) ≈ 29.6
        let sd = (8000.0f64 * 0.125 * 0.875).sqrt();
        for c in ds.class_counts(8) {
            assert!((c as f64 - 1000.0).abs() <= 4.0 * sd, "count {c}");
        }
    }

    #[test]
    fn empty_and_deterministic() {
        let task = small_task();
        let p = task.uniform_priors();
        assert!(gen_gaussian_mixture(&task, 0, &p, 1).unwrap().is_empty());
        let a = gen_gaussian_mixture(&task, 50, &p, 1).unwrap();
        let b = gen_gaussian_mixture(&task, 50, &p, 1).unwrap();
        assert_eq!(a, b);
        assert!(gen_gaussian_mixture(&task, 5, &[0.5; 8], 1).is_err());
    }

    #[test]
    fn rotation_cases() {
        let mut x = Matrix::zeros(1, 4);
        x.set(0, 0, 1.0);
        assert_eq!(apply_rotation(&x, 0.0), x);
        let r = apply_rotation(&x, 90.0);
        assert!((r.get(0, 0)).abs() < 1e-15 && (r.get(0, 1) - 1.0).abs() < 1e-15);

        let task = small_task();
        let ds = gen_gaussian_mixture(&task, 20, &task.uniform_priors(), 3).unwrap();
        let twice = apply_rotation(&apply_rotation(&ds.x, 45.0), 45.0);
        let once = apply_rotation(&ds.x, 90.0);
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ds.x.iter_rows().zip(once.iter_rows()) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dimension_keeps_last_coordinate() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(apply_rotation(&x, 33.0).get(0, 2), 3.0);
    }

    #[test]
    fn corruption_variance() {
        let x = Matrix::zeros(1000, 16);
        assert_eq!(apply_corruption(&x, 0.0, 1), x);
        let sigma = 1.5;
        let out = apply_corruption(&x, sigma, 1);
        assert_eq!(out, apply_corruption(&x, sigma, 1));
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - sigma * sigma).abs() / (sigma * sigma) < 0.1, "var {var}");
    }

    #[test]
    fn dirichlet_extremes() {
        let p = sample_dirichlet(8, 1e6, 2).unwrap();
        assert!(p.iter().all(|v| (v - 0.125).abs() < 1e-2));
        let skewed = (0..20)
            .filter(|&s| {
                let p = sample_dirichlet(8, 0.1, s).unwrap();
                p.iter().cloned().fold(0.0, f64::max) > 0.25
            })
            .count();
        assert!(skewed >= 18, "{skewed}");
        assert!(sample_dirichlet(8, 0.0, 0).is_err());
    }

    #[test]
    fn label_prior_keeps_class_means() {
        let task = small_task();
        let ds = apply_label_prior(&task, 0.3, 40, 5).unwrap();
        assert_eq!(ds.priors.len(), 8);
        assert!((ds.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // class-conditional structure comes from the same means
        let mut t2 = task.clone();
        t2.n_test = 100;
        assert_eq!(task.class_means(), t2.class_means());
    }

    #[test]
    fn suite_layout_and_disjoint_streams() {
        let task = small_task();
        let suite = make_suite(&task, &SuiteConfig::default()).unwrap();
        assert_eq!(suite.datasets.len(), 8);
        let names: Vec<&str> = suite.datasets.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "pretrain",
                "id_train",
                "id_val",
                "near_rot30",
                "near_rot45",
                "near_label_prior",
                "far_rot90_noise1",
                "far_noise2"
            ]
        );
        assert_eq!(suite.adversarial.name, "near_adversarial");
        assert_ne!(suite.id_train().provenance_seed, suite.id_val().provenance_seed);
        assert_ne!(suite.id_train().x.row(0), suite.id_val().x.row(0));
        assert_eq!(suite.eval_names().len(), 7);
        assert_eq!(suite.ood().count(), 5);
    }

    #[test]
    fn rotation_preserves_nearest_mean_decisions() {
        let task = small_task();
        let ds = gen_gaussian_mixture(&task, 200, &task.uniform_priors(), 9).unwrap();
        let means = task.class_means();
        let rot_means = apply_rotation(&means, 15.0);
        let rot_x = apply_rotation(&ds.x, 15.0);
        let nearest = |x: &[f64], m: &Matrix| {
            (0..m.rows())
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(m.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(m.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
        };
        for i in 0..200 {
            assert_eq!(nearest(ds.x.row(i), &means), nearest(rot_x.row(i), &rot_means));
        }
    }

    #[test]
    fn adversarial_bounds() {
        let task = small_task();
        let spec = ModelSpec::mlp(&[16, 8, 8]);
        let space = spec.init_params(1).unwrap();
        let ds = gen_gaussian_mixture(&task, 30, &task.uniform_priors(), 1).unwrap();
        let same = adversarial_perturb(&space, &spec, &ds, 0.0).unwrap();
        assert_eq!(same.x, ds.x);
        let adv = adversarial_perturb(&space, &spec, &ds, 0.5).unwrap();
        let g = input_grad(&space, &spec, &ds.batch()).unwrap();
        for ((a, b), gv) in adv.x.data().iter().zip(ds.x.data()).zip(g.data()) {
            let d = (a - b).abs();
            assert!(d <= 0.5 + 1e-12);
            if *gv != 0.0 {
                assert!((d - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(adv.y, ds.y);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let suite = make_suite(&task, &SuiteConfig::default()).unwrap();
        let ds = suite.get("near_label_prior").unwrap();
        let path = dir.path().join("lp.csv");
        export_dataset(ds, &path).unwrap();
        let back = import_dataset(&path).unwrap();
        assert_eq!(&back, ds);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x0,x1,"));
        std::fs::remove_file(dir.path().join("lp.json")).unwrap();
        let bare = import_dataset(&path).unwrap();
        assert_eq!(bare.x, ds.x);
        assert_eq!(bare.name, "lp");
    }
}

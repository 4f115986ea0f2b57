//! Experiment orchestration: config parsing, the per-seed pipeline
//! (suite → pre-training → fine-tuning grid → evaluation → shift scores),
//! aggregation across seeds, and result files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{evaluate, fine_tune, pretrain, Method, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{dataset_shift_score, default_ridge, delta_stats, maha_fit, mean, std_dev, OmegaTrace, DEFAULT_WINDOWS};
use crate::models::{extract_features, grad_check, input_grad_check, Batch, ModelSpec};
use crate::optim::{OptimConfig, Schedule};
use crate::paramspace::ParamSpace;
use crate::projection::{save_trace_csv, StepTrace};
use crate::rng;
use crate::shiftlab::{make_suite, ShiftedDataset, Suite, SuiteConfig, TaskSpec, ID_VAL};

pub const SCHEMA_VERSION: u32 = 1;

/// Default projection-rate grid of the `sweep` command.
pub const SWEEP_MUS: [f64; 5] = [0.01, 0.1, 0.5, 1.0, 100.0];

/// Every accepted config key with its default and meaning.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("output_dir", "", "directory for result files (required)"),
    ("seeds", "0", "comma-separated run seeds"),
    ("methods", "vanilla_ft,digrap", "vanilla_ft, linear_probe, lpft, l2sp, wise_ft, digrap, fixed_omega, full_projection, magproj"),
    ("mu", "0.5", "projection-strength learning rates; one digrap row each"),
    ("fixed_omega", "0.1,0.5,0.9", "pinned projection strengths; one row each"),
    ("l2sp_lambda", "0.01", "L2-SP strengths; one row each"),
    ("lp_epochs", "auto", "probe-only epochs of lpft (auto = 20% of epochs)"),
    ("wise_betas", "0,0.25,0.5,0.75,1", "WiSE-FT mixing weights; one row each"),
    ("magproj_gamma", "1", "radius of the magnitude projection; one row each"),
    ("epochs", "30", "fine-tuning epochs"),
    ("pretrain_epochs", "30", "pre-training epochs"),
    ("batch_size", "128", "mini-batch size"),
    ("lr", "0.001", "peak Adam learning rate"),
    ("schedule", "cosine", "cosine (with linear warmup) or constant"),
    ("warmup_frac", "0.1", "fraction of steps spent in warmup"),
    ("min_lr", "0", "floor of the cosine schedule"),
    ("hidden", "64,64", "hidden layer widths"),
    ("dim", "16", "input dimension"),
    ("classes", "8", "number of classes"),
    ("n_pretrain", "4000", "pre-training samples"),
    ("n_id_train", "500", "fine-tuning samples"),
    ("n_id_val", "1000", "ID validation samples"),
    ("n_test", "1000", "samples per OOD split"),
    ("radius", "4", "class-mean radius"),
    ("id_rotation", "15", "rotation of the ID task (degrees)"),
    ("near_rotations", "30,45", "near-OOD rotations (degrees)"),
    ("label_alpha", "0.3", "Dirichlet concentration of the label-prior split"),
    ("adversarial_eps", "0.5", "sign-attack radius"),
    ("far_rotation", "90", "far-OOD rotation (degrees)"),
    ("far_rotation_sigma", "1", "noise added to the far rotation split"),
    ("far_sigma", "2", "noise of the pure corruption split"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `seed` is replaced by each run seed.
    pub task: TaskSpec,
    pub suite: SuiteConfig,
    pub hidden: Vec<usize>,
    pub methods: Vec<Method>,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_frac: f64,
    pub min_lr: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.trim().parse().map_err(|e: T::Err| Error::Parse {
        key: key.into(),
        value: raw.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| parse_value(key, v)).collect()
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            key: format!("line {}", n + 1),
            value: line.into(),
            reason: "expected key=value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a config from the file contents (if any) with `overrides` applied
/// on top.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = load_pairs(file)?;
    pairs.extend(overrides.iter().cloned());
    RunConfig::from_pairs(&pairs)
}

pub fn load_pairs(file: Option<&Path>) -> Result<Vec<(String, String)>> {
    match file {
        Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(Vec::new()),
    }
}

impl RunConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !CONFIG_KEYS.iter().any(|(name, _, _)| name == k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k, v);
        }
        let explicit = |k: &str| map.contains_key(k);
        let get = |k: &str| -> &str {
            map.get(k)
                .copied()
                .unwrap_or_else(|| CONFIG_KEYS.iter().find(|(n, _, _)| *n == k).map(|e| e.1).unwrap_or(""))
        };

        let output_dir = match map.get("output_dir") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => return Err(Error::Config("missing required key `output_dir`".into())),
        };
        let epochs: usize = parse_value("epochs", get("epochs"))?;
        let lp_epochs = match get("lp_epochs") {
            "auto" => epochs / 5,
            v => parse_value("lp_epochs", v)?,
        };

        let mut names: Vec<String> = parse_list("methods", get("methods"))?;
        if explicit("mu") && !names.iter().any(|n| n == "digrap") {
            names.push("digrap".into());
        }
        if explicit("fixed_omega") && !names.iter().any(|n| n == "fixed_omega") {
            names.push("fixed_omega".into());
        }
        let mut methods = vec![Method::VanillaFt];
        for name in &names {
            match name.as_str() {
                "vanilla_ft" => {}
                "linear_probe" => methods.push(Method::LinearProbe),
                "lpft" => methods.push(Method::Lpft { lp_epochs }),
                "full_projection" => methods.push(Method::FullProjection),
                "wise_ft" => methods.push(Method::WiseFt {
                    betas: parse_list("wise_betas", get("wise_betas"))?,
                }),
                "digrap" => methods.extend(parse_list("mu", get("mu"))?.into_iter().map(|mu| Method::Digrap { mu })),
                "fixed_omega" => methods.extend(
                    parse_list("fixed_omega", get("fixed_omega"))?
                        .into_iter()
                        .map(|omega| Method::FixedOmega { omega }),
                ),
                "l2sp" => methods.extend(
                    parse_list("l2sp_lambda", get("l2sp_lambda"))?
                        .into_iter()
                        .map(|lambda| Method::L2sp { lambda }),
                ),
                "magproj" => methods.extend(
                    parse_list("magproj_gamma", get("magproj_gamma"))?
                        .into_iter()
                        .map(|gamma| Method::MagProj { gamma }),
                ),
                other => {
                    return Err(Error::Parse {
                        key: "methods".into(),
                        value: other.into(),
                        reason: "unknown method".into(),
                    })
                }
            }
        }
        let mut seen = Vec::new();
        methods.retain(|m| {
            let n = m.name();
            let fresh = !seen.contains(&n);
            seen.push(n);
            fresh
        });

        let schedule = match get("schedule") {
            "cosine" => ScheduleKind::Cosine,
            "constant" => ScheduleKind::Constant,
            v => {
                return Err(Error::Parse {
                    key: "schedule".into(),
                    value: v.into(),
                    reason: "expected cosine or constant".into(),
                })
            }
        };

        let cfg = RunConfig {
            task: TaskSpec {
                dim: parse_value("dim", get("dim"))?,
                classes: parse_value("classes", get("classes"))?,
                n_pretrain: parse_value("n_pretrain", get("n_pretrain"))?,
                n_id_train: parse_value("n_id_train", get("n_id_train"))?,
                n_id_val: parse_value("n_id_val", get("n_id_val"))?,
                n_test: parse_value("n_test", get("n_test"))?,
                radius: parse_value("radius", get("radius"))?,
                seed: 0,
            },
            suite: SuiteConfig {
                id_rotation: parse_value("id_rotation", get("id_rotation"))?,
                near_rotations: parse_list("near_rotations", get("near_rotations"))?,
                label_alpha: parse_value("label_alpha", get("label_alpha"))?,
                adversarial_eps: parse_value("adversarial_eps", get("adversarial_eps"))?,
                far_rotation: parse_value("far_rotation", get("far_rotation"))?,
                far_rotation_sigma: parse_value("far_rotation_sigma", get("far_rotation_sigma"))?,
                far_sigma: parse_value("far_sigma", get("far_sigma"))?,
            },
            hidden: parse_list("hidden", get("hidden"))?,
            methods,
            epochs,
            pretrain_epochs: parse_value("pretrain_epochs", get("pretrain_epochs"))?,
            batch_size: parse_value("batch_size", get("batch_size"))?,
            lr: parse_value("lr", get("lr"))?,
            schedule,
            warmup_frac: parse_value("warmup_frac", get("warmup_frac"))?,
            min_lr: parse_value("min_lr", get("min_lr"))?,
            seeds: parse_list("seeds", get("seeds"))?,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for every key, writing to `output_dir`.
    pub fn defaults(output_dir: impl Into<PathBuf>) -> Self {
        let dir: PathBuf = output_dir.into();
        RunConfig::from_pairs(&[("output_dir".into(), dir.to_string_lossy().into_owned())])
            .expect("built-in defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shared()?;
        for m in &self.methods {
            m.validate(self.epochs)?;
        }
        Ok(())
    }

    /// Checks everything except the individual methods, whose problems are
    /// reported per cell.
    fn validate_shared(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.pretrain_epochs == 0 {
            return Err(Error::Config("pretrain_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} must be in [0, 1)", self.warmup_frac)));
        }
        self.task.validate()?;
        self.suite.validate()?;
        self.model_spec().validate()?;
        self.train_config(self.task.n_id_train, self.epochs, 0)?.validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut sizes = vec![self.task.dim];
        sizes.extend(&self.hidden);
        sizes.push(self.task.classes);
        ModelSpec::mlp(&sizes)
    }

    pub fn task_for(&self, seed: u64) -> TaskSpec {
        TaskSpec { seed, ..self.task.clone() }
    }

    /// Training settings for `n` samples over `epochs`; warmup length is a
    /// fraction of the total step count.
    pub fn train_config(&self, n: usize, epochs: usize, order_seed: u64) -> Result<TrainConfig> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let total = (n.div_ceil(self.batch_size) * epochs) as f64;
        let schedule = match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Cosine => Schedule::CosineWithWarmup {
                warmup_steps: (self.warmup_frac * total).round() as u64,
                min_lr: self.min_lr,
            },
        };
        Ok(TrainConfig {
            epochs,
            batch_size: self.batch_size,
            optim: OptimConfig {
                lr: self.lr,
                l2sp_lambda: 0.0,
                schedule,
            },
            seed: order_seed,
        })
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn run_id(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub dataset: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub accuracies: Vec<DatasetAccuracy>,
    pub id_accuracy: f64,
    pub ood_average: f64,
    pub omega: Option<OmegaTrace>,
    #[serde(skip)]
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetShift {
    pub dataset: String,
    pub mean: f64,
    #[serde(skip)]
    pub per_sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedShift {
    pub seed: u64,
    pub ridge: f64,
    pub datasets: Vec<DatasetShift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub id_mean: f64,
    pub id_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub dataset_means: Vec<DatasetAccuracy>,
    /// Relative change over vanilla fine-tuning on the seeds both completed.
    pub id_delta_pct: Option<f64>,
    pub ood_delta_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub run_id: String,
    pub config: RunConfig,
    pub datasets: Vec<String>,
    pub cells: Vec<CellResult>,
    pub failed: Vec<FailedCell>,
    pub summary: Vec<MethodSummary>,
    pub shift_scores: Vec<SeedShift>,
}

impl RunResult {
    pub fn cell(&self, method: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }

    pub fn method_summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Everything shared by the cells of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub suite: Suite,
    pub spec: ModelSpec,
    /// Pre-trained parameters with the snapshot captured.
    pub pretrained: ParamSpace,
}

pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<SeedContext> {
    let suite = make_suite(&cfg.task_for(seed), &cfg.suite)?;
    let spec = cfg.model_spec();
    let init = spec.init_params(rng::derive_seed(seed, "init"))?;
    let tc = cfg.train_config(
        suite.pretrain().len(),
        cfg.pretrain_epochs,
        rng::derive_seed(seed, "pretrain-order"),
    )?;
    let mut pretrained = pretrain(&init, &spec, suite.pretrain(), &tc)?;
    pretrained.capture_snapshot()?;
    Ok(SeedContext {
        seed,
        suite,
        spec,
        pretrained,
    })
}

fn evaluate_all(ctx: &SeedContext, space: &ParamSpace) -> Result<Vec<DatasetAccuracy>> {
    let adversarial = ctx.suite.adversarial.materialize(space, &ctx.spec)?;
    ctx.suite
        .eval_names()
        .into_iter()
        .map(|name| {
            let ds = if name == adversarial.name {
                &adversarial
            } else {
                ctx.suite
                    .get(&name)
                    .ok_or_else(|| Error::State(format!("suite has no split {name}")))?
            };
            Ok(DatasetAccuracy {
                accuracy: evaluate(space, &ctx.spec, ds)?,
                dataset: name,
            })
        })
        .collect()
}

fn summarize(accuracies: &[DatasetAccuracy]) -> (f64, f64) {
    let id = accuracies.iter().find(|a| a.dataset == ID_VAL).map_or(f64::NAN, |a| a.accuracy);
    let ood: Vec<f64> = accuracies.iter().filter(|a| a.dataset != ID_VAL).map(|a| a.accuracy).collect();
    (id, mean(&ood))
}

/// Fine-tunes one method and evaluates it. WiSE-FT yields one result per
/// mixing weight; everything else yields one. The selected parameters are
/// returned alongside each result.
pub fn run_cell(cfg: &RunConfig, ctx: &SeedContext, method: &Method) -> Result<Vec<(CellResult, ParamSpace)>> {
    let tc = cfg.train_config(
        ctx.suite.id_train().len(),
        cfg.epochs,
        rng::derive_seed(ctx.seed, "finetune-order"),
    )?;
    let out = fine_tune(&ctx.pretrained, &ctx.spec, method, ctx.suite.id_train(), ctx.suite.id_val(), &tc)?;
    let make = |name: String, space: ParamSpace, traces: Vec<StepTrace>| -> Result<(CellResult, ParamSpace)> {
        let accuracies = evaluate_all(ctx, &space)?;
        let (id_accuracy, ood_average) = summarize(&accuracies);
        let omega = (!traces.is_empty()).then(|| OmegaTrace::new(traces.iter().map(StepTrace::mean_omega).collect(), &DEFAULT_WINDOWS));
        let cell = CellResult {
            method: name,
            seed: ctx.seed,
            best_epoch: out.best_epoch,
            accuracies,
            id_accuracy,
            ood_average,
            omega,
            traces,
        };
        Ok((cell, space))
    };
    match method {
        Method::WiseFt { .. } => out
            .wise
            .iter()
            .map(|(beta, space)| make(format!("wise_ft_beta{beta}"), space.clone(), Vec::new()))
            .collect(),
        _ => Ok(vec![make(method.name(), out.selected.clone(), out.traces.clone())?]),
    }
}

/// Fits the feature Gaussian on ID-train features of `space` and scores
/// every evaluation split.
pub fn shift_scores(ctx: &SeedContext, space: &ParamSpace) -> Result<SeedShift> {
    let train_feats = extract_features(space, &ctx.spec, &ctx.suite.id_train().x)?;
    let ridge = default_ridge(&train_feats);
    let model = maha_fit(&train_feats, ridge)?;
    let adversarial = ctx.suite.adversarial.materialize(space, &ctx.spec)?;
    let mut datasets = Vec::new();
    for name in ctx.suite.eval_names() {
        let ds: &ShiftedDataset = if name == adversarial.name {
            &adversarial
        } else {
            ctx.suite
                .get(&name)
                .ok_or_else(|| Error::State(format!("suite has no split {name}")))?
        };
        let score = dataset_shift_score(&model, &extract_features(space, &ctx.spec, &ds.x)?)?;
        datasets.push(DatasetShift {
            dataset: name,
            mean: score.mean,
            per_sample: score.per_sample,
        });
    }
    Ok(SeedShift {
        seed: ctx.seed,
        ridge,
        datasets,
    })
}

/// Runs every (method, seed) cell. Cell errors are recorded, not raised.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate_shared()?;
    let mut cells = Vec::new();
    let mut failed = Vec::new();
    let mut shift = Vec::new();
    let mut datasets = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = match prepare_seed(cfg, seed) {
            Ok(c) => c,
            Err(e) => {
                for m in &cfg.methods {
                    failed.push(FailedCell {
                        method: m.name(),
                        seed,
                        error: format!("pre-training: {e}"),
                    });
                }
                continue;
            }
        };
        if datasets.is_empty() {
            datasets = ctx.suite.eval_names();
        }
        let mut vanilla: Option<ParamSpace> = None;
        for m in &cfg.methods {
            match run_cell(cfg, &ctx, m) {
                Ok(results) => {
                    for (cell, space) in results {
                        if matches!(m, Method::VanillaFt) {
                            vanilla = Some(space);
                        }
                        cells.push(cell);
                    }
                }
                Err(e) => failed.push(FailedCell {
                    method: m.name(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        match vanilla.as_ref().map(|v| shift_scores(&ctx, v)) {
            Some(Ok(s)) => shift.push(s),
            Some(Err(e)) => failed.push(FailedCell {
                method: "shift_scores".into(),
                seed,
                error: e.to_string(),
            }),
            None => {}
        }
    }
    let summary = aggregate(&cells);
    Ok(RunResult {
        schema_version: SCHEMA_VERSION,
        run_id: cfg.run_id(),
        config: cfg.clone(),
        datasets,
        cells,
        failed,
        summary,
        shift_scores: shift,
    })
}

/// Per-method means and standard deviations across seeds, with paired
/// deltas against vanilla fine-tuning.
pub fn aggregate(cells: &[CellResult]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for c in cells {
        if !order.contains(&c.method.as_str()) {
            order.push(&c.method);
        }
    }
    let vanilla_name = Method::VanillaFt.name();
    let vanilla: BTreeMap<u64, &CellResult> = cells
        .iter()
        .filter(|c| c.method == vanilla_name)
        .map(|c| (c.seed, c))
        .collect();
    order
        .into_iter()
        .map(|name| {
            let rows: Vec<&CellResult> = cells.iter().filter(|c| c.method == name).collect();
            let ids: Vec<f64> = rows.iter().map(|c| c.id_accuracy).collect();
            let oods: Vec<f64> = rows.iter().map(|c| c.ood_average).collect();
            let dataset_means = rows[0]
                .accuracies
                .iter()
                .map(|a| DatasetAccuracy {
                    dataset: a.dataset.clone(),
                    accuracy: mean(
                        &rows
                            .iter()
                            .filter_map(|c| c.accuracies.iter().find(|b| b.dataset == a.dataset))
                            .map(|b| b.accuracy)
                            .collect::<Vec<_>>(),
                    ),
                })
                .collect();
            let paired: Vec<(&CellResult, &CellResult)> = rows
                .iter()
                .filter_map(|c| vanilla.get(&c.seed).map(|v| (*c, *v)))
                .collect();
            let delta = if paired.is_empty() {
                None
            } else {
                let avg = |f: &dyn Fn(&(&CellResult, &CellResult)) -> f64| mean(&paired.iter().map(f).collect::<Vec<_>>());
                delta_stats(
                    avg(&|p| p.0.id_accuracy),
                    avg(&|p| p.0.ood_average),
                    avg(&|p| p.1.id_accuracy),
                    avg(&|p| p.1.ood_average),
                )
                .ok()
            };
            MethodSummary {
                method: name.to_string(),
                seeds: rows.len(),
                id_mean: mean(&ids),
                id_std: std_dev(&ids),
                ood_mean: mean(&oods),
                ood_std: std_dev(&oods),
                dataset_means,
                id_delta_pct: delta.map(|d| d.id_delta_pct),
                ood_delta_pct: delta.map(|d| d.ood_delta_pct),
            }
        })
        .collect()
}

pub const RESULTS_HEADER: &str = "method,seed,dataset,accuracy";
pub const SHIFT_HEADER: &str = "seed,dataset,sample_index,s_maha";

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.2}"))
}

pub fn write_results_csv(res: &RunResult, path: &Path) -> Result<()> {
    let mut lines = vec![RESULTS_HEADER.to_string()];
    for c in &res.cells {
        for a in &c.accuracies {
            lines.push(format!("{},{},{},{}", c.method, c.seed, a.dataset, a.accuracy));
        }
    }
    write_lines(path, lines)
}

/// Wide table: mean accuracy (percent) per split, OOD average, deltas.
pub fn write_table_csv(res: &RunResult, path: &Path) -> Result<()> {
    let mut header = vec!["method".to_string(), "seeds".into()];
    header.extend(res.datasets.iter().cloned());
    header.extend(["ood_avg".into(), "id_delta_pct".into(), "ood_delta_pct".into()]);
    let mut lines = vec![header.join(",")];
    for s in &res.summary {
        let mut row = vec![s.method.clone(), s.seeds.to_string()];
        for d in &res.datasets {
            let v = s.dataset_means.iter().find(|a| &a.dataset == d).map(|a| 100.0 * a.accuracy);
            row.push(fmt_opt(v));
        }
        row.push(format!("{:.2}", 100.0 * s.ood_mean));
        row.push(fmt_opt(s.id_delta_pct));
        row.push(fmt_opt(s.ood_delta_pct));
        lines.push(row.join(","));
    }
    write_lines(path, lines)
}

pub fn write_shift_csv(scores: &[SeedShift], path: &Path) -> Result<()> {
    let mut lines = vec![SHIFT_HEADER.to_string()];
    for s in scores {
        for d in &s.datasets {
            for (i, v) in d.per_sample.iter().enumerate() {
                lines.push(format!("{},{},{i},{v}", s.seed, d.dataset));
            }
        }
    }
    write_lines(path, lines)
}

/// Writes results.csv, table.csv, summary.json, shift_scores.csv and one
/// trace file per projection cell.
pub fn write_results(res: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let results = dir.join("results.csv");
    write_results_csv(res, &results)?;
    written.push(results);
    let table = dir.join("table.csv");
    write_table_csv(res, &table)?;
    written.push(table);
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(res)?;
    fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
    written.push(summary);
    let shift = dir.join("shift_scores.csv");
    write_shift_csv(&res.shift_scores, &shift)?;
    written.push(shift);
    for c in res.cells.iter().filter(|c| !c.traces.is_empty()) {
        let p = dir.join(format!("omega_trace_{}_{}.csv", c.method, c.seed));
        save_trace_csv(&p, &c.traces)?;
        written.push(p);
    }
    Ok(written)
}

/// Pre-trains for one seed and saves the checkpoint. Returns its path and
/// the pre-trained accuracy on the source and ID validation splits.
pub fn pretrain_command(cfg: &RunConfig, seed: u64) -> Result<(PathBuf, f64, f64)> {
    let ctx = prepare_seed(cfg, seed)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(format!("pretrained_seed{seed}.json"));
    ctx.pretrained.save(&path)?;
    let src = evaluate(&ctx.pretrained, &ctx.spec, ctx.suite.pretrain())?;
    let id = evaluate(&ctx.pretrained, &ctx.spec, ctx.suite.id_val())?;
    Ok((path, src, id))
}

/// Vanilla fine-tuning per seed followed by Mahalanobis scoring only.
pub fn score_shift_command(cfg: &RunConfig) -> Result<(Vec<SeedShift>, Vec<FailedCell>)> {
    let mut scores = Vec::new();
    let mut failed = Vec::new();
    for &seed in &cfg.seeds {
        let attempt = prepare_seed(cfg, seed).and_then(|ctx| {
            let (_, space) = run_cell(cfg, &ctx, &Method::VanillaFt)?
                .pop()
                .ok_or_else(|| Error::State("no vanilla result".into()))?;
            shift_scores(&ctx, &space)
        });
        match attempt {
            Ok(s) => scores.push(s),
            Err(e) => failed.push(FailedCell {
                method: "shift_scores".into(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_shift_csv(&scores, &cfg.output_dir.join("shift_scores.csv"))?;
    Ok((scores, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: String,
    pub param_error: f64,
    pub input_error: f64,
}

pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Finite-difference checks on a linear model and two MLPs.
pub fn grad_check_command(seed: u64, h: f64) -> Result<Vec<GradCheckReport>> {
    let specs = [
        ("linear[16,8]", ModelSpec::linear(16, 8)),
        ("mlp[4,8,3]", ModelSpec::mlp(&[4, 8, 3])),
        ("mlp[16,64,64,8]", ModelSpec::mlp(&[16, 64, 64, 8])),
    ];
    specs
        .into_iter()
        .map(|(name, spec)| {
            let space = spec.init_params(rng::derive_seed(seed, name))?;
            let mut r = rng::stream(seed, &format!("{name}/batch"));
            let n = 8;
            let d = spec.input_dim();
            let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng::gaussian(&mut r)).collect())?;
            let y = (0..n).map(|i| i % spec.classes()).collect();
            let batch = Batch::new(x, y)?;
            Ok(GradCheckReport {
                model: name.into(),
                param_error: grad_check(&space, &spec, &batch, h)?,
                input_error: input_grad_check(&space, &spec, &batch, h)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(kv: &[(&str, &str)]) -> Vec<(String, String)> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_alone_make_a_config() {
        let cfg = parse_config(None, &pairs(&[("output_dir", "out"), ("seeds", "0,1")])).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.methods, vec![Method::VanillaFt, Method::Digrap { mu: 0.5 }]);
    }

    #[test]
    fn mu_key_becomes_digrap_rows() {
        let cfg = RunConfig::from_pairs(&pairs(&[("output_dir", "o"), ("methods", "vanilla_ft"), ("mu", "0.5")])).unwrap();
        assert_eq!(cfg.methods, vec![Method::VanillaFt, Method::Digrap { mu: 0.5 }]);
        let cfg = RunConfig::from_pairs(&pairs(&[("output_dir", "o"), ("mu", "0.01,0.1,0.5,1,100")])).unwrap();
        assert_eq!(cfg.methods.len(), 6);
    }

    #[test]
    fn parse_errors_name_the_key() {
        let err = RunConfig::from_pairs(&pairs(&[("output_dir", "o"), ("mu", "banana")])).unwrap_err();
        match err {
            Error::Parse { key, value, .. } => {
                assert_eq!(key, "mu");
                assert_eq!(value, "banana");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(RunConfig::from_pairs(&pairs(&[("output_dir", "o"), ("learning_rate", "1")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("seeds", "1")])).is_err());
        assert!(parse_pairs("epochs 3").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# comment\noutput_dir = a\nepochs = 3 # trailing\nmethods = vanilla_ft,lpft\n").unwrap();
        let cfg = parse_config(Some(&p), &pairs(&[("epochs", "10")])).unwrap();
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.output_dir, PathBuf::from("a"));
        assert_eq!(cfg.methods[1], Method::Lpft { lp_epochs: 2 });
        let empty = dir.path().join("empty.cfg");
        fs::write(&empty, "").unwrap();
        assert!(parse_config(Some(&empty), &pairs(&[("output_dir", "x")])).is_ok());
    }

    #[test]
    fn run_id_ignores_output_dir() {
        let a = RunConfig::defaults("a");
        let b = RunConfig::defaults("b");
        assert_eq!(a.run_id(), b.run_id());
        let mut c = a.clone();
        c.epochs = 3;
        assert_ne!(a.run_id(), c.run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn defaults_are_documented() {
        let cfg = RunConfig::defaults("x");
        assert_eq!(cfg.task, TaskSpec::default());
        assert_eq!(cfg.suite, SuiteConfig::default());
        assert_eq!(cfg.hidden, vec![64, 64]);
    }

    fn tiny(dir: &Path) -> RunConfig {
        RunConfig::from_pairs(&pairs(&[
            ("output_dir", dir.to_str().unwrap()),
            ("methods", "vanilla_ft,digrap,wise_ft,lpft"),
            ("wise_betas", "0,0.5,1"),
            ("epochs", "3"),
            ("pretrain_epochs", "3"),
            ("batch_size", "32"),
            ("n_pretrain", "128"),
            ("n_id_train", "64"),
            ("n_id_val", "64"),
            ("n_test", "32"),
            ("hidden", "8"),
        ]))
        .unwrap()
    }

    #[test]
    fn tiny_run_structure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let res = run_experiment(&cfg).unwrap();
        assert!(res.failed.is_empty(), "{:?}", res.failed);
        let names: Vec<&str> = res.summary.iter().map(|s| s.method.as_str()).collect();
        assert_eq!(
            names,
            ["vanilla_ft", "digrap_mu0.5", "wise_ft_beta0", "wise_ft_beta0.5", "wise_ft_beta1", "lpft_lp0"]
        );
        let v = res.method_summary("vanilla_ft").unwrap();
        assert_eq!(v.id_delta_pct, Some(0.0));
        assert_eq!(v.ood_delta_pct, Some(0.0));
        assert_eq!(res.datasets.len(), 7);
        let cell = res.cell("vanilla_ft", 0).unwrap();
        let ood: Vec<f64> = cell.accuracies[1..].iter().map(|a| a.accuracy).collect();
        assert_eq!(cell.ood_average, mean(&ood));
        assert_eq!(res.shift_scores.len(), 1);

        let files = write_results(&res, dir.path()).unwrap();
        assert!(files.iter().any(|p| p.ends_with("omega_trace_digrap_mu0.5_0.csv")));
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(csv.starts_with("method,seed,dataset,accuracy\n"));
        let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert!(table.lines().nth(1).unwrap().ends_with(",0.00,0.00"));
        let json = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let back: RunResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.summary, res.summary);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn failed_cells_do_not_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.methods = vec![Method::VanillaFt, Method::Lpft { lp_epochs: 3 }, Method::Digrap { mu: 0.5 }];
        assert!(cfg.validate().is_err());
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.failed.len(), 1);
        assert_eq!(res.failed[0].method, "lpft_lp3");
        assert_eq!(res.summary.len(), 2);
    }

    #[test]
    fn grad_check_command_passes() {
        for r in grad_check_command(0, 1e-5).unwrap() {
            assert!(r.param_error < GRAD_CHECK_TOL && r.input_error < GRAD_CHECK_TOL, "{r:?}");
        }
    }
}

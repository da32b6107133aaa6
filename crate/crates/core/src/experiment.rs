//! Seeded experiment runner behind the `qmf` command line.
//!
//! One JSON [`ExperimentConfig`] drives every command. Each seed is an
//! independent job: it regenerates (or reloads) the dataset, splits it,
//! trains the requested methods and evaluates them. Seeds run on a worker
//! pool and results are reduced in seed order, so outputs do not depend on
//! scheduling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{self, MultimodalDataset, NoiseSpec, SyntheticSpec};
use crate::diffcore::{per_sample_cross_entropy, Matrix};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::fusion::{self, FusionWeights, WeightPolicy};
use crate::io;
use crate::models::{Architecture, ModelConfig, UnimodalModel};
use crate::rng::mix_seed;
use crate::stats;
use crate::theory::{self, BoundReport, LinearScorer, TwoClassFusion};
use crate::training::{self, QmfClassifier, TrainConfig, TrainOutcome, TrainReport};
use crate::uncertainty::EstimatorKind;

pub const CONFIG_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Qmf(EstimatorKind),
    StaticLate,
    Unimodal(usize),
}

impl Method {
    pub fn is_qmf(self) -> bool {
        matches!(self, Method::Qmf(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Qmf(k) => write!(f, "qmf-{}", k.name()),
            Method::StaticLate => f.write_str("static-late"),
            Method::Unimodal(m) => write!(f, "unimodal-{m}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "static-late" {
            return Ok(Method::StaticLate);
        }
        if let Some(k) = s.strip_prefix("qmf-") {
            return EstimatorKind::from_name(k).map(Method::Qmf);
        }
        if let Some(m) = s.strip_prefix("unimodal-") {
            if let Ok(m) = m.parse() {
                return Ok(Method::Unimodal(m));
            }
        }
        Err(Error::config(format!(
            "unknown method {s:?}; expected qmf-energy, qmf-confidence, qmf-dst, static-late or unimodal-<m>"
        )))
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Regenerated per seed with `seed = spec.seed + run seed`.
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp1 { hidden: 32 },
            init_scale: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSettings {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_draws")]
    pub rademacher_draws: usize,
    /// Norm bound `B_m`, shared by all modalities.
    #[serde(default = "one")]
    pub norm_bound: f64,
    /// Size of the fresh sample used to measure the generalization error.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_fit_steps")]
    pub fit_steps: usize,
    #[serde(default = "default_fit_lr")]
    pub fit_lr: f64,
    /// Use constant `1/M` weights instead of calibrated dynamic ones.
    #[serde(default)]
    pub static_weights: bool,
}

fn default_delta() -> f64 {
    0.1
}
fn default_draws() -> usize {
    200
}
fn default_eval_samples() -> usize {
    100_000
}
fn default_fit_steps() -> usize {
    200
}
fn default_fit_lr() -> f64 {
    0.5
}

impl Default for BoundSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateSettings {
    /// Noise applied to the eval split before correlating.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// Whose checkpoints to score; defaults to the first QMF method.
    #[serde(default)]
    pub source: Option<Method>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_fraction() -> f64 {
    0.8
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_methods() -> Vec<Method> {
    vec![Method::Qmf(EstimatorKind::Energy), Method::StaticLate]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dataset: DatasetSource,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub noise_grid: Vec<NoiseSpec>,
    /// Also corrupt the training split with this noise.
    #[serde(default)]
    pub train_noise: Option<NoiseSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub bound: BoundSettings,
    #[serde(default)]
    pub correlate: CorrelateSettings,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset,
            train_fraction: default_fraction(),
            methods: default_methods(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            noise_grid: Vec::new(),
            train_noise: None,
            seeds: default_seeds(),
            output_dir: None,
            bound: BoundSettings::default(),
            correlate: CorrelateSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("need at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("need at least one method"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0,1)"));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            let m = spec.num_modalities();
            for method in &self.methods {
                if let Method::Unimodal(j) = method {
                    if *j >= m {
                        return Err(Error::config(format!("{method}: dataset has {m} modalities")));
                    }
                }
            }
            self.train.validate(m)?;
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("qmf-out"))
    }

    fn dataset_for(&self, seed: u64) -> Result<MultimodalDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => data::generate(&SyntheticSpec {
                seed: spec.seed.wrapping_add(seed),
                ..spec.clone()
            }),
            DatasetSource::Path(p) => data::load(p),
        }
    }

    /// Train and eval splits for one run seed, with optional training noise.
    pub fn splits(&self, seed: u64) -> Result<(MultimodalDataset, MultimodalDataset)> {
        let ds = self.dataset_for(seed)?;
        let (mut train, eval) = ds.split(self.train_fraction, seed)?;
        if let Some(noise) = &self.train_noise {
            train = data::inject_noise(&train, &noise_for(noise, seed))?;
        }
        Ok((train, eval))
    }

    pub fn model_configs(&self, m: usize, seed: u64) -> Vec<ModelConfig> {
        (0..m)
            .map(|j| ModelConfig {
                architecture: self.model.architecture,
                init_scale: self.model.init_scale,
                seed: seed.wrapping_mul(10).wrapping_add(j as u64),
            })
            .collect()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// The noise spec used for one run seed: its own seed is offset by the run seed.
pub fn noise_for(noise: &NoiseSpec, run_seed: u64) -> NoiseSpec {
    noise.with_seed(noise.seed.wrapping_add(run_seed))
}

/// Trained classifiers for one seed, keyed by method.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub train: MultimodalDataset,
    pub eval: MultimodalDataset,
    pub trained: Vec<(Method, QmfClassifier, Option<TrainReport>)>,
}

impl SeedRun {
    pub fn classifier(&self, method: Method) -> Option<&QmfClassifier> {
        self.trained.iter().find(|(m, _, _)| *m == method).map(|(_, c, _)| c)
    }
}

/// Trains every configured method for one seed.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let (train, eval) = cfg.splits(seed)?;
    let m = train.num_modalities();
    cfg.train.validate(m)?;
    let models = cfg.model_configs(m, seed);
    let tc = cfg.train_config(seed);
    let mut trained = Vec::with_capacity(cfg.methods.len());
    let mut unimodal: Option<TrainOutcome> = None;
    for &method in &cfg.methods {
        match method {
            Method::Qmf(kind) => {
                let c = TrainConfig {
                    estimator: kind,
                    weighting: training::Weighting::Dynamic,
                    ..tc.clone()
                };
                let out = training::train_qmf(&train, Some(&eval), &models, &c)?;
                trained.push((method, out.classifier, Some(out.report)));
            }
            Method::StaticLate => {
                let out = training::train_static(&train, Some(&eval), &models, &tc)?;
                trained.push((method, out.classifier, Some(out.report)));
            }
            Method::Unimodal(j) => {
                if j >= m {
                    return Err(Error::config(format!("{method}: dataset has {m} modalities")));
                }
                if unimodal.is_none() {
                    unimodal = Some(training::train_unimodal(&train, Some(&eval), &models, &tc)?);
                }
                let out = unimodal.as_ref().expect("trained above");
                trained.push((method, out.classifier.unimodal(j)?, Some(out.report.clone())));
            }
        }
    }
    Ok(SeedRun {
        seed,
        train,
        eval,
        trained,
    })
}

/// Runs `f` for every configured seed on the worker pool, in seed order.
pub fn for_each_seed<T, F>(cfg: &ExperimentConfig, mode: Parallelism, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    map_indexed(cfg.seeds.len(), mode, |i| f(cfg.seeds[i]))
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierManifest {
    version: u32,
    method: Method,
    seed: u64,
    estimator: EstimatorKind,
    temperatures: Vec<f64>,
    policy: WeightPolicy,
    modalities: usize,
}

pub fn checkpoint_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.to_string()).join(format!("checkpoint_{seed}"))
}

pub fn save_classifier(dir: &Path, method: Method, seed: u64, clf: &QmfClassifier) -> Result<()> {
    let manifest = ClassifierManifest {
        version: 1,
        method,
        seed,
        estimator: clf.estimator,
        temperatures: clf.temperatures.clone(),
        policy: clf.policy.clone(),
        modalities: clf.models.len(),
    };
    io::write_json(&dir.join("classifier.json"), &manifest)?;
    for (j, m) in clf.models.iter().enumerate() {
        m.save(&dir.join(format!("modality_{j}")))?;
    }
    Ok(())
}

pub fn load_classifier(dir: &Path) -> Result<QmfClassifier> {
    let path = dir.join("classifier.json");
    let manifest: ClassifierManifest = match io::read_json(&path) {
        Err(Error::NotFound { path, .. }) => {
            return Err(Error::NotFound {
                path,
                hint: "run `qmf train` with the same config and --out first".into(),
            })
        }
        other => other?,
    };
    let models = (0..manifest.modalities)
        .map(|j| UnimodalModel::load(&dir.join(format!("modality_{j}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(QmfClassifier {
        models,
        policy: manifest.policy,
        estimator: manifest.estimator,
        temperatures: manifest.temperatures,
    })
}

fn load_seed(cfg: &ExperimentConfig, root: &Path, seed: u64) -> Result<SeedRun> {
    let (train, eval) = cfg.splits(seed)?;
    let trained = cfg
        .methods
        .iter()
        .map(|&m| Ok((m, load_classifier(&checkpoint_dir(root, m, seed))?, None)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        train,
        eval,
        trained,
    })
}

/// Writes reports, clean-eval weights and checkpoints for one seed.
pub fn write_seed_outputs(run: &SeedRun, out: &Path, checkpoints: bool) -> Result<()> {
    for (method, clf, report) in &run.trained {
        let dir = out.join(method.to_string());
        if let Some(r) = report {
            io::write_json(&dir.join(format!("report_{}.json", run.seed)), r)?;
        }
        let logits = clf.logits(&run.eval)?;
        let w = clf.weights(&logits)?;
        fusion::write_weights_csv(&dir.join(format!("weights_{}.csv", run.seed)), &w)?;
        if checkpoints {
            save_classifier(&checkpoint_dir(out, *method, run.seed), *method, run.seed, clf)?;
        }
    }
    Ok(())
}

/// `cmd_train`: trains every method for every seed and writes per-seed outputs.
/// Seeds that finish are written even if another seed fails.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, checkpoints: bool, mode: Parallelism) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let results = for_each_seed(cfg, mode, |seed| train_seed(cfg, seed));
    let mut runs = Vec::new();
    let mut err = None;
    for r in results {
        match r {
            Ok(run) => {
                write_seed_outputs(&run, out, checkpoints)?;
                runs.push(run);
            }
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    }
    match err {
        Some(e) => Err(e),
        None => Ok(runs),
    }
}

// ---- sweep ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub method: Method,
    pub noise_kind: String,
    pub noise_param: f64,
    pub seed: u64,
    pub accuracy: f64,
    /// `r(w^m, l^m)` per modality on the noisy eval split; `None` when undefined.
    pub pearson: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub noise_kind: String,
    pub noise_param: f64,
    pub mean_acc: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_acc: f64,
    pub worst_acc: f64,
    /// Mean over seeds of the per-modality correlation, where defined.
    pub mean_pearson: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub version: u32,
    pub rows: Vec<MetricsRow>,
    pub records: Vec<SeedRecord>,
}

impl MetricsTable {
    /// Aggregates per-seed records; rows keep first-appearance order of
    /// `(method, noise_kind, noise_param)`.
    pub fn from_records(records: Vec<SeedRecord>) -> Self {
        let mut keys: Vec<(Method, String, f64)> = Vec::new();
        for r in &records {
            let k = (r.method, r.noise_kind.clone(), r.noise_param);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let rows = keys
            .into_iter()
            .map(|(method, kind, param)| {
                let group: Vec<&SeedRecord> = records
                    .iter()
                    .filter(|r| r.method == method && r.noise_kind == kind && r.noise_param == param)
                    .collect();
                let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
                let m = group.iter().map(|r| r.pearson.len()).max().unwrap_or(0);
                let mean_pearson = (0..m)
                    .map(|j| {
                        let vals: Vec<f64> = group
                            .iter()
                            .filter_map(|r| r.pearson.get(j).copied().flatten())
                            .collect();
                        (!vals.is_empty()).then(|| stats::mean(&vals))
                    })
                    .collect();
                MetricsRow {
                    method,
                    noise_kind: kind,
                    noise_param: param,
                    mean_acc: stats::mean(&acc),
                    std_acc: stats::std_sample(&acc),
                    worst_acc: acc.iter().copied().fold(f64::INFINITY, f64::min),
                    mean_pearson,
                }
            })
            .collect();
        Self {
            version: METRICS_VERSION,
            rows,
            records,
        }
    }

    pub fn row(&self, method: Method, noise_param: f64) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.noise_param == noise_param)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,noise_kind,noise_param,mean_acc,std_acc,worst_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                r.noise_kind,
                io::format_f64(r.noise_param),
                io::format_f64(r.mean_acc),
                io::format_f64(r.std_acc),
                io::format_f64(r.worst_acc)
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_text(&dir.join("metrics.csv"), &self.to_csv())?;
        io::write_json(&dir.join("metrics.json"), self)
    }
}

/// Correlation of each modality's weights with its per-sample loss.
pub fn weight_loss_correlation(weights: &FusionWeights, logits: &[Matrix], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    logits
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let loss = per_sample_cross_entropy(z, labels)?;
            let w = weights.column(j);
            if stats::is_constant(&w) || stats::is_constant(&loss) {
                Ok(None)
            } else {
                stats::pearson(&w, &loss).map(Some)
            }
        })
        .collect()
}

fn evaluate_seed(cfg: &ExperimentConfig, run: &SeedRun) -> Result<Vec<SeedRecord>> {
    let mut records = Vec::new();
    for noise in &cfg.noise_grid {
        let noisy = data::inject_noise(&run.eval, &noise_for(noise, run.seed))?;
        for (method, clf, _) in &run.trained {
            let logits = clf.logits(&noisy)?;
            let (w, fused) = clf.predict_from_logits(&logits)?;
            records.push(SeedRecord {
                method: *method,
                noise_kind: noise.kind.name().to_string(),
                noise_param: noise.param(),
                seed: run.seed,
                accuracy: training::accuracy(&fused.labels, noisy.labels()),
                pearson: weight_loss_correlation(&w, &logits, noisy.labels())?,
            });
        }
    }
    Ok(records)
}

/// `cmd_sweep`: evaluates every method at every noise point and seed.
/// With `checkpoints` the trained classifiers are loaded instead of trained.
pub fn run_sweep(cfg: &ExperimentConfig, checkpoints: Option<&Path>, mode: Parallelism) -> Result<MetricsTable> {
    cfg.validate()?;
    if cfg.noise_grid.is_empty() {
        return Err(Error::config("sweep needs a non-empty noise_grid"));
    }
    let per_seed = first_error(for_each_seed(cfg, mode, |seed| {
        let run = match checkpoints {
            Some(root) => load_seed(cfg, root, seed)?,
            None => train_seed(cfg, seed)?,
        };
        evaluate_seed(cfg, &run)
    }))?;
    // order: noise point, method, seed
    let mut records: Vec<SeedRecord> = per_seed.into_iter().flatten().collect();
    let grid_pos = |r: &SeedRecord| {
        cfg.noise_grid
            .iter()
            .position(|n| n.kind.name() == r.noise_kind && n.param() == r.noise_param)
            .unwrap_or(usize::MAX)
    };
    let method_pos = |r: &SeedRecord| cfg.methods.iter().position(|m| *m == r.method).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (grid_pos(r), method_pos(r), cfg.seeds.iter().position(|s| *s == r.seed)));
    Ok(MetricsTable::from_records(records))
}

// ---- bound ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub reports: Vec<BoundReport>,
    pub holds: usize,
    pub trials: usize,
}

/// One bound trial: fit scorers on a fresh training draw, measure on a fresh
/// evaluation draw from the same generator.
pub fn bound_trial(cfg: &ExperimentConfig, seed: u64, mode: Parallelism) -> Result<BoundReport> {
    if cfg.model.architecture != Architecture::Linear {
        return Err(Error::config(
            "bound reports need linear scorers; set model.architecture to linear",
        ));
    }
    let spec = match &cfg.dataset {
        DatasetSource::Synthetic(s) => s,
        DatasetSource::Path(_) => {
            return Err(Error::config("bound reports need a synthetic dataset to draw fresh samples"))
        }
    };
    if spec.num_classes != 2 {
        return Err(Error::config("bound reports are two-class only"));
    }
    let b = &cfg.bound;
    let base = spec.seed.wrapping_add(seed);
    let train = data::generate(&SyntheticSpec {
        seed: base,
        ..spec.clone()
    })?;
    let eval = data::generate(&SyntheticSpec {
        seed: mix_seed(base, 0xE7A1),
        num_samples: b.eval_samples,
        ..spec.clone()
    })?;
    let y = theory::sign_labels(train.labels())?;
    let scorers = train
        .modalities()
        .iter()
        .map(|x| LinearScorer::fit(x, &y, b.norm_bound, b.fit_steps, b.fit_lr))
        .collect::<Result<Vec<_>>>()?;
    let m = train.num_modalities();
    let temperature = cfg.train.temperatures_for(m)[0];
    let mut model = TwoClassFusion {
        scorers,
        policy: WeightPolicy::uniform(m),
        estimator: cfg.train.estimator,
        temperature,
    };
    if b.static_weights {
        model.policy = WeightPolicy::fixed(cfg.train.w_target_for(m));
    } else {
        model.policy.normalize = cfg.train.normalize_weights;
        model.policy.clamp = cfg.train.clamp_weights;
        model.calibrate_on(&train, &cfg.train.w_target_for(m), cfg.train.alpha_scale)?;
    }
    theory::bound_report(&model, &train, &eval, b.delta, b.rademacher_draws, seed, mode)
}

/// `cmd_bound`: one report per seed plus a summary.
pub fn run_bound(cfg: &ExperimentConfig, mode: Parallelism) -> Result<BoundSummary> {
    cfg.validate()?;
    let reports = first_error(for_each_seed(cfg, mode, |seed| bound_trial(cfg, seed, mode)))?;
    Ok(BoundSummary {
        version: METRICS_VERSION,
        seeds: cfg.seeds.clone(),
        holds: reports.iter().filter(|r| r.holds()).count(),
        trials: reports.len(),
        reports,
    })
}

// ---- correlate ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub estimator: String,
    pub seed: u64,
    pub modality: usize,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub version: u32,
    pub source: Method,
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,seed,modality,pearson\n");
        for r in &self.rows {
            let v = r.pearson.map(io::format_f64).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!("{},{},{},{v}\n", r.estimator, r.seed, r.modality));
        }
        out
    }
}

fn correlation_source(cfg: &ExperimentConfig) -> Method {
    cfg.correlate
        .source
        .or_else(|| cfg.methods.iter().copied().find(|m| m.is_qmf()))
        .unwrap_or(cfg.methods[0])
}

/// Weights, losses and correlation for every estimator on one seed's checkpoints.
/// Each estimator is calibrated on the training split and applied to the
/// (optionally noisy) eval split.
pub fn correlate_seed(
    cfg: &ExperimentConfig,
    run: &SeedRun,
    source: Method,
    dump: Option<&Path>,
) -> Result<Vec<CorrelationRow>> {
    let clf = run
        .classifier(source)
        .ok_or_else(|| Error::config(format!("correlate source {source} is not among the methods")))?;
    let eval = match &cfg.correlate.noise {
        Some(n) => data::inject_noise(&run.eval, &noise_for(n, run.seed))?,
        None => run.eval.clone(),
    };
    let m = clf.models.len();
    let train_logits = clf.logits(&run.train)?;
    let eval_logits = clf.logits(&eval)?;
    let losses = eval_logits
        .iter()
        .map(|z| per_sample_cross_entropy(z, eval.labels()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = dump {
        let cols: Vec<Vec<f64>> = losses.clone();
        let header: Vec<String> = (0..m).map(|j| format!("loss_{j}")).collect();
        io::write_matrix_csv(&dir.join(format!("losses_{}.csv", run.seed)), &Matrix::from_columns(&cols)?, Some(&header))?;
    }
    let mut rows = Vec::new();
    let mut variants: Vec<(String, QmfClassifier)> = Vec::new();
    for kind in EstimatorKind::ALL {
        let mut c = QmfClassifier {
            estimator: kind,
            ..clf.clone()
        };
        let scores = c.scores(&train_logits)?;
        let refs: Vec<&[f64]> = scores.iter().map(|s| s.values.as_slice()).collect();
        let mut p = fusion::calibrated_policy(&refs, &cfg.train.w_target_for(m), cfg.train.alpha_scale)?;
        p.normalize = cfg.train.normalize_weights;
        p.clamp = cfg.train.clamp_weights;
        c.policy = p;
        variants.push((kind.name().to_string(), c));
    }
    variants.push((
        "static".to_string(),
        QmfClassifier {
            policy: WeightPolicy::fixed(cfg.train.w_target_for(m)),
            ..clf.clone()
        },
    ));
    for (name, c) in &variants {
        let w = c.weights(&eval_logits)?;
        if let Some(dir) = dump {
            fusion::write_weights_csv(&dir.join(format!("weights_{name}_{}.csv", run.seed)), &w)?;
        }
        for j in 0..m {
            let col = w.column(j);
            let pearson = if stats::is_constant(&col) || stats::is_constant(&losses[j]) {
                None
            } else {
                Some(stats::pearson(&col, &losses[j])?)
            };
            rows.push(CorrelationRow {
                estimator: name.clone(),
                seed: run.seed,
                modality: j,
                pearson,
            });
        }
    }
    Ok(rows)
}

/// `cmd_correlate`: per-estimator `r(w^m, l^m)` on shared checkpoints.
pub fn run_correlate(
    cfg: &ExperimentConfig,
    checkpoints: Option<&Path>,
    dump: Option<&Path>,
    mode: Parallelism,
) -> Result<CorrelationTable> {
    cfg.validate()?;
    let source = correlation_source(cfg);
    let rows = first_error(for_each_seed(cfg, mode, |seed| {
        let run = match checkpoints {
            Some(root) => {
                let (train, eval) = cfg.splits(seed)?;
                let clf = load_classifier(&checkpoint_dir(root, source, seed))?;
                SeedRun {
                    seed,
                    train,
                    eval,
                    trained: vec![(source, clf, None)],
                }
            }
            None => {
                let single = ExperimentConfig {
                    methods: vec![source],
                    ..cfg.clone()
                };
                train_seed(&single, seed)?
            }
        };
        correlate_seed(cfg, &run, source, dump)
    }))?;
    Ok(CorrelationTable {
        version: METRICS_VERSION,
        source,
        rows: rows.into_iter().flatten().collect(),
    })
}

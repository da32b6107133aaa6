//! The QMF training loop and its static / unimodal baselines.
//!
//! Each minibatch is a fresh tape: forward every modality, score uncertainty
//! on the tape, map it to weights with the current policy, fuse, and minimise
//!
//! ```text
//! L = CE(y, sum_m w^m f^m) + sum_m CE(y, f^m) + lambda * L_reg
//! ```
//!
//! where `L_reg` is a pairwise hinge that pushes weights to rank opposite to
//! the per-sample loss history `kappa`. The weight policy is recalibrated at
//! the end of every epoch and frozen when training stops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::diffcore::{argmax_rows, per_sample_cross_entropy, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedPrediction, FusionWeights, WeightPolicy};
use crate::models::{ModelConfig, UnimodalModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{stream_indexed, Purpose};
use crate::uncertainty::{EstimatorKind, UncertaintyScore};

pub const REPORT_VERSION: u32 = 1;

/// Per-sample running mean of each modality's training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    kappa: Vec<Vec<f64>>,
    counted: usize,
    start_epoch: usize,
    window: usize,
}

impl LossHistory {
    pub fn new(num_modalities: usize, n: usize, start_epoch: usize, window: usize) -> Result<Self> {
        if start_epoch < 1 || window < 1 {
            return Err(Error::config("loss history needs T_s >= 1 and T >= 1"));
        }
        Ok(Self {
            kappa: vec![vec![0.0; n]; num_modalities],
            counted: 0,
            start_epoch,
            window,
        })
    }

    pub fn kappa(&self, m: usize) -> &[f64] {
        &self.kappa[m]
    }

    pub fn epochs_counted(&self) -> usize {
        self.counted
    }

    /// Folds in one epoch of per-sample losses. Epochs before `T_s` overwrite
    /// kappa; epochs inside the window update the running mean; later epochs
    /// are ignored.
    pub fn update(&mut self, epoch: usize, per_sample: &[Vec<f64>]) -> Result<()> {
        if per_sample.len() != self.kappa.len() {
            return Err(Error::dim(format!(
                "{} loss vectors for {} modalities",
                per_sample.len(),
                self.kappa.len()
            )));
        }
        for (k, l) in self.kappa.iter().zip(per_sample) {
            if k.len() != l.len() {
                return Err(Error::dim(format!("{} losses for {} samples", l.len(), k.len())));
            }
        }
        if epoch < self.start_epoch {
            for (k, l) in self.kappa.iter_mut().zip(per_sample) {
                k.copy_from_slice(l);
            }
            return Ok(());
        }
        if epoch >= self.start_epoch + self.window || self.counted >= self.window {
            return Ok(());
        }
        self.counted += 1;
        let c = self.counted as f64;
        for (k, l) in self.kappa.iter_mut().zip(per_sample) {
            for (ki, &li) in k.iter_mut().zip(l) {
                *ki += (li - *ki) / c;
            }
        }
        Ok(())
    }
}

/// Random cyclic permutation (Sattolo); `p[i] != i` whenever `n >= 2`.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Mean over `i` of `max(0, g_i (kappa_i - kappa_{p(i)}) + |w_i - w_{p(i)}|)`
/// with `g_i = sign(w_i - w_{p(i)})` held constant. `w` is `n x 1`.
pub fn batch_reg_term(tape: &mut Tape, w: Var, kappa: &[f64], pairing: &[usize]) -> Result<Var> {
    let n = tape.value(w).rows();
    if tape.value(w).cols() != 1 || kappa.len() != n || pairing.len() != n {
        return Err(Error::dim(format!(
            "reg term: weights {:?}, {} kappas, {} pairs",
            tape.value(w).shape(),
            kappa.len(),
            pairing.len()
        )));
    }
    if n == 0 {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let wj = tape.gather_rows(w, pairing)?;
    let d = tape.sub(w, wj)?;
    let gap: Vec<f64> = {
        let dv = tape.value(d);
        (0..n)
            .map(|i| {
                let g = sign(dv.get(i, 0));
                g * (kappa[i] - kappa[pairing[i]])
            })
            .collect()
    };
    let gap = tape.constant(Matrix::column(gap)?);
    let a = tape.abs(d);
    let s = tape.add(a, gap)?;
    let h = tape.relu(s);
    tape.mean(h)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-pair hinge; `w_i` and `w_j` are `1 x 1` vars.
pub fn reg_pair_term(tape: &mut Tape, w_i: Var, w_j: Var, kappa_i: f64, kappa_j: f64) -> Result<Var> {
    let d = tape.sub(w_i, w_j)?;
    let g = sign(tape.scalar(d));
    let a = tape.abs(d);
    let s = tape.shift(a, g * (kappa_i - kappa_j));
    Ok(tape.relu(s))
}

/// The terms of the overall objective as recorded on one tape.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub fused_ce: Var,
    pub unimodal_ce: Vec<Var>,
    pub reg: Var,
}

/// Builds the overall loss. `kappa[m]` and `pairing` are indexed by batch row.
#[allow(clippy::too_many_arguments)]
pub fn overall_loss(
    tape: &mut Tape,
    fused: Var,
    unimodal: &[Var],
    labels: &[usize],
    weights: &[Var],
    kappa: &[&[f64]],
    lambda: f64,
    pairing: &[usize],
) -> Result<LossParts> {
    if weights.len() != unimodal.len() || kappa.len() != unimodal.len() {
        return Err(Error::dim(format!(
            "{} logits, {} weights, {} kappa vectors",
            unimodal.len(),
            weights.len(),
            kappa.len()
        )));
    }
    let fused_ce = tape.softmax_cross_entropy(fused, labels)?;
    let unimodal_ce = unimodal
        .iter()
        .map(|&z| tape.softmax_cross_entropy(z, labels))
        .collect::<Result<Vec<_>>>()?;
    let mut reg = batch_reg_term(tape, weights[0], kappa[0], pairing)?;
    for (&w, k) in weights.iter().zip(kappa).skip(1) {
        let r = batch_reg_term(tape, w, k, pairing)?;
        reg = tape.add(reg, r)?;
    }
    let reg = tape.scale(reg, 1.0 / weights.len() as f64);
    let mut total = fused_ce;
    for &c in &unimodal_ce {
        total = tape.add(total, c)?;
    }
    let penalty = tape.scale(reg, lambda);
    let total = tape.add(total, penalty)?;
    Ok(LossParts {
        total,
        fused_ce,
        unimodal_ce,
        reg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Dynamic,
    /// Constant `w_target` weights.
    Static,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lambda() -> f64 {
    0.1
}
fn default_start() -> usize {
    1
}
fn default_c() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// First epoch that counts toward kappa (`T_s`).
    #[serde(default = "default_start")]
    pub start_epoch: usize,
    /// Window length `T`; `None` means all epochs.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Per-modality `T^m`; `None` means 1 everywhere.
    #[serde(default)]
    pub temperatures: Option<Vec<f64>>,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub weighting: Weighting,
    /// Slope constant `c` in `alpha = -c / std(u)`.
    #[serde(default = "default_c")]
    pub alpha_scale: f64,
    /// Calibration target per modality; `None` means `1/M`.
    #[serde(default)]
    pub w_target: Option<Vec<f64>>,
    #[serde(default)]
    pub normalize_weights: bool,
    #[serde(default)]
    pub clamp_weights: bool,
    /// Let gradients reach the weights through the fused cross-entropy too.
    #[serde(default)]
    pub full_weight_grad: bool,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Energy
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if self.start_epoch < 1 {
            return Err(Error::config("start_epoch (T_s) must be >= 1"));
        }
        if self.window == Some(0) {
            return Err(Error::config("window (T) must be >= 1"));
        }
        if !(self.alpha_scale.is_finite() && self.alpha_scale > 0.0) {
            return Err(Error::config("alpha_scale must be > 0"));
        }
        self.optimizer.validate()?;
        if let Some(t) = &self.temperatures {
            if t.len() != num_modalities || t.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config(format!(
                    "need {num_modalities} positive temperatures, got {t:?}"
                )));
            }
        }
        if let Some(w) = &self.w_target {
            if w.len() != num_modalities || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config(format!(
                    "need {num_modalities} non-negative weight targets, got {w:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn temperatures_for(&self, m: usize) -> Vec<f64> {
        self.temperatures.clone().unwrap_or_else(|| vec![1.0; m])
    }

    pub fn w_target_for(&self, m: usize) -> Vec<f64> {
        self.w_target.clone().unwrap_or_else(|| vec![1.0 / m as f64; m])
    }
}

/// A trained fusion classifier with its frozen weight policy.
#[derive(Debug, Clone, PartialEq)]
pub struct QmfClassifier {
    pub models: Vec<UnimodalModel>,
    pub policy: WeightPolicy,
    pub estimator: EstimatorKind,
    pub temperatures: Vec<f64>,
}

impl QmfClassifier {
    pub fn logits(&self, ds: &MultimodalDataset) -> Result<Vec<Matrix>> {
        if ds.num_modalities() != self.models.len() {
            return Err(Error::dim(format!(
                "classifier has {} modalities, dataset {}",
                self.models.len(),
                ds.num_modalities()
            )));
        }
        self.models
            .iter()
            .zip(ds.modalities())
            .map(|(m, x)| m.predict(x))
            .collect()
    }

    pub fn scores(&self, logits: &[Matrix]) -> Result<Vec<UncertaintyScore>> {
        logits
            .iter()
            .enumerate()
            .map(|(m, z)| self.estimator.score(z, self.temperatures[m], m))
            .collect()
    }

    pub fn weights(&self, logits: &[Matrix]) -> Result<FusionWeights> {
        let n = logits.first().map(Matrix::rows).unwrap_or(0);
        if self.policy.is_static() {
            return fusion::compute_weights(&self.policy, n, &[]);
        }
        let scores = self.scores(logits)?;
        let refs: Vec<&[f64]> = scores.iter().map(|s| s.values.as_slice()).collect();
        fusion::compute_weights(&self.policy, n, &refs)
    }

    pub fn predict_from_logits(&self, logits: &[Matrix]) -> Result<(FusionWeights, FusedPrediction)> {
        let w = self.weights(logits)?;
        let fused = fusion::fuse(&w, logits)?;
        Ok((w, fused))
    }

    pub fn predict(&self, ds: &MultimodalDataset) -> Result<FusedPrediction> {
        Ok(self.predict_from_logits(&self.logits(ds)?)?.1)
    }

    pub fn accuracy(&self, ds: &MultimodalDataset) -> Result<f64> {
        Ok(accuracy(&self.predict(ds)?.labels, ds.labels()))
    }

    /// Same models with a one-hot static policy selecting modality `m`.
    pub fn unimodal(&self, m: usize) -> Result<Self> {
        if m >= self.models.len() {
            return Err(Error::config(format!("no modality {m}")));
        }
        let mut w = vec![0.0; self.models.len()];
        w[m] = 1.0;
        Ok(Self {
            policy: WeightPolicy::fixed(w),
            ..self.clone()
        })
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Qmf,
    Static,
    Unimodal,
}

/// Per-epoch series, each of length `epochs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSeries {
    pub overall: Vec<f64>,
    pub fused_ce: Vec<f64>,
    /// `unimodal_ce[m][epoch]`.
    pub unimodal_ce: Vec<Vec<f64>>,
    pub reg: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_fused_ce: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub modality: usize,
    pub input_dim: usize,
    pub l2_param_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub method: TrainMethod,
    pub seed: u64,
    pub epochs: usize,
    pub config: TrainConfig,
    pub losses: LossSeries,
    pub models: Vec<ModelSummary>,
    pub policy: WeightPolicy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub classifier: QmfClassifier,
}

pub fn train_qmf(
    train: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    models: &[ModelConfig],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(train, val, models, config, TrainMethod::Qmf)
}

/// Uniform constant weights and no regularizer.
pub fn train_static(
    train: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    models: &[ModelConfig],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        weighting: Weighting::Static,
        lambda: 0.0,
        ..config.clone()
    };
    fit(train, val, models, &cfg, TrainMethod::Static)
}

/// Each modality trained on its own cross-entropy only.
pub fn train_unimodal(
    train: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    models: &[ModelConfig],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        weighting: Weighting::Static,
        lambda: 0.0,
        ..config.clone()
    };
    fit(train, val, models, &cfg, TrainMethod::Unimodal)
}

struct EpochEval {
    per_sample_ce: Vec<Vec<f64>>,
    policy: WeightPolicy,
}

fn current_policy(
    classifier: &QmfClassifier,
    logits: &[Matrix],
    config: &TrainConfig,
) -> Result<WeightPolicy> {
    let m = logits.len();
    let mut policy = match config.weighting {
        Weighting::Static => WeightPolicy::fixed(config.w_target_for(m)),
        Weighting::Dynamic => {
            let scores = classifier.scores(logits)?;
            let refs: Vec<&[f64]> = scores.iter().map(|s| s.values.as_slice()).collect();
            fusion::calibrated_policy(&refs, &config.w_target_for(m), config.alpha_scale)?
        }
    };
    policy.normalize = config.normalize_weights;
    policy.clamp = config.clamp_weights;
    Ok(policy)
}

fn full_pass(classifier: &QmfClassifier, ds: &MultimodalDataset, config: &TrainConfig) -> Result<(Vec<Matrix>, EpochEval)> {
    let logits = classifier.logits(ds)?;
    let per_sample_ce = logits
        .iter()
        .map(|z| per_sample_cross_entropy(z, ds.labels()))
        .collect::<Result<Vec<_>>>()?;
    let policy = current_policy(classifier, &logits, config)?;
    Ok((logits, EpochEval { per_sample_ce, policy }))
}

fn fit(
    train: &MultimodalDataset,
    val: Option<&MultimodalDataset>,
    model_configs: &[ModelConfig],
    config: &TrainConfig,
    method: TrainMethod,
) -> Result<TrainOutcome> {
    let m = train.num_modalities();
    config.validate(m)?;
    if model_configs.len() != m {
        return Err(Error::config(format!(
            "{} model configs for {m} modalities",
            model_configs.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let k = train.num_classes();
    let models = model_configs
        .iter()
        .enumerate()
        .map(|(j, c)| UnimodalModel::init(c, j, train.modality(j).cols(), k))
        .collect::<Result<Vec<_>>>()?;
    let mut clf = QmfClassifier {
        models,
        policy: WeightPolicy::uniform(m),
        estimator: config.estimator,
        temperatures: config.temperatures_for(m),
    };
    let n = train.len();
    let window = config.window.unwrap_or(config.epochs);
    let mut history = LossHistory::new(m, n, config.start_epoch, window)?;

    let (_, boot) = full_pass(&clf, train, config)?;
    history.update(0, &boot.per_sample_ce)?;
    clf.policy = boot.policy;

    let mut opt = Optimizer::new(config.optimizer)?;
    let mut series = LossSeries {
        unimodal_ce: vec![Vec::with_capacity(config.epochs); m],
        ..LossSeries::default()
    };

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream_indexed(config.seed, Purpose::Batches, epoch as u32);
            order.shuffle(&mut rng);
        }
        let mut pair_rng = stream_indexed(config.seed, Purpose::Pairing, epoch as u32);
        let mut sums = BatchSums::new(m);

        for batch in order.chunks(config.batch_size) {
            let pairing = derangement(batch.len(), &mut pair_rng);
            let step = batch_step(&clf, train, batch, &pairing, &history, config, method)?;
            let total = step.values.total;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {total}"),
                });
            }
            sums.add(&step.values, batch.len());
            let mut params: Vec<&mut Matrix> = clf
                .models
                .iter_mut()
                .flat_map(|md| md.params_mut().iter_mut())
                .collect();
            opt.step(&mut params, &step.grads)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite parameters after optimizer step".into(),
                });
            }
        }

        let (logits, eval) = full_pass(&clf, train, config)?;
        history.update(epoch, &eval.per_sample_ce)?;
        clf.policy = eval.policy;
        let (_, fused) = clf.predict_from_logits(&logits)?;

        sums.finish(n, &mut series);
        series.train_accuracy.push(accuracy(&fused.labels, train.labels()));
        if let Some(v) = val {
            let vl = clf.logits(v)?;
            let (_, vf) = clf.predict_from_logits(&vl)?;
            let ce = per_sample_cross_entropy(&vf.logits, v.labels())?;
            series.val_fused_ce.push(crate::stats::mean(&ce));
            series.val_accuracy.push(accuracy(&vf.labels, v.labels()));
        }
    }

    let report = TrainReport {
        version: REPORT_VERSION,
        method,
        seed: config.seed,
        epochs: config.epochs,
        config: config.clone(),
        losses: series,
        models: clf
            .models
            .iter()
            .map(|md| ModelSummary {
                modality: md.modality(),
                input_dim: md.input_dim(),
                l2_param_norm: md.l2_param_norm(),
            })
            .collect(),
        policy: clf.policy.clone(),
    };
    Ok(TrainOutcome {
        report,
        classifier: clf,
    })
}

#[derive(Debug, Clone)]
struct StepValues {
    total: f64,
    fused_ce: f64,
    unimodal_ce: Vec<f64>,
    reg: f64,
}

struct Step {
    values: StepValues,
    grads: Vec<Matrix>,
}

struct BatchSums {
    total: f64,
    fused: f64,
    unimodal: Vec<f64>,
    reg: f64,
}

impl BatchSums {
    fn new(m: usize) -> Self {
        Self {
            total: 0.0,
            fused: 0.0,
            unimodal: vec![0.0; m],
            reg: 0.0,
        }
    }

    fn add(&mut self, v: &StepValues, size: usize) {
        let s = size as f64;
        self.total += s * v.total;
        self.fused += s * v.fused_ce;
        self.reg += s * v.reg;
        for (a, b) in self.unimodal.iter_mut().zip(&v.unimodal_ce) {
            *a += s * b;
        }
    }

    fn finish(self, n: usize, series: &mut LossSeries) {
        let n = n as f64;
        series.overall.push(self.total / n);
        series.fused_ce.push(self.fused / n);
        series.reg.push(self.reg / n);
        for (s, u) in series.unimodal_ce.iter_mut().zip(self.unimodal) {
            s.push(u / n);
        }
    }
}

/// Builds the loss for one minibatch and returns its value and parameter gradients.
fn batch_step(
    clf: &QmfClassifier,
    ds: &MultimodalDataset,
    batch: &[usize],
    pairing: &[usize],
    history: &LossHistory,
    config: &TrainConfig,
    method: TrainMethod,
) -> Result<Step> {
    let mut tape = Tape::new();
    let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
    let mut param_vars = Vec::new();
    let mut logits = Vec::with_capacity(clf.models.len());
    for (j, model) in clf.models.iter().enumerate() {
        let vars = model.bind(&mut tape);
        let x = tape.constant(ds.modality(j).select_rows(batch));
        logits.push(model.forward(&mut tape, x, &vars)?);
        param_vars.extend(vars);
    }

    let (total, values) = if method == TrainMethod::Unimodal {
        let ces = logits
            .iter()
            .map(|&z| tape.softmax_cross_entropy(z, &labels))
            .collect::<Result<Vec<_>>>()?;
        let mut total = ces[0];
        for &c in &ces[1..] {
            total = tape.add(total, c)?;
        }
        let unimodal_ce: Vec<f64> = ces.iter().map(|&c| tape.scalar(c)).collect();
        let values: Vec<Matrix> = logits.iter().map(|&z| tape.value(z).clone()).collect();
        let (_, fused) = clf.predict_from_logits(&values)?;
        let fused_ce = crate::stats::mean(&per_sample_cross_entropy(&fused.logits, &labels)?);
        let v = StepValues {
            total: tape.scalar(total),
            fused_ce,
            unimodal_ce,
            reg: 0.0,
        };
        (total, v)
    } else {
        let scores = if clf.policy.is_static() {
            Vec::new()
        } else {
            logits
                .iter()
                .enumerate()
                .map(|(j, &z)| clf.estimator.score_on_tape(&mut tape, z, clf.temperatures[j]))
                .collect::<Result<Vec<_>>>()?
        };
        let weights = fusion::weights_on_tape(&mut tape, &clf.policy, batch.len(), &scores)?;
        let fused_w: Vec<Var> = if config.full_weight_grad {
            weights.clone()
        } else {
            weights.iter().map(|&w| tape.stop_gradient(w)).collect()
        };
        let fused = fusion::fuse_on_tape(&mut tape, &fused_w, &logits)?;
        let kappa: Vec<Vec<f64>> = (0..clf.models.len())
            .map(|j| batch.iter().map(|&i| history.kappa(j)[i]).collect())
            .collect();
        let krefs: Vec<&[f64]> = kappa.iter().map(Vec::as_slice).collect();
        let parts = overall_loss(
            &mut tape,
            fused,
            &logits,
            &labels,
            &weights,
            &krefs,
            config.lambda,
            pairing,
        )?;
        let v = StepValues {
            total: tape.scalar(parts.total),
            fused_ce: tape.scalar(parts.fused_ce),
            unimodal_ce: parts.unimodal_ce.iter().map(|&c| tape.scalar(c)).collect(),
            reg: tape.scalar(parts.reg),
        };
        (parts.total, v)
    };

    let grads = tape.backward(total)?;
    let grads = param_vars
        .iter()
        .map(|&p| grads.wrt(p, tape.value(p)))
        .collect();
    Ok(Step { values, grads })
}

/// Fraction of rows whose argmax matches the label.
pub fn logits_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    accuracy(&argmax_rows(logits), labels)
}

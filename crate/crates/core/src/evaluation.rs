//! Labelled subsets, finetuning, task metrics, and the %GROW score.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_view, finetune_augment, AugmentConfig};
use crate::cohort::{Cohort, LabelValue};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::nn::{Dense, Mlp};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::schedule::CadenceTable;
use crate::seeding::{derive_seed, rng_for};
use crate::trainer::stack_images;

pub const MIN_SUBSET: usize = 20;
pub const DEFAULT_SUBSET_COUNT: usize = 7;
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Rounds an intermediate subset size down to a multiple of 10 below 100, else of 100.
pub fn round_subset_size(raw: f64) -> usize {
    // Guard against values like 99.99999999 that are 100 in exact arithmetic.
    let raw = (raw + 1e-9).floor() as usize;
    if raw < 100 {
        raw / 10 * 10
    } else {
        raw / 100 * 100
    }
}

/// Geometric progression of `count` sizes from 20 to `total`.
///
/// Intermediate sizes are rounded with [`round_subset_size`]; `total` is kept as is.
/// Sizes that collapse onto a neighbour after rounding are dropped, so small totals
/// can yield fewer than `count` sizes.
pub fn subset_sizes(total: usize, count: usize) -> Result<Vec<usize>> {
    if total < MIN_SUBSET {
        return Err(Error::InvalidConfig(format!("need at least {MIN_SUBSET} labelled samples, got {total}")));
    }
    if count < 2 {
        return Ok(vec![total]);
    }
    let ratio = total as f64 / MIN_SUBSET as f64;
    let mut sizes = vec![MIN_SUBSET];
    for k in 1..count - 1 {
        let raw = MIN_SUBSET as f64 * ratio.powf(k as f64 / (count - 1) as f64);
        let size = round_subset_size(raw);
        if size > *sizes.last().unwrap() && size < total {
            sizes.push(size);
        }
    }
    if total > *sizes.last().unwrap() {
        sizes.push(total);
    }
    Ok(sizes)
}

/// Largest-remainder apportionment of `size` over class counts, with at least one per class
/// whenever `size` allows it.
pub fn apportion(class_counts: &[usize], size: usize) -> Vec<usize> {
    let population: usize = class_counts.iter().sum();
    if population == 0 {
        return vec![0; class_counts.len()];
    }
    let quotas: Vec<f64> = class_counts.iter().map(|&c| size as f64 * c as f64 / population as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut remaining = size - alloc.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if alloc[c] < class_counts[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }
    let nonempty = class_counts.iter().filter(|&&c| c > 0).count();
    if size >= nonempty {
        for c in 0..alloc.len() {
            if class_counts[c] > 0 && alloc[c] == 0 {
                log::warn!("class {c} would receive no samples; enforcing one");
                let donor = (0..alloc.len()).max_by_key(|&d| (alloc[d], std::cmp::Reverse(d))).expect("nonempty");
                alloc[donor] -= 1;
                alloc[c] = 1;
            }
        }
    }
    alloc
}

/// Class-proportional sample of `size` indices into `labels`, sorted ascending.
pub fn stratified_subset<T: Ord + Clone>(labels: &[T], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > labels.len() {
        return Err(Error::InvalidConfig(format!("subset of {size} from {} labels", labels.len())));
    }
    let mut classes: BTreeMap<T, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l.clone()).or_default().push(i);
    }
    let counts: Vec<usize> = classes.values().map(Vec::len).collect();
    let alloc = apportion(&counts, size);
    let mut out = Vec::with_capacity(size);
    for (c, (members, take)) in classes.values().zip(alloc).enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut rng_for(seed, &[c as u64]));
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Uniform sample of `size` indices out of `0..n`, sorted ascending.
pub fn uniform_subset(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::InvalidConfig(format!("subset of {size} from {n} samples")));
    }
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng_for(seed, &[]));
    all.truncate(size);
    all.sort_unstable();
    Ok(all)
}

/// Finetuning learning rate for a labelled subset of `m` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrScaling {
    pub base: f64,
    pub intercept: f64,
    pub reference_size: usize,
}

impl Default for LrScaling {
    fn default() -> Self {
        Self { base: 5e-4, intercept: 9e-4, reference_size: 400 }
    }
}

impl LrScaling {
    pub fn at(&self, m: usize) -> f64 {
        if m >= self.reference_size {
            return self.base;
        }
        let frac = m as f64 / self.reference_size as f64;
        self.intercept + frac * (self.base - self.intercept)
    }
}

pub fn scaled_lr(m: usize) -> f64 {
    LrScaling::default().at(m)
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Regression,
}

impl TaskKind {
    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Binary => "auc",
            TaskKind::Regression => "mae",
        }
    }

    /// Whether larger metric values are better.
    pub fn higher_is_better(self) -> bool {
        self == TaskKind::Binary
    }

    pub fn from_metric(metric: &str) -> Option<Self> {
        match metric {
            "auc" => Some(TaskKind::Binary),
            "mae" => Some(TaskKind::Regression),
            _ => None,
        }
    }
}

/// Performance of a predictor that ignores the image.
pub fn null_performance(kind: TaskKind, train_targets: &[f64], test_targets: &[f64]) -> Result<f64> {
    match kind {
        TaskKind::Binary => Ok(0.5),
        TaskKind::Regression => {
            if train_targets.is_empty() {
                return Err(Error::EmptyInput("no training targets".into()));
            }
            let mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
            mae(&vec![mean; test_targets.len()], test_targets)
        }
    }
}

/// Per-subset mean performances with their variances over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowInputs {
    pub pretrained: Vec<f64>,
    pub baseline: Vec<f64>,
    pub null: f64,
    pub epsilon: f64,
    pub pretrained_var: Vec<f64>,
    pub baseline_var: Vec<f64>,
}

impl GrowInputs {
    pub fn new(pretrained: Vec<f64>, baseline: Vec<f64>, null: f64) -> Self {
        let m = pretrained.len();
        Self { pretrained, baseline, null, epsilon: DEFAULT_EPSILON, pretrained_var: vec![0.0; m], baseline_var: vec![0.0; m] }
    }

    /// Flips sign so that higher is better, for error metrics.
    pub fn negated(&self) -> Self {
        Self {
            pretrained: self.pretrained.iter().map(|v| -v).collect(),
            baseline: self.baseline.iter().map(|v| -v).collect(),
            null: -self.null,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.pretrained.len();
        if m == 0 || self.baseline.len() != m || self.pretrained_var.len() != m || self.baseline_var.len() != m {
            return Err(Error::ShapeMismatch("pretrained, baseline and variance series must share one nonzero length".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Indices whose baseline margin over the null model is clamped to epsilon.
    pub fn clamped(&self) -> Vec<usize> {
        (0..self.baseline.len()).filter(|&i| self.baseline[i] - self.null < self.epsilon).collect()
    }
}

/// Mean relative improvement over the baseline, measured from the null model, in percent.
pub fn grow(inputs: &GrowInputs) -> Result<f64> {
    inputs.validate()?;
    let m = inputs.pretrained.len() as f64;
    let sum: f64 = inputs
        .pretrained
        .iter()
        .zip(&inputs.baseline)
        .map(|(p, r)| (p - inputs.null) / (r - inputs.null).max(inputs.epsilon) - 1.0)
        .sum();
    Ok(100.0 / m * sum)
}

/// Standard deviation of [`grow`] from a second-order expansion of each ratio's variance.
///
/// Pretrained and baseline runs are treated as independent. Clamped denominators are constants.
pub fn grow_std(inputs: &GrowInputs) -> Result<f64> {
    inputs.validate()?;
    let m = inputs.pretrained.len() as f64;
    let mut total = 0.0;
    for i in 0..inputs.pretrained.len() {
        let mx = inputs.pretrained[i] - inputs.null;
        let raw_y = inputs.baseline[i] - inputs.null;
        let (my, var_y) = if raw_y < inputs.epsilon { (inputs.epsilon, 0.0) } else { (raw_y, inputs.baseline_var[i]) };
        // (mx/my)^2 (vx/mx^2 + vy/my^2), written so mx = 0 needs no special case.
        total += inputs.pretrained_var[i] / (my * my) + mx * mx * var_y / my.powi(4);
    }
    Ok((100.0 / m) * total.sqrt())
}

/// Labelled data for one task, split by patient.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub kind: TaskKind,
    pub train_images: Vec<GrayImage>,
    /// Evaluation views of `train_images`, one row each.
    pub train_inputs: Array2<f64>,
    pub train_targets: Vec<f64>,
    pub val_inputs: Array2<f64>,
    pub val_targets: Vec<f64>,
    pub test_inputs: Array2<f64>,
    pub test_targets: Vec<f64>,
}

impl ProbeData {
    pub fn build(kind: TaskKind, images: &[GrayImage], targets: &[Option<f64>], splits: &Splits, augment: &AugmentConfig) -> Result<Self> {
        let part = |idx: &[usize]| -> Result<(Vec<GrayImage>, Array2<f64>, Vec<f64>)> {
            let keep: Vec<usize> = idx.iter().copied().filter(|&i| targets[i].is_some()).collect();
            let raw: Vec<GrayImage> = keep.iter().map(|&i| images[i].clone()).collect();
            let views = raw.iter().map(|img| eval_view(img, augment)).collect::<Result<Vec<_>>>()?;
            let inputs = if views.is_empty() { Array2::zeros((0, augment.output_len())) } else { stack_images(&views)? };
            Ok((raw, inputs, keep.iter().map(|&i| targets[i].unwrap()).collect()))
        };
        let (train_images, train_inputs, train_targets) = part(&splits.train)?;
        let (_, val_inputs, val_targets) = part(&splits.val)?;
        let (_, test_inputs, test_targets) = part(&splits.test)?;
        if train_targets.is_empty() || val_targets.is_empty() || test_targets.is_empty() {
            return Err(Error::EmptyInput("a split has no labelled records".into()));
        }
        Ok(Self { kind, train_images, train_inputs, train_targets, val_inputs, val_targets, test_inputs, test_targets })
    }

    /// Range of the training targets, used to scale regression labels to [-1, 1].
    pub fn target_range(&self) -> (f64, f64) {
        let lo = self.train_targets.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.train_targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn null_performance(&self) -> Result<f64> {
        null_performance(self.kind, &self.train_targets, &self.test_targets)
    }

    /// Indices into the training pool for one labelled subset.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Vec<usize>> {
        match self.kind {
            TaskKind::Binary => {
                let labels: Vec<bool> = self.train_targets.iter().map(|&t| t > 0.5).collect();
                stratified_subset(&labels, size, seed)
            }
            TaskKind::Regression => uniform_subset(self.train_targets.len(), size, seed),
        }
    }
}

/// Numeric targets for `task`, and whether the task is binary.
///
/// A task is binary when its values take exactly two distinct values: numbers 0 and 1, or two class names
/// (the later name in sorted order is the positive class).
pub fn task_targets(cohort: &Cohort, task: &str) -> Result<(TaskKind, Vec<Option<f64>>)> {
    let values: Vec<Option<&LabelValue>> = cohort.records().iter().map(|r| r.label(task)).collect();
    let classes: BTreeSet<&str> = values
        .iter()
        .flatten()
        .filter_map(|v| match v {
            LabelValue::Class(c) => Some(c.as_str()),
            LabelValue::Number(_) => None,
        })
        .collect();
    if values.iter().all(Option::is_none) {
        return Err(Error::InvalidConfig(format!("no record carries label `{task}`")));
    }
    if !classes.is_empty() {
        if classes.len() != 2 || values.iter().flatten().any(|v| v.as_number().is_some()) {
            return Err(Error::InvalidConfig(format!("label `{task}` mixes numbers and classes or has more than two classes")));
        }
        let positive = *classes.iter().next_back().unwrap();
        let t = values
            .iter()
            .map(|v| v.map(|v| matches!(v, LabelValue::Class(c) if c == positive) as u8 as f64))
            .collect();
        return Ok((TaskKind::Binary, t));
    }
    let t: Vec<Option<f64>> = values.iter().map(|v| v.and_then(LabelValue::as_number)).collect();
    let binary = t.iter().flatten().all(|&v| v == 0.0 || v == 1.0);
    Ok((if binary { TaskKind::Binary } else { TaskKind::Regression }, t))
}

/// Patient-level train / validation / test partition of record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_patients(cohort: &Cohort, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(val_fraction > 0.0 && test_fraction > 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::InvalidConfig("split fractions must be positive and sum below 1".into()));
    }
    let mut patients = cohort.patients();
    patients.shuffle(&mut rng_for(seed, &[]));
    let n = patients.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::InvalidConfig(format!("{n} patients are too few to split")));
    }
    let role: BTreeMap<&str, u8> = patients
        .iter()
        .enumerate()
        .map(|(k, p)| (p.as_str(), if k < n_val { 1 } else if k < n_val + n_test { 2 } else { 0 }))
        .collect();
    let mut s = Splits { train: vec![], val: vec![], test: vec![] };
    for (i, r) in cohort.records().iter().enumerate() {
        match role[r.patient_id.as_str()] {
            1 => s.val.push(i),
            2 => s.test.push(i),
            _ => s.train.push(i),
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder and head train together on weakly augmented views.
    EndToEnd,
    /// Only the head trains, on standardized frozen features of evaluation views.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrScaling,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::EndToEnd,
            epochs: 100,
            batch_size: 400,
            lr: LrScaling::default(),
            adam: AdamConfig { weight_decay: 1.5e-6, ..AdamConfig::default() },
        }
    }
}

/// Outcome of finetuning on one labelled subset.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub test: f64,
    pub best_validation: f64,
    pub best_step: usize,
    /// (step, validation metric) at every validation point.
    pub history: Vec<(usize, f64)>,
}

/// Position of the best validation score: highest AUC or lowest MAE, earliest on ties.
pub fn select_best(scores: &[f64], kind: TaskKind) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if kind.higher_is_better() => s > scores[b],
            Some(b) => s < scores[b],
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Head {
    kind: TaskKind,
    range: (f64, f64),
}

impl Head {
    fn scale(&self, y: f64) -> f64 {
        let (lo, hi) = self.range;
        if hi > lo {
            2.0 * (y - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    fn unscale(&self, t: f64) -> f64 {
        let (lo, hi) = self.range;
        (t + 1.0) / 2.0 * (hi - lo) + lo
    }

    /// Loss gradient with respect to the logits, averaged over the batch.
    fn grad(&self, logits: &Array1<f64>, targets: &[f64]) -> Array1<f64> {
        let n = targets.len() as f64;
        Array1::from_iter(logits.iter().zip(targets).map(|(&a, &y)| match self.kind {
            TaskKind::Binary => (sigmoid(a) - y) / n,
            TaskKind::Regression => {
                let t = a.tanh();
                2.0 * (t - self.scale(y)) * (1.0 - t * t) / n
            }
        }))
    }

    fn metric(&self, logits: &Array1<f64>, targets: &[f64]) -> Result<f64> {
        match self.kind {
            TaskKind::Binary => {
                let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
                auc(&logits.to_vec(), &labels)
            }
            TaskKind::Regression => {
                let preds: Vec<f64> = logits.iter().map(|a| self.unscale(a.tanh())).collect();
                mae(&preds, targets)
            }
        }
    }
}

/// Frozen features for a linear probe, standardized with the labelled subset's statistics.
struct Frozen {
    train: Array2<f64>,
    val: Array2<f64>,
    test: Array2<f64>,
}

impl Frozen {
    fn new(encoder: &Mlp, data: &ProbeData, subset: &[usize]) -> Self {
        let train = encoder.forward(&data.train_inputs.select(Axis(0), subset));
        let mean = train.mean_axis(Axis(0)).expect("nonempty subset");
        let std = train.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        let standardize = |f: Array2<f64>| (f - &mean) / &std;
        Self {
            val: standardize(encoder.forward(&data.val_inputs)),
            test: standardize(encoder.forward(&data.test_inputs)),
            train: standardize(train),
        }
    }
}

/// Attaches a linear head to `encoder`, trains on `subset` of the training pool and
/// reports test performance of the best validation checkpoint.
pub fn finetune(encoder: &Mlp, data: &ProbeData, subset: &[usize], augment: &AugmentConfig, cfg: &FinetuneConfig, seed: u64) -> Result<FinetuneResult> {
    if subset.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::EmptyInput("empty subset or zero epochs".into()));
    }
    let targets: Vec<f64> = subset.iter().map(|&i| data.train_targets[i]).collect();
    if data.kind == TaskKind::Binary && targets.iter().all(|&t| (t > 0.5) == (targets[0] > 0.5)) {
        return Err(Error::SingleClass);
    }
    let head_spec = Head { kind: data.kind, range: data.target_range() };
    let mut encoder = encoder.clone();
    let mut head = Dense::zeros(encoder.output_dim(), 1);
    let train_encoder = cfg.mode == FinetuneMode::EndToEnd;
    let mut sizes = vec![head.weight.len(), head.bias.len()];
    if train_encoder {
        sizes.extend(encoder.blocks("encoder").iter().map(|(_, b)| b.len()));
    }
    let mut adam = AdamState::new(&sizes);
    let lr = cfg.lr.at(subset.len());

    let frozen = (!train_encoder).then(|| Frozen::new(&encoder, data, subset));
    let steps_per_epoch = subset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let cadence = CadenceTable::reference(steps_per_epoch);

    let evaluate = |encoder: &Mlp, head: &Dense, test: bool| -> Result<f64> {
        let (inputs, targets, frozen_features) = match (test, &frozen) {
            (false, f) => (&data.val_inputs, &data.val_targets, f.as_ref().map(|f| &f.val)),
            (true, f) => (&data.test_inputs, &data.test_targets, f.as_ref().map(|f| &f.test)),
        };
        let features = match frozen_features {
            Some(f) => head.forward(f),
            None => head.forward(&encoder.forward(inputs)),
        };
        head_spec.metric(&features.column(0).to_owned(), targets)
    };

    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &[0, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch_targets: Vec<f64> = chunk.iter().map(|&k| targets[k]).collect();
            let (features, cache) = match &frozen {
                Some(f) => (f.train.select(Axis(0), chunk), None),
                None => {
                    let views = chunk
                        .iter()
                        .map(|&k| finetune_augment(&data.train_images[subset[k]], augment, derive_seed(seed, &[1, step as u64, k as u64])))
                        .collect::<Result<Vec<_>>>()?;
                    let (f, c) = encoder.forward_cached(&stack_images(&views)?);
                    (f, Some(c))
                }
            };
            let logits = head.forward(&features).column(0).to_owned();
            let g = head_spec.grad(&logits, &batch_targets).insert_axis(Axis(1));
            let head_grad = Dense { weight: features.t().dot(&g), bias: g.sum_axis(Axis(0)) };
            let mut grads: Vec<(String, Vec<f64>)> = vec![
                ("head.weight".into(), head_grad.weight.iter().copied().collect()),
                ("head.bias".into(), head_grad.bias.to_vec()),
            ];
            if let Some(cache) = cache {
                let grad_features = g.dot(&head.weight.t());
                let (enc_grad, _) = encoder.backward(&cache, &grad_features);
                grads.extend(enc_grad.blocks("encoder").into_iter().map(|(n, b)| (n, b.to_vec())));
            }
            let grad_refs: Vec<(String, &[f64])> = grads.iter().map(|(n, b)| (n.clone(), b.as_slice())).collect();
            {
                let Dense { weight, bias } = &mut head;
                let mut params: Vec<(String, &mut [f64])> = vec![
                    ("head.weight".into(), weight.as_slice_mut().expect("standard layout")),
                    ("head.bias".into(), bias.as_slice_mut().expect("standard layout")),
                ];
                if train_encoder {
                    params.extend(encoder.blocks_mut("encoder"));
                }
                adam_step(&mut params, &grad_refs, &mut adam, lr, &cfg.adam)?;
            }
            step += 1;
            if cadence.should_validate(step) || step == total_steps {
                let val = evaluate(&encoder, &head, false)?;
                history.push((step, val));
                let improved = match best {
                    None => true,
                    Some((b, _, _)) if data.kind.higher_is_better() => val > b,
                    Some((b, _, _)) => val < b,
                };
                if improved {
                    let test = evaluate(&encoder, &head, true)?;
                    best = Some((val, step, test));
                }
            }
        }
    }
    let (best_validation, best_step, test) = best.expect("at least one validation point");
    Ok(FinetuneResult { test, best_validation, best_step, history })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub task: String,
    pub subset_size: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub const NULL_METRIC: &str = "null";

pub fn write_results<W: Write>(rows: &[ResultRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(source: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(source);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Finetunes on every (subset size, seed) pair and records test performance, plus one null row per task.
pub fn probe(encoder: &Mlp, variant: &str, task: &str, data: &ProbeData, sizes: &[usize], seeds: &[u64], augment: &AugmentConfig, cfg: &FinetuneConfig) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let metric = data.kind.metric();
    for &size in sizes {
        for &seed in seeds {
            let subset = data.subset(size, derive_seed(seed, &[size as u64]))?;
            let result = finetune(encoder, data, &subset, augment, cfg, derive_seed(seed, &[size as u64, 1]))?;
            log::info!("{variant} {task} m={size} seed={seed} {metric}={:.4}", result.test);
            rows.push(ResultRow { variant: variant.into(), task: task.into(), subset_size: size, seed, metric: metric.into(), value: result.test });
        }
    }
    let null = data.null_performance()?;
    rows.push(ResultRow { variant: variant.into(), task: task.into(), subset_size: 0, seed: 0, metric: NULL_METRIC.into(), value: null });
    Ok(rows)
}

/// One line of a %GROW report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowRow {
    pub variant: String,
    pub task: String,
    pub grow: f64,
    pub grow_std: f64,
    /// Subset sizes whose baseline denominator was clamped, `;`-separated.
    pub clamped: String,
}

#[derive(Debug, Clone, Default)]
struct Series {
    metric: Option<String>,
    values: BTreeMap<usize, Vec<f64>>,
    null: Vec<f64>,
}

fn group(rows: &[ResultRow]) -> Result<BTreeMap<(String, String), Series>> {
    let mut out: BTreeMap<(String, String), Series> = BTreeMap::new();
    for r in rows {
        let s = out.entry((r.variant.clone(), r.task.clone())).or_default();
        if r.metric == NULL_METRIC {
            s.null.push(r.value);
            continue;
        }
        match &s.metric {
            Some(m) if *m != r.metric => {
                return Err(Error::InvalidConfig(format!("task `{}` mixes metrics `{m}` and `{}`", r.task, r.metric)));
            }
            _ => s.metric = Some(r.metric.clone()),
        }
        s.values.entry(r.subset_size).or_default().push(r.value);
    }
    Ok(out)
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// %GROW of each pretrained (variant, task) series against the baseline series for the same task.
pub fn grow_report(pretrained: &[ResultRow], baseline: &[ResultRow], epsilon: f64) -> Result<Vec<GrowRow>> {
    let pre = group(pretrained)?;
    let base = group(baseline)?;
    let mut base_by_task: BTreeMap<&str, &Series> = BTreeMap::new();
    for ((_, task), s) in &base {
        if base_by_task.insert(task.as_str(), s).is_some() {
            return Err(Error::InvalidConfig(format!("baseline table has more than one variant for task `{task}`")));
        }
    }
    let mut out = Vec::new();
    for ((variant, task), p) in &pre {
        let r = base_by_task
            .get(task.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("missing keys in baseline: task `{task}`")))?;
        let p_keys: BTreeSet<usize> = p.values.keys().copied().collect();
        let r_keys: BTreeSet<usize> = r.values.keys().copied().collect();
        if p_keys != r_keys {
            let missing: Vec<String> = p_keys
                .symmetric_difference(&r_keys)
                .map(|k| format!("({task}, {k})"))
                .collect();
            return Err(Error::InvalidConfig(format!("subset grids differ; missing keys: {}", missing.join(", "))));
        }
        let metric = p.metric.clone().unwrap_or_default();
        if r.metric.as_deref() != Some(metric.as_str()) {
            return Err(Error::InvalidConfig(format!("task `{task}` uses different metrics in the two tables")));
        }
        let kind = TaskKind::from_metric(&metric).ok_or_else(|| Error::InvalidConfig(format!("unknown metric `{metric}`")))?;
        let null_values = if p.null.is_empty() { &r.null } else { &p.null };
        let null = match (kind, null_values.is_empty()) {
            (TaskKind::Binary, true) => 0.5,
            (TaskKind::Regression, true) => {
                return Err(Error::InvalidConfig(format!("no null-model row for regression task `{task}`")));
            }
            _ => mean_var(null_values).0,
        };
        let (pm, pv): (Vec<f64>, Vec<f64>) = p.values.values().map(|v| mean_var(v)).unzip();
        let (rm, rv): (Vec<f64>, Vec<f64>) = r.values.values().map(|v| mean_var(v)).unzip();
        let mut inputs = GrowInputs { pretrained: pm, baseline: rm, null, epsilon, pretrained_var: pv, baseline_var: rv };
        if !kind.higher_is_better() {
            inputs = inputs.negated();
        }
        let sizes: Vec<usize> = p.values.keys().copied().collect();
        let clamped: Vec<String> = inputs.clamped().iter().map(|&i| sizes[i].to_string()).collect();
        out.push(GrowRow {
            variant: variant.clone(),
            task: task.clone(),
            grow: grow(&inputs)?,
            grow_std: grow_std(&inputs)?,
            clamped: clamped.join(";"),
        });
    }
    Ok(out)
}

pub fn write_grow_report<W: Write>(rows: &[GrowRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

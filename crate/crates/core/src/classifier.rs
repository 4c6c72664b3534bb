//! A small 3D-convolutional video classifier and the augmentation experiment
//! comparing real-only, synthetic-only and real+synthetic training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{clips_to_tensor, load_params};
use crate::checkpoint::Checkpoint;
use crate::data::{split_dataset, LabeledVideoDataset};
use crate::error::{LddmError, Result};
use crate::graph::{softmax, Graph, Var};
use crate::nn::{conv, init_conv, init_linear, linear, Adam, BatchSampler, Bound, ParamStore, TrainConfig, TrainingLog};
use crate::tensor::Tensor;
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// `[Γ, H, W, C]` of accepted clips.
    pub clip_shape: [usize; 4],
    pub features: usize,
    /// Width of the penultimate layer.
    pub hidden: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_shape.contains(&0) || self.features == 0 || self.hidden == 0 {
            return Err(LddmError::Config("classifier dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    params: ParamStore,
}

impl ClassifierModel {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, f) = (config.clip_shape[3], config.features);
        let mut p = ParamStore::new();
        init_conv(&mut p, "cls.c1", c, f, [3, 3, 3], rng);
        init_conv(&mut p, "cls.c2", f, f, [3, 3, 3], rng);
        init_conv(&mut p, "cls.c3", f, f, [3, 3, 3], rng);
        init_linear(&mut p, "cls.fc1", f, config.hidden, 1.0, rng);
        init_linear(&mut p, "cls.fc2", config.hidden, 2, 1.0, rng);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden
    }

    /// Returns `(penultimate features [N, hidden], logits [N, 2])`.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = conv(g, p, "cls.c1", x, [1, 2, 2], [1, 1, 1])?;
        let h = g.silu(h);
        let h = conv(g, p, "cls.c2", h, [2, 2, 2], [1, 1, 1])?;
        let h = g.silu(h);
        let h = conv(g, p, "cls.c3", h, [2, 2, 2], [1, 1, 1])?;
        let h = g.silu(h);
        let h = g.global_mean(h)?;
        let feat = linear(g, p, "cls.fc1", h)?;
        let feat = g.silu(feat);
        let logits = linear(g, p, "cls.fc2", feat)?;
        Ok((feat, logits))
    }

    fn check(&self, clips: &[&VideoClip]) -> Result<()> {
        if clips.is_empty() {
            return Err(LddmError::EmptyInput("classifier batch"));
        }
        for c in clips {
            if c.shape() != self.config.clip_shape {
                return Err(LddmError::Geometry(format!(
                    "clip {:?} does not match classifier input {:?}",
                    c.shape(),
                    self.config.clip_shape
                )));
            }
        }
        Ok(())
    }

    /// Penultimate features and logits for a channel-first batch `[N, C, Γ, H, W]`.
    pub fn run_tensor(&self, x: Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.config.clip_shape;
        if x.shape().len() != 5 || x.shape()[1..] != [s[3], s[0], s[1], s[2]] {
            return Err(LddmError::ShapeMismatch {
                expected: vec![0, s[3], s[0], s[1], s[2]],
                found: x.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x);
        let (f, l) = self.forward(&mut g, &p, x)?;
        Ok((g.value(f).clone(), g.value(l).clone()))
    }

    /// Penultimate-layer features, one row per clip.
    pub fn features(&self, clips: &[&VideoClip]) -> Result<Vec<Vec<f64>>> {
        self.check(clips)?;
        let (f, _) = self.run_tensor(clips_to_tensor(clips)?)?;
        Ok(f.data().chunks(self.config.hidden).map(<[f64]>::to_vec).collect())
    }

    /// Class probabilities `[p0, p1]` per clip.
    pub fn predict_proba(&self, clips: &[&VideoClip]) -> Result<Vec<[f64; 2]>> {
        self.check(clips)?;
        let (_, l) = self.run_tensor(clips_to_tensor(clips)?)?;
        Ok(l.data()
            .chunks(2)
            .map(|row| {
                let p = softmax(row);
                [p[0], p[1]]
            })
            .collect())
    }

    pub fn predict(&self, clips: &[&VideoClip]) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(clips)?
            .into_iter()
            .map(|p| u8::from(p[1] > p[0]))
            .collect())
    }

    pub fn loss_and_grads(&self, clips: &[&VideoClip], labels: &[u8]) -> Result<(f64, Vec<Tensor>)> {
        self.check(clips)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(clips_to_tensor(clips)?);
        let (_, logits) = self.forward(&mut g, &p, x)?;
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let loss = g.cross_entropy(logits, &labels)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], self.params.collect_grads(&p, &grads)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "classifier",
            serde_json::to_value(self.config).expect("config serializes"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != "classifier" {
            return Err(LddmError::MalformedHeader(format!(
                "expected a classifier checkpoint, found {}",
                c.kind
            )));
        }
        let config: ClassifierConfig = c.arch_as()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params = load_params(&model.params, &c.params)?;
        Ok(model)
    }
}

/// Cross-entropy training with Adam.
pub fn train_classifier<R: Rng + ?Sized>(
    train: &LabeledVideoDataset,
    arch: ClassifierConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(ClassifierModel, TrainingLog)> {
    config.validate()?;
    let counts = train.class_counts();
    if counts.contains(&0) {
        return Err(LddmError::InvalidArgument(format!(
            "training set needs both classes, has counts {counts:?}"
        )));
    }
    let mut model = ClassifierModel::new(arch, rng)?;
    let mut opt = Adam::new(config.learning_rate, &model.params);
    let mut sampler = BatchSampler::new(train.len(), config.batch_size);
    let mut log = TrainingLog::default();
    let items = train.items();
    for step in 0..config.total_steps(train.len()) {
        let batch = sampler.next_batch(rng);
        let clips: Vec<&VideoClip> = batch.iter().map(|&i| &items[i].clip).collect();
        let labels: Vec<u8> = batch.iter().map(|&i| items[i].label).collect();
        let (loss, grads) = model.loss_and_grads(&clips, &labels)?;
        if !loss.is_finite() {
            return Err(LddmError::NonFiniteLoss { step, value: loss });
        }
        log.losses.push(loss);
        opt.step(&mut model.params, &grads);
    }
    Ok((model, log))
}

/// Accuracy and macro-averaged F1 of binary predictions. A class with no
/// predicted and no true members contributes F1 = 1.
pub fn accuracy_f1(predictions: &[u8], labels: &[u8]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(LddmError::EmptyInput("evaluation set"));
    }
    if predictions.len() != labels.len() {
        return Err(LddmError::InvalidArgument("one prediction per label required".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1_sum = 0.0;
    for class in 0..2u8 {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        f1_sum += if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    Ok((correct as f64 / labels.len() as f64, f1_sum / 2.0))
}

pub fn evaluate_classifier(model: &ClassifierModel, test: &LabeledVideoDataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(LddmError::EmptyInput("test set"));
    }
    let mut preds = Vec::with_capacity(test.len());
    for chunk in test.items().chunks(64) {
        let clips: Vec<&VideoClip> = chunk.iter().map(|i| &i.clip).collect();
        preds.extend(model.predict(&clips)?);
    }
    accuracy_f1(&preds, &test.labels())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    RealOnly,
    SyntheticOnly,
    RealPlusSynthetic,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::RealOnly,
        Condition::SyntheticOnly,
        Condition::RealPlusSynthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::RealOnly => "real_only",
            Condition::SyntheticOnly => "synthetic_only",
            Condition::RealPlusSynthetic => "real_plus_synthetic",
        }
    }
}

/// One (condition, fraction, seed) result. Failed cells keep their error text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub condition: Condition,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// SHA-256 over the sorted test-set source ids.
    pub test_digest: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub fraction: f64,
    pub median_accuracy: Option<f64>,
    pub median_f1: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<ExperimentCell>,
    pub summary: Vec<ConditionSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ExperimentReport {
    fn from_cells(cells: Vec<ExperimentCell>) -> Self {
        let mut summary = Vec::new();
        let mut fractions: Vec<f64> = Vec::new();
        for c in &cells {
            if !fractions.contains(&c.fraction) {
                fractions.push(c.fraction);
            }
        }
        for &fraction in &fractions {
            for condition in Condition::ALL {
                let group: Vec<&ExperimentCell> = cells
                    .iter()
                    .filter(|c| c.condition == condition && c.fraction == fraction)
                    .collect();
                let acc: Vec<f64> = group.iter().filter_map(|c| c.accuracy).collect();
                let f1: Vec<f64> = group.iter().filter_map(|c| c.f1).collect();
                summary.push(ConditionSummary {
                    condition,
                    fraction,
                    median_accuracy: median(&acc),
                    median_f1: median(&f1),
                    completed: acc.len(),
                    failed: group.len() - acc.len(),
                });
            }
        }
        Self { cells, summary }
    }

    pub fn summary_for(&self, condition: Condition, fraction: f64) -> Option<&ConditionSummary> {
        self.summary
            .iter()
            .find(|s| s.condition == condition && (s.fraction - fraction).abs() < 1e-12)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for c in &self.cells {
            w.serialize(c).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> LddmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LddmError::Io(io),
        other => LddmError::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn test_digest(test: &LabeledVideoDataset) -> String {
    let mut ids: Vec<&str> = test.items().iter().map(|i| i.source_id.as_str()).collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Runs every (fraction, seed) cell: split the real data with `seed`, train
/// one model per condition, and score all three on the same real test split.
pub fn augmentation_experiment(
    real: &LabeledVideoDataset,
    synthetic: &LabeledVideoDataset,
    fractions: &[f64],
    seeds: &[u64],
    arch: ClassifierConfig,
    config: &TrainConfig,
) -> Result<ExperimentReport> {
    if synthetic.is_empty() {
        return Err(LddmError::EmptyInput("synthetic dataset"));
    }
    if fractions.is_empty() || seeds.is_empty() {
        return Err(LddmError::InvalidArgument("need at least one fraction and one seed".into()));
    }
    config.validate()?;
    let mut cells = Vec::new();
    for (fi, &fraction) in fractions.iter().enumerate() {
        for &seed in seeds {
            let (train, test) = split_dataset(real, fraction, seed)?;
            let digest = test_digest(&test);
            for (ci, condition) in Condition::ALL.into_iter().enumerate() {
                let train_set = match condition {
                    Condition::RealOnly => Ok(train.clone()),
                    Condition::SyntheticOnly => Ok(synthetic.clone()),
                    Condition::RealPlusSynthetic => train.merged(synthetic),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ seed.rotate_left(17));
                rng.set_stream((fi * Condition::ALL.len() + ci) as u64);
                let outcome = train_set.and_then(|ts| {
                    let (model, _) = train_classifier(&ts, arch, config, &mut rng)?;
                    Ok((ts.len(), evaluate_classifier(&model, &test)?))
                });
                let (n_train, accuracy, f1, error) = match outcome {
                    Ok((n, (a, f))) => (n, Some(a), Some(f), None),
                    Err(e) => (0, None, None, Some(e.to_string())),
                };
                cells.push(ExperimentCell {
                    condition,
                    fraction,
                    seed,
                    accuracy,
                    f1,
                    n_train,
                    n_test: test.len(),
                    test_digest: digest.clone(),
                    error,
                });
            }
        }
    }
    Ok(ExperimentReport::from_cells(cells))
}

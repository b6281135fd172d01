//! Training loops for the baseline, the teacher and the distilled student.
//!
//! All three share one loop. Shuffling and initialisation both derive from
//! `TrainConfig::seed`, so a student trained with `kd_weight = 0` walks the
//! exact batch stream of the baseline and reproduces its history bit for bit.

mod metrics;

pub use metrics::{ConfusionMatrix, EpochMetrics, History, METRICS_HEADER};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Graph, TensorError};
use crate::model::{argmax_rows, build_model, Model, ModelError, Variant};
use crate::signal::{LabeledDataset, SplitDataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set has no samples for class(es) {missing:?} of {num_classes}")]
    EmptyClass { missing: Vec<usize>, num_classes: usize },
    #[error("dataset has no temporal windows; re-ingest with window construction enabled")]
    NoWindows,
    #[error("{0} sample(s) carry no label")]
    Unlabelled(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("teacher latent size {teacher} differs from student latent size {student}")]
    LatentMismatch { teacher: usize, student: usize },
    #[error("no samples to evaluate")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// λ in `CE + λ·MSE`.
    pub kd_weight: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            kd_weight: 1.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(TrainError::Config(format!("kd_weight {} must be finite and ≥ 0", self.kd_weight)));
        }
        self.adam.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Borrowed labelled inputs for one model variant.
struct Samples<'a> {
    inputs: Vec<&'a [f32]>,
    labels: Vec<usize>,
}

fn collect<'a>(items: impl Iterator<Item = (&'a [f32], Option<usize>)>) -> Result<Samples<'a>> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut unlabelled = 0;
    for (x, y) in items {
        match y {
            Some(y) => {
                inputs.push(x);
                labels.push(y);
            }
            None => unlabelled += 1,
        }
    }
    if unlabelled > 0 {
        return Err(TrainError::Unlabelled(unlabelled));
    }
    Ok(Samples { inputs, labels })
}

fn samples_for(ds: &LabeledDataset, variant: Variant) -> Result<Samples<'_>> {
    match variant {
        Variant::Narrow => collect(ds.narrow_samples().into_iter().map(|s| (s.data.as_slice(), s.label))),
        Variant::Wide => {
            if !ds.is_windowed() {
                return Err(TrainError::NoWindows);
            }
            collect(ds.windows().iter().map(|w| (w.data.as_slice(), w.label)))
        }
    }
}

fn check_classes(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(TrainError::EmptyClass {
            missing: vec![],
            num_classes,
        });
    }
    let mut seen = vec![false; num_classes];
    for &y in labels {
        if y < num_classes {
            seen[y] = true;
        }
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&c| !seen[c]).collect();
    if !missing.is_empty() {
        return Err(TrainError::EmptyClass { missing, num_classes });
    }
    Ok(())
}

const EVAL_BATCH: usize = 128;

fn predict(model: &Model, inputs: &[&[f32]]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        out.extend(model.forward_classify(chunk)?.predictions());
    }
    Ok(out)
}

/// Accuracy and confusion matrix over the model's matching payload
/// (segments for narrow models, windows for wide ones).
pub fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<(f64, ConfusionMatrix)> {
    let s = samples_for(ds, model.variant())?;
    if s.inputs.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let pred = predict(model, &s.inputs)?;
    let cm = ConfusionMatrix::from_pairs(model.spec.num_classes, &s.labels, &pred);
    Ok((cm.accuracy(), cm))
}

/// Latents of `model` for every input, row-major `[N, latent_dim]`.
pub fn features_of(model: &Model, inputs: &[&[f32]]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(inputs.len() * model.spec.latent_dim);
    for chunk in inputs.chunks(EVAL_BATCH) {
        out.extend_from_slice(model.forward_features(chunk)?.values());
    }
    Ok(out)
}

struct KdTargets<'a> {
    rows: &'a [f32],
    weight: f64,
}

fn fit(
    model: &mut Model,
    train: &Samples<'_>,
    test: &Samples<'_>,
    kd: Option<KdTargets<'_>>,
    cfg: &TrainConfig,
    label: &str,
) -> Result<History> {
    let n = train.inputs.len();
    let latent = model.spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut ce_sum, mut kd_sum, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| train.inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true, true)?;
            let x = model.input(&mut g, &xs)?;
            let z = model.features_on(&mut g, &bound, x)?;
            let logits = model.head_on(&mut g, &bound, z)?;
            let ce = g.softmax_cross_entropy(logits, &ys)?;
            let mut loss = ce;
            let mut kd_value = 0.0;
            if let Some(kd) = kd.as_ref().filter(|k| k.weight > 0.0) {
                let mut target = Vec::with_capacity(batch.len() * latent);
                for &i in batch {
                    target.extend_from_slice(&kd.rows[i * latent..(i + 1) * latent]);
                }
                let t = g.leaf(&[batch.len(), latent], &target, false)?;
                let mse = g.mse(z, t)?;
                let weighted = g.scale(mse, kd.weight)?;
                kd_value = g.scalar(weighted);
                loss = g.add(ce, weighted)?;
            }
            let b = batch.len() as f64;
            ce_sum += g.scalar(ce) * b;
            kd_sum += kd_value * b;
            correct += argmax_rows(g.value(logits), model.spec.num_classes)
                .iter()
                .zip(&ys)
                .filter(|(p, y)| p == y)
                .count();
            g.backward(loss)?;
            model.collect_grads(&g, &bound, true, true)?;
            adam_step(model.fe_params.iter_mut().chain(model.clf_params.iter_mut()), &cfg.adam)?;
        }
        let test_accuracy = if test.inputs.is_empty() {
            0.0
        } else {
            let pred = predict(model, &test.inputs)?;
            pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64
        };
        let m = EpochMetrics {
            epoch,
            train_loss: (ce_sum + kd_sum) / n as f64,
            ce_loss: ce_sum / n as f64,
            kd_loss: kd_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            test_accuracy,
        };
        debug!("{label} epoch {epoch}: {m:?}");
        history.epochs.push(m);
    }
    if let Some(m) = history.last() {
        info!(
            "{label}: {} epochs, train acc {:.4}, test acc {:.4}",
            m.epoch, m.train_accuracy, m.test_accuracy
        );
    }
    Ok(history)
}

fn train_variant(ds: &SplitDataset, cfg: &TrainConfig, variant: Variant, label: &str) -> Result<(Model, History)> {
    cfg.validate()?;
    let num_classes = ds.train.num_classes();
    let train = samples_for(&ds.train, variant)?;
    check_classes(&train.labels, num_classes)?;
    let test = samples_for(&ds.test, variant)?;
    let mut model = build_model(variant, num_classes, cfg.seed)?;
    let history = fit(&mut model, &train, &test, None, cfg, label)?;
    Ok((model, history))
}

/// Narrow model, cross-entropy only.
pub fn train_baseline(ds: &SplitDataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    train_variant(ds, cfg, Variant::Narrow, "baseline")
}

/// Wide model on windows, each labelled by its centre segment.
pub fn train_teacher(ds: &SplitDataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    train_variant(ds, cfg, Variant::Wide, "teacher")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub history: History,
    /// Training segments left out because no window surrounds them.
    pub excluded_segments: usize,
}

/// Frozen-teacher latents for every training window centre, `[N, latent]`.
/// Equal bit for bit to computing them on the fly.
pub fn teacher_targets(teacher: &Model, ds: &LabeledDataset) -> Result<Vec<f32>> {
    teacher.expect_variant(Variant::Wide)?;
    if !ds.is_windowed() {
        return Err(TrainError::NoWindows);
    }
    let windows: Vec<&[f32]> = ds.pairs().map(|(_, w)| w.data.as_slice()).collect();
    features_of(teacher, &windows)
}

/// Narrow student trained on `CE + λ · MSE(φ_S(x), φ_T(w))` against a frozen
/// teacher. The teacher is only read.
pub fn distill_student(ds: &SplitDataset, teacher: &Model, cfg: &TrainConfig) -> Result<(Model, DistillOutcome)> {
    cfg.validate()?;
    teacher.expect_variant(Variant::Wide)?;
    let num_classes = ds.train.num_classes();
    let mut student = build_model(Variant::Narrow, num_classes, cfg.seed)?;
    if teacher.spec.latent_dim != student.spec.latent_dim {
        return Err(TrainError::LatentMismatch {
            teacher: teacher.spec.latent_dim,
            student: student.spec.latent_dim,
        });
    }
    if !ds.train.is_windowed() {
        return Err(TrainError::NoWindows);
    }
    let train = collect(ds.train.pairs().map(|(s, _)| (s.data.as_slice(), s.label)))?;
    check_classes(&train.labels, num_classes)?;
    let test = samples_for(&ds.test, Variant::Narrow)?;
    let excluded_segments = ds.train.unwindowed_count();
    let cached;
    let kd = if cfg.kd_weight > 0.0 {
        cached = teacher_targets(teacher, &ds.train)?;
        Some(KdTargets {
            rows: &cached,
            weight: cfg.kd_weight,
        })
    } else {
        None
    };
    let history = fit(&mut student, &train, &test, kd, cfg, "student")?;
    Ok((
        student,
        DistillOutcome {
            history,
            excluded_segments,
        },
    ))
}

//! Transfer to an unlabelled target domain and anomaly analysis of the
//! resulting embeddings.
//!
//! Two routes produce target embeddings:
//! * **no-KD** — the source-trained student is applied unchanged;
//! * **TCMKD-TL** — a fresh narrow feature extractor is trained from scratch
//!   to reproduce the frozen source teacher's latents of the surrounding
//!   windows. Only the MSE between the two latents drives it; no labels and
//!   no classifier head are involved.
//!
//! Both index the same samples (window centres of both target splits), so
//! their row counts always agree.

mod analysis;
mod export;

pub use analysis::{
    fit_anomaly_model, fit_projection, quantile, silhouette, AnomalyModel, Projection2D, DEFAULT_QUANTILE,
    DEFAULT_RIDGE,
};
pub use export::{read_embeddings_csv, write_embeddings_csv, write_projection_csv, EmbeddingTable};

use std::fmt;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, Graph, TensorError};
use crate::model::{build_model, Model, ModelError, Variant};
use crate::signal::{DomainTag, Segment, SplitDataset, TemporalWindow};
use crate::train::{features_of, TrainError};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("target dataset has no temporal windows")]
    NoWindows,
    #[error("teacher latent size {teacher} differs from student latent size {student}")]
    LatentMismatch { teacher: usize, student: usize },
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("reference set is empty")]
    EmptyReference,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("embeddings CSV: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TransferError {
    fn from(e: TensorError) -> Self {
        TransferError::Model(e.into())
    }
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    /// Source-trained student applied to target segments.
    StudentSource,
    /// Source-trained teacher applied to target windows.
    TeacherSourceOnTarget,
    /// Student adapted on the target domain.
    StudentTarget,
}

impl fmt::Display for Producer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Producer::StudentSource => "student_source",
            Producer::TeacherSourceOnTarget => "teacher_source_on_target",
            Producer::StudentTarget => "student_target",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// Row-major `[N, dim]`.
    pub vectors: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub domain: DomainTag,
    pub producer: Producer,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Window centres (with their windows) of both splits, train first.
pub fn target_pairs(ds: &SplitDataset) -> Result<Vec<(&Segment, &TemporalWindow)>> {
    if !ds.train.is_windowed() {
        return Err(TransferError::NoWindows);
    }
    let pairs: Vec<_> = ds.train.pairs().chain(ds.test.pairs()).collect();
    if pairs.is_empty() {
        return Err(TransferError::NoWindows);
    }
    Ok(pairs)
}

/// Labels of every pair when all are labelled. Used for measurement only.
fn measurement_labels(pairs: &[(&Segment, &TemporalWindow)]) -> Option<Vec<usize>> {
    pairs.iter().map(|(s, _)| s.label).collect()
}

/// Source student applied unchanged to the target window centres.
pub fn extract_embeddings_no_kd(student: &Model, target: &SplitDataset) -> Result<EmbeddingSet> {
    student.expect_variant(Variant::Narrow)?;
    let pairs = target_pairs(target)?;
    let inputs: Vec<&[f32]> = pairs.iter().map(|(s, _)| s.data.as_slice()).collect();
    Ok(EmbeddingSet {
        dim: student.spec.latent_dim,
        vectors: features_of(student, &inputs)?,
        labels: measurement_labels(&pairs),
        domain: target.train.domain(),
        producer: Producer::StudentSource,
    })
}

/// Frozen teacher applied to the target windows.
pub fn teacher_embeddings(teacher: &Model, target: &SplitDataset) -> Result<EmbeddingSet> {
    teacher.expect_variant(Variant::Wide)?;
    let pairs = target_pairs(target)?;
    let windows: Vec<&[f32]> = pairs.iter().map(|(_, w)| w.data.as_slice()).collect();
    Ok(EmbeddingSet {
        dim: teacher.spec.latent_dim,
        vectors: features_of(teacher, &windows)?,
        labels: measurement_labels(&pairs),
        domain: target.train.domain(),
        producer: Producer::TeacherSourceOnTarget,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Keep every epoch's student latents for auditing the logged loss.
    pub record_trace: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
            record_trace: false,
        }
    }
}

/// Student latents exactly as produced inside one epoch's batches, stored
/// in sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub student: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// Adapted narrow model; its classifier head is untouched initial weights.
    pub student: Model,
    pub embeddings: EmbeddingSet,
    /// Teacher latents the student was regressed onto, `[N, dim]`.
    pub targets: EmbeddingSet,
    /// Per-epoch MSE over all samples, in the order they were visited.
    pub loss_curve: Vec<f64>,
    pub trace: Vec<EpochTrace>,
}

/// Mean squared difference over all entries, accumulated in f64.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    s / a.len() as f64
}

pub fn tcmkd_tl_adapt(teacher: &Model, target: &SplitDataset, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(TransferError::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    cfg.adam.validate()?;
    teacher.expect_variant(Variant::Wide)?;
    let mut student = build_model(Variant::Narrow, teacher.spec.num_classes, cfg.seed)?;
    let dim = student.spec.latent_dim;
    if teacher.spec.latent_dim != dim {
        return Err(TransferError::LatentMismatch {
            teacher: teacher.spec.latent_dim,
            student: dim,
        });
    }
    let targets = teacher_embeddings(teacher, target)?;
    let pairs = target_pairs(target)?;
    let inputs: Vec<&[f32]> = pairs.iter().map(|(s, _)| s.data.as_slice()).collect();
    let n = inputs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut trace = Vec::new();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut seen = if cfg.record_trace { vec![0.0f32; n * dim] } else { Vec::new() };
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| inputs[i]).collect();
            let mut t = Vec::with_capacity(batch.len() * dim);
            for &i in batch {
                t.extend_from_slice(targets.row(i));
            }
            let mut g = Graph::new();
            let bound = student.bind(&mut g, true, false)?;
            let x = student.input(&mut g, &xs)?;
            let z = student.features_on(&mut g, &bound, x)?;
            let tv = g.leaf(&[batch.len(), dim], &t, false)?;
            let loss = g.mse(z, tv)?;
            sum += g.scalar(loss) * batch.len() as f64;
            if cfg.record_trace {
                for (k, &i) in batch.iter().enumerate() {
                    seen[i * dim..(i + 1) * dim].copy_from_slice(&g.value(z)[k * dim..(k + 1) * dim]);
                }
            }
            g.backward(loss)?;
            student.collect_grads(&g, &bound, true, false)?;
            adam_step(student.fe_params.iter_mut(), &cfg.adam)?;
        }
        let epoch_loss = sum / n as f64;
        log::debug!("adapt epoch {epoch}: mse {epoch_loss}");
        loss_curve.push(epoch_loss);
        if cfg.record_trace {
            trace.push(EpochTrace { student: seen });
        }
    }
    info!(
        "tcmkd-tl: {} epochs, mse {:.6} -> {:.6}",
        cfg.epochs,
        loss_curve[0],
        loss_curve[loss_curve.len() - 1]
    );
    let embeddings = EmbeddingSet {
        dim,
        vectors: features_of(&student, &inputs)?,
        labels: targets.labels.clone(),
        domain: target.train.domain(),
        producer: Producer::StudentTarget,
    };
    Ok(AdaptOutcome {
        student,
        embeddings,
        targets,
        loss_curve,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{prepare_dataset, synth_generate, PipelineConfig, SynthSpec};

    fn target() -> SplitDataset {
        let spec = SynthSpec {
            num_classes: 2,
            recordings_per_class: 1,
            recording_len: 16_384,
            carrier_shift: 1.2,
            ..SynthSpec::default()
        };
        prepare_dataset(&synth_generate(&spec, 8).unwrap(), DomainTag::Target, &PipelineConfig::default()).unwrap()
    }

    fn cfg(epochs: usize) -> AdaptConfig {
        AdaptConfig {
            epochs,
            batch_size: 16,
            seed: 2,
            record_trace: true,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn both_routes_index_the_same_samples() {
        let ds = target();
        let student = build_model(Variant::Narrow, 2, 1).unwrap();
        let teacher = build_model(Variant::Wide, 2, 1).unwrap();
        let a = extract_embeddings_no_kd(&student, &ds).unwrap();
        let b = tcmkd_tl_adapt(&teacher, &ds, &cfg(1)).unwrap();
        assert_eq!(a.len(), b.embeddings.len());
        assert_eq!(a.len(), ds.train.windows().len() + ds.test.windows().len());
        assert_eq!(a.labels, b.embeddings.labels);
        assert_eq!(a.producer, Producer::StudentSource);
    }

    #[test]
    fn no_kd_rows_match_forward_features() {
        let ds = target();
        let student = build_model(Variant::Narrow, 2, 1).unwrap();
        let before = student.fingerprint();
        let e = extract_embeddings_no_kd(&student, &ds).unwrap();
        assert_eq!(student.fingerprint(), before);
        let (seg, _) = ds.train.pairs().next().unwrap();
        assert_eq!(student.forward_features(&[&seg.data]).unwrap().values(), e.row(0));
    }

    #[test]
    fn adaptation_keeps_teacher_frozen_and_loss_is_auditable() {
        let ds = target();
        let teacher = build_model(Variant::Wide, 2, 3).unwrap();
        let before = teacher.fingerprint();
        let out = tcmkd_tl_adapt(&teacher, &ds, &cfg(5)).unwrap();
        assert_eq!(teacher.fingerprint(), before);
        for (logged, t) in out.loss_curve.iter().zip(&out.trace) {
            assert!((logged - mse(&t.student, &out.targets.vectors)).abs() < 1e-5);
        }
        // classifier head never moves during adaptation
        let fresh = build_model(Variant::Narrow, 2, 2).unwrap();
        assert_eq!(out.student.clf_params, fresh.clf_params);
        assert!(out.loss_curve[4] < out.loss_curve[0]);
    }

    #[test]
    fn wrong_variants_rejected() {
        let ds = target();
        let narrow = build_model(Variant::Narrow, 2, 1).unwrap();
        assert!(matches!(tcmkd_tl_adapt(&narrow, &ds, &cfg(1)), Err(TransferError::Model(_))));
        let wide = build_model(Variant::Wide, 2, 1).unwrap();
        assert!(extract_embeddings_no_kd(&wide, &ds).is_err());
    }
}

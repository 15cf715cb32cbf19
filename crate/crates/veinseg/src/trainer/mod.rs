//! Two-stage supervised training and four semi-supervised methods.
//!
//! Supervised training runs a cross-entropy warm-up stage, then a focal
//! stage at a lower learning rate. Semi-supervised training continues from
//! the converged supervised checkpoint and mixes labeled and unlabeled
//! samples in every batch:
//!
//! * mean teacher - consistency against an EMA copy of the student, teacher
//!   updated after every optimizer step;
//! * pi model - one parameter set, consistency between two differently
//!   intensity-augmented views;
//! * temporal ensemble - consistency against per-image prediction
//!   accumulators refreshed after every epoch (bias-corrected);
//! * pseudo label - the unlabeled targets are frozen predictions of the
//!   supervised checkpoint, trained with the supervised loss.

mod engine;

pub use engine::{LogRow, PhaseKind, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CheckpointMeta, DatasetEntry, SplitTag};
use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};
use crate::metrics::{evaluate_model, mean, PostprocessConfig};
use crate::network::{build_model, NetConfig, SegModel};
use crate::seeding::stream_seed;
use crate::tensor::{Element, OptimizerKind, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    MeanTeacher,
    PiModel,
    TemporalEnsemble,
    PseudoLabel,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::MeanTeacher => "mean_teacher",
            Method::PiModel => "pi_model",
            Method::TemporalEnsemble => "temporal_ensemble",
            Method::PseudoLabel => "pseudo_label",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "supervised" => Some(Method::Supervised),
            "mean_teacher" => Some(Method::MeanTeacher),
            "pi_model" => Some(Method::PiModel),
            "temporal_ensemble" => Some(Method::TemporalEnsemble),
            "pseudo_label" => Some(Method::PseudoLabel),
            _ => None,
        }
    }
}

/// All training hyperparameters. Defaults follow the training protocol:
/// cross-entropy at 1e-3, focal at 5e-4, batches of 8.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Labeled samples per semi-supervised batch (rest are unlabeled).
    pub labeled_per_batch: usize,
    pub lr_bce: f64,
    pub lr_focal: f64,
    pub optimizer: OptimizerKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fraction of semi-supervised iterations over which lambda2 ramps up.
    pub ramp_fraction: f64,
    /// EMA decay for the teacher and the temporal-ensemble accumulator.
    pub ema_alpha: f64,
    /// Switch from cross-entropy to focal once validation DSC reaches this.
    pub stage_switch_dsc: f64,
    pub stage1_max_epochs: usize,
    pub stage2_max_epochs: usize,
    pub semi_epochs: usize,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    /// Stop a phase early once validation DSC reaches this value.
    pub stop_at_val_dsc: Option<f64>,
    pub net: NetConfig,
    pub post: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            labeled_per_batch: 4,
            lr_bce: 1e-3,
            lr_focal: 5e-4,
            optimizer: OptimizerKind::Adam,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda1: 1.0,
            lambda2: 1.0,
            ramp_fraction: 0.1,
            ema_alpha: 0.99,
            stage_switch_dsc: 0.5,
            stage1_max_epochs: 40,
            stage2_max_epochs: 60,
            semi_epochs: 12,
            patience: 20,
            stop_at_val_dsc: None,
            net: NetConfig::default(),
            post: PostprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 || self.labeled_per_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        if self.labeled_per_batch > self.batch_size {
            return Err(Error::InvalidArgument(
                "labeled_per_batch cannot exceed batch_size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::InvalidArgument("ema alpha must lie in [0, 1)".into()));
        }
        if self.lr_bce <= 0.0 || self.lr_focal <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        crate::losses::LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            ..Default::default()
        }
        .validate()
    }
}

/// One labeled training sample at its native resolution.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub mask: BinMask,
}

/// Trainer-facing dataset views. Unlabeled images never carry masks here.
#[derive(Clone, Debug, Default)]
pub struct TrainSets {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<GrayImage>,
    /// Labeled entries used for validation DSC; when empty, training
    /// monitors DSC on its own labeled set.
    pub validation: Vec<DatasetEntry>,
}

impl TrainSets {
    /// Split tagged entries into trainer views, enforcing the tag rules.
    pub fn from_entries(entries: &[DatasetEntry]) -> Result<TrainSets> {
        let mut sets = TrainSets::default();
        for e in entries {
            match e.split {
                SplitTag::Labeled => {
                    let mask = e.mask.clone().ok_or_else(|| {
                        Error::Dataset(format!(
                            "labeled entry {}/{} has no mask",
                            e.subject, e.image_id
                        ))
                    })?;
                    sets.labeled.push(LabeledSample {
                        image: e.image.clone(),
                        mask,
                    });
                }
                SplitTag::Unlabeled => sets.unlabeled.push(e.training_view().image),
                SplitTag::Validation => sets.validation.push(e.clone()),
                SplitTag::Test => {}
            }
        }
        Ok(sets)
    }

    /// Validation entries, falling back to the labeled training set.
    pub fn validation_entries(&self) -> Vec<DatasetEntry> {
        if !self.validation.is_empty() {
            return self.validation.clone();
        }
        self.labeled
            .iter()
            .enumerate()
            .map(|(i, s)| DatasetEntry {
                subject: "train".into(),
                image_id: format!("labeled_{i:03}"),
                image: s.image.clone(),
                mask: Some(s.mask.clone()),
                split: SplitTag::Validation,
            })
            .collect()
    }
}

/// Elementwise `alpha * prev + (1 - alpha) * current` over two tensors.
pub fn ema_update_tensor<T: Element>(
    prev: &Tensor<T>,
    current: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("ema alpha must lie in [0, 1)".into()));
    }
    prev.require_same_shape(current, "ema_update")?;
    let a = T::from_f64(alpha);
    let b = T::one() - a;
    let mut out = prev.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(current.data()) {
        *o = a * *o + b * c;
    }
    Ok(out)
}

/// EMA over every parameter entry, running statistics included: the teacher
/// is a moving average of the whole student state.
pub fn ema_update<T: Element>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("ema alpha must lie in [0, 1)".into()));
    }
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let a = T::from_f64(alpha);
    let b = T::one() - a;
    for (dst, (_, src)) in teacher.entries_mut().zip(student.iter()) {
        dst.value.require_same_shape(&src.value, &dst.name)?;
        for (t, &s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
            *t = a * *t + b * s;
        }
    }
    Ok(())
}

/// Supervised training output.
pub struct SupervisedOutcome {
    /// Best-validation model across the focal stage.
    pub model: SegModel<f32>,
    /// Parameters exactly as stage 1 left them (stage 2's starting point).
    pub stage1_model: SegModel<f32>,
    pub log: TrainLog,
    pub best_val_dsc: f64,
    pub focal_epochs: usize,
    pub meta: CheckpointMeta,
}

/// Semi-supervised training output. `teacher` is present only for the mean
/// teacher (other methods keep exactly one parameter set).
pub struct SemiOutcome {
    pub student: SegModel<f32>,
    pub teacher: Option<SegModel<f32>>,
    pub log: TrainLog,
    pub best_val_dsc: f64,
    pub epochs_run: usize,
    pub meta: CheckpointMeta,
}

/// Stage 1 (cross-entropy) until the stage-switch criterion, then stage 2
/// (focal) with early stopping; returns the best-validation checkpoint.
pub fn train_supervised(sets: &TrainSets, cfg: &TrainConfig) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if sets.labeled.is_empty() {
        return Err(Error::Dataset("supervised training needs labeled data".into()));
    }
    let mut model = build_model::<f32>(stream_seed(cfg.seed, "model-init", &[]), cfg.net)?;
    let mut log = TrainLog::new();

    let mut state = engine::PhaseState::new(&model, cfg);
    engine::run_phase(
        &mut model,
        &mut state,
        sets,
        cfg,
        PhaseKind::SupervisedBce,
        &mut log,
    )?;
    let stage1_model = model.clone();
    let stage1_iterations = state.iteration;

    // Fresh optimizer moments for the focal stage; the iteration counter
    // continues across stages.
    let mut state = engine::PhaseState::new(&model, cfg);
    state.iteration = stage1_iterations;
    let report = engine::run_phase(
        &mut model,
        &mut state,
        sets,
        cfg,
        PhaseKind::SupervisedFocal,
        &mut log,
    )?;

    let meta = CheckpointMeta {
        method: Method::Supervised.as_str().into(),
        iteration: state.iteration,
        ema_alpha: 0.0,
    };
    Ok(SupervisedOutcome {
        model,
        stage1_model,
        log,
        best_val_dsc: report.best_val,
        focal_epochs: report.epochs_run,
        meta,
    })
}

/// Semi-supervised continuation from a converged supervised checkpoint.
pub fn train_semi(
    sets: &TrainSets,
    method: Method,
    init: &SegModel<f32>,
    cfg: &TrainConfig,
) -> Result<SemiOutcome> {
    cfg.validate()?;
    if method == Method::Supervised {
        return Err(Error::InvalidArgument(
            "train_semi expects a semi-supervised method".into(),
        ));
    }
    if init.config != cfg.net {
        return Err(Error::ShapeMismatch(
            "init checkpoint architecture does not match the configured network".into(),
        ));
    }
    let mut model = init.clone();
    let mut log = TrainLog::new();
    let mut state = engine::PhaseState::new(&model, cfg);
    state.method = method;

    match method {
        Method::MeanTeacher => {
            state.teacher = Some(init.clone());
        }
        Method::PseudoLabel => {
            // Freeze pseudo ground truth from the converged model, once.
            state.pseudo_masks = Some(engine::predict_canonical_masks(
                init,
                &sets.unlabeled,
                &cfg.post,
            )?);
        }
        Method::TemporalEnsemble => {
            state.te_accumulator =
                Some(vec![
                    Tensor::zeros(vec![2, 64, 64]);
                    sets.unlabeled.len()
                ]);
        }
        Method::PiModel | Method::Supervised => {}
    }

    let report = engine::run_phase(&mut model, &mut state, sets, cfg, PhaseKind::Semi, &mut log)?;

    let meta = CheckpointMeta {
        method: method.as_str().into(),
        iteration: state.iteration,
        ema_alpha: if method == Method::MeanTeacher {
            cfg.ema_alpha
        } else {
            0.0
        },
    };
    Ok(SemiOutcome {
        student: model,
        teacher: state.teacher,
        log,
        best_val_dsc: report.best_val,
        epochs_run: report.epochs_run,
        meta,
    })
}

/// Which of the checkpoint pair goes on to inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectedModel {
    Teacher,
    Student,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Selection {
    pub choice: SelectedModel,
    pub teacher_val_dsc: f64,
    pub student_val_dsc: f64,
}

/// Pick whichever of teacher/student scores the higher mean validation DSC.
/// Ties go to the student (it received the direct gradient signal).
pub fn select_inference_model(
    teacher: &SegModel<f32>,
    student: &SegModel<f32>,
    validation: &[DatasetEntry],
    post: &PostprocessConfig,
) -> Result<Selection> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument(
            "model selection needs a nonempty validation set".into(),
        ));
    }
    let t = mean(
        evaluate_model(teacher, validation, post)?
            .iter()
            .map(|e| e.dsc),
    );
    let s = mean(
        evaluate_model(student, validation, post)?
            .iter()
            .map(|e| e.dsc),
    );
    Ok(Selection {
        choice: if t > s {
            SelectedModel::Teacher
        } else {
            SelectedModel::Student
        },
        teacher_val_dsc: t,
        student_val_dsc: s,
    })
}

/// Deterministic per-phase RNG roots.
pub(crate) fn phase_rng(cfg: &TrainConfig, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, tag, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let prev = Tensor::scalar(1.0f64);
        let cur = Tensor::scalar(0.0f64);
        let out = ema_update_tensor(&prev, &cur, 0.99).unwrap();
        assert!((out.data()[0] - 0.99).abs() < 1e-12);

        // alpha = 0 copies the student.
        let out = ema_update_tensor(&prev, &Tensor::scalar(0.37), 0.0).unwrap();
        assert_eq!(out.data()[0], 0.37);

        // Three updates from 0 against 1, 2, 3 at alpha = 0.5.
        let mut t = Tensor::scalar(0.0f64);
        let mut seen = Vec::new();
        for s in [1.0, 2.0, 3.0] {
            t = ema_update_tensor(&t, &Tensor::scalar(s), 0.5).unwrap();
            seen.push(t.data()[0]);
        }
        assert_eq!(seen, vec![0.5, 1.25, 2.125]);
    }

    #[test]
    fn ema_rejects_bad_alpha_and_shape() {
        let a = Tensor::scalar(1.0f64);
        assert!(ema_update_tensor(&a, &a, 1.0).is_err());
        assert!(ema_update_tensor(&a, &a, -0.1).is_err());
        let b = Tensor::<f64>::zeros(vec![2]);
        assert!(ema_update_tensor(&a, &b, 0.5).is_err());
    }

    #[test]
    fn ema_is_contractive_elementwise() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let alpha: f64 = rng.gen_range(0.0..1.0);
            let t_prev: f64 = rng.gen_range(-3.0..3.0);
            let s: f64 = rng.gen_range(-3.0..3.0);
            let t_new = ema_update_tensor(&Tensor::scalar(t_prev), &Tensor::scalar(s), alpha)
                .unwrap()
                .data()[0];
            assert!((t_new - s).abs() <= alpha * (t_prev - s).abs() + 1e-12);
        }
    }

    #[test]
    fn paramset_ema_covers_all_entries() {
        let mut teacher = ParamSet::<f64>::new();
        teacher.add("w", Tensor::filled(vec![3], 1.0), true);
        teacher.add("running", Tensor::filled(vec![2], 4.0), false);
        let mut student = ParamSet::<f64>::new();
        student.add("w", Tensor::filled(vec![3], 0.0), true);
        student.add("running", Tensor::filled(vec![2], 0.0), false);
        ema_update(&mut teacher, &student, 0.5).unwrap();
        assert!(teacher
            .get(crate::tensor::ParamId(0))
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(teacher
            .get(crate::tensor::ParamId(1))
            .data()
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-12));
    }
}

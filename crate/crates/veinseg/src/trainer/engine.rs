//! The shared epoch/batch engine behind every training phase.
//!
//! The supervised focal stage and all semi-supervised methods run the same
//! loop; a semi phase with zero unlabeled data is bit-identical to the
//! supervised focal stage (same RNG streams, same batches, same loss
//! weighting), which the degenerate-equivalence test pins down.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ema_update, phase_rng, Method, TrainConfig, TrainSets};
use crate::augment::{
    apply_intensity, apply_spatial, warp_canonical_mask, warp_canonical_probs, IntensityAug,
    SpatialAug,
};
use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};
use crate::losses::{
    consistency_mse_with_logit_grad, focal_loss_with_grad, total_loss, LossWeights,
};
use crate::metrics::{evaluate_model, mean, PostprocessConfig};
use crate::network::{forward_probs, SegModel, INPUT_SIZE};
use crate::seeding::stream_seed;
use crate::tensor::{Optimizer, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseKind {
    SupervisedBce,
    SupervisedFocal,
    Semi,
}

impl PhaseKind {
    fn label(&self) -> &'static str {
        match self {
            PhaseKind::SupervisedBce => "bce",
            PhaseKind::SupervisedFocal => "focal",
            PhaseKind::Semi => "semi",
        }
    }

    /// RNG stream tag. The focal stage and the semi stage share one stream:
    /// the semi stage is the focal stage plus unlabeled consistency.
    fn rng_tag(&self) -> &'static str {
        match self {
            PhaseKind::SupervisedBce => "bce-phase",
            PhaseKind::SupervisedFocal | PhaseKind::Semi => "focal-phase",
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub iter: u64,
    pub phase: &'static str,
    pub loss_sup: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,phase,loss_sup,loss_cons,loss_total,val_dsc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                r.iter,
                r.phase,
                r.loss_sup,
                r.loss_cons,
                r.loss_total,
                r.val_dsc.map_or(String::new(), |v| format!("{v:.6}")),
            ));
        }
        out
    }
}

/// Mutable training state carried across phases.
pub struct PhaseState {
    pub iteration: u64,
    pub method: Method,
    pub teacher: Option<SegModel<f32>>,
    pub optimizer: Optimizer<f32>,
    /// Frozen pseudo ground truth per unlabeled image (pseudo-label method).
    pub pseudo_masks: Option<Vec<BinMask>>,
    /// Per-unlabeled-image prediction accumulators (temporal ensemble).
    pub te_accumulator: Option<Vec<Tensor<f32>>>,
    pub te_epochs: usize,
}

impl PhaseState {
    pub fn new(model: &SegModel<f32>, cfg: &TrainConfig) -> PhaseState {
        PhaseState {
            iteration: 0,
            method: Method::Supervised,
            teacher: None,
            optimizer: Optimizer::new(cfg.optimizer, &model.params),
            pseudo_masks: None,
            te_accumulator: None,
            te_epochs: 0,
        }
    }
}

pub struct PhaseReport {
    pub best_val: f64,
    pub epochs_run: usize,
}

/// Index composition of one epoch's batches: `(labeled, unlabeled)` per
/// iteration. With no unlabeled data the whole batch is labeled; otherwise
/// every batch holds `labeled_per_batch` labeled plus unlabeled samples.
pub(crate) fn epoch_batches(
    m_labeled: usize,
    n_unlabeled: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut labeled_order: Vec<usize> = (0..m_labeled).collect();
    labeled_order.shuffle(rng);
    let mut unlabeled_order: Vec<usize> = (0..n_unlabeled).collect();
    unlabeled_order.shuffle(rng);

    let (labeled_per, unlabeled_per) = if n_unlabeled == 0 {
        (cfg.batch_size, 0)
    } else {
        (cfg.labeled_per_batch, cfg.batch_size - cfg.labeled_per_batch)
    };
    let iters = if n_unlabeled == 0 {
        m_labeled.div_ceil(cfg.batch_size)
    } else {
        n_unlabeled.div_ceil(unlabeled_per)
    };

    let mut out = Vec::with_capacity(iters);
    for i in 0..iters {
        let labeled = (0..labeled_per)
            .map(|j| labeled_order[(i * labeled_per + j) % m_labeled])
            .collect();
        let unlabeled = (0..unlabeled_per)
            .map(|j| unlabeled_order[(i * unlabeled_per + j) % n_unlabeled])
            .collect();
        out.push((labeled, unlabeled));
    }
    out
}

fn images_to_batch(images: &[&GrayImage]) -> Tensor<f32> {
    let n = INPUT_SIZE;
    let mut out = Tensor::zeros(vec![images.len(), 1, n, n]);
    for (b, img) in images.iter().enumerate() {
        debug_assert_eq!((img.width, img.height), (n, n));
        let dst = &mut out.data_mut()[b * n * n..(b + 1) * n * n];
        for (d, &s) in dst.iter_mut().zip(img.data.iter()) {
            *d = s as f32 / 255.0;
        }
    }
    out
}

fn masks_to_target(masks: &[BinMask]) -> Tensor<f32> {
    let n = INPUT_SIZE;
    let mut out = Tensor::zeros(vec![masks.len(), n, n]);
    for (b, m) in masks.iter().enumerate() {
        let dst = &mut out.data_mut()[b * n * n..(b + 1) * n * n];
        for (d, &s) in dst.iter_mut().zip(m.data.iter()) {
            *d = s as f32;
        }
    }
    out
}

fn batch_slice(t: &Tensor<f32>, lo: usize, hi: usize) -> Tensor<f32> {
    let shape = t.shape();
    let per = t.len() / shape[0];
    let mut new_shape = shape.to_vec();
    new_shape[0] = hi - lo;
    Tensor::new(new_shape, t.data()[lo * per..hi * per].to_vec()).expect("slice shape")
}

/// Stack two-channel canonical probability targets into `N x 2 x H x W`.
fn stack_prob_targets(targets: &[Tensor<f32>]) -> Tensor<f32> {
    let n = INPUT_SIZE;
    let mut out = Tensor::zeros(vec![targets.len(), 2, n, n]);
    for (b, t) in targets.iter().enumerate() {
        out.data_mut()[b * 2 * n * n..(b + 1) * 2 * n * n].copy_from_slice(t.data());
    }
    out
}

/// Raw (not post-processed) canonical-frame predictions, binarized at 0.5
/// foreground probability.
pub(crate) fn predict_canonical_masks(
    model: &SegModel<f32>,
    images: &[GrayImage],
    _post: &PostprocessConfig,
) -> Result<Vec<BinMask>> {
    let n = INPUT_SIZE;
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let (img64, _) = apply_spatial(img, None, &SpatialAug::identity())?;
        let probs = forward_probs(model, &img64.to_input_tensor::<f32>())?;
        let mut mask = BinMask::zeros(n, n);
        for i in 0..n * n {
            if probs.data()[n * n + i] >= 0.5 {
                mask.data[i] = 1;
            }
        }
        out.push(mask);
    }
    Ok(out)
}

/// Canonical-frame probability maps (`2 x 64 x 64`) for each image.
fn predict_canonical_probs(
    model: &SegModel<f32>,
    images: &[GrayImage],
) -> Result<Vec<Tensor<f32>>> {
    let n = INPUT_SIZE;
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let (img64, _) = apply_spatial(img, None, &SpatialAug::identity())?;
        let probs = forward_probs(model, &img64.to_input_tensor::<f32>())?;
        out.push(Tensor::new(vec![2, n, n], probs.data().to_vec())?);
    }
    Ok(out)
}

struct StepOutcome {
    loss_sup: f64,
    loss_cons: f64,
    loss_total: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut SegModel<f32>,
    state: &mut PhaseState,
    sets: &TrainSets,
    cfg: &TrainConfig,
    phase: PhaseKind,
    labeled_idx: &[usize],
    unlabeled_idx: &[usize],
    aug_seed_parts: (u64, u64),
    lambda2_eff: f64,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let (epoch, iter_in_epoch) = aug_seed_parts;
    let tag = phase.rng_tag();
    let m = labeled_idx.len();
    let n_un = unlabeled_idx.len();

    // Labeled student views: spatial plus intensity, targets follow the
    // spatial warp.
    let mut student_imgs: Vec<GrayImage> = Vec::with_capacity(m + n_un);
    let mut targets: Vec<BinMask> = Vec::with_capacity(m);
    for (slot, &li) in labeled_idx.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            tag,
            &[1, epoch, iter_in_epoch, slot as u64],
        ));
        let sample = &sets.labeled[li];
        let spatial = SpatialAug::sample(&mut rng);
        let intensity = IntensityAug::sample(&mut rng);
        let (img64, mask64) = apply_spatial(&sample.image, Some(&sample.mask), &spatial)?;
        student_imgs.push(apply_intensity(&img64, &intensity, &mut rng));
        targets.push(mask64.expect("labeled mask"));
    }

    // Unlabeled student views plus their per-method consistency targets.
    let mut prob_targets: Vec<Tensor<f32>> = Vec::new();
    let mut pseudo_targets: Vec<BinMask> = Vec::new();
    let mut teacher_inputs: Vec<GrayImage> = Vec::new();
    let mut unlabeled_spatials: Vec<SpatialAug> = Vec::new();
    for (slot, &ui) in unlabeled_idx.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            tag,
            &[2, epoch, iter_in_epoch, slot as u64],
        ));
        let img = &sets.unlabeled[ui];
        let spatial = SpatialAug::sample(&mut rng);
        let intensity = IntensityAug::sample(&mut rng);
        let (spatial_view, _) = apply_spatial(img, None, &spatial)?;
        student_imgs.push(apply_intensity(&spatial_view, &intensity, &mut rng));
        match state.method {
            Method::MeanTeacher => teacher_inputs.push(spatial_view),
            Method::PiModel => {
                // Second, independently intensity-perturbed view of the
                // same spatial warp.
                let intensity2 = IntensityAug::sample(&mut rng);
                teacher_inputs.push(apply_intensity(&spatial_view, &intensity2, &mut rng));
            }
            Method::TemporalEnsemble => {
                let acc = state.te_accumulator.as_ref().expect("te buffers")[ui].clone();
                if state.te_epochs > 0 {
                    // Bias-correct the moving average before use.
                    let correction =
                        1.0 / (1.0 - cfg.ema_alpha.powi(state.te_epochs as i32)) as f32;
                    let mut z = acc;
                    z.scale(correction);
                    // Correction can push probabilities past 1; renormalize.
                    for v in z.data_mut() {
                        *v = v.clamp(0.0, 1.0);
                    }
                    prob_targets.push(warp_canonical_probs(&z, &spatial, img.width, img.height)?);
                }
            }
            Method::PseudoLabel => {
                let masks = state.pseudo_masks.as_ref().expect("pseudo masks");
                pseudo_targets.push(warp_canonical_mask(
                    &masks[ui],
                    &spatial,
                    img.width,
                    img.height,
                )?);
            }
            Method::Supervised => unreachable!("supervised phase has no unlabeled slots"),
        }
        unlabeled_spatials.push(spatial);
    }

    // Teacher / second-view probabilities, outside the tape.
    match state.method {
        Method::MeanTeacher => {
            let teacher = state.teacher.as_ref().expect("mean teacher model");
            for img in &teacher_inputs {
                let p = forward_probs(teacher, &img.to_input_tensor::<f32>())?;
                prob_targets.push(Tensor::new(
                    vec![2, INPUT_SIZE, INPUT_SIZE],
                    p.data().to_vec(),
                )?);
            }
        }
        Method::PiModel => {
            for img in &teacher_inputs {
                let p = forward_probs(model, &img.to_input_tensor::<f32>())?;
                prob_targets.push(Tensor::new(
                    vec![2, INPUT_SIZE, INPUT_SIZE],
                    p.data().to_vec(),
                )?);
            }
        }
        _ => {}
    }

    // Student forward over the combined batch.
    let refs: Vec<&GrayImage> = student_imgs.iter().collect();
    let batch = images_to_batch(&refs);
    let mut tape = Tape::new();
    let input = tape.input(batch);
    let logits_node = model.forward_train(&mut tape, input)?;
    let logits = tape.value(logits_node);

    // Supervised part.
    let labeled_logits = batch_slice(logits, 0, m);
    let target = masks_to_target(&targets);
    let (loss_sup, grad_sup) = match phase {
        PhaseKind::SupervisedBce => {
            crate::losses::bce_loss_with_grad(&labeled_logits, &target)?
        }
        _ => focal_loss_with_grad(&labeled_logits, &target, cfg.focal_gamma, cfg.focal_alpha)?,
    };

    // Consistency / pseudo-supervision part.
    let mut loss_cons = 0.0f32;
    let mut grad_cons: Option<Tensor<f32>> = None;
    let mut n_cons = 0usize;
    if n_un > 0 {
        let unlabeled_logits = batch_slice(logits, m, m + n_un);
        match state.method {
            Method::PseudoLabel => {
                let pt = masks_to_target(&pseudo_targets);
                let (l, g) =
                    focal_loss_with_grad(&unlabeled_logits, &pt, cfg.focal_gamma, cfg.focal_alpha)?;
                loss_cons = l;
                grad_cons = Some(g);
                n_cons = n_un;
            }
            Method::TemporalEnsemble if prob_targets.is_empty() => {
                // First epoch: no accumulated targets yet.
            }
            _ => {
                let targets = stack_prob_targets(&prob_targets);
                let (l, g) = consistency_mse_with_logit_grad(&unlabeled_logits, &targets)?;
                loss_cons = l;
                grad_cons = Some(g);
                n_cons = n_un;
            }
        }
    }

    let weights = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: lambda2_eff,
        m_labeled: m,
        n_unlabeled: n_cons,
        focal_gamma: cfg.focal_gamma,
        focal_alpha: cfg.focal_alpha,
    };
    let loss_total = total_loss(loss_sup as f64, loss_cons as f64, &weights)?;
    if !loss_total.is_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
            diagnostic: format!("loss_sup {loss_sup}, loss_cons {loss_cons}"),
        });
    }

    // Assemble d(total)/d(logits) over the whole batch.
    let denom = (m + n_cons) as f64;
    let w_sup = (cfg.lambda1 * m as f64 / denom) as f32;
    let w_cons = (lambda2_eff * n_cons as f64 / denom) as f32;
    let mut grad_logits = Tensor::<f32>::zeros(logits.shape().to_vec());
    let per = grad_logits.len() / (m + n_un);
    {
        let gd = grad_logits.data_mut();
        for (i, &g) in grad_sup.data().iter().enumerate() {
            gd[i] = w_sup * g;
        }
        if let Some(gc) = &grad_cons {
            for (i, &g) in gc.data().iter().enumerate() {
                gd[m * per + i] = w_cons * g;
            }
        }
    }

    let grads = tape.backward(logits_node, grad_logits, &model.params)?;
    state
        .optimizer
        .step(&mut model.params, &grads, learning_rate as f32)?;

    // Teacher EMA follows every student update.
    if state.method == Method::MeanTeacher {
        let teacher = state.teacher.as_mut().expect("mean teacher model");
        ema_update(&mut teacher.params, &model.params, cfg.ema_alpha)?;
    }
    state.iteration += 1;

    Ok(StepOutcome {
        loss_sup: loss_sup as f64,
        loss_cons: loss_cons as f64,
        loss_total,
    })
}

/// Run one training phase to its stopping criterion, logging every
/// iteration and restoring the best-validation snapshot afterwards (focal
/// and semi phases).
pub fn run_phase(
    model: &mut SegModel<f32>,
    state: &mut PhaseState,
    sets: &TrainSets,
    cfg: &TrainConfig,
    phase: PhaseKind,
    log: &mut TrainLog,
) -> Result<PhaseReport> {
    let val_entries = sets.validation_entries();
    let (max_epochs, learning_rate) = match phase {
        PhaseKind::SupervisedBce => (cfg.stage1_max_epochs, cfg.lr_bce),
        PhaseKind::SupervisedFocal => (cfg.stage2_max_epochs, cfg.lr_focal),
        PhaseKind::Semi => (cfg.semi_epochs, cfg.lr_focal),
    };
    let n_unlabeled = if phase == PhaseKind::Semi {
        sets.unlabeled.len()
    } else {
        0
    };
    let unlabeled_per = cfg.batch_size.saturating_sub(cfg.labeled_per_batch).max(1);
    let iters_per_epoch = if n_unlabeled == 0 {
        sets.labeled.len().div_ceil(cfg.batch_size).max(1)
    } else {
        n_unlabeled.div_ceil(unlabeled_per)
    };
    let ramp_len = (cfg.ramp_fraction * (max_epochs * iters_per_epoch) as f64).ceil();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_snapshot: Option<(crate::tensor::ParamSet<f32>, Option<crate::tensor::ParamSet<f32>>)> =
        None;
    let mut epochs_since_best = 0usize;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..max_epochs {
        let mut shuffle_rng = phase_rng(cfg, phase.rng_tag(), &[0, epoch as u64]);
        let batches = epoch_batches(sets.labeled.len(), n_unlabeled, cfg, &mut shuffle_rng);

        for (it, (labeled_idx, unlabeled_idx)) in batches.iter().enumerate() {
            // Ramp lambda2 over the first fraction of planned iterations.
            // The pseudo-label method trains against frozen targets, which
            // are no noisier early than late, so it skips the ramp.
            let k_phase = (epoch * iters_per_epoch + it) as f64 + 1.0;
            let ramp = if state.method == Method::PseudoLabel {
                1.0
            } else {
                (k_phase / ramp_len.max(1.0)).min(1.0)
            };
            let lambda2_eff = cfg.lambda2 * ramp;

            let out = train_step(
                model,
                state,
                sets,
                cfg,
                phase,
                labeled_idx,
                unlabeled_idx,
                (epoch as u64, it as u64),
                lambda2_eff,
                learning_rate,
            )?;
            log.rows.push(LogRow {
                iter: state.iteration,
                phase: phase.label(),
                loss_sup: out.loss_sup,
                loss_cons: out.loss_cons,
                loss_total: out.loss_total,
                val_dsc: None,
            });
        }
        epochs_run = epoch + 1;

        // Temporal ensemble refreshes its accumulators after every epoch.
        if phase == PhaseKind::Semi && state.method == Method::TemporalEnsemble {
            let probs = predict_canonical_probs(model, &sets.unlabeled)?;
            let acc = state.te_accumulator.as_mut().expect("te buffers");
            let a = cfg.ema_alpha as f32;
            for (z, p) in acc.iter_mut().zip(probs.iter()) {
                for (zv, &pv) in z.data_mut().iter_mut().zip(p.data()) {
                    *zv = a * *zv + (1.0 - a) * pv;
                }
            }
            state.te_epochs += 1;
        }

        // Validation at every epoch end.
        let student_val = mean(
            evaluate_model(model, &val_entries, &cfg.post)?
                .iter()
                .map(|e| e.dsc),
        );
        let metric = match &state.teacher {
            Some(t) => {
                let tv = mean(
                    evaluate_model(t, &val_entries, &cfg.post)?
                        .iter()
                        .map(|e| e.dsc),
                );
                student_val.max(tv)
            }
            None => student_val,
        };
        if let Some(last) = log.rows.last_mut() {
            last.val_dsc = Some(student_val);
        }

        match phase {
            PhaseKind::SupervisedBce => {
                // Stage switch: reasonable masks reached, or the cap below.
                if metric >= cfg.stage_switch_dsc {
                    break 'epochs;
                }
            }
            PhaseKind::SupervisedFocal | PhaseKind::Semi => {
                if metric > best_val {
                    best_val = metric;
                    best_snapshot = Some((
                        model.params.clone(),
                        state.teacher.as_ref().map(|t| t.params.clone()),
                    ));
                    epochs_since_best = 0;
                } else {
                    epochs_since_best += 1;
                }
                if let Some(target) = cfg.stop_at_val_dsc {
                    if metric >= target {
                        break 'epochs;
                    }
                }
                if epochs_since_best >= cfg.patience {
                    break 'epochs;
                }
            }
        }
    }

    // Keep the best-validation parameters for focal/semi phases.
    if let Some((student_params, teacher_params)) = best_snapshot {
        if matches!(phase, PhaseKind::SupervisedFocal | PhaseKind::Semi) {
            model.params = student_params;
            if let (Some(t), Some(tp)) = (state.teacher.as_mut(), teacher_params) {
                t.params = tp;
            }
        }
    }
    Ok(PhaseReport {
        best_val: if best_val.is_finite() { best_val } else { 0.0 },
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_mix_labeled_and_unlabeled() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(40, 192, &cfg, &mut rng);
        assert_eq!(batches.len(), 48);
        for (labeled, unlabeled) in &batches {
            assert_eq!(labeled.len(), 4);
            assert_eq!(unlabeled.len(), 4);
        }
        // Every unlabeled image appears exactly once per epoch.
        let mut seen: Vec<usize> = batches.iter().flat_map(|(_, u)| u.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..192).collect::<Vec<_>>());
    }

    #[test]
    fn supervised_batches_fill_with_labeled_only() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = epoch_batches(40, 0, &cfg, &mut rng);
        assert_eq!(batches.len(), 5);
        for (labeled, unlabeled) in &batches {
            assert_eq!(labeled.len(), 8);
            assert!(unlabeled.is_empty());
        }
    }

    #[test]
    fn small_labeled_set_wraps_cyclically() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(3, 0, &cfg, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].0.len(), 8);
        let unique: std::collections::BTreeSet<_> = batches[0].0.iter().collect();
        assert_eq!(unique.len(), 3);
    }
}

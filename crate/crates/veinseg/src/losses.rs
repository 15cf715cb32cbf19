//! Segmentation losses and their combination.
//!
//! Each loss reports its scalar value and, where training needs it, the
//! analytic gradient with respect to the network logits. The supervised
//! losses run on two-channel softmax probabilities against a binary target
//! mask; the consistency loss penalizes student/teacher disagreement on
//! probability maps.

use crate::error::{Error, Result};
use crate::tensor::{softmax_channels_forward, Element, Tensor};

/// Weighted combination of the supervised and semi-supervised losses:
/// `(lambda1 * M * L_sup + lambda2 * N * L_semisup) / (M + N)`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Labeled images in the batch.
    pub m_labeled: usize,
    /// Unlabeled images in the batch.
    pub n_unlabeled: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            m_labeled: 0,
            n_unlabeled: 0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::InvalidArgument("focal gamma must be >= 0".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::InvalidArgument(
                "focal alpha must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn check_seg_shapes<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize)> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "segmentation logits must have 2 channels, got {c}"
        )));
    }
    let tdims = target.shape();
    if tdims != [b, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "target shape {:?} does not match logits {:?}",
            tdims,
            logits.shape()
        )));
    }
    for &v in target.data() {
        if v != T::zero() && v != T::one() {
            return Err(Error::InvalidArgument(format!(
                "target mask values must be 0 or 1, found {v}"
            )));
        }
    }
    Ok((b, h * w))
}

fn prob_floor<T: Element>() -> T {
    let tiny = T::from_f64(1e-12);
    let eps4 = T::epsilon() * T::from_f64(4.0);
    if eps4 > tiny {
        eps4
    } else {
        tiny
    }
}

/// Mean two-class cross-entropy of softmaxed logits against a binary mask.
pub fn bce_loss<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(bce_loss_with_grad(logits, target)?.0)
}

/// Cross-entropy plus its gradient with respect to the logits.
pub fn bce_loss_with_grad<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    focal_loss_with_grad(logits, target, 0.0, 1.0)
}

/// Focal loss: mean of `-alpha_t * (1 - p_t)^gamma * ln(p_t)` where `p_t` is
/// the predicted probability of the true class and `alpha_t` is `alpha` for
/// foreground pixels, `1 - alpha` for background. `alpha = 1` disables the
/// class weighting entirely (`alpha_t = 1` on every pixel), so the loss
/// degenerates to plain cross-entropy at `gamma = 0`.
pub fn focal_loss<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    gamma: f64,
    alpha: f64,
) -> Result<T> {
    Ok(focal_loss_with_grad(logits, target, gamma, alpha)?.0)
}

/// Focal loss plus its gradient with respect to the logits.
///
/// With `gamma = 0, alpha = 1` this reduces exactly to [`bce_loss`].
pub fn focal_loss_with_grad<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    gamma: f64,
    alpha: f64,
) -> Result<(T, Tensor<T>)> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument("focal gamma must be >= 0".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument("focal alpha must lie in (0, 1]".into()));
    }
    let (b, hw) = check_seg_shapes(logits, target)?;
    let probs = softmax_channels_forward(logits)?;
    let n = T::from_f64((b * hw) as f64);
    let inv_n = T::one() / n;
    let floor = prob_floor::<T>();
    let g = T::from_f64(gamma);
    let alpha_fg = T::from_f64(alpha);
    let alpha_bg = T::one() - alpha_fg;

    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let p = probs.data();
    let gd = grad.data_mut();
    let mut total = 0.0f64;

    for bi in 0..b {
        let bg_base = (bi * 2) * hw;
        let fg_base = (bi * 2 + 1) * hw;
        for i in 0..hw {
            let y_fg = target.data()[bi * hw + i] == T::one();
            let (t_idx, o_idx, alpha_t) = if y_fg {
                (fg_base + i, bg_base + i, alpha_fg)
            } else {
                (bg_base + i, fg_base + i, if alpha == 1.0 { T::one() } else { alpha_bg })
            };
            let pt = p[t_idx].max(floor);
            let po = p[o_idx];
            let log_pt = pt.ln();
            let one_m = T::one() - pt;

            // value: -alpha_t (1 - p_t)^gamma ln p_t
            let w_pow = if gamma == 0.0 { T::one() } else { one_m.powf(g) };
            total += (-(alpha_t * w_pow * log_pt)).as_f64();

            // dL/dp_t, then chain through the softmax jacobian:
            // dp_t/dz_t = p_t(1 - p_t), dp_t/dz_o = -p_t p_o.
            let dl_dpt = if gamma == 0.0 {
                -(alpha_t / pt)
            } else {
                let w_pow_m1 = if gamma == 1.0 { T::one() } else { one_m.powf(g - T::one()) };
                alpha_t * (g * w_pow_m1 * log_pt - w_pow / pt)
            };
            gd[t_idx] = dl_dpt * pt * one_m * inv_n;
            gd[o_idx] = -(dl_dpt * pt * po) * inv_n;
        }
    }
    Ok((T::from_f64(total) * inv_n, grad))
}

/// Mean squared difference between two probability maps of equal shape.
pub fn consistency_mse<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    student.require_same_shape(teacher, "consistency_mse")?;
    let mut total = 0.0f64;
    for (&s, &t) in student.data().iter().zip(teacher.data()) {
        let d = (s - t).as_f64();
        total += d * d;
    }
    Ok(T::from_f64(total / student.len() as f64))
}

/// Consistency loss on `softmax(student_logits)` against fixed teacher
/// probabilities, with the gradient taken through the softmax.
pub fn consistency_mse_with_logit_grad<T: Element>(
    student_logits: &Tensor<T>,
    teacher_probs: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    student_logits.require_same_shape(teacher_probs, "consistency_mse")?;
    let (b, c, h, w) = student_logits.dims4()?;
    let hw = h * w;
    let probs = softmax_channels_forward(student_logits)?;
    let value = consistency_mse(&probs, teacher_probs)?;

    let n = T::from_f64((b * c * hw) as f64);
    let two = T::from_f64(2.0);
    let p = probs.data();
    let t = teacher_probs.data();
    let mut grad = Tensor::zeros(student_logits.shape().to_vec());
    let gd = grad.data_mut();
    for bi in 0..b {
        for i in 0..hw {
            // dot = sum_d (dL/dp_d) p_d with dL/dp_d = 2 (p_d - t_d) / n
            let mut dot = T::zero();
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + i;
                dot += two * (p[idx] - t[idx]) / n * p[idx];
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + i;
                let dl_dp = two * (p[idx] - t[idx]) / n;
                gd[idx] = p[idx] * (dl_dp - dot);
            }
        }
    }
    Ok((value, grad))
}

/// Total loss per the weighted-summation rule.
pub fn total_loss<T: Element>(l_sup: T, l_semisup: T, w: &LossWeights) -> Result<T> {
    w.validate()?;
    let m = w.m_labeled as f64;
    let n = w.n_unlabeled as f64;
    if w.m_labeled + w.n_unlabeled == 0 {
        return Err(Error::InvalidArgument(
            "total_loss needs M + N > 0 images".into(),
        ));
    }
    let num = T::from_f64(w.lambda1 * m) * l_sup + T::from_f64(w.lambda2 * n) * l_semisup;
    Ok(num / T::from_f64(m + n))
}

//! Segmentation metrics, per-fold reports, and the cross-validation harness.

use crate::augment::{apply_spatial, SpatialAug};
use crate::data::DatasetEntry;
use crate::error::{Error, Result};
use crate::image::BinMask;
use crate::network::{forward_probs, SegModel};
use crate::postprocess::{postprocess_mask, VeinMask};
use crate::tensor::Tensor;

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)`.
///
/// Two empty masks count as perfect agreement (1.0); an empty prediction
/// against a nonempty ground truth scores 0.
pub fn dsc(pred: &BinMask, gt: &BinMask) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "dsc: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for i in 0..pred.data.len() {
        let (pa, pb) = (pred.data[i], gt.data[i]);
        a += pa as usize;
        b += pb as usize;
        inter += (pa & pb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Euclidean pixel distance between predicted and ground-truth centroids.
/// Failed predictions score from the top-left corner `(0, 0)`.
pub fn centroid_error(pred: &VeinMask, gt: &BinMask) -> Result<f64> {
    let (gx, gy) = gt.centroid()?; // errors on an empty ground truth
    let (px, py) = if pred.failed {
        (0.0, 0.0)
    } else {
        pred.mask.centroid()?
    };
    Ok(((px - gx).powi(2) + (py - gy).powi(2)).sqrt())
}

/// Failures as a percentage of the result list.
pub fn failure_rate(failed_flags: &[bool]) -> Result<f64> {
    if failed_flags.is_empty() {
        return Err(Error::InvalidArgument(
            "failure_rate of an empty result list".into(),
        ));
    }
    let failures = failed_flags.iter().filter(|&&f| f).count();
    Ok(100.0 * failures as f64 / failed_flags.len() as f64)
}

/// Post-processing knobs used whenever probabilities become masks.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PostprocessConfig {
    pub threshold: f64,
    pub open_radius: usize,
    pub close_radius: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            threshold: 0.5,
            open_radius: 1,
            close_radius: 1,
        }
    }
}

/// One image's evaluation outcome.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ImageEval {
    pub subject: String,
    pub image_id: String,
    pub dsc: f64,
    pub centroid_error: f64,
    pub failed: bool,
}

/// Run the model over labeled entries and score each prediction.
/// Images are resized to the network input size; masks follow by nearest
/// neighbour. Evaluation runs in deterministic entry order.
pub fn evaluate_model(
    model: &SegModel<f32>,
    entries: &[DatasetEntry],
    post: &PostprocessConfig,
) -> Result<Vec<ImageEval>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let gt = e.mask.as_ref().ok_or_else(|| {
            Error::Dataset(format!(
                "evaluation needs ground truth for {}/{}",
                e.subject, e.image_id
            ))
        })?;
        let (img64, gt64) = apply_spatial(&e.image, Some(gt), &SpatialAug::identity())?;
        let gt64 = gt64.expect("mask passed through");
        let probs = forward_probs(model, &img64.to_input_tensor::<f32>())?;
        let vein = extract_vein_mask(&probs, post)?;
        let d = dsc(&vein.mask, &gt64)?;
        let ce = centroid_error(&vein, &gt64)?;
        out.push(ImageEval {
            subject: e.subject.clone(),
            image_id: e.image_id.clone(),
            dsc: d,
            centroid_error: ce,
            failed: vein.failed,
        });
    }
    Ok(out)
}

/// Pull the foreground channel out of `B x 2 x H x W` probabilities for one
/// image and post-process it.
pub fn extract_vein_mask(probs: &Tensor<f32>, post: &PostprocessConfig) -> Result<VeinMask> {
    let (b, c, h, w) = probs.dims4()?;
    if b != 1 || c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected 1x2xHxW probabilities, got {:?}",
            probs.shape()
        )));
    }
    // Channel 1 is foreground.
    let fg = Tensor::<f32>::from_fn(vec![h, w], |i| probs.data()[h * w + i]);
    postprocess_mask(&fg, post.threshold, post.open_radius, post.close_radius)
}

pub fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Population standard deviation.
pub fn std_pop(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let m = mean(values.clone());
    (values.map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Per-fold evaluation summary.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub per_image: Vec<ImageEval>,
}

impl FoldReport {
    pub fn dsc_mean(&self) -> f64 {
        mean(self.per_image.iter().map(|e| e.dsc))
    }
    pub fn dsc_std(&self) -> f64 {
        std_pop(self.per_image.iter().map(|e| e.dsc))
    }
    pub fn centroid_mean(&self) -> f64 {
        mean(self.per_image.iter().map(|e| e.centroid_error))
    }
    pub fn centroid_std(&self) -> f64 {
        std_pop(self.per_image.iter().map(|e| e.centroid_error))
    }
    pub fn failure_count(&self) -> usize {
        self.per_image.iter().filter(|e| e.failed).count()
    }
    pub fn failure_rate_percent(&self) -> f64 {
        if self.per_image.is_empty() {
            0.0
        } else {
            100.0 * self.failure_count() as f64 / self.per_image.len() as f64
        }
    }
}

/// All folds of one experiment (one training method).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub folds: Vec<FoldReport>,
}

impl ExperimentReport {
    /// Mean of the per-fold mean DSCs (the tables' "average" column).
    pub fn aggregate_dsc_mean(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.dsc_mean()))
    }
    pub fn aggregate_dsc_std(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.dsc_std()))
    }
    pub fn aggregate_centroid_mean(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.centroid_mean()))
    }
    pub fn aggregate_centroid_std(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.centroid_std()))
    }
    pub fn aggregate_failure_rate(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.failure_rate_percent()))
    }
}

/// `results.csv`: one row per evaluated image.
pub fn results_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("experiment,fold,image_id,dsc,centroid_error,failed\n");
    for r in reports {
        for fold in &r.folds {
            for e in &fold.per_image {
                out.push_str(&format!(
                    "{},{},{}/{},{:.6},{:.6},{}\n",
                    r.experiment,
                    fold.fold,
                    e.subject,
                    e.image_id,
                    e.dsc,
                    e.centroid_error,
                    e.failed as u8
                ));
            }
        }
    }
    out
}

/// `summary.csv`: one row per fold plus an aggregate row per experiment.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("experiment,fold,dsc_mean,dsc_std,cent_mean,cent_std,failure_rate\n");
    for r in reports {
        for fold in &r.folds {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.2}\n",
                r.experiment,
                fold.fold,
                fold.dsc_mean(),
                fold.dsc_std(),
                fold.centroid_mean(),
                fold.centroid_std(),
                fold.failure_rate_percent()
            ));
        }
        out.push_str(&format!(
            "{},avg,{:.6},{:.6},{:.6},{:.6},{:.2}\n",
            r.experiment,
            r.aggregate_dsc_mean(),
            r.aggregate_dsc_std(),
            r.aggregate_centroid_mean(),
            r.aggregate_centroid_std(),
            r.aggregate_failure_rate()
        ));
    }
    out
}

/// Partition subjects into `folds` disjoint groups, round-robin over the
/// sorted subject list.
pub fn partition_subjects(entries: &[DatasetEntry], folds: usize) -> Result<Vec<Vec<String>>> {
    let mut subjects: Vec<String> = Vec::new();
    for e in entries {
        if !subjects.contains(&e.subject) {
            subjects.push(e.subject.clone());
        }
    }
    subjects.sort();
    if folds == 0 || subjects.len() < folds {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot form {folds} folds",
            subjects.len()
        )));
    }
    let mut out = vec![Vec::new(); folds];
    for (i, s) in subjects.into_iter().enumerate() {
        out[i % folds].push(s);
    }
    Ok(out)
}

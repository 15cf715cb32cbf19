//! Probability map to cleaned vein mask to puncture-axis commands.
//!
//! The mask pipeline binarizes the foreground probability, opens to drop
//! small outliers, closes to bridge broken vein regions, then keeps the
//! single largest 8-connected component. An empty result is a flagged
//! failure state, not an error. The navigation math converts the mask
//! centroid into travels for the depth axis and the inclined needle axis.

use crate::error::{Error, Result};
use crate::image::BinMask;
use crate::tensor::{Element, Tensor};

/// Post-processing stage a [`VeinMask`] has reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Raw,
    Opened,
    Closed,
    LargestComponent,
}

/// Binary segmentation mask with failure bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VeinMask {
    pub mask: BinMask,
    pub provenance: MaskProvenance,
    /// True iff the final foreground is empty.
    pub failed: bool,
}

impl VeinMask {
    pub fn centroid(&self) -> Result<(f64, f64)> {
        if self.failed {
            return Err(Error::EmptyMask);
        }
        self.mask.centroid()
    }
}

/// Structuring element: the disk of the given radius (radius 1 is the 3x3
/// cross).
fn disk_offsets(radius: usize) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn erode(mask: &BinMask, se: &[(i32, i32)]) -> BinMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            // Structuring-element taps outside the frame are ignored: this
            // erosion is the adjoint of the clipped dilation below, which
            // makes open/close true opening/closing operators on the finite
            // grid (and their composition exactly idempotent).
            let covered = se.iter().all(|&(dx, dy)| {
                let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                xx < 0
                    || yy < 0
                    || xx >= w as i32
                    || yy >= h as i32
                    || mask.get(xx as usize, yy as usize) == 1
            });
            if covered {
                out.set(x, y, 1);
            }
        }
    }
    out
}

fn dilate(mask: &BinMask, se: &[(i32, i32)]) -> BinMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 1 {
                for &(dx, dy) in se {
                    let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                    if xx >= 0 && yy >= 0 && xx < w as i32 && yy < h as i32 {
                        out.set(xx as usize, yy as usize, 1);
                    }
                }
            }
        }
    }
    out
}

/// Erosion then dilation: removes specks smaller than the element.
pub fn morphological_open(mask: &BinMask, radius: usize) -> BinMask {
    let se = disk_offsets(radius);
    dilate(&erode(mask, &se), &se)
}

/// Dilation then erosion: bridges gaps smaller than the element.
pub fn morphological_close(mask: &BinMask, radius: usize) -> BinMask {
    let se = disk_offsets(radius);
    erode(&dilate(mask, &se), &se)
}

/// Keep only the largest 8-connected foreground component. Ties go to the
/// component containing the first (row-major) pixel among the tied ones.
pub fn largest_component(mask: &BinMask) -> BinMask {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h]; // 0 = unlabeled
    let mut sizes = vec![0usize]; // sizes[label]
    let mut stack = Vec::new();

    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        sizes.push(0);
        stack.push(start);
        labels[start] = label;
        while let Some(idx) = stack.pop() {
            sizes[label as usize] += 1;
            let (x, y) = (idx % w, idx / w);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                    if xx < 0 || yy < 0 || xx >= w as i32 || yy >= h as i32 {
                        continue;
                    }
                    let nidx = yy as usize * w + xx as usize;
                    if mask.data[nidx] == 1 && labels[nidx] == 0 {
                        labels[nidx] = label;
                        stack.push(nidx);
                    }
                }
            }
        }
    }

    // First maximal label wins ties; labels were assigned in row-major
    // discovery order.
    let mut best = 0u32;
    let mut best_size = 0usize;
    for (label, &size) in sizes.iter().enumerate().skip(1) {
        if size > best_size {
            best = label as u32;
            best_size = size;
        }
    }
    let mut out = BinMask::zeros(w, h);
    if best != 0 {
        for i in 0..w * h {
            if labels[i] == best {
                out.data[i] = 1;
            }
        }
    }
    out
}

/// Full cleanup: threshold, open, close, keep the largest component.
pub fn postprocess_mask<T: Element>(
    prob_map: &Tensor<T>,
    threshold: f64,
    open_radius: usize,
    close_radius: usize,
) -> Result<VeinMask> {
    let (h, w) = match prob_map.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "probability map must be HxW, got {other:?}"
            )))
        }
    };
    let thr = T::from_f64(threshold);
    for &v in prob_map.data() {
        if v < T::zero() || v > T::one() {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
    }
    let mut mask = BinMask::zeros(w, h);
    for i in 0..w * h {
        if prob_map.data()[i] >= thr {
            mask.data[i] = 1;
        }
    }
    let opened = morphological_open(&mask, open_radius);
    let closed = morphological_close(&opened, close_radius);
    let biggest = largest_component(&closed);
    let failed = biggest.is_empty_mask();
    Ok(VeinMask {
        mask: biggest,
        provenance: MaskProvenance::LargestComponent,
        failed,
    })
}

/// Travels for the two puncture axes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PunctureCommand {
    pub centroid: (f64, f64),
    /// Skin surface to vein centroid, along the image depth axis.
    pub depth_mm: f64,
    /// Horizontal travel that positions the inclined needle axis.
    pub axis5_travel_mm: f64,
    /// Travel along the inclined needle axis.
    pub axis6_travel_mm: f64,
    pub needle_angle_deg: f64,
}

/// Convert a vein centroid into axis travels. The needle rides an axis
/// inclined `needle_angle_deg` above the horizontal plane, so reaching
/// depth `d` takes `d / sin(angle)` of travel, after a horizontal offset
/// of `d / tan(angle)` aligns the tip with the target.
pub fn plan_puncture(
    centroid: (f64, f64),
    skin_row: f64,
    mm_per_pixel: f64,
    needle_angle_deg: f64,
) -> Result<PunctureCommand> {
    if mm_per_pixel <= 0.0 {
        return Err(Error::InvalidArgument("mm_per_pixel must be positive".into()));
    }
    if !(0.0..90.0).contains(&needle_angle_deg) || needle_angle_deg == 0.0 {
        return Err(Error::InvalidArgument(
            "needle angle must lie strictly between 0 and 90 degrees".into(),
        ));
    }
    let depth_px = centroid.1 - skin_row;
    if depth_px <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "centroid row {} at or above skin row {skin_row}: nonpositive depth",
            centroid.1
        )));
    }
    let depth_mm = depth_px * mm_per_pixel;
    let rad = needle_angle_deg.to_radians();
    Ok(PunctureCommand {
        centroid,
        depth_mm,
        axis5_travel_mm: depth_mm / rad.tan(),
        axis6_travel_mm: depth_mm / rad.sin(),
        needle_angle_deg,
    })
}

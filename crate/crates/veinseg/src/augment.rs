//! Spatial and intensity augmentation.
//!
//! Spatial transforms warp image and mask identically and always emit
//! 64x64; intensity transforms perturb pixel values only and are applied to
//! student inputs alone during consistency training. Teacher and student
//! views of an unlabeled image share one spatial transform.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};
use crate::network::INPUT_SIZE;

pub const ROTATION_RANGE_DEG: f64 = 15.0;
pub const SHEAR_RANGE_DEG: f64 = 15.0;
pub const ASPECT_RANGE: f64 = 0.01;
pub const OFFSET_RANGE: f64 = 15.0;
pub const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
pub const DROPOUT_RANGE: (f64, f64) = (0.0, 0.05);
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);

/// Spatial warp parameters; includes the resize to the 64x64 target.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpatialAug {
    pub hflip: bool,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Width scales by `1 + delta`, height by `1 - delta`.
    pub aspect_delta: f64,
}

impl SpatialAug {
    pub fn identity() -> Self {
        SpatialAug {
            hflip: false,
            rotation_deg: 0.0,
            shear_deg: 0.0,
            aspect_delta: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        SpatialAug {
            hflip: rng.gen_bool(0.5),
            rotation_deg: rng.gen_range(-ROTATION_RANGE_DEG..=ROTATION_RANGE_DEG),
            shear_deg: rng.gen_range(-SHEAR_RANGE_DEG..=SHEAR_RANGE_DEG),
            aspect_delta: rng.gen_range(-ASPECT_RANGE..=ASPECT_RANGE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg.abs() > ROTATION_RANGE_DEG
            || self.shear_deg.abs() > SHEAR_RANGE_DEG
            || self.aspect_delta.abs() > ASPECT_RANGE
        {
            return Err(Error::InvalidArgument(
                "spatial augmentation outside its legal range".into(),
            ));
        }
        Ok(())
    }

    /// Forward 2x2 matrix mapping centered input coords to centered output
    /// coords: scale(resize, aspect) . rotate . shear . flip.
    pub fn forward_matrix(&self, in_w: usize, in_h: usize) -> [[f64; 2]; 2] {
        let theta = self.rotation_deg.to_radians();
        let sigma = self.shear_deg.to_radians();
        let sx = (INPUT_SIZE as f64 / in_w as f64) * (1.0 + self.aspect_delta);
        let sy = (INPUT_SIZE as f64 / in_h as f64) * (1.0 - self.aspect_delta);
        let f = if self.hflip { -1.0 } else { 1.0 };
        let (c, s) = (theta.cos(), theta.sin());
        let t = sigma.tan();
        // rotate . shear: [c, c t - s; s, s t + c], then flip scales the
        // first column, and the output scale rows.
        [
            [sx * c * f, sx * (c * t - s)],
            [sy * s * f, sy * (s * t + c)],
        ]
    }
}

/// Intensity perturbation parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntensityAug {
    pub offset: f64,
    pub gain: f64,
    pub dropout_fraction: f64,
    pub contrast: f64,
}

impl IntensityAug {
    pub fn identity() -> Self {
        IntensityAug {
            offset: 0.0,
            gain: 1.0,
            dropout_fraction: 0.0,
            contrast: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        IntensityAug {
            offset: rng.gen_range(-OFFSET_RANGE..=OFFSET_RANGE),
            gain: rng.gen_range(GAIN_RANGE.0..=GAIN_RANGE.1),
            dropout_fraction: rng.gen_range(DROPOUT_RANGE.0..=DROPOUT_RANGE.1),
            contrast: rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.offset.abs() <= OFFSET_RANGE
            && (GAIN_RANGE.0..=GAIN_RANGE.1).contains(&self.gain)
            && (DROPOUT_RANGE.0..=DROPOUT_RANGE.1).contains(&self.dropout_fraction)
            && (CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "intensity augmentation outside its legal range".into(),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Spatial,
    Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Spatial(SpatialAug),
    Intensity(IntensityAug),
}

/// Draw one augmentation of the requested kind from a seeded stream.
pub fn sample_augmentation(rng_seed: u64, kind: AugKind) -> Augmentation {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    match kind {
        AugKind::Spatial => Augmentation::Spatial(SpatialAug::sample(&mut rng)),
        AugKind::Intensity => Augmentation::Intensity(IntensityAug::sample(&mut rng)),
    }
}

fn invert_2x2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    // Zero-fill outside the image (dark ultrasound background).
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.get(xi as usize, yi as usize) as f64
        }
    };
    let v00 = sample(x0, y0);
    let v10 = sample(x0 + 1.0, y0);
    let v01 = sample(x0, y0 + 1.0);
    let v11 = sample(x0 + 1.0, y0 + 1.0);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

fn nearest_mask(mask: &BinMask, x: f64, y: f64) -> u8 {
    let xi = x.round();
    let yi = y.round();
    if xi < 0.0 || yi < 0.0 || xi >= mask.width as f64 || yi >= mask.height as f64 {
        0
    } else {
        mask.get(xi as usize, yi as usize)
    }
}

/// Warp an image (bilinear) and its optional mask (nearest neighbour) by the
/// same transform, emitting the 64x64 training resolution.
pub fn apply_spatial(
    image: &GrayImage,
    mask: Option<&BinMask>,
    aug: &SpatialAug,
) -> Result<(GrayImage, Option<BinMask>)> {
    if let Some(m) = mask {
        if m.width != image.width || m.height != image.height {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} does not match image {}x{}",
                m.width, m.height, image.width, image.height
            )));
        }
    }
    let inv = invert_2x2(aug.forward_matrix(image.width, image.height));
    let c_in_x = (image.width as f64 - 1.0) / 2.0;
    let c_in_y = (image.height as f64 - 1.0) / 2.0;
    let c_out = (INPUT_SIZE as f64 - 1.0) / 2.0;

    let mut out = GrayImage::zeros(INPUT_SIZE, INPUT_SIZE);
    let mut out_mask = mask.map(|_| BinMask::zeros(INPUT_SIZE, INPUT_SIZE));
    for oy in 0..INPUT_SIZE {
        for ox in 0..INPUT_SIZE {
            let dx = ox as f64 - c_out;
            let dy = oy as f64 - c_out;
            let sx = inv[0][0] * dx + inv[0][1] * dy + c_in_x;
            let sy = inv[1][0] * dx + inv[1][1] * dy + c_in_y;
            out.set(ox, oy, bilinear(image, sx, sy).round().clamp(0.0, 255.0) as u8);
            if let (Some(om), Some(m)) = (&mut out_mask, mask) {
                om.set(ox, oy, nearest_mask(m, sx, sy));
            }
        }
    }
    Ok((out, out_mask))
}

/// Perturb pixel intensities: contrast about mid-gray, then gain, then
/// offset, clamp to `[0, 255]`, then zero a random `dropout_fraction` of
/// pixels. Masks are never intensity-augmented.
pub fn apply_intensity(image: &GrayImage, aug: &IntensityAug, rng: &mut impl Rng) -> GrayImage {
    let mut out = GrayImage::zeros(image.width, image.height);
    for i in 0..image.data.len() {
        let p = image.data[i] as f64;
        let v = (127.5 + aug.contrast * (p - 127.5)) * aug.gain + aug.offset;
        let v = v.round().clamp(0.0, 255.0) as u8;
        out.data[i] = if aug.dropout_fraction > 0.0 && rng.gen::<f64>() < aug.dropout_fraction {
            0
        } else {
            v
        };
    }
    out
}

/// Map an output pixel of a spatially augmented native-size image back to
/// coordinates in the canonical (identity-resized 64x64) frame.
///
/// Consistency targets are stored canonically; warping them through this
/// mapping aligns them with a student view produced by `aug`.
fn canonical_coords(
    aug: &SpatialAug,
    native_w: usize,
    native_h: usize,
    ox: f64,
    oy: f64,
) -> (f64, f64) {
    let inv = invert_2x2(aug.forward_matrix(native_w, native_h));
    let c_in_x = (native_w as f64 - 1.0) / 2.0;
    let c_in_y = (native_h as f64 - 1.0) / 2.0;
    let c_out = (INPUT_SIZE as f64 - 1.0) / 2.0;
    // Into native coordinates through the augmentation...
    let dx = ox - c_out;
    let dy = oy - c_out;
    let nx = inv[0][0] * dx + inv[0][1] * dy + c_in_x;
    let ny = inv[1][0] * dx + inv[1][1] * dy + c_in_y;
    // ...then forward through the identity resize into the canonical frame.
    let id = SpatialAug::identity().forward_matrix(native_w, native_h);
    let cx = id[0][0] * (nx - c_in_x) + id[0][1] * (ny - c_in_y) + c_out;
    let cy = id[1][0] * (nx - c_in_x) + id[1][1] * (ny - c_in_y) + c_out;
    (cx, cy)
}

/// Warp a canonical `2 x 64 x 64` probability map to align with the view an
/// image of `native_w x native_h` gets under `aug`. Outside the canonical
/// frame the target is certain background (channel 0).
pub fn warp_canonical_probs(
    probs: &crate::tensor::Tensor<f32>,
    aug: &SpatialAug,
    native_w: usize,
    native_h: usize,
) -> Result<crate::tensor::Tensor<f32>> {
    let dims = probs.shape();
    if dims != [2, INPUT_SIZE, INPUT_SIZE] {
        return Err(Error::ShapeMismatch(format!(
            "canonical probability map must be 2x{INPUT_SIZE}x{INPUT_SIZE}, got {dims:?}"
        )));
    }
    let n = INPUT_SIZE;
    let mut out = crate::tensor::Tensor::<f32>::zeros(vec![2, n, n]);
    for oy in 0..n {
        for ox in 0..n {
            let (cx, cy) = canonical_coords(aug, native_w, native_h, ox as f64, oy as f64);
            let (bg, fg) = if cx < -0.5 || cy < -0.5 || cx > n as f64 - 0.5 || cy > n as f64 - 0.5
            {
                (1.0, 0.0)
            } else {
                let sample = |ch: usize| -> f64 {
                    let x0 = cx.floor();
                    let y0 = cy.floor();
                    let fx = cx - x0;
                    let fy = cy - y0;
                    let at = |xi: f64, yi: f64, outside: f64| -> f64 {
                        if xi < 0.0 || yi < 0.0 || xi >= n as f64 || yi >= n as f64 {
                            outside
                        } else {
                            probs.data()[ch * n * n + yi as usize * n + xi as usize] as f64
                        }
                    };
                    let outside = if ch == 0 { 1.0 } else { 0.0 };
                    at(x0, y0, outside) * (1.0 - fx) * (1.0 - fy)
                        + at(x0 + 1.0, y0, outside) * fx * (1.0 - fy)
                        + at(x0, y0 + 1.0, outside) * (1.0 - fx) * fy
                        + at(x0 + 1.0, y0 + 1.0, outside) * fx * fy
                };
                (sample(0), sample(1))
            };
            out.data_mut()[oy * n + ox] = bg as f32;
            out.data_mut()[n * n + oy * n + ox] = fg as f32;
        }
    }
    Ok(out)
}

/// Warp a canonical 64x64 mask (nearest neighbour) to align with the view an
/// image of `native_w x native_h` gets under `aug`.
pub fn warp_canonical_mask(
    mask: &BinMask,
    aug: &SpatialAug,
    native_w: usize,
    native_h: usize,
) -> Result<BinMask> {
    if mask.width != INPUT_SIZE || mask.height != INPUT_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "canonical mask must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}",
            mask.width, mask.height
        )));
    }
    let n = INPUT_SIZE;
    let mut out = BinMask::zeros(n, n);
    for oy in 0..n {
        for ox in 0..n {
            let (cx, cy) = canonical_coords(aug, native_w, native_h, ox as f64, oy as f64);
            out.set(ox, oy, nearest_mask(mask, cx, cy));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn sampled_parameters_respect_table_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut flips = 0usize;
        const N: usize = 10_000;
        for _ in 0..N {
            let s = SpatialAug::sample(&mut rng);
            s.validate().unwrap();
            assert!(s.rotation_deg.abs() <= 15.0);
            assert!(s.shear_deg.abs() <= 15.0);
            assert!(s.aspect_delta.abs() <= 0.01);
            if s.hflip {
                flips += 1;
            }
            let i = IntensityAug::sample(&mut rng);
            i.validate().unwrap();
            assert!(i.offset.abs() <= 15.0);
            assert!((0.8..=1.2).contains(&i.gain));
            assert!((0.0..=0.05).contains(&i.dropout_fraction));
            assert!((0.8..=1.2).contains(&i.contrast));
        }
        let freq = flips as f64 / N as f64;
        assert!((freq - 0.5).abs() <= 0.02, "flip frequency {freq}");
    }

    #[test]
    fn same_seed_gives_identical_parameter_sequence() {
        let a = sample_augmentation(42, AugKind::Spatial);
        let b = sample_augmentation(42, AugKind::Spatial);
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..32 {
            assert_eq!(SpatialAug::sample(&mut r1), SpatialAug::sample(&mut r2));
            assert_eq!(IntensityAug::sample(&mut r1), IntensityAug::sample(&mut r2));
        }
    }

    #[test]
    fn identity_on_64x64_is_exact() {
        let img = gradient_image(64, 64);
        let (out, _) = apply_spatial(&img, None, &SpatialAug::identity()).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn identity_on_70x70_resizes_only() {
        let img = gradient_image(70, 70);
        let (out, _) = apply_spatial(&img, None, &SpatialAug::identity()).unwrap();
        assert_eq!(out.width, 64);
        assert_eq!(out.height, 64);
        // Center pixel maps near the input center.
        let c_in = img.get(35, 35) as f64;
        assert!((out.get(32, 32) as f64 - c_in).abs() <= 16.0);
    }

    #[test]
    fn warped_mask_stays_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = gradient_image(70, 70);
        let mut mask = BinMask::zeros(70, 70);
        for y in 20..40 {
            for x in 25..45 {
                mask.set(x, y, 1);
            }
        }
        for _ in 0..20 {
            let aug = SpatialAug::sample(&mut rng);
            let (_, m) = apply_spatial(&img, Some(&mask), &aug).unwrap();
            assert!(m.unwrap().data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn rotating_a_blob_rotates_its_centroid() {
        // 64x64 input, pure 10 degree rotation: the mask centroid must land
        // on the analytic rotation of the original centroid about center.
        let mut mask = BinMask::zeros(64, 64);
        let (cx, cy, r) = (40.0f64, 22.0f64, 6.0f64);
        for y in 0..64 {
            for x in 0..64 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    mask.set(x, y, 1);
                }
            }
        }
        let img = gradient_image(64, 64);
        let aug = SpatialAug {
            rotation_deg: 10.0,
            ..SpatialAug::identity()
        };
        let (_, warped) = apply_spatial(&img, Some(&mask), &aug).unwrap();
        let (gx, gy) = warped.unwrap().centroid().unwrap();

        let m = aug.forward_matrix(64, 64);
        let (c0x, c0y) = mask.centroid().unwrap();
        let (dx, dy) = (c0x - 31.5, c0y - 31.5);
        let ex = m[0][0] * dx + m[0][1] * dy + 31.5;
        let ey = m[1][0] * dx + m[1][1] * dy + 31.5;
        let dist = ((gx - ex).powi(2) + (gy - ey).powi(2)).sqrt();
        assert!(dist <= 1.0, "centroid moved {dist} px from analytic target");
    }

    #[test]
    fn intensity_identity_and_clamping() {
        let img = gradient_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = apply_intensity(&img, &IntensityAug::identity(), &mut rng);
        assert_eq!(out.data, img.data);

        // 250 * 1.2 = 300 clamps to 255.
        let bright = GrayImage::new(2, 2, vec![250; 4]).unwrap();
        let aug = IntensityAug {
            gain: 1.2,
            ..IntensityAug::identity()
        };
        let out = apply_intensity(&bright, &aug, &mut rng);
        assert!(out.data.iter().all(|&v| v == 255));
    }

    #[test]
    fn dropout_zeroes_roughly_the_stated_fraction() {
        let img = GrayImage::new(64, 64, vec![200; 4096]).unwrap();
        let aug = IntensityAug {
            dropout_fraction: 0.05,
            ..IntensityAug::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = apply_intensity(&img, &aug, &mut rng);
        let zeroed = out.data.iter().filter(|&&v| v == 0).count();
        // Binomial(4096, 0.05): mean 204.8, std ~13.9.
        assert!(
            (zeroed as f64 - 204.8).abs() < 60.0,
            "zeroed {zeroed} pixels"
        );
    }

    #[test]
    fn teacher_view_reconstructs_from_recorded_parameters() {
        // Student view = intensity(spatial(x)); teacher view = spatial(x)
        // with the same recorded spatial parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = gradient_image(70, 70);
        for _ in 0..10 {
            let spatial = SpatialAug::sample(&mut rng);
            let intensity = IntensityAug::sample(&mut rng);
            let (teacher_view, _) = apply_spatial(&img, None, &spatial).unwrap();
            let student_view = apply_intensity(&teacher_view, &intensity, &mut rng);
            let (reconstructed, _) = apply_spatial(&img, None, &spatial).unwrap();
            assert_eq!(reconstructed.data, teacher_view.data);
            assert_eq!(student_view.width, teacher_view.width);
        }
    }

    #[test]
    fn canonical_warp_matches_direct_mask_warp() {
        // Warping a canonical mask by `aug` must agree with warping the
        // native-resolution mask directly (up to nearest-neighbour edge
        // jitter), since both express the same geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = gradient_image(70, 70);
        let mut native = BinMask::zeros(70, 70);
        for y in 18..44 {
            for x in 22..48 {
                native.set(x, y, 1);
            }
        }
        let (_, canonical) = apply_spatial(&img, Some(&native), &SpatialAug::identity()).unwrap();
        let canonical = canonical.unwrap();
        for _ in 0..8 {
            let aug = SpatialAug::sample(&mut rng);
            let (_, direct) = apply_spatial(&img, Some(&native), &aug).unwrap();
            let direct = direct.unwrap();
            let via_canonical = warp_canonical_mask(&canonical, &aug, 70, 70).unwrap();
            let disagree = direct
                .data
                .iter()
                .zip(via_canonical.data.iter())
                .filter(|(a, b)| a != b)
                .count();
            // Both routes sample the same geometry; only boundary pixels
            // may differ after two rounds of nearest-neighbour rounding.
            assert!(disagree < 180, "masks disagree on {disagree} pixels");
        }
    }

    #[test]
    fn canonical_prob_warp_identity_roundtrip() {
        let mut probs = crate::tensor::Tensor::<f32>::zeros(vec![2, 64, 64]);
        for i in 0..64 * 64 {
            let fg = if i % 7 == 0 { 0.8 } else { 0.1 };
            probs.data_mut()[i] = 1.0 - fg;
            probs.data_mut()[64 * 64 + i] = fg;
        }
        let warped = warp_canonical_probs(&probs, &SpatialAug::identity(), 70, 70).unwrap();
        let diff = warped.max_abs_diff(&probs).unwrap();
        assert!(diff < 1e-6, "identity warp changed probs by {diff}");
    }

    #[test]
    fn augmented_images_stay_in_byte_range() {
        // u8 storage guarantees [0, 255]; exercise extreme parameters.
        let img = gradient_image(70, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let aug = IntensityAug {
            offset: 15.0,
            gain: 1.2,
            dropout_fraction: 0.05,
            contrast: 1.2,
        };
        let out = apply_intensity(&img, &aug, &mut rng);
        assert_eq!(out.data.len(), 4900);
    }
}

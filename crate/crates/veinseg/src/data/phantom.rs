//! Synthetic ultrasound vein phantoms.
//!
//! Desk-scale stand-in for clinical scans: a smooth tissue background with
//! depth attenuation and faint strata, multiplicative exponential speckle,
//! a dark elliptical vein (the ground truth is the exact ellipse interior),
//! posterior brightening below the vein, and occasional small dark
//! distractor blobs that are not veins. Subjects share base anatomy across
//! their images with per-image jitter, mirroring repeated scans of one arm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{DatasetEntry, SplitTag};
use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};
use crate::seeding::stream_seed;

pub const PHANTOM_SIZE: usize = 70;

/// Geometry and appearance of one phantom image.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomParams {
    /// Vein centre in pixels, (x, y).
    pub center: (f64, f64),
    /// Ellipse semi-axes in pixels, (a, b), before rotation.
    pub radii: (f64, f64),
    /// Ellipse orientation in radians.
    pub angle: f64,
    /// Multiplicative interior intensity factor, below 1 (blood is dark).
    pub vein_darkness: f64,
    /// Strength of the multiplicative speckle, 0 = none.
    pub speckle_scale: f64,
    /// Aspect squash that produced the radii (transducer pressure).
    pub deformation: f64,
    /// Exponential intensity decay with depth.
    pub attenuation: f64,
    /// Base tissue brightness before shading.
    pub background_level: f64,
    /// Low-frequency tissue banding (cycles, phase).
    pub strata: (f64, f64),
    /// Up to two small dark non-vein blobs `(x, y, r, darkness)`.
    pub distractors: Vec<(f64, f64, f64, f64)>,
}

impl PhantomParams {
    /// Half-extents of the rotated ellipse's bounding box.
    pub fn extents(&self) -> (f64, f64) {
        let (a, b) = self.radii;
        let (s, c) = self.angle.sin_cos();
        (
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.radii;
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::InvalidArgument("ellipse radii must be positive".into()));
        }
        let (ex, ey) = self.extents();
        let n = PHANTOM_SIZE as f64;
        let (cx, cy) = self.center;
        if cx - ex < 1.0 || cx + ex > n - 2.0 || cy - ey < 1.0 || cy + ey > n - 2.0 {
            return Err(Error::InvalidArgument(format!(
                "vein at ({cx:.1}, {cy:.1}) with extents ({ex:.1}, {ey:.1}) leaves the {n}x{n} image"
            )));
        }
        if !(0.0..1.0).contains(&self.vein_darkness) {
            return Err(Error::InvalidArgument("vein darkness must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Signed implicit value of the ellipse at a pixel: <= 1 is inside.
    fn implicit(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.radii.0).powi(2) + (yr / self.radii.1).powi(2)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render a phantom. The mask is exactly the set of pixel centres inside
/// the generating ellipse; the image gets a softened rim, shading, speckle
/// and distractors. Deterministic for a given seed.
pub fn generate_phantom(seed: u64, params: &PhantomParams) -> Result<(GrayImage, BinMask)> {
    params.validate()?;
    let n = PHANTOM_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Independent exponential speckle, then one box blur for correlation.
    let raw: Vec<f64> = (0..n * n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let mut blurred = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (xx, yy) = (x as i32 + dx, y as i32 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < n && (yy as usize) < n {
                        acc += raw[yy as usize * n + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            blurred[y * n + x] = acc / cnt;
        }
    }

    let (ex, ey) = params.extents();
    let (cx, cy) = params.center;
    let mut img = GrayImage::zeros(n, n);
    let mut mask = BinMask::zeros(n, n);

    for y in 0..n {
        let yf = y as f64;
        let depth = yf / n as f64;
        for x in 0..n {
            let xf = x as f64;
            let mut v = params.background_level;

            // Bright skin interface over the first few rows.
            if y < 5 {
                v *= 1.35 - 0.06 * yf;
            }
            // Faint horizontal strata.
            v *= 1.0 + 0.08 * (std::f64::consts::TAU * params.strata.0 * depth + params.strata.1).sin();
            // Depth attenuation.
            v *= (-params.attenuation * depth).exp();

            // Vein interior with a softened rim on the image only.
            let e = params.implicit(xf, yf);
            if e <= 1.0 {
                mask.set(x, y, 1);
            }
            if e <= 1.3 {
                let t = smoothstep((e - 0.85) / 0.45);
                v *= params.vein_darkness + (1.0 - params.vein_darkness) * t;
            } else if (xf - cx).abs() <= ex && yf > cy {
                // Posterior enhancement: a bright tail just below the vein.
                let lateral = 1.0 - ((xf - cx) / ex).powi(2);
                if lateral > 0.0 {
                    let bottom = cy + ey * lateral.sqrt();
                    let d = yf - bottom;
                    if (0.0..6.0).contains(&d) {
                        v *= 1.0 + 0.18 * (1.0 - d / 6.0) * lateral;
                    }
                }
            }

            // Dark distractor blobs (not part of the mask).
            for &(bx, by, br, bd) in &params.distractors {
                let dist2 = (xf - bx).powi(2) + (yf - by).powi(2);
                if dist2 <= br * br * 1.4 {
                    let t = smoothstep((dist2 / (br * br) - 0.7) / 0.7);
                    v *= bd + (1.0 - bd) * t;
                }
            }

            // Multiplicative speckle: blend of raw and blurred grain.
            let s = params.speckle_scale;
            let grain = 0.6 * raw[y * n + x] + 0.4 * blurred[y * n + x];
            v *= (1.0 - s) + s * grain;

            img.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((img, mask))
}

/// Per-subject base anatomy; images of one subject jitter around it.
#[derive(Clone, Debug)]
pub struct SubjectAnatomy {
    pub center: (f64, f64),
    pub mean_radius: f64,
    pub vein_darkness: f64,
    pub speckle_scale: f64,
    pub attenuation: f64,
    pub background_level: f64,
    pub strata: (f64, f64),
}

impl SubjectAnatomy {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let radius_distr: Normal<f64> = Normal::new(14.6, 4.6).expect("valid normal");
        SubjectAnatomy {
            center: (rng.gen_range(28.0..42.0), rng.gen_range(30.0..42.0)),
            mean_radius: radius_distr.sample(rng).clamp(5.0, 21.0),
            vein_darkness: rng.gen_range(0.15..0.45),
            speckle_scale: rng.gen_range(0.35..0.65),
            attenuation: rng.gen_range(0.25..0.6),
            background_level: rng.gen_range(120.0..170.0),
            strata: (rng.gen_range(1.5..3.5), rng.gen_range(0.0..std::f64::consts::TAU)),
        }
    }

    /// One image's parameters: jittered geometry around the base anatomy.
    pub fn image_params(&self, rng: &mut ChaCha8Rng) -> PhantomParams {
        let r = (self.mean_radius * rng.gen_range(0.9..1.1)).clamp(5.0, 21.0);
        let deformation: f64 = rng.gen_range(0.0..0.25);
        let q = ((1.0 + deformation) / (1.0 - deformation)).sqrt();
        let a = (r * q).min(24.0);
        let b = r * r / a;
        let angle = rng.gen_range(-0.35..0.35);

        let params_probe = PhantomParams {
            center: (0.0, 0.0),
            radii: (a, b),
            angle,
            vein_darkness: self.vein_darkness,
            speckle_scale: self.speckle_scale,
            deformation,
            attenuation: self.attenuation * rng.gen_range(0.9..1.1),
            background_level: self.background_level,
            strata: self.strata,
            distractors: Vec::new(),
        };
        let (ex, ey) = params_probe.extents();
        let n = PHANTOM_SIZE as f64;
        let cx = (self.center.0 + rng.gen_range(-3.0..3.0)).clamp(ex + 1.5, n - 2.5 - ex);
        let cy_lo = (ey + 7.0).min(n - 3.0 - ey);
        let cy = (self.center.1 + rng.gen_range(-3.0..3.0)).clamp(cy_lo, n - 2.5 - ey);

        let mut distractors = Vec::new();
        if rng.gen_bool(0.5) {
            for _ in 0..rng.gen_range(1..=2usize) {
                let br = rng.gen_range(2.0..4.5);
                let bx = rng.gen_range(6.0..n - 6.0);
                let by = rng.gen_range(8.0..n - 6.0);
                // Keep distractors clear of the vein so the GT stays clean.
                let clear = ((bx - cx).powi(2) + (by - cy).powi(2)).sqrt() > ex.max(ey) + br + 4.0;
                if clear {
                    distractors.push((bx, by, br, rng.gen_range(0.45..0.7)));
                }
            }
        }

        PhantomParams {
            center: (cx, cy),
            distractors,
            ..params_probe
        }
    }
}

/// Generate `subjects x per_subject` phantoms; within each subject the
/// first `labeled_per_subject` images are tagged labeled, the rest
/// unlabeled. Every entry keeps its ground-truth mask for evaluation.
pub fn generate_benchmark_dataset(
    seed: u64,
    subjects: usize,
    per_subject: usize,
    labeled_per_subject: usize,
) -> Result<Vec<DatasetEntry>> {
    if labeled_per_subject > per_subject {
        return Err(Error::InvalidArgument(
            "labeled_per_subject cannot exceed images per subject".into(),
        ));
    }
    let mut out = Vec::with_capacity(subjects * per_subject);
    for s in 0..subjects {
        let mut subject_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(seed, "phantom-subject", &[s as u64]));
        let anatomy = SubjectAnatomy::sample(&mut subject_rng);
        for i in 0..per_subject {
            let params = anatomy.image_params(&mut subject_rng);
            let pixel_seed = stream_seed(seed, "phantom-pixels", &[s as u64, i as u64]);
            let (image, mask) = generate_phantom(pixel_seed, &params)?;
            out.push(DatasetEntry {
                subject: format!("subject_{:02}", s + 1),
                image_id: format!("img_{i:02}"),
                image,
                mask: Some(mask),
                split: if i < labeled_per_subject {
                    SplitTag::Labeled
                } else {
                    SplitTag::Unlabeled
                },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_params() -> PhantomParams {
        PhantomParams {
            center: (35.0, 36.0),
            radii: (14.0, 11.0),
            angle: 0.2,
            vein_darkness: 0.3,
            speckle_scale: 0.5,
            deformation: 0.12,
            attenuation: 0.4,
            background_level: 150.0,
            strata: (2.0, 1.0),
            distractors: vec![(12.0, 14.0, 3.0, 0.55)],
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let p = default_params();
        let (a, _) = generate_phantom(99, &p).unwrap();
        let (b, _) = generate_phantom(99, &p).unwrap();
        assert_eq!(a.data, b.data);
        let (c, _) = generate_phantom(100, &p).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn mask_is_exactly_the_ellipse_interior() {
        let p = default_params();
        let (_, mask) = generate_phantom(1, &p).unwrap();
        for y in 0..PHANTOM_SIZE {
            for x in 0..PHANTOM_SIZE {
                let inside = p.implicit(x as f64, y as f64) <= 1.0;
                assert_eq!(mask.get(x, y) == 1, inside, "pixel ({x},{y})");
            }
        }
        assert!(mask.foreground_count() > 100);
    }

    #[test]
    fn mask_centroid_matches_ellipse_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..20 {
            let anatomy = SubjectAnatomy::sample(&mut rng);
            let p = anatomy.image_params(&mut rng);
            let (_, mask) = generate_phantom(s, &p).unwrap();
            let (cx, cy) = mask.centroid().unwrap();
            let d = f64::sqrt((cx - p.center.0).powi(2) + (cy - p.center.1).powi(2));
            assert!(d <= 0.5, "centroid off by {d} px for center {:?}", p.center);
        }
    }

    #[test]
    fn vein_is_darker_than_background() {
        let entries = generate_benchmark_dataset(3, 4, 6, 2).unwrap();
        for e in &entries {
            let mask = e.mask.as_ref().unwrap();
            let (mut vein_sum, mut vein_n) = (0.0f64, 0usize);
            let (mut bg_sum, mut bg_n) = (0.0f64, 0usize);
            for i in 0..mask.data.len() {
                if mask.data[i] == 1 {
                    vein_sum += e.image.data[i] as f64;
                    vein_n += 1;
                } else {
                    bg_sum += e.image.data[i] as f64;
                    bg_n += 1;
                }
            }
            let vein_mean = vein_sum / vein_n as f64;
            let bg_mean = bg_sum / bg_n as f64;
            assert!(
                vein_mean < bg_mean,
                "{}/{}: vein {vein_mean:.1} not below background {bg_mean:.1}",
                e.subject,
                e.image_id
            );
        }
    }

    #[test]
    fn radius_distribution_tracks_reported_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut radii = Vec::new();
        for _ in 0..400 {
            let anatomy = SubjectAnatomy::sample(&mut rng);
            for _ in 0..5 {
                let p = anatomy.image_params(&mut rng);
                radii.push((p.radii.0 * p.radii.1).sqrt());
            }
        }
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((13.2..=15.2).contains(&mean), "mean radius {mean:.2}");
        assert!((3.0..=5.5).contains(&std), "radius std {std:.2}");
    }

    #[test]
    fn benchmark_dataset_shape_and_tags() {
        let entries = generate_benchmark_dataset(7, 10, 30, 6).unwrap();
        assert_eq!(entries.len(), 300);
        let labeled = entries.iter().filter(|e| e.split == SplitTag::Labeled).count();
        assert_eq!(labeled, 60);
        let subjects: std::collections::BTreeSet<_> =
            entries.iter().map(|e| e.subject.clone()).collect();
        assert_eq!(subjects.len(), 10);
        assert!(entries.iter().all(|e| e.mask.is_some()));
        assert!(entries
            .iter()
            .all(|e| e.image.width == PHANTOM_SIZE && e.image.height == PHANTOM_SIZE));
    }

    #[test]
    fn out_of_bounds_vein_is_rejected() {
        let mut p = default_params();
        p.center = (5.0, 36.0);
        assert!(generate_phantom(0, &p).is_err());
    }
}

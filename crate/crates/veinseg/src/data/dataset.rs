//! Dataset directory layout and loading.
//!
//! ```text
//! root/
//!   split.csv                  subject,image,tag   (labeled | unlabeled)
//!   subject_01/
//!     img_00.pgm
//!     img_00_mask.pgm
//!     ...
//! ```
//!
//! Every image may carry a mask file. The split tag says whether training is
//! allowed to see the mask: entries tagged `unlabeled` keep their mask (when
//! present on disk) strictly for evaluation, and the trainer-facing view
//! strips it. Without a `split.csv`, an image is labeled exactly when its
//! mask file exists.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::pgm;
use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Labeled => "labeled",
            SplitTag::Unlabeled => "unlabeled",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(SplitTag::Labeled),
            "unlabeled" => Some(SplitTag::Unlabeled),
            "validation" => Some(SplitTag::Validation),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub subject: String,
    pub image_id: String,
    pub image: GrayImage,
    /// Ground truth when available. For entries tagged [`SplitTag::Unlabeled`]
    /// this is evaluation-only; [`DatasetEntry::training_view`] removes it.
    pub mask: Option<BinMask>,
    pub split: SplitTag,
}

impl DatasetEntry {
    /// The entry as the trainer is allowed to see it: unlabeled entries
    /// carry no mask.
    pub fn training_view(&self) -> DatasetEntry {
        let mut e = self.clone();
        if e.split == SplitTag::Unlabeled {
            e.mask = None;
        }
        e
    }
}

fn check_image_size(path: &Path, img: &GrayImage) -> Result<()> {
    let ok = (img.width == 70 && img.height == 70) || (img.width == 64 && img.height == 64);
    if ok {
        Ok(())
    } else {
        Err(Error::malformed(
            path,
            format!("expected a 70x70 or 64x64 image, got {}x{}", img.width, img.height),
        ))
    }
}

/// Load every entry under `root`, sorted by subject then image id.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetEntry>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let split_map = read_split_csv(&root.join("split.csv"))?;

    let mut subjects: Vec<String> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                subjects.push(name.to_string());
            }
        }
    }
    subjects.sort();

    let mut out = Vec::new();
    for subject in &subjects {
        let dir = root.join(subject);
        let mut images: Vec<String> = Vec::new();
        for f in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let f = f.map_err(|e| Error::io(&dir, e))?;
            let name = f.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".pgm") {
                if !stem.ends_with("_mask") {
                    images.push(stem.to_string());
                }
            }
        }
        images.sort();

        for image_id in images {
            let img_path = dir.join(format!("{image_id}.pgm"));
            let mask_path = dir.join(format!("{image_id}_mask.pgm"));
            let image = pgm::read_pgm(&img_path)?;
            check_image_size(&img_path, &image)?;

            let mask = if mask_path.exists() {
                let m = pgm::read_mask_pgm(&mask_path)?;
                if m.width != image.width || m.height != image.height {
                    return Err(Error::malformed(
                        &mask_path,
                        format!(
                            "mask {}x{} does not match image {}x{}",
                            m.width, m.height, image.width, image.height
                        ),
                    ));
                }
                Some(m)
            } else {
                None
            };

            let split = split_map
                .get(&(subject.clone(), image_id.clone()))
                .copied()
                .unwrap_or(if mask.is_some() {
                    SplitTag::Labeled
                } else {
                    SplitTag::Unlabeled
                });
            if split == SplitTag::Labeled && mask.is_none() {
                return Err(Error::Dataset(format!(
                    "labeled image missing its mask file: {}",
                    mask_path.display()
                )));
            }
            out.push(DatasetEntry {
                subject: subject.clone(),
                image_id,
                image,
                mask,
                split,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    Ok(out)
}

type SplitMap = HashMap<(String, String), SplitTag>;

fn read_split_csv(path: &Path) -> Result<SplitMap> {
    let mut map = HashMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line == "subject,image,tag") {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(subject), Some(image), Some(tag)) =
            (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::malformed(path, format!("line {}: bad row", ln + 1)));
        };
        let tag = SplitTag::parse(tag.trim())
            .ok_or_else(|| Error::malformed(path, format!("line {}: unknown tag {tag}", ln + 1)))?;
        map.insert((subject.trim().to_string(), image.trim().to_string()), tag);
    }
    Ok(map)
}

/// Write entries to `root` in the documented layout (plus `split.csv`).
pub fn write_dataset(root: &Path, entries: &[DatasetEntry]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut split_rows = String::from("subject,image,tag\n");
    for e in entries {
        let dir = root.join(&e.subject);
        fs::create_dir_all(&dir).map_err(|e2| Error::io(&dir, e2))?;
        pgm::write_pgm(&dir.join(format!("{}.pgm", e.image_id)), &e.image)?;
        if let Some(mask) = &e.mask {
            pgm::write_mask_pgm(&dir.join(format!("{}_mask.pgm", e.image_id)), mask)?;
        }
        split_rows.push_str(&format!("{},{},{}\n", e.subject, e.image_id, e.split.as_str()));
    }
    fs::write(root.join("split.csv"), split_rows).map_err(|e| Error::io(root, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<DatasetEntry> {
        let mut out = Vec::new();
        for s in 0..2 {
            for i in 0..3 {
                let image =
                    GrayImage::new(70, 70, (0..4900).map(|p| ((p + i + s) % 256) as u8).collect())
                        .unwrap();
                let mut mask = BinMask::zeros(70, 70);
                for y in 30..40 {
                    for x in 30..40 {
                        mask.set(x, y, 1);
                    }
                }
                out.push(DatasetEntry {
                    subject: format!("subject_{s:02}"),
                    image_id: format!("img_{i:02}"),
                    image,
                    mask: Some(mask),
                    split: if i == 0 {
                        SplitTag::Labeled
                    } else {
                        SplitTag::Unlabeled
                    },
                });
            }
        }
        out
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let entries = sample_entries();
        write_dataset(dir.path(), &entries).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(entries.iter()) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn native_size_is_preserved_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_entries()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.iter().all(|e| e.image.width == 70 && e.image.height == 70));
    }

    #[test]
    fn labeled_image_without_mask_is_an_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_entries()).unwrap();
        let victim = dir.path().join("subject_00").join("img_00_mask.pgm");
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("img_00_mask.pgm"), "{err}");
    }

    #[test]
    fn training_view_strips_unlabeled_masks() {
        let entries = sample_entries();
        let unlabeled = entries.iter().find(|e| e.split == SplitTag::Unlabeled).unwrap();
        assert!(unlabeled.mask.is_some());
        assert!(unlabeled.training_view().mask.is_none());
        let labeled = entries.iter().find(|e| e.split == SplitTag::Labeled).unwrap();
        assert!(labeled.training_view().mask.is_some());
    }
}

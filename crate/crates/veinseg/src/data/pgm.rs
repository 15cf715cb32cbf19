//! Binary 8-bit PGM (P5) reading and writing.
//!
//! Writes are atomic: a temp file in the target directory is renamed over
//! the destination.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinMask, GrayImage};

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("pgm")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.data);
    write_atomic(path, &bytes)
}

/// Masks are stored with foreground 255, background 0.
pub fn write_mask_pgm(path: &Path, mask: &BinMask) -> Result<()> {
    let img = GrayImage {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect(),
    };
    write_pgm(path, &img)
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_separators(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    let mut p = HeaderParser {
        bytes: &bytes,
        pos: 0,
    };
    if p.token() != Some(b"P5".as_slice()) {
        return Err(Error::malformed(path, "not a binary PGM (P5) file"));
    }
    let width = p
        .number()
        .ok_or_else(|| Error::malformed(path, "missing width"))?;
    let height = p
        .number()
        .ok_or_else(|| Error::malformed(path, "missing height"))?;
    let maxval = p
        .number()
        .ok_or_else(|| Error::malformed(path, "missing maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::malformed(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = p.pos + 1;
    let expect = width * height;
    if bytes.len() < data_start + expect {
        return Err(Error::malformed(
            path,
            format!(
                "truncated raster: expected {expect} bytes, found {}",
                bytes.len().saturating_sub(data_start)
            ),
        ));
    }
    GrayImage::new(width, height, bytes[data_start..data_start + expect].to_vec())
}

/// Read a mask file: pixel values must be exactly 0 or 255.
pub fn read_mask_pgm(path: &Path) -> Result<BinMask> {
    let img = read_pgm(path)?;
    let mut data = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::malformed(
                    path,
                    format!("mask value {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    BinMask::new(img.width, img.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::new(70, 70, (0..4900).map(|i| (i % 256) as u8).collect()).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.width, 70);
    }

    #[test]
    fn mask_roundtrip_binarizes_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = BinMask::new(8, 4, (0..32).map(|i| (i % 2) as u8).collect()).unwrap();
        write_mask_pgm(&path, &mask).unwrap();
        let back = read_mask_pgm(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn mask_with_gray_values_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        let img = GrayImage::new(2, 2, vec![0, 255, 128, 0]).unwrap();
        write_pgm(&path, &img).unwrap();
        let err = read_mask_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("128"));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}

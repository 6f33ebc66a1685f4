//! CIFAR-100 binary format.
//!
//! Each record is 3074 bytes: one coarse-label byte, one fine-label byte,
//! then 3072 pixel bytes (three 32x32 channel planes, red first). Only the
//! fine label feeds training; the coarse byte is kept on the record so a
//! parsed file serializes back byte-for-byte.

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const IMAGE_SIDE: usize = 32;
pub const PIXEL_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 2 + PIXEL_BYTES;
pub const FINE_CLASSES: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse: u8,
    pub fine: u8,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar100_binary(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::MalformedFile {
            path: "<bytes>".into(),
            reason: format!(
                "length {} is not a multiple of the {}-byte record size",
                bytes.len(),
                RECORD_BYTES
            ),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (index, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let fine = chunk[1];
        if fine as usize >= FINE_CLASSES {
            return Err(Error::CorruptRecord {
                index,
                reason: format!("fine label {} out of range 0..{}", fine, FINE_CLASSES),
            });
        }
        records.push(CifarRecord {
            coarse: chunk[0],
            fine,
            pixels: chunk[2..].to_vec(),
        });
    }
    Ok(records)
}

pub fn write_cifar100_binary(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        assert_eq!(r.pixels.len(), PIXEL_BYTES);
        out.push(r.coarse);
        out.push(r.fine);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Scale pixels into `[0,1]` float images, dropping the coarse label.
pub fn records_to_images(records: &[CifarRecord]) -> Vec<LabeledImage> {
    records
        .iter()
        .map(|r| {
            let data: Vec<f32> = r.pixels.iter().map(|&b| b as f32 / 255.0).collect();
            LabeledImage::new(
                Tensor::from_vec(&[3, IMAGE_SIDE, IMAGE_SIDE], data),
                r.fine as usize,
            )
        })
        .collect()
}

/// Quantize float images back into records. Inverse of [`records_to_images`]
/// for byte-derived pixels; used to persist synthetic corpora in the same
/// layout.
pub fn images_to_records(images: &[LabeledImage]) -> Result<Vec<CifarRecord>> {
    images
        .iter()
        .enumerate()
        .map(|(index, img)| {
            if img.label >= FINE_CLASSES {
                return Err(Error::CorruptRecord {
                    index,
                    reason: format!("label {} does not fit the 100-class layout", img.label),
                });
            }
            if img.pixels.numel() != PIXEL_BYTES {
                return Err(Error::Data(format!(
                    "image {} has {} values, layout needs {}",
                    index,
                    img.pixels.numel(),
                    PIXEL_BYTES
                )));
            }
            let pixels: Vec<u8> = img
                .pixels
                .data()
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            Ok(CifarRecord {
                coarse: (img.label / 5) as u8,
                fine: img.label as u8,
                pixels,
            })
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = parse_cifar100_binary(&bytes).map_err(|e| match e {
        Error::MalformedFile { reason, .. } => Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    Ok(records_to_images(&records))
}

/// Load `train.bin` and `test.bin` from a CIFAR-100 binary directory.
pub fn load_cifar100_dir(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    Ok((read_file(&dir.join("train.bin"))?, read_file(&dir.join("test.bin"))?))
}

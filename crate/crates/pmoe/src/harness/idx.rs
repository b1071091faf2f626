//! IDX image/label ingestion and export.
//!
//! Images use the big-endian magic `0x00000803` (unsigned bytes, three
//! dimensions: count, height, width) and labels `0x00000801`. Pixels scale
//! to `[0, 1]` on load. Only single-channel images are representable.

use std::path::Path;

use super::data::Dataset;
use crate::numerics::Tensor;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::format(offset as u64, format!("truncated while reading {what}")))
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
}

/// Load an image/label file pair into a dataset.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images_path)?;
    let lb = std::fs::read(labels_path)?;

    let magic = read_u32_be(&ib, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(&ib, 4, "image count")? as usize;
    let h = read_u32_be(&ib, 8, "image height")? as usize;
    let w = read_u32_be(&ib, 12, "image width")? as usize;
    let expected = 16 + count * h * w;
    if ib.len() != expected {
        return Err(Error::format(
            ib.len().min(expected) as u64,
            format!("image payload is {} bytes, expected {}", ib.len() - 16, count * h * w),
        ));
    }

    let lmagic = read_u32_be(&lb, 0, "label magic")?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic {lmagic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let lcount = read_u32_be(&lb, 4, "label count")? as usize;
    if lb.len() != 8 + lcount {
        return Err(Error::format(
            lb.len().min(8 + lcount) as u64,
            format!("label payload is {} bytes, expected {}", lb.len() - 8, lcount),
        ));
    }
    if lcount != count {
        return Err(Error::Data(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * h * w;
        let data: Vec<f64> = ib[start..start + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::from_vec(data, &[h, w, 1])?);
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        images,
        labels,
        num_classes,
    })
}

/// Write a dataset as an IDX image/label pair. Images must be
/// single-channel with values in `[0, 1]`.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::Data("refusing to write an empty dataset".into()))?;
    if first.rank() != 3 || first.shape()[2] != 1 {
        return Err(Error::Data(format!(
            "IDX export needs single-channel images, got {:?}",
            first.shape()
        )));
    }
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let mut ib = Vec::with_capacity(16 + dataset.len() * h * w);
    ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    ib.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    ib.extend_from_slice(&(h as u32).to_be_bytes());
    ib.extend_from_slice(&(w as u32).to_be_bytes());
    for img in &dataset.images {
        if img.shape() != first.shape() {
            return Err(Error::Data("inconsistent image shapes".into()));
        }
        for &v in img.data() {
            ib.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &label in &dataset.labels {
        if label > 255 {
            return Err(Error::Data(format!("label {label} exceeds one byte")));
        }
        lb.push(label as u8);
    }
    std::fs::write(images_path, ib)?;
    std::fs::write(labels_path, lb)?;
    Ok(())
}

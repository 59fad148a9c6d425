//! Bitemporal pairs: synthetic generation, on-disk loading and tiling.

pub mod grid;
pub mod loader;
pub mod synthetic;
pub mod tile;

use candle_core::{DType, Device, Tensor};

pub use grid::{Mask, Planar, RgbImage};
pub use loader::{load_dataset, scan_layout, write_dataset, DatasetSpec, LayoutSummary};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticSplits};
pub use tile::{reassemble, tile, EdgePolicy, TileIndex};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalPair {
    pub name: String,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
    pub label: Mask,
}

impl BitemporalPair {
    pub fn validate(&self) -> Result<()> {
        if !self.image_a.same_spatial(&self.image_b) || !self.image_a.same_spatial(&self.label) {
            return Err(Error::Dataset(format!(
                "sample {}: dimensions differ (A {}x{}, B {}x{}, label {}x{})",
                self.name,
                self.image_a.height,
                self.image_a.width,
                self.image_b.height,
                self.image_b.width,
                self.label.height,
                self.label.width
            )));
        }
        if self.image_a.channels != self.image_b.channels {
            return Err(Error::Dataset(format!("sample {}: channel counts differ", self.name)));
        }
        if !self.label.is_binary() {
            return Err(Error::Dataset(format!("sample {}: label is not binary", self.name)));
        }
        Ok(())
    }

    /// Stable 64-bit key derived from the sample name (FNV-1a).
    pub fn key(&self) -> u64 {
        name_key(&self.name)
    }
}

pub fn name_key(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stacked tensors for a group of pairs: images `(B, C, H, W)` and the label
/// mapped to `{-1, +1}` as `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct TensorBatch {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub x0: Tensor,
}

pub fn stack_images(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels, im.height, im.width) != (c, h, w) {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `{0, 1}` labels to the `{-1, +1}` diffusion domain.
pub fn encode_labels(labels: &[&Mask], dtype: DType) -> Result<Tensor> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for m in labels {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape("labels in a batch must share dimensions".into()));
        }
        data.extend(m.data.iter().map(|&v| if v != 0 { 1f32 } else { -1f32 }));
    }
    Ok(Tensor::from_vec(data, (labels.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl TensorBatch {
    pub fn from_pairs(pairs: &[&BitemporalPair], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let a: Vec<&RgbImage> = pairs.iter().map(|p| &p.image_a).collect();
        let b: Vec<&RgbImage> = pairs.iter().map(|p| &p.image_b).collect();
        let l: Vec<&Mask> = pairs.iter().map(|p| &p.label).collect();
        Ok(Self {
            image_a: stack_images(&a, dtype)?,
            image_b: stack_images(&b, dtype)?,
            x0: encode_labels(&l, dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image_a.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

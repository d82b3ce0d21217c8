//! Multimodal scene container and preprocessing.
//!
//! A [`Scene`] bundles co-registered raster stacks (one per modality, f32,
//! band-major) with a u8 label plane and class metadata. Submodules cover
//! on-disk round-tripping ([`io`]), per-band min-max normalization
//! ([`normalize`]), PCA spectral reduction ([`pca`]), sliding-window tiling
//! ([`tiling`]), and a deterministic paired-scene generator with a
//! controllable domain shift ([`synth`]).

pub mod io;
pub mod normalize;
pub mod pca;
pub mod synth;
pub mod tiling;

pub use io::{load_scene, save_scene};
pub use normalize::band_normalize;
pub use pca::{apply_pca, fit_pca, pca_reduce, PcaModel};
pub use synth::{synth_scene_pair, ShiftSpec, SynthSpec};
pub use tiling::{tile_origins, tile_scene};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which side of the adaptation pair a tile came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One modality's bands for a whole scene, band-major `[bands, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    pub modality_id: String,
    pub data: Array3<f32>,
}

impl RasterStack {
    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// A registered multimodal raster stack plus labels and class metadata.
///
/// Label values run 0..=num_classes, where the manifest's `ignore_index`
/// (conventionally 0) marks unannotated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub class_names: Vec<String>,
    pub modalities: Vec<RasterStack>,
    pub labels: Array2<u8>,
}

impl Scene {
    /// Enforces the structural invariants; called after every load and
    /// before every save.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Format("num_classes must be at least 1".into()));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(Error::Format(format!(
                "num_classes {} exceeds the 8-bit label range",
                self.num_classes
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Format(format!(
                "class_names has {} entries for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Format("scene has no modalities".into()));
        }
        let mut ids: Vec<&str> = self.modalities.iter().map(|m| m.modality_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.modalities.len() {
            return Err(Error::Format("modality ids are not unique".into()));
        }
        if self.labels.dim() != (self.height, self.width) {
            return Err(Error::Integrity(format!(
                "label plane is {:?}, manifest says ({}, {})",
                self.labels.dim(),
                self.height,
                self.width
            )));
        }
        for m in &self.modalities {
            if m.bands() == 0 {
                return Err(Error::Format(format!(
                    "modality {} has zero bands",
                    m.modality_id
                )));
            }
            if (m.height(), m.width()) != (self.height, self.width) {
                return Err(Error::Integrity(format!(
                    "modality {} is {}x{}, manifest says {}x{}",
                    m.modality_id,
                    m.height(),
                    m.width(),
                    self.height,
                    self.width
                )));
            }
            if let Some(v) = m.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "modality {} contains non-finite value {v}",
                    m.modality_id
                )));
            }
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l as usize > self.num_classes)
        {
            return Err(Error::Data(format!(
                "label {bad} exceeds num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn modality(&self, id: &str) -> Option<&RasterStack> {
        self.modalities.iter().find(|m| m.modality_id == id)
    }
}

/// A square training window cut from a scene.
#[derive(Debug, Clone)]
pub struct Tile {
    pub origin: (usize, usize),
    /// Crops in the scene's modality order, `[bands, tile, tile]` each.
    pub modalities: Vec<(String, Array3<f32>)>,
    pub labels: Array2<u8>,
    pub domain: Domain,
}

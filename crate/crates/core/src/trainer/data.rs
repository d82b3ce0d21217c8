//! Scene preprocessing and batch assembly for training.
//!
//! Preprocessing is per-scene: every modality is min-max normalized band by
//! band, then the hyperspectral stack is optionally projected through a PCA
//! fitted on the source scene, so source and target share spectral axes.

use ndarray::Array3;

use crate::raster::{apply_pca, band_normalize, fit_pca, PcaModel, Scene, Tile};
use crate::nn::Tensor;
use crate::{Error, Result};

/// Modality id the PCA reduction applies to.
pub const PCA_MODALITY: &str = "hsi";

/// Normalizes every modality band-wise in place of the original stacks.
pub fn normalize_scene(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    out.modalities = scene.modalities.iter().map(band_normalize).collect();
    out
}

/// Fits PCA on the scene's hyperspectral stack when reduction applies.
///
/// Returns `None` when no `hsi` modality exists or its band count does not
/// exceed `components` (nothing to reduce).
pub fn fit_scene_pca(scene: &Scene, components: Option<usize>) -> Result<Option<PcaModel>> {
    let Some(k) = components else {
        return Ok(None);
    };
    if k == 0 {
        return Err(Error::Config("pca_components must be positive".into()));
    }
    let Some(stack) = scene.modality(PCA_MODALITY) else {
        return Ok(None);
    };
    if stack.bands() <= k {
        return Ok(None);
    }
    Ok(Some(fit_pca(stack, k)?))
}

/// Applies a fitted PCA to the scene's hyperspectral stack, leaving other
/// modalities untouched.
pub fn apply_scene_pca(scene: &Scene, pca: Option<&PcaModel>) -> Result<Scene> {
    let Some(model) = pca else {
        return Ok(scene.clone());
    };
    let mut out = scene.clone();
    for m in &mut out.modalities {
        if m.modality_id == PCA_MODALITY {
            *m = apply_pca(model, m)?;
        }
    }
    Ok(out)
}

/// A training batch: one f64 tensor per modality plus stacked labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Modality id and `[N, bands, tile, tile]` tensor, in tile crop order.
    pub inputs: Vec<(String, Tensor)>,
    /// `[N, tile, tile]` labels; all zeros for unlabeled target batches.
    pub labels: Array3<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks tiles into batch tensors. All tiles must share modality order and
/// extent (they do when cut from one scene).
pub fn make_batch(tiles: &[&Tile]) -> Result<Batch> {
    if tiles.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let first = tiles[0];
    let (th, tw) = first.labels.dim();
    let mut inputs = Vec::with_capacity(first.modalities.len());
    for (m, (id, crop)) in first.modalities.iter().enumerate() {
        let (bands, _, _) = crop.dim();
        let mut x = Tensor::zeros((tiles.len(), bands, th, tw));
        for (n, tile) in tiles.iter().enumerate() {
            let (tid, tcrop) = &tile.modalities[m];
            if tid != id || tcrop.dim() != (bands, th, tw) {
                return Err(Error::Argument(
                    "tiles in a batch must share modality layout".into(),
                ));
            }
            for b in 0..bands {
                for r in 0..th {
                    for c in 0..tw {
                        x[[n, b, r, c]] = tcrop[[b, r, c]] as f64;
                    }
                }
            }
        }
        inputs.push((id.clone(), x));
    }
    let mut labels = Array3::<u8>::zeros((tiles.len(), th, tw));
    for (n, tile) in tiles.iter().enumerate() {
        labels
            .index_axis_mut(ndarray::Axis(0), n)
            .assign(&tile.labels);
    }
    Ok(Batch { inputs, labels })
}

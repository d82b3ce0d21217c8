//! Sliding-window tiling with border clamping.

use ndarray::{s, Array2, Array3};

use super::{Domain, Scene, Tile};
use crate::{Error, Result};

/// Window origins along one axis: stride steps while a full window fits,
/// plus a final origin clamped so the last window ends at the border.
///
/// The count is `ceil((extent - tile) / stride) + 1`.
pub fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    debug_assert!(tile >= 1 && tile <= extent && stride >= 1);
    let mut origins = Vec::new();
    let mut o = 0;
    while o + tile <= extent {
        origins.push(o);
        o += stride;
    }
    let last = extent - tile;
    if *origins.last().expect("origin 0 always fits") != last {
        origins.push(last);
    }
    origins
}

/// Cuts a scene into square tiles of side `tile` with step `stride`.
///
/// Tiles are emitted row-major over origins. Border tiles are shifted
/// inward so every tile is full-size and the scene is fully covered.
pub fn tile_scene(scene: &Scene, tile: usize, stride: usize, domain: Domain) -> Result<Vec<Tile>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Argument("tile and stride must be positive".into()));
    }
    if tile > scene.height || tile > scene.width {
        return Err(Error::Argument(format!(
            "tile {tile} exceeds scene extent {}x{}",
            scene.height, scene.width
        )));
    }
    let rows = tile_origins(scene.height, tile, stride);
    let cols = tile_origins(scene.width, tile, stride);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let modalities: Vec<(String, Array3<f32>)> = scene
                .modalities
                .iter()
                .map(|m| {
                    let crop = m
                        .data
                        .slice(s![.., r..r + tile, c..c + tile])
                        .to_owned();
                    (m.modality_id.clone(), crop)
                })
                .collect();
            let labels: Array2<u8> = scene.labels.slice(s![r..r + tile, c..c + tile]).to_owned();
            tiles.push(Tile {
                origin: (r, c),
                modalities,
                labels,
                domain,
            });
        }
    }
    Ok(tiles)
}

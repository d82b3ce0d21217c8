//! Full-scene inference with tile stitching.
//!
//! The scene is preprocessed with the model's stored pipeline, tiled with a
//! sliding window, and each tile is pushed through an eval-mode graph.
//! Per-class probabilities are averaged where windows overlap, then labels
//! come from the per-pixel argmax (ties resolve to the lowest class id).

use ndarray::{Array2, Array3};

use crate::adaptation::attention_correct_var;
use crate::nn::Graph;
use crate::raster::{tile_scene, Domain, Scene};
use crate::{Error, Result};

use super::data::make_batch;
use super::{preprocess_for_model, Model};

/// Predicts the whole scene, returning labels `[H, W]` (class ids `1..=C`)
/// and averaged class probabilities `[C, H, W]`. `apply_da` routes target
/// features through the attention correction before decoding.
pub fn infer_full_scene(
    model: &mut Model,
    scene: &Scene,
    tile: usize,
    stride: usize,
    apply_da: bool,
) -> Result<(Array2<u8>, Array3<f64>)> {
    if stride == 0 || stride > tile {
        return Err(Error::Argument(format!(
            "stride {stride} must be in 1..={tile} so windows cover the scene"
        )));
    }
    let scene = preprocess_for_model(model, scene)?;
    let tiles = tile_scene(&scene, tile, stride, Domain::Target)?;

    let classes = model.spec.num_classes;
    let (h, w) = (scene.height, scene.width);
    let mut canvas = Array3::<f64>::zeros((classes, h, w));
    let mut counts = Array2::<f64>::zeros((h, w));

    for t in &tiles {
        let batch = make_batch(&[t])?;
        let mut g = Graph::new(false);
        let mut v = model
            .encoder
            .encode_all(&mut g, &mut model.heads, &mut model.hr, &batch.inputs)?;
        if apply_da {
            let scores = model.d_feat.forward(&mut g, &model.df, v)?;
            let score_values = g.value(scores).clone();
            v = attention_correct_var(&mut g, v, &score_values)?;
        }
        let logits = model.decoder.forward(&mut g, &mut model.dec, v)?;
        let probs = g.softmax(logits);
        let pv = g.value(probs);
        let (oy, ox) = t.origin;
        for c in 0..classes {
            for i in 0..tile {
                for j in 0..tile {
                    canvas[[c, oy + i, ox + j]] += pv[[0, c, i, j]];
                }
            }
        }
        for i in 0..tile {
            for j in 0..tile {
                counts[[oy + i, ox + j]] += 1.0;
            }
        }
    }

    for c in 0..classes {
        for i in 0..h {
            for j in 0..w {
                canvas[[c, i, j]] /= counts[[i, j]];
            }
        }
    }
    let labels = argmax_labels(&canvas);
    Ok((labels, canvas))
}

/// Per-pixel argmax over the class axis; ties pick the lowest class id.
/// Channel `c` maps to label `c + 1`.
pub fn argmax_labels(probs: &Array3<f64>) -> Array2<u8> {
    let (classes, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        let mut best_p = probs[[0, i, j]];
        for c in 1..classes {
            if probs[[c, i, j]] > best_p {
                best = c;
                best_p = probs[[c, i, j]];
            }
        }
        (best + 1) as u8
    })
}

//! Adversarial domain adaptation: discriminators and the attention-based
//! target-feature correction.
//!
//! The feature-level discriminator scores fused feature maps pixel-wise
//! (stride-1 convolutions, so the score map keeps the feature extent, which
//! the attention rule needs). The category-level discriminator scores
//! softmax probability maps with strided convolutions. Both emit raw scores;
//! the least-squares losses in [`crate::losses`] apply the sigmoid, with
//! source labeled 0 and target labeled 1.

use ndarray::s;
use rand_chacha::ChaCha20Rng;

use crate::losses::sigmoid;
use crate::nn::{Conv2d, Graph, ParameterStore, Tensor, Var};
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Default hidden widths of the feature-level discriminator.
pub const FEATURE_WIDTHS: [usize; 3] = [256, 128, 64];
/// Default hidden widths of the category-level discriminator.
pub const CATEGORY_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorKind {
    /// Pixel-wise scores on fused features: 3x3 stride-1 convolutions.
    Feature,
    /// Scores on probability maps: 4x4 stride-2 convolutions.
    Category,
}

/// A stack of convolutions with leaky-ReLU between layers (not after the
/// last) emitting a 1-channel raw score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    kind: DiscriminatorKind,
    in_channels: usize,
    layers: Vec<Conv2d>,
}

impl Discriminator {
    /// Feature-level: hidden widths then a 1-channel head, all 3x3 stride 1.
    pub fn new_feature(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        in_channels: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        Self::build(store, rng, DiscriminatorKind::Feature, in_channels, hidden)
    }

    /// Category-level: hidden widths then a 1-channel head, all 4x4 stride 2.
    pub fn new_category(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        num_classes: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        Self::build(store, rng, DiscriminatorKind::Category, num_classes, hidden)
    }

    fn build(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        kind: DiscriminatorKind,
        in_channels: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config("discriminator input channels must be positive".into()));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "discriminator hidden widths {hidden:?} must be non-empty and positive"
            )));
        }
        let (k, stride, pad, prefix) = match kind {
            DiscriminatorKind::Feature => (3, 1, 1, "d_feat"),
            DiscriminatorKind::Category => (4, 2, 1, "d_cat"),
        };
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_channels;
        for (i, &w) in hidden.iter().enumerate() {
            layers.push(Conv2d::register(
                store,
                rng,
                &format!("{prefix}.conv{i}"),
                prev,
                w,
                k,
                stride,
                pad,
                true,
            ));
            prev = w;
        }
        layers.push(Conv2d::register(
            store,
            rng,
            &format!("{prefix}.head"),
            prev,
            1,
            k,
            stride,
            pad,
            true,
        ));
        Ok(Discriminator {
            kind,
            in_channels,
            layers,
        })
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Raw score map. Feature kind keeps the input extent; category kind
    /// halves it per layer.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (_, c, mut h, mut w) = g.value(x).dim();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "discriminator expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if self.kind == DiscriminatorKind::Category {
            for _ in 0..self.layers.len() {
                if h < 2 || w < 2 {
                    return Err(Error::Argument(format!(
                        "extent too small for {} strided layers",
                        self.layers.len()
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        let mut y = x;
        for (i, conv) in self.layers.iter().enumerate() {
            y = conv.forward(g, store, y);
            if i + 1 < self.layers.len() {
                y = g.leaky_relu(y, LEAKY_SLOPE);
            }
        }
        Ok(y)
    }
}

/// Attention correction of target features: `α = σ(scores)` broadcast over
/// channels and `out = v + v⊙α`. Returns the corrected features and α.
///
/// Pure-tensor version used at inference and as the oracle for the graph
/// path.
pub fn attention_correct(v: &Tensor, scores: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, _, h, w) = v.dim();
    let (sn, sc, sh, sw) = scores.dim();
    if sc != 1 || (sn, sh, sw) != (n, h, w) {
        return Err(Error::Argument(format!(
            "score map {:?} does not match features {:?}",
            scores.dim(),
            v.dim()
        )));
    }
    let alpha = scores.mapv(sigmoid);
    let mut out = v.clone();
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let a = 1.0 + alpha[[ni, 0, hi, wi]];
                out.slice_mut(s![ni, .., hi, wi]).mapv_inplace(|x| x * a);
            }
        }
    }
    Ok((out, alpha))
}

/// Analytic gradients of [`attention_correct`] for a given upstream
/// gradient: `dv = dy·(1+α)` and `dscores = Σ_c dy⊙v · σ'(scores)`.
pub fn attention_correct_grads(
    v: &Tensor,
    scores: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = v.dim();
    if dy.dim() != v.dim() {
        return Err(Error::Argument("upstream gradient shape mismatch".into()));
    }
    let (_, alpha) = attention_correct(v, scores)?;
    let mut dv = dy.clone();
    let mut dscores = Tensor::zeros(scores.raw_dim());
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let a = alpha[[ni, 0, hi, wi]];
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += dy[[ni, ci, hi, wi]] * v[[ni, ci, hi, wi]];
                    dv[[ni, ci, hi, wi]] *= 1.0 + a;
                }
                dscores[[ni, 0, hi, wi]] = dot * a * (1.0 - a);
            }
        }
    }
    Ok((dv, dscores))
}

/// Graph-side attention correction. The score map enters as a constant
/// factor, so gradients flow to the features but not to the discriminator;
/// the discriminator trains only through its own least-squares loss.
pub fn attention_correct_var(g: &mut Graph, v: Var, scores: &Tensor) -> Result<Var> {
    let (n, _, h, w) = g.value(v).dim();
    let (sn, sc, sh, sw) = scores.dim();
    if sc != 1 || (sn, sh, sw) != (n, h, w) {
        return Err(Error::Argument(format!(
            "score map {:?} does not match features {:?}",
            scores.dim(),
            g.value(v).dim()
        )));
    }
    let alpha = scores.mapv(sigmoid);
    let scaled = g.mul_const(v, alpha);
    Ok(g.add(v, scaled))
}

/// α lives in [0, 1] by construction; exposed for report plumbing.
pub fn attention_map(scores: &Tensor) -> Tensor {
    scores.mapv(sigmoid)
}

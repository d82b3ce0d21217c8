//! Segmentation head: aligned features to full-resolution class logits.
//!
//! Three conv→norm→ReLU blocks narrow the fused channels, one bilinear 2x
//! upsample sits after the first block, a stride-2 transposed convolution
//! restores the remaining factor, and a 1x1 convolution emits per-class
//! logits. The total 4x upsampling exactly inverts the encoder stem.

use rand_chacha::ChaCha20Rng;

use crate::nn::{kernels, BatchNorm2d, Conv2d, ConvTranspose2d, Graph, ParameterStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Channels of the aligned feature input (fused width).
    pub in_channels: usize,
    /// Widths of the three narrowing blocks; the transposed convolution
    /// keeps the last width.
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            in_channels: 2160,
            widths: vec![256, 128, 64],
            num_classes: 13,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("decoder input channels must be positive".into()));
        }
        if self.widths.len() != 3 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "decoder needs exactly three positive block widths, got {:?}",
                self.widths
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("decoder needs at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    upconv: ConvTranspose2d,
    classifier: Conv2d,
}

impl Decoder {
    pub fn new(
        config: DecoderConfig,
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        let [w1, w2, w3] = [config.widths[0], config.widths[1], config.widths[2]];
        let conv1 = Conv2d::register(store, rng, "dec.conv1", config.in_channels, w1, 3, 1, 1, false);
        let bn1 = BatchNorm2d::register(store, "dec.bn1", w1);
        let conv2 = Conv2d::register(store, rng, "dec.conv2", w1, w2, 3, 1, 1, false);
        let bn2 = BatchNorm2d::register(store, "dec.bn2", w2);
        let conv3 = Conv2d::register(store, rng, "dec.conv3", w2, w3, 3, 1, 1, false);
        let bn3 = BatchNorm2d::register(store, "dec.bn3", w3);
        // Kernel 4, stride 2, padding 1: exact doubling at any extent.
        let upconv = ConvTranspose2d::register(store, rng, "dec.upconv", w3, w3, 4, 2, 1, true);
        let classifier = Conv2d::register(
            store,
            rng,
            "dec.classifier",
            w3,
            config.num_classes,
            1,
            1,
            0,
            true,
        );
        Ok(Decoder {
            config,
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            upconv,
            classifier,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Aligned features `[N, in_channels, h, w]` to logits `[N, classes,
    /// 4h, 4w]`.
    pub fn forward(&self, g: &mut Graph, store: &mut ParameterStore, a: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(a).dim();
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "decoder expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("decoder input extent must be positive".into()));
        }
        let mut y = self.conv1.forward(g, store, a);
        y = self.bn1.forward(g, store, y);
        y = g.relu(y);
        y = g.bilinear_resize(y, 2 * h, 2 * w);
        y = self.conv2.forward(g, store, y);
        y = self.bn2.forward(g, store, y);
        y = g.relu(y);
        y = self.conv3.forward(g, store, y);
        y = self.bn3.forward(g, store, y);
        y = g.relu(y);
        y = self.upconv.forward(g, store, y);
        Ok(self.classifier.forward(g, store, y))
    }
}

/// Per-pixel softmax over the class axis; pure-tensor version for stitching
/// and the category discriminator's inference input.
pub fn predict_probs(logits: &Tensor) -> Tensor {
    kernels::softmax_channels(logits)
}

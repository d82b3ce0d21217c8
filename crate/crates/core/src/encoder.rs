//! Multimodal high-resolution encoder.
//!
//! Each modality runs through its own feature-extraction head (a strided
//! stem plus bottleneck blocks), then through a stack of multi-resolution
//! stages whose parameters are shared by every modality. Each stage widens
//! the pyramid by one stream at half the resolution and exchanges
//! information between all streams by summation. The per-modality pyramids
//! are finally flattened to the highest resolution and concatenated.

use rand_chacha::ChaCha20Rng;

use crate::nn::{BatchNorm2d, Conv2d, Graph, ParameterStore, Tensor, Var};
use crate::{Error, Result};

/// Spatial reduction applied by the two stride-2 stem convolutions.
pub const BASE_DOWNSAMPLE: usize = 4;

/// Widths and counts of the encoder topology.
///
/// Defaults follow the reference layout: head width 64, stream widths
/// [48, 96, 192, 384] (so the bottleneck emits 48), four blocks per stage,
/// three stages, and modalities hsi (PCA-reduced to 30), msi, sar.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Modality id and input channel count, in fixed registration order.
    pub modalities: Vec<(String, usize)>,
    /// Channel width of the two stem convolutions.
    pub head_width: usize,
    /// Channel width per pyramid stream; `stream_widths[0]` is also the
    /// bottleneck output width.
    pub stream_widths: Vec<usize>,
    /// Basic residual blocks applied to every stream in every stage.
    pub blocks_per_stage: usize,
    /// Number of multi-resolution stages; each adds one stream.
    pub stages: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            modalities: vec![("hsi".into(), 30), ("msi".into(), 4), ("sar".into(), 2)],
            head_width: 64,
            stream_widths: vec![48, 96, 192, 384],
            blocks_per_stage: 4,
            stages: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("encoder needs at least one modality".into()));
        }
        let mut ids: Vec<&str> = self.modalities.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.modalities.len() {
            return Err(Error::Config("modality ids must be unique".into()));
        }
        if self.modalities.iter().any(|(_, c)| *c == 0) {
            return Err(Error::Config("modality channel counts must be positive".into()));
        }
        if self.head_width == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        if self.stream_widths.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "{} stages need {} stream widths, got {}",
                self.stages,
                self.stages + 1,
                self.stream_widths.len()
            )));
        }
        if self.stream_widths[0] == 0 || !self.stream_widths[0].is_multiple_of(2) {
            return Err(Error::Config(
                "first stream width must be even (bottleneck mid width is half of it)".into(),
            ));
        }
        for pair in self.stream_widths.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::Config(format!(
                    "stream widths must double at each stage, got {:?}",
                    self.stream_widths
                )));
            }
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks per stage must be positive".into()));
        }
        Ok(())
    }

    /// Channels of one modality's flattened pyramid.
    pub fn fused_channels(&self) -> usize {
        self.stream_widths.iter().sum()
    }

    /// Channels after concatenating all modalities.
    pub fn total_fused_channels(&self) -> usize {
        self.fused_channels() * self.modalities.len()
    }

    pub fn modality_channels(&self, id: &str) -> Option<usize> {
        self.modalities
            .iter()
            .find(|(m, _)| m == id)
            .map(|(_, c)| *c)
    }
}

/// Residual bottleneck: 1x1, 3x3, 1x1 convolutions, each followed by
/// normalization, summed with the skip path, then one ReLU at the end.
#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    /// Projection skip when the input width differs from the output width.
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let mid = out_ch / 2;
        let conv1 = Conv2d::register(store, rng, &format!("{name}.conv1"), in_ch, mid, 1, 1, 0, false);
        let bn1 = BatchNorm2d::register(store, &format!("{name}.bn1"), mid);
        let conv2 = Conv2d::register(store, rng, &format!("{name}.conv2"), mid, mid, 3, 1, 1, false);
        let bn2 = BatchNorm2d::register(store, &format!("{name}.bn2"), mid);
        let conv3 = Conv2d::register(store, rng, &format!("{name}.conv3"), mid, out_ch, 1, 1, 0, false);
        let bn3 = BatchNorm2d::register(store, &format!("{name}.bn3"), out_ch);
        let proj = (in_ch != out_ch).then(|| {
            (
                Conv2d::register(store, rng, &format!("{name}.proj"), in_ch, out_ch, 1, 1, 0, false),
                BatchNorm2d::register(store, &format!("{name}.proj_bn"), out_ch),
            )
        });
        Bottleneck {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            proj,
        }
    }

    fn forward(&self, g: &mut Graph, store: &mut ParameterStore, x: Var) -> Var {
        let mut y = self.conv1.forward(g, store, x);
        y = self.bn1.forward(g, store, y);
        y = self.conv2.forward(g, store, y);
        y = self.bn2.forward(g, store, y);
        y = self.conv3.forward(g, store, y);
        y = self.bn3.forward(g, store, y);
        let skip = match &self.proj {
            Some((conv, bn)) => {
                let p = conv.forward(g, store, x);
                bn.forward(g, store, p)
            }
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

/// Residual pair of 3x3 convolutions with an identity skip.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl BasicBlock {
    fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
    ) -> Self {
        let conv1 = Conv2d::register(store, rng, &format!("{name}.conv1"), width, width, 3, 1, 1, false);
        let bn1 = BatchNorm2d::register(store, &format!("{name}.bn1"), width);
        let conv2 = Conv2d::register(store, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, false);
        let bn2 = BatchNorm2d::register(store, &format!("{name}.bn2"), width);
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
        }
    }

    fn forward(&self, g: &mut Graph, store: &mut ParameterStore, x: Var) -> Var {
        let mut y = self.conv1.forward(g, store, x);
        y = self.bn1.forward(g, store, y);
        y = g.relu(y);
        y = self.conv2.forward(g, store, y);
        y = self.bn2.forward(g, store, y);
        let sum = g.add(y, x);
        g.relu(sum)
    }
}

/// Modality-specific feature-extraction head: two stride-2 stem
/// convolutions at `head_width`, then bottleneck blocks emitting
/// `stream_widths[0]`.
#[derive(Debug, Clone)]
pub struct ModalityHead {
    id: String,
    in_channels: usize,
    stem1: Conv2d,
    stem1_bn: BatchNorm2d,
    stem2: Conv2d,
    stem2_bn: BatchNorm2d,
    blocks: Vec<Bottleneck>,
}

impl ModalityHead {
    fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        id: &str,
        in_channels: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let w = cfg.head_width;
        let out = cfg.stream_widths[0];
        let stem1 = Conv2d::register(store, rng, &format!("{id}.stem1"), in_channels, w, 3, 2, 1, false);
        let stem1_bn = BatchNorm2d::register(store, &format!("{id}.stem1_bn"), w);
        let stem2 = Conv2d::register(store, rng, &format!("{id}.stem2"), w, w, 3, 2, 1, false);
        let stem2_bn = BatchNorm2d::register(store, &format!("{id}.stem2_bn"), w);
        let blocks = (0..4)
            .map(|b| {
                let in_ch = if b == 0 { w } else { out };
                Bottleneck::register(store, rng, &format!("{id}.block{b}"), in_ch, out)
            })
            .collect();
        ModalityHead {
            id: id.to_string(),
            in_channels,
            stem1,
            stem1_bn,
            stem2,
            stem2_bn,
            blocks,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParameterStore, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dim();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "modality {} expects {} channels, got {c}",
                self.id, self.in_channels
            )));
        }
        if h % BASE_DOWNSAMPLE != 0 || w % BASE_DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "input extent {h}x{w} must be a positive multiple of {BASE_DOWNSAMPLE}"
            )));
        }
        let mut y = self.stem1.forward(g, store, x);
        y = self.stem1_bn.forward(g, store, y);
        y = g.relu(y);
        y = self.stem2.forward(g, store, y);
        y = self.stem2_bn.forward(g, store, y);
        y = g.relu(y);
        for block in &self.blocks {
            y = block.forward(g, store, y);
        }
        Ok(y)
    }
}

/// Cross-resolution fusion path inside an exchange unit.
#[derive(Debug, Clone)]
enum FusePath {
    /// Lower resolution to higher: bilinear upsample, 1x1 conv, norm.
    Up { conv: Conv2d, bn: BatchNorm2d },
    /// Higher resolution to lower: chained stride-2 3x3 convs, ReLU between
    /// steps but not after the last.
    Down { steps: Vec<(Conv2d, BatchNorm2d)> },
}

/// One multi-resolution stage: per-stream basic blocks, creation of a new
/// stream at half the lowest resolution, then an all-pairs sum exchange.
#[derive(Debug, Clone)]
pub struct HrStage {
    index: usize,
    blocks: Vec<Vec<BasicBlock>>,
    new_stream: (Conv2d, BatchNorm2d),
    /// Paths keyed implicitly by iteration order: for each destination
    /// stream, each source stream except the destination itself.
    fuse: Vec<Vec<Option<FusePath>>>,
}

impl HrStage {
    fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        index: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let widths = &cfg.stream_widths;
        let n_in = index + 1;
        let n_out = index + 2;
        let blocks = (0..n_in)
            .map(|s| {
                (0..cfg.blocks_per_stage)
                    .map(|b| {
                        BasicBlock::register(
                            store,
                            rng,
                            &format!("stage{index}.stream{s}.block{b}"),
                            widths[s],
                        )
                    })
                    .collect()
            })
            .collect();
        let new_stream = (
            Conv2d::register(
                store,
                rng,
                &format!("stage{index}.new"),
                widths[n_in - 1],
                widths[n_in],
                3,
                2,
                1,
                false,
            ),
            BatchNorm2d::register(store, &format!("stage{index}.new_bn"), widths[n_in]),
        );
        let mut fuse = Vec::with_capacity(n_out);
        for dst in 0..n_out {
            let mut row = Vec::with_capacity(n_out);
            for src in 0..n_out {
                if src == dst {
                    row.push(None);
                    continue;
                }
                let name = format!("stage{index}.fuse{src}to{dst}");
                let path = if src > dst {
                    FusePath::Up {
                        conv: Conv2d::register(
                            store,
                            rng,
                            &format!("{name}.conv"),
                            widths[src],
                            widths[dst],
                            1,
                            1,
                            0,
                            false,
                        ),
                        bn: BatchNorm2d::register(store, &format!("{name}.bn"), widths[dst]),
                    }
                } else {
                    let gap = dst - src;
                    let steps = (0..gap)
                        .map(|k| {
                            let in_ch = if k == 0 { widths[src] } else { widths[src + k] };
                            let out_ch = widths[src + k + 1];
                            (
                                Conv2d::register(
                                    store,
                                    rng,
                                    &format!("{name}.step{k}"),
                                    in_ch,
                                    out_ch,
                                    3,
                                    2,
                                    1,
                                    false,
                                ),
                                BatchNorm2d::register(store, &format!("{name}.step{k}_bn"), out_ch),
                            )
                        })
                        .collect();
                    FusePath::Down { steps }
                };
                row.push(Some(path));
            }
            fuse.push(row);
        }
        HrStage {
            index,
            blocks,
            new_stream,
            fuse,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParameterStore,
        pyramid: &[Var],
    ) -> Result<Vec<Var>> {
        if pyramid.len() != self.index + 1 {
            return Err(Error::State(format!(
                "stage {} expects {} streams, got {}",
                self.index,
                self.index + 1,
                pyramid.len()
            )));
        }
        let mut streams: Vec<Var> = Vec::with_capacity(self.index + 2);
        for (s, &x) in pyramid.iter().enumerate() {
            let mut y = x;
            for block in &self.blocks[s] {
                y = block.forward(g, store, y);
            }
            streams.push(y);
        }
        let lowest = *streams.last().expect("pyramid is non-empty");
        let mut created = self.new_stream.0.forward(g, store, lowest);
        created = self.new_stream.1.forward(g, store, created);
        created = g.relu(created);
        streams.push(created);

        let mut fused = Vec::with_capacity(streams.len());
        for dst in 0..streams.len() {
            let (_, _, dh, dw) = g.value(streams[dst]).dim();
            let mut acc = streams[dst];
            for (src, &sv) in streams.iter().enumerate() {
                let contribution = match &self.fuse[dst][src] {
                    None => continue,
                    Some(FusePath::Up { conv, bn }) => {
                        let up = g.bilinear_resize(sv, dh, dw);
                        let y = conv.forward(g, store, up);
                        bn.forward(g, store, y)
                    }
                    Some(FusePath::Down { steps }) => {
                        let mut y = sv;
                        for (k, (conv, bn)) in steps.iter().enumerate() {
                            y = conv.forward(g, store, y);
                            y = bn.forward(g, store, y);
                            if k + 1 < steps.len() {
                                y = g.relu(y);
                            }
                        }
                        y
                    }
                };
                acc = g.add(acc, contribution);
            }
            fused.push(g.relu(acc));
        }
        Ok(fused)
    }
}

/// Flattens a pyramid: every stream is bilinearly upsampled to the first
/// stream's resolution and all are concatenated along channels. A
/// single-stream pyramid passes through unchanged.
pub fn pyramid_fuse(g: &mut Graph, pyramid: &[Var]) -> Var {
    assert!(!pyramid.is_empty(), "pyramid_fuse needs at least one stream");
    if pyramid.len() == 1 {
        return pyramid[0];
    }
    let (_, _, h, w) = g.value(pyramid[0]).dim();
    let parts: Vec<Var> = pyramid
        .iter()
        .map(|&p| g.bilinear_resize(p, h, w))
        .collect();
    g.concat_channels(&parts)
}

/// The full encoder: modality-specific heads plus stages whose parameters
/// are shared across modalities.
#[derive(Debug, Clone)]
pub struct MultiModalEncoder {
    config: EncoderConfig,
    heads: Vec<ModalityHead>,
    stages: Vec<HrStage>,
}

impl MultiModalEncoder {
    /// Registers all parameters: heads into `head_store`, the shared stages
    /// into `hr_store`.
    pub fn new(
        config: EncoderConfig,
        head_store: &mut ParameterStore,
        hr_store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        let heads = config
            .modalities
            .iter()
            .map(|(id, ch)| ModalityHead::register(head_store, rng, id, *ch, &config))
            .collect();
        let stages = (0..config.stages)
            .map(|i| HrStage::register(hr_store, rng, i, &config))
            .collect();
        Ok(MultiModalEncoder {
            config,
            heads,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn head(&self, id: &str) -> Result<&ModalityHead> {
        self.heads
            .iter()
            .find(|h| h.id() == id)
            .ok_or_else(|| Error::Argument(format!("unknown modality {id:?}")))
    }

    /// Head, shared stages, and pyramid flattening for one modality.
    /// Runs one modality through its head and the shared trunk, returning
    /// the resolution pyramid after the last stage (finest stream first).
    pub fn encode_modality_pyramid(
        &self,
        g: &mut Graph,
        head_store: &mut ParameterStore,
        hr_store: &mut ParameterStore,
        id: &str,
        x: Var,
    ) -> Result<Vec<Var>> {
        let head = self.head(id)?;
        let base = head.forward(g, head_store, x)?;
        let mut pyramid = vec![base];
        for stage in &self.stages {
            pyramid = stage.forward(g, hr_store, &pyramid)?;
        }
        Ok(pyramid)
    }

    pub fn encode_modality(
        &self,
        g: &mut Graph,
        head_store: &mut ParameterStore,
        hr_store: &mut ParameterStore,
        id: &str,
        x: Var,
    ) -> Result<Var> {
        let pyramid = self.encode_modality_pyramid(g, head_store, hr_store, id, x)?;
        Ok(pyramid_fuse(g, &pyramid))
    }

    /// Encodes every configured modality and concatenates the fused maps in
    /// configuration order. `inputs` must cover the configured modalities
    /// exactly.
    pub fn encode_all(
        &self,
        g: &mut Graph,
        head_store: &mut ParameterStore,
        hr_store: &mut ParameterStore,
        inputs: &[(String, Tensor)],
    ) -> Result<Var> {
        if inputs.len() != self.config.modalities.len() {
            return Err(Error::Argument(format!(
                "expected {} modalities, got {}",
                self.config.modalities.len(),
                inputs.len()
            )));
        }
        let mut fused = Vec::with_capacity(self.config.modalities.len());
        for (id, _) in &self.config.modalities {
            let (_, x) = inputs
                .iter()
                .find(|(iid, _)| iid == id)
                .ok_or_else(|| Error::Argument(format!("missing modality {id:?}")))?;
            let xv = g.input(x.clone());
            fused.push(self.encode_modality(g, head_store, hr_store, id, xv)?);
        }
        if fused.len() == 1 {
            Ok(fused[0])
        } else {
            Ok(g.concat_channels(&fused))
        }
    }
}

/// Total learnable scalar count across the given stores.
pub fn count_params(stores: &[&ParameterStore]) -> usize {
    stores.iter().map(|s| s.learnable_count()).sum()
}

//! End-to-end training: batch assembly, alternating adversarial
//! optimization, checkpointing, loss tracing, and stitched inference.
//!
//! A step runs three isolated sub-updates: the segmenter minimizes the
//! supervised loss plus weighted generator terms, then each discriminator
//! minimizes its least-squares loss on detached activations from the same
//! step. Optimizers only ever touch their own stores, so the isolation is
//! structural rather than relying on gradient masking.

pub mod checkpoint;
pub mod data;
pub mod infer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use data::{make_batch, Batch};
pub use infer::infer_full_scene;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{attention_correct_var, Discriminator, CATEGORY_WIDTHS, FEATURE_WIDTHS};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderConfig, MultiModalEncoder};
use crate::losses::{self, DiceMode, LossWeights};
use crate::nn::{Adam, Graph, ParameterStore, Tensor};
use crate::raster::{load_scene, tile_scene, Domain, PcaModel, Scene, Tile};
use crate::{Error, Result};

fn default_tile() -> usize {
    128
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-4
}
fn default_pca() -> Option<usize> {
    Some(30)
}
fn default_true() -> bool {
    true
}
fn default_head_width() -> usize {
    64
}
fn default_stream_widths() -> Vec<usize> {
    vec![48, 96, 192, 384]
}
fn default_blocks() -> usize {
    4
}
fn default_decoder_widths() -> Vec<usize> {
    vec![256, 128, 64]
}
fn default_d_feat_widths() -> Vec<usize> {
    FEATURE_WIDTHS.to_vec()
}
fn default_d_cat_widths() -> Vec<usize> {
    CATEGORY_WIDTHS.to_vec()
}

/// Training configuration; the JSON schema of the `train` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub source_dir: PathBuf,
    /// Required when any adaptation branch is enabled.
    #[serde(default)]
    pub target_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    /// Defaults to `tile_size` (no overlap).
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_segmenter: f64,
    #[serde(default = "default_lr")]
    pub lr_discriminator: f64,
    /// Passes over the source tile set.
    pub epochs: usize,
    /// When set, runs exactly this many steps instead of `epochs` passes.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_pca")]
    pub pca_components: Option<usize>,
    #[serde(default = "default_true")]
    pub enable_feature_da: bool,
    #[serde(default = "default_true")]
    pub enable_category_da: bool,
    #[serde(default = "default_true")]
    pub enable_dice: bool,
    #[serde(default)]
    pub dice_mode: DiceMode,
    #[serde(default)]
    pub seed: u64,
    /// Extra checkpoint every N steps, besides the final one.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    #[serde(default = "default_stream_widths")]
    pub stream_widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "default_d_feat_widths")]
    pub d_feat_widths: Vec<usize>,
    #[serde(default = "default_d_cat_widths")]
    pub d_cat_widths: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "tile_size {} must be a positive multiple of 32",
                self.tile_size
            )));
        }
        if let Some(s) = self.stride {
            if s == 0 {
                return Err(Error::Config("stride must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let usable_lr = |lr: f64| lr.is_finite() && lr > 0.0;
        if !usable_lr(self.lr_segmenter) || !usable_lr(self.lr_discriminator) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        self.weights.validate()?;
        if (self.enable_feature_da || self.enable_category_da) && self.target_dir.is_none() {
            return Err(Error::Config(
                "adaptation requires a target_dir; disable both DA switches for single-domain training".into(),
            ));
        }
        Ok(())
    }

    pub fn stride_or_default(&self) -> usize {
        self.stride.unwrap_or(self.tile_size)
    }
}

/// Everything needed to rebuild the network and run inference: scene-derived
/// sizes plus the width overrides in force when training started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Modality id and channel count after preprocessing (PCA included).
    pub modalities: Vec<(String, usize)>,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub class_names: Vec<String>,
    pub head_width: usize,
    pub stream_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub decoder_widths: Vec<usize>,
    pub d_feat_widths: Vec<usize>,
    pub d_cat_widths: Vec<usize>,
    pub enable_feature_da: bool,
}

impl ModelSpec {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            modalities: self.modalities.clone(),
            head_width: self.head_width,
            stream_widths: self.stream_widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            stages: self.stream_widths.len().saturating_sub(1),
        }
    }

    /// Derives the model spec from a config and the preprocessed source scene.
    pub fn from_config(config: &TrainConfig, preprocessed_source: &Scene) -> Self {
        ModelSpec {
            modalities: preprocessed_source
                .modalities
                .iter()
                .map(|m| (m.modality_id.clone(), m.bands()))
                .collect(),
            num_classes: preprocessed_source.num_classes,
            ignore_index: preprocessed_source.ignore_index,
            class_names: preprocessed_source.class_names.clone(),
            head_width: config.head_width,
            stream_widths: config.stream_widths.clone(),
            blocks_per_stage: config.blocks_per_stage,
            decoder_widths: config.decoder_widths.clone(),
            d_feat_widths: config.d_feat_widths.clone(),
            d_cat_widths: config.d_cat_widths.clone(),
            enable_feature_da: config.enable_feature_da,
        }
    }
}

/// The full parameter set: network modules plus their stores and the fitted
/// preprocessing arrays.
#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: MultiModalEncoder,
    pub decoder: Decoder,
    pub d_feat: Discriminator,
    pub d_cat: Discriminator,
    pub heads: ParameterStore,
    pub hr: ParameterStore,
    pub dec: ParameterStore,
    pub df: ParameterStore,
    pub dc: ParameterStore,
    /// Fitted preprocessing buffers (PCA mean/components), not learnable.
    pub preproc: ParameterStore,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Model> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut heads = ParameterStore::new("heads");
        let mut hr = ParameterStore::new("hr");
        let mut dec = ParameterStore::new("decoder");
        let mut df = ParameterStore::new("d_feat");
        let mut dc = ParameterStore::new("d_cat");
        let preproc = ParameterStore::new("preproc");

        let encoder = MultiModalEncoder::new(spec.encoder_config(), &mut heads, &mut hr, &mut rng)?;
        let decoder = Decoder::new(
            DecoderConfig {
                in_channels: encoder.config().total_fused_channels(),
                widths: spec.decoder_widths.clone(),
                num_classes: spec.num_classes,
            },
            &mut dec,
            &mut rng,
        )?;
        let d_feat = Discriminator::new_feature(
            &mut df,
            &mut rng,
            encoder.config().total_fused_channels(),
            &spec.d_feat_widths,
        )?;
        let d_cat =
            Discriminator::new_category(&mut dc, &mut rng, spec.num_classes, &spec.d_cat_widths)?;
        Ok(Model {
            spec: spec.clone(),
            encoder,
            decoder,
            d_feat,
            d_cat,
            heads,
            hr,
            dec,
            df,
            dc,
            preproc,
        })
    }

    /// Stores the fitted PCA as checkpoint buffers.
    pub fn set_pca(&mut self, pca: Option<&PcaModel>) {
        let Some(m) = pca else { return };
        let bands = m.input_bands();
        let k = m.output_bands();
        let mean = Tensor::from_shape_fn((1, bands, 1, 1), |(_, b, _, _)| m.mean[b]);
        let comps = Tensor::from_shape_fn((k, bands, 1, 1), |(r, b, _, _)| m.components[[r, b]]);
        let explained = Tensor::from_shape_fn((k, 1, 1, 1), |(r, _, _, _)| m.explained[r]);
        let total = crate::nn::scalar(m.total_variance);
        self.preproc.insert("pca.hsi.mean", mean, false);
        self.preproc.insert("pca.hsi.components", comps, false);
        self.preproc.insert("pca.hsi.explained", explained, false);
        self.preproc.insert("pca.hsi.total_variance", total, false);
    }

    /// Rebuilds the PCA model from the preprocessing buffers, if present.
    pub fn pca(&self) -> Option<PcaModel> {
        if !self.preproc.contains("pca.hsi.mean") {
            return None;
        }
        let mean_t = self.preproc.get("pca.hsi.mean");
        let comps_t = self.preproc.get("pca.hsi.components");
        let explained_t = self.preproc.get("pca.hsi.explained");
        let total = self.preproc.get("pca.hsi.total_variance")[[0, 0, 0, 0]];
        let bands = mean_t.dim().1;
        let k = comps_t.dim().0;
        let mean: Vec<f64> = (0..bands).map(|b| mean_t[[0, b, 0, 0]]).collect();
        let components =
            ndarray::Array2::from_shape_fn((k, bands), |(r, b)| comps_t[[r, b, 0, 0]]);
        let explained: Vec<f64> = (0..k).map(|r| explained_t[[r, 0, 0, 0]]).collect();
        Some(PcaModel {
            mean,
            components,
            explained,
            total_variance: total,
        })
    }

    /// Store views in checkpoint order.
    pub fn stores(&self) -> [&ParameterStore; 6] {
        [
            &self.heads,
            &self.hr,
            &self.dec,
            &self.df,
            &self.dc,
            &self.preproc,
        ]
    }

    pub fn learnable_params(&self) -> usize {
        self.stores().iter().map(|s| s.learnable_count()).sum()
    }
}

/// Per-step losses; zeros for disabled components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iter: usize,
    /// Supervised segmentation loss: mce + dice.
    pub seg: f64,
    pub mce: f64,
    pub dice: f64,
    pub g_feat: f64,
    pub g_cat: f64,
    pub d_feat: f64,
    pub d_cat: f64,
    /// The segmenter objective: seg + λ·g_feat + μ·g_cat.
    pub total: f64,
}

pub const TRACE_HEADER: &str = "iter,seg,mce,dice,g_feat,g_cat,d_feat,d_cat,total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.seg,
            self.mce,
            self.dice,
            self.g_feat,
            self.g_cat,
            self.d_feat,
            self.d_cat,
            self.total
        )
    }
}

/// Mutable training state: model, optimizers, switches.
pub struct Trainer {
    pub model: Model,
    adam_seg: Adam,
    adam_d_feat: Adam,
    adam_d_cat: Adam,
    weights: LossWeights,
    enable_feature_da: bool,
    enable_category_da: bool,
    enable_dice: bool,
    dice_mode: DiceMode,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig) -> Trainer {
        Trainer {
            model,
            adam_seg: Adam::new(config.lr_segmenter),
            adam_d_feat: Adam::new(config.lr_discriminator),
            adam_d_cat: Adam::new(config.lr_discriminator),
            weights: config.weights,
            enable_feature_da: config.enable_feature_da,
            enable_category_da: config.enable_category_da,
            enable_dice: config.enable_dice,
            dice_mode: config.dice_mode,
            iteration: 0,
        }
    }

    /// One alternating step: segmenter update, then each enabled
    /// discriminator on detached activations from the same forward pass.
    pub fn step(&mut self, source: &Batch, target: Option<&Batch>) -> Result<LossRecord> {
        if source.is_empty() {
            return Err(Error::Argument("empty source batch".into()));
        }
        let need_target = self.enable_feature_da || self.enable_category_da;
        let target = if need_target {
            let t = target.ok_or_else(|| {
                Error::Argument("adaptation step needs a target batch".into())
            })?;
            if t.is_empty() {
                return Err(Error::Argument("empty target batch".into()));
            }
            Some(t)
        } else {
            None
        };
        let m = &mut self.model;
        let ignore = m.spec.ignore_index;

        // Part 1: segmenter. Generator terms backpropagate through frozen
        // discriminator weights into the encoder.
        let mut g = Graph::new(true);
        let v_s = m
            .encoder
            .encode_all(&mut g, &mut m.heads, &mut m.hr, &source.inputs)?;
        let logits_s = m.decoder.forward(&mut g, &mut m.dec, v_s)?;
        let probs_s = g.softmax(logits_s);
        let (mce_var, _labeled) = g.mce(logits_s, &source.labels, ignore)?;
        let mce_val = g.scalar_value(mce_var);
        let mut terms = vec![(mce_var, 1.0)];
        let mut dice_val = 0.0;
        if self.enable_dice {
            let dice_var = g.dice(probs_s, &source.labels, ignore, self.dice_mode)?;
            dice_val = g.scalar_value(dice_var);
            terms.push((dice_var, 1.0));
        }

        let mut g_feat_val = 0.0;
        let mut g_cat_val = 0.0;
        let mut v_t_detached: Option<Tensor> = None;
        let mut probs_t_detached: Option<Tensor> = None;
        if let Some(target) = target {
            let v_t = m
                .encoder
                .encode_all(&mut g, &mut m.heads, &mut m.hr, &target.inputs)?;
            v_t_detached = Some(g.value(v_t).clone());
            let aligned_t = if self.enable_feature_da {
                let scores_t = m.d_feat.forward(&mut g, &m.df, v_t)?;
                let g_feat = g.lsgan_g(scores_t);
                g_feat_val = g.scalar_value(g_feat);
                terms.push((g_feat, self.weights.lambda));
                let score_values = g.value(scores_t).clone();
                attention_correct_var(&mut g, v_t, &score_values)?
            } else {
                v_t
            };
            if self.enable_category_da {
                let logits_t = m.decoder.forward(&mut g, &mut m.dec, aligned_t)?;
                let probs_t = g.softmax(logits_t);
                probs_t_detached = Some(g.value(probs_t).clone());
                let scores_c = m.d_cat.forward(&mut g, &m.dc, probs_t)?;
                let g_cat = g.lsgan_g(scores_c);
                g_cat_val = g.scalar_value(g_cat);
                terms.push((g_cat, self.weights.mu));
            }
        }

        let seg_val = mce_val + dice_val;
        // Validates finiteness and names the offending term on NaN/Inf.
        let total_val = losses::total_loss(seg_val, g_feat_val, g_cat_val, &self.weights)?;
        let total = g.weighted_sum(&terms);
        let grads = g.backward(total);
        self.adam_seg
            .step(&mut [&mut m.heads, &mut m.hr, &mut m.dec], &grads);

        // Part 2: feature discriminator on detached fused features.
        let mut d_feat_val = 0.0;
        if self.enable_feature_da {
            let mut g2 = Graph::new(true);
            let vs = g2.constant(g.value(v_s).clone());
            let vt = g2.constant(v_t_detached.clone().expect("target features computed"));
            let ss = m.d_feat.forward(&mut g2, &m.df, vs)?;
            let st = m.d_feat.forward(&mut g2, &m.df, vt)?;
            let dl = g2.lsgan_d(ss, st);
            d_feat_val = g2.scalar_value(dl);
            if !d_feat_val.is_finite() {
                return Err(Error::Numeric("d_feat".into()));
            }
            let grads2 = g2.backward(dl);
            self.adam_d_feat.step(&mut [&mut m.df], &grads2);
        }

        // Part 3: category discriminator on detached probability maps.
        let mut d_cat_val = 0.0;
        if self.enable_category_da {
            let mut g3 = Graph::new(true);
            let ps = g3.constant(g.value(probs_s).clone());
            let pt = g3.constant(probs_t_detached.expect("target probabilities computed"));
            let ss = m.d_cat.forward(&mut g3, &m.dc, ps)?;
            let st = m.d_cat.forward(&mut g3, &m.dc, pt)?;
            let dl = g3.lsgan_d(ss, st);
            d_cat_val = g3.scalar_value(dl);
            if !d_cat_val.is_finite() {
                return Err(Error::Numeric("d_cat".into()));
            }
            let grads3 = g3.backward(dl);
            self.adam_d_cat.step(&mut [&mut m.dc], &grads3);
        }

        self.iteration += 1;
        Ok(LossRecord {
            iter: self.iteration,
            seg: seg_val,
            mce: mce_val,
            dice: dice_val,
            g_feat: g_feat_val,
            g_cat: g_cat_val,
            d_feat: d_feat_val,
            d_cat: d_cat_val,
            total: total_val,
        })
    }
}

/// Cycles tile indices in shuffled order, reshuffling per pass.
struct ShuffledCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha20Rng,
}

impl ShuffledCycle {
    fn new(n: usize, seed: u64) -> ShuffledCycle {
        let mut cycle = ShuffledCycle {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        };
        cycle.reshuffle();
        cycle
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn select<'t>(tiles: &'t [Tile], idx: &[usize]) -> Vec<&'t Tile> {
    idx.iter().map(|&i| &tiles[i]).collect()
}

/// Run metadata written next to the trace for reproducibility.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    config: &'a TrainConfig,
    spec: &'a ModelSpec,
    active_modules: Vec<&'a str>,
    source_tiles: usize,
    target_tiles: usize,
    steps: usize,
}

/// Trains a model per the config; writes `trace.csv`, `run_manifest.json`,
/// and `checkpoint.ckpt` into `out_dir`, returning the final checkpoint and
/// the in-memory trace.
pub fn fit(config: &TrainConfig) -> Result<(Checkpoint, Vec<LossRecord>)> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

    let source = load_scene(&config.source_dir)?;
    let target = config
        .target_dir
        .as_ref()
        .map(load_scene)
        .transpose()?;
    if let Some(t) = &target {
        if t.num_classes != source.num_classes {
            return Err(Error::Config(format!(
                "source has {} classes but target has {}",
                source.num_classes, t.num_classes
            )));
        }
    }

    let source_n = data::normalize_scene(&source);
    let pca = data::fit_scene_pca(&source_n, config.pca_components)?;
    let source_p = data::apply_scene_pca(&source_n, pca.as_ref())?;
    let target_p = target
        .map(|t| data::apply_scene_pca(&data::normalize_scene(&t), pca.as_ref()))
        .transpose()?;

    let spec = ModelSpec::from_config(config, &source_p);
    let mut model = Model::new(&spec, config.seed)?;
    model.set_pca(pca.as_ref());

    let stride = config.stride_or_default();
    let src_tiles = tile_scene(&source_p, config.tile_size, stride, Domain::Source)?;
    let tgt_tiles = target_p
        .as_ref()
        .map(|t| tile_scene(t, config.tile_size, stride, Domain::Target))
        .transpose()?
        .unwrap_or_default();

    let steps_per_epoch = src_tiles.len().div_ceil(config.batch_size);
    let steps = config
        .iterations
        .unwrap_or(config.epochs * steps_per_epoch);

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        config,
        spec: &spec,
        active_modules: {
            let mut m = vec!["encoder", "decoder", "mce"];
            if config.enable_dice {
                m.push("dice");
            }
            if config.enable_feature_da {
                m.push("feature_da");
            }
            if config.enable_category_da {
                m.push("category_da");
            }
            m
        },
        source_tiles: src_tiles.len(),
        target_tiles: tgt_tiles.len(),
        steps,
    };
    let manifest_path = config.out_dir.join("run_manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?,
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    let trace_path = config.out_dir.join("trace.csv");
    let mut trace_file = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    writeln!(trace_file, "{TRACE_HEADER}").map_err(|e| Error::io(&trace_path, e))?;

    let mut trainer = Trainer::new(model, config);
    let mut src_cycle = ShuffledCycle::new(src_tiles.len(), config.seed.wrapping_add(1));
    let mut tgt_cycle = (!tgt_tiles.is_empty())
        .then(|| ShuffledCycle::new(tgt_tiles.len(), config.seed.wrapping_add(2)));

    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let src_idx = src_cycle.next_batch(config.batch_size.min(src_tiles.len()));
        let src_batch = make_batch(&select(&src_tiles, &src_idx))?;
        let tgt_batch = match &mut tgt_cycle {
            Some(cycle) if config.enable_feature_da || config.enable_category_da => {
                let idx = cycle.next_batch(config.batch_size.min(tgt_tiles.len()));
                Some(make_batch(&select(&tgt_tiles, &idx))?)
            }
            _ => None,
        };
        let record = trainer.step(&src_batch, tgt_batch.as_ref())?;
        writeln!(trace_file, "{}", record.csv_row()).map_err(|e| Error::io(&trace_path, e))?;
        trace.push(record);

        if let Some(every) = config.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 && step + 1 < steps {
                let path = config.out_dir.join(format!("checkpoint_{:06}.ckpt", step + 1));
                checkpoint::write_checkpoint(
                    &path,
                    config,
                    trainer.iteration,
                    &RngState::capture(&src_cycle.rng),
                    &trainer.model,
                )?;
            }
        }
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        iteration: trainer.iteration,
        rng: RngState::capture(&src_cycle.rng),
        model: trainer.model,
    };
    save_checkpoint(&checkpoint, config.out_dir.join("checkpoint.ckpt"))?;
    Ok((checkpoint, trace))
}

/// Loads, preprocesses, and tiles a scene with a trained model's
/// preprocessing; shared by eval and predict.
pub fn prepare_scene_for_model(model: &Model, dir: &Path) -> Result<Scene> {
    let scene = load_scene(dir)?;
    preprocess_for_model(model, &scene)
}

/// Applies the model's preprocessing (normalize, stored PCA) to a scene.
pub fn preprocess_for_model(model: &Model, scene: &Scene) -> Result<Scene> {
    let normalized = data::normalize_scene(scene);
    let pca = model.pca();
    if let (Some(p), Some(stack)) = (&pca, normalized.modality(data::PCA_MODALITY)) {
        if stack.bands() != p.input_bands() {
            return Err(Error::Config(format!(
                "scene hsi has {} bands, checkpoint PCA expects {}",
                stack.bands(),
                p.input_bands()
            )));
        }
    }
    let projected = data::apply_scene_pca(&normalized, pca.as_ref())?;
    for (id, ch) in &model.spec.modalities {
        match projected.modality(id) {
            Some(stack) if stack.bands() == *ch => {}
            Some(stack) => {
                return Err(Error::Config(format!(
                    "modality {id} has {} channels, model expects {ch}",
                    stack.bands()
                )));
            }
            None => {
                return Err(Error::Config(format!("scene lacks modality {id}")));
            }
        }
    }
    Ok(projected)
}

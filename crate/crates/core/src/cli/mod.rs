//! Command-line surface: `synth`, `train`, `eval`, `predict`, `params`.
//!
//! Exit codes: 0 on success, 2 for usage problems (bad flags, config schema
//! violations, incompatible arguments), 3 for data, numeric, and metric
//! errors. Commands only write to their declared output paths.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::metrics::{build_report, render_table, ConfusionMatrix, F1Mode};
use crate::raster::{load_scene, save_scene, ShiftSpec, SynthSpec};
use crate::trainer::{fit, infer_full_scene, load_checkpoint, Model, ModelSpec, TrainConfig};
use crate::{Error, Result};

/// Colors for class ids 1..=13; ids beyond 13 reuse the palette cyclically.
pub const PALETTE: [[u8; 3]; 13] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0xff, 0xe1, 0x19],
    [0x43, 0x63, 0xd8],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x42, 0xd4, 0xf4],
    [0xf0, 0x32, 0xe6],
    [0xbf, 0xef, 0x45],
    [0xfa, 0xbe, 0xd4],
    [0x46, 0x99, 0x90],
    [0x9a, 0x63, 0x24],
    [0x80, 0x00, 0x00],
];

/// Color for the ignore label (0).
pub const IGNORE_COLOR: [u8; 3] = [0x40, 0x40, 0x40];

pub fn class_color(label: u8) -> [u8; 3] {
    if label == 0 {
        IGNORE_COLOR
    } else {
        PALETTE[(label as usize - 1) % PALETTE.len()]
    }
}

#[derive(Parser)]
#[command(
    name = "highdan",
    version,
    about = "Multimodal high-resolution segmentation with adversarial domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired source/target scene with a controlled domain shift.
    Synth(SynthArgs),
    /// Train a model from a JSON config, writing checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a labeled scene.
    Eval(EvalArgs),
    /// Predict a scene and write raw labels plus a colored PNG.
    Predict(PredictArgs),
    /// Report parameter counts for a model configuration.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; scenes land in <OUT>/source and <OUT>/target.
    #[arg(long)]
    out: PathBuf,
    /// Layout seed: cell sites, class assignment, shared base noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Voronoi cells in the shared layout.
    #[arg(long, default_value_t = 48)]
    cells: usize,
    /// Per-band gain range (two values); a single value pins the gain.
    #[arg(long, num_args = 1..=2, allow_negative_numbers = true, default_values_t = [1.0, 1.0])]
    gain: Vec<f32>,
    /// Per-band offset range (two values); a single value pins the offset.
    #[arg(long, num_args = 1..=2, allow_negative_numbers = true, default_values_t = [0.0, 0.0])]
    offset: Vec<f32>,
    /// Extra Gaussian noise applied to the target domain only.
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    /// Class-prior skew of the target domain (0 = same priors).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    skew: f64,
    /// Seed for the shift draws, independent of the layout seed.
    #[arg(long, default_value_t = 1)]
    shift_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (TrainConfig schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run exactly this many steps, overriding epochs.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature-alignment weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Category-alignment weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Disable feature-level adversarial alignment.
    #[arg(long)]
    no_feature_da: bool,
    /// Disable category-level adversarial alignment.
    #[arg(long)]
    no_category_da: bool,
    /// Disable the Dice regularizer.
    #[arg(long)]
    no_dice: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum F1ModeArg {
    Standard,
    Summed,
}

impl From<F1ModeArg> for F1Mode {
    fn from(m: F1ModeArg) -> F1Mode {
        match m {
            F1ModeArg::Standard => F1Mode::Standard,
            F1ModeArg::Summed => F1Mode::Summed,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,
    /// Scene directory with ground-truth labels.
    #[arg(long)]
    scene: PathBuf,
    /// Window size; defaults to the checkpoint's training tile size.
    #[arg(long)]
    tile: Option<usize>,
    /// Window step; defaults to the tile size (no overlap).
    #[arg(long)]
    stride: Option<usize>,
    /// Force the attention correction on (default: the trained setting).
    #[arg(long, conflicts_with = "no_da")]
    da: bool,
    /// Force the attention correction off.
    #[arg(long)]
    no_da: bool,
    /// Write the JSON report to this path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Score the scene's own labels against themselves instead of running a
    /// model; checks the metric pipeline end to end.
    #[arg(long)]
    identity: bool,
    /// Mean-F1 aggregation variant.
    #[arg(long, value_enum, default_value_t = F1ModeArg::Standard)]
    f1: F1ModeArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for pred.u8 and pred.png.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Force the attention correction on (default: the trained setting).
    #[arg(long, conflicts_with = "no_da")]
    da: bool,
    /// Force the attention correction off.
    #[arg(long)]
    no_da: bool,
    /// Domain of the scene; the correction only applies to target scenes.
    #[arg(long, value_enum, default_value_t = DomainArg::Target)]
    domain: DomainArg,
}

#[derive(Args)]
struct ParamsArgs {
    /// Hyperspectral channels after preprocessing.
    #[arg(long, default_value_t = 30)]
    hsi_channels: usize,
    #[arg(long, default_value_t = 4)]
    msi_channels: usize,
    #[arg(long, default_value_t = 2)]
    sar_channels: usize,
    #[arg(long, default_value_t = 13)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    head_width: usize,
    /// Comma-separated stream widths, e.g. 48,96,192,384.
    #[arg(long, value_delimiter = ',', default_values_t = [48, 96, 192, 384])]
    stream_widths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    blocks_per_stage: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 128, 64])]
    decoder_widths: Vec<usize>,
}

/// Parses arguments from the process environment, runs the command, and
/// returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Usage and schema problems exit 2; data, numeric, and metric errors exit 3.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json { .. } | Error::Argument(_) => 2,
        _ => 3,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Params(args) => cmd_params(args),
    }
}

fn range_of(values: &[f32]) -> (f32, f32) {
    match values {
        [v] => (*v, *v),
        [lo, hi] => (*lo, *hi),
        _ => unreachable!("clap enforces 1..=2 values"),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        cells: args.cells,
        ..SynthSpec::default()
    };
    let shift = ShiftSpec {
        gain: range_of(&args.gain),
        offset: range_of(&args.offset),
        noise_std: args.noise,
        skew: args.skew,
        seed: args.shift_seed,
    };
    let (source, target) = crate::raster::synth_scene_pair(args.seed, &shift, &spec)?;
    let src_dir = args.out.join("source");
    let tgt_dir = args.out.join("target");
    save_scene(&source, &src_dir)?;
    save_scene(&target, &tgt_dir)?;
    println!(
        "wrote {} and {} ({}x{}, {} classes, {} modalities)",
        src_dir.display(),
        tgt_dir.display(),
        spec.height,
        spec.width,
        spec.num_classes,
        source.modalities.len()
    );
    println!(
        "shift: gain [{}, {}], offset [{}, {}], noise {}, skew {}, seed {}",
        shift.gain.0, shift.gain.1, shift.offset.0, shift.offset.1, shift.noise_std, shift.skew,
        shift.seed
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::json(&args.config, e))?;
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if args.iterations.is_some() {
        config.iterations = args.iterations;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    if let Some(lambda) = args.lambda {
        config.weights.lambda = lambda;
    }
    if let Some(mu) = args.mu {
        config.weights.mu = mu;
    }
    if args.no_feature_da {
        config.enable_feature_da = false;
    }
    if args.no_category_da {
        config.enable_category_da = false;
    }
    if args.no_dice {
        config.enable_dice = false;
    }

    let (checkpoint, trace) = fit(&config)?;
    let every = (trace.len() / 10).max(1);
    for record in trace
        .iter()
        .enumerate()
        .filter(|(i, _)| i % every == 0 || *i + 1 == trace.len())
        .map(|(_, r)| r)
    {
        println!(
            "iter {:>6}  seg {:.4}  mce {:.4}  dice {:.4}  g_feat {:.4}  g_cat {:.4}  d_feat {:.4}  d_cat {:.4}  total {:.4}",
            record.iter,
            record.seg,
            record.mce,
            record.dice,
            record.g_feat,
            record.g_cat,
            record.d_feat,
            record.d_cat,
            record.total
        );
    }
    println!(
        "trained {} steps ({} parameters); checkpoint at {}",
        checkpoint.iteration,
        checkpoint.model.learnable_params(),
        config.out_dir.join("checkpoint.ckpt").display()
    );
    Ok(())
}

/// Resolves the --da/--no-da pair against the trained default.
fn resolve_da(da: bool, no_da: bool, trained_default: bool) -> bool {
    if da {
        true
    } else if no_da {
        false
    } else {
        trained_default
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let pred = if args.identity {
        scene.labels.clone()
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap requires --checkpoint without --identity");
        let mut checkpoint = load_checkpoint(path)?;
        let tile = args.tile.unwrap_or(checkpoint.config.tile_size);
        let stride = args.stride.unwrap_or(tile);
        let apply_da = resolve_da(args.da, args.no_da, checkpoint.model.spec.enable_feature_da);
        let (pred, _) = infer_full_scene(&mut checkpoint.model, &scene, tile, stride, apply_da)?;
        pred
    };

    let cm = ConfusionMatrix::new(scene.num_classes)?.accumulate(
        pred.view(),
        scene.labels.view(),
        scene.ignore_index,
    )?;
    let report = build_report(&cm, &scene.class_names, args.f1.into())?;
    print!("{}", render_table(&report));
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let mut checkpoint = load_checkpoint(&args.checkpoint)?;
    let tile = args.tile.unwrap_or(checkpoint.config.tile_size);
    let stride = args.stride.unwrap_or(tile);
    let apply_da = args.domain == DomainArg::Target
        && resolve_da(args.da, args.no_da, checkpoint.model.spec.enable_feature_da);
    let (pred, _) = infer_full_scene(&mut checkpoint.model, &scene, tile, stride, apply_da)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let raw_path = args.out.join("pred.u8");
    let raw = pred.as_slice().expect("labels are contiguous");
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let png_path = args.out.join("pred.png");
    write_label_png(&pred, &png_path)?;
    println!(
        "wrote {} and {} ({}x{}, attention correction {})",
        raw_path.display(),
        png_path.display(),
        scene.height,
        scene.width,
        if apply_da { "on" } else { "off" }
    );
    Ok(())
}

/// Renders a label plane as a PNG using the fixed palette.
pub fn write_label_png(labels: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(class_color(labels[[y as usize, x as usize]]))
    });
    img.save(path)
        .map_err(|e| Error::Format(format!("cannot write PNG {}: {e}", path.display())))
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let spec = ModelSpec {
        modalities: vec![
            ("hsi".into(), args.hsi_channels),
            ("msi".into(), args.msi_channels),
            ("sar".into(), args.sar_channels),
        ],
        num_classes: args.classes,
        ignore_index: 0,
        class_names: (1..=args.classes).map(|i| format!("class_{i:02}")).collect(),
        head_width: args.head_width,
        stream_widths: args.stream_widths.clone(),
        blocks_per_stage: args.blocks_per_stage,
        decoder_widths: args.decoder_widths.clone(),
        d_feat_widths: crate::adaptation::FEATURE_WIDTHS.to_vec(),
        d_cat_widths: crate::adaptation::CATEGORY_WIDTHS.to_vec(),
        enable_feature_da: true,
    };
    let model = Model::new(&spec, 0)?;
    let rows = [
        ("modality heads", model.heads.learnable_count()),
        ("shared trunk", model.hr.learnable_count()),
        ("decoder", model.dec.learnable_count()),
        ("feature discriminator", model.df.learnable_count()),
        ("category discriminator", model.dc.learnable_count()),
    ];
    for (name, count) in rows {
        println!("{name:<24} {count:>12}");
    }
    let segmenter: usize =
        model.heads.learnable_count() + model.hr.learnable_count() + model.dec.learnable_count();
    let total = model.learnable_params();
    println!("{:<24} {:>12}", "segmenter total", segmenter);
    println!("{:<24} {:>12}", "total (with critics)", total);
    const REFERENCE: f64 = 16.55e6;
    let deviation = (segmenter as f64 - REFERENCE) / REFERENCE * 100.0;
    println!(
        "segmenter vs 16.55 M reference: {:+.2}% ({:.2} M)",
        deviation,
        segmenter as f64 / 1e6
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_colors_are_distinct() {
        for (i, a) in PALETTE.iter().enumerate() {
            assert_ne!(*a, IGNORE_COLOR);
            for b in PALETTE.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn class_colors_map_labels_and_cycle() {
        assert_eq!(class_color(0), IGNORE_COLOR);
        assert_eq!(class_color(1), PALETTE[0]);
        assert_eq!(class_color(13), PALETTE[12]);
        assert_eq!(class_color(14), PALETTE[0]);
    }

    #[test]
    fn da_resolution_prefers_explicit_flags() {
        assert!(resolve_da(true, false, false));
        assert!(!resolve_da(false, true, true));
        assert!(resolve_da(false, false, true));
        assert!(!resolve_da(false, false, false));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

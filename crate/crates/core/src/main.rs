use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use guidance_uda::checkpoint::{Archive, ArchiveKind};
use guidance_uda::data_synth::{self, DatasetMeta, DomainShift, SceneSpec};
use guidance_uda::evaluation::{self, colorize, mask_image, side_by_side};
use guidance_uda::guider::Guider;
use guidance_uda::losses::QualityMode;
use guidance_uda::mixing;
use guidance_uda::nn::ParamStore;
use guidance_uda::segmodel::{stack_images, SegModel};
use guidance_uda::selftrain::pseudo_label;
use guidance_uda::trainer::{export_inference, RunPaths};
use guidance_uda::{seeding, TrainConfig, Trainer};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "guidance-uda", version, about = "Domain-adaptive segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train split plus optional val split).
    Datagen(DatagenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute IoU on a dataset split.
    Eval(EvalArgs),
    /// Write source/target/mixed/label/mask panels for one mix.
    MixPreview(MixPreviewArgs),
    /// Strip a training checkpoint down to the student parameters.
    Export(ExportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Images in the held-out `val` split, indexed after the training ones.
    #[arg(long, default_value_t = 0)]
    val_count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.0)]
    shift_hue: f64,
    #[arg(long, default_value_t = 1.0)]
    shift_brightness: f64,
    #[arg(long, default_value_t = 0.0)]
    shift_noise: f64,
    #[arg(long, default_value_t = 6)]
    num_classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a training checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total steps; with --resume this extends or shortens the stored schedule.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lambda_gt: Option<f64>,
    /// Steepness of the source-ratio factor.
    #[arg(long)]
    d: Option<f64>,
    /// Fix the source-ratio factor at 1.
    #[arg(long)]
    no_uncertainty: bool,
    #[arg(long, value_parser = parse_quality_mode)]
    quality_mode: Option<QualityMode>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Random instead of zero initialisation for the guider's input and output projections.
    #[arg(long)]
    no_zero_init: bool,
    /// Predict features directly instead of an offset on the initialised ones.
    #[arg(long)]
    no_skip: bool,
    /// Run the guider but never update it.
    #[arg(long)]
    freeze_guider: bool,
    /// Print a loss line every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Also write colour-mapped prediction panels here.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Limit the number of dumped images.
    #[arg(long, default_value_t = 8)]
    dump_count: usize,
}

#[derive(Args)]
struct MixPreviewArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Teacher pseudo-labels come from this checkpoint; without it the
    /// target's ground truth stands in.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_quality_mode(s: &str) -> Result<QualityMode, String> {
    match s {
        "scalar" => Ok(QualityMode::Scalar),
        "per_pixel" | "per-pixel" => Ok(QualityMode::PerPixel),
        _ => Err(format!("expected scalar or per_pixel, got {s}")),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::MixPreview(a) => mix_preview(a),
        Command::Export(a) => export(a),
    }
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let spec = SceneSpec {
        rng_seed: a.seed,
        num_classes: a.num_classes,
        image_size: a.size,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let shift = DomainShift::new(a.shift_hue, a.shift_brightness, a.shift_noise)?;
    let meta = DatasetMeta::new(spec.clone(), shift);
    let train = data_synth::render_many(&spec, &shift, 0, a.count)?;
    data_synth::write_dataset(&a.out, &meta, "train", &train)?;
    if a.val_count > 0 {
        let val = data_synth::render_many(&spec, &shift, a.count as u64, a.val_count)?;
        data_synth::write_dataset(&a.out, &meta, "val", &val)?;
    }
    println!("wrote {} train and {} val images to {}", a.count, a.val_count, a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(m) = &a.method {
        cfg.method = m.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(v) = a.lambda_gt {
        cfg.loss.lambda_gt = v;
    }
    if let Some(v) = a.d {
        cfg.loss.d = v;
    }
    if a.no_uncertainty {
        cfg.loss.uncertainty = false;
    }
    if let Some(q) = a.quality_mode {
        cfg.loss.quality_mode = q;
    }
    if let Some(v) = a.embed_dim {
        cfg.guider.embed_dim = v;
    }
    if let Some(v) = a.num_blocks {
        cfg.guider.num_blocks = v;
    }
    if let Some(v) = a.num_heads {
        cfg.guider.num_heads = v;
    }
    if let Some(v) = a.patch_size {
        cfg.guider.patch_size = v;
    }
    if a.no_zero_init {
        cfg.guider.zero_init_in = false;
        cfg.guider.zero_init_out = false;
    }
    if a.no_skip {
        cfg.guider.skip_connection = false;
    }
    if a.freeze_guider {
        cfg.optimize_guider = false;
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ar = Archive::read(path)?;
            let mut t = Trainer::resume(&ar)?;
            if let Some(steps) = a.steps {
                t.set_total_steps(steps)?;
            }
            eprintln!("resuming {} at step {}", t.method().name(), t.step());
            t
        }
        None => {
            let mut cfg = TrainConfig::load(&a.config)?;
            apply_overrides(&mut cfg, &a);
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.config().clone();
    let (Some(src_dir), Some(tgt_dir)) = (&cfg.source_dir, &cfg.target_dir) else {
        bail!("config must set both source_dir and target_dir");
    };
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let source = data_synth::read_dataset(&resolve(src_dir), &cfg.train_split)?;
    let target = data_synth::read_dataset(&resolve(tgt_dir), &cfg.train_split)?;
    let val = data_synth::read_dataset(&resolve(tgt_dir), &cfg.val_split).ok();
    if val.is_none() {
        eprintln!("no {:?} split in target data; skipping evaluation", cfg.val_split);
    }
    let paths = RunPaths::new(&a.out);
    let log_every = a.log_every.max(1);
    let summary = trainer.fit(&source, &target, val.as_ref(), Some(&paths), |step, l| {
        if step % log_every == 0 {
            eprintln!("step {step:>6} {l}");
        }
    })?;
    for (step, miou) in &summary.evals {
        eprintln!("eval step {step}: mIoU {:.4}", miou);
    }
    println!(
        "done: {} steps, {:.1} ms/step, checkpoint {}",
        trainer.step(),
        summary.seconds_per_step * 1e3,
        paths.final_checkpoint().display()
    );
    Ok(())
}

/// Rebuilds the model (and guider, if stored) described by an archive.
fn load_model(ar: &Archive) -> Result<(SegModel, ParamStore, Option<(Guider, ParamStore)>)> {
    let cfg: TrainConfig = serde_json::from_value(ar.metadata["config"].clone()).context("checkpoint has no config")?;
    let mut rng = seeding::stream(0, &[]);
    let mut params = ParamStore::new();
    let model = SegModel::new(cfg.model.clone(), &mut params, &mut rng)?;
    ar.load_store("", &mut params)?;
    let mut gparams = ParamStore::new();
    let guider = Guider::new(cfg.guider.clone(), &mut gparams, &mut rng)?;
    let guider = match ar.load_store("", &mut gparams) {
        Ok(()) if ar.kind == ArchiveKind::Training => Some((guider, gparams)),
        _ => None,
    };
    Ok((model, params, guider))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ar = Archive::read(&a.checkpoint)?;
    let (model, params, guider) = load_model(&ar)?;
    let data = data_synth::read_dataset(&a.data, &a.split)?;
    let mut report = evaluation::evaluate(&model, &params, &data.images, 8)?;
    report.class_names = data.meta.class_names.clone();
    report.save(&a.out)?;
    println!("mIoU {:.4} over {} images -> {}", report.miou, data.len(), a.out.display());
    if let Some(dir) = &a.dump {
        let mut subset = data.clone();
        subset.images.truncate(a.dump_count);
        let g = guider.as_ref().map(|(g, p)| (g, p));
        let s = evaluation::dump_predictions(&model, &params, g, &subset, dir, 0)?;
        if let Some(notice) = &s.notice {
            eprintln!("{notice}");
        }
        println!("{} prediction and {} guider panels in {}", s.prediction_panels, s.guider_panels, dir.display());
    }
    Ok(())
}

fn mix_preview(a: MixPreviewArgs) -> Result<()> {
    let source = data_synth::read_dataset(&a.source, &a.split)?;
    let target = data_synth::read_dataset(&a.target, &a.split)?;
    let (Some(s), Some(t)) = (source.images.get(a.index), target.images.get(a.index)) else {
        bail!("index {} out of range", a.index);
    };
    let pseudo = match &a.checkpoint {
        Some(path) => {
            let ar = Archive::read(path)?;
            let (model, student, _) = load_model(&ar)?;
            let mut teacher = student.clone();
            if ar.load_store(guidance_uda::checkpoint::TEACHER_PREFIX, &mut teacher).is_err() {
                teacher = student;
            }
            let x = stack_images([&t.pixels]);
            pseudo_label(&model, &teacher, &x, 0.968)?.remove(0).labels
        }
        None => t.labels.clone(),
    };
    let mut rng = seeding::stream(a.seed, &[seeding::STREAM_MIX, a.index as u64]);
    let m = mixing::class_mix(&s.pixels, &s.labels, &t.pixels, &pseudo, 8, &mut rng)?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let panels = [
        ("x_source.png", data_synth::pixels_to_rgb8(&s.pixels)),
        ("x_target.png", data_synth::pixels_to_rgb8(&t.pixels)),
        ("x_mixed.png", data_synth::pixels_to_rgb8(&m.image)),
        ("y_mixed.png", colorize(&m.labels)),
        ("mask.png", mask_image(&m.mask.mask)),
    ];
    for (name, img) in &panels {
        img.save(a.out.join(name)).with_context(|| name.to_string())?;
    }
    let strip: Vec<_> = panels.iter().map(|(_, i)| i.clone()).collect();
    side_by_side(&strip).save(a.out.join("panel.png"))?;
    println!(
        "classes {:?}, source ratio {:.3} -> {}",
        m.mask.classes,
        m.source_ratio,
        a.out.display()
    );
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ar = Archive::read(&a.checkpoint)?;
    let out = export_inference(&ar);
    out.write(&a.out)?;
    println!("{} tensors -> {}", out.len(), a.out.display());
    Ok(())
}

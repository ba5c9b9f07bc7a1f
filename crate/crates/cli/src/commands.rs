use std::fs;
use std::path::{Path, PathBuf};

use baunet::data::{
    gen_synthetic, load_checkpoint, load_image, read_dataset, save_checkpoint, save_image, save_mask, split,
    write_dataset, Sample, Splits,
};
use baunet::degrade::DegradationSpec;
use baunet::metrics::{degradation_report, write_report_csv, SegmentationScores};
use baunet::training::{evaluate, train, write_log_csv};
use baunet::unet::{build_model, ModelGraph};
use baunet::uq::{
    decompose_uncertainty, images_of, mc_predict, mean_probability, summarize, t_sweep, write_map, write_sweep_csv,
    LabelConvention, McConfig,
};
use baunet::{Error, RngStream, Tensor};
use serde::Serialize;

use crate::config::{RunConfig, Snapshot};
use crate::error::CliError;
use crate::{Command, Context, DegradeKind, SplitName};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

/// Folds command flags into the config so the snapshot records them.
pub fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    match *cmd {
        Command::Synth { n, size } => {
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(size) = size {
                cfg.data.size = size;
            }
        }
        Command::Train { epochs, batch_size, lr, .. } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = lr {
                cfg.train.optimizer.lr = lr;
            }
        }
        Command::Infer { passes, .. } => {
            if let Some(t) = passes {
                cfg.mc.passes = t;
            }
        }
        Command::Sweep { ref t_values, repeats, images, .. } => {
            if let Some(t) = t_values {
                cfg.sweep.t_values = t.clone();
            }
            if let Some(r) = repeats {
                cfg.sweep.repeats = r;
            }
            if let Some(i) = images {
                cfg.sweep.images = i;
            }
        }
        Command::Degrade { .. } | Command::Eval { .. } => {}
    }
}

pub fn dispatch(ctx: &mut Context, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { .. } => synth(ctx, cmd),
        Command::Train { data, .. } => train_cmd(ctx, cmd, data),
        Command::Infer { checkpoint, image, .. } => infer(ctx, cmd, checkpoint, image),
        Command::Degrade { image, kind, sigma, delta, gain } => degrade(ctx, cmd, image, *kind, *sigma, *delta, *gain),
        Command::Eval { checkpoint, data, specs, split } => eval(ctx, cmd, checkpoint, data, specs, *split),
        Command::Sweep { checkpoint, data, split, .. } => sweep(ctx, cmd, checkpoint, data, *split),
    }
}

fn runtime(op: &'static str, msg: impl Into<String>) -> CliError {
    CliError::Run(Error::InvalidArgument { op, msg: msg.into() })
}

fn prepare_output(ctx: &Context, cmd: &Command) -> Result<(), CliError> {
    fs::create_dir_all(&ctx.output_dir)?;
    let snapshot = Snapshot {
        command: cmd.name().to_string(),
        args: serde_json::to_value(cmd)?,
        config: ctx.config.clone(),
    };
    write_json(&ctx.output_dir.join(SNAPSHOT_FILE), &snapshot)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn pick(splits: Splits, which: SplitName) -> Vec<Sample> {
    match which {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
    }
}

fn synth(ctx: &mut Context, cmd: &Command) -> Result<(), CliError> {
    let data = &ctx.config.data;
    let block = 1usize << ctx.config.arch.depth;
    if data.size == 0 || !data.size.is_multiple_of(block) {
        return Err(CliError::Usage(format!(
            "size {} is not divisible by 2^depth = {block} (arch.depth = {})",
            data.size, ctx.config.arch.depth
        )));
    }
    data.split.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let occupied = ctx.output_dir.is_dir() && fs::read_dir(&ctx.output_dir)?.next().is_some();
    if occupied && !ctx.force {
        return Err(runtime(
            "synth",
            format!("{} is not empty (use --force to overwrite)", ctx.output_dir.display()),
        ));
    }
    prepare_output(ctx, cmd)?;
    let data = &ctx.config.data;
    let samples = gen_synthetic(data.n, data.size, &data.synth, &RngStream::new(ctx.config.seed, 0))?;
    let splits = split(samples, &data.split)?;
    write_dataset(&ctx.output_dir, &splits)?;
    println!(
        "wrote {} samples ({}/{}/{}) of {}x{} to {}",
        data.n,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        data.size,
        data.size,
        ctx.output_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs: usize,
    param_count: usize,
    val: Option<SegmentationScores>,
    test: Option<SegmentationScores>,
}

fn train_cmd(ctx: &mut Context, cmd: &Command, data: &Path) -> Result<(), CliError> {
    ctx.config.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let splits = read_dataset(data)?;
    let first = splits
        .train
        .first()
        .ok_or_else(|| runtime("train", format!("{} has no training samples", data.display())))?;
    // the network is fully convolutional; the dataset fixes the input size
    ctx.config.arch.input_size = first.height();
    ctx.config.arch.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_output(ctx, cmd)?;
    let cfg = &ctx.config;
    let mut model = build_model(&cfg.arch, cfg.train.seed)?;
    eprintln!("training {} parameters on {} images", model.param_count(), splits.train.len());
    let outcome = train(&mut model, &splits.train, &splits.val, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  nll {:.5}  kl {:.1}  lr {:.2e}  val f1 {:.4}  iou {:.4}",
            r.epoch, r.loss, r.nll, r.kl, r.lr, r.f1, r.iou
        );
    })?;
    save_checkpoint(&model, ctx.output_dir.join("checkpoint"))?;
    write_log_csv(&outcome.log, ctx.output_dir.join("train_log.csv"))?;
    let score = |s: &[Sample]| (!s.is_empty()).then(|| evaluate(&model, s, cfg.train.batch_size)).transpose();
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        epochs: outcome.log.len(),
        param_count: model.param_count(),
        val: score(&splits.val)?,
        test: score(&splits.test)?,
    };
    write_json(&ctx.output_dir.join("train_summary.json"), &summary)?;
    println!("best epoch {}; test {:?}", summary.best_epoch, summary.test);
    Ok(())
}

#[derive(Serialize)]
struct InferSummary {
    image: PathBuf,
    passes: usize,
    mean_probability: f64,
    foreground_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_convention: Option<LabelConvention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aleatoric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epistemic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total: Option<f64>,
}

fn load_model(path: &Path) -> Result<ModelGraph<f32>, CliError> {
    if !path.join("manifest.json").is_file() {
        return Err(runtime("load_checkpoint", format!("no checkpoint at {}", path.display())));
    }
    Ok(load_checkpoint::<f32>(path)?)
}

fn infer(ctx: &mut Context, cmd: &Command, checkpoint: &Path, image: &Path) -> Result<(), CliError> {
    let mc: McConfig = ctx.config.mc.clone();
    if mc.passes == 0 {
        return Err(CliError::Usage("--T must be at least 1".into()));
    }
    let model = load_model(checkpoint)?;
    let img = load_image(image)?;
    prepare_output(ctx, cmd)?;
    let out = &ctx.output_dir;
    let samples = mc_predict(&model, &[&img], &mc)?.remove(0);
    let mean = mean_probability(&samples)?;
    let mean32: Tensor<f32> = mean.cast();
    let hard = mean.map(|p| if p >= baunet::metrics::DEFAULT_THRESHOLD { 1.0 } else { 0.0 }).cast();
    save_image(&mean32, out.join("mean_prob.pgm"))?;
    save_mask(&hard, out.join("mean_mask.pgm"))?;
    baunet::tensor::write_tensor(&mean32, out.join("mean_prob.tensor"))?;
    let n = mean.numel() as f64;
    let mut summary = InferSummary {
        image: image.to_path_buf(),
        passes: mc.passes,
        mean_probability: mean.data().iter().sum::<f64>() / n,
        foreground_fraction: hard.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n,
        label_convention: None,
        aleatoric: None,
        epistemic: None,
        total: None,
    };
    if mc.passes >= 2 {
        let r = decompose_uncertainty(&samples, mc.label_convention)?;
        write_map(r.aleatoric(), out, "aleatoric")?;
        write_map(r.epistemic(), out, "epistemic")?;
        write_map(&r.total, out, "total")?;
        let s = summarize(&r, None)?;
        summary.label_convention = Some(s.label_convention);
        summary.aleatoric = Some(s.aleatoric);
        summary.epistemic = Some(s.epistemic);
        summary.total = Some(s.total);
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct Provenance<'a> {
    source: &'a Path,
    original: String,
    degraded: String,
    spec: &'a DegradationSpec,
    image_index: u64,
}

#[allow(clippy::too_many_arguments)]
fn degrade(
    ctx: &mut Context,
    cmd: &Command,
    image: &Path,
    kind: DegradeKind,
    sigma: Option<f64>,
    delta: Option<f64>,
    gain: Option<f64>,
) -> Result<(), CliError> {
    let need_sigma = || sigma.ok_or_else(|| CliError::Usage("--sigma is required for this kind".into()));
    let spec = match kind {
        DegradeKind::Clean => DegradationSpec::Clean,
        DegradeKind::Blur => DegradationSpec::Blur { sigma: need_sigma()? },
        DegradeKind::Rician => DegradationSpec::Rician {
            sigma: need_sigma()?,
            seed: ctx.config.seed,
        },
        DegradeKind::BrightnessContrast => DegradationSpec::BrightnessContrast {
            delta: delta.unwrap_or(0.0),
            gain: gain.unwrap_or(1.0),
        },
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let img = load_image(image)?;
    prepare_output(ctx, cmd)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let original = format!("{stem}.png");
    let degraded = format!("{stem}_{spec}.png");
    save_image(&img, ctx.output_dir.join(&original))?;
    save_image(&spec.apply(&img, 0)?, ctx.output_dir.join(&degraded))?;
    let prov = Provenance {
        source: image,
        original,
        degraded: degraded.clone(),
        spec: &spec,
        image_index: 0,
    };
    write_json(&ctx.output_dir.join(format!("{stem}_{spec}.json")), &prov)?;
    println!("wrote {}", ctx.output_dir.join(degraded).display());
    Ok(())
}

fn eval(
    ctx: &mut Context,
    cmd: &Command,
    checkpoint: &Path,
    data: &Path,
    specs_path: &Path,
    which: SplitName,
) -> Result<(), CliError> {
    let text = fs::read_to_string(specs_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", specs_path.display())))?;
    let specs: Vec<DegradationSpec> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", specs_path.display())))?;
    if specs.is_empty() {
        return Err(CliError::Usage("the specs file lists no corruptions".into()));
    }
    for s in &specs {
        s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if ctx.config.mc.passes < 2 {
        return Err(CliError::Usage("evaluation needs mc.passes >= 2".into()));
    }
    let model = load_model(checkpoint)?;
    let samples = pick(read_dataset(data)?, which);
    prepare_output(ctx, cmd)?;
    let rows = degradation_report(&model, &samples, &specs, &ctx.config.mc)?;
    write_report_csv(&rows, ctx.output_dir.join("report.csv"))?;
    for r in &rows {
        println!(
            "{:<24} unc {:.6} ({:+.1}%)  f1 {:.4}  iou {:.4}",
            r.spec_id, r.mean_total_unc, r.pct_change_unc, r.mean_f1, r.mean_iou
        );
    }
    Ok(())
}

fn sweep(ctx: &mut Context, cmd: &Command, checkpoint: &Path, data: &Path, which: SplitName) -> Result<(), CliError> {
    let sw = ctx.config.sweep.clone();
    if sw.repeats < 2 {
        return Err(CliError::Usage(format!("repeats must be at least 2, got {}", sw.repeats)));
    }
    if sw.t_values.is_empty() || sw.t_values.iter().any(|&t| t < 2) {
        return Err(CliError::Usage(format!("T values must all be >= 2, got {:?}", sw.t_values)));
    }
    if sw.images == 0 {
        return Err(CliError::Usage("sweep.images must be at least 1".into()));
    }
    let model = load_model(checkpoint)?;
    let samples = pick(read_dataset(data)?, which);
    let take = sw.images.min(samples.len());
    if take == 0 {
        return Err(runtime("sweep", "the chosen split is empty"));
    }
    prepare_output(ctx, cmd)?;
    let rows = t_sweep(&model, &images_of(&samples[..take]), &sw.t_values, sw.repeats, &ctx.config.mc)?;
    write_sweep_csv(&rows, ctx.output_dir.join("sweep.csv"))?;
    for r in &rows {
        println!("T {:>3}  var term1 {:.3e}  var term2 {:.3e}", r.t, r.var_term1, r.var_term2);
    }
    Ok(())
}

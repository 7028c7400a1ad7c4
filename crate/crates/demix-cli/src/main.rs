//! Command-line front end: data generation, training, sweeps, tiled
//! prediction, evaluation, and the padding benchmark.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use demix::datagen::{load_dataset, save_dataset, superimpose, Dataset, DatasetSplit};
use demix::metrics::{evaluate, psnr_invariant};
use demix::model::{checkpoint, Model, ModelConfig};
use demix::tiffio;
use demix::tiling::{plan_tiles, predict_tiled, seam_score, Padding};
use demix::train::{
    sweep_lc_levels, sweep_patch_size, train, write_history_csv, write_sweep_csv, EpochRecord,
    TrainConfig,
};
use serde::Serialize;

use config::{default_model_config, default_train_config, DataSection, RunConfig};

/// Errors caused by bad invocations rather than failing runs.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn parse_padding(s: &str) -> Result<Padding, String> {
    s.parse::<Padding>().map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "demix",
    version,
    about = "Decompose superimposed two-channel images"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic stroke dataset (TIFF pages: d1, d2) plus manifest
    GenData(GenArgs),
    /// Train a decomposition model from a dataset manifest
    Train(TrainArgs),
    /// Decompose one image by tiled prediction
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Patch-size and lateral-context studies
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Compare inner/outer/no padding on the test split
    PaddingBench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Layered config file (section [gen])
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_join: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strokes: Option<usize>,
    #[arg(long)]
    stroke_len: Option<usize>,
    #[arg(long)]
    stroke_width: Option<usize>,
    #[arg(long)]
    amplitude: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Layered config file (sections [model], [train], [data])
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (overrides [data].manifest)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input TIFF: one page holding the superimposed image, or two channel
    /// pages that get superimposed first
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_parser = parse_padding)]
    strategy: Option<Padding>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_parser = parse_padding)]
    strategy: Option<Padding>,
    #[arg(long)]
    pad: Option<usize>,
    /// Report CSV path; a JSON aggregate is written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Train one model per patch size under a fixed budget
    PatchSize(PatchSweepArgs),
    /// Train models with increasing lateral-context inputs at fixed patch size
    LcLevels(LcSweepArgs),
}

#[derive(Args)]
struct SweepCommon {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long, value_parser = parse_padding)]
    strategy: Option<Padding>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct PatchSweepArgs {
    /// Comma-separated patch sizes, e.g. 32,64,128
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[command(flatten)]
    common: SweepCommon,
}

#[derive(Args)]
struct LcSweepArgs {
    /// Comma-separated context counts, e.g. 0,1,2
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[command(flatten)]
    common: SweepCommon,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Inner/outer pad in pixels
    #[arg(long, default_value_t = 24)]
    pad: usize,
    /// Optional inner-pad grid search, e.g. 8,16,24,28
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("usage error: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(s) => match s {
            SweepCmd::PatchSize(a) => cmd_sweep_patch(a),
            SweepCmd::LcLevels(a) => cmd_sweep_lc(a),
        },
        Cmd::PaddingBench(a) => cmd_padding_bench(a),
    }
}

fn cmd_gen_data(a: GenArgs) -> Result<()> {
    let file = RunConfig::load_opt(a.config.as_ref())?;
    let mut gen = file.gen.unwrap_or_default();
    if let Some(v) = a.size {
        gen.params.canvas_size = v;
    }
    if let Some(v) = a.n_join {
        gen.params.n_join = v;
    }
    if let Some(v) = a.count {
        gen.count = v;
    }
    if let Some(v) = a.seed {
        gen.params.seed = v;
    }
    if let Some(v) = a.strokes {
        gen.params.strokes_per_channel = v;
    }
    if let Some(v) = a.stroke_len {
        gen.params.stroke_len = v;
    }
    if let Some(v) = a.stroke_width {
        gen.params.stroke_width = v;
    }
    if let Some(v) = a.amplitude {
        gen.params.amplitude = v;
    }

    let resolved = RunConfig {
        gen: Some(gen.clone()),
        ..RunConfig::default()
    };
    resolved.write(&a.out)?;
    let manifest = save_dataset(&a.out, &gen.params, gen.count)?;
    println!(
        "wrote {} images ({}x{}, n_join {}) and manifest to {}",
        manifest.count,
        gen.params.canvas_size,
        gen.params.canvas_size,
        gen.params.n_join,
        a.out.display()
    );
    Ok(())
}

fn load_data(manifest: &Path) -> Result<(Dataset, DatasetSplit)> {
    let (data, manifest) = load_dataset(manifest)?;
    Ok((data, manifest.split))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = RunConfig::load_opt(a.config.as_ref())?;
    let mut model_cfg = file.model.unwrap_or_else(default_model_config);
    let mut tcfg = file.train.unwrap_or_else(default_train_config);
    let manifest = a
        .data
        .or(file.data.and_then(|d| d.manifest))
        .ok_or_else(|| usage("--data or [data].manifest is required"))?;

    if let Some(v) = a.model_seed {
        model_cfg.seed = v;
    }
    if let Some(v) = a.seed {
        tcfg.seed = v;
    }
    if let Some(v) = a.max_epochs {
        tcfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.steps_per_epoch {
        tcfg.steps_per_epoch = Some(v);
    }
    if let Some(v) = a.lr {
        tcfg.lr = v;
    }
    if let Some(v) = a.patch_size {
        model_cfg.patch_size = v;
    }
    tcfg.patch_size = model_cfg.patch_size;

    let resolved = RunConfig {
        model: Some(model_cfg.clone()),
        train: Some(tcfg.clone()),
        data: Some(DataSection {
            manifest: Some(manifest.clone()),
        }),
        ..RunConfig::default()
    };
    resolved.write(&a.out)?;

    let (data, split) = load_data(&manifest)?;
    let mut model = Model::build(model_cfg)?;
    let quiet = a.quiet;
    let mut log = |r: &EpochRecord| {
        if !quiet {
            println!(
                "epoch {:>4}  train {:>10.4}  val {:>10.4}  kl {:>8.4}  lr {:.2e}",
                r.epoch, r.train_total, r.val_total, r.kl_sum, r.lr
            );
        }
    };
    let outcome = train(&mut model, &data, &split, &tcfg, &mut log)?;
    checkpoint::save(&a.out.join("checkpoint.ckpt"), &model)?;
    write_history_csv(&a.out.join("history.csv"), &outcome.history)?;
    println!(
        "best validation {:.4} at epoch {}; checkpoint and history written to {}",
        outcome.best_val,
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn read_input_image(path: &Path) -> Result<ndarray::Array2<f32>> {
    let pages = tiffio::read_f32_multipage(path)?;
    match pages.len() {
        1 => Ok(pages.into_iter().next().unwrap()),
        2 => Ok(superimpose(&pages[0], &pages[1])?),
        n => bail!("expected 1 or 2 pages in the input image, found {n}"),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = a
        .checkpoint
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let image = a.image.ok_or_else(|| usage("--image is required"))?;
    let strategy = a.strategy.unwrap_or(Padding::Inner);
    let pad = a.pad.unwrap_or(match strategy {
        Padding::None => 0,
        _ => 24,
    });
    let model = checkpoint::load(&ckpt)?;
    let x = read_input_image(&image)?;
    let plan = plan_tiles(x.dim(), strategy, model.config().patch_size, pad)?;
    let stitched = predict_tiled(&x, &model, &plan)?;
    ensure_parent(&a.out)?;
    tiffio::write_f32_multipage(&a.out, &[stitched.mu1.clone(), stitched.mu2.clone()])?;
    println!(
        "decomposed {} with {:?} padding ({} tiles) -> {}",
        image.display(),
        strategy,
        plan.tile_count(),
        a.out.display()
    );
    Ok(())
}

fn split_ids<'s>(split: &'s DatasetSplit, name: &str) -> Result<&'s [usize]> {
    match name {
        "train" => Ok(&split.train_ids),
        "val" => Ok(&split.val_ids),
        "test" => Ok(&split.test_ids),
        other => Err(usage(format!(
            "unknown split {other:?} (use train|val|test)"
        ))),
    }
}

#[derive(Serialize)]
struct EvalAggregate<'a> {
    checkpoint: String,
    split: &'a str,
    strategy: Padding,
    pad: usize,
    images: usize,
    mean_psnr_d1: f64,
    mean_psnr_d2: f64,
    mean_ssim_d1: f64,
    mean_ssim_d2: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if !["train", "val", "test"].contains(&a.split.as_str()) {
        return Err(usage(format!(
            "unknown split {:?} (use train|val|test)",
            a.split
        )));
    }
    let file = RunConfig::load_opt(a.config.as_ref())?;
    let ckpt = a
        .checkpoint
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let manifest = a
        .data
        .or(file.data.and_then(|d| d.manifest))
        .ok_or_else(|| usage("--data or [data].manifest is required"))?;
    let strategy = a.strategy.unwrap_or(Padding::Inner);
    let pad = a.pad.unwrap_or(match strategy {
        Padding::None => 0,
        _ => 24,
    });
    let model = checkpoint::load(&ckpt)?;
    let (data, split) = load_data(&manifest)?;
    let ids = split_ids(&split, &a.split)?;
    let report = evaluate(&model, &data, ids, strategy, pad)?;
    ensure_parent(&a.out)?;
    report.write_csv(&a.out)?;
    let agg = EvalAggregate {
        checkpoint: ckpt.display().to_string(),
        split: &a.split,
        strategy,
        pad,
        images: report.rows.len(),
        mean_psnr_d1: report.mean_psnr_d1,
        mean_psnr_d2: report.mean_psnr_d2,
        mean_ssim_d1: report.mean_ssim_d1,
        mean_ssim_d2: report.mean_ssim_d2,
    };
    let json_path = a.out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&agg)?)?;
    println!(
        "{} images: psnr d1 {:.2} dB, d2 {:.2} dB; ssim d1 {:.3}, d2 {:.3}",
        agg.images, agg.mean_psnr_d1, agg.mean_psnr_d2, agg.mean_ssim_d1, agg.mean_ssim_d2
    );
    println!(
        "rows -> {}, aggregate -> {}",
        a.out.display(),
        json_path.display()
    );
    Ok(())
}

struct SweepSetup {
    base: ModelConfig,
    tcfg: TrainConfig,
    data: Dataset,
    split: DatasetSplit,
    strategy: Padding,
    pad: usize,
}

fn sweep_setup(common: &SweepCommon) -> Result<SweepSetup> {
    let file = RunConfig::load_opt(common.config.as_ref())?;
    let base = file.model.unwrap_or_else(default_model_config);
    let mut tcfg = file.train.unwrap_or_else(default_train_config);
    let manifest = common
        .data
        .clone()
        .or(file.data.and_then(|d| d.manifest))
        .ok_or_else(|| usage("--data or [data].manifest is required"))?;
    if let Some(v) = common.seed {
        tcfg.seed = v;
    }
    if let Some(v) = common.max_epochs {
        tcfg.max_epochs = v;
    }
    if let Some(v) = common.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = common.steps_per_epoch {
        tcfg.steps_per_epoch = Some(v);
    }
    tcfg.patch_size = base.patch_size;
    let strategy = common.strategy.unwrap_or(Padding::Inner);
    let pad = common.pad.unwrap_or(16);
    let (data, split) = load_data(&manifest)?;
    Ok(SweepSetup {
        base,
        tcfg,
        data,
        split,
        strategy,
        pad,
    })
}

fn sweep_outputs(out: &Path, key: &str, rows: &[demix::train::SweepRow]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_sweep_csv(&out.join("sweep.csv"), key, rows)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.key as f64, r.test_psnr)).collect();
    plot::line_plot(&out.join("sweep.png"), &[("psnr", pts)])?;
    println!("{key:>10}  psnr(dB)  peak_activations");
    for r in rows {
        println!(
            "{:>10}  {:>8.2}  {:>16}",
            r.key, r.test_psnr, r.footprint_peak
        );
    }
    println!(
        "table -> {}, plot -> {}",
        out.join("sweep.csv").display(),
        out.join("sweep.png").display()
    );
    Ok(())
}

fn cmd_sweep_patch(a: PatchSweepArgs) -> Result<()> {
    if a.sizes.is_empty() {
        return Err(usage("--sizes needs at least one patch size"));
    }
    let s = sweep_setup(&a.common)?;
    let quiet = a.common.quiet;
    let mut log = |r: &EpochRecord| {
        if !quiet {
            println!(
                "  epoch {:>4} train {:>10.4} val {:>10.4}",
                r.epoch, r.train_total, r.val_total
            );
        }
    };
    let rows = sweep_patch_size(
        &s.base, &a.sizes, &s.data, &s.split, &s.tcfg, s.strategy, &mut log,
    )?;
    sweep_outputs(&a.common.out, "patch_size", &rows)
}

fn cmd_sweep_lc(a: LcSweepArgs) -> Result<()> {
    if a.k.is_empty() {
        return Err(usage("--k needs at least one context count"));
    }
    let s = sweep_setup(&a.common)?;
    let quiet = a.common.quiet;
    let mut log = |r: &EpochRecord| {
        if !quiet {
            println!(
                "  epoch {:>4} train {:>10.4} val {:>10.4}",
                r.epoch, r.train_total, r.val_total
            );
        }
    };
    let rows = sweep_lc_levels(
        &s.base, &a.k, &s.data, &s.split, &s.tcfg, s.strategy, s.pad, &mut log,
    )?;
    sweep_outputs(&a.common.out, "n_lc", &rows)
}

#[derive(Serialize)]
struct BenchRow {
    strategy: String,
    pad: usize,
    tiles: usize,
    mean_psnr: f64,
    seam: f64,
}

fn bench_one(
    model: &Model<f32>,
    data: &Dataset,
    ids: &[usize],
    strategy: Padding,
    pad: usize,
) -> Result<BenchRow> {
    let mut psnr_acc = 0.0f64;
    let mut seam_acc = 0.0f64;
    let mut tiles = 0usize;
    for &id in ids {
        let item = &data.items[id];
        let plan = plan_tiles(item.x.dim(), strategy, model.config().patch_size, pad)?;
        tiles = plan.tile_count();
        let stitched = predict_tiled(&item.x, model, &plan)?;
        psnr_acc += (psnr_invariant(&item.d1, &stitched.mu1)?
            + psnr_invariant(&item.d2, &stitched.mu2)?)
            / 2.0;
        seam_acc += seam_score(&stitched);
    }
    let n = ids.len() as f64;
    Ok(BenchRow {
        strategy: format!("{strategy:?}").to_lowercase(),
        pad,
        tiles,
        mean_psnr: psnr_acc / n,
        seam: seam_acc / n,
    })
}

fn cmd_padding_bench(a: BenchArgs) -> Result<()> {
    let file = RunConfig::load_opt(a.config.as_ref())?;
    let ckpt = a
        .checkpoint
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let manifest = a
        .data
        .or(file.data.and_then(|d| d.manifest))
        .ok_or_else(|| usage("--data or [data].manifest is required"))?;
    let model = checkpoint::load(&ckpt).context("loading checkpoint")?;
    let (data, split) = load_data(&manifest)?;
    let ids = &split.test_ids;

    let mut rows = Vec::new();
    let mut inner_pads = vec![a.pad];
    for &g in &a.grid {
        if g != a.pad {
            inner_pads.push(g);
        }
    }
    for pad in inner_pads {
        rows.push(bench_one(&model, &data, ids, Padding::Inner, pad)?);
    }
    rows.push(bench_one(&model, &data, ids, Padding::Outer, a.pad)?);
    rows.push(bench_one(&model, &data, ids, Padding::None, 0)?);

    std::fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("padding-bench.csv");
    let mut w = csv::WriterBuilder::new()
        .from_path(&csv_path)
        .map_err(|e| anyhow!("{e}"))?;
    w.write_record(["strategy", "pad", "tiles", "mean_psnr", "seam_score"])
        .map_err(|e| anyhow!("{e}"))?;
    println!(
        "{:>8} {:>5} {:>7} {:>10} {:>10}",
        "strategy", "pad", "tiles", "psnr(dB)", "seam"
    );
    for r in &rows {
        w.write_record([
            r.strategy.clone(),
            r.pad.to_string(),
            r.tiles.to_string(),
            format!("{:.4}", r.mean_psnr),
            format!("{:.4}", r.seam),
        ])
        .map_err(|e| anyhow!("{e}"))?;
        println!(
            "{:>8} {:>5} {:>7} {:>10.2} {:>10.3}",
            r.strategy, r.pad, r.tiles, r.mean_psnr, r.seam
        );
    }
    w.flush()?;
    println!("table -> {}", csv_path.display());
    Ok(())
}

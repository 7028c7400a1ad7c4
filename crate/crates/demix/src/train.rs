//! Seeded training: random patch sampling, adaptive-moment updates,
//! plateau learning-rate halving, early stopping, best-checkpoint
//! retention, and the two study sweeps.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, DatasetSplit};
use crate::error::{DemixError, Result};
use crate::loss::{elbo_graph, mse_graph, LossVars};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{activation_footprint, BatchInput, Mode, Model, ModelConfig, Variant};
use crate::pyramid::extract_patch;
use crate::tiling::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    /// Accepted for config compatibility; this CPU engine always computes
    /// in 32-bit.
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lr_patience")]
    pub lr_patience: usize,
    #[serde(default = "d_stop_patience")]
    pub early_stop_patience: usize,
    /// Defaults to ceil(total train pixels / (batch * patch^2)).
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_precision")]
    pub precision: Precision,
    #[serde(default = "d_klw")]
    pub kl_weight: f64,
    /// Linear warm-up of the KL weight over the first n epochs (0 = off).
    #[serde(default)]
    pub kl_warmup_epochs: usize,
}

fn d_batch() -> usize {
    32
}
fn d_patch() -> usize {
    64
}
fn d_epochs() -> usize {
    400
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lr_patience() -> usize {
    30
}
fn d_stop_patience() -> usize {
    200
}
fn d_precision() -> Precision {
    Precision::F32
}
fn d_klw() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d_batch(),
            patch_size: d_patch(),
            max_epochs: d_epochs(),
            lr: d_lr(),
            lr_patience: d_lr_patience(),
            early_stop_patience: d_stop_patience(),
            steps_per_epoch: None,
            seed: 0,
            precision: d_precision(),
            kl_weight: d_klw(),
            kl_warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub val_total: f64,
    pub recon_d1: f64,
    pub recon_d2: f64,
    pub kl_sum: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Adaptive-moment gradient descent with default moments.
pub struct Adam {
    m: Vec<Array4<f32>>,
    v: Vec<Array4<f32>>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &[Array4<f32>]) -> Self {
        Adam {
            m: params.iter().map(|p| Array4::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array4::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Array4<f32>], grads: &[Option<Array4<f32>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (b1, b2) = (Self::BETA1 as f32, Self::BETA2 as f32);
            self.m[i].zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let scale = (lr / bc1) as f32;
            let bc2s = (1.0 / bc2) as f32;
            let eps = Self::EPS as f32;
            ndarray::Zip::from(&mut params[i])
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= scale * m / ((v * bc2s).sqrt() + eps);
                });
        }
    }
}

fn stream_rng(seed: u64, epoch: u64, tag: u8) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16] = tag;
    ChaCha12Rng::from_seed(key)
}

/// The sampled (image, center) sequence for one epoch; a pure function of
/// (seed, epoch). Centers keep the primary patch inside the mirror-padded
/// image (margin: a quarter side on each edge).
pub fn epoch_batches(
    seed: u64,
    epoch: usize,
    steps: usize,
    batch: usize,
    n_train: usize,
    side: usize,
    h: usize,
) -> Vec<Vec<(usize, (i64, i64))>> {
    let mut rng = stream_rng(seed, epoch as u64, 0xB7);
    let lo = h as i64 / 2 - side as i64 / 4;
    let hi = side as i64 + side as i64 / 4 - h as i64 / 2;
    (0..steps)
        .map(|_| {
            (0..batch)
                .map(|_| {
                    let img = rng.gen_range(0..n_train);
                    let center = if lo < hi {
                        (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
                    } else {
                        (side as i64 / 2, side as i64 / 2)
                    };
                    (img, center)
                })
                .collect()
        })
        .collect()
}

/// Deterministic validation grid: stride-h centers covering each image at
/// least once (tail patches clamp to the far edge).
pub fn validation_centers(side: usize, h: usize) -> Vec<(i64, i64)> {
    let n = side.div_ceil(h).max(1);
    let pos = |i: usize| -> i64 {
        let r0 = (i * h).min(side.saturating_sub(h));
        r0 as i64 + h as i64 / 2
    };
    let mut centers = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            centers.push((pos(i), pos(j)));
        }
    }
    centers
}

fn batch_input(
    data: &Dataset,
    ids: &[usize],
    picks: &[(usize, (i64, i64))],
    h: usize,
    n_lc: usize,
) -> Result<(BatchInput<f32>, Array4<f32>, Array4<f32>)> {
    let b = picks.len();
    let mut primary = Array4::<f32>::zeros((b, 1, h, h));
    let mut contexts: Vec<Array4<f32>> = (0..n_lc).map(|_| Array4::zeros((b, 1, h, h))).collect();
    let mut t1 = Array4::<f32>::zeros((b, 1, h, h));
    let mut t2 = Array4::<f32>::zeros((b, 1, h, h));
    for (n, &(pick, center)) in picks.iter().enumerate() {
        let item = &data.items[ids[pick]];
        let stack = crate::pyramid::build_lc_stack(&item.x, center, h, n_lc)?;
        primary
            .index_axis_mut(Axis(0), n)
            .index_axis_mut(Axis(0), 0)
            .assign(&stack.primary);
        for (k, c) in stack.contexts.iter().enumerate() {
            contexts[k]
                .index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), 0)
                .assign(c);
        }
        t1.index_axis_mut(Axis(0), n)
            .index_axis_mut(Axis(0), 0)
            .assign(&extract_patch(&item.d1, center, h)?);
        t2.index_axis_mut(Axis(0), n)
            .index_axis_mut(Axis(0), 0)
            .assign(&extract_patch(&item.d2, center, h)?);
    }
    Ok((BatchInput { primary, contexts }, t1, t2))
}

fn model_n_lc(model: &Model<f32>) -> usize {
    if model.config().mode == Mode::UnetBaseline {
        0
    } else {
        model.config().n_lc
    }
}

/// Mean eval-mode loss over the deterministic validation grid.
pub fn validate(
    model: &Model<f32>,
    data: &Dataset,
    val_ids: &[usize],
    tcfg: &TrainConfig,
) -> Result<f64> {
    if val_ids.is_empty() {
        return Err(DemixError::Config("validation split is empty".into()));
    }
    let h = tcfg.patch_size;
    let n_lc = model_n_lc(model);
    let centers = validation_centers(data.side(), h);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (vi, _) in val_ids.iter().enumerate() {
        for chunk in centers.chunks(tcfg.batch_size.max(1)) {
            let picks: Vec<(usize, (i64, i64))> = chunk.iter().map(|&c| (vi, c)).collect();
            let (input, t1, t2) = batch_input(data, val_ids, &picks, h, n_lc)?;
            let mut run = model.run(&input, None)?;
            let d1 = run.ex.feed_array(t1);
            let d2 = run.ex.feed_array(t2);
            let g = &mut run.ex.graph;
            let loss: LossVars = if model.config().mode == Mode::Hvae {
                elbo_graph(g, &run.out, d1, d2, tcfg.kl_weight)
            } else {
                mse_graph(g, &run.out, d1, d2)
            };
            sum += g.scalar_value(loss.total) as f64 * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(sum / count as f64)
}

/// Full training protocol. On return the model carries the parameters of
/// the best-validation epoch.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if tcfg.batch_size == 0 {
        return Err(DemixError::Config("batch_size must be >= 1".into()));
    }
    if model.config().patch_size != tcfg.patch_size {
        return Err(DemixError::Config(format!(
            "model patch size {} does not match training patch size {}",
            model.config().patch_size,
            tcfg.patch_size
        )));
    }
    if split.train_ids.is_empty() || split.val_ids.is_empty() {
        return Err(DemixError::Config(
            "train/val split must be non-empty".into(),
        ));
    }
    let h = tcfg.patch_size;
    let side = data.side();
    let n_lc = model_n_lc(model);
    let steps = tcfg.steps_per_epoch.unwrap_or_else(|| {
        let total = split.train_ids.len() * side * side;
        total.div_ceil(tcfg.batch_size * h * h).max(1)
    });

    let mut adam = Adam::new(model.param_values());
    let mut lr = tcfg.lr;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Array4<f32>> = model.param_values().to_vec();
    let mut since_improve = 0usize;
    let mut lr_since = 0usize;
    let mut history = Vec::new();

    for epoch in 0..tcfg.max_epochs {
        let klw = if tcfg.kl_warmup_epochs > 0 {
            tcfg.kl_weight * (((epoch + 1) as f64) / tcfg.kl_warmup_epochs as f64).min(1.0)
        } else {
            tcfg.kl_weight
        };
        let batches = epoch_batches(
            tcfg.seed,
            epoch,
            steps,
            tcfg.batch_size,
            split.train_ids.len(),
            side,
            h,
        );
        let mut sampler = stream_rng(tcfg.seed, epoch as u64, 0xE5);
        let (mut s_total, mut s_r1, mut s_r2, mut s_kl) = (0.0f64, 0.0, 0.0, 0.0);
        for (step, picks) in batches.iter().enumerate() {
            let (input, t1, t2) = batch_input(data, &split.train_ids, picks, h, n_lc)?;
            let grads: Vec<Option<Array4<f32>>>;
            {
                let mut run = model.run(&input, Some(&mut sampler))?;
                let d1 = run.ex.feed_array(t1);
                let d2 = run.ex.feed_array(t2);
                let g = &mut run.ex.graph;
                let loss: LossVars = if model.config().mode == Mode::Hvae {
                    elbo_graph(g, &run.out, d1, d2, klw)
                } else {
                    mse_graph(g, &run.out, d1, d2)
                };
                let total = g.scalar_value(loss.total) as f64;
                if !total.is_finite() {
                    let norm: f64 = model
                        .param_values()
                        .iter()
                        .map(|p| p.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                        .sum::<f64>()
                        .sqrt();
                    let ids: Vec<usize> = picks.iter().map(|&(i, _)| split.train_ids[i]).collect();
                    return Err(DemixError::Diverged(format!(
                        "non-finite loss at epoch {epoch}, step {step}; batch images {ids:?}; parameter norm {norm:.3e}"
                    )));
                }
                s_total += total;
                s_r1 += g.scalar_value(loss.recon_d1) as f64;
                s_r2 += g.scalar_value(loss.recon_d2) as f64;
                s_kl += loss
                    .kl_per_level
                    .iter()
                    .map(|&k| g.scalar_value(k) as f64)
                    .sum::<f64>();
                let mut back = g.backward(loss.total);
                grads = run
                    .ex
                    .param_vars
                    .iter()
                    .map(|v| v.and_then(|v| back.take(v)))
                    .collect();
            }
            adam.step(model.param_values_mut(), &grads, lr);
        }
        let val_total = validate(model, data, &split.val_ids, tcfg)?;
        let rec = EpochRecord {
            epoch,
            train_total: s_total / steps as f64,
            val_total,
            recon_d1: s_r1 / steps as f64,
            recon_d2: s_r2 / steps as f64,
            kl_sum: s_kl / steps as f64,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);

        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            best_params = model.param_values().to_vec();
            since_improve = 0;
            lr_since = 0;
        } else {
            since_improve += 1;
            lr_since += 1;
            if lr_since >= tcfg.lr_patience {
                lr *= 0.5;
                lr_since = 0;
            }
        }
        if since_improve >= tcfg.early_stop_patience {
            break;
        }
    }

    model
        .param_values_mut()
        .iter_mut()
        .zip(best_params)
        .for_each(|(p, b)| *p = b);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
    })
}

/// Per-epoch CSV log: epoch, train_total, val_total, recon_d1, recon_d2,
/// kl_sum, lr.
pub fn write_history_csv(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DemixError::Data(e.to_string()))?;
    w.write_record([
        "epoch",
        "train_total",
        "val_total",
        "recon_d1",
        "recon_d2",
        "kl_sum",
        "lr",
    ])
    .map_err(|e| DemixError::Data(e.to_string()))?;
    // shortest round-trip float formatting keeps reruns byte-comparable
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_total.to_string(),
            r.val_total.to_string(),
            r.recon_d1.to_string(),
            r.recon_d2.to_string(),
            r.kl_sum.to_string(),
            r.lr.to_string(),
        ])
        .map_err(|e| DemixError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub key: usize,
    pub test_psnr: f64,
    pub footprint_peak: usize,
    pub footprint_total: usize,
}

fn eval_psnr(
    model: &Model<f32>,
    data: &Dataset,
    ids: &[usize],
    strategy: Padding,
    pad: usize,
) -> Result<f64> {
    let report: EvalReport = evaluate(model, data, ids, strategy, pad)?;
    Ok(report.mean_psnr())
}

/// Trains one model per patch size under the given fixed budget and
/// reports (size, test PSNR, footprint).
pub fn sweep_patch_size(
    base_config: &ModelConfig,
    sizes: &[usize],
    data: &Dataset,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    strategy: Padding,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        if size > data.side() {
            return Err(DemixError::Config(format!(
                "patch size {size} exceeds the image side {}",
                data.side()
            )));
        }
        let mut cfg = base_config.clone();
        cfg.patch_size = size;
        let mut tc = tcfg.clone();
        tc.patch_size = size;
        let mut model = Model::build(cfg.clone())?;
        train(&mut model, data, split, &tc, &mut *on_epoch)?;
        let pad = match strategy {
            Padding::Inner => size / 4,
            _ => 0,
        };
        let fp = activation_footprint(&cfg)?;
        rows.push(SweepRow {
            key: size,
            test_psnr: eval_psnr(&model, data, &split.test_ids, strategy, pad)?,
            footprint_peak: fp.peak_elements,
            footprint_total: fp.total_elements,
        });
    }
    Ok(rows)
}

/// The architecture used in the lateral-context sweep at `k` context
/// inputs: k = 0 is the vanilla model, k = L-1 the full LC variant, and
/// anything between is the deep variant with k LC levels.
pub fn lc_sweep_config(base: &ModelConfig, k: usize) -> Result<ModelConfig> {
    if k >= base.n_levels {
        return Err(DemixError::Config(format!(
            "k = {k} needs more hierarchy levels than the configured {}",
            base.n_levels
        )));
    }
    let mut cfg = base.clone();
    cfg.n_lc = k;
    cfg.variant = if k == 0 {
        Variant::Vanilla
    } else if k == base.n_levels - 1 {
        Variant::Lc
    } else {
        Variant::DeepLc
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains LC models with k context inputs at the base patch size and
/// reports (k, test PSNR, footprint).
#[allow(clippy::too_many_arguments)]
pub fn sweep_lc_levels(
    base_config: &ModelConfig,
    k_values: &[usize],
    data: &Dataset,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    strategy: Padding,
    pad: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in k_values {
        let cfg = lc_sweep_config(base_config, k)?;
        let mut model = Model::build(cfg.clone())?;
        train(&mut model, data, split, tcfg, &mut *on_epoch)?;
        let fp = activation_footprint(&cfg)?;
        rows.push(SweepRow {
            key: k,
            test_psnr: eval_psnr(&model, data, &split.test_ids, strategy, pad)?,
            footprint_peak: fp.peak_elements,
            footprint_total: fp.total_elements,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &std::path::Path, key_name: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DemixError::Data(e.to_string()))?;
    w.write_record([key_name, "test_psnr", "footprint_peak", "footprint_total"])
        .map_err(|e| DemixError::Data(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.key.to_string(),
            format!("{:.6}", r.test_psnr),
            r.footprint_peak.to_string(),
            r.footprint_total.to_string(),
        ])
        .map_err(|e| DemixError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

//! Quantitative evaluation: PSNR invariant to shifts and linear transforms
//! of the prediction, structural similarity, and per-split reports.

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{DemixError, Result};
use crate::tiling::{plan_tiles, predict_tiled, Padding, TilePredictor};

pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR after closed-form least-squares affine alignment of the prediction
/// to the ground truth. Capped at 100 dB when the aligned MSE drops below
/// range^2 * 1e-10.
pub fn psnr_invariant(gt: &Array2<f32>, pred: &Array2<f32>) -> Result<f64> {
    if gt.dim() != pred.dim() {
        return Err(DemixError::Shape("psnr shape mismatch".into()));
    }
    let n = gt.len() as f64;
    let mut min_g = f64::INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    let (mut sum_g, mut sum_p) = (0.0f64, 0.0f64);
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        let (g, p) = (g as f64, p as f64);
        min_g = min_g.min(g);
        max_g = max_g.max(g);
        sum_g += g;
        sum_p += p;
    }
    let range = max_g - min_g;
    if range <= 0.0 {
        return Err(DemixError::Data(
            "psnr undefined for constant ground truth".into(),
        ));
    }
    let (mean_g, mean_p) = (sum_g / n, sum_p / n);
    let (mut cov, mut var_p) = (0.0f64, 0.0f64);
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        let (dg, dp) = (g as f64 - mean_g, p as f64 - mean_p);
        cov += dg * dp;
        var_p += dp * dp;
    }
    // constant prediction: beta-only fit
    let alpha = if var_p > 0.0 { cov / var_p } else { 0.0 };
    let beta = mean_g - alpha * mean_p;
    let mut mse = 0.0f64;
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        let r = g as f64 - (alpha * p as f64 + beta);
        mse += r * r;
    }
    mse /= n;
    if mse < range * range * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (range * range / mse).log10())
}

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over all valid 7x7 uniform windows; the dynamic range
/// comes from the ground truth.
pub fn ssim(gt: &Array2<f32>, pred: &Array2<f32>) -> Result<f64> {
    let mut min_g = f64::INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    for &g in gt.iter() {
        min_g = min_g.min(g as f64);
        max_g = max_g.max(g as f64);
    }
    let range = max_g - min_g;
    if range <= 0.0 {
        return Err(DemixError::Data(
            "ssim undefined for constant ground truth".into(),
        ));
    }
    ssim_with_range(gt, pred, range)
}

/// SSIM with an explicitly supplied dynamic range; symmetric in its two
/// image arguments.
pub fn ssim_with_range(a: &Array2<f32>, b: &Array2<f32>, range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DemixError::Shape("ssim shape mismatch".into()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DemixError::Shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let inv_n = 1.0 / (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut acc = 0.0f64;
    let mut windows = 0usize;
    for r0 in 0..=(h - SSIM_WINDOW) {
        for c0 in 0..=(w - SSIM_WINDOW) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let x = a[[r0 + i, c0 + j]] as f64;
                    let y = b[[r0 + i, c0 + j]] as f64;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa * inv_n, sb * inv_n);
            let va = saa * inv_n - ma * ma;
            let vb = sbb * inv_n - mb * mb;
            let cab = sab * inv_n - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cab + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
            windows += 1;
        }
    }
    Ok(acc / windows as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub psnr_d1: f64,
    pub psnr_d2: f64,
    pub ssim_d1: f64,
    pub ssim_d2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_d1: f64,
    pub mean_psnr_d2: f64,
    pub mean_ssim_d1: f64,
    pub mean_ssim_d2: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EvalReport {
            mean_psnr_d1: mean(|r| r.psnr_d1),
            mean_psnr_d2: mean(|r| r.psnr_d2),
            mean_ssim_d1: mean(|r| r.ssim_d1),
            mean_ssim_d2: mean(|r| r.ssim_d2),
            rows,
        }
    }

    /// Channel-averaged mean PSNR, the headline number in sweeps.
    pub fn mean_psnr(&self) -> f64 {
        (self.mean_psnr_d1 + self.mean_psnr_d2) / 2.0
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| DemixError::Data(e.to_string()))?;
        w.write_record(["index", "psnr_d1", "psnr_d2", "ssim_d1", "ssim_d2"])
            .map_err(|e| DemixError::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                format!("{:.6}", r.psnr_d1),
                format!("{:.6}", r.psnr_d2),
                format!("{:.6}", r.ssim_d1),
                format!("{:.6}", r.ssim_d2),
            ])
            .map_err(|e| DemixError::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tiled prediction over the given image ids, then per-channel metrics.
pub fn evaluate<P: TilePredictor>(
    predictor: &P,
    dataset: &Dataset,
    ids: &[usize],
    strategy: Padding,
    pad: usize,
) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(DemixError::Config(
            "evaluate needs a non-empty split".into(),
        ));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let item = dataset
            .items
            .get(id)
            .ok_or_else(|| DemixError::Data(format!("image id {id} out of range")))?;
        let plan = plan_tiles(item.x.dim(), strategy, predictor.patch_size(), pad)?;
        let stitched = predict_tiled(&item.x, predictor, &plan)?;
        rows.push(EvalRow {
            index: id,
            psnr_d1: psnr_invariant(&item.d1, &stitched.mu1)?,
            psnr_d2: psnr_invariant(&item.d2, &stitched.mu2)?,
            ssim_d1: ssim(&item.d1, &stitched.mu1)?,
            ssim_d2: ssim(&item.d2, &stitched.mu2)?,
        });
    }
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randimg(seed: u64, h: usize, w: usize) -> Array2<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_caps_on_identity_and_affine_copies() {
        let gt = randimg(1, 16, 16);
        assert_eq!(psnr_invariant(&gt, &gt).unwrap(), PSNR_CAP_DB);
        let scaled = gt.mapv(|v| 3.0 * v - 0.7);
        assert_eq!(psnr_invariant(&gt, &scaled).unwrap(), PSNR_CAP_DB);
        let flipped = gt.mapv(|v| -2.0 * v + 5.0);
        assert_eq!(psnr_invariant(&gt, &flipped).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_normal_equation_oracle() {
        let gt = Array2::from_shape_vec((1, 4), vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let pred = Array2::from_shape_vec((1, 4), vec![0.0f32, 1.0, 2.0, 2.0]).unwrap();
        // oracle: explicit 2x2 normal-equation solve in f64
        let (n, sg, sp, sgp, spp) = (4.0, 6.0, 5.0, 11.0, 9.0);
        let alpha = (n * sgp - sg * sp) / (n * spp - sp * sp);
        let beta = (sg - alpha * sp) / n;
        let mse: f64 = (0..4)
            .map(|i| {
                let r = gt[[0, i]] as f64 - (alpha * pred[[0, i]] as f64 + beta);
                r * r
            })
            .sum::<f64>()
            / n;
        let want = 10.0 * (9.0 / mse).log10();
        let got = psnr_invariant(&gt, &pred).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn psnr_edge_cases() {
        let constant = Array2::from_elem((4, 4), 2.0f32);
        let gt = randimg(2, 4, 4);
        assert!(psnr_invariant(&constant, &gt).is_err()); // constant gt
        let v = psnr_invariant(&gt, &constant).unwrap(); // beta-only fit
        assert!(v.is_finite() && v < PSNR_CAP_DB);
    }

    #[test]
    fn psnr_affine_invariance_property() {
        let gt = randimg(3, 12, 12);
        let pred = randimg(4, 12, 12);
        let base = psnr_invariant(&gt, &pred).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a: f32 = {
                let m: f32 = rng.gen_range(0.1..10.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            };
            let b: f32 = rng.gen_range(-5.0..5.0);
            let t = pred.mapv(|v| a * v + b);
            let p = psnr_invariant(&gt, &t).unwrap();
            assert!(
                (p - base).abs() < 1e-4,
                "psnr moved from {base} to {p} under ({a}, {b})"
            );
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let gt = randimg(6, 10, 10);
        assert_eq!(ssim(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn ssim_structure_term_flips_sign() {
        // zero-mean gt against its negation: the structure term is -1
        let mut gt = randimg(7, 9, 9);
        let m: f32 = gt.iter().sum::<f32>() / gt.len() as f32;
        gt.mapv_inplace(|v| v - m);
        let neg = gt.mapv(|v| -v);
        // oracle on one window: s = cov / (sd_a * sd_b)
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
        for i in 0..7 {
            for j in 0..7 {
                let (x, y) = (gt[[i, j]] as f64, neg[[i, j]] as f64);
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
        }
        let n = 49.0;
        let cov = sab / n - (sa / n) * (sb / n);
        let va = saa / n - (sa / n) * (sa / n);
        let vb = sbb / n - (sb / n) * (sb / n);
        let structure = cov / (va.sqrt() * vb.sqrt());
        assert!((structure + 1.0).abs() < 1e-9);
        assert!(ssim(&gt, &neg).unwrap().is_finite());
    }

    #[test]
    fn ssim_penalizes_constant_shift() {
        let gt = randimg(8, 12, 12);
        let shifted = gt.mapv(|v| v + 0.5);
        let s = ssim(&gt, &shifted).unwrap();
        assert!(s < 1.0);
        // unlike ssim, the invariant psnr forgives the shift
        assert_eq!(psnr_invariant(&gt, &shifted).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_symmetric_with_fixed_range() {
        let a = randimg(9, 10, 10);
        let b = randimg(10, 10, 10);
        let r = 1.0;
        assert_eq!(
            ssim_with_range(&a, &b, r).unwrap(),
            ssim_with_range(&b, &a, r).unwrap()
        );
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = randimg(11, 5, 5);
        assert!(ssim(&a, &a).is_err());
    }

    /// Parrots the superimposed input back for both channels.
    struct InputStub;

    impl crate::tiling::TilePredictor for InputStub {
        fn patch_size(&self) -> usize {
            16
        }
        fn n_lc(&self) -> usize {
            0
        }
        fn predict(
            &self,
            stacks: &[crate::pyramid::LcStack<f32>],
        ) -> crate::error::Result<Vec<(Array2<f32>, Array2<f32>)>> {
            Ok(stacks
                .iter()
                .map(|s| (s.primary.clone(), s.primary.clone()))
                .collect())
        }
    }

    #[test]
    fn input_stub_scores_below_cap_when_channels_differ() {
        use crate::datagen::{ChannelPair, Dataset};
        let d1 = randimg(20, 32, 32);
        let d2 = randimg(21, 32, 32);
        let data = Dataset::from_pairs(vec![ChannelPair { d1, d2 }]).unwrap();
        let report = evaluate(&InputStub, &data, &[0], Padding::Inner, 4).unwrap();
        assert_eq!(report.rows.len(), 1);
        let r = &report.rows[0];
        for v in [r.psnr_d1, r.psnr_d2] {
            assert!(
                v.is_finite() && v < PSNR_CAP_DB,
                "x is not an affine image of d1: {v}"
            );
        }
    }

    #[test]
    fn metrics_decay_with_noise() {
        let gt = randimg(12, 24, 24);
        let amps = [0.01f32, 0.06, 0.3];
        let mut med_psnr = Vec::new();
        let mut med_ssim = Vec::new();
        for (ai, &amp) in amps.iter().enumerate() {
            let mut ps = Vec::new();
            let mut ss = Vec::new();
            for trial in 0..10u64 {
                let mut rng = ChaCha12Rng::seed_from_u64(100 + trial + ai as u64 * 31);
                let noisy = gt.mapv(|v| v + amp * rng.gen_range(-1.0f32..1.0));
                ps.push(psnr_invariant(&gt, &noisy).unwrap());
                ss.push(ssim(&gt, &noisy).unwrap());
            }
            ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            med_psnr.push(ps[5]);
            med_ssim.push(ss[5]);
        }
        assert!(
            med_psnr[0] > med_psnr[1] && med_psnr[1] > med_psnr[2],
            "{med_psnr:?}"
        );
        assert!(
            med_ssim[0] > med_ssim[1] && med_ssim[1] > med_ssim[2],
            "{med_ssim:?}"
        );
    }
}

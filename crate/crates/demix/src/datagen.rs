//! Synthetic stroke dataset, channel superimposition, dataset splits, and
//! TIFF ingestion.
//!
//! Each synthetic image pair holds straight strokes whose intensity along
//! the stroke is sinusoidal, with the frequency drawn from a per-channel
//! band. The central `n_join` pixels of every stroke carry a constant
//! amplitude/2 instead, so that segment is channel-ambiguous by
//! construction and only the surrounding context can resolve it.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::tiffio;

pub type ChannelImage = Array2<f32>;

#[derive(Debug, Clone)]
pub struct ChannelPair {
    pub d1: ChannelImage,
    pub d2: ChannelImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritterParams {
    pub canvas_size: usize,
    /// Length in pixels of the channel-ambiguous central segment.
    pub n_join: usize,
    pub strokes_per_channel: usize,
    /// Cycles per pixel; must not overlap freq_band_2.
    pub freq_band_1: (f64, f64),
    pub freq_band_2: (f64, f64),
    pub stroke_len: usize,
    pub stroke_width: usize,
    pub amplitude: f32,
    pub seed: u64,
}

impl Default for CritterParams {
    fn default() -> Self {
        CritterParams {
            canvas_size: 128,
            n_join: 25,
            strokes_per_channel: 8,
            freq_band_1: (0.04, 0.08),
            freq_band_2: (0.12, 0.20),
            stroke_len: 100,
            stroke_width: 3,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

impl CritterParams {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DemixError::Config(m));
        let (a, b) = (self.freq_band_1, self.freq_band_2);
        if !(a.0 > 0.0 && a.0 < a.1 && b.0 > 0.0 && b.0 < b.1) {
            return err(format!("invalid frequency bands {a:?}, {b:?}"));
        }
        if a.1 > b.0 && b.1 > a.0 {
            return err(format!("frequency bands {a:?} and {b:?} overlap"));
        }
        if self.n_join >= self.stroke_len {
            return err(format!(
                "n_join ({}) must be smaller than stroke_len ({})",
                self.n_join, self.stroke_len
            ));
        }
        if self.stroke_len >= self.canvas_size {
            return err(format!(
                "stroke_len ({}) must fit the canvas ({})",
                self.stroke_len, self.canvas_size
            ));
        }
        if self.stroke_width == 0 || self.canvas_size < 16 {
            return err("stroke_width must be >= 1 and canvas_size >= 16".into());
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return err(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            ));
        }
        Ok(())
    }
}

/// One rasterizable stroke; all randomness is drawn up front so tests can
/// read the geometry back.
#[derive(Debug, Clone, Copy)]
pub struct Stroke {
    pub channel: usize,
    pub center: (f64, f64),
    pub theta: f64,
    pub freq: f64,
    pub phase: f64,
}

fn rng_for(seed: u64, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16] = 0xC7; // stream domain tag
    ChaCha12Rng::from_seed(key)
}

/// Deterministic stroke list for image `index`.
pub fn critter_strokes(params: &CritterParams, index: u64) -> Result<Vec<Stroke>> {
    params.validate()?;
    let mut rng = rng_for(params.seed, index);
    let size = params.canvas_size as f64;
    let l = params.stroke_len as f64;
    let mut strokes = Vec::with_capacity(2 * params.strokes_per_channel);
    for channel in 0..2usize {
        let band = if channel == 0 {
            params.freq_band_1
        } else {
            params.freq_band_2
        };
        for _ in 0..params.strokes_per_channel {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.gen_range(band.0..band.1);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let ext_r = (l / 2.0) * theta.sin().abs();
            let ext_c = (l / 2.0) * theta.cos().abs();
            let cr = rng.gen_range(ext_r..=(size - 1.0 - ext_r));
            let cc = rng.gen_range(ext_c..=(size - 1.0 - ext_c));
            strokes.push(Stroke {
                channel,
                center: (cr, cc),
                theta,
                freq,
                phase,
            });
        }
    }
    Ok(strokes)
}

/// Intensity at arc-length position `t` along a stroke.
pub fn stroke_profile(params: &CritterParams, stroke: &Stroke, t: f64) -> f32 {
    let l = params.stroke_len as f64;
    let a = params.amplitude;
    if (t - l / 2.0).abs() <= params.n_join as f64 / 2.0 {
        a / 2.0
    } else {
        a * (1.0 + (std::f64::consts::TAU * stroke.freq * t + stroke.phase).sin()) as f32 / 2.0
    }
}

fn rasterize(params: &CritterParams, stroke: &Stroke, img: &mut ChannelImage) {
    let size = params.canvas_size;
    let l = params.stroke_len as f64;
    let half_w = params.stroke_width as f64 / 2.0;
    let (dr, dc) = (stroke.theta.sin(), stroke.theta.cos());
    let (r0, c0) = (
        stroke.center.0 - dr * l / 2.0,
        stroke.center.1 - dc * l / 2.0,
    );
    let (r1, c1) = (r0 + dr * l, c0 + dc * l);
    let margin = half_w + 1.0;
    let rmin = (r0.min(r1) - margin).floor().max(0.0) as usize;
    let rmax = ((r0.max(r1) + margin).ceil() as usize).min(size - 1);
    let cmin = (c0.min(c1) - margin).floor().max(0.0) as usize;
    let cmax = ((c0.max(c1) + margin).ceil() as usize).min(size - 1);
    for r in rmin..=rmax {
        for c in cmin..=cmax {
            let (pr, pc) = (r as f64, c as f64);
            let t = (pr - r0) * dr + (pc - c0) * dc;
            if !(0.0..=l).contains(&t) {
                continue;
            }
            let d_perp = ((pr - r0) * dc - (pc - c0) * dr).abs();
            if d_perp > half_w {
                continue;
            }
            img[[r, c]] += stroke_profile(params, stroke, t);
        }
    }
}

/// Generates the channel pair for image `index`; a pure function of
/// (params.seed, index).
pub fn generate_critter_channels(
    params: &CritterParams,
    index: u64,
) -> Result<(ChannelImage, ChannelImage)> {
    let strokes = critter_strokes(params, index)?;
    let mut d1 = Array2::zeros((params.canvas_size, params.canvas_size));
    let mut d2 = Array2::zeros((params.canvas_size, params.canvas_size));
    for s in &strokes {
        let target = if s.channel == 0 { &mut d1 } else { &mut d2 };
        rasterize(params, s, target);
    }
    Ok((d1, d2))
}

/// Pixelwise (d1 + d2) / 2.
pub fn superimpose(d1: &ChannelImage, d2: &ChannelImage) -> Result<ChannelImage> {
    if d1.dim() != d2.dim() {
        return Err(DemixError::Shape(format!(
            "superimpose shape mismatch: {:?} vs {:?}",
            d1.dim(),
            d2.dim()
        )));
    }
    let mut x = d1.clone();
    x.zip_mut_with(d2, |a, &b| *a = (*a + b) / 2.0);
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// 80/10/10 split with largest-remainder rounding; deterministic in `seed`.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(DemixError::Config(format!(
            "need at least 10 items to split, got {n}"
        )));
    }
    let quotas = [0.8f64, 0.1, 0.1];
    let mut sizes: Vec<usize> = quotas
        .iter()
        .map(|q| (q * n as f64).floor() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    let mut fracs: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q * n as f64 - sizes[i] as f64))
        .collect();
    // ties resolve in train, val, test order
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        sizes[fracs[k % 3].0] += 1;
    }

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let train_ids = ids[..sizes[0]].to_vec();
    let val_ids = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test_ids = ids[sizes[0] + sizes[1]..].to_vec();
    Ok(DatasetSplit {
        train_ids,
        val_ids,
        test_ids,
    })
}

/// Selects two channels from a multi-page float32 TIFF. Pages are grouped
/// into images of `channels_per_image` pages each (default: all pages form
/// one image).
pub fn load_channel_stack(
    path: &Path,
    channel_indices: (usize, usize),
    channels_per_image: Option<usize>,
) -> Result<Vec<ChannelPair>> {
    let pages = tiffio::read_f32_multipage(path)?;
    let cpi = channels_per_image.unwrap_or(pages.len());
    if cpi == 0 || pages.len() % cpi != 0 {
        return Err(DemixError::Data(format!(
            "{} pages cannot be grouped into images of {cpi} channels",
            pages.len()
        )));
    }
    let (i, j) = channel_indices;
    if i >= cpi || j >= cpi {
        return Err(DemixError::Data(format!(
            "channel index ({i}, {j}) out of range for {cpi}-channel images"
        )));
    }
    Ok(pages
        .chunks(cpi)
        .map(|group| ChannelPair {
            d1: group[i].clone(),
            d2: group[j].clone(),
        })
        .collect())
}

/// One training item: the channel pair and its superimposition.
#[derive(Debug, Clone)]
pub struct DataItem {
    pub d1: ChannelImage,
    pub d2: ChannelImage,
    pub x: ChannelImage,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<DataItem>,
}

impl Dataset {
    pub fn from_pairs(pairs: Vec<ChannelPair>) -> Result<Self> {
        let items = pairs
            .into_iter()
            .map(|p| {
                let x = superimpose(&p.d1, &p.d2)?;
                Ok(DataItem {
                    d1: p.d1,
                    d2: p.d2,
                    x,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { items })
    }

    /// Generates `count` synthetic pairs in memory.
    pub fn generate(params: &CritterParams, count: usize) -> Result<Self> {
        params.validate()?;
        let pairs: Vec<ChannelPair> = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let (d1, d2) = generate_critter_channels(params, i)?;
                Ok(ChannelPair { d1, d2 })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_pairs(pairs)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn side(&self) -> usize {
        self.items.first().map(|i| i.x.nrows()).unwrap_or(0)
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// Dataset provenance written next to the generated TIFFs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub params: CritterParams,
    pub count: usize,
    pub split: DatasetSplit,
    pub files: Vec<String>,
}

/// Writes `count` images as multi-page TIFFs (pages: d1, d2) plus a JSON
/// manifest, and returns the manifest.
pub fn save_dataset(dir: &Path, params: &CritterParams, count: usize) -> Result<Manifest> {
    params.validate()?;
    if count < 10 {
        return Err(DemixError::Config(format!(
            "need at least 10 images, got {count}"
        )));
    }
    std::fs::create_dir_all(dir)?;
    let files: Vec<String> = (0..count).map(|i| format!("img_{i:05}.tif")).collect();
    (0..count as u64)
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let (d1, d2) = generate_critter_channels(params, i)?;
            tiffio::write_f32_multipage(&dir.join(&files[i as usize]), &[d1, d2])
        })?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        params: params.clone(),
        count,
        split: split_dataset(count, params.seed)?,
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a generated dataset back from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(Dataset, Manifest)> {
    let bytes = std::fs::read(manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DemixError::Data(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let dir: PathBuf = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let pairs: Vec<ChannelPair> = manifest
        .files
        .par_iter()
        .map(|f| {
            let pages = tiffio::read_f32_multipage(&dir.join(f))?;
            if pages.len() != 2 {
                return Err(DemixError::Data(format!(
                    "{f}: expected 2 pages, got {}",
                    pages.len()
                )));
            }
            let mut it = pages.into_iter();
            Ok(ChannelPair {
                d1: it.next().unwrap(),
                d2: it.next().unwrap(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::from_pairs(pairs)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> CritterParams {
        CritterParams {
            canvas_size: 64,
            n_join: 9,
            strokes_per_channel: 1,
            stroke_len: 48,
            ..CritterParams::default()
        }
    }

    /// O(n^2) DFT magnitude at `k` cycles per window.
    fn dft_mag(xs: &[f64], k: usize) -> f64 {
        let n = xs.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in xs.iter().enumerate() {
            let ang = std::f64::consts::TAU * k as f64 * t as f64 / n;
            re += v * ang.cos();
            im -= v * ang.sin();
        }
        (re * re + im * im).sqrt() / n
    }

    fn centerline_profile(params: &CritterParams, stroke: &Stroke, img: &ChannelImage) -> Vec<f64> {
        let l = params.stroke_len;
        let (dr, dc) = (stroke.theta.sin(), stroke.theta.cos());
        let (r0, c0) = (
            stroke.center.0 - dr * l as f64 / 2.0,
            stroke.center.1 - dc * l as f64 / 2.0,
        );
        (0..l)
            .map(|t| {
                let r = (r0 + dr * t as f64).round() as usize;
                let c = (c0 + dc * t as f64).round() as usize;
                img[[r, c]] as f64
            })
            .collect()
    }

    #[test]
    fn stroke_spectrum_peaks_in_band() {
        // with n_join = 0 the whole profile is sinusoidal; the DFT peak of
        // the rasterized centerline must land inside the channel's band
        let params = CritterParams {
            n_join: 0,
            ..small_params()
        };
        for index in 0..6u64 {
            let (d1, d2) = generate_critter_channels(&params, index).unwrap();
            let strokes = critter_strokes(&params, index).unwrap();
            for s in &strokes {
                let img = if s.channel == 0 { &d1 } else { &d2 };
                let mut xs = centerline_profile(&params, s, img);
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter_mut().for_each(|v| *v -= mean);
                let n = xs.len();
                let peak_k = (1..n / 2)
                    .max_by(|&a, &b| dft_mag(&xs, a).partial_cmp(&dft_mag(&xs, b)).unwrap())
                    .unwrap();
                let f_hat = peak_k as f64 / n as f64;
                let band = if s.channel == 0 {
                    params.freq_band_1
                } else {
                    params.freq_band_2
                };
                let slack = 1.5 / n as f64;
                assert!(
                    f_hat >= band.0 - slack && f_hat <= band.1 + slack,
                    "channel {} peak {f_hat} outside band {band:?}",
                    s.channel
                );
            }
        }
    }

    #[test]
    fn zero_strokes_give_empty_channels() {
        let params = CritterParams {
            strokes_per_channel: 0,
            ..small_params()
        };
        let (d1, d2) = generate_critter_channels(&params, 3).unwrap();
        assert!(d1.iter().all(|&v| v == 0.0));
        assert!(d2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let params = CritterParams::default();
        let a = generate_critter_channels(&params, 7).unwrap();
        let b = generate_critter_channels(&params, 7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_critter_channels(&params, 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn channels_are_finite_and_nonnegative() {
        let params = CritterParams::default();
        for index in 0..4 {
            let (d1, d2) = generate_critter_channels(&params, index).unwrap();
            for img in [&d1, &d2] {
                assert!(img.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn join_segment_is_channel_blind() {
        // single stroke per channel: every centerline sample inside the join
        // is the constant amplitude/2 no matter the channel or frequency
        let params = small_params();
        for index in 0..8u64 {
            let (d1, d2) = generate_critter_channels(&params, index).unwrap();
            for s in critter_strokes(&params, index).unwrap() {
                let img = if s.channel == 0 { &d1 } else { &d2 };
                let profile = centerline_profile(&params, &s, img);
                let l = params.stroke_len as f64;
                for (t, v) in profile.iter().enumerate() {
                    if (t as f64 - l / 2.0).abs() <= params.n_join as f64 / 2.0 - 1.0 {
                        assert!(
                            (*v - params.amplitude as f64 / 2.0).abs() < 1e-6,
                            "join sample at t={t} is {v}, not A/2"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = CritterParams {
            freq_band_2: (0.05, 0.09),
            ..CritterParams::default()
        };
        assert!(p.validate().is_err(), "overlapping bands");
        let p = CritterParams {
            n_join: 100,
            stroke_len: 100,
            ..CritterParams::default()
        };
        assert!(p.validate().is_err(), "join as long as the stroke");
    }

    #[test]
    fn superimpose_examples() {
        let z = Array2::<f32>::zeros((4, 4));
        assert!(superimpose(&z, &z).unwrap().iter().all(|&v| v == 0.0));
        let v = Array2::from_elem((4, 4), 3.5f32);
        assert_eq!(superimpose(&v, &v).unwrap(), v);
        let a = Array2::from_elem((2, 2), 2.0f32);
        let b = Array2::from_elem((2, 2), 4.0f32);
        assert!(superimpose(&a, &b).unwrap().iter().all(|&x| x == 3.0));
        let bad = Array2::<f32>::zeros((2, 3));
        assert!(superimpose(&a, &bad).is_err());
    }

    #[test]
    fn mixed_mean_identity() {
        let params = CritterParams::default();
        let (d1, d2) = generate_critter_channels(&params, 11).unwrap();
        let x = superimpose(&d1, &d2).unwrap();
        let mean = |a: &ChannelImage| a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        assert!((mean(&x) - (mean(&d1) + mean(&d2)) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(10, 1).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.val_ids.len(), s.test_ids.len()),
            (8, 1, 1)
        );
        let s = split_dataset(62, 1).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.val_ids.len(), s.test_ids.len()),
            (50, 6, 6)
        );
        assert_eq!(split_dataset(62, 9).unwrap(), split_dataset(62, 9).unwrap());
        assert!(split_dataset(9, 1).is_err());
    }

    #[test]
    fn split_partitions_all_ids() {
        let s = split_dataset(37, 5).unwrap();
        let mut all: Vec<usize> = s
            .train_ids
            .iter()
            .chain(&s.val_ids)
            .chain(&s.test_ids)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn channel_stack_selection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stack.tif");
        let pages: Vec<ChannelImage> = (0..3)
            .map(|k| Array2::from_elem((6, 6), k as f32))
            .collect();
        tiffio::write_f32_multipage(&p, &pages).unwrap();

        let pairs = load_channel_stack(&p, (0, 1), None).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].d1[[0, 0]], 0.0);
        assert_eq!(pairs[0].d2[[0, 0]], 1.0);

        // identical indices give x = d1
        let same = load_channel_stack(&p, (0, 0), None).unwrap();
        let x = superimpose(&same[0].d1, &same[0].d2).unwrap();
        assert_eq!(x, same[0].d1);

        assert!(load_channel_stack(&p, (0, 5), None).is_err());
        assert!(load_channel_stack(Path::new("/missing.tif"), (0, 1), None).is_err());
    }
}

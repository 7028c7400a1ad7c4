//! Patch extraction and lateral-context stacks: a primary h-by-h crop plus
//! successively larger, block-mean-downsampled context crops around the
//! same center.
//!
//! Out-of-bounds reads reflect at the borders (symmetric mirroring, edge
//! pixel repeated), so crops may extend well past the image.

use ndarray::Array2;

use crate::error::{DemixError, Result};
use crate::tensor::Scalar;

/// A centered crop request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    /// (row, col) center; the patch covers `center - h/2 .. center + h/2`.
    pub center: (i64, i64),
    /// Side length; a power of two, at least 16.
    pub size: usize,
}

impl PatchSpec {
    pub fn new(center: (i64, i64), size: usize) -> Result<Self> {
        if !size.is_power_of_two() || size < 16 {
            return Err(DemixError::Config(format!(
                "patch size must be a power of two >= 16, got {size}"
            )));
        }
        Ok(PatchSpec { center, size })
    }
}

/// Primary patch plus its ordered context crops, all `h x h`.
#[derive(Debug, Clone)]
pub struct LcStack<T> {
    pub primary: Array2<T>,
    /// contexts[k] covers `2^(k+1) * h` around the same center, downsampled
    /// by `2^(k+1)`.
    pub contexts: Vec<Array2<T>>,
}

impl<T> LcStack<T> {
    pub fn n_lc(&self) -> usize {
        self.contexts.len()
    }
}

/// Symmetric reflection of index `i` into `0..n` (edge pixel repeated).
fn mirror_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Centered crop of the mirror-extended image.
pub fn extract_patch<T: Scalar>(
    img: &Array2<T>,
    center: (i64, i64),
    size: usize,
) -> Result<Array2<T>> {
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(DemixError::Shape("empty image".into()));
    }
    if size > 4 * h.max(w) {
        return Err(DemixError::Config(format!(
            "crop of {size} exceeds 4x the image side {}",
            h.max(w)
        )));
    }
    let half = size as i64 / 2;
    let (r0, c0) = (center.0 - half, center.1 - half);
    Ok(Array2::from_shape_fn((size, size), |(r, c)| {
        img[[
            mirror_index(r0 + r as i64, h),
            mirror_index(c0 + c as i64, w),
        ]]
    }))
}

pub fn extract_patch_spec<T: Scalar>(img: &Array2<T>, spec: &PatchSpec) -> Result<Array2<T>> {
    extract_patch(img, spec.center, spec.size)
}

/// Non-overlapping block means; `factor` must divide both sides.
pub fn downsample_by<T: Scalar>(img: &Array2<T>, factor: usize) -> Result<Array2<T>> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(DemixError::Config(format!(
            "factor must be a power of two, got {factor}"
        )));
    }
    let (h, w) = img.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(DemixError::Shape(format!(
            "sides ({h}, {w}) not divisible by factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    let (ho, wo) = (h / factor, w / factor);
    Ok(Array2::from_shape_fn((ho, wo), |(r, c)| {
        let mut acc = T::zero();
        for i in 0..factor {
            for j in 0..factor {
                acc = acc + img[[r * factor + i, c * factor + j]];
            }
        }
        acc * inv
    }))
}

/// Builds the primary patch and its `n_lc` context levels.
pub fn build_lc_stack<T: Scalar>(
    img: &Array2<T>,
    center: (i64, i64),
    size: usize,
    n_lc: usize,
) -> Result<LcStack<T>> {
    let side = img.nrows().max(img.ncols());
    if n_lc > 0 && (size << n_lc) > 4 * side {
        return Err(DemixError::Config(format!(
            "n_lc = {n_lc} needs a crop of {} which exceeds 4x the image side {side}",
            size << n_lc
        )));
    }
    let primary = extract_patch(img, center, size)?;
    let contexts = (0..n_lc)
        .map(|k| {
            let factor = 1usize << (k + 1);
            let raw = extract_patch(img, center, size * factor)?;
            downsample_by(&raw, factor)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LcStack { primary, contexts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f32)
    }

    #[test]
    fn whole_image_patch_is_identity() {
        let img = ramp(32, 32);
        let p = extract_patch(&img, (16, 16), 32).unwrap();
        assert_eq!(p, img);
    }

    #[test]
    fn corner_patch_matches_explicit_mirror_pad() {
        // oracle: materialize the symmetric pad, then slice
        let img = ramp(8, 8);
        let pad = 4;
        let padded = Array2::from_shape_fn((8 + 2 * pad, 8 + 2 * pad), |(r, c)| {
            img[[
                mirror_index(r as i64 - pad as i64, 8),
                mirror_index(c as i64 - pad as i64, 8),
            ]]
        });
        let got = extract_patch(&img, (0, 0), 4).unwrap();
        let want = padded
            .slice(ndarray::s![pad - 2..pad + 2, pad - 2..pad + 2])
            .to_owned();
        assert_eq!(got, want);
        // the out-of-bounds quadrant is the mirrored top-left 2x2
        assert_eq!(got[[0, 0]], img[[1, 1]]);
        assert_eq!(got[[0, 2]], img[[1, 0]]);
        assert_eq!(got[[2, 0]], img[[0, 1]]);
        assert_eq!(got[[2, 2]], img[[0, 0]]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = ramp(16, 16);
        let a = extract_patch(&img, (3, -2), 16).unwrap();
        let b = extract_patch(&img, (3, -2), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let img = ramp(8, 8);
        assert!(extract_patch(&img, (4, 4), 64).is_err());
        assert!(extract_patch(&img, (4, 4), 32).is_ok());
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(downsample_by(&img, 1).unwrap(), img);
    }

    #[test]
    fn downsample_block_mean() {
        let img = Array2::from_shape_vec((2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let d = downsample_by(&img, 2).unwrap();
        assert_eq!(d.dim(), (1, 1));
        assert_eq!(d[[0, 0]], 2.5);
    }

    #[test]
    fn downsample_preserves_mean() {
        let img = ramp(16, 16);
        let d = downsample_by(&img, 4).unwrap();
        let m_in: f32 = img.iter().sum::<f32>() / img.len() as f32;
        let m_out: f32 = d.iter().sum::<f32>() / d.len() as f32;
        assert!((m_in - m_out).abs() < 1e-3);
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let img = ramp(6, 6);
        assert!(downsample_by(&img, 4).is_err());
    }

    #[test]
    fn stack_with_no_context() {
        let img = ramp(32, 32);
        let st = build_lc_stack(&img, (16, 16), 16, 0).unwrap();
        assert!(st.contexts.is_empty());
        assert_eq!(st.primary.dim(), (16, 16));
    }

    #[test]
    fn constant_image_gives_constant_stack() {
        let img = Array2::from_elem((64, 64), 3.25f32);
        let st = build_lc_stack(&img, (32, 32), 16, 2).unwrap();
        assert!(st.primary.iter().all(|&v| v == 3.25));
        for c in &st.contexts {
            assert_eq!(c.dim(), (16, 16));
            assert!(c.iter().all(|&v| (v - 3.25).abs() < 1e-6));
        }
    }

    #[test]
    fn checkerboard_context_is_uniform_half() {
        // 2-px checkerboard of {0,1}: factor-2 average pooling gives 0.5
        let img = Array2::from_shape_fn((64, 64), |(r, c)| ((r + c) % 2) as f32);
        let st = build_lc_stack(&img, (32, 32), 16, 1).unwrap();
        assert!(st.contexts[0].iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn stack_rejects_oversized_context() {
        let img = ramp(32, 32);
        assert!(build_lc_stack(&img, (16, 16), 32, 3).is_err()); // 256 > 4*32
    }

    #[test]
    fn context_mean_matches_raw_crop_mean() {
        let img = ramp(64, 64);
        let st = build_lc_stack(&img, (20, 40), 16, 2).unwrap();
        for (k, ctx) in st.contexts.iter().enumerate() {
            let raw = extract_patch(&img, (20, 40), 16 << (k + 1)).unwrap();
            let m_raw: f32 = raw.iter().sum::<f32>() / raw.len() as f32;
            let m_ctx: f32 = ctx.iter().sum::<f32>() / ctx.len() as f32;
            assert!(
                (m_raw - m_ctx).abs() < 1e-2,
                "level {k}: {m_raw} vs {m_ctx}"
            );
        }
    }

    #[test]
    fn field_of_view_telescopes_by_factor_four() {
        // contexts[k] covers 2^(k+1)*h: each level quadruples the area
        for k in 0..3usize {
            let cover = 16usize << (k + 1);
            let prev = if k == 0 { 16 } else { 16 << k };
            assert_eq!(cover * cover, 4 * prev * prev);
        }
    }
}

//! Full-image inference by tiled prediction.
//!
//! Inner padding keeps only the centered core of each predicted tile while
//! the fed patch stays at the training size; outer padding feeds enlarged
//! windows and keeps the full training-size tile; none keeps everything.
//! Keep-regions partition a mirror-padded canvas exactly, so every output
//! pixel is written once.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::pyramid::{build_lc_stack, LcStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Inner,
    Outer,
    None,
}

impl std::str::FromStr for Padding {
    type Err = DemixError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(Padding::Inner),
            "outer" => Ok(Padding::Outer),
            "none" => Ok(Padding::None),
            other => Err(DemixError::Config(format!(
                "unknown padding strategy {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Window center in canvas coordinates.
    pub center: (i64, i64),
    /// Output region this tile owns, in canvas coordinates.
    pub keep: Rect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilingPlan {
    pub strategy: Padding,
    pub patch: usize,
    pub pad: usize,
    pub stride: usize,
    pub tiles: Vec<Tile>,
    pub canvas: (usize, usize),
    /// Image origin inside the canvas.
    pub offset: (usize, usize),
    pub image: (usize, usize),
}

impl TilingPlan {
    /// Window side fed to the model.
    pub fn input_size(&self) -> usize {
        match self.strategy {
            Padding::Outer => self.patch + 2 * self.pad,
            _ => self.patch,
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }
}

/// Lays out keep-regions that tile a mirror-padded canvas exactly.
pub fn plan_tiles(
    image_dims: (usize, usize),
    strategy: Padding,
    h: usize,
    pad: usize,
) -> Result<TilingPlan> {
    if image_dims.0 == 0 || image_dims.1 == 0 {
        return Err(DemixError::Shape("empty image".into()));
    }
    match strategy {
        Padding::Inner => {
            if pad == 0 || 2 * pad >= h {
                return Err(DemixError::Config(format!(
                    "inner padding needs 0 < 2*pad < patch, got pad {pad}, patch {h}"
                )));
            }
        }
        Padding::None => {
            if pad != 0 {
                return Err(DemixError::Config(format!(
                    "no-padding strategy takes pad = 0, got {pad}"
                )));
            }
        }
        Padding::Outer => {
            if pad == 0 {
                return Err(DemixError::Config("outer padding needs pad > 0".into()));
            }
        }
    }
    let stride = match strategy {
        Padding::Inner => h - 2 * pad,
        _ => h,
    };
    let n_r = image_dims.0.div_ceil(stride);
    let n_c = image_dims.1.div_ceil(stride);
    let canvas = (n_r * stride, n_c * stride);
    let offset = ((canvas.0 - image_dims.0) / 2, (canvas.1 - image_dims.1) / 2);
    let mut tiles = Vec::with_capacity(n_r * n_c);
    for r in 0..n_r {
        for c in 0..n_c {
            let keep = Rect {
                r0: r * stride,
                c0: c * stride,
                h: stride,
                w: stride,
            };
            let center = ((keep.r0 + stride / 2) as i64, (keep.c0 + stride / 2) as i64);
            tiles.push(Tile { center, keep });
        }
    }
    Ok(TilingPlan {
        strategy,
        patch: h,
        pad,
        stride,
        tiles,
        canvas,
        offset,
        image: image_dims,
    })
}

/// Anything that can decompose a batch of patches. Implemented by `Model`
/// and by the test stubs.
pub trait TilePredictor: Sync {
    fn patch_size(&self) -> usize;
    fn n_lc(&self) -> usize;
    fn predict(&self, stacks: &[LcStack<f32>]) -> Result<Vec<(Array2<f32>, Array2<f32>)>>;
}

impl TilePredictor for Model<f32> {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn n_lc(&self) -> usize {
        if self.config().mode == Mode::UnetBaseline {
            0
        } else {
            self.config().n_lc
        }
    }

    fn predict(&self, stacks: &[LcStack<f32>]) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
        self.predict_means(stacks)
    }
}

#[derive(Debug, Clone)]
pub struct StitchedPrediction {
    pub mu1: Array2<f32>,
    pub mu2: Array2<f32>,
    pub plan: TilingPlan,
}

const TILE_BATCH: usize = 32;

/// Predicts every tile (context crops come from the full image, so lateral
/// context crosses tile borders) and writes each keep-region once.
pub fn predict_tiled<P: TilePredictor>(
    image: &Array2<f32>,
    predictor: &P,
    plan: &TilingPlan,
) -> Result<StitchedPrediction> {
    if plan.image != image.dim() {
        return Err(DemixError::Shape(
            "plan was made for a different image size".into(),
        ));
    }
    if plan.strategy != Padding::Outer && plan.patch != predictor.patch_size() {
        return Err(DemixError::Config(format!(
            "plan patch {} does not match the model patch {}",
            plan.patch,
            predictor.patch_size()
        )));
    }
    let input = plan.input_size();
    let mut mu1c = Array2::<f32>::zeros(plan.canvas);
    let mut mu2c = Array2::<f32>::zeros(plan.canvas);
    for chunk in plan.tiles.chunks(TILE_BATCH) {
        let stacks: Vec<LcStack<f32>> = chunk
            .iter()
            .map(|t| {
                let center = (
                    t.center.0 - plan.offset.0 as i64,
                    t.center.1 - plan.offset.1 as i64,
                );
                build_lc_stack(image, center, input, predictor.n_lc())
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = predictor.predict(&stacks)?;
        for (t, (m1, m2)) in chunk.iter().zip(preds) {
            if m1.dim() != (input, input) {
                return Err(DemixError::Shape(format!(
                    "predictor returned {:?} for a {input}x{input} window",
                    m1.dim()
                )));
            }
            // keep-region offset inside the predicted window
            let lr = (input - t.keep.h) / 2;
            let lc = (input - t.keep.w) / 2;
            for i in 0..t.keep.h {
                for j in 0..t.keep.w {
                    mu1c[[t.keep.r0 + i, t.keep.c0 + j]] = m1[[lr + i, lc + j]];
                    mu2c[[t.keep.r0 + i, t.keep.c0 + j]] = m2[[lr + i, lc + j]];
                }
            }
        }
    }
    let (or, oc) = plan.offset;
    let (ih, iw) = plan.image;
    Ok(StitchedPrediction {
        mu1: mu1c.slice(ndarray::s![or..or + ih, oc..oc + iw]).to_owned(),
        mu2: mu2c.slice(ndarray::s![or..or + ih, oc..oc + iw]).to_owned(),
        plan: plan.clone(),
    })
}

/// Keep-region boundary lines in image coordinates.
pub fn boundary_lines(plan: &TilingPlan) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let (ih, iw) = plan.image;
    let mut k = plan.stride as i64;
    while k < plan.canvas.0 as i64 {
        let y = k - plan.offset.0 as i64;
        if y >= 1 && y as usize <= ih.saturating_sub(2) {
            rows.push(y as usize);
        }
        k += plan.stride as i64;
    }
    let mut k = plan.stride as i64;
    while k < plan.canvas.1 as i64 {
        let x = k - plan.offset.1 as i64;
        if x >= 1 && x as usize <= iw.saturating_sub(2) {
            cols.push(x as usize);
        }
        k += plan.stride as i64;
    }
    (rows, cols)
}

/// Mean absolute second difference across the given lines, normalized by
/// the same statistic over lines away from them. 1.0 means seam-free.
pub fn seam_score_at(channels: &[&Array2<f32>], rows: &[usize], cols: &[usize]) -> f64 {
    let mut boundary = (0.0f64, 0usize);
    let mut interior = (0.0f64, 0usize);
    for img in channels {
        let (h, w) = img.dim();
        let row_set: std::collections::HashSet<usize> = rows.iter().copied().collect();
        let col_set: std::collections::HashSet<usize> = cols.iter().copied().collect();
        let near = |set: &std::collections::HashSet<usize>, i: usize| {
            set.contains(&i) || set.contains(&(i + 1)) || (i > 0 && set.contains(&(i - 1)))
        };
        if !rows.is_empty() {
            for y in 1..h - 1 {
                let on_boundary = row_set.contains(&y);
                if !on_boundary && near(&row_set, y) {
                    continue; // shoulder of a seam: neither boundary nor clean interior
                }
                let mut acc = 0.0f64;
                for x in 0..w {
                    let d2 =
                        img[[y - 1, x]] as f64 - 2.0 * img[[y, x]] as f64 + img[[y + 1, x]] as f64;
                    acc += d2.abs();
                }
                if on_boundary {
                    boundary.0 += acc;
                    boundary.1 += w;
                } else {
                    interior.0 += acc;
                    interior.1 += w;
                }
            }
        }
        if !cols.is_empty() {
            for x in 1..w - 1 {
                let on_boundary = col_set.contains(&x);
                if !on_boundary && near(&col_set, x) {
                    continue;
                }
                let mut acc = 0.0f64;
                for y in 0..h {
                    let d2 =
                        img[[y, x - 1]] as f64 - 2.0 * img[[y, x]] as f64 + img[[y, x + 1]] as f64;
                    acc += d2.abs();
                }
                if on_boundary {
                    boundary.0 += acc;
                    boundary.1 += h;
                } else {
                    interior.0 += acc;
                    interior.1 += h;
                }
            }
        }
    }
    if boundary.1 == 0 {
        return 1.0;
    }
    let b = boundary.0 / boundary.1 as f64;
    let i = if interior.1 == 0 {
        0.0
    } else {
        interior.0 / interior.1 as f64
    };
    if i < 1e-12 {
        if b < 1e-12 {
            1.0
        } else {
            b / 1e-12
        }
    } else {
        b / i
    }
}

/// Seam artifact measure of a stitched prediction along its own grid.
pub fn seam_score(pred: &StitchedPrediction) -> f64 {
    let (rows, cols) = boundary_lines(&pred.plan);
    seam_score_at(&[&pred.mu1, &pred.mu2], &rows, &cols)
}

/// Composes the receptive field through a serial chain of layers given as
/// (kernel, stride) with fractional strides for transposed convolutions.
pub fn compose_receptive_field(layers: &[(usize, f64)]) -> f64 {
    let mut r = 1.0f64;
    let mut j = 1.0f64;
    for &(k, s) in layers {
        r += (k as f64 - 1.0) * j;
        j *= s;
    }
    r
}

fn res_block_layers(out: &mut Vec<(usize, f64)>, count: usize) {
    for _ in 0..count {
        out.push((3, 1.0));
        out.push((3, 1.0));
        out.push((1, 1.0)); // gate
    }
}

/// Theoretical receptive-field side of the deepest output unit. For LC
/// variants this is the effective field of view: the network sees at most
/// the largest context crop, 2^n_lc * patch.
pub fn receptive_field(config: &ModelConfig) -> usize {
    if config.mode != Mode::UnetBaseline && config.n_lc > 0 {
        return (1usize << config.n_lc) * config.patch_size;
    }
    let r = config.res_blocks_per_block;
    let mut layers: Vec<(usize, f64)> = Vec::new();
    match config.mode {
        Mode::UnetBaseline => {
            layers.push((3, 1.0)); // stem
            for _ in 0..config.n_levels {
                layers.push((3, 1.0));
                layers.push((3, 1.0));
                layers.push((3, 2.0)); // down
            }
            layers.push((3, 1.0));
            layers.push((3, 1.0));
            for _ in 0..config.n_levels {
                layers.push((2, 0.5)); // up
                layers.push((1, 1.0));
                layers.push((3, 1.0));
                layers.push((3, 1.0));
            }
            layers.push((3, 1.0));
            layers.push((1, 1.0));
        }
        _ => {
            layers.push((3, 1.0)); // input branch
            for _ in 0..config.n_levels {
                layers.push((3, 2.0)); // strided down
                res_block_layers(&mut layers, r);
            }
            for _ in 0..config.n_levels {
                res_block_layers(&mut layers, r);
                layers.push((1, 1.0)); // heads / merges
                layers.push((2, 0.5)); // up
                res_block_layers(&mut layers, r);
                layers.push((1, 1.0)); // skip merge
            }
            layers.push((3, 1.0));
            layers.push((1, 1.0));
        }
    }
    compose_receptive_field(&layers).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn plan_geometry_from_large_scan() {
        let inner = plan_tiles((2720, 2720), Padding::Inner, 64, 24).unwrap();
        assert_eq!(inner.stride, 16);
        assert_eq!(inner.tile_count(), 170 * 170);
        let none = plan_tiles((2720, 2720), Padding::None, 64, 0).unwrap();
        assert_eq!(none.canvas, (2752, 2752));
        assert_eq!(none.tile_count(), 43 * 43);
        // 16x more predictions per covered area: (64/16)^2
        assert_eq!((none.stride / inner.stride).pow(2), 16);
        assert_eq!(inner.tile_count(), 28900);
        assert_eq!(none.tile_count(), 1849);
    }

    #[test]
    fn inner_plan_on_one_patch_is_4x4_grid() {
        let plan = plan_tiles((64, 64), Padding::Inner, 64, 24).unwrap();
        assert_eq!(plan.stride, 16);
        assert_eq!(plan.tile_count(), 16);
        assert!(plan.tiles.iter().all(|t| t.keep.h == 16 && t.keep.w == 16));
    }

    #[test]
    fn keep_regions_partition_canvas() {
        for (dims, strategy, h, pad) in [
            ((20, 28), Padding::Inner, 8, 2),
            ((20, 28), Padding::None, 8, 0),
            ((21, 13), Padding::Outer, 8, 4),
        ] {
            let plan = plan_tiles(dims, strategy, h, pad).unwrap();
            let mut hits = Array2::<u32>::zeros(plan.canvas);
            for t in &plan.tiles {
                for i in 0..t.keep.h {
                    for j in 0..t.keep.w {
                        hits[[t.keep.r0 + i, t.keep.c0 + j]] += 1;
                    }
                }
            }
            assert!(
                hits.iter().all(|&v| v == 1),
                "{strategy:?} left gaps or overlaps"
            );
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        assert!(plan_tiles((64, 64), Padding::Inner, 64, 0).is_err());
        assert!(plan_tiles((64, 64), Padding::Inner, 64, 32).is_err());
        assert!(plan_tiles((64, 64), Padding::None, 64, 8).is_err());
        assert!(plan_tiles((64, 64), Padding::Outer, 64, 0).is_err());
    }

    /// Pure 3x3 box filter: translation invariant, halo of one pixel.
    struct BoxStub {
        h: usize,
    }

    impl TilePredictor for BoxStub {
        fn patch_size(&self) -> usize {
            self.h
        }
        fn n_lc(&self) -> usize {
            0
        }
        fn predict(
            &self,
            stacks: &[LcStack<f32>],
        ) -> crate::error::Result<Vec<(Array2<f32>, Array2<f32>)>> {
            // mirror at window edges, matching the extraction convention, so
            // the stub is exactly translation invariant
            let refl = |i: i64, n: usize| -> usize {
                let n = n as i64;
                let m = i.rem_euclid(2 * n);
                if m < n {
                    m as usize
                } else {
                    (2 * n - 1 - m) as usize
                }
            };
            Ok(stacks
                .iter()
                .map(|s| {
                    let p = &s.primary;
                    let (h, w) = p.dim();
                    let out = Array2::from_shape_fn((h, w), |(r, c)| {
                        let mut acc = 0.0f32;
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                acc += p[[refl(r as i64 + dr, h), refl(c as i64 + dc, w)]];
                            }
                        }
                        acc / 9.0
                    });
                    (out.clone(), out)
                })
                .collect())
        }
    }

    /// Identity on the primary patch.
    struct IdStub {
        h: usize,
    }

    impl TilePredictor for IdStub {
        fn patch_size(&self) -> usize {
            self.h
        }
        fn n_lc(&self) -> usize {
            0
        }
        fn predict(
            &self,
            stacks: &[LcStack<f32>],
        ) -> crate::error::Result<Vec<(Array2<f32>, Array2<f32>)>> {
            Ok(stacks
                .iter()
                .map(|s| (s.primary.clone(), s.primary.clone()))
                .collect())
        }
    }

    #[test]
    fn constant_image_stitches_seam_free() {
        let img = Array2::from_elem((40, 40), 2.5f32);
        let plan = plan_tiles(img.dim(), Padding::Inner, 16, 4).unwrap();
        let out = predict_tiled(&img, &IdStub { h: 16 }, &plan).unwrap();
        assert!(out.mu1.iter().all(|&v| v == 2.5));
        assert_eq!(seam_score(&out), 1.0);
    }

    #[test]
    fn inner_matches_none_away_from_seams_for_conv_stub() {
        let img = Array2::from_shape_fn((48, 48), |(r, c)| ((r * 31 + c * 17) % 13) as f32);
        let stub = BoxStub { h: 16 };
        let pad = 4usize;
        let inner = predict_tiled(
            &img,
            &stub,
            &plan_tiles(img.dim(), Padding::Inner, 16, pad).unwrap(),
        )
        .unwrap();
        let none_plan = plan_tiles(img.dim(), Padding::None, 16, 0).unwrap();
        let none = predict_tiled(&img, &stub, &none_plan).unwrap();
        let (rows, cols) = boundary_lines(&none_plan);
        for r in 0..48usize {
            for c in 0..48usize {
                let clear = rows.iter().all(|&y| r.abs_diff(y) > pad)
                    && cols.iter().all(|&x| c.abs_diff(x) > pad);
                if clear {
                    assert_eq!(inner.mu1[[r, c]], none.mu1[[r, c]], "mismatch at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn outer_strategy_feeds_enlarged_windows() {
        let plan = plan_tiles((128, 128), Padding::Outer, 64, 24).unwrap();
        assert_eq!(plan.input_size(), 112);
        assert_eq!(plan.stride, 64);
        // the identity stub reports the enlarged window faithfully
        let img = Array2::from_shape_fn((128, 128), |(r, c)| (r + c) as f32);
        let out = predict_tiled(&img, &IdStub { h: 112 }, &plan).unwrap();
        assert_eq!(out.mu1.dim(), (128, 128));
        assert_eq!(out.mu1, img);
    }

    #[test]
    fn seam_score_closed_form_in_delta() {
        // base r^2 has second difference 2 along rows; adding k*delta per
        // tile row makes the boundary statistic |2 - delta| exactly
        let (h, w, tile) = (32usize, 32usize, 8usize);
        let mk = |delta: f32| {
            Array2::from_shape_fn((h, w), |(r, _)| (r * r) as f32 + (r / tile) as f32 * delta)
        };
        let rows: Vec<usize> = (1..h / tile).map(|k| k * tile).collect();
        for delta in [6.0f32, 10.0, 18.0] {
            let img = mk(delta);
            let score = seam_score_at(&[&img], &rows, &[]);
            let want = (delta as f64 - 2.0) / 2.0;
            assert!(
                (score - want).abs() < 1e-6,
                "delta {delta}: {score} vs {want}"
            );
        }
    }

    #[test]
    fn seam_score_tracks_grid_translation() {
        let (h, w, tile) = (32usize, 32usize, 8usize);
        let img = Array2::from_shape_fn((h, w), |(r, _)| (r * r) as f32 + (r / tile) as f32 * 10.0);
        let rows: Vec<usize> = (1..h / tile).map(|k| k * tile).collect();
        let shifted: Vec<usize> = rows.iter().map(|&y| y + 3).collect();
        let on_grid = seam_score_at(&[&img], &rows, &[]);
        let off_grid = seam_score_at(&[&img], &shifted, &[]);
        assert!(on_grid > 3.0, "seams not detected: {on_grid}");
        assert!(
            off_grid < 1.0,
            "shifted grid should look seam-free-ish: {off_grid}"
        );
        assert!(
            on_grid > 4.0 * off_grid,
            "score does not track the grid: {on_grid} vs {off_grid}"
        );
    }

    #[test]
    fn receptive_field_composition_rules() {
        assert_eq!(compose_receptive_field(&[(3, 1.0)]), 3.0);
        assert_eq!(compose_receptive_field(&[(3, 1.0), (3, 1.0)]), 5.0);
    }

    #[test]
    fn lc_effective_fov_is_context_extent() {
        let cfg = ModelConfig {
            mode: Mode::Hvae,
            variant: Variant::Lc,
            n_levels: 4,
            n_lc: 3,
            patch_size: 64,
            base_channels: 8,
            res_blocks_per_block: 1,
            z_channels: 4,
            seed: 0,
            deep_bu_scale: true,
        };
        assert_eq!(receptive_field(&cfg), 512);
    }
}

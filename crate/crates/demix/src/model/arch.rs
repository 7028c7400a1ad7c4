//! Internal architecture description and the generic forward pass.
//!
//! The network is described once as parameter-index wiring (`Arch`) and the
//! forward pass is written once against `Exec`, so the value-level run and
//! the shape-level footprint simulation cannot drift apart.

use ndarray::Array4;
use rand_chacha::ChaCha12Rng;

use crate::tensor::exec::{standard_normal, Exec};
use crate::tensor::Scalar;

use super::{Mode, ModelConfig, Variant};

pub const SIGMA_RAW_MAX: f64 = 20.0;
pub const SIGMA_FLOOR_LN: f64 = -5.0;

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvT {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
    pub gate: Conv,
}

#[derive(Debug, Clone)]
pub struct BuBlock {
    pub down: Conv,
    pub res: Vec<ResBlock>,
    /// LC levels zero-pad the halved core back to the incoming size.
    pub pad_back: bool,
    /// 1/sqrt(2*i) output scaling for the deep variant.
    pub scale: Option<f64>,
    /// Input branch and 1x1 merge for the lateral context at this level.
    pub lateral: Option<(Conv, Conv)>,
}

#[derive(Debug, Clone)]
pub struct StochParams {
    pub q_merge: Conv,
    pub q_head: Conv,
    pub p_head: Option<Conv>, // absent at the topmost level (standard-normal prior)
    pub z_proj: Conv,
}

#[derive(Debug, Clone)]
pub struct TdBlock {
    pub res_in: Vec<ResBlock>,
    pub stoch: Option<StochParams>, // None in HAE mode (identity stochastic block)
    pub crop_zoom: bool,
    pub up: ConvT,
    pub res_out: Vec<ResBlock>,
    pub skip_merge: Conv,
}

#[derive(Debug, Clone)]
pub struct OutBlock {
    pub c1: Conv,
    pub out: Conv,
}

#[derive(Debug, Clone)]
pub struct UnetLevel {
    pub b1: Conv,
    pub b2: Conv,
    pub down: Conv,
    pub up: ConvT,
    pub merge: Conv,
    pub d1: Conv,
    pub d2: Conv,
}

#[derive(Debug, Clone)]
pub enum Arch {
    Hierarchical {
        ibs: Vec<Conv>, // input branches for levels 0..=n_lc
        bu: Vec<BuBlock>,
        td: Vec<TdBlock>,
        ob: OutBlock,
    },
    Unet {
        stem: Conv,
        levels: Vec<UnetLevel>,
        mid1: Conv,
        mid2: Conv,
        ob1: Conv,
        ob2: Conv,
    },
}

/// Allocates seeded parameters while recording the wiring.
pub struct ParamAlloc<T: Scalar> {
    pub names: Vec<String>,
    pub values: Vec<Array4<T>>,
    rng: ChaCha12Rng,
}

impl<T: Scalar> ParamAlloc<T> {
    pub fn new(rng: ChaCha12Rng) -> Self {
        ParamAlloc {
            names: Vec::new(),
            values: Vec::new(),
            rng,
        }
    }

    fn push(&mut self, name: String, value: Array4<T>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    fn randn(&mut self, shape: (usize, usize, usize, usize), sigma: f64) -> Array4<T> {
        Array4::from_shape_simple_fn(shape, || {
            T::from_f64(standard_normal(&mut self.rng) * sigma)
        })
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv {
        let sigma = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = self.randn((cout, cin, k, k), sigma);
        let wi = self.push(format!("{name}.w"), w);
        let bi = self.push(format!("{name}.b"), Array4::zeros((cout, 1, 1, 1)));
        Conv {
            w: wi,
            b: bi,
            stride,
            pad,
        }
    }

    pub fn convt(&mut self, name: &str, cin: usize, cout: usize) -> ConvT {
        let sigma = 1.0 / (cin as f64).sqrt();
        let w = self.randn((cin, cout, 2, 2), sigma);
        let wi = self.push(format!("{name}.w"), w);
        let bi = self.push(format!("{name}.b"), Array4::zeros((cout, 1, 1, 1)));
        ConvT { w: wi, b: bi }
    }

    fn res_block(&mut self, name: &str, ch: usize) -> ResBlock {
        ResBlock {
            c1: self.conv(&format!("{name}.c1"), ch, ch, 3, 1, 1),
            c2: self.conv(&format!("{name}.c2"), ch, ch, 3, 1, 1),
            gate: self.conv(&format!("{name}.gate"), ch, 2 * ch, 1, 1, 0),
        }
    }

    fn res_stack(&mut self, name: &str, ch: usize, count: usize) -> Vec<ResBlock> {
        (0..count)
            .map(|r| self.res_block(&format!("{name}.res{r}"), ch))
            .collect()
    }
}

pub fn build_arch<T: Scalar>(cfg: &ModelConfig, alloc: &mut ParamAlloc<T>) -> Arch {
    match cfg.mode {
        Mode::UnetBaseline => build_unet(cfg, alloc),
        Mode::Hae | Mode::Hvae => build_hierarchical(cfg, alloc),
    }
}

#[allow(clippy::needless_range_loop)]
fn build_hierarchical<T: Scalar>(cfg: &ModelConfig, alloc: &mut ParamAlloc<T>) -> Arch {
    let c = cfg.base_channels;
    let z = cfg.z_channels;
    let levels = cfg.n_levels;
    let r = cfg.res_blocks_per_block;

    let ibs: Vec<Conv> = (0..=cfg.n_lc)
        .map(|l| alloc.conv(&format!("ib{l}"), 1, c, 3, 1, 1))
        .collect();

    let mut bu = Vec::with_capacity(levels);
    for i in 1..=levels {
        let lc_level = is_lc_level(cfg, i);
        let name = format!("bu{i}");
        let down = alloc.conv(&format!("{name}.down"), c, c, 3, 2, 1);
        let res = alloc.res_stack(&name, c, r);
        let lateral = if i <= cfg.n_lc {
            let merge = alloc.conv(&format!("{name}.merge"), 2 * c, c, 1, 1, 0);
            Some((ibs[i], merge))
        } else {
            None
        };
        let scale = if cfg.variant == Variant::DeepLc && cfg.deep_bu_scale {
            Some(1.0 / (2.0 * i as f64).sqrt())
        } else {
            None
        };
        bu.push(BuBlock {
            down,
            res,
            pad_back: lc_level,
            scale,
            lateral,
        });
    }

    let mut td = Vec::with_capacity(levels);
    for i in 1..=levels {
        let name = format!("td{i}");
        let res_in = alloc.res_stack(&format!("{name}.in"), c, r);
        let stoch = if cfg.mode == Mode::Hvae {
            Some(StochParams {
                q_merge: alloc.conv(&format!("{name}.q_merge"), 2 * c, c, 1, 1, 0),
                q_head: alloc.conv(&format!("{name}.q_head"), c, 2 * z, 1, 1, 0),
                p_head: if i < levels {
                    Some(alloc.conv(&format!("{name}.p_head"), c, 2 * z, 1, 1, 0))
                } else {
                    None
                },
                z_proj: alloc.conv(&format!("{name}.z_proj"), z, c, 1, 1, 0),
            })
        } else {
            None
        };
        let up = alloc.convt(&format!("{name}.up"), c, c);
        let res_out = alloc.res_stack(&format!("{name}.out"), c, r);
        let skip_merge = alloc.conv(&format!("{name}.skip_merge"), 2 * c, c, 1, 1, 0);
        td.push(TdBlock {
            res_in,
            stoch,
            crop_zoom: is_lc_level(cfg, i) && matches!(cfg.variant, Variant::Lc | Variant::DeepLc),
            up,
            res_out,
            skip_merge,
        });
    }

    let ob = OutBlock {
        c1: alloc.conv("ob.c1", c, c, 3, 1, 1),
        out: alloc.conv("ob.out", c, 4, 1, 1, 0),
    };

    Arch::Hierarchical { ibs, bu, td, ob }
}

/// Levels whose bottom-up block keeps the incoming spatial size (zero-pad back).
fn is_lc_level(cfg: &ModelConfig, i: usize) -> bool {
    match cfg.variant {
        Variant::Vanilla => false,
        Variant::Lc | Variant::LeanLc => true, // n_lc = L-1; all BU blocks pad back
        Variant::DeepLc => i <= cfg.n_lc,
    }
}

fn unet_channels(base: usize, d: usize) -> usize {
    base * (1 << d.min(2))
}

fn build_unet<T: Scalar>(cfg: &ModelConfig, alloc: &mut ParamAlloc<T>) -> Arch {
    let depth = cfg.n_levels;
    let stem = alloc.conv("stem", 1, cfg.base_channels, 3, 1, 1);
    let mut levels = Vec::with_capacity(depth);
    for d in 0..depth {
        let ch = unet_channels(cfg.base_channels, d);
        let ch_next = unet_channels(cfg.base_channels, d + 1);
        levels.push(UnetLevel {
            b1: alloc.conv(&format!("enc{d}.b1"), ch, ch, 3, 1, 1),
            b2: alloc.conv(&format!("enc{d}.b2"), ch, ch, 3, 1, 1),
            down: alloc.conv(&format!("enc{d}.down"), ch, ch_next, 3, 2, 1),
            up: alloc.convt(&format!("dec{d}.up"), ch_next, ch),
            merge: alloc.conv(&format!("dec{d}.merge"), 2 * ch, ch, 1, 1, 0),
            d1: alloc.conv(&format!("dec{d}.d1"), ch, ch, 3, 1, 1),
            d2: alloc.conv(&format!("dec{d}.d2"), ch, ch, 3, 1, 1),
        });
    }
    let mid_ch = unet_channels(cfg.base_channels, depth);
    Arch::Unet {
        stem,
        levels,
        mid1: alloc.conv("mid1", mid_ch, mid_ch, 3, 1, 1),
        mid2: alloc.conv("mid2", mid_ch, mid_ch, 3, 1, 1),
        ob1: alloc.conv("ob1", cfg.base_channels, cfg.base_channels, 3, 1, 1),
        ob2: alloc.conv("ob2", cfg.base_channels, 2, 1, 1, 0),
    }
}

/// Per-level latent handles produced by a forward pass.
pub struct LatentVars<V> {
    pub mu_q: V,
    pub sigma_q: V,
    pub mu_p: V,
    pub sigma_p: V,
    pub z: V,
    pub kl: V,
}

pub struct ForwardOut<V> {
    pub mu1: V,
    pub mu2: V,
    pub logvar1: Option<V>,
    pub logvar2: Option<V>,
    /// Bottom level first. Empty for HAE and the U-Net baseline.
    pub latents: Vec<LatentVars<V>>,
}

pub fn apply_conv<T: Scalar, E: Exec<T>>(ex: &mut E, c: &Conv, x: E::V) -> E::V {
    let w = ex.param(c.w);
    let b = ex.param(c.b);
    ex.conv2d(x, w, b, c.stride, c.pad)
}

pub fn apply_convt<T: Scalar, E: Exec<T>>(ex: &mut E, c: &ConvT, x: E::V) -> E::V {
    let w = ex.param(c.w);
    let b = ex.param(c.b);
    ex.convt2x2(x, w, b)
}

pub fn apply_res<T: Scalar, E: Exec<T>>(ex: &mut E, r: &ResBlock, x: E::V) -> E::V {
    let ch = ex.shape(x)[1];
    let a = ex.elu(x);
    let a = apply_conv(ex, &r.c1, a);
    let a = ex.elu(a);
    let a = apply_conv(ex, &r.c2, a);
    let g = apply_conv(ex, &r.gate, a);
    let lin = ex.slice_c(g, 0, ch);
    let gate = ex.slice_c(g, ch, 2 * ch);
    let gate = ex.sigmoid(gate);
    let gated = ex.mul(lin, gate);
    ex.add(x, gated)
}

pub fn apply_ib<T: Scalar, E: Exec<T>>(ex: &mut E, ib: &Conv, x: E::V) -> E::V {
    let y = apply_conv(ex, ib, x);
    ex.elu(y)
}

/// One bottom-up block, without the lateral merge.
pub fn apply_bu_core<T: Scalar, E: Exec<T>>(ex: &mut E, blk: &BuBlock, x: E::V) -> E::V {
    let s_in = ex.shape(x)[2];
    let mut y = apply_conv(ex, &blk.down, x);
    for r in &blk.res {
        y = apply_res(ex, r, y);
    }
    if blk.pad_back {
        y = ex.pad_zero(y, s_in / 4);
    }
    if let Some(f) = blk.scale {
        y = ex.scale(y, T::from_f64(f));
    }
    y
}

/// Floored sigma from a raw head output: explin(min(raw, 20)) floored at e^-5.
pub fn sigma_from_raw<T: Scalar, E: Exec<T>>(ex: &mut E, raw: E::V) -> E::V {
    let clipped = ex.clip_max(raw, T::from_f64(SIGMA_RAW_MAX));
    let s = ex.sigma_explin(clipped);
    ex.max_scalar(s, T::from_f64(SIGMA_FLOOR_LN.exp()))
}

/// Analytic KL(q || p) per level: mean over batch and space of the
/// channel-summed map, emitted as a scalar node.
pub fn kl_scalar<T: Scalar, E: Exec<T>>(
    ex: &mut E,
    mu_q: E::V,
    sigma_q: E::V,
    mu_p: E::V,
    sigma_p: E::V,
) -> E::V {
    let z_ch = ex.shape(mu_q)[1];
    let ratio = ex.div(sigma_p, sigma_q);
    let log_ratio = ex.ln(ratio);
    let var_q = ex.square(sigma_q);
    let dmu = ex.sub(mu_q, mu_p);
    let dmu2 = ex.square(dmu);
    let num = ex.add(var_q, dmu2);
    let var_p2 = ex.square(sigma_p);
    let den = ex.scale(var_p2, T::from_f64(2.0));
    let frac = ex.div(num, den);
    let m = ex.add(log_ratio, frac);
    let m = ex.add_scalar(m, T::from_f64(-0.5));
    let mean = ex.mean_all(m);
    ex.scale(mean, T::from_f64(z_ch as f64))
}

pub struct HierForward<'a> {
    pub train: bool,
    pub cfg: &'a ModelConfig,
}

/// Full forward pass for HAE/HVAE and the U-Net baseline.
///
/// `primary` is `(N,1,s,s)`; `contexts[k]` is the `(N,1,s,s)` context level
/// `k`. Shapes were validated by the caller.
pub fn forward<T: Scalar, E: Exec<T>>(
    arch: &Arch,
    ctx: HierForward,
    ex: &mut E,
    primary: E::V,
    contexts: &[E::V],
) -> ForwardOut<E::V> {
    match arch {
        Arch::Unet {
            stem,
            levels,
            mid1,
            mid2,
            ob1,
            ob2,
        } => {
            let mut x = apply_ib(ex, stem, primary);
            let mut skips = Vec::with_capacity(levels.len());
            for lvl in levels {
                x = apply_conv(ex, &lvl.b1, x);
                x = ex.elu(x);
                x = apply_conv(ex, &lvl.b2, x);
                x = ex.elu(x);
                skips.push(x);
                x = apply_conv(ex, &lvl.down, x);
            }
            x = apply_conv(ex, mid1, x);
            x = ex.elu(x);
            x = apply_conv(ex, mid2, x);
            x = ex.elu(x);
            for (lvl, skip) in levels.iter().zip(skips).rev() {
                x = apply_convt(ex, &lvl.up, x);
                let cat = ex.concat_c(x, skip);
                x = apply_conv(ex, &lvl.merge, cat);
                x = apply_conv(ex, &lvl.d1, x);
                x = ex.elu(x);
                x = apply_conv(ex, &lvl.d2, x);
                x = ex.elu(x);
            }
            let y = apply_conv(ex, ob1, x);
            let y = ex.elu(y);
            let y = apply_conv(ex, ob2, y);
            ForwardOut {
                mu1: ex.slice_c(y, 0, 1),
                mu2: ex.slice_c(y, 1, 2),
                logvar1: None,
                logvar2: None,
                latents: Vec::new(),
            }
        }
        Arch::Hierarchical { ibs, bu, td, ob } => {
            let levels = bu.len();
            let mut bu_feats = Vec::with_capacity(levels + 1);
            bu_feats.push(apply_ib(ex, &ibs[0], primary));
            for (i, blk) in bu.iter().enumerate() {
                let mut y = apply_bu_core(ex, blk, bu_feats[i]);
                if let Some((ib, merge)) = &blk.lateral {
                    let c = apply_ib(ex, ib, contexts[i]);
                    let cat = ex.concat_c(y, c);
                    y = apply_conv(ex, merge, cat);
                }
                bu_feats.push(y);
            }

            // Top-down. The topmost TD block receives the last bottom-up layer.
            let mut t = if ctx.cfg.variant == Variant::LeanLc {
                let s = ex.shape(bu_feats[levels])[2] >> levels;
                ex.crop_center(bu_feats[levels], s, s)
            } else {
                bu_feats[levels]
            };
            let mut latents = Vec::new();
            for i in (1..=levels).rev() {
                let blk = &td[i - 1];
                let mut h = t;
                for r in &blk.res_in {
                    h = apply_res(ex, r, h);
                }
                t = match &blk.stoch {
                    Some(sp) => {
                        let s_h = ex.shape(h)[2];
                        let mut bu_i = bu_feats[i];
                        if ex.shape(bu_i)[2] != s_h {
                            bu_i = ex.crop_center(bu_i, s_h, s_h);
                        }
                        let cat = ex.concat_c(bu_i, h);
                        let q_in = apply_conv(ex, &sp.q_merge, cat);
                        let qp = apply_conv(ex, &sp.q_head, q_in);
                        let z_ch = ex.shape(qp)[1] / 2;
                        let mu_q = ex.slice_c(qp, 0, z_ch);
                        let raw_q = ex.slice_c(qp, z_ch, 2 * z_ch);
                        let sigma_q = sigma_from_raw(ex, raw_q);
                        let (mu_p, sigma_p) = match &sp.p_head {
                            Some(ph) => {
                                let pp = apply_conv(ex, ph, h);
                                let mu_p = ex.slice_c(pp, 0, z_ch);
                                let raw_p = ex.slice_c(pp, z_ch, 2 * z_ch);
                                (mu_p, sigma_from_raw(ex, raw_p))
                            }
                            None => {
                                let sh = ex.shape(mu_q);
                                let mu_p = ex
                                    .feed(sh, &mut || Array4::zeros((sh[0], sh[1], sh[2], sh[3])));
                                let sigma_p = ex.feed(sh, &mut || {
                                    Array4::from_elem((sh[0], sh[1], sh[2], sh[3]), T::one())
                                });
                                (mu_p, sigma_p)
                            }
                        };
                        let z = if ctx.train {
                            let eps = ex.sample_normal_like(sigma_q);
                            let noise = ex.mul(sigma_q, eps);
                            ex.add(mu_q, noise)
                        } else {
                            mu_q
                        };
                        let kl = kl_scalar(ex, mu_q, sigma_q, mu_p, sigma_p);
                        latents.push(LatentVars {
                            mu_q,
                            sigma_q,
                            mu_p,
                            sigma_p,
                            z,
                            kl,
                        });
                        let zp = apply_conv(ex, &sp.z_proj, z);
                        ex.add(h, zp)
                    }
                    None => h, // HAE: identity stochastic block
                };
                if blk.crop_zoom {
                    let s = ex.shape(t)[2];
                    t = ex.crop_center(t, s / 2, s / 2);
                }
                t = apply_convt(ex, &blk.up, t);
                for r in &blk.res_out {
                    t = apply_res(ex, r, t);
                }
                let s_t = ex.shape(t)[2];
                let mut skip = bu_feats[i - 1];
                if ex.shape(skip)[2] != s_t {
                    skip = ex.crop_center(skip, s_t, s_t);
                }
                let cat = ex.concat_c(t, skip);
                t = apply_conv(ex, &blk.skip_merge, cat);
            }
            latents.reverse();

            let y = apply_conv(ex, &ob.c1, t);
            let y = ex.elu(y);
            let y = apply_conv(ex, &ob.out, y);
            ForwardOut {
                mu1: ex.slice_c(y, 0, 1),
                mu2: ex.slice_c(y, 1, 2),
                logvar1: Some(ex.slice_c(y, 2, 3)),
                logvar2: Some(ex.slice_c(y, 3, 4)),
                latents,
            }
        }
    }
}

/// Walks the spatial sizes a forward pass would see and reports the first
/// incompatibility, if any.
pub fn check_runtime_size(cfg: &ModelConfig, size: usize) -> Result<(), String> {
    if size < 4 {
        return Err(format!("patch size {size} too small"));
    }
    match cfg.mode {
        Mode::UnetBaseline => {
            let mut s = size;
            for _ in 0..cfg.n_levels {
                if !s.is_multiple_of(2) {
                    return Err(format!("size {size}: odd spatial size {s} in encoder"));
                }
                s /= 2;
            }
            Ok(())
        }
        _ => {
            let mut s = size;
            for i in 1..=cfg.n_levels {
                if !s.is_multiple_of(2) {
                    return Err(format!("size {size}: odd spatial size {s} at level {i}"));
                }
                if is_lc_level(cfg, i) {
                    if !s.is_multiple_of(4) {
                        return Err(format!(
                            "size {size}: LC level {i} needs a multiple of 4, got {s}"
                        ));
                    }
                } else {
                    s /= 2;
                }
            }
            if cfg.variant == Variant::LeanLc
                && (!size.is_multiple_of(1 << cfg.n_levels) || size >> cfg.n_levels == 0)
            {
                return Err(format!(
                    "size {size}: lean top-down needs a multiple of {}",
                    1 << cfg.n_levels
                ));
            }
            Ok(())
        }
    }
}

/// Standard-normal sampler shared by weight init and reparameterization.
pub fn normal_array<T: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: (usize, usize, usize, usize),
    sigma: f64,
) -> Array4<T> {
    Array4::from_shape_simple_fn(shape, || T::from_f64(standard_normal(rng) * sigma))
}

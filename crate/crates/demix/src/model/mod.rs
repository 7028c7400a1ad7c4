//! Decomposition networks: vanilla HAE/HVAE, the lateral-context variants
//! (LC, lean, deep), and a U-Net baseline.
//!
//! A forward pass takes the primary patch plus its lateral-context stack and
//! yields a 4-channel prediction (two means, two pixelwise log-variances)
//! with per-level latent statistics in HVAE mode.

pub mod arch;
pub mod checkpoint;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DemixError, Result};
use crate::pyramid::LcStack;
use crate::tensor::exec::{Exec, FootprintReport, GraphExec, ShapeSim};
use crate::tensor::{Scalar, Var};

use arch::{Arch, ForwardOut, HierForward, ParamAlloc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hae,
    Hvae,
    UnetBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Lc,
    LeanLc,
    DeepLc,
}

fn default_true() -> bool {
    true
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub variant: Variant,
    /// Hierarchy depth L (BU block count for the U-Net baseline).
    pub n_levels: usize,
    /// Number of lateral-context inputs.
    #[serde(default)]
    pub n_lc: usize,
    pub patch_size: usize,
    pub base_channels: usize,
    pub res_blocks_per_block: usize,
    pub z_channels: usize,
    pub seed: u64,
    /// Divide deep-variant BU outputs by sqrt(2*i).
    #[serde(default = "default_true")]
    pub deep_bu_scale: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.patch_size;
        let l = self.n_levels;
        let err = |m: String| Err(DemixError::Config(m));
        if !h.is_power_of_two() || h < 16 {
            return err(format!("patch_size must be a power of two >= 16, got {h}"));
        }
        if l == 0 {
            return err("n_levels must be >= 1".into());
        }
        if self.base_channels == 0 {
            return err("base_channels must be >= 1".into());
        }
        match self.mode {
            Mode::UnetBaseline => {
                if !(1..=6).contains(&l) {
                    return err(format!("u-net baseline depth must be in 1..=6, got {l}"));
                }
                if self.n_lc != 0 {
                    return err("u-net baseline takes no lateral context".into());
                }
                if h < (1 << l) {
                    return err(format!("depth {l} needs patch size >= {}", 1 << l));
                }
                return Ok(());
            }
            Mode::Hvae => {
                if self.z_channels == 0 {
                    return err("z_channels must be >= 1 for HVAE".into());
                }
            }
            Mode::Hae => {}
        }
        match self.variant {
            Variant::Vanilla => {
                if self.n_lc != 0 {
                    return err(format!(
                        "vanilla takes no lateral context, got n_lc = {}",
                        self.n_lc
                    ));
                }
                if (1usize << l) > h {
                    return err(format!(
                        "a patch of size {h} yields at most {} hierarchy levels, got {l}",
                        h.trailing_zeros()
                    ));
                }
            }
            Variant::Lc | Variant::LeanLc => {
                if self.n_lc != l - 1 {
                    return err(format!(
                        "LC variants need n_lc = n_levels - 1 = {}, got {}",
                        l - 1,
                        self.n_lc
                    ));
                }
                if self.variant == Variant::LeanLc && (1usize << l) > h {
                    return err(format!(
                        "lean variant with {l} levels needs patch size >= {}",
                        1 << l
                    ));
                }
            }
            Variant::DeepLc => {
                if self.n_lc == 0 || self.n_lc >= l {
                    return err(format!(
                        "deep variant needs 1 <= n_lc < n_levels, got n_lc = {}",
                        self.n_lc
                    ));
                }
                if (1usize << (l - self.n_lc)) > h {
                    return err(format!(
                        "deep variant: {} vanilla levels exceed patch size {h}",
                        l - self.n_lc
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-level posterior/prior parameters, sample and KL contribution.
#[derive(Debug, Clone)]
pub struct LatentLevel<T> {
    pub mu_q: Array3<T>,
    pub sigma_q: Array3<T>,
    pub mu_p: Array3<T>,
    pub sigma_p: Array3<T>,
    pub z: Array3<T>,
    /// Nats: mean over batch and space of the channel-summed KL map.
    pub kl: T,
}

#[derive(Debug, Clone, Default)]
pub struct LatentState<T> {
    /// Bottom level first; empty for HAE and the U-Net baseline.
    pub levels: Vec<LatentLevel<T>>,
}

impl<T: Scalar> LatentState<T> {
    /// Smallest posterior/prior sigma over all levels, if any.
    pub fn min_sigma(&self) -> Option<T> {
        let mut m: Option<T> = None;
        for lv in &self.levels {
            for a in [&lv.sigma_q, &lv.sigma_p] {
                for &v in a.iter() {
                    m = Some(match m {
                        None => v,
                        Some(c) => c.minv(v),
                    });
                }
            }
        }
        m
    }
}

/// Channel means plus pixelwise log-variances (absent for the U-Net
/// baseline, which is deterministic and two-channel).
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub mu1: Array2<T>,
    pub mu2: Array2<T>,
    pub logvar1: Option<Array2<T>>,
    pub logvar2: Option<Array2<T>>,
}

/// Batched network input: `(N,1,s,s)` primary plus n_lc context planes.
pub struct BatchInput<T> {
    pub primary: Array4<T>,
    pub contexts: Vec<Array4<T>>,
}

impl<T: Scalar> BatchInput<T> {
    pub fn from_stacks(stacks: &[LcStack<T>]) -> Result<Self> {
        if stacks.is_empty() {
            return Err(DemixError::Shape("empty batch".into()));
        }
        let h = stacks[0].primary.nrows();
        let n_lc = stacks[0].contexts.len();
        let mut primary = Array4::<T>::zeros((stacks.len(), 1, h, h));
        let mut contexts: Vec<Array4<T>> = (0..n_lc)
            .map(|_| Array4::<T>::zeros((stacks.len(), 1, h, h)))
            .collect();
        for (n, st) in stacks.iter().enumerate() {
            if st.primary.nrows() != h || st.contexts.len() != n_lc {
                return Err(DemixError::Shape("inhomogeneous stack batch".into()));
            }
            primary
                .index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), 0)
                .assign(&st.primary);
            for (k, c) in st.contexts.iter().enumerate() {
                contexts[k]
                    .index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), 0)
                    .assign(c);
            }
        }
        Ok(BatchInput { primary, contexts })
    }
}

/// Value-level artifacts of one forward pass; the tape stays available for
/// loss composition and the backward pass.
pub struct RunArtifacts<'m, 'r, T: Scalar> {
    pub ex: GraphExec<'m, 'r, T>,
    pub out: ForwardOut<Var>,
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    values: Vec<Array4<T>>,
    arch: Arch,
}

impl<T: Scalar> Model<T> {
    /// Builds a network with deterministic seeded initialization.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut alloc = ParamAlloc::new(rng);
        let arch = arch::build_arch(&config, &mut alloc);
        Ok(Model {
            config,
            names: alloc.names,
            values: alloc.values,
            arch,
        })
    }

    /// Classic encoder-decoder baseline with `depth` BU blocks.
    pub fn build_baseline_unet(
        depth: usize,
        patch_size: usize,
        base_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        Model::build(ModelConfig {
            mode: Mode::UnetBaseline,
            variant: Variant::Vanilla,
            n_levels: depth,
            n_lc: 0,
            patch_size,
            base_channels,
            res_blocks_per_block: 1,
            z_channels: 1,
            seed,
            deep_bu_scale: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_values(&self) -> &[Array4<T>] {
        &self.values
    }

    pub fn param_values_mut(&mut self) -> &mut [Array4<T>] {
        &mut self.values
    }

    pub fn param_shapes(&self) -> Vec<[usize; 4]> {
        self.values
            .iter()
            .map(|v| {
                let s = v.shape();
                [s[0], s[1], s[2], s[3]]
            })
            .collect()
    }

    /// Total parameter element count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    fn validate_input(&self, input: &BatchInput<T>) -> Result<()> {
        let s = input.primary.shape();
        if s[1] != 1 || s[2] != s[3] {
            return Err(DemixError::Shape(format!(
                "primary must be (N,1,s,s), got {s:?}"
            )));
        }
        let expected = if self.config.mode == Mode::UnetBaseline {
            0
        } else {
            self.config.n_lc
        };
        if input.contexts.len() != expected {
            return Err(DemixError::Shape(format!(
                "model expects {expected} context inputs, got {}",
                input.contexts.len()
            )));
        }
        for c in &input.contexts {
            if c.shape() != s {
                return Err(DemixError::Shape(
                    "context shape differs from primary".into(),
                ));
            }
        }
        arch::check_runtime_size(&self.config, s[2]).map_err(DemixError::Shape)
    }

    /// Runs a forward pass on a fresh tape. `rng` switches on train-mode
    /// stochastic sampling; eval mode uses z = mu_q.
    pub fn run<'m, 'r>(
        &'m self,
        input: &BatchInput<T>,
        rng: Option<&'r mut dyn rand::RngCore>,
    ) -> Result<RunArtifacts<'m, 'r, T>> {
        self.validate_input(input)?;
        let train = rng.is_some();
        let mut ex = GraphExec::new(&self.values, rng);
        let primary = ex.feed_array(input.primary.clone());
        let contexts: Vec<Var> = input
            .contexts
            .iter()
            .map(|c| ex.feed_array(c.clone()))
            .collect();
        let out = arch::forward(
            &self.arch,
            HierForward {
                train,
                cfg: &self.config,
            },
            &mut ex,
            primary,
            &contexts,
        );
        Ok(RunArtifacts { ex, out })
    }

    /// Eval-mode forward for one stack: prediction plus latent statistics.
    pub fn forward_eval(&self, stack: &LcStack<T>) -> Result<(Prediction<T>, LatentState<T>)> {
        let input = BatchInput::from_stacks(std::slice::from_ref(stack))?;
        let run = self.run(&input, None)?;
        let g = &run.ex.graph;
        let plane = |v: Var| -> Array2<T> {
            g.value(v)
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned()
        };
        let vol = |v: Var| -> Array3<T> { g.value(v).index_axis(Axis(0), 0).to_owned() };
        let pred = Prediction {
            mu1: plane(run.out.mu1),
            mu2: plane(run.out.mu2),
            logvar1: run.out.logvar1.map(plane),
            logvar2: run.out.logvar2.map(plane),
        };
        let latents = LatentState {
            levels: run
                .out
                .latents
                .iter()
                .map(|lv| LatentLevel {
                    mu_q: vol(lv.mu_q),
                    sigma_q: vol(lv.sigma_q),
                    mu_p: vol(lv.mu_p),
                    sigma_p: vol(lv.sigma_p),
                    z: vol(lv.z),
                    kl: g.scalar_value(lv.kl),
                })
                .collect(),
        };
        Ok((pred, latents))
    }

    /// Eval-mode channel means for a batch of stacks.
    pub fn predict_means(&self, stacks: &[LcStack<T>]) -> Result<Vec<(Array2<T>, Array2<T>)>> {
        let input = BatchInput::from_stacks(stacks)?;
        let run = self.run(&input, None)?;
        let g = &run.ex.graph;
        let m1 = g.value(run.out.mu1);
        let m2 = g.value(run.out.mu2);
        Ok((0..stacks.len())
            .map(|n| {
                (
                    m1.index_axis(Axis(0), n).index_axis(Axis(0), 0).to_owned(),
                    m2.index_axis(Axis(0), n).index_axis(Axis(0), 0).to_owned(),
                )
            })
            .collect())
    }

    fn hier(
        &self,
    ) -> (
        &[arch::Conv],
        &[arch::BuBlock],
        &[arch::TdBlock],
        &arch::OutBlock,
    ) {
        match &self.arch {
            Arch::Hierarchical { ibs, bu, td, ob } => (ibs, bu, td, ob),
            Arch::Unet { .. } => panic!("hierarchical op on u-net baseline"),
        }
    }

    fn lift(plane: &Array3<T>) -> Array4<T> {
        plane.clone().insert_axis(Axis(0))
    }

    fn drop3(a: &Array4<T>) -> Array3<T> {
        a.index_axis(Axis(0), 0).to_owned()
    }

    /// Input branch at a hierarchy level: single-channel plane to
    /// base_channels feature map of the same spatial size.
    pub fn input_branch(&self, level: usize, raw: &Array2<T>) -> Result<Array3<T>> {
        let (ibs, ..) = self.hier();
        if level >= ibs.len() {
            return Err(DemixError::Config(format!(
                "no input branch at level {level}"
            )));
        }
        let mut ex = GraphExec::new(&self.values, None);
        let x = ex.feed_array(raw.clone().insert_axis(Axis(0)).insert_axis(Axis(0)));
        let y = arch::apply_ib(&mut ex, &ibs[level], x);
        Ok(Self::drop3(ex.graph.value(y)))
    }

    /// Bottom-up block at level `i` (1-based), without the lateral merge.
    pub fn bottom_up_block(&self, i: usize, features: &Array3<T>) -> Result<Array3<T>> {
        let (_, bu, ..) = self.hier();
        if i == 0 || i > bu.len() {
            return Err(DemixError::Config(format!("no BU block at level {i}")));
        }
        if !features.shape()[1].is_multiple_of(2) {
            return Err(DemixError::Shape(
                "BU block needs an even spatial size".into(),
            ));
        }
        let mut ex = GraphExec::new(&self.values, None);
        let x = ex.feed_array(Self::lift(features));
        let y = arch::apply_bu_core(&mut ex, &bu[i - 1], x);
        Ok(Self::drop3(ex.graph.value(y)))
    }

    /// Channel-concatenate then 1x1-merge a BU output with an IB output.
    pub fn merge_lateral(
        &self,
        i: usize,
        bu_out: &Array3<T>,
        ib_out: &Array3<T>,
    ) -> Result<Array3<T>> {
        let (_, bu, ..) = self.hier();
        let Some((_, merge)) = bu.get(i - 1).and_then(|b| b.lateral.as_ref()) else {
            return Err(DemixError::Config(format!(
                "level {i} has no lateral merge"
            )));
        };
        if bu_out.shape()[1..] != ib_out.shape()[1..] {
            return Err(DemixError::Shape(format!(
                "merge spatial mismatch: {:?} vs {:?}",
                &bu_out.shape()[1..],
                &ib_out.shape()[1..]
            )));
        }
        let mut ex = GraphExec::new(&self.values, None);
        let a = ex.feed_array(Self::lift(bu_out));
        let b = ex.feed_array(Self::lift(ib_out));
        let cat = ex.concat_c(a, b);
        let y = arch::apply_conv(&mut ex, merge, cat);
        Ok(Self::drop3(ex.graph.value(y)))
    }

    /// Stochastic block at level `i`: posterior from the merged (bu, td)
    /// features, prior from the td stream (standard normal at the top).
    /// HAE mode passes the td features through unchanged with zero KL.
    pub fn stochastic_block(
        &self,
        i: usize,
        bu_feat: &Array3<T>,
        td_feat: &Array3<T>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Array3<T>, Option<LatentLevel<T>>)> {
        if bu_feat.shape() != td_feat.shape() {
            return Err(DemixError::Shape(
                "stochastic block needs equal shapes".into(),
            ));
        }
        let (_, _, td, _) = self.hier();
        let Some(blk) = td.get(i - 1) else {
            return Err(DemixError::Config(format!("no level {i}")));
        };
        let Some(sp) = &blk.stoch else {
            return Ok((td_feat.clone(), None)); // HAE: identity
        };
        let train = rng.is_some();
        let mut ex = GraphExec::new(&self.values, rng);
        let bu_v = ex.feed_array(Self::lift(bu_feat));
        let td_v = ex.feed_array(Self::lift(td_feat));
        let cat = ex.concat_c(bu_v, td_v);
        let q_in = arch::apply_conv(&mut ex, &sp.q_merge, cat);
        let qp = arch::apply_conv(&mut ex, &sp.q_head, q_in);
        let z_ch = ex.shape(qp)[1] / 2;
        let mu_q = ex.slice_c(qp, 0, z_ch);
        let raw_q = ex.slice_c(qp, z_ch, 2 * z_ch);
        let sigma_q = arch::sigma_from_raw(&mut ex, raw_q);
        let (mu_p, sigma_p) = match &sp.p_head {
            Some(ph) => {
                let pp = arch::apply_conv(&mut ex, ph, td_v);
                let mu_p = ex.slice_c(pp, 0, z_ch);
                let raw_p = ex.slice_c(pp, z_ch, 2 * z_ch);
                let sigma_p = arch::sigma_from_raw(&mut ex, raw_p);
                (mu_p, sigma_p)
            }
            None => {
                let sh = ex.shape(mu_q);
                let mu_p = ex.feed_array(Array4::zeros((sh[0], sh[1], sh[2], sh[3])));
                let sigma_p =
                    ex.feed_array(Array4::from_elem((sh[0], sh[1], sh[2], sh[3]), T::one()));
                (mu_p, sigma_p)
            }
        };
        let z = if train {
            let eps = ex.sample_normal_like(sigma_q);
            let noise = ex.mul(sigma_q, eps);
            ex.add(mu_q, noise)
        } else {
            mu_q
        };
        let kl = arch::kl_scalar(&mut ex, mu_q, sigma_q, mu_p, sigma_p);
        let zp = arch::apply_conv(&mut ex, &sp.z_proj, z);
        let out = ex.add(td_v, zp);
        let g = &ex.graph;
        let level = LatentLevel {
            mu_q: Self::drop3(g.value(mu_q)),
            sigma_q: Self::drop3(g.value(sigma_q)),
            mu_p: Self::drop3(g.value(mu_p)),
            sigma_p: Self::drop3(g.value(sigma_p)),
            z: Self::drop3(g.value(z)),
            kl: g.scalar_value(kl),
        };
        Ok((Self::drop3(g.value(out)), Some(level)))
    }

    /// Full top-down block at level `i`: residual layers, stochastic block,
    /// (LC) crop-zoom, x2 upsampling, residual layers, then the skip merge.
    pub fn top_down_block(
        &self,
        i: usize,
        above: &Array3<T>,
        skip: &Array3<T>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Array3<T>> {
        let (_, _, td, _) = self.hier();
        let Some(blk) = td.get(i - 1) else {
            return Err(DemixError::Config(format!("no level {i}")));
        };
        let train = rng.is_some();
        let mut ex = GraphExec::new(&self.values, rng);
        let mut t = ex.feed_array(Self::lift(above));
        let skip_v = ex.feed_array(Self::lift(skip));
        for r in &blk.res_in {
            t = arch::apply_res(&mut ex, r, t);
        }
        if let Some(sp) = &blk.stoch {
            // within the chain the posterior reads the running stream
            let cat = ex.concat_c(t, t);
            let q_in = arch::apply_conv(&mut ex, &sp.q_merge, cat);
            let qp = arch::apply_conv(&mut ex, &sp.q_head, q_in);
            let z_ch = ex.shape(qp)[1] / 2;
            let mu_q = ex.slice_c(qp, 0, z_ch);
            let raw_q = ex.slice_c(qp, z_ch, 2 * z_ch);
            let sigma_q = arch::sigma_from_raw(&mut ex, raw_q);
            let z = if train {
                let eps = ex.sample_normal_like(sigma_q);
                let noise = ex.mul(sigma_q, eps);
                ex.add(mu_q, noise)
            } else {
                mu_q
            };
            let zp = arch::apply_conv(&mut ex, &sp.z_proj, z);
            t = ex.add(t, zp);
        }
        if blk.crop_zoom {
            let s = ex.shape(t)[2];
            t = ex.crop_center(t, s / 2, s / 2);
        }
        t = arch::apply_convt(&mut ex, &blk.up, t);
        for r in &blk.res_out {
            t = arch::apply_res(&mut ex, r, t);
        }
        let s_t = ex.shape(t)[2];
        let mut sk = skip_v;
        if ex.shape(sk)[2] < s_t {
            return Err(DemixError::Shape(format!(
                "skip smaller than TD output: {} vs {s_t}",
                ex.shape(sk)[2]
            )));
        }
        if ex.shape(sk)[2] != s_t {
            sk = ex.crop_center(sk, s_t, s_t);
        }
        let cat = ex.concat_c(t, sk);
        let y = arch::apply_conv(&mut ex, &blk.skip_merge, cat);
        Ok(Self::drop3(ex.graph.value(y)))
    }

    /// Output block: convolutional layers emitting the 4-channel prediction.
    pub fn output_block(&self, features: &Array3<T>) -> Result<Prediction<T>> {
        let (_, _, _, ob) = self.hier();
        let mut ex = GraphExec::new(&self.values, None);
        let x = ex.feed_array(Self::lift(features));
        let y = arch::apply_conv(&mut ex, &ob.c1, x);
        let y = ex.elu(y);
        let y = arch::apply_conv(&mut ex, &ob.out, y);
        let mu1 = ex.slice_c(y, 0, 1);
        let mu2 = ex.slice_c(y, 1, 2);
        let lv1 = ex.slice_c(y, 2, 3);
        let lv2 = ex.slice_c(y, 3, 4);
        let g = &ex.graph;
        Ok(Prediction {
            mu1: plane_of(g, mu1),
            mu2: plane_of(g, mu2),
            logvar1: Some(plane_of(g, lv1)),
            logvar2: Some(plane_of(g, lv2)),
        })
    }
}

fn plane_of<T: Scalar>(g: &crate::tensor::Graph<T>, v: Var) -> Array2<T> {
    g.value(v)
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .to_owned()
}

/// Counts the activations of one eval-mode forward pass at the config's
/// patch size by replaying the exact op sequence with shapes only.
/// `total_elements` sums every activation; `peak_elements` is the resident
/// high-water mark with free-after-last-use execution, which is what bounds
/// accelerator memory.
pub fn activation_footprint(config: &ModelConfig) -> Result<FootprintReport> {
    let model: Model<f32> = Model::build(config.clone())?;
    let h = config.patch_size;
    let mut sim = ShapeSim::new(model.param_shapes());
    let zero = || Array4::<f32>::zeros((1, 1, 1, 1));
    let primary = Exec::<f32>::feed(&mut sim, [1, 1, h, h], &mut { zero });
    let n_ctx = if config.mode == Mode::UnetBaseline {
        0
    } else {
        config.n_lc
    };
    let contexts: Vec<usize> = (0..n_ctx)
        .map(|_| Exec::<f32>::feed(&mut sim, [1, 1, h, h], &mut { zero }))
        .collect();
    arch::forward::<f32, _>(
        &model.arch,
        HierForward {
            train: false,
            cfg: config,
        },
        &mut sim,
        primary,
        &contexts,
    );
    Ok(sim.report())
}

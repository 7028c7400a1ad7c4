//! Executor abstraction: the model's forward pass is written once against
//! `Exec` and interpreted either with real tensors (`GraphExec`) or with
//! shapes only (`ShapeSim`, which measures activation memory).

use ndarray::Array4;
use rand::Rng;

use super::{Graph, Scalar, Var};

/// Draws a standard normal via Box-Muller. Kept local so sampled streams
/// depend only on the seeded generator, not on distribution-crate internals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub trait Exec<T: Scalar> {
    type V: Copy + std::fmt::Debug;

    /// Introduces an input activation. The closure is only called by
    /// value-carrying executors.
    fn feed(&mut self, shape: [usize; 4], make: &mut dyn FnMut() -> Array4<T>) -> Self::V;

    /// References a model parameter by index in the model's parameter list.
    fn param(&mut self, idx: usize) -> Self::V;

    /// Standard-normal noise with the shape of `like` (reparameterization).
    fn sample_normal_like(&mut self, like: Self::V) -> Self::V;

    fn shape(&self, v: Self::V) -> [usize; 4];

    fn conv2d(&mut self, x: Self::V, w: Self::V, b: Self::V, stride: usize, pad: usize) -> Self::V;
    fn convt2x2(&mut self, x: Self::V, w: Self::V, b: Self::V) -> Self::V;
    fn elu(&mut self, x: Self::V) -> Self::V;
    fn sigmoid(&mut self, x: Self::V) -> Self::V;
    fn exp(&mut self, x: Self::V) -> Self::V;
    fn ln(&mut self, x: Self::V) -> Self::V;
    fn sigma_explin(&mut self, x: Self::V) -> Self::V;
    fn clip_max(&mut self, x: Self::V, c: T) -> Self::V;
    fn max_scalar(&mut self, x: Self::V, c: T) -> Self::V;
    fn scale(&mut self, x: Self::V, c: T) -> Self::V;
    fn add_scalar(&mut self, x: Self::V, c: T) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn square(&mut self, x: Self::V) -> Self::V {
        self.mul(x, x)
    }
    fn pad_zero(&mut self, x: Self::V, margin: usize) -> Self::V;
    fn crop_center(&mut self, x: Self::V, th: usize, tw: usize) -> Self::V;
    fn concat_c(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn slice_c(&mut self, x: Self::V, start: usize, end: usize) -> Self::V;
    fn mean_all(&mut self, x: Self::V) -> Self::V;
}

/// Value-carrying executor over a fresh tape.
pub struct GraphExec<'p, 'r, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p [Array4<T>],
    pub param_vars: Vec<Option<Var>>,
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'p, 'r, T: Scalar> GraphExec<'p, 'r, T> {
    pub fn new(params: &'p [Array4<T>], rng: Option<&'r mut dyn rand::RngCore>) -> Self {
        GraphExec {
            graph: Graph::new(),
            param_vars: vec![None; params.len()],
            params,
            rng,
        }
    }

    pub fn feed_array(&mut self, a: Array4<T>) -> Var {
        self.graph.input(a)
    }
}

impl<'p, 'r, T: Scalar> Exec<T> for GraphExec<'p, 'r, T> {
    type V = Var;

    fn feed(&mut self, _shape: [usize; 4], make: &mut dyn FnMut() -> Array4<T>) -> Var {
        self.graph.input(make())
    }

    fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.graph.input(self.params[idx].clone());
        self.param_vars[idx] = Some(v);
        v
    }

    fn sample_normal_like(&mut self, like: Var) -> Var {
        let shape = self.graph.shape(like);
        let rng = self
            .rng
            .as_deref_mut()
            .expect("train-mode forward needs a sampler");
        let eps = Array4::from_shape_simple_fn((shape[0], shape[1], shape[2], shape[3]), || {
            T::from_f64(standard_normal(rng))
        });
        self.graph.input(eps)
    }

    fn shape(&self, v: Var) -> [usize; 4] {
        self.graph.shape(v)
    }

    fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        self.graph.conv2d(x, w, b, stride, pad)
    }
    fn convt2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.graph.convt2x2(x, w, b)
    }
    fn elu(&mut self, x: Var) -> Var {
        self.graph.elu(x)
    }
    fn sigmoid(&mut self, x: Var) -> Var {
        self.graph.sigmoid(x)
    }
    fn exp(&mut self, x: Var) -> Var {
        self.graph.exp(x)
    }
    fn ln(&mut self, x: Var) -> Var {
        self.graph.ln(x)
    }
    fn sigma_explin(&mut self, x: Var) -> Var {
        self.graph.sigma_explin(x)
    }
    fn clip_max(&mut self, x: Var, c: T) -> Var {
        self.graph.clip_max(x, c)
    }
    fn max_scalar(&mut self, x: Var, c: T) -> Var {
        self.graph.max_scalar(x, c)
    }
    fn scale(&mut self, x: Var, c: T) -> Var {
        self.graph.scale(x, c)
    }
    fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.graph.add_scalar(x, c)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.graph.add(a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.graph.sub(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.graph.mul(a, b)
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        self.graph.div(a, b)
    }
    fn pad_zero(&mut self, x: Var, margin: usize) -> Var {
        self.graph.pad_zero(x, margin)
    }
    fn crop_center(&mut self, x: Var, th: usize, tw: usize) -> Var {
        self.graph.crop_center(x, th, tw)
    }
    fn concat_c(&mut self, a: Var, b: Var) -> Var {
        self.graph.concat_c(a, b)
    }
    fn slice_c(&mut self, x: Var, start: usize, end: usize) -> Var {
        self.graph.slice_c(x, start, end)
    }
    fn mean_all(&mut self, x: Var) -> Var {
        self.graph.mean_all(x)
    }
}

#[derive(Debug, Clone, Copy)]
struct SimNode {
    shape: [usize; 4],
    is_activation: bool,
}

/// Shape-only executor. Records every activation a forward pass would
/// allocate, then computes totals and the peak resident set assuming each
/// tensor is freed after its last use (inference-style execution).
pub struct ShapeSim {
    nodes: Vec<SimNode>,
    edges: Vec<Vec<usize>>, // parents per node
    param_shapes: Vec<[usize; 4]>,
    param_ids: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootprintReport {
    /// Sum of all activation elements produced by one forward pass.
    pub total_elements: usize,
    /// Peak simultaneously-resident activation elements.
    pub peak_elements: usize,
}

impl ShapeSim {
    pub fn new(param_shapes: Vec<[usize; 4]>) -> Self {
        ShapeSim {
            nodes: Vec::new(),
            edges: Vec::new(),
            param_ids: vec![None; param_shapes.len()],
            param_shapes,
        }
    }

    fn push(&mut self, shape: [usize; 4], parents: Vec<usize>, is_activation: bool) -> usize {
        self.nodes.push(SimNode {
            shape,
            is_activation,
        });
        self.edges.push(parents);
        self.nodes.len() - 1
    }

    pub fn report(&self) -> FootprintReport {
        let n = self.nodes.len();
        let elems = |i: usize| -> usize { self.nodes[i].shape.iter().product() };
        let mut last_use = vec![usize::MAX; n];
        for (i, ps) in self.edges.iter().enumerate() {
            for &p in ps {
                last_use[p] = i;
            }
        }
        let mut total = 0usize;
        let mut live = 0usize;
        let mut peak = 0usize;
        for i in 0..n {
            if self.nodes[i].is_activation {
                total += elems(i);
                live += elems(i);
                peak = peak.max(live);
            }
            for (k, &p) in self.edges[i].iter().enumerate() {
                let first_mention = !self.edges[i][..k].contains(&p);
                if first_mention && self.nodes[p].is_activation && last_use[p] == i {
                    live -= elems(p);
                }
            }
        }
        FootprintReport {
            total_elements: total,
            peak_elements: peak,
        }
    }
}

impl<T: Scalar> Exec<T> for ShapeSim {
    type V = usize;

    fn feed(&mut self, shape: [usize; 4], _make: &mut dyn FnMut() -> Array4<T>) -> usize {
        self.push(shape, vec![], true)
    }

    fn param(&mut self, idx: usize) -> usize {
        if let Some(id) = self.param_ids[idx] {
            return id;
        }
        let id = self.push(self.param_shapes[idx], vec![], false);
        self.param_ids[idx] = Some(id);
        id
    }

    fn sample_normal_like(&mut self, like: usize) -> usize {
        let sh = self.nodes[like].shape;
        self.push(sh, vec![], true)
    }

    fn shape(&self, v: usize) -> [usize; 4] {
        self.nodes[v].shape
    }

    fn conv2d(&mut self, x: usize, w: usize, b: usize, stride: usize, pad: usize) -> usize {
        let [n, _, h, wd] = self.nodes[x].shape;
        let [co, _, k, _] = self.nodes[w].shape;
        let ho = super::conv::conv_out_size(h, k, stride, pad);
        let wo = super::conv::conv_out_size(wd, k, stride, pad);
        self.push([n, co, ho, wo], vec![x, w, b], true)
    }

    fn convt2x2(&mut self, x: usize, w: usize, b: usize) -> usize {
        let [n, _, h, wd] = self.nodes[x].shape;
        let co = self.nodes[w].shape[1];
        self.push([n, co, 2 * h, 2 * wd], vec![x, w, b], true)
    }

    fn elu(&mut self, x: usize) -> usize {
        self.unary(x)
    }
    fn sigmoid(&mut self, x: usize) -> usize {
        self.unary(x)
    }
    fn exp(&mut self, x: usize) -> usize {
        self.unary(x)
    }
    fn ln(&mut self, x: usize) -> usize {
        self.unary(x)
    }
    fn sigma_explin(&mut self, x: usize) -> usize {
        self.unary(x)
    }
    fn clip_max(&mut self, x: usize, _c: T) -> usize {
        self.unary(x)
    }
    fn max_scalar(&mut self, x: usize, _c: T) -> usize {
        self.unary(x)
    }
    fn scale(&mut self, x: usize, _c: T) -> usize {
        self.unary(x)
    }
    fn add_scalar(&mut self, x: usize, _c: T) -> usize {
        self.unary(x)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        self.binary(a, b)
    }
    fn sub(&mut self, a: usize, b: usize) -> usize {
        self.binary(a, b)
    }
    fn mul(&mut self, a: usize, b: usize) -> usize {
        self.binary(a, b)
    }
    fn div(&mut self, a: usize, b: usize) -> usize {
        self.binary(a, b)
    }

    fn pad_zero(&mut self, x: usize, margin: usize) -> usize {
        let [n, c, h, w] = self.nodes[x].shape;
        self.push([n, c, h + 2 * margin, w + 2 * margin], vec![x], true)
    }

    fn crop_center(&mut self, x: usize, th: usize, tw: usize) -> usize {
        let [n, c, _, _] = self.nodes[x].shape;
        self.push([n, c, th, tw], vec![x], true)
    }

    fn concat_c(&mut self, a: usize, b: usize) -> usize {
        let [n, ca, h, w] = self.nodes[a].shape;
        let cb = self.nodes[b].shape[1];
        self.push([n, ca + cb, h, w], vec![a, b], true)
    }

    fn slice_c(&mut self, x: usize, start: usize, end: usize) -> usize {
        let [n, _, h, w] = self.nodes[x].shape;
        self.push([n, end - start, h, w], vec![x], true)
    }

    fn mean_all(&mut self, x: usize) -> usize {
        self.push([1, 1, 1, 1], vec![x], true)
    }
}

impl ShapeSim {
    fn unary(&mut self, x: usize) -> usize {
        let sh = self.nodes[x].shape;
        self.push(sh, vec![x], true)
    }
    fn binary(&mut self, a: usize, b: usize) -> usize {
        let sh = self.nodes[a].shape;
        self.push(sh, vec![a, b], true)
    }
}

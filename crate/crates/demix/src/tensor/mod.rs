//! A small reverse-mode autodiff engine over `(N, C, H, W)` tensors.
//!
//! The networks here need a fixed, known op set (convolutions, ELU, gating,
//! pads/crops/concats for lateral context, and the Gaussian-loss algebra),
//! exact 64-bit gradients for finite-difference verification, and
//! bit-reproducible runs. A tape of eagerly evaluated nodes over `ndarray`
//! keeps all of that under direct control.
//!
//! Nodes are appended in topological order; `backward` walks the tape in
//! reverse. Any parallelism is per-batch-item with order-stable reductions,
//! so repeated runs are bit-identical.

pub mod conv;
pub mod exec;

use ndarray::{s, Array4};

/// Element type of the engine: f32 for training, f64 for gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    Elu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    SigmaExpLin(Var),
    ClipMax(Var, T),
    MaxScalar(Var, T),
    Scale(Var, T),
    AddScalar(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    PadZero(Var, usize),
    CropCenter(Var, usize, usize),
    ConcatC(Var, Var),
    SliceC(Var, usize, usize),
    MeanAll(Var),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Array4<T>,
}

/// Eager tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Array4<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        let s = self.nodes[v.0].value.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Value of a `(1,1,1,1)` node.
    pub fn scalar_value(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        a[[0, 0, 0, 0]]
    }

    pub fn input(&mut self, value: Array4<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = conv::conv2d_fwd(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            y,
        )
    }

    pub fn convt2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = conv::convt2x2_fwd(self.value(x), self.value(w), self.value(b));
        self.push(Op::ConvT2x2 { x, w, b }, y)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .mapv(|v| if v > T::zero() { v } else { v.exp() - T::one() });
        self.push(Op::Elu(x), y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .mapv(|v| T::one() / (T::one() + (T::zero() - v).exp()));
        self.push(Op::Sigmoid(x), y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.exp());
        self.push(Op::Exp(x), y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.ln());
        self.push(Op::Ln(x), y)
    }

    /// exp(t) for t <= 0, t + 1 for t > 0. Continuous with continuous slope.
    pub fn sigma_explin(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .mapv(|v| if v > T::zero() { v + T::one() } else { v.exp() });
        self.push(Op::SigmaExpLin(x), y)
    }

    pub fn clip_max(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v.minv(c));
        self.push(Op::ClipMax(x, c), y)
    }

    pub fn max_scalar(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v.maxv(c));
        self.push(Op::MaxScalar(x, c), y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v * c);
        self.push(Op::Scale(x, c), y)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).mapv(|v| v + c);
        self.push(Op::AddScalar(x, c), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array4<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        out
    }

    /// Symmetric spatial zero padding by `margin` on each side.
    pub fn pad_zero(&mut self, x: Var, margin: usize) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v);
        let mut y = Array4::<T>::zeros((n, c, h + 2 * margin, w + 2 * margin));
        y.slice_mut(s![.., .., margin..margin + h, margin..margin + w])
            .assign(v);
        self.push(Op::PadZero(x, margin), y)
    }

    /// Centered spatial crop to `(th, tw)`.
    pub fn crop_center(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let v = self.value(x);
        let (_, _, h, w) = dims4(v);
        assert!(th <= h && tw <= w, "crop larger than input");
        let (oi, oj) = ((h - th) / 2, (w - tw) / 2);
        let y = v.slice(s![.., .., oi..oi + th, oj..oj + tw]).to_owned();
        self.push(Op::CropCenter(x, th, tw), y)
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = dims4(va);
        let cb = vb.shape()[1];
        assert_eq!(
            &va.shape()[2..],
            &vb.shape()[2..],
            "concat spatial mismatch"
        );
        let mut y = Array4::<T>::zeros((n, ca + cb, h, w));
        y.slice_mut(s![.., ..ca, .., ..]).assign(va);
        y.slice_mut(s![.., ca.., .., ..]).assign(vb);
        self.push(Op::ConcatC(a, b), y)
    }

    pub fn slice_c(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![.., start..end, .., ..]).to_owned();
        self.push(Op::SliceC(x, start, end), y)
    }

    /// Mean over every element, as a `(1,1,1,1)` node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.len() as f64);
        let m = v.sum() / n;
        let y = Array4::from_elem((1, 1, 1, 1), m);
        self.push(Op::MeanAll(x), y)
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[out.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array4::from_elem((1, 1, 1, 1), T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) =
                        conv::conv2d_bwd(self.value(*x), self.value(*w), &dy, *stride, *pad);
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[w.0], dw);
                    acc(&mut grads[b.0], db);
                }
                Op::ConvT2x2 { x, w, b } => {
                    let (dx, dw, db) = conv::convt2x2_bwd(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[w.0], dw);
                    acc(&mut grads[b.0], db);
                }
                Op::Elu(x) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &yv| {
                        if yv <= T::zero() {
                            *d = *d * (yv + T::one());
                        }
                    });
                    acc(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &yv| *d = *d * yv * (T::one() - yv));
                    acc(&mut grads[x.0], dx);
                }
                Op::Exp(x) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &yv| *d = *d * yv);
                    acc(&mut grads[x.0], dx);
                }
                Op::Ln(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    dx.zip_mut_with(xv, |d, &v| *d = *d / v);
                    acc(&mut grads[x.0], dx);
                }
                Op::SigmaExpLin(x) => {
                    // slope is exp(t) = y below zero, 1 above; both are y.min(1)
                    let y = &self.nodes[idx].value;
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &yv| *d = *d * yv.minv(T::one()));
                    acc(&mut grads[x.0], dx);
                }
                Op::ClipMax(x, c) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    dx.zip_mut_with(xv, |d, &v| {
                        if v > *c {
                            *d = T::zero();
                        }
                    });
                    acc(&mut grads[x.0], dx);
                }
                Op::MaxScalar(x, c) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    dx.zip_mut_with(xv, |d, &v| {
                        if v < *c {
                            *d = T::zero();
                        }
                    });
                    acc(&mut grads[x.0], dx);
                }
                Op::Scale(x, c) => {
                    let dx = dy.mapv(|d| d * *c);
                    acc(&mut grads[x.0], dx);
                }
                Op::AddScalar(x, _) => {
                    acc(&mut grads[x.0], dy);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], dy.clone());
                    acc(&mut grads[b.0], dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[a.0], dy.clone());
                    acc(&mut grads[b.0], dy.mapv(|d| T::zero() - d));
                }
                Op::Mul(a, b) => {
                    let mut da = dy.clone();
                    da.zip_mut_with(self.value(*b), |d, &v| *d = *d * v);
                    let mut db = dy;
                    db.zip_mut_with(self.value(*a), |d, &v| *d = *d * v);
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let mut da = dy.clone();
                    da.zip_mut_with(bv, |d, &v| *d = *d / v);
                    let mut db = dy;
                    {
                        let av = self.value(*a);
                        ndarray::Zip::from(&mut db)
                            .and(av)
                            .and(bv)
                            .for_each(|d, &x, &y| {
                                *d = T::zero() - *d * x / (y * y);
                            });
                    }
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::PadZero(x, m) => {
                    let [_, _, h, w] = self.shape(*x);
                    let dx = dy.slice(s![.., .., *m..*m + h, *m..*m + w]).to_owned();
                    acc(&mut grads[x.0], dx);
                }
                Op::CropCenter(x, th, tw) => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = dims4(xv);
                    let (oi, oj) = ((h - th) / 2, (w - tw) / 2);
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    dx.slice_mut(s![.., .., oi..oi + *th, oj..oj + *tw])
                        .assign(&dy);
                    acc(&mut grads[x.0], dx);
                }
                Op::ConcatC(a, b) => {
                    let ca = self.shape(*a)[1];
                    let da = dy.slice(s![.., ..ca, .., ..]).to_owned();
                    let db = dy.slice(s![.., ca.., .., ..]).to_owned();
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::SliceC(x, start, end) => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = dims4(xv);
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    dx.slice_mut(s![.., *start..*end, .., ..]).assign(&dy);
                    acc(&mut grads[x.0], dx);
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let g = dy[[0, 0, 0, 0]] / T::from_f64(xv.len() as f64);
                    let dx = Array4::from_elem(xv.raw_dim(), g);
                    acc(&mut grads[x.0], dx);
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass; indexed by the `Var`s of the source graph.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array4<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array4<T>> {
        self.grads[v.0].take()
    }
}

fn acc<T: Scalar>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
    match slot {
        None => *slot = Some(g),
        Some(s) => s.zip_mut_with(&g, |a, &b| *a = *a + b),
    }
}

fn dims4<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

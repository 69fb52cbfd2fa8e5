//! A small reverse-mode autodiff engine over `ndarray`, generic over the
//! element type so training runs in f32 while gradient checks run in f64.
//!
//! Tensors form a DAG; each op node stores its parents and a backward
//! closure. Node ids are allocated in creation order, so iterating ids in
//! descending order is a valid reverse topological order.

mod conv;

pub use conv::{col2im, im2col};

use ndarray::{ArrayD, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + Debug + Display + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("scalar conversion")
    }
    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>)>;

struct Node<F: Scalar> {
    id: u64,
    value: RefCell<ArrayD<F>>,
    grad: RefCell<Option<ArrayD<F>>>,
    requires_grad: bool,
    track: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// A reference-counted autodiff tensor. Cloning is cheap and shares the node.
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<F: Scalar> Tensor<F> {
    /// Trainable leaf. Gradients accumulate here across backward passes
    /// until `zero_grad`.
    pub fn param(value: ArrayD<F>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: true,
            track: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Non-trainable leaf; gradients do not flow through it.
    pub fn constant(value: ArrayD<F>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: false,
            track: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn op(value: ArrayD<F>, parents: Vec<Tensor<F>>, backward: BackwardFn<F>) -> Self {
        let track = parents.iter().any(|p| p.0.track);
        Tensor(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: false,
            track,
            parents,
            backward: if track { Some(backward) } else { None },
        }))
    }

    pub fn value(&self) -> ArrayD<F> {
        self.0.value.borrow().clone()
    }

    /// Overwrite a leaf's value in place (parameter updates).
    pub fn set_value(&self, value: ArrayD<F>) {
        assert_eq!(
            self.0.value.borrow().shape(),
            value.shape(),
            "set_value must preserve shape"
        );
        *self.0.value.borrow_mut() = value;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        v.iter().next().unwrap().as_f64()
    }

    fn accum(&self, g: &ArrayD<F>) {
        if !self.0.track {
            return;
        }
        let mut gr = self.0.grad.borrow_mut();
        match gr.as_mut() {
            Some(a) => *a = &*a + g,
            None => *gr = Some(g.clone()),
        }
    }

    /// Reverse pass from this tensor, seeded with ones.
    pub fn backward(&self) {
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.0.track || !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        let seed = ArrayD::ones(self.0.value.borrow().raw_dim());
        self.accum(&seed);
        for n in &order {
            if let Some(f) = &n.0.backward {
                let g = n.0.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g);
                }
            }
        }
    }

    /// Value copy with the graph cut (stop-gradient).
    pub fn detach(&self) -> Tensor<F> {
        Tensor::constant(self.value())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), other.clone());
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let v = &*self.0.value.borrow() + &*other.0.value.borrow();
        Tensor::op(
            v,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                a.accum(g);
                b.accum(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), other.clone());
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let v = &*self.0.value.borrow() - &*other.0.value.borrow();
        Tensor::op(
            v,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                a.accum(g);
                b.accum(&g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), other.clone());
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let av = self.value();
        let bv = other.value();
        let v = &av * &bv;
        Tensor::op(
            v,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                a.accum(&(g * &bv));
                b.accum(&(g * &av));
            }),
        )
    }

    /// Elementwise multiply by a constant array of the same shape.
    pub fn mul_const(&self, c: &ArrayD<F>) -> Tensor<F> {
        assert_eq!(self.shape(), c.shape().to_vec(), "mul_const shape mismatch");
        let a = self.clone();
        let c = c.clone();
        let v = &*self.0.value.borrow() * &c;
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| a.accum(&(g * &c))),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor<F> {
        let a = self.clone();
        let sf = F::of_f64(s);
        let v = self.0.value.borrow().mapv(|x| x * sf);
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| a.accum(&g.mapv(|x| x * sf))),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<F> {
        let a = self.clone();
        let sf = F::of_f64(s);
        let v = self.0.value.borrow().mapv(|x| x + sf);
        Tensor::op(v, vec![a.clone()], Box::new(move |g| a.accum(g)))
    }

    pub fn square(&self) -> Tensor<F> {
        self.mul(self)
    }

    pub fn abs(&self) -> Tensor<F> {
        let a = self.clone();
        let av = self.value();
        let v = av.mapv(|x| x.abs());
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let sign = av.mapv(|x| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                });
                a.accum(&(g * &sign));
            }),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let a = self.clone();
        let v = self.0.value.borrow().mapv(|x| x.exp());
        let out = v.clone();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| a.accum(&(g * &out))),
        )
    }

    pub fn ln(&self) -> Tensor<F> {
        let a = self.clone();
        let av = self.value();
        let v = av.mapv(|x| x.ln());
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| a.accum(&(g / &av))),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let a = self.clone();
        let v = self.0.value.borrow().mapv(sigmoid_scalar);
        let out = v.clone();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let d = out.mapv(|s| s * (F::one() - s));
                a.accum(&(g * &d));
            }),
        )
    }

    /// ln(1 + e^x), computed stably.
    pub fn softplus(&self) -> Tensor<F> {
        let a = self.clone();
        let av = self.value();
        let v = av.mapv(softplus_scalar);
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let d = av.mapv(sigmoid_scalar);
                a.accum(&(g * &d));
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<F> {
        let a = self.clone();
        let av = self.value();
        let sf = F::of_f64(slope);
        let v = av.mapv(|x| if x > F::zero() { x } else { x * sf });
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let d = av.mapv(|x| if x > F::zero() { F::one() } else { sf });
                a.accum(&(g * &d));
            }),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.leaky_relu(0.0)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<F> {
        let a = self.clone();
        let shape = self.0.value.borrow().raw_dim();
        let s = self.0.value.borrow().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                a.accum(&ArrayD::from_elem(shape.clone(), gs));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.0.value.borrow().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let a = self.clone();
        let old = self.0.value.borrow().raw_dim();
        let v = self
            .0
            .value
            .borrow()
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible size");
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let gr = g.clone().into_shape(old.clone()).unwrap();
                a.accum(&gr);
            }),
        )
    }

    pub fn transpose_axes(&self, perm: &[usize]) -> Tensor<F> {
        let a = self.clone();
        let perm_v = perm.to_vec();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let v = self
            .0
            .value
            .borrow()
            .clone()
            .permuted_axes(IxDyn(&perm_v))
            .as_standard_layout()
            .to_owned();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let gr = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                a.accum(&gr);
            }),
        )
    }

    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty());
        let values: Vec<ArrayD<F>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let parents: Vec<Tensor<F>> = parts.to_vec();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let parents_c = parents.clone();
        Tensor::op(
            v,
            parents,
            Box::new(move |g| {
                let mut start = 0;
                for (p, &sz) in parents_c.iter().zip(&sizes) {
                    let gs = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz as isize))
                        .to_owned();
                    p.accum(&gs);
                    start += sz as isize;
                }
            }),
        )
    }

    pub fn slice_axis_op(&self, axis: usize, from: usize, to: usize) -> Tensor<F> {
        let a = self.clone();
        let full = self.0.value.borrow().raw_dim();
        let v = self
            .0
            .value
            .borrow()
            .slice_axis(Axis(axis), ndarray::Slice::from(from as isize..to as isize))
            .to_owned();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let mut gp = ArrayD::zeros(full.clone());
                gp.slice_axis_mut(
                    Axis(axis),
                    ndarray::Slice::from(from as isize..to as isize),
                )
                .assign(g);
                a.accum(&gp);
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-d matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), other.clone());
        let av = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = other.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        Tensor::op(
            v,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                a.accum(&g2.dot(&bv.t()).into_dyn());
                b.accum(&av.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Batched matmul over the leading axis: (B,M,K) x (B,K,N) -> (B,M,N).
    pub fn bmm(&self, other: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), other.clone());
        let av = self.value().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = other.value().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (bn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bn, bv.shape()[0], "bmm batch mismatch");
        assert_eq!(k, bv.shape()[1], "bmm inner dim mismatch");
        let n = bv.shape()[2];
        let mut out = ndarray::Array3::<F>::zeros((bn, m, n));
        for i in 0..bn {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        Tensor::op(
            out.into_dyn(),
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let g3 = g.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut ga = ndarray::Array3::<F>::zeros(av.raw_dim());
                let mut gb = ndarray::Array3::<F>::zeros(bv.raw_dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                a.accum(&ga.into_dyn());
                b.accum(&gb.into_dyn());
            }),
        )
    }

    /// Add a bias vector to every row of a 2-d tensor.
    pub fn add_bias_rows(&self, bias: &Tensor<F>) -> Tensor<F> {
        let (a, b) = (self.clone(), bias.clone());
        let av = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = bias.value().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(av.shape()[1], bv.len(), "bias length mismatch");
        let v = (&av + &bv).into_dyn();
        Tensor::op(
            v,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                a.accum(g);
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                b.accum(&g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    // ---- softmax family (last axis) ----

    pub fn softmax_last(&self) -> Tensor<F> {
        let a = self.clone();
        let v = softmax_last_array(&self.0.value.borrow());
        let out = v.clone();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let axis = Axis(out.ndim() - 1);
                let dot = (g * &out).sum_axis(axis).insert_axis(axis);
                let gx = &out * &(g - &dot);
                a.accum(&gx);
            }),
        )
    }

    pub fn log_softmax_last(&self) -> Tensor<F> {
        let a = self.clone();
        let x = self.value();
        let axis = Axis(x.ndim() - 1);
        let max = x.map_axis(axis, |row| {
            row.iter().cloned().fold(F::neg_infinity(), F::max)
        });
        let maxb = max.insert_axis(axis);
        let shifted = &x - &maxb;
        let lse = shifted
            .mapv(|v| v.exp())
            .sum_axis(axis)
            .mapv(|v| v.ln())
            .insert_axis(axis);
        let v = &shifted - &lse;
        let out = v.clone();
        Tensor::op(
            v,
            vec![a.clone()],
            Box::new(move |g| {
                let axis = Axis(out.ndim() - 1);
                let gsum = g.sum_axis(axis).insert_axis(axis);
                let gx = g - &(out.mapv(|v| v.exp()) * &gsum);
                a.accum(&gx);
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: f64) -> Tensor<F> {
        let (a, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        let x = self.value();
        let axis = Axis(x.ndim() - 1);
        let d = x.shape()[x.ndim() - 1];
        let epsf = F::of_f64(eps);
        let mean = x.mean_axis(axis).unwrap().insert_axis(axis);
        let centered = &x - &mean;
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(axis)
            .unwrap()
            .insert_axis(axis);
        let inv_std = var.mapv(|v| F::one() / (v + epsf).sqrt());
        let xhat = &centered * &inv_std;
        let gv = gain.value();
        let bv = bias.value();
        assert_eq!(gv.len(), d, "layer_norm gain length");
        let v = &xhat * &gv + &bv;
        let xhat_c = xhat.clone();
        let inv_std_c = inv_std.clone();
        let gv_c = gv.clone();
        Tensor::op(
            v,
            vec![a.clone(), gn.clone(), bs.clone()],
            Box::new(move |g| {
                let axis = Axis(g.ndim() - 1);
                let d_f = F::of_f64(d as f64);
                let gy_gamma = g * &gv_c;
                let m1 = gy_gamma
                    .sum_axis(axis)
                    .insert_axis(axis)
                    .mapv(|v| v / d_f);
                let m2 = (&gy_gamma * &xhat_c)
                    .sum_axis(axis)
                    .insert_axis(axis)
                    .mapv(|v| v / d_f);
                let gx = (&gy_gamma - &m1 - &(&xhat_c * &m2)) * &inv_std_c;
                a.accum(&gx);
                // reduce over all leading axes
                let mut gg = (g * &xhat_c).into_dyn();
                let mut gb = g.clone();
                while gg.ndim() > 1 {
                    gg = gg.sum_axis(Axis(0));
                    gb = gb.sum_axis(Axis(0));
                }
                gn.accum(&gg);
                bs.accum(&gb);
            }),
        )
    }

    // ---- indexing ----

    /// Select rows of a 2-d tensor; rows may repeat (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<F> {
        let a = self.clone();
        let av = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let idx = indices.to_vec();
        for &i in &idx {
            assert!(i < rows, "gather_rows index out of range");
        }
        let mut v = ndarray::Array2::<F>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        Tensor::op(
            v.into_dyn(),
            vec![a.clone()],
            Box::new(move |g| {
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gp = ndarray::Array2::<F>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    gp.row_mut(i).zip_mut_with(&g2.row(r), |a, &b| *a = *a + b);
                }
                a.accum(&gp.into_dyn());
            }),
        )
    }

    /// Pick one element per row of a 2-d tensor: out[r] = self[r, idx[r]].
    pub fn select_per_row(&self, indices: &[usize]) -> Tensor<F> {
        let a = self.clone();
        let av = self.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        assert_eq!(rows, indices.len(), "select_per_row length mismatch");
        let idx = indices.to_vec();
        let mut v = ndarray::Array1::<F>::zeros(rows);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < cols, "select_per_row index out of range");
            v[r] = av[(r, i)];
        }
        Tensor::op(
            v.into_dyn(),
            vec![a.clone()],
            Box::new(move |g| {
                let g1 = g.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut gp = ndarray::Array2::<F>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    gp[(r, i)] = g1[r];
                }
                a.accum(&gp.into_dyn());
            }),
        )
    }

    // ---- convolution / resampling ----

    /// 2-d convolution, NCHW layout, zero padding.
    pub fn conv2d(&self, weight: &Tensor<F>, bias: &Tensor<F>, stride: usize, pad: usize) -> Tensor<F> {
        let (a, w, b) = (self.clone(), weight.clone(), bias.clone());
        let x = self.value().into_dimensionality::<ndarray::Ix4>().unwrap();
        let wv = weight.value().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = bias.value().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d bias mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let w2 = wv
            .clone()
            .into_shape((cout, cin * kh * kw))
            .unwrap();
        let mut out = ndarray::Array4::<F>::zeros((bn, cout, oh, ow));
        let mut cols = Vec::with_capacity(bn);
        for i in 0..bn {
            let col = im2col(&x.index_axis(Axis(0), i).to_owned(), kh, kw, stride, pad);
            let o = w2.dot(&col); // (cout, oh*ow)
            let mut ob = out.index_axis_mut(Axis(0), i);
            for c in 0..cout {
                let bias_c = bv[c];
                let mut plane = ob.index_axis_mut(Axis(0), c);
                let row = o.row(c);
                for (p, val) in plane.iter_mut().zip(row.iter()) {
                    *p = *val + bias_c;
                }
            }
            cols.push(col);
        }
        Tensor::op(
            out.into_dyn(),
            vec![a.clone(), w.clone(), b.clone()],
            Box::new(move |g| {
                let g4 = g.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gw = ndarray::Array2::<F>::zeros((cout, cin * kh * kw));
                let mut gb = ndarray::Array1::<F>::zeros(cout);
                let mut gx = ndarray::Array4::<F>::zeros((bn, cin, h, wd));
                for i in 0..bn {
                    let gi = g4
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape((cout, oh * ow))
                        .unwrap();
                    gw = gw + gi.dot(&cols[i].t());
                    gb = gb + gi.sum_axis(Axis(1));
                    let gcol = w2.t().dot(&gi); // (cin*kh*kw, oh*ow)
                    let gxi = col2im(&gcol, cin, h, wd, kh, kw, stride, pad);
                    gx.index_axis_mut(Axis(0), i).assign(&gxi);
                }
                a.accum(&gx.into_dyn());
                w.accum(&gw.into_shape((cout, cin, kh, kw)).unwrap().into_dyn());
                b.accum(&gb.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of an NCHW tensor.
    pub fn upsample_nearest2x(&self) -> Tensor<F> {
        let a = self.clone();
        let x = self.value().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = ndarray::Array4::<F>::zeros((bn, c, h * 2, w * 2));
        for i in 0..bn {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[(i, ch, y, xx)];
                        out[(i, ch, 2 * y, 2 * xx)] = v;
                        out[(i, ch, 2 * y + 1, 2 * xx)] = v;
                        out[(i, ch, 2 * y, 2 * xx + 1)] = v;
                        out[(i, ch, 2 * y + 1, 2 * xx + 1)] = v;
                    }
                }
            }
        }
        Tensor::op(
            out.into_dyn(),
            vec![a.clone()],
            Box::new(move |g| {
                let g4 = g.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = ndarray::Array4::<F>::zeros((bn, c, h, w));
                for i in 0..bn {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[(i, ch, y, xx)] = g4[(i, ch, 2 * y, 2 * xx)]
                                    + g4[(i, ch, 2 * y + 1, 2 * xx)]
                                    + g4[(i, ch, 2 * y, 2 * xx + 1)]
                                    + g4[(i, ch, 2 * y + 1, 2 * xx + 1)];
                            }
                        }
                    }
                }
                a.accum(&gx.into_dyn());
            }),
        )
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus_scalar<F: Scalar>(x: F) -> F {
    let hi = F::of_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

/// Row-stable softmax over the last axis of an array.
pub fn softmax_last_array<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    let axis = Axis(x.ndim() - 1);
    let max = x
        .map_axis(axis, |row| row.iter().cloned().fold(F::neg_infinity(), F::max))
        .insert_axis(axis);
    let e = (x - &max).mapv(|v| v.exp());
    let s = e.sum_axis(axis).insert_axis(axis);
    &e / &s
}

//! Layers and parametric models. Parameters are persistent leaf tensors;
//! each forward pass builds a fresh graph over them.

mod models;

pub use models::*;

use crate::tensor::{Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One standard normal draw via Box-Muller (deterministic per rng state).
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_array<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::of_f64(normal_sample(rng) * std)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Named parameter list used by optimizers, checkpoints, and checksums.
pub type NamedParams<F> = Vec<(String, Tensor<F>)>;

pub fn prefixed<F: Scalar>(prefix: &str, params: NamedParams<F>) -> NamedParams<F> {
    params
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub struct Linear<F: Scalar> {
    pub w: Tensor<F>, // (in, out)
    pub b: Tensor<F>, // (out,)
}

impl<F: Scalar> Linear<F> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Linear {
            w: Tensor::param(normal_array(&[fan_in, fan_out], std, rng)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[fan_out]))),
        }
    }

    /// x: (rows, in) -> (rows, out)
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.matmul(&self.w).add_bias_rows(&self.b)
    }

    pub fn params(&self, name: &str) -> NamedParams<F> {
        vec![
            (format!("{name}.w"), self.w.clone()),
            (format!("{name}.b"), self.b.clone()),
        ]
    }
}

pub struct Conv2d<F: Scalar> {
    pub w: Tensor<F>, // (cout, cin, kh, kw)
    pub b: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            w: Tensor::param(normal_array(&[cout, cin, k, k], std, rng)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad,
        }
    }

    /// All-zero weights; with the SFT formulation this makes the block an
    /// identity map at init.
    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Tensor::param(ArrayD::zeros(IxDyn(&[cout, cin, k, k]))),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    pub fn params(&self, name: &str) -> NamedParams<F> {
        vec![
            (format!("{name}.w"), self.w.clone()),
            (format!("{name}.b"), self.b.clone()),
        ]
    }
}

pub struct LayerNorm<F: Scalar> {
    pub g: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            g: Tensor::param(ArrayD::ones(IxDyn(&[dim]))),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[dim]))),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.layer_norm(&self.g, &self.b, 1e-5)
    }

    pub fn params(&self, name: &str) -> NamedParams<F> {
        vec![
            (format!("{name}.g"), self.g.clone()),
            (format!("{name}.b"), self.b.clone()),
        ]
    }
}

/// Row permutation taking the flat (B, m, n) token order into window-major
/// order, optionally after a cyclic half-window shift. Returns the forward
/// permutation and its inverse.
pub fn window_permutation(
    batch: usize,
    m: usize,
    n: usize,
    ws: usize,
    shifted: bool,
) -> (Vec<usize>, Vec<usize>) {
    assert!(m % ws == 0 && n % ws == 0, "grid not divisible by window");
    let off = if shifted { ws / 2 } else { 0 };
    let total = batch * m * n;
    let mut fwd = Vec::with_capacity(total);
    for b in 0..batch {
        for wy in 0..m / ws {
            for wx in 0..n / ws {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let y = (wy * ws + iy + off) % m;
                        let x = (wx * ws + ix + off) % n;
                        fwd.push(b * m * n + y * n + x);
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; total];
    for (r, &p) in fwd.iter().enumerate() {
        inv[p] = r;
    }
    (fwd, inv)
}

/// Pre-norm windowed multi-head self-attention block with an MLP, in the
/// style of Swin but without the relative-position machinery. Alternating
/// blocks cyclically shift the window grid so information crosses windows.
pub struct WindowBlock<F: Scalar> {
    pub norm1: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub norm2: LayerNorm<F>,
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
}

impl<F: Scalar> WindowBlock<F> {
    pub fn new(dim: usize, heads: usize, window: usize, shifted: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim must divide by heads");
        WindowBlock {
            norm1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            norm2: LayerNorm::new(dim),
            mlp1: Linear::new(dim, 2 * dim, rng),
            mlp2: Linear::new(2 * dim, dim, rng),
            heads,
            window,
            shifted,
        }
    }

    /// x: (B*m*n, dim) in row-major grid order.
    pub fn forward(&self, x: &Tensor<F>, batch: usize, m: usize, n: usize) -> Tensor<F> {
        let dim = x.shape()[1];
        let ws = self.window;
        let wt = ws * ws; // tokens per window
        let nw = batch * (m / ws) * (n / ws);
        let dh = dim / self.heads;
        let (fwd, inv) = window_permutation(batch, m, n, ws, self.shifted);

        let normed = self.norm1.forward(x);
        let qkv = self.qkv.forward(&normed).gather_rows(&fwd); // window order
        let q = qkv.slice_axis_op(1, 0, dim);
        let k = qkv.slice_axis_op(1, dim, 2 * dim);
        let v = qkv.slice_axis_op(1, 2 * dim, 3 * dim);

        // (nw*wt, dim) -> (nw*heads, wt, dh)
        let to_heads = |t: &Tensor<F>| {
            t.reshape(&[nw, wt, self.heads, dh])
                .transpose_axes(&[0, 2, 1, 3])
                .reshape(&[nw * self.heads, wt, dh])
        };
        let qh = to_heads(&q);
        let kh = to_heads(&k);
        let vh = to_heads(&v);

        let scale = 1.0 / (dh as f64).sqrt();
        let scores = qh.bmm(&kh.transpose_axes(&[0, 2, 1])).scale(scale);
        let probs = scores.softmax_last();
        let ctx = probs.bmm(&vh); // (nw*heads, wt, dh)
        let merged = ctx
            .reshape(&[nw, self.heads, wt, dh])
            .transpose_axes(&[0, 2, 1, 3])
            .reshape(&[nw * wt, dim]);
        let attn = self.proj.forward(&merged).gather_rows(&inv); // back to grid order
        let x1 = x.add(&attn);

        let h = self.mlp1.forward(&self.norm2.forward(&x1)).leaky_relu(0.2);
        let x2 = x1.add(&self.mlp2.forward(&h));
        x2
    }

    pub fn params(&self, name: &str) -> NamedParams<F> {
        let mut p = Vec::new();
        p.extend(self.norm1.params(&format!("{name}.norm1")));
        p.extend(self.qkv.params(&format!("{name}.qkv")));
        p.extend(self.proj.params(&format!("{name}.proj")));
        p.extend(self.norm2.params(&format!("{name}.norm2")));
        p.extend(self.mlp1.params(&format!("{name}.mlp1")));
        p.extend(self.mlp2.params(&format!("{name}.mlp2")));
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn window_permutation_is_bijective() {
        for &(b, m, n, ws, sh) in &[(1, 4, 4, 2, false), (2, 8, 4, 4, true), (3, 4, 8, 2, true)] {
            let (fwd, inv) = window_permutation(b, m, n, ws, sh);
            assert_eq!(fwd.len(), b * m * n);
            for i in 0..fwd.len() {
                assert_eq!(fwd[inv[i]], i);
            }
        }
    }

    #[test]
    fn window_block_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = WindowBlock::<f32>::new(8, 2, 2, false, &mut rng);
        let x = Tensor::constant(normal_array(&[2 * 4 * 4, 8], 1.0, &mut rng));
        let y1 = block.forward(&x, 2, 4, 4);
        let y2 = block.forward(&x, 2, 4, 4);
        assert_eq!(y1.shape(), vec![32, 8]);
        assert_eq!(y1.value(), y2.value());
    }

    #[test]
    fn linear_gradient_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Tensor::param(normal_array(&[4, 3], 1.0, &mut rng));
        let loss = lin.forward(&x).square().mean_all();
        loss.backward();
        let g = x.grad().unwrap();
        let eps = 1e-6;
        let base = x.value();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[i] -= eps;
            let lp = lin.forward(&Tensor::constant(plus)).square().mean_all().scalar();
            let lm = lin.forward(&Tensor::constant(minus)).square().mean_all().scalar();
            let fd = (lp - lm) / (2.0 * eps);
            let an = g.as_slice().unwrap()[i];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-4, "fd {fd} an {an}");
        }
    }
}

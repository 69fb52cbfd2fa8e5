//! Cosine mask schedule, mask sampling, token fusion, and critic-guided
//! mask selection.

use crate::error::{DehazeError, Result};
use crate::tensor::{Scalar, Tensor};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Binary mask over the latent grid; 1 marks positions still held by
/// low-quality features and subject to re-prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMap {
    pub bits: Array2<u8>,
}

impl MaskMap {
    pub fn ones(m: usize, n: usize) -> Self {
        MaskMap {
            bits: Array2::from_elem((m, n), 1),
        }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        MaskMap {
            bits: Array2::zeros((m, n)),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// The cosine schedule gamma(r) = cos(pi r / 2); gamma(0)=1, gamma(1)=0.
pub fn gamma(r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(DehazeError::contract(format!("gamma: r={r} outside [0,1]")));
    }
    if r == 1.0 {
        // cos(pi/2) is ~6e-17 in floats; the schedule must end at exactly 0.
        return Ok(0.0);
    }
    Ok((std::f64::consts::FRAC_PI_2 * r).cos())
}

/// ceil(gamma(r) * N), the number of positions still masked at ratio r.
pub fn mask_count(r: f64, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(DehazeError::contract("mask_count: N must be >= 1"));
    }
    let count = (gamma(r)? * n as f64).ceil() as usize;
    Ok(count.min(n))
}

/// Uniformly random mask with exactly k ones.
pub fn random_mask(k: usize, m: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<MaskMap> {
    let total = m * n;
    if k > total {
        return Err(DehazeError::contract(format!(
            "random_mask: k={k} exceeds N={total}"
        )));
    }
    // Fisher-Yates prefix
    let mut order: Vec<usize> = (0..total).collect();
    for i in 0..k {
        let j = rng.gen_range(i..total);
        order.swap(i, j);
    }
    let mut mask = MaskMap::zeros(m, n);
    for &p in &order[..k] {
        mask.bits[(p / n, p % n)] = 1;
    }
    Ok(mask)
}

/// Eq-style fusion on plain arrays: Z_l where masked, Z_c where retained.
pub fn fuse<F: Scalar>(
    z_l: &Array3<F>,
    z_c: &Array3<F>,
    mask: &MaskMap,
) -> Result<Array3<F>> {
    if z_l.shape() != z_c.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", z_l.shape()),
            got: format!("{:?}", z_c.shape()),
        });
    }
    let (m, n, d) = (z_l.shape()[0], z_l.shape()[1], z_l.shape()[2]);
    if mask.bits.shape() != [m, n] {
        return Err(DehazeError::Shape {
            expected: format!("mask {m}x{n}"),
            got: format!("{:?}", mask.bits.shape()),
        });
    }
    let mut out = z_c.clone();
    for i in 0..m {
        for j in 0..n {
            if mask.bits[(i, j)] != 0 {
                out.slice_mut(ndarray::s![i, j, ..])
                    .assign(&z_l.slice(ndarray::s![i, j, ..]));
            }
        }
    }
    let _ = d;
    Ok(out)
}

/// Fusion on autodiff tensors of shape (m, n, d); the mask enters as a
/// constant so gradients route to Z_l at masked positions and Z_c elsewhere.
pub fn fuse_tensor<F: Scalar>(
    z_l: &Tensor<F>,
    z_c: &Tensor<F>,
    mask: &MaskMap,
) -> Result<Tensor<F>> {
    let shape = z_l.shape();
    if shape != z_c.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", shape),
            got: format!("{:?}", z_c.shape()),
        });
    }
    if shape.len() != 3 || mask.bits.shape() != [shape[0], shape[1]] {
        return Err(DehazeError::Shape {
            expected: format!("(m,n,d) grid matching mask {:?}", mask.bits.shape()),
            got: format!("{:?}", shape),
        });
    }
    let mut m_arr = ArrayD::<F>::zeros(IxDyn(&shape));
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            if mask.bits[(i, j)] != 0 {
                m_arr
                    .slice_mut(ndarray::s![i, j, ..])
                    .fill(F::one());
            }
        }
    }
    let inv = m_arr.mapv(|v| F::one() - v);
    Ok(z_l.mul_const(&m_arr).add(&z_c.mul_const(&inv)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Mask the k highest-scoring positions; ties break row-major.
    TopK,
    /// Sample k positions without replacement, proportionally to score.
    Stochastic,
}

/// Choose which positions stay masked for the next iteration, guided by
/// critic scores (higher score = more likely wrong = keep masked).
pub fn select_mask_by_critic(
    scores: &Array2<f64>,
    k: usize,
    mode: SelectMode,
    rng: &mut ChaCha8Rng,
) -> Result<MaskMap> {
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    let total = m * n;
    if k > total {
        return Err(DehazeError::contract(format!(
            "select_mask_by_critic: k={k} exceeds N={total}"
        )));
    }
    let mut mask = MaskMap::zeros(m, n);
    match mode {
        SelectMode::TopK => {
            let mut idx: Vec<usize> = (0..total).collect();
            // stable sort by descending score keeps row-major tie order
            idx.sort_by(|&a, &b| {
                let sa = scores[(a / n, a % n)];
                let sb = scores[(b / n, b % n)];
                sb.partial_cmp(&sa).unwrap()
            });
            for &p in &idx[..k] {
                mask.bits[(p / n, p % n)] = 1;
            }
        }
        SelectMode::Stochastic => {
            let mut weights: Vec<f64> = (0..total).map(|p| scores[(p / n, p % n)]).collect();
            let mut alive: Vec<usize> = (0..total).collect();
            for _ in 0..k {
                let sum: f64 = alive.iter().map(|&p| weights[p]).sum();
                let mut draw = rng.gen_range(0.0..1.0) * sum;
                let mut chosen = alive.len() - 1;
                for (pos, &p) in alive.iter().enumerate() {
                    draw -= weights[p];
                    if draw <= 0.0 {
                        chosen = pos;
                        break;
                    }
                }
                let p = alive.swap_remove(chosen);
                mask.bits[(p / n, p % n)] = 1;
                weights[p] = 0.0;
            }
        }
    }
    Ok(mask)
}

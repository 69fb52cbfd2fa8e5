//! Discrete codebook: nearest-neighbor quantization, code lookup, the
//! VQ loss terms with stop-gradient, and the straight-through estimator.

use crate::error::{DehazeError, Result};
use crate::tensor::{Scalar, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The learned K x d code matrix.
pub struct Codebook<F: Scalar> {
    pub codes: Tensor<F>,
    pub k: usize,
    pub dim: usize,
}

/// m x n grid of code indices, each in [0, K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence(pub Array2<usize>);

impl CodeSequence {
    pub fn flat(&self) -> Vec<usize> {
        self.0.iter().copied().collect()
    }
}

impl<F: Scalar> Codebook<F> {
    /// Random init, i.i.d. normal with std 1/sqrt(d).
    pub fn new(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k < 2 || dim < 1 {
            return Err(DehazeError::contract("codebook requires K >= 2, d >= 1"));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let data: Vec<F> = (0..k * dim)
            .map(|_| F::of_f64(crate::nn::normal_sample(rng) * std))
            .collect();
        let arr = Array2::from_shape_vec((k, dim), data).unwrap();
        Ok(Codebook {
            codes: Tensor::param(arr.into_dyn()),
            k,
            dim,
        })
    }

    pub fn from_array(codes: Array2<F>) -> Result<Self> {
        let (k, dim) = (codes.shape()[0], codes.shape()[1]);
        if k < 2 || dim < 1 {
            return Err(DehazeError::contract("codebook requires K >= 2, d >= 1"));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(DehazeError::NonFinite("codebook".into()));
        }
        Ok(Codebook {
            codes: Tensor::param(codes.into_dyn()),
            k,
            dim,
        })
    }

    pub fn codes_array(&self) -> Array2<F> {
        self.codes
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }
}

/// Nearest code per position under Euclidean distance; ties break to the
/// lowest index. Distances accumulate in f64 so ties are reproducible
/// across element types.
pub fn quantize<F: Scalar>(
    grid: &Array3<F>,
    cb: &Codebook<F>,
) -> Result<(CodeSequence, Array3<F>)> {
    let (m, n, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if d != cb.dim {
        return Err(DehazeError::Shape {
            expected: format!("token dim {}", cb.dim),
            got: format!("{d}"),
        });
    }
    let codes = cb.codes_array();
    let mut indices = Array2::<usize>::zeros((m, n));
    let mut quantized = Array3::<F>::zeros((m, n, d));
    for i in 0..m {
        for j in 0..n {
            let z = grid.slice(ndarray::s![i, j, ..]);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..cb.k {
                let row = codes.row(k);
                let mut dist = 0.0f64;
                for (a, b) in z.iter().zip(row.iter()) {
                    let diff = a.as_f64() - b.as_f64();
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            indices[(i, j)] = best;
            quantized
                .slice_mut(ndarray::s![i, j, ..])
                .assign(&codes.row(best));
        }
    }
    Ok((CodeSequence(indices), quantized))
}

/// Exact codebook row per index.
pub fn lookup<F: Scalar>(seq: &CodeSequence, cb: &Codebook<F>) -> Result<Array3<F>> {
    let (m, n) = (seq.0.shape()[0], seq.0.shape()[1]);
    let codes = cb.codes_array();
    let mut out = Array3::<F>::zeros((m, n, cb.dim));
    for i in 0..m {
        for j in 0..n {
            let k = seq.0[(i, j)];
            if k >= cb.k {
                return Err(DehazeError::CodeIndex { index: k, size: cb.k });
            }
            out.slice_mut(ndarray::s![i, j, ..]).assign(&codes.row(k));
        }
    }
    Ok(out)
}

/// Differentiable lookup used while training the codebook: gathers rows of
/// the codebook parameter so gradients reach the selected codes.
pub fn lookup_tensor<F: Scalar>(seq: &CodeSequence, cb: &Codebook<F>) -> Result<Tensor<F>> {
    let (m, n) = (seq.0.shape()[0], seq.0.shape()[1]);
    let flat = seq.flat();
    for &k in &flat {
        if k >= cb.k {
            return Err(DehazeError::CodeIndex { index: k, size: cb.k });
        }
    }
    Ok(cb.codes.gather_rows(&flat).reshape(&[m, n, cb.dim]))
}

/// The VQ code loss:
/// `||sg(Z_c) - Z_h||^2 + beta ||Z_c - sg(Z_h)||^2 + lambda_g ||proj - target||^2`
/// with mean reduction per term.
pub fn code_loss<F: Scalar>(
    z_h: &Tensor<F>,
    z_c: &Tensor<F>,
    proj_feat: &Tensor<F>,
    target_feat: &Tensor<F>,
    beta_commit: f64,
    lambda_g: f64,
) -> Result<Tensor<F>> {
    if z_h.shape() != z_c.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", z_h.shape()),
            got: format!("{:?}", z_c.shape()),
        });
    }
    if proj_feat.shape() != target_feat.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", proj_feat.shape()),
            got: format!("{:?}", target_feat.shape()),
        });
    }
    if beta_commit < 0.0 || lambda_g < 0.0 {
        return Err(DehazeError::contract("loss weights must be nonnegative"));
    }
    let codebook_term = z_c.detach().sub(z_h).square().mean_all();
    let commit_term = z_c.sub(&z_h.detach()).square().mean_all();
    let guide_term = proj_feat.sub(target_feat).square().mean_all();
    Ok(codebook_term
        .add(&commit_term.scale(beta_commit))
        .add(&guide_term.scale(lambda_g)))
}

/// Forward value of `z_c`, backward identity into `z_h`.
pub fn straight_through<F: Scalar>(z_h: &Tensor<F>, z_c: &Tensor<F>) -> Result<Tensor<F>> {
    if z_h.shape() != z_c.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", z_h.shape()),
            got: format!("{:?}", z_c.shape()),
        });
    }
    Ok(z_h.add(&z_c.sub(z_h).detach()))
}

/// Tracks per-code usage so codes unmatched for `revive_after` consecutive
/// steps get re-seeded from a live encoder output.
pub struct DeadCodeTracker {
    last_used: Vec<u64>,
    step: u64,
    revive_after: u64,
}

impl DeadCodeTracker {
    pub fn new(k: usize, revive_after: u64) -> Self {
        DeadCodeTracker {
            last_used: vec![0; k],
            step: 0,
            revive_after,
        }
    }

    /// State for checkpointing: (last_used per code, current step).
    pub fn export(&self) -> (Vec<u64>, u64) {
        (self.last_used.clone(), self.step)
    }

    pub fn import(&mut self, last_used: Vec<u64>, step: u64) {
        self.last_used = last_used;
        self.step = step;
    }

    /// Record one training step's matched indices; returns the codes due
    /// for revival.
    pub fn observe(&mut self, matched: &[usize]) -> Vec<usize> {
        self.step += 1;
        for &k in matched {
            self.last_used[k] = self.step;
        }
        self.last_used
            .iter()
            .enumerate()
            .filter(|(_, &last)| self.step - last >= self.revive_after)
            .map(|(k, _)| k)
            .collect()
    }

    /// Re-seed dead rows from randomly chosen encoder outputs.
    pub fn revive<F: Scalar>(
        &mut self,
        dead: &[usize],
        cb: &Codebook<F>,
        encoder_tokens: &Array2<F>,
        rng: &mut ChaCha8Rng,
    ) {
        if dead.is_empty() || encoder_tokens.shape()[0] == 0 {
            return;
        }
        let mut codes = cb.codes_array();
        for &k in dead {
            let pick = rng.gen_range(0..encoder_tokens.shape()[0]);
            codes.row_mut(k).assign(&encoder_tokens.row(pick));
            self.last_used[k] = self.step;
        }
        cb.codes.set_value(codes.into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn cb2(rows: &[[f64; 2]]) -> Codebook<f64> {
        let arr = Array2::from_shape_vec(
            (rows.len(), 2),
            rows.iter().flatten().copied().collect(),
        )
        .unwrap();
        Codebook::from_array(arr).unwrap()
    }

    fn grid1(v: [f64; 2]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, 2), v.to_vec()).unwrap()
    }

    #[test]
    fn quantize_picks_closest() {
        let cb = cb2(&[[0.0, 0.0], [3.0, 4.0]]);
        let (seq, q) = quantize(&grid1([1.0, 1.0]), &cb).unwrap();
        assert_eq!(seq.0[(0, 0)], 0);
        assert_eq!(q[(0, 0, 0)], 0.0);
    }

    #[test]
    fn quantize_exact_match_is_fixed_point() {
        let cb = cb2(&[[0.0, 0.0], [3.0, 4.0]]);
        let (seq, q) = quantize(&grid1([3.0, 4.0]), &cb).unwrap();
        assert_eq!(seq.0[(0, 0)], 1);
        assert_eq!(q[(0, 0, 0)], 3.0);
        assert_eq!(q[(0, 0, 1)], 4.0);
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let cb = cb2(&[[0.0, 0.0], [2.0, 0.0]]);
        let (seq, _) = quantize(&grid1([1.0, 0.0]), &cb).unwrap();
        assert_eq!(seq.0[(0, 0)], 0);
    }

    #[test]
    fn quantize_rejects_dim_mismatch() {
        let cb = cb2(&[[0.0, 0.0], [1.0, 1.0]]);
        let grid = Array3::<f64>::zeros((1, 1, 3));
        assert!(quantize(&grid, &cb).is_err());
    }

    #[test]
    fn lookup_all_zero_indices() {
        let cb = cb2(&[[0.5, -0.5], [3.0, 4.0]]);
        let seq = CodeSequence(Array2::zeros((2, 3)));
        let g = lookup(&seq, &cb).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(g[(i, j, 0)], 0.5);
                assert_eq!(g[(i, j, 1)], -0.5);
            }
        }
    }

    #[test]
    fn lookup_single_index() {
        let cb = cb2(&[[0.0, 0.0], [3.0, 4.0]]);
        let seq = CodeSequence(arr2(&[[1usize]]));
        let g = lookup(&seq, &cb).unwrap();
        assert_eq!(g[(0, 0, 0)], 3.0);
        assert_eq!(g[(0, 0, 1)], 4.0);
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let cb = cb2(&[[0.0, 0.0], [3.0, 4.0]]);
        let seq = CodeSequence(arr2(&[[7usize]]));
        assert!(lookup(&seq, &cb).is_err());
    }

    #[test]
    fn lookup_quantize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.gen_range(2..16);
            let d = rng.gen_range(1..6);
            // well-separated rows so distinctness holds
            let codes = Array2::from_shape_fn((k, d), |(i, j)| {
                i as f64 * 10.0 + j as f64 + rng.gen_range(-0.1..0.1)
            });
            let cb = Codebook::from_array(codes).unwrap();
            let seq = CodeSequence(Array2::from_shape_fn((3, 3), |_| rng.gen_range(0..k)));
            let g = lookup(&seq, &cb).unwrap();
            let (seq2, _) = quantize(&g, &cb).unwrap();
            assert_eq!(seq, seq2);
        }
    }

    #[test]
    fn code_loss_zero_at_agreement() {
        let z = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 1.5));
        let p = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 0.2));
        let l = code_loss(&z, &z, &p, &p, 0.25, 0.1).unwrap();
        assert_eq!(l.scalar(), 0.0);
    }

    #[test]
    fn code_loss_hand_value() {
        // Z_h = 0, Z_c = 2, no guide term: 4 + 0.25 * 4 = 5
        let zh = Tensor::<f64>::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let zc = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0));
        let p = Tensor::<f64>::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let l = code_loss(&zh, &zc, &p, &p, 0.25, 0.1).unwrap();
        assert!((l.scalar() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn code_loss_gradient_routing() {
        // grad wrt Z_c flows only through the commitment term: 2 * beta * (zc - zh)
        let zh = Tensor::<f64>::param(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let zc = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0));
        let p = Tensor::<f64>::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let l = code_loss(&zh, &zc, &p, &p, 0.25, 0.1).unwrap();
        l.backward();
        let gc = zc.grad().unwrap();
        assert!((gc[[0]] - 1.0).abs() < 1e-12);
        let gh = zh.grad().unwrap();
        assert!((gh[[0]] - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn straight_through_contract() {
        let zh = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0));
        let zc = Tensor::<f64>::param(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2]), 3.0));
        let st = straight_through(&zh, &zc).unwrap();
        assert_eq!(st.value(), zc.value());
        // f(out) = sum(out^2): df/dzh = 2 * zc
        let f = st.square().sum_all();
        f.backward();
        let g = zh.grad().unwrap();
        assert!((g[[0]] - 6.0).abs() < 1e-12);
        assert!(zc.grad().is_none());
    }

    #[test]
    fn dead_code_tracker_revives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::<f64>::new(4, 2, &mut rng).unwrap();
        let mut tracker = DeadCodeTracker::new(4, 3);
        assert!(tracker.observe(&[0, 1, 2, 3]).is_empty());
        assert!(tracker.observe(&[0, 1]).is_empty());
        assert!(tracker.observe(&[0, 1]).is_empty());
        let dead = tracker.observe(&[0, 1]);
        assert_eq!(dead, vec![2, 3]);
        let tokens = arr2(&[[9.0, 9.0]]);
        tracker.revive(&dead, &cb, &tokens, &mut rng);
        let codes = cb.codes_array();
        assert_eq!(codes[(2, 0)], 9.0);
        assert_eq!(codes[(3, 0)], 9.0);
    }
}

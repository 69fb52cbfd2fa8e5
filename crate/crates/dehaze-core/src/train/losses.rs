//! Loss functions. All are mean-reduced over elements so their scale is
//! independent of patch size.

use crate::error::{DehazeError, Result};
use crate::schedule::MaskMap;
use crate::tensor::{Scalar, Tensor};
use ndarray::Array2;

/// Mean absolute error.
pub fn loss_l1<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
    if pred.shape() != target.shape() {
        return Err(DehazeError::Shape {
            expected: format!("{:?}", target.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    Ok(pred.sub(target).abs().mean_all())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvSide {
    Generator,
    Discriminator,
}

/// Hinge-free GAN loss on discriminator logits (probabilities via sigmoid).
/// Discriminator side minimizes -[log D(real) + log(1 - D(fake))]; the
/// generator side is the non-saturating -log D(fake).
pub fn loss_adv<F: Scalar>(d_real: &Tensor<F>, d_fake: &Tensor<F>, side: AdvSide) -> Tensor<F> {
    match side {
        // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
        AdvSide::Discriminator => d_real
            .neg()
            .softplus()
            .mean_all()
            .add(&d_fake.softplus().mean_all()),
        AdvSide::Generator => d_fake.neg().softplus().mean_all(),
    }
}

/// Mean cross-entropy of per-position logits against code labels.
pub fn loss_ce<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DehazeError::Shape {
            expected: format!("({}, K) logits", labels.len()),
            got: format!("{shape:?}"),
        });
    }
    for &l in labels {
        if l >= shape[1] {
            return Err(DehazeError::CodeIndex { index: l, size: shape[1] });
        }
    }
    Ok(logits
        .log_softmax_last()
        .select_per_row(labels)
        .mean_all()
        .neg())
}

/// Binary cross-entropy of probabilities against 0/1 labels, mean-reduced.
pub fn loss_bce_flat<F: Scalar>(p: &Tensor<F>, labels: &[u8]) -> Result<Tensor<F>> {
    let n: usize = p.shape().iter().product();
    if n != labels.len() {
        return Err(DehazeError::Shape {
            expected: format!("{} probabilities", labels.len()),
            got: format!("{n}"),
        });
    }
    if p.value().iter().any(|v| {
        let x = v.as_f64();
        !(x > 0.0 && x < 1.0)
    }) {
        return Err(DehazeError::contract("bce probabilities must lie in (0,1)"));
    }
    let flat = p.reshape(&[n]);
    let y = ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[n]),
        labels.iter().map(|&l| F::of_f64(l as f64)).collect(),
    )
    .unwrap();
    let one_minus_y = y.mapv(|v| F::one() - v);
    let pos = flat.ln().mul_const(&y);
    let neg = flat.neg().add_scalar(1.0).ln().mul_const(&one_minus_y);
    Ok(pos.add(&neg).mean_all().neg())
}

/// BCE against a mask map's bits.
pub fn loss_bce<F: Scalar>(p: &Tensor<F>, mask: &MaskMap) -> Result<Tensor<F>> {
    let labels: Vec<u8> = mask.bits.iter().copied().collect();
    loss_bce_flat(p, &labels)
}

/// Row-wise softmax of logits / temp, computed in f64.
pub fn temperature_softmax<F: Scalar>(logits: &Array2<F>, temp: f64) -> Result<Array2<f64>> {
    if temp <= 0.0 {
        return Err(DehazeError::contract("temperature must be > 0"));
    }
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Array2::<f64>::zeros((rows, k));
    for r in 0..rows {
        let scaled: Vec<f64> = (0..k).map(|c| logits[(r, c)].as_f64() / temp).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..k {
            out[(r, c)] = exps[c] / sum;
        }
    }
    Ok(out)
}

/// Index of the largest entry per row; ties break to the lowest index.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, v) in row.iter().enumerate() {
                let x = v.as_f64();
                if x > best_v {
                    best_v = x;
                    best = i;
                }
            }
            best
        })
        .collect()
}

//! Adam optimizer over named parameter lists.

use crate::error::{DehazeError, Result};
use crate::nn::NamedParams;
use crate::tensor::{Scalar, Tensor};
use ndarray::ArrayD;

pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub names: Vec<String>,
    params: Vec<Tensor<F>>,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &NamedParams<F>, lr: f64) -> Self {
        let names = params.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor<F>> = params.iter().map(|(_, t)| t.clone()).collect();
        let m = tensors
            .iter()
            .map(|t| ArrayD::zeros(t.value().raw_dim()))
            .collect();
        let v = tensors
            .iter()
            .map(|t| ArrayD::zeros(t.value().raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            names,
            params: tensors,
            m,
            v,
        }
    }

    /// Apply accumulated gradients, then clear them. Parameters without a
    /// gradient this step are left untouched.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of_f64(self.beta1), F::of_f64(self.beta2));
        let (ob1, ob2) = (F::of_f64(1.0 - self.beta1), F::of_f64(1.0 - self.beta2));
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DehazeError::NonFinite(format!(
                    "gradient of '{}'",
                    self.names[i]
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = *m * b1 + g * ob1;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = *v * b2 + g * g * ob2;
            });
            let mut value = p.value();
            let lr = F::of_f64(self.lr);
            let (c1, c2) = (F::of_f64(1.0 / bc1), F::of_f64(1.0 / bc2));
            let eps = F::of_f64(self.eps);
            ndarray::Zip::from(&mut value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m * c1;
                    let vhat = v * c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
            p.set_value(value);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

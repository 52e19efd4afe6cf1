//! Adam optimizer over a flat list of parameter tensors.

use super::GradError;
use crate::scalar::{c, Scalar};
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr: c(lr),
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            t: 0,
            m: shapes.iter().map(|&sh| Array2::zeros(sh)).collect(),
            v: shapes.iter().map(|&sh| Array2::zeros(sh)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Array2<S>]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        Self::new(lr, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Errors on non-finite gradients without touching params.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<S>],
        grads: &[Array2<S>],
    ) -> Result<(), GradError> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFinite("gradient"));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.dim(), g.dim(), "param/grad shape mismatch");
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (S::one() - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| {
                *v = self.beta2 * *v + (S::one() - self.beta2) * g * g
            });
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: T) -> Self {
        Self::with_hyper(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_hyper(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter. `grads[i]` belongs to `params[i]`;
    /// the parameter list must keep the same order across calls.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients", params.len()),
                grads.len(),
            ));
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(Error::MissingGradient(i));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters", self.m.len()),
                params.len(),
            ));
        }
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.expect("checked above");
            p.expect_same_shape("adam", g)?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

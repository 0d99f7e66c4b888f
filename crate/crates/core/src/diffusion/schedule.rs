use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// DDPM noise schedule. Coefficients are held in `f64` regardless of the
/// tensor precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_T: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::invalid(
                "noise_schedule",
                "need at least 2 timesteps",
            ));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "noise_schedule",
                format!("require 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let step = (beta_end - beta_start) / (t_train - 1) as f64;
        let mut beta: Vec<f64> = (0..t_train).map(|t| beta_start + step * t as f64).collect();
        beta[t_train - 1] = beta_end;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            t_train,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::invalid(
                "noise_schedule",
                format!("timestep {t} outside [0, {})", self.t_train),
            )
        })
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn q_sample<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        noise: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        q_sample_with(x0, self.alpha_bar(t)?, noise)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(
            Self::DEFAULT_T,
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }
}

pub(crate) fn q_sample_with<T: Scalar>(
    x0: &Tensor<T>,
    alpha_bar: f64,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let a = T::lit(alpha_bar.sqrt());
    let s = T::lit((1.0 - alpha_bar).sqrt());
    x0.zip_map(noise, |x, n| a * x + s * n)
}

/// Evenly strided subsequence `tau[0..=K]` of the training timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdimSchedule {
    pub k: usize,
    pub tau: Vec<usize>,
}

impl DdimSchedule {
    pub const DEFAULT_K: usize = 50;

    pub fn new(k: usize, t_train: usize) -> Result<Self> {
        if k == 0 || k >= t_train {
            return Err(Error::invalid(
                "ddim_schedule",
                format!("K={k} must lie in [1, {t_train})"),
            ));
        }
        let tau: Vec<usize> = (0..=k)
            .map(|i| ((i * t_train) as f64 / k as f64).round() as usize)
            .map(|t| t.min(t_train - 1))
            .collect();
        if tau.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "ddim_schedule",
                "tau is not strictly increasing",
            ));
        }
        Ok(Self { k, tau })
    }

    pub fn timestep(&self, k: usize) -> Result<usize> {
        self.tau.get(k).copied().ok_or_else(|| {
            Error::invalid(
                "ddim_schedule",
                format!("index {k} outside [0, {}]", self.k),
            )
        })
    }
}

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::schedule::{DdimSchedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{TapState, UNet};

/// Anything that predicts noise from `(x_t, t)` with tap support.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, x: &Tensor<T>, t: usize, taps: &mut TapState<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for UNet<T> {
    fn predict(&self, x: &Tensor<T>, t: usize, taps: &mut TapState<T>) -> Result<Tensor<T>> {
        self.forward(x, t, taps)
    }
}

/// Deterministic DDIM move from noise level `ab_from` to `ab_to` given `eps`.
pub fn ddim_update<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    ab_from: f64,
    ab_to: f64,
) -> Result<Tensor<T>> {
    let inv = T::lit(1.0 / ab_from.sqrt());
    let s_from = T::lit((1.0 - ab_from).sqrt());
    let a_to = T::lit(ab_to.sqrt());
    let s_to = T::lit((1.0 - ab_to).sqrt());
    x.zip_map(eps, |x, e| {
        let x0 = (x - s_from * e) * inv;
        a_to * x0 + s_to * e
    })
}

/// Noise schedule plus its DDIM subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    pub noise: NoiseSchedule,
    pub ddim: DdimSchedule,
}

impl Default for Diffusion {
    fn default() -> Self {
        let noise = NoiseSchedule::default();
        let ddim = DdimSchedule::new(DdimSchedule::DEFAULT_K, noise.t_train)
            .expect("default DDIM schedule");
        Self { noise, ddim }
    }
}

impl Diffusion {
    pub fn new(noise: NoiseSchedule, k: usize) -> Result<Self> {
        let ddim = DdimSchedule::new(k, noise.t_train)?;
        Ok(Self { noise, ddim })
    }

    pub fn k(&self) -> usize {
        self.ddim.k
    }

    /// `alpha_bar` at DDIM index `k`.
    pub fn alpha_bar_at(&self, k: usize) -> Result<f64> {
        self.noise.alpha_bar(self.ddim.timestep(k)?)
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.ddim.k {
            return Err(Error::invalid(
                "ddim",
                format!("step {k} outside [1, {}]", self.ddim.k),
            ));
        }
        Ok(())
    }

    /// `x_k -> x_{k-1}` given the predicted noise at `x_k`.
    pub fn ddim_step<T: Scalar>(
        &self,
        x: &Tensor<T>,
        eps: &Tensor<T>,
        k: usize,
    ) -> Result<Tensor<T>> {
        self.check_step(k)?;
        ddim_update(x, eps, self.alpha_bar_at(k)?, self.alpha_bar_at(k - 1)?)
    }

    /// `x_{k-1} -> x_k`, reusing the noise predicted at `(x_{k-1}, tau_{k-1})`.
    pub fn ddim_invert_step<T: Scalar, M: NoisePredictor<T>>(
        &self,
        model: &M,
        x_prev: &Tensor<T>,
        k: usize,
        taps: &mut TapState<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(k)?;
        let eps = model.predict(x_prev, self.ddim.timestep(k - 1)?, taps)?;
        ddim_update(
            x_prev,
            &eps,
            self.alpha_bar_at(k - 1)?,
            self.alpha_bar_at(k)?,
        )
    }

    /// Invert a clean image (`k = 0`) up to `k_end`.
    pub fn invert<T: Scalar, M: NoisePredictor<T>>(
        &self,
        model: &M,
        x0: &Tensor<T>,
        k_end: usize,
    ) -> Result<Tensor<T>> {
        if k_end > self.ddim.k {
            return Err(Error::invalid(
                "ddim_invert",
                format!("k_end {k_end} > K={}", self.ddim.k),
            ));
        }
        let mut x = x0.clone();
        for k in 1..=k_end {
            x = self.ddim_invert_step(model, &x, k, &mut TapState::new())?;
        }
        Ok(x)
    }

    /// Denoise from `k_start` to `k_end`. The model call at step `k` sees
    /// `taps[k]` when present; captures are written back into it.
    pub fn sample<T: Scalar, M: NoisePredictor<T>>(
        &self,
        model: &M,
        x_start: &Tensor<T>,
        k_start: usize,
        k_end: usize,
        taps: &mut BTreeMap<usize, TapState<T>>,
    ) -> Result<Tensor<T>> {
        if k_start > self.ddim.k || k_end > k_start {
            return Err(Error::invalid(
                "ddim_sample",
                format!("need K >= k_start >= k_end, got {k_start} -> {k_end}"),
            ));
        }
        let mut x = x_start.clone();
        let mut empty = TapState::new();
        for k in (k_end + 1..=k_start).rev() {
            let state = taps.get_mut(&k).unwrap_or(&mut empty);
            let eps = model.predict(&x, self.ddim.timestep(k)?, state)?;
            x = self.ddim_step(&x, &eps, k)?;
        }
        Ok(x)
    }

    /// Unconditional sample: standard normal `z_K` drawn from `seed`,
    /// denoised to `k = 0` and clamped to `[-1, 1]`.
    pub fn generate<T: Scalar, M: NoisePredictor<T>>(
        &self,
        model: &M,
        seed: u64,
        shape: &[usize],
    ) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(shape.to_vec(), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        });
        let x = self.sample(model, &z, self.ddim.k, 0, &mut BTreeMap::new())?;
        Ok(x.map(|v| v.max(-T::one()).min(T::one())))
    }
}

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape};
use crate::data::Dataset;
use crate::diffusion::schedule::{q_sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{ArchConfig, ParamBinding, Source, UNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds parameter init, timestep/noise draws and batch order.
    pub seed: u64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Emit a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Probability of zeroing each skip connection of each sample during
    /// training; inference always uses every skip.
    pub skip_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            dataset_size: 2000,
            dataset_seed: 1,
            checkpoint_every: 0,
            log_every: 25,
            skip_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.dataset_size == 0 || self.log_every == 0
        {
            return Err(Error::invalid(
                "train_config",
                "steps, batch_size, dataset_size and log_every must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "train_config",
                format!("lr {} must be positive", self.lr),
            ));
        }
        if !(0.0..1.0).contains(&self.skip_dropout) {
            return Err(Error::invalid(
                "train_config",
                format!("skip_dropout {} outside [0, 1)", self.skip_dropout),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// Adam on the noise-prediction objective.
pub struct Trainer<T: Scalar> {
    pub net: UNet<T>,
    schedule: NoiseSchedule,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    step: usize,
    skip_dropout: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: UNet<T>, schedule: NoiseSchedule, lr: f64, seed: u64) -> Self {
        Self {
            net,
            schedule,
            adam: Adam::new(T::lit(lr)),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            skip_dropout: 0.0,
        }
    }

    pub fn with_skip_dropout(mut self, p: f64) -> Self {
        self.skip_dropout = p;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Per-sample timesteps and unit normal noise for a batch.
    fn draw(&mut self, shape: &[usize]) -> (Vec<usize>, Tensor<T>) {
        let n = shape[0];
        let ts: Vec<usize> = (0..n)
            .map(|_| self.rng.random_range(0..self.schedule.t_train))
            .collect();
        let rng = &mut self.rng;
        let noise = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        });
        (ts, noise)
    }

    fn noisy_batch(&self, batch: &Tensor<T>, ts: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>> {
        let items = (0..ts.len())
            .map(|i| {
                let ab = self.schedule.alpha_bar(ts[i])?;
                q_sample_with(&batch.batch_item(i)?, ab, &noise.batch_item(i)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    fn check_batch(batch: &Tensor<T>) -> Result<()> {
        if batch
            .data()
            .iter()
            .any(|v| v.abs() > T::one() + T::lit(1e-6) || !v.is_finite())
        {
            return Err(Error::invalid(
                "train_step",
                "batch values must lie in [-1, 1]",
            ));
        }
        Ok(())
    }

    /// Loss at the current parameters with fresh draws, without updating.
    pub fn eval_loss(&mut self, batch: &Tensor<T>) -> Result<f64> {
        Self::check_batch(batch)?;
        let (ts, noise) = self.draw(batch.shape());
        let xt = self.noisy_batch(batch, &ts, &noise)?;
        let mut eps = Tensor::zeros(batch.shape().to_vec());
        for (i, &t) in ts.iter().enumerate() {
            let e = self
                .net
                .forward(&xt.batch_item(i)?, t, &mut Default::default())?;
            let plane = e.numel();
            eps.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(e.data());
        }
        Ok(eps.mse(&noise)?.as_f64())
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &Tensor<T>) -> Result<f64> {
        Self::check_batch(batch)?;
        let (ts, noise) = self.draw(batch.shape());
        let xt = self.noisy_batch(batch, &ts, &noise)?;

        // Drawn only when enabled so runs without dropout keep their streams.
        let gates: Option<Vec<Vec<T>>> = (self.skip_dropout > 0.0).then(|| {
            let levels = self.net.config.levels();
            (0..ts.len())
                .map(|_| {
                    (0..levels)
                        .map(|_| {
                            if self.rng.random_bool(self.skip_dropout) {
                                T::zero()
                            } else {
                                T::one()
                            }
                        })
                        .collect()
                })
                .collect()
        });

        let mut tape = Tape::new().with_finite_check(false);
        let mut binding = ParamBinding::trainable();
        let x = tape.constant(xt);
        let out = self.net.forward_on_tape_gated(
            &mut tape,
            &mut binding,
            Source::Input(x),
            &ts,
            &BTreeMap::new(),
            None,
            gates.as_deref(),
        )?;
        let target = tape.constant(noise);
        let loss_var = tape.mse(out.eps.expect("full pass"), target)?;
        let loss = tape.value(loss_var).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        let grads = tape.backward(loss_var)?;
        let vars = binding.bound();
        let grad_refs: Vec<Option<&Tensor<T>>> = self
            .net
            .params
            .iter()
            .map(|(name, _)| vars.get(name).and_then(|&v| grads.get(v)))
            .collect();
        let mut params: Vec<&mut Tensor<T>> = self.net.params.iter_mut().map(|(_, t)| t).collect();
        self.adam.step(&mut params, &grad_refs)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Train from scratch on `data`. `on_log` receives every `log_every`-th
/// record (and the last one) together with the current trainer.
pub fn train<T: Scalar, E: From<Error>>(
    cfg: &TrainConfig,
    data: &Dataset<T>,
    mut on_log: impl FnMut(&TrainRecord, &Trainer<T>) -> std::result::Result<(), E>,
) -> std::result::Result<UNet<T>, E> {
    cfg.validate()?;
    if data.size != cfg.arch.image_size {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset images are {}px, model expects {}px",
                data.size, cfg.arch.image_size
            ),
        )
        .into());
    }
    let net = UNet::init(cfg.arch.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(
        net,
        NoiseSchedule::default(),
        cfg.lr,
        cfg.seed.wrapping_add(1),
    )
    .with_skip_dropout(cfg.skip_dropout);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| order_rng.random_range(0..data.len()))
            .collect();
        let batch = data.batch(&idx)?;
        let loss = trainer.train_step(&batch)?;
        if step % cfg.log_every == 0 || step == cfg.steps || step == 1 {
            let rec = TrainRecord {
                step,
                loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_log(&rec, &trainer)?;
        }
    }
    Ok(trainer.net)
}

//! Toy U-Net noise predictor with capturable and overridable feature taps.
//!
//! Layout for the default configuration (32x32, widths 32/64/128):
//!
//! ```text
//! x ─ enc1(32@32) ─ avg ─ enc2(64@16) ─ avg ─ enc3(128@8) ─ mid(128@8)
//!       │                   │                   │              │
//!       │                   │                   └──── cat ── dec1(128@8)
//!       │                   └──────────── cat ── up ──────── dec2(64@16)
//!       └──────────────────────── cat ── up ──────────────── dec3(32@32) ─ 1x1 ─ eps
//! ```
//!
//! Every block is `2 x [conv3x3 -> group norm -> SiLU]` with a per-block
//! projection of the timestep embedding added after the first SiLU.

mod config;
mod params;

use std::collections::{BTreeMap, BTreeSet};

pub use config::{ArchConfig, FeatureTap};
pub use params::{ParamBinding, UNetParams};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Captured activations keyed by tap.
pub type Activations<T> = BTreeMap<FeatureTap, Tensor<T>>;

/// Sinusoidal embedding of a timestep: `dim / 2` sines followed by
/// `dim / 2` cosines at frequencies spaced geometrically from 1 to 1e-4.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(
            "timestep_embedding",
            format!("dim {dim} must be even"),
        ));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        let arg = t as f64 * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    Tensor::new([dim], out)
}

/// Overrides to inject and taps to record for one forward pass.
#[derive(Debug, Clone)]
pub struct TapState<T: Scalar> {
    pub overrides: BTreeMap<FeatureTap, Tensor<T>>,
    pub captures: BTreeSet<FeatureTap>,
    pub captured: Activations<T>,
}

impl<T: Scalar> Default for TapState<T> {
    fn default() -> Self {
        Self {
            overrides: BTreeMap::new(),
            captures: BTreeSet::new(),
            captured: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> TapState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capture(mut self, tap: FeatureTap) -> Self {
        self.captures.insert(tap);
        self
    }

    pub fn capture_all(mut self, config: &ArchConfig) -> Self {
        self.captures.extend(config.taps());
        self
    }

    pub fn with_override(mut self, tap: FeatureTap, value: Tensor<T>) -> Self {
        self.overrides.insert(tap, value);
        self
    }
}

/// Where a tape pass starts.
pub enum Source<'a, T: Scalar> {
    /// Full pass from the noisy input.
    Input(Var),
    /// Resume at `tap` with `value`; blocks before `tap` are read from `cache`
    /// as constants, so nothing upstream of `tap` is recorded.
    Resume {
        tap: FeatureTap,
        value: Var,
        cache: &'a Activations<T>,
    },
}

/// Vars produced by a tape pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predicted noise; `None` when the pass stopped at a tap.
    pub eps: Option<Var>,
    /// Output of every block evaluated (or injected) in this pass.
    pub blocks: BTreeMap<FeatureTap, Var>,
}

/// Noise predictor `eps_theta(x_t, t)`.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    pub config: ArchConfig,
    pub params: UNetParams<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: ArchConfig, params: UNetParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            if params.get(&name)?.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "unet",
                    format!("{name} {shape:?}"),
                    format!("{:?}", params.get(&name)?.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        let params = UNetParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_tap(&self, tap: FeatureTap) -> Result<()> {
        if self.config.contains(tap) {
            Ok(())
        } else {
            Err(Error::invalid(
                "unet",
                format!("{tap} does not exist in this architecture"),
            ))
        }
    }

    fn check_tap_shape(&self, tap: FeatureTap, value: &Tensor<T>, batch: usize) -> Result<()> {
        self.check_tap(tap)?;
        let want = self.config.tap_shape(tap, batch);
        if value.shape() != want.as_slice() {
            return Err(Error::shape(
                "unet tap",
                format!("{tap} {want:?}"),
                format!("{:?}", value.shape()),
            ));
        }
        Ok(())
    }

    /// Per-block time projections share one embedding MLP.
    fn time_features(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        timesteps: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let dim = self.config.time_embed_dim;
        let rows: Vec<Tensor<T>> = match timesteps.len() {
            1 => vec![timestep_embedding(timesteps[0], dim)?; batch],
            n if n == batch => timesteps
                .iter()
                .map(|&t| timestep_embedding(t, dim))
                .collect::<Result<_>>()?,
            n => {
                return Err(Error::shape("unet", format!("1 or {batch} timesteps"), n));
            }
        };
        let mut data = Vec::with_capacity(batch * dim);
        for r in rows {
            data.extend(r.into_data());
        }
        let emb = tape.constant(Tensor::new([batch, dim], data)?);
        let w = binding.var(tape, &self.params, "time_mlp.weight")?;
        let b = binding.var(tape, &self.params, "time_mlp.bias")?;
        let h = tape.linear(emb, w, b)?;
        tape.silu(h)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        tap: FeatureTap,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let p = tap.param_prefix();
        let g = self.config.groups;
        let eps = T::lit(NORM_EPS);
        let mut param = |tape: &mut Tape<T>, suffix: &str| {
            binding.var(tape, &self.params, &format!("{p}.{suffix}"))
        };

        let w1 = param(tape, "conv1.weight")?;
        let b1 = param(tape, "conv1.bias")?;
        let g1 = param(tape, "norm1.gamma")?;
        let be1 = param(tape, "norm1.beta")?;
        let h = tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let h = tape.group_norm(h, g, g1, be1, eps)?;
        let h = tape.silu(h)?;

        let tw = param(tape, "time.weight")?;
        let tb = param(tape, "time.bias")?;
        let tproj = tape.linear(temb, tw, tb)?;
        let h = tape.add_channel_bias(h, tproj)?;

        let w2 = param(tape, "conv2.weight")?;
        let b2 = param(tape, "conv2.bias")?;
        let g2 = param(tape, "norm2.gamma")?;
        let be2 = param(tape, "norm2.beta")?;
        let h = tape.conv2d(h, w2, Some(b2), 1, 1)?;
        let h = tape.group_norm(h, g, g2, be2, eps)?;
        tape.silu(h)
    }

    /// Record a pass on `tape`.
    ///
    /// An overridden tap's computed value is discarded and the override feeds
    /// everything downstream, including the skip connection it would feed.
    /// Skips otherwise come from the encoder blocks actually evaluated (or
    /// cached, when resuming). Stops after `stop_at` when given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        source: Source<'_, T>,
        timesteps: &[usize],
        overrides: &BTreeMap<FeatureTap, Var>,
        stop_at: Option<FeatureTap>,
    ) -> Result<ForwardOutput> {
        self.forward_on_tape_gated(tape, binding, source, timesteps, overrides, stop_at, None)
    }

    /// [`forward_on_tape`](Self::forward_on_tape) with skip connections
    /// scaled per sample: `skip_gates[n][l]` multiplies sample `n`'s skip from
    /// encoder level `l + 1`. Training uses 0/1 gates as skip dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape_gated(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        source: Source<'_, T>,
        timesteps: &[usize],
        overrides: &BTreeMap<FeatureTap, Var>,
        stop_at: Option<FeatureTap>,
        skip_gates: Option<&[Vec<T>]>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let batch = match &source {
            Source::Input(x) => {
                let shape = tape.value(*x).shape();
                let want = [
                    shape.first().copied().unwrap_or(0),
                    cfg.in_channels,
                    cfg.image_size,
                    cfg.image_size,
                ];
                if shape != want {
                    return Err(Error::shape(
                        "unet input",
                        format!("{want:?}"),
                        format!("{shape:?}"),
                    ));
                }
                want[0]
            }
            Source::Resume { tap, value, .. } => {
                self.check_tap(*tap)?;
                let v = tape.value(*value);
                let batch = v.shape().first().copied().unwrap_or(0);
                self.check_tap_shape(*tap, v, batch)?;
                batch
            }
        };
        for (&tap, &v) in overrides {
            self.check_tap_shape(tap, tape.value(v), batch)?;
        }
        if let Some(stop) = stop_at {
            self.check_tap(stop)?;
        }
        if let Some(g) = skip_gates {
            if g.len() != batch || g.iter().any(|row| row.len() != levels) {
                return Err(Error::shape(
                    "skip gates",
                    format!("[{batch}, {levels}]"),
                    format!("{} rows", g.len()),
                ));
            }
        }

        let temb = self.time_features(tape, binding, timesteps, batch)?;
        let mut blocks = BTreeMap::new();
        let mut skips: Vec<Var> = Vec::with_capacity(levels);
        let mut prev: Option<Var> = None;

        for tap in cfg.taps() {
            let value = match &source {
                Source::Resume {
                    tap: start, cache, ..
                } if tap < *start => {
                    let cached = cache.get(&tap).ok_or_else(|| {
                        Error::invalid("unet resume", format!("cache lacks {tap}"))
                    })?;
                    self.check_tap_shape(tap, cached, batch)?;
                    tape.constant(cached.clone())
                }
                Source::Resume {
                    tap: start, value, ..
                } if tap == *start => *value,
                _ => match overrides.get(&tap) {
                    Some(&v) => v,
                    None => self
                        .eval_block(tape, binding, tap, &source, prev, &skips, temb, skip_gates)?,
                },
            };
            blocks.insert(tap, value);
            if let FeatureTap::Encoder(_) = tap {
                skips.push(value);
            }
            prev = Some(value);
            if stop_at == Some(tap) {
                return Ok(ForwardOutput { eps: None, blocks });
            }
        }

        let w = binding.var(tape, &self.params, "out.weight")?;
        let b = binding.var(tape, &self.params, "out.bias")?;
        let eps = tape.conv2d(prev.expect("at least one block"), w, Some(b), 1, 0)?;
        Ok(ForwardOutput {
            eps: Some(eps),
            blocks,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_block(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        tap: FeatureTap,
        source: &Source<'_, T>,
        prev: Option<Var>,
        skips: &[Var],
        temb: Var,
        skip_gates: Option<&[Vec<T>]>,
    ) -> Result<Var> {
        let levels = self.config.levels();
        let skip = |tape: &mut Tape<T>, level: usize| -> Result<Var> {
            let s = skips[level - 1];
            let Some(gates) = skip_gates else {
                return Ok(s);
            };
            let shape = tape.value(s).shape().to_vec();
            let per_item: usize = shape[1..].iter().product();
            let gate = Tensor::from_fn(shape, |i| gates[i / per_item][level - 1]);
            let gate = tape.constant(gate);
            tape.mul(s, gate)
        };
        let input = match tap {
            FeatureTap::Encoder(1) => match source {
                Source::Input(x) => *x,
                Source::Resume { .. } => unreachable!("resume never evaluates the first block"),
            },
            FeatureTap::Encoder(_) => {
                tape.downsample_avg2(prev.expect("previous encoder block"))?
            }
            FeatureTap::Bottleneck => prev.expect("last encoder block"),
            FeatureTap::Decoder(1) => {
                let s = skip(tape, levels)?;
                tape.concat_channels(prev.expect("bottleneck"), s)?
            }
            FeatureTap::Decoder(j) => {
                let up = tape.upsample_nearest2(prev.expect("previous decoder block"))?;
                let s = skip(tape, levels + 1 - j)?;
                tape.concat_channels(up, s)?
            }
        };
        self.block(tape, binding, tap, input, temb)
    }

    /// Predicted noise for a batch; every sample uses timestep `t`.
    ///
    /// Requested captures are written to `taps.captured`.
    pub fn forward(&self, x: &Tensor<T>, t: usize, taps: &mut TapState<T>) -> Result<Tensor<T>> {
        self.forward_timesteps(x, &[t], taps)
    }

    pub fn forward_timesteps(
        &self,
        x: &Tensor<T>,
        timesteps: &[usize],
        taps: &mut TapState<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binding = ParamBinding::frozen();
        let xv = tape.constant(x.clone());
        let overrides = self.bind_overrides(&mut tape, taps)?;
        let out = self.forward_on_tape(
            &mut tape,
            &mut binding,
            Source::Input(xv),
            timesteps,
            &overrides,
            None,
        )?;
        self.collect_captures(&tape, &out, taps)?;
        let eps = out.eps.expect("full pass produces eps");
        Ok(tape.value(eps).clone())
    }

    /// Decoder-only pass from a bottleneck value and cached encoder
    /// activations (`skips[i]` = `EncoderBlock{i+1}`), identical to a full
    /// pass with the bottleneck overridden.
    pub fn decoder_forward(
        &self,
        bottleneck: &Tensor<T>,
        skips: &[Tensor<T>],
        t: usize,
        taps: &mut TapState<T>,
    ) -> Result<Tensor<T>> {
        let cache = self.skip_cache(skips)?;
        let mut tape = Tape::new();
        let mut binding = ParamBinding::frozen();
        let b = tape.constant(bottleneck.clone());
        let overrides = self.bind_overrides(&mut tape, taps)?;
        let source = Source::Resume {
            tap: FeatureTap::Bottleneck,
            value: b,
            cache: &cache,
        };
        let out = self.forward_on_tape(&mut tape, &mut binding, source, &[t], &overrides, None)?;
        self.collect_captures(&tape, &out, taps)?;
        Ok(tape.value(out.eps.expect("full decoder pass")).clone())
    }

    /// Tape version of [`decoder_forward`](Self::decoder_forward).
    pub fn decoder_forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &mut ParamBinding,
        bottleneck: Var,
        skips: &[Tensor<T>],
        t: usize,
        stop_at: Option<FeatureTap>,
    ) -> Result<ForwardOutput> {
        let cache = self.skip_cache(skips)?;
        let source = Source::Resume {
            tap: FeatureTap::Bottleneck,
            value: bottleneck,
            cache: &cache,
        };
        self.forward_on_tape(tape, binding, source, &[t], &BTreeMap::new(), stop_at)
    }

    fn skip_cache(&self, skips: &[Tensor<T>]) -> Result<Activations<T>> {
        let levels = self.config.levels();
        if skips.len() != levels {
            return Err(Error::shape(
                "decoder_forward",
                format!("{levels} skips"),
                skips.len(),
            ));
        }
        Ok(skips
            .iter()
            .enumerate()
            .map(|(i, s)| (FeatureTap::Encoder(i + 1), s.clone()))
            .collect())
    }

    fn bind_overrides(
        &self,
        tape: &mut Tape<T>,
        taps: &TapState<T>,
    ) -> Result<BTreeMap<FeatureTap, Var>> {
        taps.overrides
            .iter()
            .map(|(&tap, v)| {
                self.check_tap(tap)?;
                Ok((tap, tape.constant(v.clone())))
            })
            .collect()
    }

    fn collect_captures(
        &self,
        tape: &Tape<T>,
        out: &ForwardOutput,
        taps: &mut TapState<T>,
    ) -> Result<()> {
        for &tap in &taps.captures {
            self.check_tap(tap)?;
            let v = out
                .blocks
                .get(&tap)
                .ok_or_else(|| Error::invalid("unet", format!("{tap} was not evaluated")))?;
            taps.captured.insert(tap, tape.value(*v).clone());
        }
        Ok(())
    }
}

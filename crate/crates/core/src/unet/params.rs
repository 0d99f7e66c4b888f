use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::config::ArchConfig;

/// Named parameter set of the noise predictor, keyed by path
/// (`enc1.conv1.weight`, `mid.norm2.gamma`, `out.bias`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> UNetParams<T> {
    /// Deterministic initialization: fan-in scaled uniform for convolution and
    /// linear weights/biases, ones/zeros for normalization affines.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let fan_in: BTreeMap<String, usize> = shapes
            .iter()
            .filter(|(name, _)| name.ends_with(".weight"))
            .map(|(name, shape)| {
                let prefix = name.trim_end_matches(".weight").to_string();
                (prefix, shape[1..].iter().product())
            })
            .collect();
        let mut tensors = BTreeMap::new();
        for (name, shape) in shapes {
            let tensor = if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if name.ends_with(".beta") {
                Tensor::zeros(shape)
            } else {
                let prefix = name.rsplit_once('.').map(|(p, _)| p).unwrap_or(&name);
                let bound = 1.0 / (fan_in[prefix] as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
            };
            tensors.insert(name, tensor);
        }
        Ok(Self { tensors })
    }

    /// Build from named tensors, requiring exactly the paths and shapes of `config`.
    pub fn from_tensors(
        config: &ArchConfig,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "parameters",
                    format!("{name} {shape:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(Self { tensors: out })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }
}

/// Binds parameters onto a tape lazily, so a pass only records the
/// parameters it actually touches.
#[derive(Debug, Default)]
pub struct ParamBinding {
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    /// Parameters enter the tape as constants.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    /// Parameters enter the tape as gradient-receiving leaves.
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    pub fn var<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &UNetParams<T>,
        name: &str,
    ) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = tape.named_leaf(name, params.get(name)?.clone(), self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters recorded so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter count from the block structure alone.
    fn count_by_shape_walk(cfg: &ArchConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let norm = |c: usize| 2 * c;
        let lin = |i: usize, o: usize| o * i + o;
        let te = cfg.time_embed_dim;
        let block = |ci: usize, co: usize| {
            conv(ci, co, 3) + norm(co) + lin(te, co) + conv(co, co, 3) + norm(co)
        };
        let w = &cfg.channel_widths;
        let l = w.len();
        let mut total = lin(te, te);
        let mut cin = cfg.in_channels;
        for &width in w {
            total += block(cin, width);
            cin = width;
        }
        total += block(w[l - 1], w[l - 1]);
        let mut prev = w[l - 1];
        for level in (0..l).rev() {
            total += block(prev + w[level], w[level]);
            prev = w[level];
        }
        total + conv(w[0], cfg.in_channels, 1)
    }

    #[test]
    fn default_parameter_count_is_frozen() {
        let cfg = ArchConfig::default();
        let params = UNetParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(count_by_shape_walk(&cfg), 1_301_889);
        assert_eq!(params.param_count(), 1_301_889);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = ArchConfig::default();
        let a = UNetParams::<f32>::init(&cfg, 7).unwrap();
        let b = UNetParams::<f32>::init(&cfg, 7).unwrap();
        assert!(a.bits_eq(&b));
        let c = UNetParams::<f32>::init(&cfg, 8).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn norm_affines_start_at_identity() {
        let cfg = ArchConfig::default();
        let p = UNetParams::<f32>::init(&cfg, 0).unwrap();
        assert!(p
            .get("enc1.norm1.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("dec2.norm2.beta")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let bound = 1.0 / (9.0f32).sqrt();
        assert!(p
            .get("enc1.conv1.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ArchConfig {
            groups: 3,
            ..ArchConfig::default()
        };
        assert!(UNetParams::<f32>::init(&cfg, 0).is_err());
    }

    #[test]
    fn from_tensors_requires_exact_path_set() {
        let cfg = ArchConfig::default();
        let p = UNetParams::<f32>::init(&cfg, 0).unwrap();
        let mut map: BTreeMap<String, Tensor<f32>> =
            p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert!(UNetParams::from_tensors(&cfg, map.clone())
            .unwrap()
            .bits_eq(&p));
        map.insert("extra".into(), Tensor::zeros([1]));
        assert!(matches!(
            UNetParams::from_tensors(&cfg, map.clone()),
            Err(Error::UnknownParameter(_))
        ));
        map.remove("extra");
        map.remove("out.bias");
        assert!(UNetParams::from_tensors(&cfg, map).is_err());
    }
}

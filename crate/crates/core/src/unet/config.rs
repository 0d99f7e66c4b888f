use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Shape of the toy U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width per resolution level, highest resolution first.
    pub channel_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channel_widths: vec![32, 64, 128],
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_widths.len();
        if levels == 0 {
            return Err(Error::InvalidConfig(
                "channel_widths must be nonempty".into(),
            ));
        }
        if self.image_size == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig(
                "image_size and in_channels must be positive".into(),
            ));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.groups == 0
            || self
                .channel_widths
                .iter()
                .any(|&w| w == 0 || w % self.groups != 0)
        {
            return Err(Error::InvalidConfig(format!(
                "every channel width must be a positive multiple of groups={}",
                self.groups
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "time_embed_dim must be even and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_widths.len()
    }

    /// Taps in forward evaluation order.
    pub fn taps(&self) -> Vec<FeatureTap> {
        let l = self.levels();
        (1..=l)
            .map(FeatureTap::Encoder)
            .chain(std::iter::once(FeatureTap::Bottleneck))
            .chain((1..=l).map(FeatureTap::Decoder))
            .collect()
    }

    pub fn contains(&self, tap: FeatureTap) -> bool {
        match tap {
            FeatureTap::Bottleneck => true,
            FeatureTap::Encoder(i) | FeatureTap::Decoder(i) => (1..=self.levels()).contains(&i),
        }
    }

    /// Resolution level (0 = full resolution) of a tap.
    pub fn tap_level(&self, tap: FeatureTap) -> usize {
        let l = self.levels();
        match tap {
            FeatureTap::Encoder(i) => i - 1,
            FeatureTap::Bottleneck => l - 1,
            FeatureTap::Decoder(j) => l - j,
        }
    }

    /// `[N, C, H, W]` of a tap's activation.
    pub fn tap_shape(&self, tap: FeatureTap, batch: usize) -> Vec<usize> {
        let level = self.tap_level(tap);
        let side = self.image_size >> level;
        vec![batch, self.channel_widths[level], side, side]
    }

    /// `(in, out)` channels of the block producing `tap`.
    pub(crate) fn block_channels(&self, tap: FeatureTap) -> (usize, usize) {
        let w = &self.channel_widths;
        let l = self.levels();
        match tap {
            FeatureTap::Encoder(1) => (self.in_channels, w[0]),
            FeatureTap::Encoder(i) => (w[i - 2], w[i - 1]),
            FeatureTap::Bottleneck => (w[l - 1], w[l - 1]),
            FeatureTap::Decoder(1) => (2 * w[l - 1], w[l - 1]),
            FeatureTap::Decoder(j) => (w[l - j + 1] + w[l - j], w[l - j]),
        }
    }

    /// Every parameter path with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let te = self.time_embed_dim;
        let mut out = vec![
            ("time_mlp.weight".to_string(), vec![te, te]),
            ("time_mlp.bias".to_string(), vec![te]),
        ];
        for tap in self.taps() {
            let (cin, cout) = self.block_channels(tap);
            let p = tap.param_prefix();
            out.extend([
                (format!("{p}.conv1.weight"), vec![cout, cin, 3, 3]),
                (format!("{p}.conv1.bias"), vec![cout]),
                (format!("{p}.norm1.gamma"), vec![cout]),
                (format!("{p}.norm1.beta"), vec![cout]),
                (format!("{p}.time.weight"), vec![cout, te]),
                (format!("{p}.time.bias"), vec![cout]),
                (format!("{p}.conv2.weight"), vec![cout, cout, 3, 3]),
                (format!("{p}.conv2.bias"), vec![cout]),
                (format!("{p}.norm2.gamma"), vec![cout]),
                (format!("{p}.norm2.beta"), vec![cout]),
            ]);
        }
        out.push((
            "out.weight".to_string(),
            vec![self.in_channels, self.channel_widths[0], 1, 1],
        ));
        out.push(("out.bias".to_string(), vec![self.in_channels]));
        out
    }
}

/// Observable / replaceable internal feature of the U-Net.
///
/// Indices are 1-based. `Decoder(1)` is the lowest-resolution decoder block;
/// for the default three-level network `Decoder(3)` runs at full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureTap {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

impl FeatureTap {
    pub const ENCODER_BLOCK_1: FeatureTap = FeatureTap::Encoder(1);
    pub const ENCODER_BLOCK_2: FeatureTap = FeatureTap::Encoder(2);
    pub const ENCODER_BLOCK_3: FeatureTap = FeatureTap::Encoder(3);
    pub const DECODER_BLOCK_1: FeatureTap = FeatureTap::Decoder(1);
    pub const DECODER_BLOCK_2: FeatureTap = FeatureTap::Decoder(2);
    pub const DECODER_BLOCK_3: FeatureTap = FeatureTap::Decoder(3);

    pub(crate) fn param_prefix(self) -> String {
        match self {
            FeatureTap::Encoder(i) => format!("enc{i}"),
            FeatureTap::Bottleneck => "mid".to_string(),
            FeatureTap::Decoder(j) => format!("dec{j}"),
        }
    }
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureTap::Encoder(i) => write!(f, "EncoderBlock{i}"),
            FeatureTap::Bottleneck => write!(f, "Bottleneck"),
            FeatureTap::Decoder(j) => write!(f, "DecoderBlock{j}"),
        }
    }
}

impl FromStr for FeatureTap {
    type Err = Error;

    /// Accepts `EncoderBlock2`, `enc2`, `Bottleneck`, `mid`, `DecoderBlock3`, `dec3`
    /// (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "bottleneck" || lower == "mid" {
            return Ok(FeatureTap::Bottleneck);
        }
        let parse_idx = |rest: &str| rest.parse::<usize>().ok().filter(|&i| i >= 1);
        for (prefix, make) in [
            (
                "encoderblock",
                FeatureTap::Encoder as fn(usize) -> FeatureTap,
            ),
            ("enc", FeatureTap::Encoder),
            ("decoderblock", FeatureTap::Decoder),
            ("dec", FeatureTap::Decoder),
        ] {
            if let Some(i) = lower.strip_prefix(prefix).and_then(parse_idx) {
                return Ok(make(i));
            }
        }
        Err(Error::invalid("feature_tap", format!("unknown tap `{s}`")))
    }
}

impl Serialize for FeatureTap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureTap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

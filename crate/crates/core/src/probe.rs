//! Feature-replacement probe: freeze one tap's activation from a chosen
//! denoising step and inject it into every later step of a DDIM
//! reconstruction, then measure how far the output drifts from the input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diffusion::{Diffusion, NoisePredictor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{FeatureTap, TapState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub taps: Vec<FeatureTap>,
    /// DDIM indices `t0` the frozen feature is taken from.
    pub start_steps: Vec<usize>,
    /// Keep reconstructed images in the result.
    pub keep_images: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            taps: vec![FeatureTap::Encoder(1), FeatureTap::Bottleneck],
            start_steps: vec![45, 35, 25],
            keep_images: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.taps.is_empty() || self.start_steps.is_empty() {
            return Err(Error::invalid(
                "probe_config",
                "taps and start_steps must be non-empty",
            ));
        }
        if let Some(&t0) = self.start_steps.iter().find(|&&t| t == 0 || t > k) {
            return Err(Error::invalid(
                "probe_config",
                format!("start step {t0} outside [1, {k}]"),
            ));
        }
        Ok(())
    }
}

/// Baseline reconstruction of one image with per-step tap activations.
pub struct ProbeSeries<T: Scalar> {
    /// `states[k]` is the sample entering step `k`; `states[K]` is the
    /// inverted latent.
    pub states: BTreeMap<usize, Tensor<T>>,
    /// `features[tap][k]` is the tap's activation during step `k`.
    pub features: BTreeMap<FeatureTap, BTreeMap<usize, Tensor<T>>>,
    pub baseline: Tensor<T>,
}

fn clamp_unit<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

/// Invert `x0` to `k = K`, then denoise back to 0 capturing `taps` at every
/// step. The baseline is clamped to `[-1, 1]`.
pub fn capture_series<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    diffusion: &Diffusion,
    x0: &Tensor<T>,
    taps: &[FeatureTap],
) -> Result<ProbeSeries<T>> {
    let k_max = diffusion.k();
    let mut x = diffusion.invert(model, x0, k_max)?;
    let mut states = BTreeMap::new();
    let mut features: BTreeMap<FeatureTap, BTreeMap<usize, Tensor<T>>> = BTreeMap::new();
    for k in (1..=k_max).rev() {
        states.insert(k, x.clone());
        let state = taps.iter().fold(TapState::new(), |s, &t| s.capture(t));
        let mut step = BTreeMap::from([(k, state)]);
        x = diffusion.sample(model, &x, k, k - 1, &mut step)?;
        let captured = step.remove(&k).map(|s| s.captured).unwrap_or_default();
        for &tap in taps {
            let f = captured.get(&tap).cloned().ok_or_else(|| {
                Error::invalid("capture_series", format!("{tap} was not captured"))
            })?;
            features.entry(tap).or_default().insert(k, f);
        }
    }
    Ok(ProbeSeries {
        states,
        features,
        baseline: clamp_unit(x),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Inject the activation from step `t0` into every step `k <= t0`.
    FreezeFrom(usize),
    /// Inject each step's own activation (a no-op).
    Control,
}

/// Re-run the baseline reconstruction with `tap` overridden. Steps before
/// the first override are skipped by resuming from the stored state.
pub fn replay_with_replacement<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    diffusion: &Diffusion,
    series: &ProbeSeries<T>,
    tap: FeatureTap,
    mode: ReplayMode,
) -> Result<Tensor<T>> {
    let k_max = diffusion.k();
    let feats = series
        .features
        .get(&tap)
        .ok_or_else(|| Error::invalid("replay_with_replacement", format!("{tap} not in series")))?;
    let start = match mode {
        ReplayMode::FreezeFrom(t0) => t0,
        ReplayMode::Control => k_max,
    };
    if start == 0 || start > k_max {
        return Err(Error::invalid(
            "replay_with_replacement",
            format!("t0 {start} outside [1, {k_max}]"),
        ));
    }
    let mut overrides: BTreeMap<usize, TapState<T>> = (1..=start)
        .map(|k| {
            let src = match mode {
                ReplayMode::FreezeFrom(t0) => t0,
                ReplayMode::Control => k,
            };
            (k, TapState::new().with_override(tap, feats[&src].clone()))
        })
        .collect();
    let x = diffusion.sample(model, &series.states[&start], start, 0, &mut overrides)?;
    Ok(clamp_unit(x))
}

/// One line of the probe record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub tap: FeatureTap,
    pub t0: usize,
    pub image_id: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub tap: FeatureTap,
    pub t0: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult<T: Scalar> {
    pub records: Vec<ProbeRecord>,
    /// Baseline reconstruction MSE per image.
    pub baseline: Vec<f64>,
    pub summary: Vec<ProbeSummary>,
    /// `(image_id, tap, t0, image)`; `tap = None` marks the baseline.
    pub images: Vec<(usize, Option<FeatureTap>, usize, Tensor<T>)>,
}

impl<T: Scalar> ProbeResult<T> {
    /// Per-image errors for `(tap, t0)`, ordered by image id.
    pub fn errors(&self, tap: FeatureTap, t0: usize) -> Vec<f64> {
        let mut rows: Vec<&ProbeRecord> = self
            .records
            .iter()
            .filter(|r| r.tap == tap && r.t0 == t0)
            .collect();
        rows.sort_by_key(|r| r.image_id);
        rows.into_iter().map(|r| r.mse).collect()
    }
}

/// Full cross product of taps, start steps and images. `on_record` sees
/// each record as it is produced.
pub fn probe_report<T: Scalar, M: NoisePredictor<T>>(
    model: &M,
    diffusion: &Diffusion,
    images: &[Tensor<T>],
    config: &ProbeConfig,
    mut on_record: impl FnMut(&ProbeRecord),
) -> Result<ProbeResult<T>> {
    config.validate(diffusion.k())?;
    if images.is_empty() {
        return Err(Error::invalid("probe_report", "no images"));
    }
    let mut records = Vec::new();
    let mut baseline = Vec::new();
    let mut kept = Vec::new();
    for (id, x0) in images.iter().enumerate() {
        let series = capture_series(model, diffusion, x0, &config.taps)?;
        baseline.push(series.baseline.mse(x0)?.as_f64());
        for &tap in &config.taps {
            for &t0 in &config.start_steps {
                let out = replay_with_replacement(
                    model,
                    diffusion,
                    &series,
                    tap,
                    ReplayMode::FreezeFrom(t0),
                )?;
                let rec = ProbeRecord {
                    tap,
                    t0,
                    image_id: id,
                    mse: out.mse(x0)?.as_f64(),
                };
                on_record(&rec);
                records.push(rec);
                if config.keep_images {
                    kept.push((id, Some(tap), t0, out));
                }
            }
        }
        if config.keep_images {
            kept.push((id, None, 0, series.baseline));
        }
    }
    let mut summary = Vec::new();
    for &tap in &config.taps {
        for &t0 in &config.start_steps {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.tap == tap && r.t0 == t0)
                .map(|r| r.mse)
                .collect();
            let (mean, std) = mean_std(&errs);
            summary.push(ProbeSummary {
                tap,
                t0,
                n: errs.len(),
                mean,
                std,
            });
        }
    }
    Ok(ProbeResult {
        records,
        baseline,
        summary,
        images: kept,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Paired one-sided t-test of `mean(a - b) < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for the alternative `a < b`.
    pub p_less: f64,
}

impl PairedTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_less < alpha
    }
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "paired_t_test",
            format!(
                "need two equal samples of size >= 2, got {} and {}",
                a.len(),
                b.len()
            ),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let n = d.len();
    let se = sd / (n as f64).sqrt();
    let (t, p_less) = if se == 0.0 {
        // Every difference is identical: the sign decides.
        let p = if mean < 0.0 { 0.0 } else { 1.0 };
        (mean.signum() * f64::INFINITY, p)
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::invalid("paired_t_test", e.to_string()))?;
        (t, dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_less,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::unet::{ArchConfig, UNet};

    fn tiny() -> (UNet<f32>, Diffusion) {
        let cfg = ArchConfig {
            image_size: 8,
            in_channels: 1,
            channel_widths: vec![4, 8],
            time_embed_dim: 8,
            groups: 2,
        };
        (
            UNet::init(cfg, 2).unwrap(),
            Diffusion::new(NoiseSchedule::default(), 6).unwrap(),
        )
    }

    fn img(seed: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 1, 8, 8], |i| {
            (((i * 7 + seed * 13) % 17) as f32 / 8.5) - 1.0
        })
    }

    #[test]
    fn series_has_one_entry_per_step_with_equal_shapes() {
        let (net, d) = tiny();
        let s = capture_series(&net, &d, &img(0), &[FeatureTap::Bottleneck]).unwrap();
        let f = &s.features[&FeatureTap::Bottleneck];
        assert_eq!(f.len(), 6);
        assert_eq!(s.states.len(), 6);
        assert!(f.values().all(|t| t.shape() == f[&1].shape()));
    }

    #[test]
    fn series_baseline_matches_plain_round_trip() {
        let (net, d) = tiny();
        let x0 = img(1);
        let s = capture_series(&net, &d, &x0, &[FeatureTap::Encoder(1)]).unwrap();
        let z = d.invert(&net, &x0, 6).unwrap();
        let plain = clamp_unit(d.sample(&net, &z, 6, 0, &mut BTreeMap::new()).unwrap());
        assert!(s.baseline.bits_eq(&plain));
    }

    #[test]
    fn control_replay_is_bitwise_baseline_for_every_tap() {
        let (net, d) = tiny();
        let taps = net.config.taps();
        let s = capture_series(&net, &d, &img(2), &taps).unwrap();
        for tap in taps {
            let out = replay_with_replacement(&net, &d, &s, tap, ReplayMode::Control).unwrap();
            assert!(out.bits_eq(&s.baseline), "{tap}");
        }
    }

    #[test]
    fn freeze_at_step_one_is_baseline() {
        // Only the final step is overridden, with its own activation.
        let (net, d) = tiny();
        let s = capture_series(&net, &d, &img(3), &[FeatureTap::Bottleneck]).unwrap();
        let out = replay_with_replacement(
            &net,
            &d,
            &s,
            FeatureTap::Bottleneck,
            ReplayMode::FreezeFrom(1),
        )
        .unwrap();
        assert!(out.bits_eq(&s.baseline));
    }

    #[test]
    fn report_row_count_is_full_cross_product() {
        let (net, d) = tiny();
        let images: Vec<_> = (0..3).map(img).collect();
        let cfg = ProbeConfig {
            taps: vec![FeatureTap::Encoder(1), FeatureTap::Bottleneck],
            start_steps: vec![5, 3],
            keep_images: true,
        };
        let mut streamed = 0;
        let r = probe_report(&net, &d, &images, &cfg, |_| streamed += 1).unwrap();
        assert_eq!(r.records.len(), 2 * 2 * 3);
        assert_eq!(streamed, 12);
        assert_eq!(r.baseline.len(), 3);
        assert_eq!(r.summary.len(), 4);
        assert_eq!(r.images.len(), 12 + 3);
        assert!(r.records.iter().all(|x| x.mse >= 0.0));
        assert!(r.summary.iter().all(|s| s.n == 3));
        assert_eq!(r.errors(FeatureTap::Bottleneck, 3).len(), 3);
    }

    #[test]
    fn bad_start_steps_are_rejected() {
        let (net, d) = tiny();
        let cfg = ProbeConfig {
            start_steps: vec![7],
            ..ProbeConfig::default()
        };
        assert!(probe_report(&net, &d, &[img(0)], &cfg, |_| {}).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).0, 5.0);
        let (_, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paired_test_matches_hand_computation() {
        // d = [-1, -2, -3]: mean -2, sd 1, se 1/sqrt(3), t = -2 sqrt(3).
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 4.0, 6.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t + 2.0 * 3f64.sqrt()).abs() < 1e-12);
        // Student t with 2 dof: cdf(t) = 1/2 + t / (2 sqrt(2 + t^2)).
        let want = 0.5 + r.t / (2.0 * (2.0 + r.t * r.t).sqrt());
        assert!((r.p_less - want).abs() < 1e-9, "{} vs {want}", r.p_less);
        assert!(r.significant(0.05));
        assert!(!paired_t_test(&b, &a).unwrap().significant(0.05));
    }

    #[test]
    fn paired_test_with_constant_difference() {
        let r = paired_t_test(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert_eq!(r.p_less, 0.0);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }
}

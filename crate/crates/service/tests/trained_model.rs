//! Checks that need the trained fixture checkpoint.

use std::path::PathBuf;

use dragnoise_core::bench::{BenchCase, BenchConfig};
use dragnoise_core::data::gen_dataset;
use dragnoise_core::diffusion::{Diffusion, TrainRecord};
use dragnoise_core::drag::{DragEngine, DragParams};
use dragnoise_core::probe::{capture_series, replay_with_replacement, ReplayMode};
use dragnoise_core::tensor::Tensor;
use dragnoise_core::unet::{FeatureTap, TapState, UNet};
use dragnoise_service::checkpoint::load_checkpoint;

const ROUND_TRIP_MSE: f32 = 5e-3;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn model() -> UNet<f32> {
    load_checkpoint(&fixture("ring32.dnck")).unwrap()
}

fn held_out(n: usize) -> Vec<Tensor<f32>> {
    gen_dataset::<f32>(n, 1000, 32).unwrap().images
}

#[test]
fn training_log_halves_the_loss_by_step_2000() {
    let log: Vec<TrainRecord> = std::fs::read_to_string(fixture("ring32.log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let first = &log[0];
    let at_2000 = log.iter().find(|r| r.step == 2000).unwrap();
    assert_eq!(first.step, 1);
    assert!(
        at_2000.loss <= 0.5 * first.loss,
        "{} vs {}",
        at_2000.loss,
        first.loss
    );
}

#[test]
fn zeroing_the_bottleneck_changes_the_prediction() {
    let net = model();
    let x = &held_out(1)[0];
    let eps = net.forward(x, 700, &mut TapState::new()).unwrap();
    let shape = net.config.tap_shape(FeatureTap::Bottleneck, 1);
    let mut zeroed = TapState::new().with_override(FeatureTap::Bottleneck, Tensor::zeros(shape));
    let eps_zero = net.forward(x, 700, &mut zeroed).unwrap();
    assert!(eps.mse(&eps_zero).unwrap() > 0.0);
}

#[test]
fn full_round_trip_reconstructs_held_out_rings() {
    let net = model();
    let d = Diffusion::default();
    let images = held_out(4);
    let mut total = 0.0;
    for x in &images {
        let series = capture_series(&net, &d, x, &[]).unwrap();
        let back = series.baseline.map(|v| v.clamp(-1.0, 1.0));
        total += back.mse(x).unwrap();
    }
    let mse = total / images.len() as f32;
    assert!(mse < ROUND_TRIP_MSE, "{mse}");
}

#[test]
fn frozen_bottleneck_output_is_structured() {
    let net = model();
    let d = Diffusion::default();
    let x = &held_out(1)[0];
    let series = capture_series(&net, &d, x, &[FeatureTap::Bottleneck]).unwrap();
    let out = replay_with_replacement(
        &net,
        &d,
        &series,
        FeatureTap::Bottleneck,
        ReplayMode::FreezeFrom(35),
    )
    .unwrap();
    let n = out.data().len() as f32;
    let mean = out.data().iter().sum::<f32>() / n;
    let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt();
    assert!(std > 0.05, "{std}");
}

#[test]
fn unedited_image_is_about_the_drag_distance_from_the_targets() {
    let net = model();
    let d = Diffusion::default();
    let engine = DragEngine::new(&net, &d);
    for id in 0..3 {
        let case = BenchCase::<f32>::generate(id, 32, &BenchConfig::default()).unwrap();
        let session = engine
            .capture_state(&case.image, &case.instruction, &DragParams::default())
            .unwrap();
        let md = engine.mean_distance(&case.image, &session).unwrap();
        assert!((md - 4.0).abs() <= 1.0, "case {id}: {md}");
    }
}

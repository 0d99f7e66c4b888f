use dragnoise_core::autodiff::Tape;
use dragnoise_core::bench::{BenchCase, BenchConfig};
use dragnoise_core::data::gen_dataset;
use dragnoise_core::diffusion::{DdimSchedule, NoiseSchedule};
use dragnoise_core::drag::{
    alignment_loss, downsample_mask, grid_feature, mask_loss, mask_weight, normalized_direction,
    round_point, track_anchors, DragParams,
};
use dragnoise_core::metrics::fidelity_mse;
use dragnoise_core::probe::paired_t_test;
use dragnoise_core::tensor::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, values: Vec<f64>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, values.into_iter().cycle().take(n).collect()).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn generated_rings_stay_inside_with_margin(seed in any::<u64>()) {
        let ds = gen_dataset::<f32>(4, seed, 32).unwrap();
        for (spec, img) in ds.specs.iter().zip(&ds.images) {
            spec.validate(32).unwrap();
            prop_assert!(spec.radius > spec.thickness && spec.thickness > 0.0);
            // Pixel centers sit on integers, so the image spans [-0.5, 31.5].
            let reach = spec.radius + 2.0;
            for c in [spec.center.0, spec.center.1] {
                prop_assert!(c - reach >= -0.5 - 1e-4 && c + reach <= 31.5 + 1e-4);
            }
            prop_assert_eq!(img.shape(), &[1, 1, 32, 32]);
            prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bench_anchors_sit_on_the_ring_edge(id in 0u64..10_000) {
        let case = BenchCase::<f32>::generate(id, 32, &BenchConfig::default()).unwrap();
        let (cx, cy) = case.spec.center;
        for pair in &case.instruction.pairs {
            let r = ((pair.a.0 - cx).powi(2) + (pair.a.1 - cy).powi(2)).sqrt();
            prop_assert!((r - case.spec.radius).abs() <= 0.5, "anchor at radius {r}, edge {}", case.spec.radius);
        }
        case.instruction.validate(32).unwrap();
    }

    #[test]
    fn directions_are_unit(ax in -50.0f32..50.0, ay in -50.0f32..50.0, dx in -20.0f32..20.0, dy in -20.0f32..20.0) {
        prop_assume!(dx.abs() + dy.abs() > 1e-3);
        let v = normalized_direction((ax, ay), (ax + dx, ay + dy)).unwrap();
        prop_assert!(((v.0 as f64).hypot(v.1 as f64) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn losses_are_non_negative(vals in values(), ax in 2.0f32..5.0, ay in 2.0f32..5.0, lambda in 0.0f64..5.0) {
        let f = tensor(vec![3, 8, 8], vals.clone());
        let s_t = tensor(vec![3, 8, 8], vals.iter().map(|v| v * 0.5 + 0.1).collect());
        let mut tape = Tape::new();
        let fv = tape.leaf(f, true);
        let dir = normalized_direction((ax, ay), (ax + 1.0, ay + 0.5)).unwrap();
        let align = alignment_loss(&mut tape, fv, &[(ax, ay)], &[dir], 1).unwrap();
        let mask = Tensor::from_fn([8, 8], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let weight = mask_weight(&mask, &[3, 8, 8], lambda).unwrap();
        prop_assert!(weight.data().iter().all(|&w| w >= 0.0));
        let m = mask_loss(&mut tape, &s_t, fv, &weight).unwrap();
        prop_assert!(tape.value(align).data()[0] >= 0.0);
        prop_assert!(tape.value(m).data()[0] >= 0.0);
    }

    #[test]
    fn alignment_target_is_treated_as_constant(vals in values(), ax in 2.0f32..5.0, ay in 2.0f32..5.0, bx in -2.0f32..2.0, by in -2.0f32..2.0) {
        prop_assume!(bx.abs() + by.abs() > 0.1);
        let f = tensor(vec![2, 8, 8], vals);
        let dir = normalized_direction((ax, ay), (ax + bx, ay + by)).unwrap();
        let mut t1 = Tape::new();
        let v1 = t1.leaf(f.clone(), true);
        let l1 = alignment_loss(&mut t1, v1, &[(ax, ay)], &[dir], 1).unwrap();
        let g1 = t1.backward(l1).unwrap().get(v1).unwrap().clone();

        // Same loss written with the grid-point features as an explicit constant.
        let (px, py) = round_point((ax, ay));
        let mut fixed = Vec::new();
        let mut moved = Vec::new();
        for y in py - 1..=py + 1 {
            for x in px - 1..=px + 1 {
                fixed.extend(grid_feature(&f, x as usize, y as usize).unwrap());
                moved.push((x as f64 + dir.0 as f64, y as f64 + dir.1 as f64));
            }
        }
        let mut t2 = Tape::new();
        let v2 = t2.leaf(f, true);
        let sampled = t2.bilinear_sample_points(v2, &moved).unwrap();
        let target = t2.constant(Tensor::new([moved.len(), 2], fixed).unwrap());
        let l2 = t2.l1(sampled, target, None).unwrap();
        let g2 = t2.backward(l2).unwrap().get(v2).unwrap().clone();
        prop_assert_eq!(t1.value(l1).data(), t2.value(l2).data());
        for (a, b) in g1.data().iter().zip(g2.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tracking_moves_at_most_r2(vals in values(), ax in 2.0f32..13.0, ay in 2.0f32..13.0, r2 in 1usize..5, target in prop::collection::vec(-2.0f64..2.0, 2)) {
        // Callers clamp anchors into the margin window before tracking.
        let f = tensor(vec![2, 16, 16], vals);
        let out = track_anchors(&f, &[(ax, ay)], &[target], r2, 2).unwrap();
        let (rx, ry) = round_point((ax, ay));
        let (nx, ny) = (out[0].0 as i64, out[0].1 as i64);
        prop_assert!((nx - rx).abs().max((ny - ry).abs()) <= r2 as i64);
        prop_assert!((2..=13).contains(&nx) && (2..=13).contains(&ny));
    }

    #[test]
    fn downsampled_masks_stay_binary(bits in prop::collection::vec(any::<bool>(), 1024)) {
        let mask = Tensor::<f64>::new([32, 32], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        for size in [32, 16, 8] {
            let d = downsample_mask(&mask, (size, size)).unwrap();
            prop_assert!(d.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn fidelity_is_a_non_negative_symmetric_distance(a in values(), b in values(), bits in prop::collection::vec(any::<bool>(), 16)) {
        let x = tensor(vec![1, 1, 4, 4], a);
        let y = tensor(vec![1, 1, 4, 4], b);
        let mask = Tensor::new([1, 1, 4, 4], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        for m in [None, Some(&mask)] {
            let d = fidelity_mse(&x, &y, m).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, fidelity_mse(&y, &x, m).unwrap());
            prop_assert_eq!(fidelity_mse(&x, &x, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn drag_params_accept_exactly_the_valid_range(t_edit in 0usize..60, t_refine in 0usize..60, propagate in any::<bool>()) {
        let p = DragParams { t_edit, t_refine, propagate, ..DragParams::default() };
        let valid = t_refine < t_edit && t_edit <= 50;
        prop_assert_eq!(p.validate(50).is_ok(), valid);
        if valid {
            let steps = p.override_steps();
            prop_assert_eq!(steps[0], t_edit);
            prop_assert!(steps.iter().all(|&k| k > t_refine && k <= t_edit));
            prop_assert_eq!(steps.len(), if propagate { t_edit - t_refine } else { 1 });
        }
    }

    #[test]
    fn ddim_subsequence_is_strictly_increasing(k in 1usize..200) {
        let d = DdimSchedule::new(k, 1000).unwrap();
        prop_assert_eq!(d.tau.len(), k + 1);
        prop_assert_eq!(d.tau[0], 0);
        prop_assert!(d.tau.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(d.tau[k] <= 999);
    }

    #[test]
    fn paired_t_test_p_is_a_probability(a in prop::collection::vec(-1.0f64..1.0, 3..20), shift in -0.5f64..0.5) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift + (i as f64 * 0.37).sin() * 0.1).collect();
        let t = paired_t_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_less));
    }
}

#[test]
fn linear_schedule_is_monotone() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
    assert!(s.beta.windows(2).all(|w| w[0] < w[1]));
    assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
    assert!(s.alpha_bar[0] > 0.999);
}

#[test]
fn ring_radius_distribution_is_centred_near_nine() {
    let ds = gen_dataset::<f32>(1000, 7, 32).unwrap();
    let mean = ds.specs.iter().map(|s| s.radius as f64).sum::<f64>() / 1000.0;
    assert!((mean - 9.0).abs() < 0.5, "mean radius {mean}");
}

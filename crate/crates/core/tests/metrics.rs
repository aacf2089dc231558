mod common;

use common::{ssim_oracle, uniform};
use maect::autograd::Graph;
use maect::losses::{combined_loss, l1, rmse, ssim, ssim_support, LossConfig, SsimParams};
use maect::Tensor;
use proptest::prelude::*;

#[test]
fn ssim_matches_naive_sliding_window() {
    let p = SsimParams::default();
    for seed in 0..6 {
        let (h, w) = (16 + seed as usize, 24);
        let a = uniform(&[h, w], 0.0, 1.0, seed);
        let b = a.zip_map(&uniform(&[h, w], -0.2, 0.2, seed + 100), |x, n| x + n).unwrap();
        let got = ssim(&a, &b, &p).unwrap();
        let want = ssim_oracle(a.data(), b.data(), h, w, 11, 1.5, 1.0);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
    }
    let p7 = SsimParams {
        window_size: 7,
        sigma: 1.0,
        data_range: 2.0,
        ..p
    };
    let a = uniform(&[12, 12], 0.0, 2.0, 9);
    let b = uniform(&[12, 12], 0.0, 2.0, 10);
    let want = ssim_oracle(a.data(), b.data(), 12, 12, 7, 1.0, 2.0);
    assert!((ssim(&a, &b, &p7).unwrap() - want).abs() < 1e-6);
}

#[test]
fn ssim_of_identical_images_is_one() {
    let x = uniform(&[20, 20], 0.0, 1.0, 1);
    assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
    let flat = Tensor::full(&[16, 16], 0.4);
    assert!((ssim(&flat, &flat, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn rmse_dominates_l1() {
    for seed in 0..100 {
        let a = uniform(&[8, 8], 0.0, 1.0, seed);
        let b = uniform(&[8, 8], 0.0, 1.0, seed + 1000);
        assert!(rmse(&a, &b).unwrap() >= l1(&a, &b, None).unwrap());
    }
}

#[test]
fn masked_l1_counts_selected_pixels_only() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 10.0]).unwrap();
    let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(l1(&a, &b, Some(&m)).unwrap(), 2.0);
    assert_eq!(l1(&a, &b, Some(&Tensor::zeros(&[2, 2]))).unwrap(), 0.0);
}

#[test]
fn support_requires_whole_window() {
    let p = SsimParams::default();
    // Masked 16x16 block at the top-left of a 24x24 image.
    let m = Tensor::from_fn(&[24, 24], |k| if k / 24 < 16 && k % 24 < 16 { 1.0 } else { 0.0 });
    let s = ssim_support(&m, &p).unwrap();
    assert_eq!(s.len(), 14 * 14);
    for i in 0..14 {
        for j in 0..14 {
            let inside = i + 11 <= 16 && j + 11 <= 16;
            assert_eq!(s.data()[i * 14 + j], if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let x = uniform(&[1, 16, 16, 1], 0.0, 1.0, 3);
    let g = Graph::new();
    let loss = combined_loss(g.constant(x.clone()), &x, &LossConfig::default(), None).unwrap();
    assert!(loss.value().item().unwrap().abs() < 1e-12);
}

#[test]
fn empty_mask_loss_is_zero() {
    let x = uniform(&[1, 16, 16, 1], 0.0, 1.0, 3);
    let y = uniform(&[1, 16, 16, 1], 0.0, 1.0, 4);
    let g = Graph::new();
    let m = Tensor::zeros(&[1, 16, 16, 1]);
    let p = g.param(x);
    let loss = combined_loss(p, &y, &LossConfig::default(), Some(&m)).unwrap();
    assert_eq!(loss.value().item().unwrap(), 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get_or_zeros(p).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metric_invariants(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let a = uniform(&[h, w], 0.0, 1.0, seed);
        let b = uniform(&[h, w], 0.0, 1.0, seed ^ 1);
        let p = SsimParams::default();
        let s = ssim(&a, &b, &p).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        prop_assert!(rmse(&a, &b).unwrap() >= l1(&a, &b, None).unwrap());
        prop_assert!(l1(&a, &b, None).unwrap() >= 0.0);
        let g = Graph::new();
        let loss = combined_loss(g.constant(a.reshape(&[1, h, w, 1]).unwrap()), &b.reshape(&[1, h, w, 1]).unwrap(), &LossConfig::default(), None).unwrap();
        let v = loss.value().item().unwrap();
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}

//! Layers, suppression and evaluation against naive reference implementations.

mod common;

use cmt::eval::{log_avg_miss_rate, match_detections, DetLabel, ImageGts};
use cmt::layers::Conv2d;
use cmt::{Rng, Tensor};
use common::*;

#[test]
fn conv2d_matches_direct_loops() {
    assert_eq!(conv_campaign(100, 120), 0);
}

#[test]
fn conv2d_float_inputs_close_to_direct_loops() {
    let mut rng = Rng::new(101);
    let x = rng.normal_tensor(0.0, 1.0, &[2, 3, 8, 8]).unwrap();
    let w = rng.normal_tensor(0.0, 1.0, &[4, 3, 3, 3]).unwrap();
    let b = rng.normal_tensor(0.0, 1.0, &[4]).unwrap();
    let got = Conv2d::new(w.clone(), b.clone(), 1, 1).unwrap().forward(&x).unwrap();
    assert!(got.max_abs_diff(&conv_oracle(&x, &w, &b, 1, 1)) < 1e-12);
}

#[test]
fn conv_input_gradient_is_the_adjoint() {
    let mut rng = Rng::new(102);
    for _ in 0..20 {
        let stride = 1 + rng.below(2);
        let x = rng.normal_tensor(0.0, 1.0, &[1, 3, 7, 6]).unwrap();
        let w = rng.normal_tensor(0.0, 1.0, &[5, 3, 3, 3]).unwrap();
        let conv = Conv2d::new(w, Tensor::zeros(&[5]), stride, 1).unwrap();
        let y = conv.forward(&x).unwrap();
        let r = rng.normal_tensor(0.0, 1.0, y.shape()).unwrap();
        let dx = conv.backward(&x, &r).unwrap().input.unwrap();
        let lhs = y.dot(&r).unwrap();
        let rhs = x.dot(&dx).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_matches_window_scan() {
    assert_eq!(maxpool_campaign(103, 120), 0);
}

#[test]
fn roi_pool_matches_cell_max() {
    assert_eq!(roi_campaign(104, 120), 0);
}

#[test]
fn nms_matches_quadratic_reference() {
    assert_eq!(nms_campaign(105, 120), 0);
}

#[test]
fn three_detections_two_targets_fixture() {
    let (dets, gts) = three_two_fixture();
    let expect = exhaustive_labels(&dets, &gts, 0.5);
    assert_eq!(expect, vec![Some(1), Some(0), None]);
    let g = ImageGts { targets: gts, ignores: Vec::new() };
    let m = match_detections(&dets, &g, 0.5);
    let labels: Vec<DetLabel> = expect
        .iter()
        .map(|a| if a.is_some() { DetLabel::Tp } else { DetLabel::Fp })
        .collect();
    assert_eq!(m.labels, labels);
    assert_eq!(m.gt_matched, vec![true, true]);
}

#[test]
fn greedy_matching_matches_exhaustive_search() {
    assert_eq!(matching_campaign(106, 60), 0);
}

#[test]
fn ten_image_fixture_schedule() {
    let (dets, gts, cfg) = ten_image_fixture();
    assert!(sweep_matches(&dets, &gts, &cfg));
    let c = log_avg_miss_rate(&dets, &gts, &cfg).unwrap();
    // last point: 7 of 11 targets found with 5 false positives over 10 images
    let last = c.points.last().unwrap();
    assert_eq!(last.fppi, 0.5);
    assert!((last.miss_rate - 4.0 / 11.0).abs() < 1e-15);
}

#[test]
fn random_sets_match_sweep_oracle() {
    assert_eq!(eval_campaign(107, 50), 0);
}

//! Statistical properties of the synthetic scene and proposal generators.

use cmt::proposals::{synth_proposals, ProposalConfig};
use cmt::synthdata::{bilinear_sample, generate_scene, Condition, SceneConfig, ScenePair};
use cmt::{BBox, Rng, Tensor};

fn scene(seed: u64, condition: Condition) -> ScenePair {
    generate_scene(&SceneConfig::default(), condition, &mut Rng::new(seed)).unwrap()
}

/// Crop resampled onto a fixed 12 x 6 grid, all channels.
fn crop(img: &Tensor, b: &BBox) -> Vec<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(c * 72);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..12 {
            for j in 0..6 {
                let y = b.y1 + (i as f64 + 0.5) * b.height() / 12.0 - 0.5;
                let x = b.x1 + (j as f64 + 0.5) * b.width() / 6.0 - 0.5;
                out.push(bilinear_sample(plane, h, w, y, x));
            }
        }
    }
    out
}

/// Mean over dimensions of `(mu_a - mu_b)^2 / (var_a + var_b)`.
fn fisher(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |s: &[Vec<f64>], d: usize| {
        let n = s.len() as f64;
        let mu = s.iter().map(|v| v[d]).sum::<f64>() / n;
        let var = s.iter().map(|v| (v[d] - mu).powi(2)).sum::<f64>() / n;
        (mu, var)
    };
    let dims = a[0].len();
    (0..dims)
        .map(|d| {
            let (ma, va) = stats(a, d);
            let (mb, vb) = stats(b, d);
            (ma - mb).powi(2) / (va + vb).max(1e-12)
        })
        .sum::<f64>()
        / dims as f64
}

fn separability(condition: Condition, thermal: bool) -> f64 {
    let (mut peds, mut others) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        let s = scene(seed, condition);
        let img = if thermal { &s.thermal } else { &s.rgb };
        peds.extend(s.gts.iter().map(|b| crop(img, b)));
        others.extend(s.distractors.iter().map(|b| crop(img, b)));
    }
    fisher(&peds, &others)
}

#[test]
fn night_hurts_rgb_but_not_thermal_separability() {
    let rgb_day = separability(Condition::Day, false);
    let rgb_night = separability(Condition::Night, false);
    let th_day = separability(Condition::Day, true);
    let th_night = separability(Condition::Night, true);
    assert!(rgb_night < rgb_day, "rgb {rgb_day} -> {rgb_night}");
    assert_eq!(th_day, th_night);
    // the thermal signal is far stronger than the rgb one
    assert!(th_day > 2.0 * rgb_day, "thermal {th_day} rgb {rgb_day}");
}

#[test]
fn pedestrians_are_warmer_than_distractors() {
    let mean_in = |t: &Tensor, b: &BBox| crop(t, b).iter().sum::<f64>() / 72.0;
    for seed in 0..100 {
        let s = scene(seed, Condition::Night);
        for g in &s.gts {
            for d in &s.distractors {
                assert!(mean_in(&s.thermal, g) > mean_in(&s.thermal, d), "seed {seed}");
            }
        }
    }
}

#[test]
fn every_gt_has_a_close_proposal() {
    let cfg = ProposalConfig::default();
    for seed in 0..100 {
        let s = scene(seed, Condition::Day);
        let props = synth_proposals(&s.gts, &s.distractors, s.width(), s.height(), &mut Rng::new(seed + 1000), &cfg);
        for g in &s.gts {
            let best = props.iter().map(|p| p.bbox.iou(g)).fold(0.0, f64::max);
            assert!(best > 0.7, "seed {seed}: best IoU {best}");
        }
    }
}

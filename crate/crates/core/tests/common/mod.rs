//! Naive reference implementations and randomized comparison campaigns, shared by
//! the oracle tests and the acceptance run.

#![allow(dead_code)]

use cmt::eval::{
    filter_reasonable, log_avg_miss_rate, match_detections, DetLabel, EvalConfig, ImageGts, MR_FLOOR,
};
use cmt::inference::{nms, Detection};
use cmt::layers::{maxpool2d, roi_pool, Conv2d};
use cmt::{BBox, Rng, Tensor};

/// Small integers keep every product and partial sum exact in f64, so any
/// summation order gives the same bits.
pub fn int_tensor(rng: &mut Rng, shape: &[usize], lo: i64, hi: i64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (lo + rng.below((hi - lo + 1) as usize) as i64) as f64).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += x.get(&[ni, ic, y as usize, xx as usize]).unwrap()
                                        * w.get(&[oc, ic, u, v]).unwrap();
                                }
                            }
                        }
                    }
                    out.set(&[ni, oc, i, j], s).unwrap();
                }
            }
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for u in 0..window {
                        for v in 0..window {
                            m = m.max(x.get(&[ni, ci, i * stride + u, j * stride + v]).unwrap());
                        }
                    }
                    out.set(&[ni, ci, i, j], m).unwrap();
                }
            }
        }
    }
    out
}

/// Cell maxima over the outward-rounded feature window of each roi.
pub fn roi_pool_oracle(x: &Tensor, rois: &[BBox], scale: f64, out: usize) -> Tensor {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut res = Tensor::zeros(&[rois.len(), c, out, out]);
    for (r, roi) in rois.iter().enumerate() {
        let x0 = ((roi.x1 * scale).floor().max(0.0) as usize).min(w);
        let x1 = ((roi.x2 * scale).ceil() as usize).min(w);
        let y0 = ((roi.y1 * scale).floor().max(0.0) as usize).min(h);
        let y1 = ((roi.y2 * scale).ceil() as usize).min(h);
        let (rh, rw) = ((y1 - y0) as f64, (x1 - x0) as f64);
        for ci in 0..c {
            for ph in 0..out {
                for pw in 0..out {
                    let hs = y0 + (ph as f64 * rh / out as f64).floor() as usize;
                    let he = y0 + ((ph + 1) as f64 * rh / out as f64).ceil() as usize;
                    let ws = x0 + (pw as f64 * rw / out as f64).floor() as usize;
                    let we = x0 + ((pw + 1) as f64 * rw / out as f64).ceil() as usize;
                    let mut m = f64::NEG_INFINITY;
                    for y in hs..he.min(y1) {
                        for xx in ws..we.min(x1) {
                            m = m.max(x.get(&[0, ci, y, xx]).unwrap());
                        }
                    }
                    res.set(&[r, ci, ph, pw], if m == f64::NEG_INFINITY { 0.0 } else { m }).unwrap();
                }
            }
        }
    }
    res
}

/// Every partial injective det->gt assignment, filtered by the greedy conditions.
pub fn exhaustive_labels(dets: &[Detection], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let (nd, ng) = (dets.len(), gts.len());
    let mut found = Vec::new();
    let total = (ng + 1).pow(nd as u32);
    for code in 0..total {
        let mut a = Vec::with_capacity(nd);
        let mut c = code;
        for _ in 0..nd {
            a.push(match c % (ng + 1) {
                0 => None,
                j => Some(j - 1),
            });
            c /= ng + 1;
        }
        let consistent = (0..nd).all(|i| {
            let taken: Vec<usize> = a[..i].iter().flatten().copied().collect();
            let free: Vec<usize> = (0..ng).filter(|j| !taken.contains(j)).collect();
            let best = free
                .iter()
                .map(|&j| dets[i].bbox.iou(&gts[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            match a[i] {
                None => best < thr,
                Some(j) => {
                    let v = dets[i].bbox.iou(&gts[j]);
                    free.contains(&j)
                        && v >= thr
                        && v == best
                        && free.iter().all(|&k| k >= j || dets[i].bbox.iou(&gts[k]) < v)
                }
            }
        });
        if consistent {
            found.push(a);
        }
    }
    assert_eq!(found.len(), 1, "greedy assignment must be unique");
    found.pop().unwrap()
}

pub fn random_box(rng: &mut Rng, extent: f64) -> BBox {
    let x1 = rng.range(0.0, extent);
    let y1 = rng.range(0.0, extent);
    BBox::new(x1, y1, x1 + rng.range(1.0, extent / 2.0), y1 + rng.range(1.0, extent / 2.0)).unwrap()
}

/// Quadratic reference: a detection survives iff no surviving detection that
/// precedes it (higher score, or equal score and smaller index) overlaps it.
pub fn nms_oracle(dets: &[Detection], delta: f64) -> Vec<Detection> {
    let n = dets.len();
    let precedes = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by_key(|&i| (0..n).filter(|&j| precedes(j, i)).count());
    let mut alive = vec![false; n];
    for &i in &rank {
        alive[i] = (0..n).all(|j| !(alive[j] && precedes(j, i) && dets[j].bbox.iou(&dets[i].bbox) > delta));
    }
    rank.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
}

/// Threshold sweep from scratch: every distinct score is a threshold, and each
/// threshold re-runs matching on the detections at or above it. Returns the
/// `(fppi, miss_rate)` curve and the log-average miss rate.
pub fn sweep_oracle(dets: &[Vec<Detection>], gts: &[ImageGts], cfg: &EvalConfig) -> (Vec<(f64, f64)>, f64) {
    let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let n_targets: usize = gts.iter().map(|g| g.targets.len()).sum();
    let mut curve = Vec::new();
    for &t in &scores {
        let (mut tp, mut fp) = (0, 0);
        for (d, g) in dets.iter().zip(gts) {
            let mut kept: Vec<Detection> = d.iter().filter(|x| x.score >= t).copied().collect();
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut used = vec![false; g.targets.len()];
            for x in &kept {
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in g.targets.iter().enumerate() {
                    let v = x.bbox.iou(gt);
                    if !used[j] && v >= cfg.iou_match && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                } else if !g.ignores.iter().any(|ig| x.bbox.iou(ig) >= cfg.iou_match) {
                    fp += 1;
                }
            }
        }
        curve.push((fp as f64 / gts.len() as f64, 1.0 - tp as f64 / n_targets as f64));
    }
    let worst = curve.iter().map(|p| p.1).fold(f64::NAN, f64::max);
    let refs: Vec<f64> = cfg
        .fppi_points
        .iter()
        .map(|&r| {
            // the miss rate never rises as fppi grows, so the lowest qualifying
            // miss rate is the one at the largest qualifying fppi
            let best = curve.iter().filter(|p| p.0 <= r).map(|p| p.1).fold(f64::NAN, f64::min);
            if !best.is_nan() {
                best
            } else if !worst.is_nan() {
                worst
            } else {
                1.0
            }
        })
        .collect();
    let mean_ln = refs.iter().map(|m| m.max(MR_FLOOR).ln()).sum::<f64>() / refs.len() as f64;
    (curve, mean_ln.exp())
}

/// Whether the library curve and summary equal the sweep oracle exactly.
pub fn sweep_matches(dets: &[Vec<Detection>], gts: &[ImageGts], cfg: &EvalConfig) -> bool {
    let got = log_avg_miss_rate(dets, gts, cfg).unwrap();
    let (curve, lamr) = sweep_oracle(dets, gts, cfg);
    let pts: Vec<(f64, f64)> = got.points.iter().map(|p| (p.fppi, p.miss_rate)).collect();
    pts == curve && got.log_avg_mr == lamr
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn det(bbox: BBox, score: f64) -> Detection {
    Detection { bbox, score }
}

/// Ten images with a known schedule: seven of eleven targets found, five false
/// positives, two hits on ignore regions.
pub fn ten_image_fixture() -> (Vec<Vec<Detection>>, Vec<ImageGts>, EvalConfig) {
    let cfg = EvalConfig::for_image_height(800);
    let tall = |x: f64| b(x, 0.0, x + 30.0, 100.0);
    let short = |x: f64| b(x, 0.0, x + 15.0, 40.0);
    let gts: Vec<ImageGts> = (0..10)
        .map(|i| {
            let mut raw = vec![tall(0.0)];
            if i % 2 == 1 {
                raw.push(short(200.0));
            }
            if i == 3 {
                raw.push(tall(100.0));
            }
            filter_reasonable(&raw, &cfg)
        })
        .collect();
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); 10];
    for (i, d) in dets.iter_mut().enumerate().take(6) {
        d.push(det(tall(1.0), 0.95 - 0.05 * i as f64));
    }
    dets[0].push(det(tall(2.0), 0.9));
    dets[2].push(det(tall(400.0), 0.88));
    dets[5].push(det(tall(400.0), 0.6));
    dets[7].push(det(tall(400.0), 0.6));
    dets[1].push(det(short(200.0), 0.85));
    dets[3].push(det(short(200.0), 0.4));
    dets[3].push(det(tall(100.0), 0.3));
    dets[9].push(det(tall(500.0), 0.2));
    (dets, gts, cfg)
}

/// Random detection/ground-truth set with tied scores and ignore regions.
pub fn random_eval_set(rng: &mut Rng) -> (Vec<Vec<Detection>>, Vec<ImageGts>, EvalConfig) {
    let cfg = EvalConfig::for_image_height(128);
    let n_img = 1 + rng.below(8);
    let mut gts: Vec<ImageGts> = (0..n_img)
        .map(|_| {
            let raw: Vec<BBox> = (0..rng.below(4)).map(|_| random_box(rng, 40.0)).collect();
            filter_reasonable(&raw, &cfg)
        })
        .collect();
    if gts.iter().all(|g| g.targets.is_empty()) {
        gts[0].targets.push(b(0.0, 0.0, 10.0, 30.0));
    }
    let dets = gts
        .iter()
        .map(|g| {
            let mut d: Vec<Detection> = (0..rng.below(6))
                .map(|_| det(random_box(rng, 40.0), (rng.below(20) as f64) / 20.0))
                .collect();
            for t in g.targets.iter().chain(&g.ignores) {
                if rng.bernoulli(0.6) {
                    d.push(det(*t, (rng.below(20) as f64) / 20.0));
                }
            }
            d
        })
        .collect();
    (dets, gts, cfg)
}

/// Number of mismatching instances out of `n` random convolutions.
pub fn conv_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|_| {
            let k = 1 + rng.below(3);
            let stride = 1 + rng.below(2);
            let pad = rng.below(k);
            let (bn, c, o) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(6));
            let (h, w) = (k + rng.below(6), k + rng.below(6));
            let x = int_tensor(&mut rng, &[bn, c, h, w], -4, 4);
            let wt = int_tensor(&mut rng, &[o, c, k, k], -3, 3);
            let bias = int_tensor(&mut rng, &[o], -2, 2);
            let got = Conv2d::new(wt.clone(), bias.clone(), stride, pad).unwrap().forward(&x).unwrap();
            got != conv_oracle(&x, &wt, &bias, stride, pad)
        })
        .count()
}

pub fn maxpool_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|_| {
            let window = 1 + rng.below(3);
            let stride = 1 + rng.below(3);
            let (bn, c) = (1 + rng.below(2), 1 + rng.below(3));
            let (h, w) = (window + rng.below(8), window + rng.below(8));
            let x = rng.normal_tensor(0.0, 1.0, &[bn, c, h, w]).unwrap();
            maxpool2d(&x, window, stride).unwrap().output != maxpool_oracle(&x, window, stride)
        })
        .count()
}

pub fn roi_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|_| {
            let (c, h, w) = (1 + rng.below(3), 2 + rng.below(9), 2 + rng.below(9));
            let scale = [1.0, 0.5, 0.25, 1.0 / 16.0][rng.below(4)];
            let out = 1 + rng.below(7);
            let x = rng.normal_tensor(0.0, 1.0, &[1, c, h, w]).unwrap();
            let (iw, ih) = (w as f64 / scale, h as f64 / scale);
            let rois: Vec<BBox> = (0..1 + rng.below(4))
                .map(|_| {
                    let x1 = rng.range(0.0, iw - 1.0);
                    let y1 = rng.range(0.0, ih - 1.0);
                    BBox::new(x1, y1, rng.range(x1 + 0.5, iw), rng.range(y1 + 0.5, ih)).unwrap()
                })
                .collect();
            roi_pool(&x, &rois, scale, out).unwrap().output != roi_pool_oracle(&x, &rois, scale, out)
        })
        .count()
}

pub fn nms_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|&case| {
            let count = if case < 20 { 200 } else { rng.below(40) };
            let dets: Vec<Detection> = (0..count)
                .map(|_| Detection {
                    bbox: random_box(&mut rng, 60.0),
                    // coarse scores produce ties
                    score: (rng.below(10) as f64) / 10.0,
                })
                .collect();
            let delta = if case % 7 == 0 { [0.0, 1.0][case % 2] } else { rng.uniform() };
            nms(&dets, delta) != nms_oracle(&dets, delta)
        })
        .count()
}

pub fn eval_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|_| {
            let (d, g, c) = random_eval_set(&mut rng);
            !sweep_matches(&d, &g, &c)
        })
        .count()
}

/// Greedy matching against exhaustive search; returns mismatching cases.
pub fn matching_campaign(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    (0..n)
        .filter(|_| {
            let gts: Vec<BBox> = (0..rng.below(3) + 1).map(|_| random_box(&mut rng, 20.0)).collect();
            let mut dets: Vec<Detection> = (0..rng.below(4) + 1)
                .map(|_| {
                    let g = gts[rng.below(gts.len())];
                    let j = |r: &mut Rng| r.range(-3.0, 3.0);
                    let bbox = BBox::new(g.x1 + j(&mut rng), g.y1 + j(&mut rng), g.x2 + j(&mut rng), g.y2 + j(&mut rng))
                        .unwrap_or(g);
                    Detection { bbox, score: rng.uniform() }
                })
                .collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let expect = exhaustive_labels(&dets, &gts, 0.5);
            let m = match_detections(&dets, &ImageGts { targets: gts, ignores: Vec::new() }, 0.5);
            let got: Vec<bool> = m.labels.iter().map(|&l| l == DetLabel::Tp).collect();
            got != expect.iter().map(Option::is_some).collect::<Vec<_>>()
        })
        .count()
}

/// The first detection overlaps both targets but prefers the second; the
/// second detection then only has the first target left.
pub fn three_two_fixture() -> (Vec<Detection>, Vec<BBox>) {
    let gts = vec![b(0.0, 0.0, 10.0, 20.0), b(4.0, 0.0, 14.0, 20.0)];
    let dets = vec![det(b(3.0, 0.0, 13.0, 20.0), 0.9), det(b(2.0, 0.0, 12.0, 20.0), 0.8), det(b(1.0, 0.0, 11.0, 20.0), 0.7)];
    (dets, gts)
}

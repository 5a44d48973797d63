//! Miss rate versus false positives per image, and its log-average over nine
//! reference points.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::Detection;
use crate::proposals::BBox;

/// Height of the reference frame the 55-pixel rule refers to.
pub const REFERENCE_HEIGHT: f64 = 800.0;
/// Minimum pedestrian height at the reference scale.
pub const REFERENCE_MIN_HEIGHT: f64 = 55.0;

/// Nine log-spaced points from 1e-2 to 1e0.
pub fn fppi_points() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + k as f64 / 4.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_match: f64,
    /// Boxes not taller than this are ignore regions.
    pub min_height_px: f64,
    pub fppi_points: Vec<f64>,
}

impl EvalConfig {
    /// The 55-pixel rule scaled from an 800-pixel frame to `image_height`.
    pub fn for_image_height(image_height: usize) -> Self {
        EvalConfig {
            iou_match: 0.5,
            min_height_px: REFERENCE_MIN_HEIGHT * image_height as f64 / REFERENCE_HEIGHT,
            fppi_points: fppi_points(),
        }
    }
}

/// Ground truth of one image after the height filter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageGts {
    pub targets: Vec<BBox>,
    pub ignores: Vec<BBox>,
}

pub fn filter_reasonable(gts: &[BBox], cfg: &EvalConfig) -> ImageGts {
    let (targets, ignores) = gts.iter().partition(|b| b.height() > cfg.min_height_px);
    ImageGts { targets, ignores }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetLabel {
    Tp,
    Fp,
    /// Matched an ignore region: neither true nor false positive.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub labels: Vec<DetLabel>,
    pub gt_matched: Vec<bool>,
}

/// Index of the highest-IoU candidate with IoU >= `thr` (first on ties).
fn best_match<'a>(det: &BBox, boxes: impl Iterator<Item = (usize, &'a BBox)>, thr: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in boxes {
        let v = det.iou(g);
        if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Greedy matching of detections (sorted by descending score) in order: the best
/// unmatched target, else the best ignore region, else a false positive.
pub fn match_detections(dets: &[Detection], gts: &ImageGts, iou_match: f64) -> ImageMatch {
    let mut gt_matched = vec![false; gts.targets.len()];
    let labels = dets
        .iter()
        .map(|d| {
            let free = gts.targets.iter().enumerate().filter(|(j, _)| !gt_matched[*j]);
            if let Some(j) = best_match(&d.bbox, free, iou_match) {
                gt_matched[j] = true;
                DetLabel::Tp
            } else if best_match(&d.bbox, gts.ignores.iter().enumerate(), iou_match).is_some() {
                DetLabel::Ignored
            } else {
                DetLabel::Fp
            }
        })
        .collect();
    ImageMatch { labels, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<CurvePoint>,
    /// Miss rate sampled at each reference FPPI.
    pub reference: Vec<f64>,
    pub log_avg_mr: f64,
}

/// Lower bound applied to miss rates before taking logs.
pub const MR_FLOOR: f64 = 1e-10;

fn sorted_desc(dets: &[Detection]) -> Vec<Detection> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    d
}

/// Sample a curve at the reference points: the miss rate of the largest achieved
/// FPPI not above the point (lowest miss rate among equal FPPI), else the highest
/// miss rate on the curve, else 1 for an empty curve.
pub fn sample_reference(points: &[CurvePoint], refs: &[f64]) -> Vec<f64> {
    let highest = points.iter().map(|p| p.miss_rate).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    refs.iter()
        .map(|&r| {
            let mut best: Option<&CurvePoint> = None;
            for p in points.iter().filter(|p| p.fppi <= r) {
                best = match best {
                    Some(b) if b.fppi > p.fppi || (b.fppi == p.fppi && b.miss_rate <= p.miss_rate) => Some(b),
                    _ => Some(p),
                };
            }
            best.map(|p| p.miss_rate).or(highest).unwrap_or(1.0)
        })
        .collect()
}

/// Geometric mean of floored miss rates.
pub fn log_average(mrs: &[f64]) -> f64 {
    (mrs.iter().map(|m| m.max(MR_FLOOR).ln()).sum::<f64>() / mrs.len() as f64).exp()
}

/// Sweep the score threshold over every distinct detection score.
pub fn log_avg_miss_rate(dets: &[Vec<Detection>], gts: &[ImageGts], cfg: &EvalConfig) -> Result<EvalCurve> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    let n_targets: usize = gts.iter().map(|g| g.targets.len()).sum();
    if n_targets == 0 {
        return Err(Error::invalid("no evaluation targets: miss rate is undefined"));
    }
    // matching in score order only depends on higher-scoring detections, so one
    // pass per image labels every detection for every threshold
    let mut scored: Vec<(f64, DetLabel)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let sorted = sorted_desc(d);
        let m = match_detections(&sorted, g, cfg.iou_match);
        scored.extend(sorted.iter().map(|x| x.score).zip(m.labels));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_images = gts.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            match scored[i].1 {
                DetLabel::Tp => tp += 1,
                DetLabel::Fp => fp += 1,
                DetLabel::Ignored => {}
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: s,
            fppi: fp as f64 / n_images,
            miss_rate: 1.0 - tp as f64 / n_targets as f64,
        });
    }
    let reference = sample_reference(&points, &cfg.fppi_points);
    Ok(EvalCurve {
        log_avg_mr: log_average(&reference),
        points,
        reference,
    })
}

/// CSV with header `threshold,fppi,miss_rate`.
pub fn format_curve(curve: &EvalCurve) -> String {
    let mut s = String::from("threshold,fppi,miss_rate\n");
    for p in &curve.points {
        writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.fppi, p.miss_rate).unwrap();
    }
    s
}

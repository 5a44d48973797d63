//! WebAssembly bindings for the demo page in `www/`: render a synthetic RGB and
//! thermal frame, run greedy suppression over its proposals, and trace the miss
//! rate curve of a simulated detector.

use cmt::eval::{filter_reasonable, log_avg_miss_rate, EvalConfig, ImageGts};
use cmt::inference::{nms, Detection};
use cmt::synthdata::{generate_frame, DatasetConfig, Frame};
use cmt::{Rng, Tensor};
use wasm_bindgen::prelude::*;

fn to_js(e: cmt::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn frame(seed: u64, night: bool) -> Result<Frame, cmt::Error> {
    let cfg = DatasetConfig {
        frames: 1,
        night_frac: if night { 1.0 } else { 0.0 },
        seed,
        ..Default::default()
    };
    generate_frame(&cfg, 0)
}

/// `C x H x W` image in `[0, 1]` as RGBA bytes. One channel is drawn as gray.
pub fn rgba(img: &Tensor) -> Vec<u8> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h * w {
        for k in 0..3 {
            out.push(byte(d[k.min(c - 1) * h * w + i]));
        }
        out.push(255);
    }
    out
}

fn flat(dets: &[Detection]) -> Vec<f64> {
    dets.iter()
        .flat_map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score])
        .collect()
}

#[wasm_bindgen]
pub struct Scene {
    frame: Frame,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, night: bool) -> Result<Scene, JsError> {
        Ok(Scene { frame: frame(seed, night).map_err(to_js)? })
    }

    pub fn width(&self) -> usize {
        self.frame.scene.width()
    }

    pub fn height(&self) -> usize {
        self.frame.scene.height()
    }

    pub fn rgb_rgba(&self) -> Vec<u8> {
        rgba(&self.frame.scene.rgb)
    }

    pub fn thermal_rgba(&self) -> Vec<u8> {
        rgba(&self.frame.scene.thermal)
    }

    /// Pedestrian boxes, four numbers each.
    pub fn gts(&self) -> Vec<f64> {
        self.frame.scene.gts.iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2]).collect()
    }

    /// Proposals as `x1, y1, x2, y2, score` quintuples.
    pub fn proposals(&self) -> Vec<f64> {
        flat(&self.detections())
    }

    /// Proposals that survive suppression at overlap `delta`, same layout.
    pub fn suppress(&self, delta: f64) -> Vec<f64> {
        flat(&nms(&self.detections(), delta))
    }

    fn detections(&self) -> Vec<Detection> {
        self.frame
            .proposals
            .iter()
            .map(|p| Detection { bbox: p.bbox, score: p.score })
            .collect()
    }
}

#[wasm_bindgen]
pub struct Curve {
    points: Vec<f64>,
    log_avg_mr: f64,
}

#[wasm_bindgen]
impl Curve {
    /// `fppi, miss_rate` pairs in threshold order.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn log_avg_mr(&self) -> f64 {
        self.log_avg_mr
    }
}

/// Score every proposal by its best overlap with a pedestrian plus Gaussian noise
/// of standard deviation `noise`, suppress, and evaluate over `frames` scenes.
pub fn simulate(seed: u64, frames: usize, night_frac: f64, noise: f64) -> Result<(Vec<f64>, f64), cmt::Error> {
    let cfg = DatasetConfig {
        frames,
        night_frac,
        seed,
        ..Default::default()
    };
    let ec = EvalConfig::for_image_height(cfg.scene.height);
    let mut rng = Rng::derive(seed, 99);
    let (mut dets, mut gts): (Vec<Vec<Detection>>, Vec<ImageGts>) = (Vec::new(), Vec::new());
    for id in 0..frames {
        let f = generate_frame(&cfg, id)?;
        let scored: Vec<Detection> = f
            .proposals
            .iter()
            .map(|p| {
                let best = f.scene.gts.iter().map(|g| g.iou(&p.bbox)).fold(0.0, f64::max);
                Detection { bbox: p.bbox, score: best + noise * rng.normal() }
            })
            .collect();
        dets.push(nms(&scored, 0.5));
        gts.push(filter_reasonable(&f.scene.gts, &ec));
    }
    let curve = log_avg_miss_rate(&dets, &gts, &ec)?;
    let points = curve.points.iter().flat_map(|p| [p.fppi, p.miss_rate]).collect();
    Ok((points, curve.log_avg_mr))
}

#[wasm_bindgen]
pub fn noisy_detector_curve(seed: u64, frames: usize, night_frac: f64, noise: f64) -> Result<Curve, JsError> {
    let (points, log_avg_mr) = simulate(seed, frames, night_frac, noise).map_err(to_js)?;
    Ok(Curve { points, log_avg_mr })
}

//! Pixel-level transforms: thermal clean-up, bilinear resampling and mirroring.

use crate::proposals::{BBox, Proposal};
use crate::synthdata::dataset::Frame;
use crate::synthdata::ScenePair;
use crate::tensor::Tensor;

fn chw(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => panic!("expected a CxHxW image, got {s:?}"),
    }
}

/// 3x3 median (edge pixels use the clamped neighbourhood) followed by global
/// 256-bin histogram equalisation onto `[0, 1]`. A flat image maps to 0.5.
pub fn preprocess_thermal(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let mut out = Tensor::zeros_like(t);
    for ch in 0..c {
        let src = &t.data()[ch * h * w..(ch + 1) * h * w];
        let mut med = vec![0.0; h * w];
        let mut window = Vec::with_capacity(9);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        window.push(src[yy * w + xx]);
                    }
                }
                window.sort_by(f64::total_cmp);
                med[y * w + x] = window[window.len() / 2];
            }
        }
        let bin = |v: f64| ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255);
        let mut hist = [0usize; 256];
        for &v in &med {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (k, &n) in hist.iter().enumerate() {
            acc += n;
            cdf[k] = acc;
        }
        let total = h * w;
        let cdf_min = cdf[hist.iter().position(|&n| n > 0).unwrap_or(0)];
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (d, &v) in dst.iter_mut().zip(&med) {
            *d = if total == cdf_min {
                0.5
            } else {
                (cdf[bin(v)] - cdf_min) as f64 / (total - cdf_min) as f64
            };
        }
    }
    out
}

/// Bilinear sample of one `h x w` plane at continuous pixel-center coordinates
/// `(y, x)`; coordinates are clamped to the outermost pixel centers.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Aspect-preserving bilinear resize of a `C x H x W` image to height `new_h`
/// (half-pixel-center alignment). Width becomes `round(W * new_h / H)`.
pub fn resize_image(img: &Tensor, new_h: usize) -> Tensor {
    let (c, h, w) = chw(img);
    let new_h = new_h.max(1);
    if new_h == h {
        return img.clone();
    }
    let new_w = ((w as f64 * new_h as f64 / h as f64).round() as usize).max(1);
    let (sy, sx) = (h as f64 / new_h as f64, w as f64 / new_w as f64);
    let mut out = Tensor::zeros(&[c, new_h, new_w]);
    for ch in 0..c {
        let src = &img.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * new_h * new_w..(ch + 1) * new_h * new_w];
        for y in 0..new_h {
            for x in 0..new_w {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                let fx = (x as f64 + 0.5) * sx - 0.5;
                dst[y * new_w + x] = bilinear_sample(src, h, w, fy, fx);
            }
        }
    }
    out
}

pub fn scale_boxes(boxes: &[BBox], factor: f64) -> Vec<BBox> {
    boxes.iter().map(|b| b.scale(factor)).collect()
}

/// Mirror every row of a `C x H x W` image.
pub fn hflip_image(t: &Tensor) -> Tensor {
    let (_, _, w) = chw(t);
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Mirror both modalities and every box about the vertical axis.
pub fn hflip(pair: &ScenePair) -> ScenePair {
    let w = pair.width() as f64;
    ScenePair {
        rgb: hflip_image(&pair.rgb),
        thermal: hflip_image(&pair.thermal),
        gts: pair.gts.iter().map(|b| b.hflip(w)).collect(),
        distractors: pair.distractors.iter().map(|b| b.hflip(w)).collect(),
        condition: pair.condition,
    }
}

/// [`hflip`] for a frame, proposals included.
pub fn hflip_frame(frame: &Frame) -> Frame {
    let w = frame.scene.width() as f64;
    Frame {
        id: frame.id,
        scene: hflip(&frame.scene),
        proposals: frame
            .proposals
            .iter()
            .map(|p| Proposal {
                bbox: p.bbox.hflip(w),
                score: p.score,
            })
            .collect(),
    }
}

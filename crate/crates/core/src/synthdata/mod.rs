//! Synthetic aligned RGB-thermal street scenes.
//!
//! Pedestrians are two-tone upright figures (head, torso, legs) that are warm in the
//! thermal channel. Distractors (poles, signs, bushes) borrow pedestrian colours and
//! proportions but are cold. At night the RGB contrast collapses and sensor noise
//! grows while the thermal channel is untouched, so the discriminating signal only
//! survives in thermal.

pub mod dataset;
pub mod image;
pub mod netpbm;

pub use dataset::{
    generate_dataset, generate_frame, night_assignment, read_dataset, read_manifest, write_dataset, DatasetConfig, Frame, ManifestEntry,
};
pub use image::{bilinear_sample, hflip, hflip_frame, hflip_image, preprocess_thermal, resize_image, scale_boxes};

use crate::error::{Error, Result};
use crate::proposals::BBox;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Day,
    Night,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "day" => Some(Condition::Day),
            "night" => Some(Condition::Night),
            _ => None,
        }
    }
}

/// One aligned sample. `rgb` is `3 x H x W`, `thermal` is `1 x H x W`, both in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub gts: Vec<BBox>,
    /// Pedestrian-like clutter. Not annotated as targets.
    pub distractors: Vec<BBox>,
    pub condition: Condition,
}

impl ScenePair {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of pedestrians per scene.
    pub pedestrians: (usize, usize),
    /// Inclusive range of distractors per scene.
    pub distractors: (usize, usize),
    /// Object height as a fraction of image height.
    pub object_height: (f64, f64),
    /// Multiplier on RGB contrast at night, in `(0, 1]`.
    pub night_contrast: f64,
    /// Pixel noise added to both modalities.
    pub noise_sigma: f64,
    /// Extra RGB noise at night.
    pub night_noise: f64,
    /// Largest IoU allowed between two placed objects.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 96,
            pedestrians: (1, 3),
            distractors: (1, 3),
            object_height: (0.3, 0.6),
            night_contrast: 0.3,
            noise_sigma: 0.02,
            night_noise: 0.06,
            max_overlap: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.height >= 16
            && self.width >= 16
            && self.pedestrians.0 <= self.pedestrians.1
            && self.distractors.0 <= self.distractors.1
            && self.object_height.0 > 0.0
            && self.object_height.0 <= self.object_height.1
            && self.object_height.1 <= 1.0
            && self.night_contrast > 0.0
            && self.night_contrast <= 1.0
            && self.noise_sigma >= 0.0
            && self.night_noise >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid scene config {self:?}")));
        }
        Ok(())
    }
}

/// Aspect ratio (width / height) of pedestrian boxes.
pub const PEDESTRIAN_ASPECT: f64 = 0.41;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Pedestrian,
    Pole,
    Sign,
    Bush,
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    thermal: Vec<f64>,
}

impl Canvas {
    fn paint_rgb(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let plane = self.h * self.w;
        for (k, v) in c.iter().enumerate() {
            self.rgb[k * plane + y * self.w + x] = *v;
        }
    }

    /// Fill the part of an axis-aligned rectangle (fractions of `b`) that lies in the image.
    fn rect(&mut self, b: &BBox, fx: (f64, f64), fy: (f64, f64), mut f: impl FnMut(&mut Canvas, usize, usize)) {
        let x0 = (b.x1 + fx.0 * b.width()).round().max(0.0) as usize;
        let x1 = ((b.x1 + fx.1 * b.width()).round() as usize).min(self.w);
        let y0 = (b.y1 + fy.0 * b.height()).round().max(0.0) as usize;
        let y1 = ((b.y1 + fy.1 * b.height()).round() as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                f(self, y, x);
            }
        }
    }

    /// Fill an ellipse given by center and radii in fractions of `b`.
    fn ellipse(&mut self, b: &BBox, c: (f64, f64), r: (f64, f64), mut f: impl FnMut(&mut Canvas, usize, usize)) {
        let cx = b.x1 + c.0 * b.width();
        let cy = b.y1 + c.1 * b.height();
        let rx = (r.0 * b.width()).max(0.5);
        let ry = (r.1 * b.height()).max(0.5);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(self.w);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    f(self, y, x);
                }
            }
        }
    }
}

fn mid_tone(rng: &mut Rng) -> [f64; 3] {
    let base = rng.range(0.15, 0.85);
    [
        (base + rng.gaussian(0.0, 0.08)).clamp(0.0, 1.0),
        (base + rng.gaussian(0.0, 0.08)).clamp(0.0, 1.0),
        (base + rng.gaussian(0.0, 0.08)).clamp(0.0, 1.0),
    ]
}

fn draw(canvas: &mut Canvas, shape: Shape, b: &BBox, rng: &mut Rng) {
    let upper = mid_tone(rng);
    let lower = mid_tone(rng);
    match shape {
        Shape::Pedestrian => {
            let skin = [
                rng.range(0.45, 0.85),
                rng.range(0.35, 0.7),
                rng.range(0.25, 0.6),
            ];
            let body_heat = rng.range(0.8, 0.9);
            let head_heat = (body_heat + 0.08).min(1.0);
            let stride = rng.range(-0.04, 0.04);
            canvas.rect(b, (0.2, 0.8), (0.18, 0.56), |c, y, x| {
                c.paint_rgb(y, x, upper);
                c.thermal[y * c.w + x] = body_heat;
            });
            canvas.rect(b, (0.22 + stride, 0.46 + stride), (0.55, 1.0), |c, y, x| {
                c.paint_rgb(y, x, lower);
                c.thermal[y * c.w + x] = body_heat - 0.05;
            });
            canvas.rect(b, (0.54 - stride, 0.78 - stride), (0.55, 1.0), |c, y, x| {
                c.paint_rgb(y, x, lower);
                c.thermal[y * c.w + x] = body_heat - 0.05;
            });
            canvas.ellipse(b, (0.5, 0.1), (0.2, 0.09), |c, y, x| {
                c.paint_rgb(y, x, skin);
                c.thermal[y * c.w + x] = head_heat;
            });
        }
        Shape::Pole => {
            let split = rng.range(0.4, 0.6);
            let (x0, x1) = (0.38, 0.62);
            let chill = rng.range(0.04, 0.1);
            canvas.rect(b, (x0, x1), (0.0, split), |c, y, x| {
                c.paint_rgb(y, x, upper);
                c.thermal[y * c.w + x] -= chill;
            });
            canvas.rect(b, (x0, x1), (split, 1.0), |c, y, x| {
                c.paint_rgb(y, x, lower);
                c.thermal[y * c.w + x] -= chill;
            });
        }
        Shape::Sign => {
            let chill = rng.range(0.04, 0.1);
            canvas.rect(b, (0.44, 0.56), (0.3, 1.0), |c, y, x| {
                c.paint_rgb(y, x, lower);
                c.thermal[y * c.w + x] -= chill;
            });
            canvas.rect(b, (0.1, 0.9), (0.0, 0.35), |c, y, x| {
                c.paint_rgb(y, x, upper);
                c.thermal[y * c.w + x] -= chill;
            });
        }
        Shape::Bush => {
            let chill = rng.range(0.02, 0.08);
            canvas.ellipse(b, (0.5, 0.62), (0.5, 0.38), |c, y, x| {
                c.paint_rgb(y, x, lower);
                c.thermal[y * c.w + x] -= chill;
            });
            canvas.ellipse(b, (0.5, 0.3), (0.35, 0.28), |c, y, x| {
                c.paint_rgb(y, x, upper);
                c.thermal[y * c.w + x] -= chill;
            });
        }
    }
}

fn place(cfg: &SceneConfig, placed: &[BBox], rng: &mut Rng) -> Result<BBox> {
    let (hf, wf) = (cfg.height as f64, cfg.width as f64);
    for _ in 0..200 {
        let h = rng.range(cfg.object_height.0, cfg.object_height.1) * hf;
        let w = (PEDESTRIAN_ASPECT * h).round().clamp(1.0, wf);
        let x1 = rng.range(0.0, wf - w).round();
        // feet on a ground band in the lower part of the frame
        let foot = rng.range((0.55 * hf).max(h.round()), hf).round();
        let b = BBox::new(x1, foot - h.round(), x1 + w, foot)?;
        if placed.iter().all(|p| p.iou(&b) <= cfg.max_overlap) {
            return Ok(b);
        }
    }
    Err(Error::invalid(format!(
        "scene too crowded: could not place object {} without overlap",
        placed.len() + 1
    )))
}

/// Draw one scene. The geometry, colours and thermal image depend only on the
/// generator state, not on `condition`; night only changes the RGB rendering.
pub fn generate_scene(cfg: &SceneConfig, condition: Condition, rng: &mut Rng) -> Result<ScenePair> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![0.0; 3 * plane],
        thermal: vec![0.0; plane],
    };

    // background: smooth gradients plus low-frequency texture
    let base = [rng.range(0.3, 0.7), rng.range(0.3, 0.7), rng.range(0.3, 0.7)];
    let grad: Vec<(f64, f64)> = (0..3).map(|_| (rng.range(-0.2, 0.2), rng.range(-0.2, 0.2))).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.range(0.02, 0.12),
                rng.range(0.02, 0.12),
                rng.range(0.0, std::f64::consts::TAU),
                rng.range(0.02, 0.06),
            )
        })
        .collect();
    let t_base = rng.range(0.2, 0.35);
    let t_grad = (rng.range(-0.05, 0.05), rng.range(-0.05, 0.05));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for k in 0..3 {
                canvas.rgb[k * plane + y * w + x] = base[k] + grad[k].0 * u + grad[k].1 * v + texture;
            }
            canvas.thermal[y * w + x] = t_base + t_grad.0 * u + t_grad.1 * v;
        }
    }

    let n_ped = cfg.pedestrians.0 + rng.below(cfg.pedestrians.1 - cfg.pedestrians.0 + 1);
    let n_dis = cfg.distractors.0 + rng.below(cfg.distractors.1 - cfg.distractors.0 + 1);
    let mut placed = Vec::with_capacity(n_ped + n_dis);
    let mut kinds = Vec::with_capacity(n_ped + n_dis);
    for i in 0..n_ped + n_dis {
        let b = place(cfg, &placed, rng)?;
        let kind = if i < n_ped {
            Shape::Pedestrian
        } else {
            match rng.below(3) {
                0 => Shape::Pole,
                1 => Shape::Sign,
                _ => Shape::Bush,
            }
        };
        placed.push(b);
        kinds.push(kind);
    }
    // far objects first so that nearer (lower) ones occlude them
    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.sort_by(|&a, &b| placed[a].y2.total_cmp(&placed[b].y2).then(a.cmp(&b)));
    for &i in &order {
        draw(&mut canvas, kinds[i], &placed[i], rng);
    }

    for v in canvas.rgb.iter_mut() {
        *v += rng.gaussian(0.0, cfg.noise_sigma);
    }
    for v in canvas.thermal.iter_mut() {
        *v += rng.gaussian(0.0, cfg.noise_sigma);
    }

    // drawn unconditionally so day and night scenes share every other random draw
    let mut night_rng = Rng::new(rng.next_u64());
    if condition == Condition::Night {
        for k in 0..3 {
            let ch = &mut canvas.rgb[k * plane..(k + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            for v in ch.iter_mut() {
                *v = 0.5 * mean + (*v - mean) * cfg.night_contrast + night_rng.gaussian(0.0, cfg.night_noise);
            }
        }
    }
    for v in canvas.rgb.iter_mut().chain(canvas.thermal.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(ScenePair {
        rgb: Tensor::from_vec(&[3, h, w], canvas.rgb)?,
        thermal: Tensor::from_vec(&[1, h, w], canvas.thermal)?,
        gts: placed[..n_ped].to_vec(),
        distractors: placed[n_ped..].to_vec(),
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let cfg = SceneConfig {
            pedestrians: (0, 0),
            distractors: (0, 0),
            ..Default::default()
        };
        let s = generate_scene(&cfg, Condition::Day, &mut Rng::new(1)).unwrap();
        assert!(s.gts.is_empty() && s.distractors.is_empty());
        assert_eq!(s.rgb.shape(), &[3, 128, 96]);
        assert_eq!(s.thermal.shape(), &[1, 128, 96]);
        // no warm pixels without pedestrians
        assert!(s.thermal.data().iter().all(|&t| t < 0.6));
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, Condition::Night, &mut Rng::new(9)).unwrap();
        let b = generate_scene(&cfg, Condition::Night, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn night_keeps_thermal_and_geometry() {
        let cfg = SceneConfig::default();
        let d = generate_scene(&cfg, Condition::Day, &mut Rng::new(4)).unwrap();
        let n = generate_scene(&cfg, Condition::Night, &mut Rng::new(4)).unwrap();
        assert_eq!(d.thermal, n.thermal);
        assert_eq!(d.gts, n.gts);
        assert_ne!(d.rgb, n.rgb);
    }

    #[test]
    fn boxes_in_bounds_and_values_in_range() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let s = generate_scene(&cfg, Condition::Day, &mut Rng::new(seed)).unwrap();
            for b in s.gts.iter().chain(&s.distractors) {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 96.0 && b.y2 <= 128.0, "{b:?}");
            }
            assert!(s.rgb.data().iter().chain(s.thermal.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn overcrowded_config_fails() {
        let cfg = SceneConfig {
            pedestrians: (40, 40),
            object_height: (0.9, 1.0),
            max_overlap: 0.0,
            ..Default::default()
        };
        assert!(generate_scene(&cfg, Condition::Day, &mut Rng::new(1)).is_err());
    }
}

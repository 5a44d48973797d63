//! Boxes, overlap, and proposal sourcing (text files or a synthetic generator).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Axis-aligned box in pixel coordinates, `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union of two valid boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Clamp to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.validate().ok().map(|_| b)
    }

    pub fn scale(&self, factor: f64) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: f64) -> BBox {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

/// Checked IoU: errors on an invalid box.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

fn parse_fields(path: &Path, line_no: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected {want} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("{f:?}: {e}"),
            })
        })
        .collect()
}

fn parse_box(path: &Path, line_no: usize, v: &[f64]) -> Result<BBox> {
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// One proposal per line: `x1 y1 x2 y2 score`. Blank lines are skipped.
pub fn load_proposals(path: &Path) -> Result<Vec<Proposal>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_fields(path, i + 1, line, 5)?;
        let bbox = parse_box(path, i + 1, &v)?;
        if !v[4].is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite score".into(),
            });
        }
        out.push(Proposal { bbox, score: v[4] });
    }
    Ok(out)
}

pub fn format_proposals(proposals: &[Proposal]) -> String {
    let mut s = String::new();
    for p in proposals {
        let b = &p.bbox;
        writeln!(s, "{:.6} {:.6} {:.6} {:.6} {:.6}", b.x1, b.y1, b.x2, b.y2, p.score).unwrap();
    }
    s
}

pub fn write_proposals(path: &Path, proposals: &[Proposal]) -> Result<()> {
    fs::write(path, format_proposals(proposals))?;
    Ok(())
}

/// Ground-truth boxes, one `x1 y1 x2 y2` per line.
pub fn load_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_fields(path, i + 1, line, 4)?;
        out.push(parse_box(path, i + 1, &v)?);
    }
    Ok(out)
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        writeln!(s, "{:.6} {:.6} {:.6} {:.6}", b.x1, b.y1, b.x2, b.y2).unwrap();
    }
    s
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

/// Every `*.txt` file in `dir`, keyed by file stem (the image id), in id order.
pub fn load_proposal_dir(dir: &Path) -> Result<Vec<(String, Vec<Proposal>)>> {
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            load_proposals(&p).map(|props| (id, props))
        })
        .collect()
}

/// Parameters of the synthetic proposal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    /// Jittered copies per ground-truth box.
    pub per_gt: usize,
    /// Jittered copies per decoy (pedestrian-like clutter).
    pub per_decoy: usize,
    /// Relative standard deviation of center shift and log-size noise.
    pub jitter: f64,
    /// Uniformly placed background boxes.
    pub n_random: usize,
    /// Proposals scoring below this are dropped.
    pub threshold: f64,
    /// Height range of background boxes as a fraction of image height.
    pub random_height: (f64, f64),
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            per_gt: 6,
            per_decoy: 3,
            jitter: 0.15,
            n_random: 12,
            threshold: -70.0,
            random_height: (0.2, 0.6),
        }
    }
}

/// Score of a jittered copy: high for small jitter, decaying with the jitter magnitude.
fn jitter_score(magnitude: f64, rng: &mut Rng) -> f64 {
    40.0 - 120.0 * magnitude + rng.gaussian(0.0, 5.0)
}

fn jittered(b: &BBox, sigma: f64, rng: &mut Rng) -> (BBox, f64) {
    let (cx, cy) = b.center();
    let dx = rng.normal() * sigma;
    let dy = rng.normal() * sigma;
    let dw = rng.normal() * sigma;
    let dh = rng.normal() * sigma;
    let w = b.width() * dw.exp();
    let h = b.height() * dh.exp();
    let out = BBox {
        x1: cx + dx * b.width() - w / 2.0,
        y1: cy + dy * b.height() - h / 2.0,
        x2: cx + dx * b.width() + w / 2.0,
        y2: cy + dy * b.height() + h / 2.0,
    };
    (out, (dx * dx + dy * dy + dw * dw + dh * dh).sqrt())
}

/// Stand-in for a low-threshold pedestrian detector: jittered copies of every
/// ground-truth box and every decoy, plus random background boxes. Each ground
/// truth keeps at least one proposal with IoU > 0.7.
pub fn synth_proposals(
    gts: &[BBox],
    decoys: &[BBox],
    width: usize,
    height: usize,
    rng: &mut Rng,
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    let (wf, hf) = (width as f64, height as f64);
    let mut out: Vec<Proposal> = Vec::new();
    let push = |out: &mut Vec<Proposal>, p: Proposal| {
        if p.score >= cfg.threshold && !out.iter().any(|q| q.bbox == p.bbox) {
            out.push(p);
        }
    };

    for gt in gts {
        for copy in 0..cfg.per_gt.max(1) {
            // the first copy is the tight one that guarantees recall
            let sigma = if copy == 0 { cfg.jitter * 0.25 } else { cfg.jitter };
            let (b, mag) = jittered(gt, sigma, rng);
            let mut score = jitter_score(mag, rng);
            let clamped = b.clamp_to(wf, hf);
            let bbox = match clamped {
                Some(c) if copy > 0 || c.iou(gt) > 0.7 => c,
                _ if copy == 0 => gt.clamp_to(wf, hf).unwrap_or(*gt),
                _ => continue,
            };
            if copy == 0 {
                score = score.max(cfg.threshold);
            }
            push(&mut out, Proposal { bbox, score });
        }
    }
    for d in decoys {
        for _ in 0..cfg.per_decoy {
            let (b, mag) = jittered(d, cfg.jitter, rng);
            if let Some(bbox) = b.clamp_to(wf, hf) {
                let score = jitter_score(mag, rng) - 10.0;
                push(&mut out, Proposal { bbox, score });
            }
        }
    }
    let (hmin, hmax) = cfg.random_height;
    for _ in 0..cfg.n_random {
        let h = rng.range(hmin, hmax) * hf;
        let w = (0.41 * h).min(wf);
        let x1 = rng.range(0.0, (wf - w).max(0.0));
        let y1 = rng.range(0.0, (hf - h).max(0.0));
        let score = rng.gaussian(-40.0, 20.0);
        if let Some(bbox) = (BBox { x1, y1, x2: x1 + w, y2: y1 + h }).clamp_to(wf, hf) {
            push(&mut out, Proposal { bbox, score });
        }
    }
    out
}

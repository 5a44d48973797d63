//! Test-time detection: score every proposal, apply the box regressor, clamp,
//! suppress duplicates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::msdn::{decode_delta, msdn_forward, MsdnModel};
use crate::proposals::{BBox, Proposal};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Pedestrian probability in `[0, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    /// IoU above which a lower-scoring detection is suppressed.
    pub nms_delta: f64,
    /// Detections scoring at or below this are dropped before suppression.
    pub score_floor: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            nms_delta: 0.5,
            score_floor: 0.01,
        }
    }
}

/// Rois per forward pass.
const CHUNK: usize = 256;

/// Detections for one RGB image (`3 x H x W`), sorted by descending score.
pub fn detect(m: &MsdnModel, image: &Tensor, proposals: &[Proposal], cfg: &DetectConfig) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&cfg.nms_delta) {
        return Err(Error::invalid(format!("nms delta {} not in [0, 1]", cfg.nms_delta)));
    }
    let (h, w) = match *image.shape() {
        [3, h, w] => (h as f64, w as f64),
        ref s => return Err(Error::invalid(format!("expected a 3xHxW image, got {s:?}"))),
    };
    let rois: Vec<BBox> = proposals
        .iter()
        .filter_map(|p| p.bbox.clamp_to(w, h))
        .collect();
    let mut dets = Vec::with_capacity(rois.len());
    for chunk in rois.chunks(CHUNK) {
        for (roi, out) in chunk.iter().zip(msdn_forward(m, image, chunk)?) {
            let score = out.pedestrian_prob();
            if score <= cfg.score_floor {
                continue;
            }
            let bbox = decode_delta(&out.delta, roi)
                .ok()
                .and_then(|b| b.clamp_to(w, h))
                .unwrap_or(*roi);
            dets.push(Detection { bbox, score });
        }
    }
    Ok(nms(&dets, cfg.nms_delta))
}

/// Greedy suppression: keep the best remaining detection, drop every remaining one
/// overlapping it with IoU above `delta`, repeat. Equal scores keep input order.
pub fn nms(dets: &[Detection], delta: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        if keep.iter().all(|k| k.bbox.iou(&dets[i].bbox) <= delta) {
            keep.push(dets[i]);
        }
    }
    keep
}

/// One line per detection: `image_id x1 y1 x2 y2 score`, six decimals.
pub fn format_detections(per_image: &[(String, Vec<Detection>)]) -> String {
    let mut s = String::new();
    for (id, dets) in per_image {
        for d in dets {
            let b = &d.bbox;
            writeln!(s, "{id} {:.6} {:.6} {:.6} {:.6} {:.6}", b.x1, b.y1, b.x2, b.y2, d.score).unwrap();
        }
    }
    s
}

pub fn write_detections(path: &Path, per_image: &[(String, Vec<Detection>)]) -> Result<()> {
    fs::write(path, format_detections(per_image))?;
    Ok(())
}

/// Parse a detection file, grouped by image id (ids sorted, file order kept within an id).
pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path)?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let v = f[1..]
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&v[4]) {
            return Err(err(format!("score {} not in [0, 1]", v[4])));
        }
        out.entry(f[0].to_string()).or_default().push(Detection { bbox, score: v[4] });
    }
    Ok(out)
}

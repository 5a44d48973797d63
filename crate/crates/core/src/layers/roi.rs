use crate::error::{Error, Result};
use crate::proposals::BBox;
use crate::tensor::Tensor;

/// Integer feature-map window of a roi: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiWindow {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Scale a roi onto a `height x width` feature map, rounding outward and clamping.
pub fn roi_window(roi: &BBox, scale: f64, height: usize, width: usize) -> Option<RoiWindow> {
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let x0 = clamp((roi.x1 * scale).floor(), width);
    let x1 = clamp((roi.x2 * scale).ceil(), width);
    let y0 = clamp((roi.y1 * scale).floor(), height);
    let y1 = clamp((roi.y2 * scale).ceil(), height);
    (x1 > x0 && y1 > y0).then_some(RoiWindow { y0, y1, x0, x1 })
}

/// Bounds `[start, end)` of cell `k` of `out` when splitting `len` positions.
pub fn cell_bounds(k: usize, len: usize, out: usize) -> (usize, usize) {
    ((k * len) / out, ((k + 1) * len).div_ceil(out))
}

/// Pooled roi features, `N x C x out x out`, with the flat `C*H*W` source index of
/// every output element (`None` for an empty cell).
#[derive(Debug, Clone)]
pub struct RoiPooled {
    pub output: Tensor,
    pub argmax: Vec<Option<usize>>,
}

/// Max-pool each roi of a `1 x C x H x W` map onto an `out x out` grid.
pub fn roi_pool(features: &Tensor, rois: &[BBox], spatial_scale: f64, out: usize) -> Result<RoiPooled> {
    let [c, h, w] = match *features.shape() {
        [1, c, h, w] => [c, h, w],
        _ => {
            return Err(Error::invalid(format!(
                "roi_pool expects a 1xCxHxW map, got {:?}",
                features.shape()
            )))
        }
    };
    if rois.is_empty() || out == 0 {
        return Err(Error::invalid("roi_pool needs at least one roi and out >= 1"));
    }
    let mut output = Tensor::zeros(&[rois.len(), c, out, out]);
    let mut argmax = Vec::with_capacity(rois.len() * c * out * out);
    let src = features.data();
    let dst = output.data_mut();
    let mut k = 0;
    for (index, roi) in rois.iter().enumerate() {
        let win = roi_window(roi, spatial_scale, h, w).ok_or_else(|| Error::InvalidRoi {
            index,
            reason: format!("{roi:?} has no area on the {h}x{w} map at scale {spatial_scale}"),
        })?;
        let (rh, rw) = (win.y1 - win.y0, win.x1 - win.x0);
        for ch in 0..c {
            let plane = ch * h * w;
            for ph in 0..out {
                let (hs, he) = cell_bounds(ph, rh, out);
                for pw in 0..out {
                    let (ws, we) = cell_bounds(pw, rw, out);
                    let mut best: Option<usize> = None;
                    for y in win.y0 + hs..(win.y0 + he).min(win.y1) {
                        for x in win.x0 + ws..(win.x0 + we).min(win.x1) {
                            let idx = plane + y * w + x;
                            if best.is_none_or(|b| src[idx] > src[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    dst[k] = best.map_or(0.0, |b| src[b]);
                    argmax.push(best);
                    k += 1;
                }
            }
        }
    }
    Ok(RoiPooled { output, argmax })
}

/// Scatter pooled gradients back onto the feature map (accumulating over rois).
pub fn roi_pool_backward(feature_shape: &[usize], argmax: &[Option<usize>], dout: &Tensor) -> Result<Tensor> {
    if dout.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "roi_pool backward",
            left: dout.shape().to_vec(),
            right: vec![argmax.len()],
        });
    }
    let mut df = Tensor::new(feature_shape, 0.0)?;
    let d = df.data_mut();
    for (&g, idx) in dout.data().iter().zip(argmax) {
        if let Some(i) = *idx {
            d[i] += g;
        }
    }
    Ok(df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn whole_map_identity() {
        let f = Rng::new(5).normal_tensor(0.0, 1.0, &[1, 3, 7, 7]).unwrap();
        let roi = BBox::new(0.0, 0.0, 7.0, 7.0).unwrap();
        let p = roi_pool(&f, &[roi], 1.0, 7).unwrap();
        assert_eq!(p.output.data(), f.data());
    }

    #[test]
    fn output_shape_independent_of_roi() {
        let f = Tensor::new(&[1, 512, 8, 6], 1.0).unwrap();
        for roi in [
            BBox::new(0.0, 0.0, 96.0, 128.0).unwrap(),
            BBox::new(3.0, 4.0, 9.0, 10.0).unwrap(),
            BBox::new(40.5, 60.2, 70.0, 127.0).unwrap(),
        ] {
            let p = roi_pool(&f, &[roi], 1.0 / 16.0, 7).unwrap();
            assert_eq!(p.output.shape(), &[1, 512, 7, 7]);
        }
    }

    #[test]
    fn degenerate_roi_is_named() {
        let f = Tensor::zeros(&[1, 1, 4, 4]);
        let ok = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let outside = BBox::new(100.0, 100.0, 120.0, 130.0).unwrap();
        match roi_pool(&f, &[ok, outside], 1.0, 2) {
            Err(Error::InvalidRoi { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outward_rounding() {
        let roi = BBox::new(15.0, 17.0, 33.0, 47.0).unwrap();
        let win = roi_window(&roi, 1.0 / 16.0, 8, 6).unwrap();
        assert_eq!(win, RoiWindow { y0: 1, y1: 3, x0: 0, x1: 3 });
    }

    #[test]
    fn cells_cover_window() {
        for len in 1..20 {
            for out in 1..9 {
                let mut covered = vec![false; len];
                for k in 0..out {
                    let (s, e) = cell_bounds(k, len, out);
                    assert!(e > s && e <= len);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }
}

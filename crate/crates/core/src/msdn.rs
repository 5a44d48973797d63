//! Multi-scale detection network: two VGG-style trunks over the same RGB frame,
//! ROI pooling on the last two blocks of each, a 1x1 fusion convolution and a
//! Fast R-CNN style head with softmax and box-offset siblings.
//!
//! Training runs in two phases. Phase 1 trains Sub-Net A alone with a half-width
//! fusion layer. Phase 2 attaches Sub-Net B (usually transferred from a trained
//! region reconstruction network), widens the fusion layer to take all four ROI maps
//! and fine-tunes everything.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, load_checkpoint, lr_schedule, relu_backward, relu_in_place, roi_pool, roi_pool_backward,
    save_checkpoint, smooth_l1, softmax, softmax_xent, split_channels, Conv2d, Linear, Params, RoiPooled, SgdState,
};
use crate::proposals::{BBox, Proposal};
use crate::rng::Rng;
use crate::rrn::{check_rois, network_input, prefixed, read_trunk_meta, FlipMode, RrnModel, ROI_GRID};
use crate::synthdata::hflip_image;
use crate::tensor::Tensor;
use crate::trunk::{Trunk, TrunkConfig, TrunkForward};

/// Class index of the pedestrian output; background is 0.
pub const PEDESTRIAN: usize = 1;

/// Layer widths of the detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsdnConfig {
    pub trunk: TrunkConfig,
    /// Fusion channels of the two-stream model; the single-stream model uses half.
    pub fusion_width: usize,
    pub fc_dim: usize,
}

impl MsdnConfig {
    pub fn desk() -> Self {
        MsdnConfig {
            trunk: TrunkConfig::desk(),
            fusion_width: 64,
            fc_dim: 128,
        }
    }

    pub fn paper() -> Self {
        MsdnConfig {
            trunk: TrunkConfig::paper(),
            fusion_width: 1024,
            fc_dim: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.trunk.num_blocks() < 2 || self.fusion_width < 2 || !self.fusion_width.is_multiple_of(2) || self.fc_dim == 0 {
            return Err(Error::invalid(format!(
                "need >= 2 trunk blocks, an even fusion width and fc_dim >= 1 (got {}, {})",
                self.fusion_width, self.fc_dim
            )));
        }
        Ok(())
    }

    /// Channels of the two pooled taps of one trunk.
    fn tap_channels(&self) -> usize {
        let nb = self.trunk.num_blocks();
        self.trunk.channels_of(nb - 2) + self.trunk.channels_of(nb - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsdnModel {
    pub config: MsdnConfig,
    pub subnet_a: Trunk,
    /// `None` for the single-stream (phase 1) model.
    pub subnet_b: Option<Trunk>,
    /// 1x1 convolution over the concatenated ROI maps.
    pub fusion: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
}

impl MsdnModel {
    /// Single-stream model: Sub-Net A and a fusion layer of half the configured width.
    pub fn new(config: MsdnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let subnet_a = Trunk::new(config.trunk.clone(), rng)?;
        let half = config.fusion_width / 2;
        let fusion = Conv2d::he(config.tap_channels(), half, 1, 1, 0, rng);
        let fc1 = Linear::xavier(half * ROI_GRID * ROI_GRID, config.fc_dim, rng);
        let fc2 = Linear::xavier(config.fc_dim, config.fc_dim, rng);
        let cls = Linear::normal(config.fc_dim, 2, 0.01, rng);
        let bbox = Linear::normal(config.fc_dim, 4, 0.001, rng);
        Ok(MsdnModel {
            config,
            subnet_a,
            subnet_b: None,
            fusion,
            fc1,
            fc2,
            cls,
            bbox,
        })
    }

    /// Two-stream model with both trunks freshly initialised and a full-width fusion.
    pub fn new_two_stream(config: MsdnConfig, rng: &mut Rng) -> Result<Self> {
        let mut m = MsdnModel::new(config, rng)?;
        let b = Trunk::new(m.config.trunk.clone(), rng)?;
        m.attach_subnet_b(b, rng)?;
        Ok(m)
    }

    pub fn is_two_stream(&self) -> bool {
        self.subnet_b.is_some()
    }

    /// Attach Sub-Net B and widen the fusion layer to take all four ROI maps.
    ///
    /// The widened model computes exactly what the single-stream model computed: the
    /// first half of the fusion outputs keep their weights on the A channels and get
    /// zero weights on the B channels, and `fc1` gets zero columns for the new
    /// outputs. The new fusion outputs are He-initialised.
    pub fn attach_subnet_b(&mut self, subnet_b: Trunk, rng: &mut Rng) -> Result<()> {
        if self.subnet_b.is_some() {
            return Err(Error::invalid("model already has a Sub-Net B"));
        }
        if *subnet_b.config() != self.config.trunk {
            return Err(Error::ConfigMismatch {
                expected: self.config.trunk.to_string(),
                found: subnet_b.config().to_string(),
            });
        }
        let ta = self.config.tap_channels();
        let half = self.fusion.out_channels();
        let full = self.config.fusion_width;
        let fresh = Conv2d::he(2 * ta, full - half, 1, 1, 0, rng);
        let mut w = Tensor::zeros(&[full, 2 * ta, 1, 1]);
        let mut b = Tensor::zeros(&[full]);
        for o in 0..full {
            let row = &mut w.data_mut()[o * 2 * ta..(o + 1) * 2 * ta];
            if o < half {
                row[..ta].copy_from_slice(&self.fusion.weight.data()[o * ta..(o + 1) * ta]);
                b.data_mut()[o] = self.fusion.bias.data()[o];
            } else {
                let k = o - half;
                row.copy_from_slice(&fresh.weight.data()[k * 2 * ta..(k + 1) * 2 * ta]);
                b.data_mut()[o] = fresh.bias.data()[k];
            }
        }
        let cells = ROI_GRID * ROI_GRID;
        let fc_dim = self.fc1.out_features();
        let old_in = half * cells;
        let new_in = full * cells;
        let mut fw = Tensor::zeros(&[fc_dim, new_in]);
        for r in 0..fc_dim {
            fw.data_mut()[r * new_in..r * new_in + old_in]
                .copy_from_slice(&self.fc1.weight.data()[r * old_in..(r + 1) * old_in]);
        }
        self.fusion = Conv2d::new(w, b, 1, 0)?;
        self.fc1 = Linear::new(fw, self.fc1.bias.clone())?;
        self.subnet_b = Some(subnet_b);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.config.trunk.to_tensor();
        let dims = Tensor::from_vec(
            &[3],
            vec![
                self.config.fusion_width as f64,
                self.config.fc_dim as f64,
                if self.is_two_stream() { 2.0 } else { 1.0 },
            ],
        )?;
        let records = [("meta.trunk".to_string(), &meta), ("meta.head".to_string(), &dims)]
            .into_iter()
            .chain(self.named_params());
        save_checkpoint(path, records)
    }

    /// Load a checkpoint; when `expected` is given the stored trunk config must match it.
    pub fn load(path: &Path, expected: Option<&TrunkConfig>) -> Result<Self> {
        let records = load_checkpoint(path)?;
        let trunk = read_trunk_meta(path, &records)?;
        if let Some(exp) = expected {
            if *exp != trunk {
                return Err(Error::ConfigMismatch {
                    expected: exp.to_string(),
                    found: trunk.to_string(),
                });
            }
        }
        let head = records
            .iter()
            .find(|(n, _)| n == "meta.head")
            .map(|(_, t)| t.data().to_vec())
            .filter(|d| d.len() == 3)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: "checkpoint has no detector head record (is it an RRN checkpoint?)".into(),
            })?;
        let config = MsdnConfig {
            trunk,
            fusion_width: head[0] as usize,
            fc_dim: head[1] as usize,
        };
        let mut rng = Rng::new(0);
        let mut m = if head[2] == 2.0 {
            MsdnModel::new_two_stream(config, &mut rng)?
        } else {
            MsdnModel::new(config, &mut rng)?
        };
        let params: Vec<_> = records.into_iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
        m.load_named(&params)?;
        Ok(m)
    }
}

impl Params for MsdnModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("subnet_a", self.subnet_a.named_params());
        if let Some(b) = &self.subnet_b {
            out.extend(prefixed("subnet_b", b.named_params()));
        }
        out.extend(self.head_named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let MsdnModel {
            subnet_a,
            subnet_b,
            fusion,
            fc1,
            fc2,
            cls,
            bbox,
            ..
        } = self;
        let mut out = subnet_a.params_mut();
        if let Some(b) = subnet_b {
            out.extend(b.params_mut());
        }
        out.extend([&mut fusion.weight, &mut fusion.bias]);
        out.extend([fc1, fc2, cls, bbox].into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]));
        out
    }
}

impl MsdnModel {
    fn head_named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("fusion.w".into(), &self.fusion.weight),
            ("fusion.b".into(), &self.fusion.bias),
            ("fc1.w".into(), &self.fc1.weight),
            ("fc1.b".into(), &self.fc1.bias),
            ("fc2.w".into(), &self.fc2.weight),
            ("fc2.b".into(), &self.fc2.bias),
            ("cls.w".into(), &self.cls.weight),
            ("cls.b".into(), &self.cls.bias),
            ("bbox.w".into(), &self.bbox.weight),
            ("bbox.b".into(), &self.bbox.bias),
        ]
    }

    /// Head parameters (fusion, fc1, fc2, cls, bbox) in gradient order.
    pub fn head_params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.fusion.weight,
            &mut self.fusion.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.cls.weight,
            &mut self.cls.bias,
            &mut self.bbox.weight,
            &mut self.bbox.bias,
        ]
    }
}

/// Copy the RRN trunk into Sub-Net B bit for bit. Everything else is untouched.
pub fn transfer_from_rrn(rrn: &RrnModel, model: &mut MsdnModel) -> Result<()> {
    match &mut model.subnet_b {
        Some(b) => b.copy_params_from(&rrn.trunk),
        None => Err(Error::invalid("transfer needs a two-stream model")),
    }
}

/// Raw outputs of the detector for one roi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiOutput {
    pub logits: [f64; 2],
    pub delta: BoxDelta,
}

impl RoiOutput {
    /// Softmax probability of the pedestrian class.
    pub fn pedestrian_prob(&self) -> f64 {
        softmax(&self.logits)[PEDESTRIAN]
    }
}

/// Activations of the head kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Tensor,
    fused: Tensor,
    h1: Tensor,
    h2: Tensor,
}

/// Head outputs: logits `[N, 2]` and box offsets `[N, 4]`.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub deltas: Tensor,
    pub cache: HeadCache,
}

impl MsdnModel {
    /// Fusion, fc1, fc2 and the sibling layers over pooled features `[N, C, 7, 7]`.
    pub fn head_forward(&self, pooled: &Tensor) -> Result<HeadOutput> {
        let mut fused = self.fusion.forward(pooled)?;
        relu_in_place(&mut fused);
        let mut h1 = self.fc1.forward(&fused)?;
        relu_in_place(&mut h1);
        let mut h2 = self.fc2.forward(&h1)?;
        relu_in_place(&mut h2);
        let logits = self.cls.forward(&h2)?;
        let deltas = self.bbox.forward(&h2)?;
        Ok(HeadOutput {
            logits,
            deltas,
            cache: HeadCache {
                input: pooled.clone(),
                fused,
                h1,
                h2,
            },
        })
    }

    /// Gradients of the ten head parameters and of the pooled input.
    pub fn head_backward(&self, cache: &HeadCache, dlogits: &Tensor, ddeltas: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let gc = self.cls.backward(&cache.h2, dlogits)?;
        let gb = self.bbox.backward(&cache.h2, ddeltas)?;
        let mut dh2 = gc.input;
        dh2.add_assign(&gb.input)?;
        let dh2 = relu_backward(&cache.h2, &dh2)?;
        let g2 = self.fc2.backward(&cache.h1, &dh2)?;
        let dh1 = relu_backward(&cache.h1, &g2.input)?;
        let g1 = self.fc1.backward(&cache.fused, &dh1)?;
        let dfused = relu_backward(&cache.fused, &g1.input.reshape(cache.fused.shape())?)?;
        let gf = self.fusion.backward(&cache.input, &dfused)?;
        let grads = vec![
            gf.weight, gf.bias, g1.weight, g1.bias, g2.weight, g2.bias, gc.weight, gc.bias, gb.weight, gb.bias,
        ];
        Ok((grads, gf.input.expect("input grad")))
    }
}

struct StreamForward {
    fwd: TrunkForward,
    pooled: [RoiPooled; 2],
}

struct Forward {
    streams: Vec<StreamForward>,
    head: HeadOutput,
}

fn forward_impl(m: &MsdnModel, image: &Tensor, rois: &[BBox], keep: bool) -> Result<Forward> {
    let x = network_input(image)?;
    check_rois(rois, x.shape()[2], x.shape()[3])?;
    let nb = m.config.trunk.num_blocks();
    let taps = [nb - 2, nb - 1];
    let mut streams = Vec::with_capacity(2);
    for trunk in std::iter::once(&m.subnet_a).chain(m.subnet_b.as_ref()) {
        let fwd = if keep { trunk.forward(&x)? } else { trunk.forward_infer(&x)? };
        let scale = |b: usize| 1.0 / m.config.trunk.stride_of(b) as f64;
        let p4 = roi_pool(&fwd.blocks[taps[0]], rois, scale(taps[0]), ROI_GRID)?;
        let p5 = roi_pool(&fwd.blocks[taps[1]], rois, scale(taps[1]), ROI_GRID)?;
        streams.push(StreamForward { fwd, pooled: [p4, p5] });
    }
    let maps: Vec<&Tensor> = streams.iter().flat_map(|s| s.pooled.iter().map(|p| &p.output)).collect();
    let cat = concat_channels(&maps)?;
    let head = m.head_forward(&cat)?;
    Ok(Forward { streams, head })
}

fn outputs(head: &HeadOutput) -> Vec<RoiOutput> {
    let n = head.logits.shape()[0];
    (0..n)
        .map(|i| {
            let l = head.logits.outer(i);
            let d = head.deltas.outer(i);
            RoiOutput {
                logits: [l[0], l[1]],
                delta: BoxDelta {
                    tx: d[0],
                    ty: d[1],
                    tw: d[2],
                    th: d[3],
                },
            }
        })
        .collect()
}

/// Class logits and box offsets for every roi, in roi order.
pub fn msdn_forward(m: &MsdnModel, image: &Tensor, rois: &[BBox]) -> Result<Vec<RoiOutput>> {
    Ok(outputs(&forward_impl(m, image, rois, false)?.head))
}

/// Forward with Sub-Net B's ROI features replaced by zeros.
pub fn msdn_forward_without_b(m: &MsdnModel, image: &Tensor, rois: &[BBox]) -> Result<Vec<RoiOutput>> {
    let f = forward_impl(m, image, rois, false)?;
    let mut maps: Vec<Tensor> = f
        .streams
        .iter()
        .flat_map(|s| s.pooled.iter().map(|p| p.output.clone()))
        .collect();
    for t in maps.iter_mut().skip(2) {
        t.data_mut().fill(0.0);
    }
    let cat = concat_channels(&maps.iter().collect::<Vec<_>>())?;
    Ok(outputs(&m.head_forward(&cat)?))
}

/// Box regression target relative to a proposal: center offsets in units of the
/// proposal size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

pub fn encode_delta(gt: &BBox, prop: &BBox) -> Result<BoxDelta> {
    gt.validate()?;
    prop.validate()?;
    let (gx, gy) = gt.center();
    let (px, py) = prop.center();
    let (pw, ph) = (prop.width(), prop.height());
    Ok(BoxDelta {
        tx: (gx - px) / pw,
        ty: (gy - py) / ph,
        tw: (gt.width() / pw).ln(),
        th: (gt.height() / ph).ln(),
    })
}

pub fn decode_delta(d: &BoxDelta, prop: &BBox) -> Result<BBox> {
    prop.validate()?;
    let (px, py) = prop.center();
    let (pw, ph) = (prop.width(), prop.height());
    let (cx, cy) = (px + d.tx * pw, py + d.ty * ph);
    let (w, h) = (pw * d.tw.exp(), ph * d.th.exp());
    let b = BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    };
    b.validate()?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsdnTrainConfig {
    pub minibatch: usize,
    pub pos_fraction: f64,
    /// Positives need best IoU strictly above this.
    pub pos_iou: f64,
    /// Negatives need best IoU within this closed range.
    pub neg_iou_range: (f64, f64),
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    /// First epoch (1-based) trained at `base_lr / drop_factor`.
    pub drop_epoch: usize,
    pub drop_factor: f64,
    /// Phase 1 epochs.
    pub epochs: usize,
    /// Phase 2 epochs.
    pub finetune_epochs: usize,
    pub seed: u64,
    pub flip: FlipMode,
}

impl Default for MsdnTrainConfig {
    fn default() -> Self {
        MsdnTrainConfig {
            minibatch: 128,
            pos_fraction: 0.25,
            pos_iou: 0.5,
            neg_iou_range: (0.0, 0.5),
            momentum: 0.9,
            weight_decay: 0.0005,
            base_lr: 0.001,
            drop_epoch: 5,
            drop_factor: 10.0,
            epochs: 8,
            finetune_epochs: 8,
            seed: 0,
            flip: FlipMode::Double,
        }
    }
}

impl MsdnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.minibatch > 0
            && self.pos_fraction > 0.0
            && self.pos_fraction < 1.0
            && self.pos_iou > 0.0
            && self.pos_iou <= 1.0
            && self.neg_iou_range.0 >= 0.0
            && self.neg_iou_range.0 <= self.neg_iou_range.1
            && self.base_lr >= 0.0
            && self.drop_factor > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid detector training config {self:?}")));
        }
        Ok(())
    }
}

/// A sampled training roi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledRoi {
    pub roi: BBox,
    /// [`PEDESTRIAN`] or 0.
    pub class: usize,
    /// Regression target for positives.
    pub target: Option<BoxDelta>,
}

/// Best IoU of `b` against `gts` and the index of that gt (first on ties).
fn best_gt(b: &BBox, gts: &[BBox]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (j, g) in gts.iter().enumerate() {
        let v = b.iou(g);
        if best.1.is_none() || v > best.0 {
            best = (v, Some(j));
        }
    }
    best
}

/// Draw up to `minibatch` rois: `pos_fraction` of them positives when available,
/// the rest negatives, with the shortfall of either pool filled from the other.
pub fn sample_minibatch(
    proposals: &[Proposal],
    gts: &[BBox],
    cfg: &MsdnTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<LabeledRoi>> {
    if proposals.is_empty() {
        return Err(Error::invalid("cannot sample a mini-batch from zero proposals"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let (v, j) = best_gt(&p.bbox, gts);
        if v > cfg.pos_iou {
            pos.push((i, j.expect("positive has a gt")));
        } else if v >= cfg.neg_iou_range.0 && v <= cfg.neg_iou_range.1 {
            neg.push(i);
        }
    }
    let total = cfg.minibatch.min(pos.len() + neg.len());
    let want_pos = (cfg.minibatch as f64 * cfg.pos_fraction).round() as usize;
    let mut n_pos = want_pos.min(pos.len()).min(total);
    let n_neg = (total - n_pos).min(neg.len());
    n_pos = (total - n_neg).min(pos.len());

    let mut out = Vec::with_capacity(n_pos + n_neg);
    for k in rng.sample_indices(pos.len(), n_pos) {
        let (i, j) = pos[k];
        let roi = proposals[i].bbox;
        out.push(LabeledRoi {
            roi,
            class: PEDESTRIAN,
            target: Some(encode_delta(&gts[j], &roi)?),
        });
    }
    for k in rng.sample_indices(neg.len(), n_neg) {
        out.push(LabeledRoi {
            roi: proposals[neg[k]].bbox,
            class: 0,
            target: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MsdnLoss {
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_bbox: f64,
    /// `[N, 2]`
    pub dlogits: Tensor,
    /// `[N, 4]`
    pub ddeltas: Tensor,
}

/// Mean softmax cross-entropy over all samples plus mean smooth-L1 over positives,
/// weighted 1:1. Background samples contribute no regression term.
pub fn msdn_loss(logits: &Tensor, deltas: &Tensor, labels: &[LabeledRoi]) -> Result<MsdnLoss> {
    let n = labels.len();
    if logits.shape() != [n, 2] || deltas.shape() != [n, 4] {
        return Err(Error::ShapeMismatch {
            op: "msdn_loss",
            left: logits.shape().to_vec(),
            right: vec![n, 2],
        });
    }
    let mut dlogits = Tensor::zeros(&[n, 2]);
    let mut ddeltas = Tensor::zeros(&[n, 4]);
    let n_pos = labels.iter().filter(|l| l.target.is_some()).count();
    let (mut loss_cls, mut loss_bbox) = (0.0, 0.0);
    for (i, l) in labels.iter().enumerate() {
        let x = softmax_xent(logits.outer(i), l.class)?;
        loss_cls += x.loss / n as f64;
        for (d, g) in dlogits.outer_mut(i).iter_mut().zip(&x.grad) {
            *d = g / n as f64;
        }
        if let Some(t) = l.target {
            let (v, g) = smooth_l1(deltas.outer(i), &t.to_array())?;
            loss_bbox += v / n_pos as f64;
            for (d, gv) in ddeltas.outer_mut(i).iter_mut().zip(&g) {
                *d = gv / n_pos as f64;
            }
        }
    }
    Ok(MsdnLoss {
        loss: loss_cls + loss_bbox,
        loss_cls,
        loss_bbox,
        dlogits,
        ddeltas,
    })
}

/// Loss and gradients (in [`Params`] order) for one image's labelled rois.
pub fn msdn_loss_grads(m: &MsdnModel, image: &Tensor, labels: &[LabeledRoi]) -> Result<(MsdnLoss, Vec<Tensor>)> {
    let rois: Vec<BBox> = labels.iter().map(|l| l.roi).collect();
    let f = forward_impl(m, image, &rois, true)?;
    let loss = msdn_loss(&f.head.logits, &f.head.deltas, labels)?;
    let (head_grads, dcat) = m.head_backward(&f.head.cache, &loss.dlogits, &loss.ddeltas)?;
    let nb = m.config.trunk.num_blocks();
    let c4 = m.config.trunk.channels_of(nb - 2);
    let c5 = m.config.trunk.channels_of(nb - 1);
    let widths: Vec<usize> = f.streams.iter().flat_map(|_| [c4, c5]).collect();
    let dmaps = split_channels(&dcat, &widths)?;
    let trunks: Vec<&Trunk> = std::iter::once(&m.subnet_a).chain(m.subnet_b.as_ref()).collect();
    let mut grads = Vec::new();
    for (s, (stream, trunk)) in f.streams.iter().zip(trunks).enumerate() {
        let mut d_taps = vec![None; nb];
        for (k, tap) in [nb - 2, nb - 1].into_iter().enumerate() {
            let shape = stream.fwd.blocks[tap].shape();
            d_taps[tap] = Some(roi_pool_backward(shape, &stream.pooled[k].argmax, &dmaps[2 * s + k])?);
        }
        grads.extend(trunk.backward(&stream.fwd, &d_taps)?);
    }
    grads.extend(head_grads);
    Ok((loss, grads))
}

/// One training image for the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdnSample {
    pub rgb: Tensor,
    pub gts: Vec<BBox>,
    pub proposals: Vec<Proposal>,
}

impl MsdnSample {
    fn flipped(&self) -> MsdnSample {
        let w = self.rgb.shape()[2] as f64;
        MsdnSample {
            rgb: hflip_image(&self.rgb),
            gts: self.gts.iter().map(|b| b.hflip(w)).collect(),
            proposals: self
                .proposals
                .iter()
                .map(|p| Proposal {
                    bbox: p.bbox.hflip(w),
                    score: p.score,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsdnLogEntry {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_cls: f64,
    pub loss_bbox: f64,
}

/// CSV with header `phase,epoch,step,loss_cls,loss_bbox`.
pub fn format_msdn_log(log: &[MsdnLogEntry]) -> String {
    let mut s = String::from("phase,epoch,step,loss_cls,loss_bbox\n");
    for e in log {
        writeln!(s, "{},{},{},{:.9},{:.9}", e.phase, e.epoch, e.step, e.loss_cls, e.loss_bbox).unwrap();
    }
    s
}

/// Train whatever structure `m` currently has for `epochs` epochs, one image per step.
pub fn train_phase(
    m: &mut MsdnModel,
    samples: &[MsdnSample],
    cfg: &MsdnTrainConfig,
    phase: usize,
    epochs: usize,
    rng: &mut Rng,
) -> Result<Vec<MsdnLogEntry>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sgd = SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay)?;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=epochs {
        sgd.learning_rate = lr_schedule(epoch, cfg.base_lr, cfg.drop_epoch, cfg.drop_factor);
        for (i, flip) in cfg.flip.epoch_visits(samples.len(), rng) {
            let owned;
            let s = if flip {
                owned = samples[i].flipped();
                &owned
            } else {
                &samples[i]
            };
            if s.proposals.is_empty() {
                continue;
            }
            let labels = sample_minibatch(&s.proposals, &s.gts, cfg, rng)?;
            if labels.is_empty() {
                continue;
            }
            let (loss, grads) = msdn_loss_grads(m, &s.rgb, &labels)?;
            sgd.step(&mut m.params_mut(), &grads)?;
            step += 1;
            log.push(MsdnLogEntry {
                phase,
                epoch,
                step,
                loss_cls: loss.loss_cls,
                loss_bbox: loss.loss_bbox,
            });
        }
    }
    Ok(log)
}

/// Sub-Net B used by phase 2.
#[derive(Debug, Clone, Copy)]
pub enum SubnetBInit<'a> {
    /// Copy the trunk of a trained region reconstruction network.
    Transfer(&'a RrnModel),
    /// Fresh He initialisation.
    Random,
}

/// Phase 2 on a trained single-stream model: attach Sub-Net B, widen the fusion
/// layer and fine-tune all layers.
pub fn finetune_two_stream(
    m: &mut MsdnModel,
    samples: &[MsdnSample],
    init: SubnetBInit<'_>,
    cfg: &MsdnTrainConfig,
) -> Result<Vec<MsdnLogEntry>> {
    let mut rng = Rng::derive(cfg.seed, 2);
    let b = match init {
        SubnetBInit::Transfer(rrn) => {
            if *rrn.trunk.config() != m.config.trunk {
                return Err(Error::ConfigMismatch {
                    expected: m.config.trunk.to_string(),
                    found: rrn.trunk.config().to_string(),
                });
            }
            rrn.trunk.clone()
        }
        SubnetBInit::Random => Trunk::new(m.config.trunk.clone(), &mut rng)?,
    };
    m.attach_subnet_b(b, &mut rng)?;
    train_phase(m, samples, cfg, 2, cfg.finetune_epochs, &mut rng)
}

/// Both phases: Sub-Net A alone, then the two-stream model. The model after phase 1
/// is the single-stream ablation and is returned as well.
pub fn train_msdn(
    m: &mut MsdnModel,
    samples: &[MsdnSample],
    rrn: Option<&RrnModel>,
    cfg: &MsdnTrainConfig,
) -> Result<(MsdnModel, Vec<MsdnLogEntry>)> {
    if m.is_two_stream() {
        return Err(Error::invalid("training starts from a single-stream model"));
    }
    let mut rng = Rng::derive(cfg.seed, 1);
    let mut log = train_phase(m, samples, cfg, 1, cfg.epochs, &mut rng)?;
    let phase1 = m.clone();
    let init = match rrn {
        Some(r) => SubnetBInit::Transfer(r),
        None => SubnetBInit::Random,
    };
    log.extend(finetune_two_stream(m, samples, init, cfg)?);
    Ok((phase1, log))
}

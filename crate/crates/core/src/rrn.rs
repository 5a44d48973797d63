//! Region reconstruction network: predicts a 50x50 thermal patch for every RGB
//! proposal. Supervision comes from the aligned thermal frame alone; no box labels
//! enter this module.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    load_checkpoint, relu_backward, relu_in_place, roi_pool, roi_pool_backward, save_checkpoint, square_loss,
    Conv2d, Deconv2d, Params, SgdState,
};
use crate::proposals::{BBox, Proposal};
use crate::rng::Rng;
use crate::synthdata::{bilinear_sample, hflip_image, preprocess_thermal};
use crate::tensor::Tensor;
use crate::trunk::{Trunk, TrunkConfig};

/// ROI pooling grid.
pub const ROI_GRID: usize = 7;
/// Side of a reconstruction map.
pub const RECON_SIZE: usize = 50;
/// Channels of the upsampled reconstruction features.
pub const RECON_CHANNELS: usize = 64;

/// Trunk input: the RGB frame shifted to zero-centred values, as `1 x 3 x H x W`.
pub fn network_input(rgb: &Tensor) -> Result<Tensor> {
    match *rgb.shape() {
        [3, h, w] => rgb.map(|v| v - 0.5).reshape(&[1, 3, h, w]),
        ref s => Err(Error::invalid(format!("expected a 3xHxW rgb image, got {s:?}"))),
    }
}

/// Every roi must be a valid box overlapping the image.
pub(crate) fn check_rois(rois: &[BBox], height: usize, width: usize) -> Result<()> {
    if rois.is_empty() {
        return Err(Error::invalid("at least one roi is required"));
    }
    for (index, r) in rois.iter().enumerate() {
        let ok = r.validate().is_ok() && r.clamp_to(width as f64, height as f64).is_some();
        if !ok {
            return Err(Error::InvalidRoi {
                index,
                reason: format!("{r:?} is not a positive-area box inside the {height}x{width} image"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrnModel {
    pub trunk: Trunk,
    /// Last tap channels to 64, kernel 4, stride 8, pad 1: 7x7 becomes 50x50.
    pub deconv: Deconv2d,
    /// 64 channels to one, 3x3, pad 1.
    pub recon: Conv2d,
}

impl RrnModel {
    pub fn new(config: TrunkConfig, rng: &mut Rng) -> Result<Self> {
        let trunk = Trunk::new(config, rng)?;
        let last = trunk.config().num_blocks() - 1;
        let c = trunk.config().channels_of(last);
        Ok(RrnModel {
            deconv: Deconv2d::he(c, RECON_CHANNELS, 4, 8, 1, rng),
            recon: Conv2d::he(RECON_CHANNELS, 1, 3, 1, 1, rng),
            trunk,
        })
    }

    fn last_block(&self) -> usize {
        self.trunk.config().num_blocks() - 1
    }

    /// Feature-map scale of the pooled tap.
    pub fn spatial_scale(&self) -> f64 {
        1.0 / self.trunk.config().stride_of(self.last_block()) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.trunk.config().to_tensor();
        let records = std::iter::once(("meta.trunk".to_string(), &meta)).chain(self.named_params());
        save_checkpoint(path, records)
    }

    /// Load a checkpoint; when `expected` is given the stored trunk config must match it.
    pub fn load(path: &Path, expected: Option<&TrunkConfig>) -> Result<Self> {
        let records = load_checkpoint(path)?;
        let config = read_trunk_meta(path, &records)?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(Error::ConfigMismatch {
                    expected: exp.to_string(),
                    found: config.to_string(),
                });
            }
        }
        let mut m = RrnModel::new(config, &mut Rng::new(0))?;
        let params: Vec<_> = records.into_iter().filter(|(n, _)| n != "meta.trunk").collect();
        m.load_named(&params)?;
        Ok(m)
    }
}

pub(crate) fn read_trunk_meta(path: &Path, records: &[(String, Tensor)]) -> Result<TrunkConfig> {
    let meta = records
        .iter()
        .find(|(n, _)| n == "meta.trunk")
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "checkpoint has no trunk config record".into(),
        })?;
    TrunkConfig::from_tensor(&meta.1)
}

pub(crate) fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

impl Params for RrnModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("trunk", self.trunk.named_params());
        out.push(("deconv.w".into(), &self.deconv.weight));
        out.push(("deconv.b".into(), &self.deconv.bias));
        out.push(("recon.w".into(), &self.recon.weight));
        out.push(("recon.b".into(), &self.recon.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        out.push(&mut self.deconv.weight);
        out.push(&mut self.deconv.bias);
        out.push(&mut self.recon.weight);
        out.push(&mut self.recon.bias);
        out
    }
}

/// Reconstruction maps for `rois`, each `1 x 50 x 50`, in roi order.
pub fn rrn_forward(m: &RrnModel, image: &Tensor, rois: &[BBox]) -> Result<Vec<Tensor>> {
    let x = network_input(image)?;
    check_rois(rois, x.shape()[2], x.shape()[3])?;
    let fwd = m.trunk.forward_infer(&x)?;
    let pooled = roi_pool(&fwd.blocks[m.last_block()], rois, m.spatial_scale(), ROI_GRID)?;
    let mut up = m.deconv.forward(&pooled.output)?;
    relu_in_place(&mut up);
    let maps = m.recon.forward(&up)?;
    let plane = RECON_SIZE * RECON_SIZE;
    Ok((0..rois.len())
        .map(|i| Tensor::from_vec(&[1, RECON_SIZE, RECON_SIZE], maps.outer(i)[..plane].to_vec()).expect("plane"))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub roi: BBox,
    /// `1 x 50 x 50`, values in `[0, 1]`.
    pub map: Tensor,
}

/// Crop `roi` (clamped to the frame) out of a `1 x H x W` thermal image, resample it
/// bilinearly to 50x50 and normalise with the image's global min and max. A constant
/// image gives a constant 0.5 target.
pub fn make_recon_target(thermal: &Tensor, roi: &BBox) -> Result<ReconTarget> {
    let (h, w) = match *thermal.shape() {
        [1, h, w] => (h, w),
        ref s => return Err(Error::invalid(format!("expected a 1xHxW thermal image, got {s:?}"))),
    };
    roi.validate()?;
    let clamped = roi.clamp_to(w as f64, h as f64).ok_or_else(|| Error::InvalidRoi {
        index: 0,
        reason: format!("{roi:?} does not intersect the {h}x{w} image"),
    })?;
    let plane = thermal.data();
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let (sy, sx) = (
        clamped.height() / RECON_SIZE as f64,
        clamped.width() / RECON_SIZE as f64,
    );
    let mut map = Tensor::zeros(&[1, RECON_SIZE, RECON_SIZE]);
    for (k, v) in map.data_mut().iter_mut().enumerate() {
        let (dy, dx) = ((k / RECON_SIZE) as f64, (k % RECON_SIZE) as f64);
        let y = clamped.y1 + (dy + 0.5) * sy - 0.5;
        let x = clamped.x1 + (dx + 0.5) * sx - 0.5;
        let s = bilinear_sample(plane, h, w, y, x);
        *v = if range > 0.0 { ((s - lo) / range).clamp(0.0, 1.0) } else { 0.5 };
    }
    Ok(ReconTarget { roi: *roi, map })
}

/// How horizontal flips augment an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    Off,
    /// Every image is visited twice per epoch, once mirrored.
    Double,
    /// Every visit mirrors the image with probability one half.
    Random,
}

impl FlipMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(FlipMode::Off),
            "double" => Some(FlipMode::Double),
            "random" => Some(FlipMode::Random),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FlipMode::Off => "off",
            FlipMode::Double => "double",
            FlipMode::Random => "random",
        }
    }

    /// Shuffled `(image index, mirrored)` visits for one epoch.
    pub(crate) fn epoch_visits(&self, n: usize, rng: &mut Rng) -> Vec<(usize, bool)> {
        let mut visits: Vec<(usize, bool)> = match self {
            FlipMode::Off => (0..n).map(|i| (i, false)).collect(),
            FlipMode::Double => (0..n).flat_map(|i| [(i, false), (i, true)]).collect(),
            FlipMode::Random => (0..n).map(|i| (i, rng.bernoulli(0.5))).collect(),
        };
        rng.shuffle(&mut visits);
        visits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrnTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub proposal_score_threshold: f64,
    pub seed: u64,
    pub flip: FlipMode,
    /// Images whose proposals form one mini-batch.
    pub images_per_batch: usize,
    /// Median filter and histogram equalisation of thermal frames before targets are cut.
    pub preprocess_thermal: bool,
}

impl Default for RrnTrainConfig {
    fn default() -> Self {
        RrnTrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            proposal_score_threshold: -70.0,
            seed: 0,
            flip: FlipMode::Double,
            images_per_batch: 1,
            preprocess_thermal: true,
        }
    }
}

impl RrnTrainConfig {
    /// The published setting: a fixed learning rate of 1e-9.
    pub fn paper() -> Self {
        RrnTrainConfig {
            learning_rate: 1e-9,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.images_per_batch == 0 {
            return Err(Error::invalid("epochs and images per batch must be >= 1"));
        }
        Ok(())
    }
}

/// One training image: RGB frame, aligned thermal frame and its proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct RrnSample {
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrnLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub loss: f64,
}

/// CSV with header `epoch,step,batch_size,loss`.
pub fn format_rrn_log(log: &[RrnLogEntry]) -> String {
    let mut s = String::from("epoch,step,batch_size,loss\n");
    for e in log {
        writeln!(s, "{},{},{},{:.9}", e.epoch, e.step, e.batch_size, e.loss).unwrap();
    }
    s
}

/// Mean of per-epoch losses, in epoch order.
pub fn epoch_means(log: &[RrnLogEntry]) -> Vec<f64> {
    let Some(last) = log.last() else { return Vec::new() };
    (1..=last.epoch)
        .map(|e| {
            let xs: Vec<f64> = log.iter().filter(|l| l.epoch == e).map(|l| l.loss).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        })
        .collect()
}

/// Loss and parameter gradients of one image's rois. `weight` scales both, so a
/// batch over several images averages over all of its rois.
pub fn rrn_loss_grads(
    m: &RrnModel,
    rgb: &Tensor,
    rois: &[BBox],
    targets: &[Tensor],
    weight: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let x = network_input(rgb)?;
    check_rois(rois, x.shape()[2], x.shape()[3])?;
    if targets.len() != rois.len() {
        return Err(Error::invalid("one target per roi is required"));
    }
    let last = m.last_block();
    let fwd = m.trunk.forward(&x)?;
    let tap = &fwd.blocks[last];
    let pooled = roi_pool(tap, rois, m.spatial_scale(), ROI_GRID)?;
    let mut up = m.deconv.forward(&pooled.output)?;
    relu_in_place(&mut up);
    let maps = m.recon.forward(&up)?;

    let plane = RECON_SIZE * RECON_SIZE;
    let mut dmaps = Tensor::zeros(maps.shape());
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let recon = Tensor::from_vec(&[1, RECON_SIZE, RECON_SIZE], maps.outer(i)[..plane].to_vec())?;
        let (l, g) = square_loss(&recon, t)?;
        loss += l * weight;
        for (d, &gv) in dmaps.outer_mut(i).iter_mut().zip(g.data()) {
            *d = gv * weight;
        }
    }

    let rg = m.recon.backward(&up, &dmaps)?;
    let dup = relu_backward(&up, rg.input.as_ref().expect("input grad"))?;
    let dg = m.deconv.backward(&pooled.output, &dup)?;
    let dtap = roi_pool_backward(tap.shape(), &pooled.argmax, dg.input.as_ref().expect("input grad"))?;
    let mut d_taps = vec![None; last + 1];
    d_taps[last] = Some(dtap);
    let mut grads = m.trunk.backward(&fwd, &d_taps)?;
    grads.extend([dg.weight, dg.bias, rg.weight, rg.bias]);
    Ok((loss, grads))
}

struct Prepared {
    rgb: Tensor,
    thermal: Tensor,
    rois: Vec<BBox>,
}

fn prepare(samples: &[RrnSample], cfg: &RrnTrainConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rois: Vec<BBox> = s
                .proposals
                .iter()
                .filter(|p| p.score >= cfg.proposal_score_threshold)
                .map(|p| p.bbox)
                .collect();
            if rois.is_empty() {
                return Err(Error::invalid(format!(
                    "training image {i} has no proposal scoring >= {}",
                    cfg.proposal_score_threshold
                )));
            }
            let thermal = if cfg.preprocess_thermal {
                preprocess_thermal(&s.thermal)
            } else {
                s.thermal.clone()
            };
            Ok(Prepared {
                rgb: s.rgb.clone(),
                thermal,
                rois,
            })
        })
        .collect()
}

/// Train in place. Each step draws `images_per_batch` images and uses every proposal
/// above the score threshold as the mini-batch, so the batch size varies per step.
pub fn train_rrn(m: &mut RrnModel, samples: &[RrnSample], cfg: &RrnTrainConfig) -> Result<Vec<RrnLogEntry>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = prepare(samples, cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let visits = cfg.flip.epoch_visits(data.len(), &mut rng);
        for batch in visits.chunks(cfg.images_per_batch) {
            let total: usize = batch.iter().map(|&(i, _)| data[i].rois.len()).sum();
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for &(i, flip) in batch {
                let p = &data[i];
                let (rgb, thermal, rois) = if flip {
                    let w = p.rgb.shape()[2] as f64;
                    (
                        hflip_image(&p.rgb),
                        hflip_image(&p.thermal),
                        p.rois.iter().map(|b| b.hflip(w)).collect(),
                    )
                } else {
                    (p.rgb.clone(), p.thermal.clone(), p.rois.clone())
                };
                let targets = rois
                    .iter()
                    .map(|r| make_recon_target(&thermal, r).map(|t| t.map))
                    .collect::<Result<Vec<_>>>()?;
                let (l, g) = rrn_loss_grads(m, &rgb, &rois, &targets, 1.0 / total as f64)?;
                loss += l;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            a.add_assign(gi)?;
                        }
                    }
                }
            }
            sgd.step(&mut m.params_mut(), &grads.expect("non-empty batch"))?;
            step += 1;
            log.push(RrnLogEntry {
                epoch,
                step,
                batch_size: total,
                loss,
            });
        }
    }
    Ok(log)
}

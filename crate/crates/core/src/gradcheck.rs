//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a scalar objective (a fixed random projection of the layer
//! output, or the loss itself), perturbs sampled coordinates of every input and
//! parameter by `±EPS` and compares against the analytic gradient. A coordinate
//! whose perturbation changes the piecewise-linear branch pattern (ReLU signs, max
//! positions, smooth-L1 regime) sits on a kink and is skipped.

use crate::error::Result;
use crate::layers::{
    maxpool2d, maxpool2d_backward, relu, relu_backward, roi_pool, roi_pool_backward, smooth_l1, softmax_xent,
    square_loss, Conv2d, Deconv2d, Linear,
};
use crate::msdn::{msdn_loss, LabeledRoi, MsdnConfig, MsdnModel, BoxDelta, PEDESTRIAN};
use crate::proposals::BBox;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trunk::TrunkConfig;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per variable and seed.
const SAMPLES: usize = 24;

/// `|a - b| / max(1, |a|, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: usize,
    pub coords: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.coords > 0
    }
}

/// Objective value, analytic gradients of every variable, and the branch pattern.
struct Eval {
    loss: f64,
    grads: Vec<Tensor>,
    pattern: Vec<u64>,
}

fn check_vars(
    vars: &[Tensor],
    rng: &mut Rng,
    f: &dyn Fn(&[Tensor]) -> Result<Eval>,
    acc: &mut CheckResult,
) -> Result<()> {
    let base = f(vars)?;
    let mut work = vars.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let picks = if v.len() <= SAMPLES {
            (0..v.len()).collect()
        } else {
            rng.sample_indices(v.len(), SAMPLES)
        };
        for j in picks {
            let orig = v.data()[j];
            work[k].data_mut()[j] = orig + EPS;
            let plus = f(&work)?;
            work[k].data_mut()[j] = orig - EPS;
            let minus = f(&work)?;
            work[k].data_mut()[j] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                acc.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * EPS);
            acc.max_rel_err = acc.max_rel_err.max(rel_err(base.grads[k].data()[j], numeric));
            acc.coords += 1;
        }
    }
    Ok(())
}

fn run(name: &'static str, seeds: usize, build: impl Fn(&mut Rng) -> Result<CheckCase>) -> Result<CheckResult> {
    let mut acc = CheckResult {
        name,
        seeds,
        coords: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    for seed in 0..seeds as u64 {
        let mut rng = Rng::derive(seed, name.len() as u64);
        let case = build(&mut rng)?;
        check_vars(&case.vars, &mut rng, &*case.f, &mut acc)?;
    }
    Ok(acc)
}

type Objective = Box<dyn Fn(&[Tensor]) -> Result<Eval>>;

struct CheckCase {
    vars: Vec<Tensor>,
    f: Objective,
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(0.0, 1.0, shape).expect("valid shape")
}

/// Random values on a grid of spacing 0.01 in shuffled order, so that maxima are
/// unique and never swap under a perturbation of size `EPS`.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    rng.shuffle(&mut v);
    Tensor::from_vec(shape, v).expect("valid shape")
}

/// Projection objective `sum(r * y)`; its gradient w.r.t. `y` is `r`.
fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).expect("same shape")
}

fn sign_pattern(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|&v| (v > 0.0) as u64).collect()
}

fn conv_case(rng: &mut Rng) -> Result<CheckCase> {
    // alternate between the direct, im2col and pointwise paths
    let variant = rng.below(3);
    let (out_c, k, stride, pad) = match variant {
        0 => (2, 3, 1, 1),
        1 => (5, 3, 1 + rng.below(2), rng.below(2)),
        _ => (4, 1, 1, 0),
    };
    let x = normal(rng, &[2, 3, 6, 5]);
    let w = normal(rng, &[out_c, 3, k, k]);
    let b = normal(rng, &[out_c]);
    let probe = Conv2d::new(w.clone(), b.clone(), stride, pad)?;
    let r = normal(rng, probe.forward(&x)?.shape());
    Ok(CheckCase {
        vars: vec![x, w, b],
        f: Box::new(move |v| {
            let c = Conv2d::new(v[1].clone(), v[2].clone(), stride, pad)?;
            let y = c.forward(&v[0])?;
            let g = c.backward(&v[0], &r)?;
            Ok(Eval {
                loss: project(&y, &r),
                grads: vec![g.input.expect("input grad"), g.weight, g.bias],
                pattern: Vec::new(),
            })
        }),
    })
}

fn deconv_case(rng: &mut Rng) -> Result<CheckCase> {
    let (k, stride, pad) = [(4, 3, 1), (3, 2, 0), (2, 2, 0), (4, 8, 1)][rng.below(4)];
    let x = normal(rng, &[2, 3, 3, 4]);
    let w = normal(rng, &[3, 2, k, k]);
    let b = normal(rng, &[2]);
    let probe = Deconv2d::new(w.clone(), b.clone(), stride, pad)?;
    let r = normal(rng, probe.forward(&x)?.shape());
    Ok(CheckCase {
        vars: vec![x, w, b],
        f: Box::new(move |v| {
            let d = Deconv2d::new(v[1].clone(), v[2].clone(), stride, pad)?;
            let y = d.forward(&v[0])?;
            let g = d.backward(&v[0], &r)?;
            Ok(Eval {
                loss: project(&y, &r),
                grads: vec![g.input.expect("input grad"), g.weight, g.bias],
                pattern: Vec::new(),
            })
        }),
    })
}

fn maxpool_case(rng: &mut Rng) -> Result<CheckCase> {
    let (window, stride) = [(2, 2), (3, 2), (2, 1)][rng.below(3)];
    let x = distinct(rng, &[2, 2, 6, 7]);
    let r = normal(rng, maxpool2d(&x, window, stride)?.output.shape());
    Ok(CheckCase {
        vars: vec![x],
        f: Box::new(move |v| {
            let p = maxpool2d(&v[0], window, stride)?;
            let dx = maxpool2d_backward(v[0].shape(), &p.argmax, &r)?;
            Ok(Eval {
                loss: project(&p.output, &r),
                grads: vec![dx],
                pattern: p.argmax.iter().map(|&i| i as u64).collect(),
            })
        }),
    })
}

fn relu_case(rng: &mut Rng) -> Result<CheckCase> {
    let x = distinct(rng, &[3, 4, 5]).map(|v| if v.abs() < 0.005 { v + 0.02 } else { v });
    let r = normal(rng, &[3, 4, 5]);
    Ok(CheckCase {
        vars: vec![x],
        f: Box::new(move |v| {
            let y = relu(&v[0]);
            Ok(Eval {
                loss: project(&y, &r),
                grads: vec![relu_backward(&y, &r)?],
                pattern: sign_pattern(&v[0]),
            })
        }),
    })
}

fn roi_case(rng: &mut Rng) -> Result<CheckCase> {
    let (h, w) = (8, 9);
    let x = distinct(rng, &[1, 2, h, w]);
    let scale = [1.0, 0.5, 0.25][rng.below(3)];
    let rois: Vec<BBox> = (0..3)
        .map(|_| {
            let x1 = rng.range(0.0, w as f64 / scale * 0.6);
            let y1 = rng.range(0.0, h as f64 / scale * 0.6);
            BBox {
                x1,
                y1,
                x2: x1 + rng.range(1.0, w as f64 / scale * 0.4),
                y2: y1 + rng.range(1.0, h as f64 / scale * 0.4),
            }
        })
        .collect();
    let out = 3;
    let r = normal(rng, &[3, 2, out, out]);
    Ok(CheckCase {
        vars: vec![x],
        f: Box::new(move |v| {
            let p = roi_pool(&v[0], &rois, scale, out)?;
            let dx = roi_pool_backward(v[0].shape(), &p.argmax, &r)?;
            Ok(Eval {
                loss: project(&p.output, &r),
                grads: vec![dx],
                pattern: p.argmax.iter().map(|a| a.map_or(u64::MAX, |i| i as u64)).collect(),
            })
        }),
    })
}

fn linear_case(rng: &mut Rng) -> Result<CheckCase> {
    let x = normal(rng, &[3, 5]);
    let w = normal(rng, &[4, 5]);
    let b = normal(rng, &[4]);
    let r = normal(rng, &[3, 4]);
    Ok(CheckCase {
        vars: vec![x, w, b],
        f: Box::new(move |v| {
            let l = Linear::new(v[1].clone(), v[2].clone())?;
            let y = l.forward(&v[0])?;
            let g = l.backward(&v[0], &r)?;
            Ok(Eval {
                loss: project(&y, &r),
                grads: vec![g.input, g.weight, g.bias],
                pattern: Vec::new(),
            })
        }),
    })
}

fn xent_case(rng: &mut Rng) -> Result<CheckCase> {
    let n = 2 + rng.below(4);
    let label = rng.below(n);
    let z = normal(rng, &[n]).scale(3.0);
    Ok(CheckCase {
        vars: vec![z],
        f: Box::new(move |v| {
            let x = softmax_xent(v[0].data(), label)?;
            Ok(Eval {
                loss: x.loss,
                grads: vec![Tensor::from_vec(&[n], x.grad)?],
                pattern: Vec::new(),
            })
        }),
    })
}

fn square_case(rng: &mut Rng) -> Result<CheckCase> {
    let recon = normal(rng, &[1, 6, 6]);
    let target = normal(rng, &[1, 6, 6]);
    Ok(CheckCase {
        vars: vec![recon, target],
        f: Box::new(|v| {
            let (loss, g) = square_loss(&v[0], &v[1])?;
            let neg = g.scale(-1.0);
            Ok(Eval {
                loss,
                grads: vec![g, neg],
                pattern: Vec::new(),
            })
        }),
    })
}

fn smooth_branches(d: impl Iterator<Item = f64>) -> Vec<u64> {
    d.map(|x| (x.abs() < 1.0) as u64).collect()
}

fn smooth_l1_case(rng: &mut Rng) -> Result<CheckCase> {
    let pred = normal(rng, &[4]).scale(1.5);
    let target = normal(rng, &[4]);
    Ok(CheckCase {
        vars: vec![pred, target],
        f: Box::new(|v| {
            let (loss, g) = smooth_l1(v[0].data(), v[1].data())?;
            let gp = Tensor::from_vec(&[4], g)?;
            let gt = gp.scale(-1.0);
            Ok(Eval {
                loss,
                grads: vec![gp, gt],
                pattern: smooth_branches(v[0].data().iter().zip(v[1].data()).map(|(a, b)| a - b)),
            })
        }),
    })
}

/// Fusion conv, fc1, fc2 and both sibling heads under the detection loss, with
/// respect to the pooled ROI features and every head parameter.
fn head_case(rng: &mut Rng) -> Result<CheckCase> {
    let cfg = MsdnConfig {
        trunk: TrunkConfig {
            channels_per_block: vec![2, 2, 2, 3, 3],
            ..TrunkConfig::desk()
        },
        fusion_width: 8,
        fc_dim: 6,
    };
    let mut model = if rng.bernoulli(0.5) {
        MsdnModel::new_two_stream(cfg, rng)?
    } else {
        MsdnModel::new(cfg, rng)?
    };
    for t in model.head_params_mut() {
        let noise = rng.normal_tensor(0.0, 0.3, t.shape())?;
        t.add_assign(&noise)?;
    }
    let in_c = model.fusion.in_channels();
    let n = 4;
    let feats = normal(rng, &[n, in_c, 7, 7]);
    let roi = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };
    let labels: Vec<LabeledRoi> = (0..n)
        .map(|i| LabeledRoi {
            roi,
            class: if i % 2 == 0 { PEDESTRIAN } else { 0 },
            target: (i % 2 == 0).then(|| BoxDelta {
                tx: rng.gaussian(0.0, 0.3),
                ty: rng.gaussian(0.0, 0.3),
                tw: rng.gaussian(0.0, 0.3),
                th: rng.gaussian(0.0, 0.3),
            }),
        })
        .collect();
    let mut vars = vec![feats];
    vars.extend(model.head_params_mut().into_iter().map(|t| t.clone()));
    Ok(CheckCase {
        vars,
        f: Box::new(move |v| {
            let mut m = model.clone();
            for (dst, src) in m.head_params_mut().into_iter().zip(&v[1..]) {
                *dst = src.clone();
            }
            let out = m.head_forward(&v[0])?;
            let loss = msdn_loss(&out.logits, &out.deltas, &labels)?;
            let (grads, dx) = m.head_backward(&out.cache, &loss.dlogits, &loss.ddeltas)?;
            let mut pattern = sign_pattern(&m.fusion.forward(&v[0])?);
            let mut h = relu(&m.fusion.forward(&v[0])?);
            for l in [&m.fc1, &m.fc2] {
                let pre = l.forward(&h)?;
                pattern.extend(sign_pattern(&pre));
                h = relu(&pre);
            }
            for (i, l) in labels.iter().enumerate() {
                if let Some(t) = l.target {
                    let d = out.deltas.outer(i).iter().zip(t.to_array()).map(|(a, b)| a - b);
                    pattern.extend(smooth_branches(d));
                }
            }
            let mut all = vec![dx];
            all.extend(grads);
            Ok(Eval {
                loss: loss.loss,
                grads: all,
                pattern,
            })
        }),
    })
}

/// Run every check over `seeds` seeds.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    type Build = fn(&mut Rng) -> Result<CheckCase>;
    let cases: [(&'static str, Build); 10] = [
        ("conv2d", conv_case),
        ("deconv2d", deconv_case),
        ("maxpool2d", maxpool_case),
        ("relu", relu_case),
        ("roi_pool", roi_case),
        ("linear", linear_case),
        ("softmax_xent", xent_case),
        ("square_loss", square_case),
        ("smooth_l1", smooth_l1_case),
        ("msdn_head", head_case),
    ];
    cases.into_iter().map(|(name, build)| run(name, seeds, build)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(rel_err(0.5, 0.5), 0.0);
        assert_eq!(rel_err(1e-6, 2e-6), 1e-6);
        assert_eq!(rel_err(100.0, 101.0), 1.0 / 101.0);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let mut acc = CheckResult {
            name: "bad",
            seeds: 1,
            coords: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let f = |v: &[Tensor]| -> Result<Eval> {
            Ok(Eval {
                loss: v[0].data().iter().map(|a| a * a).sum(),
                grads: vec![v[0].clone()],
                pattern: Vec::new(),
            })
        };
        check_vars(&[x], &mut Rng::new(0), &f, &mut acc).unwrap();
        assert!(!acc.passed());
    }

    #[test]
    fn suite_smoke() {
        for r in run_suite(2).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}

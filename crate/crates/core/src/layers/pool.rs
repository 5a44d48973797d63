use crate::error::{Error, Result};
use crate::layers::conv::conv_out_size;
use crate::tensor::Tensor;

/// Max-pooled activations plus, per output element, the flat input index it came from.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Square-window max pooling over NCHW. Ties go to the smallest flat index.
pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<Pooled> {
    let [n, c, h, w] = match *x.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::invalid(format!("maxpool2d expects NCHW, got {:?}", x.shape()))),
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::invalid(format!(
            "maxpool2d window {window} (stride {stride}) does not fit {h}x{w}"
        )));
    }
    let oh = conv_out_size(h, window, stride, 0).expect("window fits");
    let ow = conv_out_size(w, window, stride, 0).expect("window fits");
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for u in 0..window {
                    let row = base + (i * stride + u) * w + j * stride;
                    for idx in row..row + window {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[k] = src[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok(Pooled {
        output: out,
        argmax,
    })
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Result<Tensor> {
    if dout.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d backward",
            left: dout.shape().to_vec(),
            right: vec![argmax.len()],
        });
    }
    let mut dx = Tensor::new(input_shape, 0.0)?;
    let d = dx.data_mut();
    for (&g, &idx) in dout.data().iter().zip(argmax) {
        d[idx] += g;
    }
    Ok(dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_in_place(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient of ReLU given its input (or output): passes `dout` where the value is `> 0`.
pub fn relu_backward(activation: &Tensor, dout: &Tensor) -> Result<Tensor> {
    if activation.shape() != dout.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu backward",
            left: activation.shape().to_vec(),
            right: dout.shape().to_vec(),
        });
    }
    let mut dx = dout.clone();
    for (g, &a) in dx.data_mut().iter_mut().zip(activation.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(dx)
}

/// Stack along the channel axis in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one tensor"))?;
    let [n, _, h, w] = match *first.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::invalid("concat_channels expects NCHW")),
    };
    let mut total_c = 0;
    for x in xs {
        match *x.shape() {
            [xn, xc, xh, xw] if xn == n && xh == h && xw == w => total_c += xc,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first.shape().to_vec(),
                    right: x.shape().to_vec(),
                })
            }
        }
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    for b in 0..n {
        let dst = out.outer_mut(b);
        let mut off = 0;
        for x in xs {
            let src = x.outer(b);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into pieces of the given channel counts.
pub fn split_channels(dout: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = match *dout.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::invalid("split_channels expects NCHW")),
    };
    if channels.iter().sum::<usize>() != c {
        return Err(Error::invalid(format!(
            "split_channels: {channels:?} does not sum to {c}"
        )));
    }
    let mut parts: Vec<Tensor> = channels
        .iter()
        .map(|&ci| Tensor::new(&[n, ci, h, w], 0.0))
        .collect::<Result<_>>()?;
    for b in 0..n {
        let src = dout.outer(b);
        let mut off = 0;
        for p in parts.iter_mut() {
            let dst = p.outer_mut(b);
            dst.copy_from_slice(&src[off..off + dst.len()]);
            off += dst.len();
        }
    }
    Ok(parts)
}

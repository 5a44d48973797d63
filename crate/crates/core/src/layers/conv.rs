//! Convolution and transposed convolution over NCHW tensors, via im2col + gemm.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Layout, Tensor};

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(in - 1) * stride - 2 * pad + kernel`.
pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    full.checked_sub(2 * pad).filter(|&n| n >= 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `x` (one image, `C x H x W`) into a `(C*kh*kw) x (oh*ow)` matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ncol = g.cols();
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let dst = &mut cols[r * ncol..(r + 1) * ncol];
                for i in 0..g.out_h {
                    let y = (i * g.stride + u) as isize - g.pad as isize;
                    let row = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (j, d) in row.iter_mut().enumerate() {
                        let xx = (j * g.stride + v) as isize - g.pad as isize;
                        *d = if xx < 0 || xx >= g.width as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate the column matrix back into an image.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let ncol = g.cols();
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let src = &cols[r * ncol..(r + 1) * ncol];
                for i in 0..g.out_h {
                    let y = (i * g.stride + u) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for j in 0..g.out_w {
                        let xx = (j * g.stride + v) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.width as isize {
                            dst[xx as usize] += src[i * g.out_w + j];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}


fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Column range `j` with `0 <= j + shift < width` for `j` in `0..out_w`.
fn valid_cols(out_w: usize, width: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((width as isize - shift).max(0) as usize).min(out_w);
    (lo, hi.max(lo))
}

/// Stride-1 convolution by shifted row axpys; used when there are few output
/// channels and im2col would dominate.
fn direct_forward(x: &[f64], g: &Geometry, weight: &[f64], oc: usize, y: &mut [f64]) {
    let (kk, plane_in, plane_out) = (g.kh * g.kw, g.height * g.width, g.out_h * g.out_w);
    for o in 0..oc {
        let dst = &mut y[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.channels {
            let src = &x[c * plane_in..(c + 1) * plane_in];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let w = weight[(o * g.channels + c) * kk + u * g.kw + v];
                    let dx = v as isize - g.pad as isize;
                    let (j0, j1) = valid_cols(g.out_w, g.width, dx);
                    for i in 0..g.out_h {
                        let yy = (i + u) as isize - g.pad as isize;
                        if yy < 0 || yy >= g.height as isize {
                            continue;
                        }
                        let off = yy as usize * g.width;
                        let s0 = (j0 as isize + dx) as usize;
                        let srow = &src[off + s0..off + s0 + (j1 - j0)];
                        let drow = &mut dst[i * g.out_w + j0..i * g.out_w + j1];
                        axpy(w, srow, drow);
                    }
                }
            }
        }
    }
}

/// Weight and input gradients of [`direct_forward`].
fn direct_backward(
    x: &[f64],
    g: &Geometry,
    weight: &[f64],
    oc: usize,
    dy: &[f64],
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (kk, plane_in, plane_out) = (g.kh * g.kw, g.height * g.width, g.out_h * g.out_w);
    for o in 0..oc {
        let grow_all = &dy[o * plane_out..(o + 1) * plane_out];
        for c in 0..g.channels {
            let src = &x[c * plane_in..(c + 1) * plane_in];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let widx = (o * g.channels + c) * kk + u * g.kw + v;
                    let w = weight[widx];
                    let shift = v as isize - g.pad as isize;
                    let (j0, j1) = valid_cols(g.out_w, g.width, shift);
                    let mut acc = 0.0;
                    for i in 0..g.out_h {
                        let yy = (i + u) as isize - g.pad as isize;
                        if yy < 0 || yy >= g.height as isize {
                            continue;
                        }
                        let grow = &grow_all[i * g.out_w + j0..i * g.out_w + j1];
                        let off = yy as usize * g.width + (j0 as isize + shift) as usize;
                        let srow = &src[off..off + grow.len()];
                        acc += dot(grow, srow);
                        if let Some(dx) = dx.as_deref_mut() {
                            let base = c * plane_in + off;
                            axpy(w, grow, &mut dx[base..base + grow.len()]);
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

fn check_rank4(x: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![0; 4],
        }),
    }
}

fn sum_bias(dout: &Tensor, channels: usize) -> Tensor {
    let [n, _, h, w] = check_rank4(dout, "bias").expect("rank-4 gradient");
    let plane = h * w;
    let mut db = Tensor::zeros(&[channels]);
    for b in 0..n {
        let d = dout.outer(b);
        for (o, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += d[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
    db
}

/// Gradients of a layer with weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
}

/// 2-D convolution. Weights are `out x in x kh x kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [out_c, ..] = check_rank4(&weight, "conv2d weight")?;
        if bias.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: bias.shape().to_vec(),
                right: vec![out_c],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// He-normal weights, zero bias.
    pub fn he(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let weight = rng
            .normal_tensor(0.0, std, &[out_c, in_c, k, k])
            .expect("valid conv shape");
        Conv2d {
            weight,
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        match (
            conv_out_size(h, kh, self.stride, self.pad),
            conv_out_size(w, kw, self.stride, self.pad),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(format!(
                "conv2d: {h}x{w} input too small for kernel {kh}x{kw}, pad {}",
                self.pad
            ))),
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, Geometry)> {
        let [n, c, h, w] = check_rank4(x, "conv2d input")?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let (out_h, out_w) = self.output_size(h, w)?;
        let (kh, kw) = self.kernel();
        Ok((
            n,
            Geometry {
                channels: c,
                height: h,
                width: w,
                kh,
                kw,
                stride: self.stride,
                pad: self.pad,
                out_h,
                out_w,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.pad == 0
    }

    fn use_direct(&self) -> bool {
        self.stride == 1 && self.out_channels() <= 4 && !self.is_pointwise()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(x)?;
        let oc = self.out_channels();
        let mut out = Tensor::zeros(&[n, oc, g.out_h, g.out_w]);
        let ncol = g.cols();
        if self.use_direct() {
            for b in 0..n {
                let dst = out.outer_mut(b);
                for (o, &bias) in self.bias.data().iter().enumerate() {
                    dst[o * ncol..(o + 1) * ncol].fill(bias);
                }
                direct_forward(x.outer(b), &g, self.weight.data(), oc, dst);
            }
            return Ok(out);
        }
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; g.rows() * ncol]
        };
        for b in 0..n {
            let dst = out.outer_mut(b);
            for (o, &bias) in self.bias.data().iter().enumerate() {
                dst[o * ncol..(o + 1) * ncol].fill(bias);
            }
            let src: &[f64] = if self.is_pointwise() {
                x.outer(b)
            } else {
                im2col(x.outer(b), &g, &mut cols);
                &cols
            };
            gemm(
                oc,
                g.rows(),
                ncol,
                1.0,
                self.weight.data(),
                Layout::Normal,
                src,
                Layout::Normal,
                1.0,
                dst,
            );
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, dout: &Tensor) -> Result<ConvGrads> {
        self.backward_opt(x, dout, true)
    }

    /// Backward pass; `need_input = false` skips the input gradient.
    pub fn backward_opt(&self, x: &Tensor, dout: &Tensor, need_input: bool) -> Result<ConvGrads> {
        let (n, g) = self.geometry(x)?;
        let oc = self.out_channels();
        let expect = [n, oc, g.out_h, g.out_w];
        if dout.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: dout.shape().to_vec(),
                right: expect.to_vec(),
            });
        }
        let ncol = g.cols();
        let rows = g.rows();
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
        if self.use_direct() {
            for b in 0..n {
                direct_backward(
                    x.outer(b),
                    &g,
                    self.weight.data(),
                    oc,
                    dout.outer(b),
                    dw.data_mut(),
                    dx.as_mut().map(|d| d.outer_mut(b)),
                );
            }
            return Ok(ConvGrads {
                weight: dw,
                bias: sum_bias(dout, oc),
                input: dx,
            });
        }
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncol] };
        let mut dcols = if pointwise || !need_input {
            Vec::new()
        } else {
            vec![0.0; rows * ncol]
        };
        for b in 0..n {
            let dy = dout.outer(b);
            let src: &[f64] = if pointwise {
                x.outer(b)
            } else {
                im2col(x.outer(b), &g, &mut cols);
                &cols
            };
            gemm(
                oc,
                ncol,
                rows,
                1.0,
                dy,
                Layout::Normal,
                src,
                Layout::Transposed,
                1.0,
                dw.data_mut(),
            );
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(
                        rows,
                        oc,
                        ncol,
                        1.0,
                        self.weight.data(),
                        Layout::Transposed,
                        dy,
                        Layout::Normal,
                        0.0,
                        dx.outer_mut(b),
                    );
                } else {
                    gemm(
                        rows,
                        oc,
                        ncol,
                        1.0,
                        self.weight.data(),
                        Layout::Transposed,
                        dy,
                        Layout::Normal,
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, &g, dx.outer_mut(b));
                }
            }
        }
        Ok(ConvGrads {
            weight: dw,
            bias: sum_bias(dout, oc),
            input: dx,
        })
    }
}

/// Transposed convolution. Weights are `in x out x kh x kw`; input pixel `(i, j)` of
/// channel `c` adds `w[c, o, u, v] * x` at output `(i*s - pad + u, j*s - pad + v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [_, out_c, ..] = check_rank4(&weight, "deconv2d weight")?;
        if bias.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "deconv2d bias",
                left: bias.shape().to_vec(),
                right: vec![out_c],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("deconv2d stride must be positive"));
        }
        Ok(Deconv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// He-normal with fan-in `in * ceil(k/s)^2`, the number of input taps feeding one
    /// output pixel.
    pub fn he(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let taps = k.div_ceil(stride).max(1);
        let std = (2.0 / (in_c * taps * taps) as f64).sqrt();
        let weight = rng
            .normal_tensor(0.0, std, &[in_c, out_c, k, k])
            .expect("valid deconv shape");
        Deconv2d {
            weight,
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        match (
            deconv_out_size(h, kh, self.stride, self.pad),
            deconv_out_size(w, kw, self.stride, self.pad),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(format!(
                "deconv2d: {h}x{w} input yields no positive output for kernel {kh}x{kw}, stride {}, pad {}",
                self.stride, self.pad
            ))),
        }
    }

    /// Geometry of the equivalent convolution running from the output grid back to
    /// the input grid.
    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, Geometry)> {
        let [n, c, h, w] = check_rank4(x, "deconv2d input")?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "deconv2d channels",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let (oh, ow) = self.output_size(h, w)?;
        let (kh, kw) = self.kernel();
        Ok((
            n,
            c,
            Geometry {
                channels: self.out_channels(),
                height: oh,
                width: ow,
                kh,
                kw,
                stride: self.stride,
                pad: self.pad,
                out_h: h,
                out_w: w,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, in_c, g) = self.geometry(x)?;
        let oc = self.out_channels();
        let rows = g.rows();
        let ncol = g.cols();
        let plane = g.height * g.width;
        let mut out = Tensor::zeros(&[n, oc, g.height, g.width]);
        let mut cols = vec![0.0; rows * ncol];
        for b in 0..n {
            gemm(
                rows,
                in_c,
                ncol,
                1.0,
                self.weight.data(),
                Layout::Transposed,
                x.outer(b),
                Layout::Normal,
                0.0,
                &mut cols,
            );
            let dst = out.outer_mut(b);
            col2im(&cols, &g, dst);
            for (o, &bias) in self.bias.data().iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v += bias;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, dout: &Tensor) -> Result<ConvGrads> {
        let (n, in_c, g) = self.geometry(x)?;
        let oc = self.out_channels();
        let expect = [n, oc, g.height, g.width];
        if dout.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "deconv2d backward",
                left: dout.shape().to_vec(),
                right: expect.to_vec(),
            });
        }
        let rows = g.rows();
        let ncol = g.cols();
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![0.0; rows * ncol];
        for b in 0..n {
            im2col(dout.outer(b), &g, &mut dcols);
            gemm(
                in_c,
                rows,
                ncol,
                1.0,
                self.weight.data(),
                Layout::Normal,
                &dcols,
                Layout::Normal,
                0.0,
                dx.outer_mut(b),
            );
            gemm(
                in_c,
                ncol,
                rows,
                1.0,
                x.outer(b),
                Layout::Normal,
                &dcols,
                Layout::Transposed,
                1.0,
                dw.data_mut(),
            );
        }
        Ok(ConvGrads {
            weight: dw,
            bias: sum_bias(dout, oc),
            input: Some(dx),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_laws() {
        assert_eq!(conv_out_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_size(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out_size(2, 5, 1, 1), None);
        assert_eq!(deconv_out_size(7, 4, 8, 1), Some(50));
        assert_eq!(deconv_out_size(1, 1, 1, 0), Some(1));
        assert_eq!(deconv_out_size(1, 1, 1, 1), None);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(0);
        let x = rng.normal_tensor(0.0, 1.0, &[2, 1, 4, 5]).unwrap();
        let conv = Conv2d::new(
            Tensor::new(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let conv = Conv2d::new(
            Tensor::new(&[1, 1, 3, 3], 1.0).unwrap(),
            Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_errors() {
        let conv = Conv2d::he(3, 4, 3, 1, 0, &mut Rng::new(1));
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 5, 5])).is_err());
        assert!(conv.forward(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
        assert!(Conv2d::new(Tensor::zeros(&[2, 1, 1, 1]), Tensor::zeros(&[3]), 1, 0).is_err());
    }

    #[test]
    fn deconv_paper_geometry() {
        let d = Deconv2d::he(3, 2, 4, 8, 1, &mut Rng::new(2));
        let y = d.forward(&Tensor::new(&[1, 3, 7, 7], 1.0).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 50, 50]);
    }

    #[test]
    fn deconv_identity() {
        let d = Deconv2d::new(
            Tensor::new(&[1, 1, 1, 1], 1.0).unwrap(),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.5]).unwrap();
        assert_eq!(d.forward(&x).unwrap(), x);
    }

    #[test]
    fn deconv_uncovered_positions_get_bias_only() {
        // k=4 < s=8: rows 3..=6 of each 8-row period receive no kernel tap
        let d = Deconv2d::new(
            Tensor::new(&[1, 1, 4, 4], 1.0).unwrap(),
            Tensor::new(&[1], 0.25).unwrap(),
            8,
            1,
        )
        .unwrap();
        let y = d.forward(&Tensor::new(&[1, 1, 7, 7], 1.0).unwrap()).unwrap();
        assert_eq!(y.get(&[0, 0, 0, 0]).unwrap(), 1.25);
        assert_eq!(y.get(&[0, 0, 4, 4]).unwrap(), 0.25);
        assert_eq!(y.get(&[0, 0, 7, 7]).unwrap(), 1.25);
        assert_eq!(y.get(&[0, 0, 49, 49]).unwrap(), 1.25);
    }
}

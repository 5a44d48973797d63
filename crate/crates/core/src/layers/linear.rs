use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Layout, Tensor};

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

/// Fully connected layer, `y = W x + b` applied to each row of an `N x in` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match *weight.shape() {
            [out, _] if bias.shape() == [out] => Ok(Linear { weight, bias }),
            _ => Err(Error::ShapeMismatch {
                op: "linear params",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }),
        }
    }

    /// Xavier-normal weights, zero bias.
    pub fn xavier(in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_f + out_f) as f64).sqrt();
        Linear {
            weight: rng.normal_tensor(0.0, std, &[out_f, in_f]).expect("valid linear shape"),
            bias: Tensor::zeros(&[out_f]),
        }
    }

    /// Normal weights with a given std, zero bias.
    pub fn normal(in_f: usize, out_f: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            weight: rng.normal_tensor(0.0, std, &[out_f, in_f]).expect("valid linear shape"),
            bias: Tensor::zeros(&[out_f]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn batch(&self, x: &Tensor) -> Result<usize> {
        let n = x.shape()[0];
        if x.len() != n * self.in_features() {
            return Err(Error::ShapeMismatch {
                op: "linear input",
                left: x.shape().to_vec(),
                right: vec![n, self.in_features()],
            });
        }
        Ok(n)
    }

    /// `x` is any tensor whose leading axis is the batch; the rest is flattened.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.batch(x)?;
        let (inf, outf) = (self.in_features(), self.out_features());
        let mut y = Tensor::zeros(&[n, outf]);
        for row in 0..n {
            y.outer_mut(row).copy_from_slice(self.bias.data());
        }
        gemm(
            n,
            inf,
            outf,
            1.0,
            x.data(),
            Layout::Normal,
            self.weight.data(),
            Layout::Transposed,
            1.0,
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, dout: &Tensor) -> Result<LinearGrads> {
        let n = self.batch(x)?;
        let (inf, outf) = (self.in_features(), self.out_features());
        if dout.shape() != [n, outf] {
            return Err(Error::ShapeMismatch {
                op: "linear backward",
                left: dout.shape().to_vec(),
                right: vec![n, outf],
            });
        }
        let mut dw = Tensor::zeros(&[outf, inf]);
        gemm(
            outf,
            n,
            inf,
            1.0,
            dout.data(),
            Layout::Transposed,
            x.data(),
            Layout::Normal,
            0.0,
            dw.data_mut(),
        );
        let mut db = Tensor::zeros(&[outf]);
        for row in 0..n {
            for (acc, &g) in db.data_mut().iter_mut().zip(dout.outer(row)) {
                *acc += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            outf,
            inf,
            1.0,
            dout.data(),
            Layout::Normal,
            self.weight.data(),
            Layout::Normal,
            0.0,
            dx.data_mut(),
        );
        Ok(LinearGrads {
            weight: dw,
            bias: db,
            input: dx,
        })
    }
}

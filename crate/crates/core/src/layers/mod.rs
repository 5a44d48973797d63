//! Layers, losses and the optimizer. Every layer exposes a forward pass and a
//! hand-written backward pass; there is no autograd graph.

pub mod checkpoint;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod roi;
pub mod sgd;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::{conv_out_size, deconv_out_size, Conv2d, ConvGrads, Deconv2d};
pub use linear::{Linear, LinearGrads};
pub use loss::{smooth_l1, softmax, softmax_xent, square_loss, SoftmaxXent};
pub use pool::{
    concat_channels, maxpool2d, maxpool2d_backward, relu, relu_backward, relu_in_place, split_channels, Pooled,
};
pub use roi::{roi_pool, roi_pool_backward, roi_window, RoiPooled, RoiWindow};
pub use sgd::{lr_schedule, SgdState};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A model with an ordered, named parameter list. Gradients travel as a `Vec<Tensor>`
/// in the same order.
pub trait Params {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrite parameters from named records. Every parameter must be present with
    /// a matching shape; extra records are an error too.
    fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let mut by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut incoming = Vec::with_capacity(names.len());
        for n in &names {
            let t = by_name
                .remove(n.as_str())
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing parameter {n}")))?;
            incoming.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::invalid(format!("checkpoint has unexpected parameter {extra}")));
        }
        for ((dst, src), name) in self.params_mut().into_iter().zip(incoming).zip(&names) {
            if dst.shape() != src.shape() {
                return Err(Error::ConfigMismatch {
                    expected: format!("{name} {:?}", dst.shape()),
                    found: format!("{:?}", src.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn conv_params<'a>(prefix: &str, c: &'a Conv2d) -> [(String, &'a Tensor); 2] {
    [(format!("{prefix}.w"), &c.weight), (format!("{prefix}.b"), &c.bias)]
}

//! The five-block VGG-style feature extractor shared by both networks.
//!
//! Block `b` runs `convs_per_block[b]` 3x3/pad-1 convolutions, each followed by ReLU.
//! The block's tap is its last ReLU output; when `pool_after_block[b]` is set, a 2x2
//! stride-2 max pool sits between that tap and block `b + 1`. The tap of block `b`
//! therefore has stride `2^(pools before b)`.

use crate::error::{Error, Result};
use crate::layers::{conv_params, maxpool2d, maxpool2d_backward, relu_backward, relu_in_place, Conv2d, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkConfig {
    pub in_channels: usize,
    pub convs_per_block: Vec<usize>,
    pub channels_per_block: Vec<usize>,
    pub pool_after_block: Vec<bool>,
}

impl TrunkConfig {
    /// 13 convolutions in a 2-2-3-3-3 layout with small widths.
    pub fn desk() -> Self {
        TrunkConfig {
            in_channels: 3,
            convs_per_block: vec![2, 2, 3, 3, 3],
            channels_per_block: vec![8, 16, 32, 64, 64],
            pool_after_block: vec![true, true, true, true, false],
        }
    }

    /// The VGG-16 convolutional trunk widths.
    pub fn paper() -> Self {
        TrunkConfig {
            channels_per_block: vec![64, 128, 256, 512, 512],
            ..TrunkConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.convs_per_block.len();
        if n == 0
            || self.channels_per_block.len() != n
            || self.pool_after_block.len() != n
            || self.in_channels == 0
            || self.convs_per_block.contains(&0)
            || self.channels_per_block.contains(&0)
        {
            return Err(Error::invalid(format!("inconsistent trunk config {self}")));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.convs_per_block.len()
    }

    pub fn num_convs(&self) -> usize {
        self.convs_per_block.iter().sum()
    }

    /// Downsampling factor of block `b`'s tap.
    pub fn stride_of(&self, block: usize) -> usize {
        1 << self.pool_after_block[..block].iter().filter(|&&p| p).count()
    }

    pub fn channels_of(&self, block: usize) -> usize {
        self.channels_per_block[block]
    }

    /// Encode as a flat tensor `[in, n, convs.., channels.., pools..]` for checkpoints.
    pub fn to_tensor(&self) -> Tensor {
        let mut v = vec![self.in_channels as f64, self.num_blocks() as f64];
        v.extend(self.convs_per_block.iter().map(|&c| c as f64));
        v.extend(self.channels_per_block.iter().map(|&c| c as f64));
        v.extend(self.pool_after_block.iter().map(|&p| if p { 1.0 } else { 0.0 }));
        let n = v.len();
        Tensor::from_vec(&[n], v).expect("non-empty")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        let bad = || Error::invalid(format!("malformed trunk config record {d:?}"));
        let as_count = |x: f64| (x >= 0.0 && x.fract() == 0.0 && x < 1e9).then_some(x as usize);
        let n = d.get(1).copied().and_then(as_count).ok_or_else(bad)?;
        if d.len() != 2 + 3 * n {
            return Err(bad());
        }
        let counts = |r: std::ops::Range<usize>| d[r].iter().map(|&x| as_count(x)).collect::<Option<Vec<_>>>();
        let cfg = TrunkConfig {
            in_channels: as_count(d[0]).ok_or_else(bad)?,
            convs_per_block: counts(2..2 + n).ok_or_else(bad)?,
            channels_per_block: counts(2 + n..2 + 2 * n).ok_or_else(bad)?,
            pool_after_block: d[2 + 2 * n..].iter().map(|&p| p != 0.0).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::fmt::Display for TrunkConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "in={} convs={:?} channels={:?} pools={:?}",
            self.in_channels, self.convs_per_block, self.channels_per_block, self.pool_after_block
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    /// `blocks[b][i]` is convolution `i` of block `b`.
    blocks: Vec<Vec<Conv2d>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    /// Input of every convolution, block by block.
    conv_inputs: Vec<Vec<Tensor>>,
    /// Pool argmax and pre-pool shape where a pool ran.
    pools: Vec<Option<(Vec<usize>, Vec<usize>)>>,
}

#[derive(Debug, Clone)]
pub struct TrunkForward {
    /// One tap per block (post-ReLU, pre-pool).
    pub blocks: Vec<Tensor>,
    pub cache: Option<TrunkCache>,
}

impl Trunk {
    /// He-initialised trunk.
    pub fn new(config: TrunkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for (&n, &c) in config.convs_per_block.iter().zip(&config.channels_per_block) {
            let mut convs = Vec::with_capacity(n);
            for _ in 0..n {
                convs.push(Conv2d::he(in_c, c, 3, 1, 1, rng));
                in_c = c;
            }
            blocks.push(convs);
        }
        Ok(Trunk { config, blocks })
    }

    /// Build from explicit layers; shapes must chain according to `config`.
    pub fn from_layers(config: TrunkConfig, blocks: Vec<Vec<Conv2d>>) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        if blocks.len() != config.num_blocks() {
            return Err(Error::invalid("trunk layer count does not match config"));
        }
        for (b, convs) in blocks.iter().enumerate() {
            if convs.len() != config.convs_per_block[b] {
                return Err(Error::invalid(format!("block {} has the wrong conv count", b + 1)));
            }
            for c in convs {
                if c.in_channels() != in_c || c.out_channels() != config.channels_per_block[b] {
                    return Err(Error::invalid(format!("block {} conv shapes do not chain", b + 1)));
                }
                in_c = c.out_channels();
            }
        }
        Ok(Trunk { config, blocks })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn conv(&self, block: usize, index: usize) -> &Conv2d {
        &self.blocks[block][index]
    }

    pub fn conv_mut(&mut self, block: usize, index: usize) -> &mut Conv2d {
        &mut self.blocks[block][index]
    }

    /// Run all blocks, keeping the activations needed by [`Trunk::backward`].
    pub fn forward(&self, image: &Tensor) -> Result<TrunkForward> {
        self.run(image, true)
    }

    /// Forward pass without a cache.
    pub fn forward_infer(&self, image: &Tensor) -> Result<TrunkForward> {
        self.run(image, false)
    }

    fn run(&self, image: &Tensor, keep: bool) -> Result<TrunkForward> {
        let nb = self.config.num_blocks();
        let mut taps = Vec::with_capacity(nb);
        let mut conv_inputs = Vec::with_capacity(nb);
        let mut pools = Vec::with_capacity(nb);
        let mut x = image.clone();
        for (b, convs) in self.blocks.iter().enumerate() {
            let mut inputs = Vec::new();
            for conv in convs {
                let (h, w) = (x.shape().get(2).copied(), x.shape().get(3).copied());
                let mut y = conv.forward(&x).map_err(|e| Error::InputTooSmall {
                    block: b + 1,
                    reason: format!("{e} (input {h:?}x{w:?})"),
                })?;
                relu_in_place(&mut y);
                if keep {
                    inputs.push(std::mem::replace(&mut x, y));
                } else {
                    x = y;
                }
            }
            conv_inputs.push(inputs);
            let last = b + 1 == nb;
            if self.config.pool_after_block[b] && !last {
                let pooled = maxpool2d(&x, 2, 2).map_err(|e| Error::InputTooSmall {
                    block: b + 1,
                    reason: e.to_string(),
                })?;
                pools.push(Some((pooled.argmax, x.shape().to_vec())));
                taps.push(std::mem::replace(&mut x, pooled.output));
            } else {
                pools.push(None);
                taps.push(x.clone());
            }
        }
        let cache = keep.then_some(TrunkCache { conv_inputs, pools });
        Ok(TrunkForward { blocks: taps, cache })
    }

    /// Gradients of every convolution given gradients at any subset of block taps.
    /// Contributions from several taps are summed where their paths merge.
    pub fn backward(&self, fwd: &TrunkForward, d_taps: &[Option<Tensor>]) -> Result<Vec<Tensor>> {
        let cache = fwd.cache.as_ref().ok_or(Error::MissingCache)?;
        let nb = self.config.num_blocks();
        if d_taps.len() != nb {
            return Err(Error::invalid(format!("expected {nb} tap gradients, got {}", d_taps.len())));
        }
        let Some(deepest) = d_taps.iter().rposition(|d| d.is_some()) else {
            return Ok(self.named_params().iter().map(|(_, t)| Tensor::zeros_like(t)).collect());
        };
        let mut grads: Vec<Vec<(Tensor, Tensor)>> = vec![Vec::new(); nb];
        // gradient flowing into the tap of the current block from deeper blocks
        let mut carry: Option<Tensor> = None;
        for b in (0..nb).rev() {
            let mut g = match (b > deepest, &d_taps[b], carry.take()) {
                (true, _, _) => None,
                (false, Some(d), Some(mut c)) => {
                    c.add_assign(d)?;
                    Some(c)
                }
                (false, Some(d), None) => {
                    if d.shape() != fwd.blocks[b].shape() {
                        return Err(Error::ShapeMismatch {
                            op: "trunk tap gradient",
                            left: d.shape().to_vec(),
                            right: fwd.blocks[b].shape().to_vec(),
                        });
                    }
                    Some(d.clone())
                }
                (false, None, c) => c,
            };
            let convs = &self.blocks[b];
            let mut block_grads = vec![(Tensor::zeros(&[1]), Tensor::zeros(&[1])); convs.len()];
            for i in (0..convs.len()).rev() {
                let input = &cache.conv_inputs[b][i];
                let activation = if i + 1 < convs.len() {
                    &cache.conv_inputs[b][i + 1]
                } else {
                    &fwd.blocks[b]
                };
                match g.take() {
                    Some(dy) => {
                        let dpre = relu_backward(activation, &dy)?;
                        let first_layer = b == 0 && i == 0;
                        let cg = convs[i].backward_opt(input, &dpre, !first_layer)?;
                        block_grads[i] = (cg.weight, cg.bias);
                        g = cg.input;
                    }
                    None => {
                        block_grads[i] = (
                            Tensor::zeros_like(&convs[i].weight),
                            Tensor::zeros_like(&convs[i].bias),
                        );
                    }
                }
            }
            grads[b] = block_grads;
            if b > 0 {
                carry = match (g, &cache.pools[b - 1]) {
                    (Some(dx), Some((argmax, shape))) => Some(maxpool2d_backward(shape, argmax, &dx)?),
                    (g, _) => g,
                };
            }
        }
        Ok(grads
            .into_iter()
            .flatten()
            .flat_map(|(w, b)| [w, b])
            .collect())
    }

    /// Copy every parameter of `src` into `self`. Configs must match exactly.
    pub fn copy_params_from(&mut self, src: &Trunk) -> Result<()> {
        if self.config != src.config {
            return Err(Error::ConfigMismatch {
                expected: self.config.to_string(),
                found: src.config.to_string(),
            });
        }
        self.blocks = src.blocks.clone();
        Ok(())
    }
}

impl Params for Trunk {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (b, convs) in self.blocks.iter().enumerate() {
            for (i, c) in convs.iter().enumerate() {
                out.extend(conv_params(&format!("block{}.conv{}", b + 1, i + 1), c));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flatten()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

/// Copy `src` into `dst`; see [`Trunk::copy_params_from`].
pub fn trunk_copy_params(src: &Trunk, dst: &mut Trunk) -> Result<()> {
    dst.copy_params_from(src)
}

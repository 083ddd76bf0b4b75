//! Spatial convolution sub-module: three 3x3 conv/batchnorm/ReLU blocks with
//! residual connections on the first two blocks only.

use crate::error::Result;
use crate::tensor::nn::{BatchNorm2d, Conv2d, Fwd, Init, ParamRegistry};
use crate::tensor::Tensor;

pub struct SpatialConv {
    blocks: Vec<(Conv2d, BatchNorm2d)>,
}

impl SpatialConv {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        channels: usize,
    ) -> Result<SpatialConv> {
        let mut blocks = Vec::with_capacity(3);
        for b in 0..3 {
            blocks.push((
                Conv2d::same(reg, init, &format!("{name}.b{b}.conv"), 3, channels, channels)?,
                BatchNorm2d::new(reg, &format!("{name}.b{b}.bn"), channels)?,
            ));
        }
        Ok(SpatialConv { blocks })
    }

    /// `[B, H, W, c] -> [B, H, W, c]`, agents riding the batch axis.
    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            let y = bn.forward(&conv.forward(&h, fwd)?, fwd)?.relu()?;
            h = if i < 2 { y.add(&h)? } else { y };
        }
        Ok(h)
    }
}

//! ResNet-18/50/101 with torchvision parameter names (stride on the 3×3
//! convolution of bottleneck blocks).

use candle_core::{Result, Tensor};

use super::defs::{ConvInit, Defs};
use super::{residual_add, Taps};
use crate::nn::{self, ForwardCtx, MaxPool2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Block {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Depth {
    pub block: Block,
    pub layers: [usize; 4],
}

pub(crate) const RESNET18: Depth = Depth {
    block: Block::Basic,
    layers: [2, 2, 2, 2],
};
pub(crate) const RESNET50: Depth = Depth {
    block: Block::Bottleneck,
    layers: [3, 4, 6, 3],
};
pub(crate) const RESNET101: Depth = Depth {
    block: Block::Bottleneck,
    layers: [3, 4, 23, 3],
};

const WIDTHS: [usize; 4] = [64, 128, 256, 512];

const STEM_POOL: MaxPool2d = MaxPool2d {
    kernel: 3,
    stride: 2,
    pad: 1,
    ceil_mode: false,
};

impl Depth {
    fn expansion(&self) -> usize {
        match self.block {
            Block::Basic => 1,
            Block::Bottleneck => 4,
        }
    }

    pub fn feature_dims(&self) -> usize {
        512 * self.expansion()
    }

    /// (prefix, in channels, width, stride) for every block.
    fn blocks(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut inp = 64;
        for (stage, (&n, &width)) in self.layers.iter().zip(WIDTHS.iter()).enumerate() {
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                out.push((format!("layer{}.{i}", stage + 1), inp, width, stride));
                inp = width * self.expansion();
            }
        }
        out
    }

    pub fn defs(&self, classes: usize) -> Defs {
        let mut d = Defs::default();
        let init = ConvInit::KaimingFanOut;
        d.conv("conv1", 64, 3, 7, false, init);
        d.batch_norm("bn1", 64);
        let e = self.expansion();
        for (prefix, inp, width, stride) in self.blocks() {
            match self.block {
                Block::Basic => {
                    d.conv(&format!("{prefix}.conv1"), width, inp, 3, false, init);
                    d.batch_norm(&format!("{prefix}.bn1"), width);
                    d.conv(&format!("{prefix}.conv2"), width, width, 3, false, init);
                    d.batch_norm(&format!("{prefix}.bn2"), width);
                }
                Block::Bottleneck => {
                    d.conv(&format!("{prefix}.conv1"), width, inp, 1, false, init);
                    d.batch_norm(&format!("{prefix}.bn1"), width);
                    d.conv(&format!("{prefix}.conv2"), width, width, 3, false, init);
                    d.batch_norm(&format!("{prefix}.bn2"), width);
                    d.conv(&format!("{prefix}.conv3"), width * e, width, 1, false, init);
                    d.batch_norm(&format!("{prefix}.bn3"), width * e);
                }
            }
            if stride != 1 || inp != width * e {
                d.conv(&format!("{prefix}.downsample.0"), width * e, inp, 1, false, init);
                d.batch_norm(&format!("{prefix}.downsample.1"), width * e);
            }
        }
        d.head(classes, self.feature_dims());
        d
    }

    /// Final conv tap: layer4 output. Features: global average pool.
    pub fn forward(&self, ctx: &mut ForwardCtx, p: &ParamStore, x: &Tensor) -> Result<Taps> {
        let x = nn::conv(ctx, p, "conv1", x, 2, 3)?;
        let x = nn::relu(&nn::batch_norm(ctx, p, "bn1", &x)?)?;
        let mut x = nn::max_pool2d(&x, STEM_POOL)?;
        for (prefix, _, _, stride) in self.blocks() {
            x = self.block_forward(ctx, p, &prefix, &x, stride)?;
        }
        let features = nn::global_avg_pool(&x)?;
        let logits = nn::linear(ctx, p, "head", &features)?;
        Ok(Taps {
            final_conv: x,
            features,
            logits,
        })
    }

    fn block_forward(&self, ctx: &ForwardCtx, p: &ParamStore, prefix: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let cbr = |name: &str, bn: &str, x: &Tensor, stride: usize, pad: usize, act: bool| -> Result<Tensor> {
            let y = nn::conv(ctx, p, &format!("{prefix}.{name}"), x, stride, pad)?;
            let y = nn::batch_norm(ctx, p, &format!("{prefix}.{bn}"), &y)?;
            if act {
                nn::relu(&y)
            } else {
                Ok(y)
            }
        };
        let shortcut = if p.contains(&format!("{prefix}.downsample.0.weight")) {
            cbr("downsample.0", "downsample.1", x, stride, 0, false)?
        } else {
            x.clone()
        };
        let branch = |x: &Tensor| -> Result<Tensor> {
            match self.block {
                Block::Basic => {
                    let y = cbr("conv1", "bn1", x, stride, 1, true)?;
                    cbr("conv2", "bn2", &y, 1, 1, false)
                }
                Block::Bottleneck => {
                    let y = cbr("conv1", "bn1", x, 1, 0, true)?;
                    let y = cbr("conv2", "bn2", &y, stride, 1, true)?;
                    cbr("conv3", "bn3", &y, 1, 0, false)
                }
            }
        };
        nn::relu(&residual_add(&shortcut, &branch(x)?)?)
    }
}

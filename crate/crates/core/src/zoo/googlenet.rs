//! GoogLeNet (Inception v1) in its original form: 5×5 branches, local
//! response normalization, no batch normalization, no auxiliary heads.

use candle_core::{Result, Tensor};

use super::defs::{ConvInit, Defs};
use super::Taps;
use crate::nn::{self, ForwardCtx, MaxPool2d, ParamStore};

pub(crate) const FEATURE_DIMS: usize = 1024;

const POOL: MaxPool2d = MaxPool2d {
    kernel: 3,
    stride: 2,
    pad: 0,
    ceil_mode: true,
};
const BRANCH_POOL: MaxPool2d = MaxPool2d {
    kernel: 3,
    stride: 1,
    pad: 1,
    ceil_mode: false,
};

/// (name, in, 1×1, 3×3 reduce, 3×3, 5×5 reduce, 5×5, pool proj)
const INCEPTION: [(&str, usize, usize, usize, usize, usize, usize, usize); 9] = [
    ("inception3a", 192, 64, 96, 128, 16, 32, 32),
    ("inception3b", 256, 128, 128, 192, 32, 96, 64),
    ("inception4a", 480, 192, 96, 208, 16, 48, 64),
    ("inception4b", 512, 160, 112, 224, 24, 64, 64),
    ("inception4c", 512, 128, 128, 256, 24, 64, 64),
    ("inception4d", 512, 112, 144, 288, 32, 64, 64),
    ("inception4e", 528, 256, 160, 320, 32, 128, 128),
    ("inception5a", 832, 256, 160, 320, 32, 128, 128),
    ("inception5b", 832, 384, 192, 384, 48, 128, 128),
];

pub(crate) fn defs(classes: usize) -> Defs {
    let mut d = Defs::default();
    let init = ConvInit::FanInUniform;
    d.conv("conv1", 64, 3, 7, true, init);
    d.conv("conv2_reduce", 64, 64, 1, true, init);
    d.conv("conv2", 192, 64, 3, true, init);
    for (name, inp, c1, r3, c3, r5, c5, pp) in INCEPTION {
        d.conv(&format!("{name}.b1"), c1, inp, 1, true, init);
        d.conv(&format!("{name}.b2_reduce"), r3, inp, 1, true, init);
        d.conv(&format!("{name}.b2"), c3, r3, 3, true, init);
        d.conv(&format!("{name}.b3_reduce"), r5, inp, 1, true, init);
        d.conv(&format!("{name}.b3"), c5, r5, 5, true, init);
        d.conv(&format!("{name}.b4"), pp, inp, 1, true, init);
    }
    d.head(classes, FEATURE_DIMS);
    d
}

fn conv_relu(ctx: &ForwardCtx, p: &ParamStore, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    nn::relu(&nn::conv(ctx, p, name, x, stride, pad)?)
}

fn lrn(x: &Tensor) -> Result<Tensor> {
    nn::local_response_norm(x, 5, 1e-4, 0.75, 1.0)
}

fn inception(ctx: &ForwardCtx, p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let b1 = conv_relu(ctx, p, &format!("{name}.b1"), x, 1, 0)?;
    let b2 = conv_relu(ctx, p, &format!("{name}.b2_reduce"), x, 1, 0)?;
    let b2 = conv_relu(ctx, p, &format!("{name}.b2"), &b2, 1, 1)?;
    let b3 = conv_relu(ctx, p, &format!("{name}.b3_reduce"), x, 1, 0)?;
    let b3 = conv_relu(ctx, p, &format!("{name}.b3"), &b3, 1, 2)?;
    let b4 = nn::max_pool2d(x, BRANCH_POOL)?;
    let b4 = conv_relu(ctx, p, &format!("{name}.b4"), &b4, 1, 0)?;
    Tensor::cat(&[b1, b2, b3, b4], 1)
}

/// Final conv tap: inception5b output (1024×7×7 at 224×224 input).
/// Features: global average pool.
pub(crate) fn forward(ctx: &mut ForwardCtx, p: &ParamStore, x: &Tensor) -> Result<Taps> {
    let x = conv_relu(ctx, p, "conv1", x, 2, 3)?;
    let x = lrn(&nn::max_pool2d(&x, POOL)?)?;
    let x = conv_relu(ctx, p, "conv2_reduce", &x, 1, 0)?;
    let x = conv_relu(ctx, p, "conv2", &x, 1, 1)?;
    let mut x = nn::max_pool2d(&lrn(&x)?, POOL)?;
    for (name, ..) in INCEPTION {
        x = inception(ctx, p, name, &x)?;
        if name == "inception3b" || name == "inception4e" {
            x = nn::max_pool2d(&x, POOL)?;
        }
    }
    let features = nn::global_avg_pool(&x)?;
    let dropped = nn::dropout(ctx, &features, 0.4)?;
    let logits = nn::linear(ctx, p, "head", &dropped)?;
    Ok(Taps {
        final_conv: x,
        features,
        logits,
    })
}

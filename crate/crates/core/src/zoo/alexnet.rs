//! Single-tower AlexNet with torchvision parameter names.

use candle_core::{Result, Tensor};

use super::defs::{ConvInit, Defs};
use super::Taps;
use crate::nn::{self, ForwardCtx, MaxPool2d, ParamStore};

pub(crate) const FEATURE_DIMS: usize = 4096;

const POOL: MaxPool2d = MaxPool2d::new(3, 2);

pub(crate) fn defs(classes: usize) -> Defs {
    let mut d = Defs::default();
    let init = ConvInit::FanInUniform;
    d.conv("features.0", 64, 3, 11, true, init);
    d.conv("features.3", 192, 64, 5, true, init);
    d.conv("features.6", 384, 192, 3, true, init);
    d.conv("features.8", 256, 384, 3, true, init);
    d.conv("features.10", 256, 256, 3, true, init);
    d.linear("classifier.1", 4096, 256 * 6 * 6);
    d.linear("classifier.4", 4096, 4096);
    d.head(classes, FEATURE_DIMS);
    d
}

/// Final conv tap: conv5 after ReLU (256×13×13 at 227×227 input).
/// Features: fc7 after ReLU.
pub(crate) fn forward(ctx: &mut ForwardCtx, p: &ParamStore, x: &Tensor) -> Result<Taps> {
    let x = nn::relu(&nn::conv(ctx, p, "features.0", x, 4, 2)?)?;
    let x = nn::max_pool2d(&x, POOL)?;
    let x = nn::relu(&nn::conv(ctx, p, "features.3", &x, 1, 2)?)?;
    let x = nn::max_pool2d(&x, POOL)?;
    let x = nn::relu(&nn::conv(ctx, p, "features.6", &x, 1, 1)?)?;
    let x = nn::relu(&nn::conv(ctx, p, "features.8", &x, 1, 1)?)?;
    let conv5 = nn::relu(&nn::conv(ctx, p, "features.10", &x, 1, 1)?)?;
    let x = nn::max_pool2d(&conv5, POOL)?;
    if x.dim(2)? != 6 || x.dim(3)? != 6 {
        candle_core::bail!("alexnet expects a 6x6 pool5 map, got {:?}", x.dims());
    }
    let x = x.flatten_from(1)?;
    let x = nn::dropout(ctx, &x, 0.5)?;
    let x = nn::relu(&nn::linear(ctx, p, "classifier.1", &x)?)?;
    let x = nn::dropout(ctx, &x, 0.5)?;
    let fc7 = nn::relu(&nn::linear(ctx, p, "classifier.4", &x)?)?;
    let logits = nn::linear(ctx, p, "head", &fc7)?;
    Ok(Taps {
        final_conv: conv5,
        features: fc7,
        logits,
    })
}

//! Minimal layer toolkit on top of candle tensors.
//!
//! Models are plain functions over a [`ParamStore`]; layers look up their
//! parameters by dotted name. Forward behavior that differs between training
//! and inference (dropout, batch statistics) is driven by [`ForwardCtx`].

pub mod ops;
mod params;

use candle_core::{DType, Device, Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use self::ops::{conv2d, max_pool2d, MaxPool2d};
pub use self::params::{Param, ParamKind, ParamStore};

/// Per-forward-pass switches.
pub struct ForwardCtx {
    train: bool,
    trainable_prefixes: Option<Vec<String>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Inference: no dropout, batch norm uses running statistics.
    pub fn eval() -> Self {
        Self {
            train: false,
            trainable_prefixes: None,
            dropout_rng: None,
        }
    }

    /// Training with dropout masks drawn from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            trainable_prefixes: None,
            dropout_rng: Some(rng),
        }
    }

    /// Treat every parameter not under one of `trainable` as a constant: no
    /// gradient flows into it and its batch-norm layers stay in inference mode.
    pub fn freeze_all_but(mut self, trainable: &[&str]) -> Self {
        self.trainable_prefixes = Some(trainable.iter().map(|p| p.to_string()).collect());
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn is_frozen(&self, name: &str) -> bool {
        match &self.trainable_prefixes {
            None => false,
            Some(prefixes) => !prefixes.iter().any(|p| name.starts_with(p.as_str())),
        }
    }

    /// Parameter tensor, detached when frozen.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let t = store.tensor(name)?;
        Ok(if self.is_frozen(name) { t.detach() } else { t })
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.relu()
}

/// Convolution layer `<prefix>.weight` / optional `<prefix>.bias`.
pub fn conv(ctx: &ForwardCtx, store: &ParamStore, prefix: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let w = ctx.param(store, &format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if store.contains(&bias_name) {
        Some(ctx.param(store, &bias_name)?)
    } else {
        None
    };
    conv2d(x, &w, b.as_ref(), stride, pad)
}

/// Fully connected layer `<prefix>.weight` (out×in) and `<prefix>.bias`.
pub fn linear(ctx: &ForwardCtx, store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = ctx.param(store, &format!("{prefix}.weight"))?;
    let b = ctx.param(store, &format!("{prefix}.bias"))?;
    x.matmul(&w.t()?)?.broadcast_add(&b)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D batch normalization with running statistics.
///
/// In training mode the batch mean and biased variance normalize the input
/// and the running buffers are updated with the unbiased variance.
pub fn batch_norm(ctx: &ForwardCtx, store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let gamma = ctx.param(store, &format!("{prefix}.weight"))?.reshape((1, c, 1, 1))?;
    let beta = ctx.param(store, &format!("{prefix}.bias"))?.reshape((1, c, 1, 1))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let use_batch_stats = ctx.train && !ctx.is_frozen(&format!("{prefix}.weight"));
    let (mean, var) = if use_batch_stats {
        let (b, _, h, w) = x.dims4()?;
        let n = (b * h * w) as f64;
        let mean = x.mean_keepdim((0, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
        let rm = store.tensor(&rm_name)?;
        let rv = store.tensor(&rv_name)?;
        let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
        let new_rm = ((rm * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
        let new_rv = ((rv * (1.0 - BN_MOMENTUM))? + (unbiased.flatten_all()? * BN_MOMENTUM)?)?;
        store.set(&rm_name, &new_rm)?;
        store.set(&rv_name, &new_rv)?;
        (mean, var)
    } else {
        (
            store.tensor(&rm_name)?.reshape((1, c, 1, 1))?,
            store.tensor(&rv_name)?.reshape((1, c, 1, 1))?,
        )
    };
    let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
    x.broadcast_sub(&mean)?
        .broadcast_mul(&inv_std)?
        .broadcast_mul(&gamma)?
        .broadcast_add(&beta)
}

/// Cross-channel local response normalization:
/// `x / (k + alpha/size * Σ_window x²)^beta`.
pub fn local_response_norm(x: &Tensor, size: usize, alpha: f64, beta: f64, k: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    let sq = x.sqr()?;
    let half = size / 2;
    let padded = sq.pad_with_zeros(1, half, size - 1 - half)?;
    let mut acc = padded.narrow(1, 0, c)?;
    for off in 1..size {
        acc = (acc + padded.narrow(1, off, c)?)?;
    }
    let scale = ((acc * (alpha / size as f64))? + k)?;
    x.mul(&(scale.log()? * (-beta))?.exp()?)
}

/// Inverted dropout; identity outside training.
pub fn dropout(ctx: &mut ForwardCtx, x: &Tensor, p: f64) -> Result<Tensor> {
    if !ctx.train || p == 0.0 {
        return Ok(x.clone());
    }
    let Some(rng) = ctx.dropout_rng.as_mut() else {
        return Ok(x.clone());
    };
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    x.mul(&mask)
}

/// Mean over the spatial dimensions: `B×C×H×W → B×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean((2, 3))
}

/// Stack equally sized CHW buffers into a `B×3×H×W` f32 tensor.
pub fn batch_from_planes(images: &[&[f32]], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * height * width);
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::from_vec(data, (images.len(), 3, height, width), &Device::Cpu)
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::zeros(shape, DType::F32, &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[-1.0f32, 0.0, 2.5], &Device::Cpu).unwrap();
        assert_eq!(relu(&x).unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 0.0, 2.5]);
    }

    #[test]
    fn lrn_matches_direct_formula() {
        let vals: Vec<f64> = (0..2 * 7 * 2 * 2).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = Tensor::from_vec(vals.clone(), (2, 7, 2, 2), &Device::Cpu).unwrap();
        let y = local_response_norm(&x, 5, 1e-2, 0.75, 1.0).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for b in 0..2 {
            for c in 0..7i64 {
                for p in 0..4 {
                    let at = |cc: i64| vals[((b * 7 + cc as usize) * 4) + p];
                    let s: f64 = (c - 2..=c + 2).filter(|&cc| (0..7).contains(&cc)).map(|cc| at(cc).powi(2)).sum();
                    let want = at(c) / (1.0 + 1e-2 / 5.0 * s).powf(0.75);
                    let got = y[(b * 7 + c as usize) * 4 + p];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        use rand::SeedableRng;
        let x = Tensor::ones((4, 100), DType::F32, &Device::Cpu).unwrap();
        let mut ev = ForwardCtx::eval();
        assert_eq!(
            dropout(&mut ev, &x, 0.5).unwrap().to_vec2::<f32>().unwrap(),
            x.to_vec2::<f32>().unwrap()
        );
        let run = || {
            let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(9));
            dropout(&mut ctx, &x, 0.5).unwrap().to_vec2::<f32>().unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let zeros = a.iter().flatten().filter(|&&v| v == 0.0).count();
        assert!((120..280).contains(&zeros), "{zeros}");
        assert!(a.iter().flatten().all(|&v| v == 0.0 || v == 2.0));
    }
}

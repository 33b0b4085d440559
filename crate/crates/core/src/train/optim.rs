use std::collections::BTreeMap;

use candle_core::{DType, Result, Tensor, D};
use num_traits::Float;

use crate::dataset::Label;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// `-(y ln p + (1 - y) ln(1 - p))` with `p` the predicted TB probability.
pub fn cross_entropy(p_tb: f64, label: Label) -> f64 {
    let p = p_tb.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match label {
        Label::Tb => -p.ln(),
        Label::Healthy => -(1.0 - p).ln(),
    }
}

/// Mean cross-entropy of `B×2` logits, through a log-softmax with the
/// log-probability of the true class clamped to `[ln 1e-12, ln(1 - 1e-12)]`.
pub fn cross_entropy_logits(logits: &Tensor, labels: &[Label]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() || k != 2 {
        candle_core::bail!("cross entropy: logits {:?} for {} labels", logits.dims(), labels.len());
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let idx: Vec<u32> = labels.iter().map(|l| l.index() as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), logits.device())?;
    let picked = log_probs.gather(&idx, 1)?.squeeze(1)?;
    let lo = PROB_CLAMP.ln();
    let hi = (-PROB_CLAMP).ln_1p();
    picked.clamp(lo, hi)?.mean_all()?.neg()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
}

/// One momentum step, elementwise:
/// `v ← momentum·v − weight_decay·ε·w − ε·g`, then `w ← w + v`.
pub fn sgd_momentum_step<T: Float>(v: &mut [T], w: &mut [T], grad: &[T], p: SgdParams<T>) {
    assert!(v.len() == w.len() && w.len() == grad.len(), "sgd: length mismatch");
    let decay = p.weight_decay * p.learning_rate;
    for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(grad) {
        *vi = p.momentum * *vi - decay * *wi - p.learning_rate * gi;
        *wi = *wi + *vi;
    }
}

/// Momentum buffers keyed by parameter name, created as zeros on first use.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Vec<f32>>,
    /// Number of mini-batch steps taken.
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one step to `weight` given its mean mini-batch gradient, returning
    /// the updated weight tensor.
    pub fn step(&mut self, name: &str, weight: &Tensor, grad: &Tensor, p: SgdParams<f64>) -> Result<Tensor> {
        let shape = weight.shape().clone();
        let mut w = weight.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
        if v.len() != w.len() || g.len() != w.len() {
            candle_core::bail!("optimizer state for {name} has the wrong shape");
        }
        let p32 = SgdParams {
            learning_rate: p.learning_rate as f32,
            momentum: p.momentum as f32,
            weight_decay: p.weight_decay as f32,
        };
        sgd_momentum_step(v, &mut w, &g, p32);
        Tensor::from_vec(w, shape, weight.device())
    }
}

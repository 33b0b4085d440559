use candle_core::{Device, Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{ParamKind, ParamStore};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

/// Ordered parameter declarations for one architecture.
#[derive(Debug, Default)]
pub(crate) struct Defs(pub Vec<ParamDef>);

/// How convolution weights are initialized when not loaded from a file.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ConvInit {
    /// Uniform in ±1/sqrt(fan_in) for weight and bias.
    FanInUniform,
    /// Normal with std sqrt(2 / fan_out).
    KaimingFanOut,
}

impl Defs {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, init: Init) {
        self.0.push(ParamDef { name, shape, kind, init });
    }

    pub fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, bias: bool, init: ConvInit) {
        let fan_in = (inp * k * k) as f64;
        let w_init = match init {
            ConvInit::FanInUniform => Init::Uniform(1.0 / fan_in.sqrt()),
            ConvInit::KaimingFanOut => Init::Normal((2.0 / (out * k * k) as f64).sqrt()),
        };
        self.push(format!("{name}.weight"), vec![out, inp, k, k], ParamKind::Weight, w_init);
        if bias {
            let b_init = match init {
                ConvInit::FanInUniform => Init::Uniform(1.0 / fan_in.sqrt()),
                ConvInit::KaimingFanOut => Init::Zeros,
            };
            self.push(format!("{name}.bias"), vec![out], ParamKind::Bias, b_init);
        }
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        self.push(format!("{name}.weight"), vec![out, inp], ParamKind::Weight, Init::Uniform(bound));
        self.push(format!("{name}.bias"), vec![out], ParamKind::Bias, Init::Uniform(bound));
    }

    /// Classification head: N(0, 0.01) weights, zero bias.
    pub fn head(&mut self, classes: usize, inp: usize) {
        self.push("head.weight".into(), vec![classes, inp], ParamKind::Weight, Init::Normal(0.01));
        self.push("head.bias".into(), vec![classes], ParamKind::Bias, Init::Zeros);
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.weight"), vec![c], ParamKind::Weight, Init::Ones);
        self.push(format!("{name}.bias"), vec![c], ParamKind::Bias, Init::Zeros);
        self.push(format!("{name}.running_mean"), vec![c], ParamKind::Buffer, Init::Zeros);
        self.push(format!("{name}.running_var"), vec![c], ParamKind::Buffer, Init::Ones);
    }

    pub fn trainable_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.0
            .iter()
            .filter(|d| d.kind != ParamKind::Buffer && filter(&d.name))
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    /// Materialize every declaration, drawing random values from `rng` in
    /// declaration order.
    pub fn build(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for d in &self.0 {
            let n: usize = d.shape.iter().product();
            let data: Vec<f32> = match d.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b) as f32).collect(),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(rng) as f32).collect()
                }
            };
            store.insert(d.name.clone(), Tensor::from_vec(data, d.shape.as_slice(), &Device::Cpu)?, d.kind)?;
        }
        Ok(store)
    }

    /// All-zero store with the declared shapes, for loading saved weights.
    pub fn build_zeros(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for d in &self.0 {
            store.insert(d.name.clone(), Tensor::zeros(d.shape.as_slice(), candle_core::DType::F32, &Device::Cpu)?, d.kind)?;
        }
        Ok(store)
    }
}

//! Two-class classifiers on ImageNet backbones.
//!
//! Parameter names follow torchvision for AlexNet and the ResNets, so a
//! torchvision state dict exported to safetensors (see
//! `scripts/export_torchvision_weights.py`) loads without renaming. The
//! original 1000-way layer is dropped and replaced by `head.weight` /
//! `head.bias` producing two logits (healthy, tb).

mod alexnet;
mod defs;
mod googlenet;
mod resnet;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImageDims, ImageTensor, Label};
use crate::nn::{ForwardCtx, ParamStore};
use crate::rng;

use self::defs::Defs;

/// Environment variable naming the directory of pretrained `<backbone>.safetensors` files.
pub const WEIGHTS_DIR_ENV: &str = "TBSCREEN_WEIGHTS_DIR";

pub type ZooResult<T> = Result<T, ZooError>;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown backbone {0:?}; expected one of alexnet, googlenet, resnet18, resnet50, resnet101")]
    UnknownBackbone(String),
    #[error("pretrained weights for {backbone} not found at {path}\n{instructions}")]
    WeightsUnavailable {
        backbone: BackboneName,
        path: PathBuf,
        instructions: String,
    },
    #[error("weights file {path} lacks {} backbone tensors, first: {first}", .count)]
    IncompleteWeights { path: PathBuf, count: usize, first: String },
    #[error("{backbone} expects {expected} input, got {got}")]
    DimMismatch {
        backbone: BackboneName,
        expected: ImageDims,
        got: ImageDims,
    },
    #[error("residual shapes differ: input {input:?}, branch {branch:?}")]
    ShapeMismatch { input: Vec<usize>, branch: Vec<usize> },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{backbone} has no global-average-pooled linear head; class-weighted maps are undefined")]
    NoGapHead { backbone: BackboneName },
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    AlexNet,
    GoogLeNet,
    ResNet18,
    ResNet50,
    ResNet101,
}

impl BackboneName {
    pub const ALL: [BackboneName; 5] = [
        BackboneName::AlexNet,
        BackboneName::GoogLeNet,
        BackboneName::ResNet18,
        BackboneName::ResNet50,
        BackboneName::ResNet101,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::AlexNet => "alexnet",
            BackboneName::GoogLeNet => "googlenet",
            BackboneName::ResNet18 => "resnet18",
            BackboneName::ResNet50 => "resnet50",
            BackboneName::ResNet101 => "resnet101",
        }
    }

    pub fn spec(self) -> BackboneSpec {
        BackboneSpec::of(self)
    }

    pub(crate) fn defs(self, classes: usize) -> Defs {
        match self {
            BackboneName::AlexNet => alexnet::defs(classes),
            BackboneName::GoogLeNet => googlenet::defs(classes),
            BackboneName::ResNet18 => resnet::RESNET18.defs(classes),
            BackboneName::ResNet50 => resnet::RESNET50.defs(classes),
            BackboneName::ResNet101 => resnet::RESNET101.defs(classes),
        }
    }

    /// `(name, shape)` of every tensor, in declaration order, for a
    /// `classes`-way head.
    pub fn param_shapes(self, classes: usize) -> Vec<(String, Vec<usize>)> {
        self.defs(classes).0.into_iter().map(|d| (d.name, d.shape)).collect()
    }

    /// Trainable parameter count of the published 1000-class network.
    pub fn imagenet_param_count(self) -> usize {
        self.defs(1000).trainable_count(|_| true)
    }
}

impl std::fmt::Display for BackboneName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackboneName {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str() == norm)
            .ok_or_else(|| ZooError::UnknownBackbone(s.to_string()))
    }
}

/// Fixed facts about a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub input_dims: ImageDims,
    /// Layer whose output is tapped for activation heatmaps.
    pub final_conv_layer: &'static str,
    /// Shape of the tapped stack at `input_dims`.
    pub final_conv_shape: [usize; 3],
    /// Layer whose output serves as the fixed feature vector.
    pub feature_layer: &'static str,
    pub feature_dims: usize,
    /// Published size of the ImageNet network, in millions.
    pub param_count_millions: f64,
    /// Per-channel input normalization applied inside the model to `[0, 1]`
    /// RGB intensities: `(x - mean) / std`.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Feed channels in BGR order.
    pub bgr: bool,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl BackboneSpec {
    pub fn of(name: BackboneName) -> Self {
        let torchvision = |input: usize, layer, shape, feature_layer, feature_dims, millions| BackboneSpec {
            name,
            input_dims: ImageDims::square(input),
            final_conv_layer: layer,
            final_conv_shape: shape,
            feature_layer,
            feature_dims,
            param_count_millions: millions,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            bgr: false,
        };
        match name {
            BackboneName::AlexNet => torchvision(227, "features.10", [256, 13, 13], "classifier.4", 4096, 60.0),
            BackboneName::GoogLeNet => BackboneSpec {
                name,
                input_dims: ImageDims::square(224),
                final_conv_layer: "inception5b",
                final_conv_shape: [1024, 7, 7],
                feature_layer: "pool5",
                feature_dims: googlenet::FEATURE_DIMS,
                param_count_millions: 7.0,
                // mean subtraction on the 0-255 scale, BGR input
                mean: [123.0 / 255.0, 117.0 / 255.0, 104.0 / 255.0],
                std: [1.0 / 255.0; 3],
                bgr: true,
            },
            BackboneName::ResNet18 => torchvision(224, "layer4", [512, 7, 7], "avgpool", 512, 11.7),
            BackboneName::ResNet50 => torchvision(224, "layer4", [2048, 7, 7], "avgpool", 2048, 25.6),
            BackboneName::ResNet101 => torchvision(224, "layer4", [2048, 7, 7], "avgpool", 2048, 44.6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsOrigin {
    ImagenetPretrained,
    Finetuned,
    Random,
}

/// Intermediate outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Taps {
    /// `B×C×H×W` stack at the final convolutional layer.
    pub final_conv: Tensor,
    /// `B×D` fixed-feature vectors.
    pub features: Tensor,
    /// `B×2` class logits.
    pub logits: Tensor,
}

/// Softmax output for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub healthy: f64,
    pub tb: f64,
}

impl ClassProbs {
    /// Numerically stable two-way softmax in f64.
    pub fn from_logits(healthy: f64, tb: f64) -> Self {
        let m = healthy.max(tb);
        let (a, b) = ((healthy - m).exp(), (tb - m).exp());
        let s = a + b;
        Self { healthy: a / s, tb: b / s }
    }

    /// Arg-max class; a tie goes to healthy.
    pub fn predicted(&self) -> Label {
        if self.tb > self.healthy {
            Label::Tb
        } else {
            Label::Healthy
        }
    }
}

/// `x + f(x)`.
pub fn residual_apply(x: &Tensor, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> ZooResult<Tensor> {
    let fx = f(x)?;
    residual_add(x, &fx).map_err(|_| ZooError::ShapeMismatch {
        input: x.dims().to_vec(),
        branch: fx.dims().to_vec(),
    })
}

/// Elementwise sum of a shortcut and a branch of identical shape.
pub(crate) fn residual_add(x: &Tensor, fx: &Tensor) -> candle_core::Result<Tensor> {
    if x.dims() != fx.dims() {
        candle_core::bail!("residual shapes differ: {:?} vs {:?}", x.dims(), fx.dims());
    }
    x + fx
}

pub fn relu(x: &Tensor) -> candle_core::Result<Tensor> {
    crate::nn::relu(x)
}

/// JSON sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneName,
    pub weights_origin: WeightsOrigin,
    pub train_config_hash: Option<String>,
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
}

/// Where [`build_classifier`] finds pretrained weights and seeds the new head.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Directory holding `<backbone>.safetensors`; falls back to
    /// `$TBSCREEN_WEIGHTS_DIR`.
    pub weights_dir: Option<PathBuf>,
    pub seed: u64,
}

impl BuildOptions {
    pub fn weights_file(&self, name: BackboneName) -> Option<PathBuf> {
        self.weights_dir
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
            .map(|d| d.join(format!("{name}.safetensors")))
    }
}

fn retrieval_instructions(name: BackboneName) -> String {
    let how = match name {
        BackboneName::GoogLeNet => "convert the original Inception v1 release to safetensors with the parameter names listed by `tbscreen report --params googlenet`".to_string(),
        _ => format!("run `python scripts/export_torchvision_weights.py {name} --out <dir>` on a machine with network access"),
    };
    format!("to obtain them, {how}, then pass --weights-dir <dir> or set {WEIGHTS_DIR_ENV}=<dir>")
}

/// A backbone with a two-way head.
#[derive(Debug)]
pub struct ClassifierModel {
    spec: BackboneSpec,
    params: ParamStore,
    weights_origin: WeightsOrigin,
}

/// Build a classifier, loading every non-head tensor from the pretrained file
/// when `pretrained` is set. The head is always freshly drawn from `seed`.
pub fn build_classifier(name: BackboneName, pretrained: bool, opts: &BuildOptions) -> ZooResult<ClassifierModel> {
    let mut model = ClassifierModel::random(name, opts.seed)?;
    if !pretrained {
        return Ok(model);
    }
    let path = opts.weights_file(name).unwrap_or_else(|| PathBuf::from(format!("<unset {WEIGHTS_DIR_ENV}>/{name}.safetensors")));
    if !path.is_file() {
        return Err(ZooError::WeightsUnavailable {
            backbone: name,
            path,
            instructions: retrieval_instructions(name),
        });
    }
    let tensors = ParamStore::read_safetensors(&path)?;
    let missing = model.params.assign_from(&tensors, |k| !k.starts_with("head."))?;
    if let Some(first) = missing.first() {
        return Err(ZooError::IncompleteWeights {
            path,
            count: missing.len(),
            first: first.clone(),
        });
    }
    model.weights_origin = WeightsOrigin::ImagenetPretrained;
    Ok(model)
}

fn is_backbone_param(name: &str) -> bool {
    !name.starts_with("head.")
}

impl ClassifierModel {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn random(name: BackboneName, seed: u64) -> ZooResult<Self> {
        let mut r = rng::stream(seed, &["init".into(), name.as_str().into()]);
        Ok(Self {
            spec: name.spec(),
            params: name.defs(2).build(&mut r)?,
            weights_origin: WeightsOrigin::Random,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn name(&self) -> BackboneName {
        self.spec.name
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn weights_origin(&self) -> WeightsOrigin {
        self.weights_origin
    }

    pub fn set_weights_origin(&mut self, origin: WeightsOrigin) {
        self.weights_origin = origin;
    }

    pub fn try_clone(&self) -> ZooResult<Self> {
        Ok(Self {
            spec: self.spec,
            params: self.params.deep_clone()?,
            weights_origin: self.weights_origin,
        })
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.count_trainable(is_backbone_param)
    }

    pub fn total_param_count(&self) -> usize {
        self.params.count_trainable(|_| true)
    }

    /// SHA-256 over every tensor except the head.
    pub fn backbone_checksum(&self) -> ZooResult<String> {
        Ok(self.params.checksum(is_backbone_param)?)
    }

    pub fn checksum(&self) -> ZooResult<String> {
        Ok(self.params.checksum(|_| true)?)
    }

    pub fn check_dims(&self, got: ImageDims) -> ZooResult<()> {
        if got != self.spec.input_dims {
            return Err(ZooError::DimMismatch {
                backbone: self.spec.name,
                expected: self.spec.input_dims,
                got,
            });
        }
        Ok(())
    }

    /// Stack images into a `B×3×H×W` batch after checking their dims.
    pub fn batch(&self, images: &[&ImageTensor]) -> ZooResult<Tensor> {
        for img in images {
            self.check_dims(img.dims())?;
        }
        let planes: Vec<&[f32]> = images.iter().map(|i| i.data()).collect();
        let d = self.spec.input_dims;
        Ok(crate::nn::batch_from_planes(&planes, d.height, d.width)?)
    }

    fn normalize(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (mut mean, mut std) = (self.spec.mean, self.spec.std);
        let mut x = x.clone();
        if self.spec.bgr {
            mean.reverse();
            std.reverse();
            x = x.index_select(&Tensor::new(&[2u32, 1, 0], &Device::Cpu)?, 1)?;
        }
        let mean = Tensor::new(&mean, &Device::Cpu)?.reshape((1, 3, 1, 1))?.to_dtype(x.dtype())?;
        let inv = Tensor::new(&std.map(|s| 1.0 / s), &Device::Cpu)?.reshape((1, 3, 1, 1))?.to_dtype(x.dtype())?;
        x.broadcast_sub(&mean)?.broadcast_mul(&inv)
    }

    /// Forward a `B×3×H×W` batch of `[0, 1]` intensities.
    pub fn forward(&self, ctx: &mut ForwardCtx, x: &Tensor) -> ZooResult<Taps> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(ZooError::Tensor(candle_core::Error::Msg(format!("expected 3 channels, got {c}"))));
        }
        self.check_dims(ImageDims { height: h, width: w })?;
        let x = self.normalize(x)?;
        let p = &self.params;
        let taps = match self.spec.name {
            BackboneName::AlexNet => alexnet::forward(ctx, p, &x)?,
            BackboneName::GoogLeNet => googlenet::forward(ctx, p, &x)?,
            BackboneName::ResNet18 => resnet::RESNET18.forward(ctx, p, &x)?,
            BackboneName::ResNet50 => resnet::RESNET50.forward(ctx, p, &x)?,
            BackboneName::ResNet101 => resnet::RESNET101.forward(ctx, p, &x)?,
        };
        Ok(taps)
    }

    /// Inference-mode forward of a batch of images.
    pub fn infer(&self, images: &[&ImageTensor]) -> ZooResult<Taps> {
        let x = self.batch(images)?;
        self.forward(&mut ForwardCtx::eval(), &x)
    }

    /// Class probabilities (healthy, tb) for one image.
    pub fn predict(&self, image: &ImageTensor) -> ZooResult<ClassProbs> {
        Ok(self.predict_batch(&[image])?[0])
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> ZooResult<Vec<ClassProbs>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let taps = self.infer(images)?;
        probs_from_logits(&taps.logits)
    }

    /// Final-conv activation stack `C×H×W` for one image.
    pub fn final_conv_maps(&self, image: &ImageTensor) -> ZooResult<Tensor> {
        Ok(self.infer(&[image])?.final_conv.squeeze(0)?)
    }

    /// Fixed feature vectors, one row per image.
    pub fn features(&self, images: &[&ImageTensor]) -> ZooResult<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.infer(images)?.features.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    /// Head weights `2×C` for class-weighted maps; only defined when the head
    /// reads a global average of the final conv stack.
    pub fn gap_head_weights(&self) -> ZooResult<Vec<Vec<f32>>> {
        match self.spec.name {
            BackboneName::AlexNet => Err(ZooError::NoGapHead { backbone: self.spec.name }),
            _ => Ok(self.params.tensor("head.weight")?.to_vec2::<f32>()?),
        }
    }

    /// Write `<path>` (safetensors) and `<path>.json`-style sidecar
    /// (`path.with_extension("json")`).
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> ZooResult<()> {
        let err = |msg: String| ZooError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if meta.backbone != self.spec.name {
            return Err(err(format!("sidecar names {} but model is {}", meta.backbone, self.spec.name)));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        self.params.save_safetensors(path)?;
        let json = serde_json::to_string_pretty(meta).map_err(|e| err(e.to_string()))?;
        std::fs::write(path.with_extension("json"), json + "\n").map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Load a checkpoint written by [`ClassifierModel::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> ZooResult<(Self, CheckpointMeta)> {
        let err = |msg: String| ZooError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| err(format!("sidecar {}: {e}", side.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| err(format!("sidecar: {e}")))?;
        let params = meta.backbone.defs(2).build_zeros()?;
        let tensors = ParamStore::read_safetensors(path)?;
        let missing = params.assign_from(&tensors, |_| true)?;
        if let Some(first) = missing.first() {
            return Err(err(format!("{} tensors missing, first: {first}", missing.len())));
        }
        Ok((
            Self {
                spec: meta.backbone.spec(),
                params,
                weights_origin: meta.weights_origin,
            },
            meta.clone(),
        ))
    }
}

/// Row-wise two-way softmax of `B×2` logits.
pub fn probs_from_logits(logits: &Tensor) -> ZooResult<Vec<ClassProbs>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|r| ClassProbs::from_logits(r[0], r[1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        for b in BackboneName::ALL {
            assert_eq!(b.as_str().parse::<BackboneName>().unwrap(), b);
        }
        assert_eq!("ResNet-18".parse::<BackboneName>().unwrap(), BackboneName::ResNet18);
        assert!(matches!("vgg16".parse::<BackboneName>(), Err(ZooError::UnknownBackbone(_))));
    }

    #[test]
    fn published_sizes_within_five_percent() {
        for b in BackboneName::ALL {
            let got = b.imagenet_param_count() as f64 / 1e6;
            let want = b.spec().param_count_millions;
            assert!((got - want).abs() / want <= 0.05, "{b}: {got:.3}M vs {want}M");
        }
    }

    #[test]
    fn exact_torchvision_counts() {
        assert_eq!(BackboneName::AlexNet.imagenet_param_count(), 61_100_840);
        assert_eq!(BackboneName::ResNet18.imagenet_param_count(), 11_689_512);
        assert_eq!(BackboneName::ResNet50.imagenet_param_count(), 25_557_032);
        assert_eq!(BackboneName::ResNet101.imagenet_param_count(), 44_549_160);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        for (a, b) in [(0.0, 0.0), (1000.0, -1000.0), (-3.5, 2.25), (1e-9, 0.0)] {
            let p = ClassProbs::from_logits(a, b);
            assert!((p.healthy + p.tb - 1.0).abs() < 1e-12);
            assert!(p.healthy.is_finite() && p.tb.is_finite());
        }
    }

    #[test]
    fn residual_zero_branch_is_identity() {
        let x = Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap();
        let y = residual_apply(&x, |t| t.zeros_like()).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let z = residual_apply(&x.zeros_like().unwrap(), |t| t.ones_like()?.affine(0.0, 4.0)).unwrap();
        assert_eq!(z.to_vec2::<f32>().unwrap(), vec![vec![4.0; 2]; 2]);
        let tripled = residual_apply(&x, |t| t.affine(2.0, 0.0)).unwrap();
        assert_eq!(tripled.to_vec2::<f32>().unwrap(), x.affine(3.0, 0.0).unwrap().to_vec2::<f32>().unwrap());
        let bad = residual_apply(&x, |t| t.narrow(1, 0, 1));
        assert!(matches!(bad, Err(ZooError::ShapeMismatch { .. })));
    }

    #[test]
    fn missing_weights_error_carries_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BuildOptions {
            weights_dir: Some(dir.path().to_path_buf()),
            seed: 0,
        };
        let e = build_classifier(BackboneName::ResNet18, true, &opts).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("export_torchvision_weights.py"), "{msg}");
        assert!(msg.contains(WEIGHTS_DIR_ENV));
    }
}

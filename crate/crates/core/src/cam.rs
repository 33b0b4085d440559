//! Activation heatmaps over the final convolutional layer.
//!
//! The default mode picks the single most activated channel of the tapped
//! stack; the class-weighted mode sums channels with the head weights of the
//! predicted class. Either map is min-max normalized, bilinearly upsampled to
//! the input size and blended over the radiograph with a fixed color ramp.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{bilinear_resize_plane, ImageDims, ImageTensor, Label};
use crate::zoo::{BackboneName, ClassifierModel, ZooError};

pub type CamResult<T> = Result<T, CamError>;

#[derive(Debug, Error)]
pub enum CamError {
    #[error("feature stack must be C×H×W with C, H, W ≥ 1, got {0:?}")]
    BadStack(Vec<usize>),
    #[error("feature stack has a negative or non-finite activation at index {0}")]
    BadActivation(usize),
    #[error("channel {channel} out of range for a {channels}-channel stack")]
    BadChannel { channel: usize, channels: usize },
    #[error("{what} dims {got} differ from {expected}")]
    DimMismatch {
        what: &'static str,
        expected: ImageDims,
        got: ImageDims,
    },
    #[error("overlay alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("{weights} head weights for a {channels}-channel stack")]
    WeightCount { weights: usize, channels: usize },
    #[error("cannot tap layer {layer} of {backbone}: {source}")]
    Tap {
        backbone: BackboneName,
        layer: &'static str,
        #[source]
        source: ZooError,
    },
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error("png encoding failed: {0}")]
    Encode(String),
}

/// Post-ReLU activations `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMapStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> CamResult<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(CamError::BadStack(vec![channels, height, width, data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CamError::BadActivation(i));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &candle_core::Tensor) -> CamResult<Self> {
        let (c, h, w) = t.dims3().map_err(|_| CamError::BadStack(t.dims().to_vec()))?;
        let data = t
            .to_dtype(candle_core::DType::F32)
            .and_then(|t| t.flatten_all())
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(ZooError::from)?;
        Self::new(c, h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// How the strongest channel is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelCriterion {
    /// Largest activation sum.
    #[default]
    Sum,
    /// Largest single activation.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    #[default]
    StrongestChannel,
    /// Head-weighted channel sum for the predicted class.
    ClassWeighted,
}

/// Final-conv activations of `model` for one image.
pub fn extract_final_conv_maps(model: &ClassifierModel, image: &ImageTensor) -> CamResult<FeatureMapStack> {
    let t = model.final_conv_maps(image).map_err(|source| match source {
        e @ ZooError::DimMismatch { .. } => CamError::Model(e),
        source => CamError::Tap {
            backbone: model.name(),
            layer: model.spec().final_conv_layer,
            source,
        },
    })?;
    FeatureMapStack::from_tensor(&t)
}

/// Index of the strongest channel; ties go to the lowest index.
pub fn strongest_channel(stack: &FeatureMapStack, criterion: ChannelCriterion) -> usize {
    let score = |c: usize| -> f64 {
        let m = stack.channel(c);
        match criterion {
            ChannelCriterion::Sum => m.iter().map(|&v| v as f64).sum(),
            ChannelCriterion::Max => m.iter().fold(0.0f64, |a, &v| a.max(v as f64)),
        }
    };
    let mut best = 0;
    let mut best_score = score(0);
    for c in 1..stack.channels {
        let s = score(c);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Values in `[0, 1]` at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub dims: ImageDims,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(1.0, f32::min)
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > self.values[b] { i } else { b });
        (i / self.dims.width, i % self.dims.width)
    }
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
fn min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    let span = hi - lo;
    values.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Normalize a raw `h×w` map, upsample it to `out`, and rescale so the
/// upsampled maximum is exactly 1 (bilinear sampling can miss the peak).
pub fn heatmap_from_map(map: &[f32], height: usize, width: usize, out: ImageDims) -> Heatmap {
    let norm = min_max(map);
    let up = if (height, width) == (out.height, out.width) {
        norm
    } else {
        bilinear_resize_plane(&norm, height, width, out.height, out.width)
    };
    Heatmap {
        dims: out,
        values: min_max(&up),
    }
}

pub fn make_heatmap(stack: &FeatureMapStack, channel: usize, out: ImageDims) -> CamResult<Heatmap> {
    if channel >= stack.channels {
        return Err(CamError::BadChannel {
            channel,
            channels: stack.channels,
        });
    }
    Ok(heatmap_from_map(stack.channel(channel), stack.height, stack.width, out))
}

/// `Σ_c weights[c] · map_c`, the raw class activation map.
pub fn class_weighted_map(stack: &FeatureMapStack, weights: &[f32]) -> CamResult<Vec<f32>> {
    if weights.len() != stack.channels {
        return Err(CamError::WeightCount {
            weights: weights.len(),
            channels: stack.channels,
        });
    }
    let n = stack.height * stack.width;
    let mut acc = vec![0.0f64; n];
    for (c, &w) in weights.iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(stack.channel(c)) {
            *a += w as f64 * v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Piecewise-linear blue→cyan→green→yellow→red ramp with stops at
/// 0, 0.25, 0.5, 0.75 and 1.
pub fn jet(v: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let v = v.clamp(0.0, 1.0) * 4.0;
    let i = (v.floor() as usize).min(3);
    let t = v - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
}

impl Colormap {
    pub fn apply(self, v: f32) -> [f32; 3] {
        match self {
            Colormap::Jet => jet(v),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(1 - alpha)·gray + alpha·colormap(heatmap)` per pixel, quantized to 8 bits.
pub fn overlay(image: &ImageTensor, heatmap: &Heatmap, alpha: f64, colormap: Colormap) -> CamResult<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CamError::BadAlpha(alpha));
    }
    if image.dims() != heatmap.dims {
        return Err(CamError::DimMismatch {
            what: "heatmap",
            expected: image.dims(),
            got: heatmap.dims,
        });
    }
    let (h, w) = (image.height(), image.width());
    let gray = image.luminance();
    let a = alpha as f32;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let c = colormap.apply(heatmap.values[i]);
        let g = gray[i];
        *px = Rgb([
            to_u8((1.0 - a) * g + a * c[0]),
            to_u8((1.0 - a) * g + a * c[1]),
            to_u8((1.0 - a) * g + a * c[2]),
        ]);
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> CamResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| CamError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamOptions {
    pub mode: CamMode,
    pub criterion: ChannelCriterion,
    pub alpha: f64,
    pub colormap: Colormap,
}

impl Default for CamOptions {
    fn default() -> Self {
        Self {
            mode: CamMode::StrongestChannel,
            criterion: ChannelCriterion::Sum,
            alpha: 0.5,
            colormap: Colormap::Jet,
        }
    }
}

/// Contents of `<id>.heatmap.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub backbone: BackboneName,
    pub layer: String,
    pub mode: CamMode,
    pub criterion: ChannelCriterion,
    /// Selected channel in strongest-channel mode.
    pub channel: Option<usize>,
    /// Class whose head weights were used in class-weighted mode.
    pub class: Option<Label>,
    pub alpha: f64,
    pub stack_shape: [usize; 3],
    pub raw_min: f32,
    pub raw_max: f32,
    pub raw_mean: f32,
    pub tb_score: f64,
}

#[derive(Debug, Clone)]
pub struct CamOutput {
    pub heatmap: Heatmap,
    pub png: Vec<u8>,
    pub meta: HeatmapMeta,
}

/// Full pipeline for one image: tap, select, upsample, blend, encode.
pub fn render_cam(model: &ClassifierModel, image: &ImageTensor, opts: &CamOptions) -> CamResult<CamOutput> {
    let taps = model.infer(&[image])?;
    let probs = crate::zoo::probs_from_logits(&taps.logits)?[0];
    let t = taps.final_conv.squeeze(0).map_err(ZooError::from)?;
    let stack = FeatureMapStack::from_tensor(&t)?;
    let (raw, channel, class) = match opts.mode {
        CamMode::StrongestChannel => {
            let c = strongest_channel(&stack, opts.criterion);
            (stack.channel(c).to_vec(), Some(c), None)
        }
        CamMode::ClassWeighted => {
            let class = probs.predicted();
            let w = model.gap_head_weights()?;
            (class_weighted_map(&stack, &w[class.index()])?, None, Some(class))
        }
    };
    let heatmap = heatmap_from_map(&raw, stack.height, stack.width, image.dims());
    let png = encode_png(&overlay(image, &heatmap, opts.alpha, opts.colormap)?)?;
    let n = raw.len() as f32;
    let meta = HeatmapMeta {
        backbone: model.name(),
        layer: model.spec().final_conv_layer.to_string(),
        mode: opts.mode,
        criterion: opts.criterion,
        channel,
        class,
        alpha: opts.alpha,
        stack_shape: stack.shape(),
        raw_min: raw.iter().copied().fold(f32::INFINITY, f32::min),
        raw_max: raw.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        raw_mean: raw.iter().sum::<f32>() / n,
        tb_score: probs.tb,
    };
    Ok(CamOutput { heatmap, png, meta })
}

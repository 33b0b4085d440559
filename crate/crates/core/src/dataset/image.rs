use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CxrRecord, DatasetError, DatasetResult};

/// Height × width in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub const fn square(side: usize) -> Self {
        Self {
            height: side,
            width: side,
        }
    }

    pub fn area(self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A 3-channel image in planar (CHW) layout with intensities in `[0, 1]`.
///
/// `0.0` is black. Backbone-specific mean/std normalization is applied inside
/// the model, so the same tensor feeds every backbone and the heatmap overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> DatasetResult<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(DatasetError::InvalidRecord {
                id: "<tensor>".into(),
                msg: format!("expected {} values for 3x{height}x{width}, got {}", 3 * height * width, data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidRecord {
                id: "<tensor>".into(),
                msg: format!("non-finite intensity {bad}"),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(dims: ImageDims, value: f32) -> Self {
        Self {
            height: dims.height,
            width: dims.width,
            data: vec![value; Self::CHANNELS * dims.area()],
        }
    }

    /// Replicate a single grayscale plane into three channels.
    pub fn from_gray(dims: ImageDims, plane: &[f32]) -> Self {
        assert_eq!(plane.len(), dims.area(), "plane size mismatch");
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..Self::CHANNELS {
            data.extend_from_slice(plane);
        }
        Self {
            height: dims.height,
            width: dims.width,
            data,
        }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            height: self.height,
            width: self.width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
            .collect()
    }

    /// Hex SHA-256 over dims and raw little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Convert a decoded image, resizing bilinearly to `target`.
    ///
    /// 8- and 16-bit inputs are scaled to `[0, 1]`; grayscale is replicated.
    pub fn from_dynamic(img: &DynamicImage, target: ImageDims) -> DatasetResult<Self> {
        if target.area() == 0 {
            return Err(DatasetError::ZeroArea {
                height: target.height,
                width: target.width,
            });
        }
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        let mut data = Vec::with_capacity(3 * target.area());
        for c in 0..Self::CHANNELS {
            let plane: Vec<f32> = raw.iter().skip(c).step_by(3).copied().collect();
            let resized = bilinear_resize_plane(&plane, h, w, target.height, target.width);
            data.extend(resized.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Ok(Self {
            height: target.height,
            width: target.width,
            data,
        })
    }

    /// Load from disk; see [`ImageTensor::from_dynamic`].
    pub fn load(path: &Path, target: ImageDims) -> DatasetResult<Self> {
        if target.area() == 0 {
            return Err(DatasetError::ZeroArea {
                height: target.height,
                width: target.width,
            });
        }
        let img = image::ImageReader::open(path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| DatasetError::Decode {
                path: path.to_owned(),
                msg: e.to_string(),
            })?
            .decode()
            .map_err(|e| DatasetError::Decode {
                path: path.to_owned(),
                msg: e.to_string(),
            })?;
        Self::from_dynamic(&img, target)
    }
}

/// Decode the record's image and resize it to `target`.
pub fn load_and_resize(record: &CxrRecord, target: ImageDims) -> DatasetResult<ImageTensor> {
    ImageTensor::load(&record.image_path, target)
}

/// Bilinear resampling of one plane with half-pixel centers and edge clamping.
///
/// Resizing to the same size returns the input unchanged.
pub fn bilinear_resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "plane size mismatch");
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, oh);
    let xs = taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

use std::path::Path;

use tbscreen_core::cam::{render_cam, CamOptions};
use tbscreen_core::dataset::ImageDims;
use tbscreen_core::{ClassifierModel, ImageTensor};

use crate::ServiceError;

/// Inference backend shared read-only by all request handlers.
pub trait CaseScorer: Send + Sync {
    /// Images are resized to this before scoring.
    fn input_dims(&self) -> ImageDims;
    /// TB probability in `[0, 1]`.
    fn score(&self, image: &ImageTensor) -> Result<f64, ServiceError>;
    /// Heatmap overlay as PNG bytes.
    fn heatmap_png(&self, image: &ImageTensor) -> Result<Vec<u8>, ServiceError>;
    fn describe(&self) -> String;
}

/// A fine-tuned classifier with strongest-channel overlays.
pub struct ModelScorer {
    model: ClassifierModel,
    cam: CamOptions,
}

impl ModelScorer {
    pub fn new(model: ClassifierModel, cam: CamOptions) -> Self {
        Self { model, cam }
    }

    pub fn from_checkpoint(path: &Path, cam: CamOptions) -> Result<Self, ServiceError> {
        let (model, _) = ClassifierModel::load_checkpoint(path).map_err(|e| ServiceError::Model(e.to_string()))?;
        Ok(Self::new(model, cam))
    }
}

impl CaseScorer for ModelScorer {
    fn input_dims(&self) -> ImageDims {
        self.model.spec().input_dims
    }

    fn score(&self, image: &ImageTensor) -> Result<f64, ServiceError> {
        let p = self.model.predict(image).map_err(|e| ServiceError::Model(e.to_string()))?;
        Ok(p.tb)
    }

    fn heatmap_png(&self, image: &ImageTensor) -> Result<Vec<u8>, ServiceError> {
        Ok(render_cam(&self.model, image, &self.cam).map_err(|e| ServiceError::Model(e.to_string()))?.png)
    }

    fn describe(&self) -> String {
        format!("{} ({:?})", self.model.name(), self.model.weights_origin())
    }
}

/// Decode uploaded bytes and resize for the scorer.
pub fn decode_image(bytes: &[u8], dims: ImageDims) -> Result<(ImageTensor, &'static str), ServiceError> {
    let format = image::guess_format(bytes).map_err(|e| ServiceError::Unsupported(format!("not an image: {e}")))?;
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ServiceError::Unsupported(format!("undecodable image: {e}")))?;
    let tensor = ImageTensor::from_dynamic(&img, dims).map_err(|e| ServiceError::Unsupported(e.to_string()))?;
    let ext = format.extensions_str().first().copied().unwrap_or("img");
    Ok((tensor, ext))
}

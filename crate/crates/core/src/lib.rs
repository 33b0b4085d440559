//! Tuberculosis screening on chest radiographs.
//!
//! The crate covers the whole offline pipeline: building a labeled image
//! manifest and a stratified train/val/test split ([`dataset`]), constructing
//! two-class classifiers on ImageNet backbones ([`zoo`]), fine-tuning them with
//! momentum SGD ([`train`]), scoring them with sensitivity/specificity/accuracy
//! and ROC analysis ([`eval`]), rendering activation heatmaps ([`cam`]) and the
//! fixed-feature linear classifier comparison ([`baseline`]).
//!
//! Images travel through the pipeline as [`ImageTensor`]s with intensities in
//! `[0, 1]`; each backbone applies its own input normalization internally.

pub mod baseline;
pub mod cam;
pub mod dataset;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod train;
pub mod zoo;

pub use dataset::{
    AugmentationConfig, CxrRecord, DatasetManifest, ImageTensor, Label, Source, Split,
    SplitAssignment,
};
pub use eval::{ConfusionMatrix, EvalReport, MetricsReport, RocCurve};
pub use train::{FreezePolicy, OptimizerState, TrainConfig, TrainingRun};
pub use zoo::{BackboneName, BackboneSpec, ClassifierModel, WeightsOrigin};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cross_entropy_logits, FreezePolicy, OptimizerState, TrainConfig, TrainError, TrainResult};
use crate::dataset::{
    apply_augmentation, load_and_resize, AugmentationConfig, DatasetManifest, ImageDims, ImageTensor, Label, Split,
    SplitAssignment,
};
use crate::nn::{ForwardCtx, ParamStore};
use crate::rng;
use crate::zoo::{probs_from_logits, CheckpointMeta, ClassifierModel, WeightsOrigin};

/// A decoded, resized image with its label.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub image: ImageTensor,
}

/// Load every image of one split at `dims`, in manifest order.
pub fn load_examples(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    which: Split,
    dims: ImageDims,
) -> TrainResult<Vec<Example>> {
    let index = manifest.index();
    split
        .ids(manifest, which)
        .into_iter()
        .map(|id| {
            let rec = index[id];
            Ok(Example {
                id: id.to_string(),
                label: rec.label,
                image: load_and_resize(rec, dims)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// Fraction of training examples classified correctly during the epoch,
    /// on the augmented batches in training mode.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub per_epoch: Vec<EpochRecord>,
    /// Epoch of the selected weights; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub train_config_hash: String,
}

/// Where and how a run is persisted.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Keep only this many most recent `epoch-<n>` checkpoints (best is always
    /// kept). `None` keeps all.
    pub retain_epoch_checkpoints: Option<usize>,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    backbone: crate::zoo::BackboneName,
    initial_weights: WeightsOrigin,
    train: &'a TrainConfig,
    augmentation: &'a AugmentationConfig,
    train_config_hash: String,
    n_train: usize,
    n_val: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fraction of `examples` whose arg-max class equals the label, in inference mode.
pub fn validate(model: &ClassifierModel, examples: &[Example]) -> TrainResult<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(10) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|e| &e.image).collect();
        let probs = model.predict_batch(&imgs)?;
        correct += probs.iter().zip(chunk).filter(|(p, e)| p.predicted() == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn checkpoint_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("{tag}.safetensors"))
}

fn copy_checkpoint(from: &Path, to: &Path) -> TrainResult<()> {
    std::fs::copy(from, to).map_err(io_err(to))?;
    std::fs::copy(from.with_extension("json"), to.with_extension("json")).map_err(io_err(to))?;
    Ok(())
}

fn remove_checkpoint(path: &Path) {
    let _ = std::fs::remove_file(path);
    let _ = std::fs::remove_file(path.with_extension("json"));
}

/// Example indices of every mini-batch of `epoch` (1-based), in visiting order.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &["shuffle".into(), epoch.into()]));
    order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// The training input for `ex` in `epoch`.
pub fn augmented(ex: &Example, aug: &AugmentationConfig, epoch: usize) -> ImageTensor {
    let draw = aug.draw(&mut aug.rng_for(epoch, &ex.id));
    apply_augmentation(&ex.image, draw, aug.fill_value)
}

/// Fine-tune `model` on `train_set`, selecting the epoch with the highest
/// validation accuracy (earliest on ties). On return the model holds the
/// selected weights.
pub fn train(
    model: &mut ClassifierModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> TrainResult<TrainingRun> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let dims = model.spec().input_dims;
    for e in train_set.iter().chain(val_set) {
        model.check_dims(e.image.dims())?;
    }
    aug.validate(dims)?;

    let config_hash = cfg.hash();
    let initial_origin = model.weights_origin();
    let mut metrics_file = None;
    if let Some(dir) = &opts.run_dir {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(io_err(&ck))?;
        let rc = RunConfig {
            backbone: model.name(),
            initial_weights: initial_origin,
            train: cfg,
            augmentation: aug,
            train_config_hash: config_hash.clone(),
            n_train: train_set.len(),
            n_val: val_set.len(),
        };
        let p = dir.join("config.json");
        let json = serde_json::to_string_pretty(&rc).expect("config serializes") + "\n";
        std::fs::write(&p, json).map_err(io_err(&p))?;
        let p = dir.join("metrics.jsonl");
        metrics_file = Some((std::fs::File::create(&p).map_err(io_err(&p))?, p));
    }

    let meta = |epoch: usize, val: Option<f64>, origin: WeightsOrigin| CheckpointMeta {
        backbone: model.name(),
        weights_origin: origin,
        train_config_hash: Some(config_hash.clone()),
        epoch: Some(epoch),
        val_accuracy: val,
    };

    let mut run = TrainingRun {
        per_epoch: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: None,
        best_checkpoint: None,
        train_config_hash: config_hash.clone(),
    };

    if cfg.epochs == 0 {
        if let Some(dir) = &opts.run_dir {
            let best = checkpoint_path(dir, "best");
            model.save_checkpoint(&best, &meta(0, None, initial_origin))?;
            run.best_checkpoint = Some(best);
        }
        return Ok(run);
    }

    let frozen = cfg.freeze_policy == FreezePolicy::BackboneFrozen;
    let updatable: Vec<String> = model
        .params()
        .iter()
        .filter(|(name, p)| p.is_trainable() && (!frozen || name.starts_with("head.")))
        .map(|(name, _)| name.to_string())
        .collect();
    let sgd = cfg.sgd();
    let mut opt = OptimizerState::new();
    let mut best_params: Option<ParamStore> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut kept_epochs: Vec<PathBuf> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (bi, batch) in epoch_batches(train_set.len(), cfg, epoch).iter().enumerate() {
            let images: Vec<ImageTensor> = batch.iter().map(|&i| augmented(&train_set[i], aug, epoch)).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train_set[i].label).collect();
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let x = model.batch(&refs)?;
            let mut ctx = ForwardCtx::train(rng::stream(cfg.seed, &["dropout".into(), epoch.into(), bi.into()]));
            if frozen {
                ctx = ctx.freeze_all_but(&["head."]);
            }
            let taps = model.forward(&mut ctx, &x)?;
            let loss = cross_entropy_logits(&taps.logits, &labels)?;
            let loss_val = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi,
                    last_good,
                });
            }
            loss_sum += loss_val * batch.len() as f64;
            correct += probs_from_logits(&taps.logits)?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p.predicted() == **l)
                .count();
            let grads = loss.backward()?;
            let params = model.params();
            let mut updates: Vec<(&str, Tensor)> = Vec::with_capacity(updatable.len());
            for name in &updatable {
                let w = params.tensor(name)?;
                let g = match grads.get(&w) {
                    Some(g) => g.clone(),
                    None => w.zeros_like()?,
                };
                if !g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?.is_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        param: name.clone(),
                        epoch,
                        batch: bi,
                    });
                }
                updates.push((name, opt.step(name, &w, &g, sgd)?));
            }
            for (name, w) in updates {
                params.set(name, &w)?;
            }
            opt.iteration += 1;
        }

        let val_accuracy = validate(model, val_set)?;
        let rec = EpochRecord {
            epoch,
            mean_train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        let improved = run.best_val_accuracy.is_none_or(|b| val_accuracy > b);
        if improved {
            run.best_epoch = epoch;
            run.best_val_accuracy = Some(val_accuracy);
            best_params = Some(model.params().deep_clone()?);
        }
        if let Some(dir) = &opts.run_dir {
            let path = checkpoint_path(dir, &format!("epoch-{epoch}"));
            model.save_checkpoint(&path, &meta(epoch, Some(val_accuracy), WeightsOrigin::Finetuned))?;
            if improved {
                let best = checkpoint_path(dir, "best");
                copy_checkpoint(&path, &best)?;
                run.best_checkpoint = Some(best);
            }
            last_good = Some(path.clone());
            kept_epochs.push(path);
            if let Some(keep) = opts.retain_epoch_checkpoints {
                while kept_epochs.len() > keep.max(1) {
                    remove_checkpoint(&kept_epochs.remove(0));
                }
            }
        }
        if let Some((f, p)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(io_err(p))?;
            f.flush().map_err(io_err(p))?;
        }
        on_epoch(&rec);
        run.per_epoch.push(rec);
    }

    if let Some(best) = best_params {
        let source = best.to_map();
        model.params().assign_from(&source, |_| true)?;
    }
    model.set_weights_origin(WeightsOrigin::Finetuned);
    Ok(run)
}

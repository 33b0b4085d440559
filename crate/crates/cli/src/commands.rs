use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use tbscreen_core::baseline::{
    evaluate_baseline, extract_features, fit_linear_classifier, write_feature_cache, Approach, ArmReport, ComparisonReport,
    SvmConfig,
};
use tbscreen_core::cam::{render_cam, CamMode, CamOptions, ChannelCriterion};
use tbscreen_core::dataset::{scan_dataset, stratified_split, LabelLayout, SplitRatios};
use tbscreen_core::eval::{self, render_roc_svg, EvalReport, RocSeries, ScoreRow};
use tbscreen_core::train::{self, load_examples, EpochRecord, Example, RunOptions};
use tbscreen_core::zoo::{build_classifier, BuildOptions};
use tbscreen_core::{
    AugmentationConfig, BackboneName, ClassifierModel, DatasetManifest, FreezePolicy, ImageTensor, Source, Split,
    SplitAssignment, TrainConfig,
};

use crate::{CliError, Command, Common};

type CliResult<T> = Result<T, CliError>;

pub fn run(cmd: Command, c: &Common) -> CliResult<()> {
    match cmd {
        Command::Ingest(a) => ingest(a, c),
        Command::Split(a) => split(a, c),
        Command::Train(a) => train_cmd(a, c),
        Command::Eval(a) => eval_cmd(a, c),
        Command::Cam(a) => cam(a, c),
        Command::Baseline(a) => baseline(a, c),
        Command::Compare(a) => compare(a, c),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a, c),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn out_dir(c: &Common) -> CliResult<&Path> {
    std::fs::create_dir_all(&c.out_dir).map_err(io_err(&c.out_dir))?;
    Ok(&c.out_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Print a one-line JSON summary on stdout.
fn summary<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn parse_backbone(s: &str) -> Result<BackboneName, String> {
    s.parse::<BackboneName>().map_err(|e| e.to_string())
}

fn load_data(manifest: &Path, split: &Path) -> CliResult<(DatasetManifest, SplitAssignment)> {
    let m = DatasetManifest::read_jsonl(manifest)?;
    let s = SplitAssignment::read(split)?;
    s.check_covers(&m)?;
    Ok((m, s))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Layout {
    /// `<root>/<class>/...`, class directory names such as normal/tb.
    Subdirs,
    /// `_0` / `_1` file-stem suffix.
    Suffix,
    /// `path,label` CSV given by --labels.
    Sidecar,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Subdirs)]
    pub layout: Layout,
    /// Label CSV for the sidecar layout.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "other")]
    pub source: Source,
}

fn ingest(a: IngestArgs, c: &Common) -> CliResult<()> {
    let layout = match a.layout {
        Layout::Subdirs => LabelLayout::default(),
        Layout::Suffix => LabelLayout::FilenameSuffix,
        Layout::Sidecar => LabelLayout::Sidecar(
            a.labels.ok_or_else(|| CliError::Invalid("--layout sidecar needs --labels <csv>".into()))?,
        ),
    };
    let scan = scan_dataset(&a.root, &layout, a.source)?;
    let dir = out_dir(c)?;
    scan.manifest.write_jsonl(&dir.join("manifest.jsonl"))?;
    #[derive(Serialize)]
    struct IngestReport<'a> {
        root: &'a Path,
        records: usize,
        class_counts: &'a std::collections::BTreeMap<tbscreen_core::Label, usize>,
        unlabeled: &'a [PathBuf],
        undecodable: Vec<(String, String)>,
    }
    let rep = IngestReport {
        root: &a.root,
        records: scan.manifest.len(),
        class_counts: scan.manifest.class_counts(),
        unlabeled: &scan.unlabeled,
        undecodable: scan.undecodable.iter().map(|(p, m)| (p.display().to_string(), m.clone())).collect(),
    };
    write_json(&dir.join("ingest_report.json"), &rep)?;
    summary(&rep);
    Ok(())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [t, v, te] => SplitRatios::new(t, v, te).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated fractions, e.g. 0.5,0.25,0.25".into()),
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.5,0.25,0.25")]
    pub ratios: SplitRatios,
}

fn split(a: SplitArgs, c: &Common) -> CliResult<()> {
    let m = DatasetManifest::read_jsonl(&a.manifest)?;
    let s = stratified_split(&m, a.ratios, c.seed)?;
    let path = out_dir(c)?.join("split.json");
    s.write(&path)?;
    let counts: Vec<_> = s
        .counts(&m)
        .into_iter()
        .map(|((split, label), n)| serde_json::json!({"split": split, "label": label, "count": n}))
        .collect();
    summary(&serde_json::json!({"split": path, "seed": c.seed, "hash": s.content_hash(), "counts": counts}));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Freeze {
    None,
    BackboneFrozen,
}

/// Where a model's starting weights come from.
#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Directory holding `<backbone>.safetensors`; defaults to $TBSCREEN_WEIGHTS_DIR.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    /// Start from random weights instead of ImageNet weights.
    #[arg(long)]
    pub random_init: bool,
}

impl WeightsArgs {
    fn build(&self, name: BackboneName, seed: u64) -> CliResult<ClassifierModel> {
        let opts = BuildOptions {
            weights_dir: self.weights_dir.clone(),
            seed,
        };
        Ok(build_classifier(name, !self.random_init, &opts)?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_backbone)]
    pub backbone: BackboneName,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[command(flatten)]
    pub weights: WeightsArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = Freeze::None)]
    pub freeze_policy: Freeze,
    /// Disable random mirroring and translation.
    #[arg(long)]
    pub no_augment: bool,
    /// Keep only the newest N per-epoch checkpoints (best is always kept).
    #[arg(long)]
    pub keep_checkpoints: Option<usize>,
}

fn load_split(m: &DatasetManifest, s: &SplitAssignment, which: Split, model: &ClassifierModel) -> CliResult<Vec<Example>> {
    Ok(load_examples(m, s, which, model.spec().input_dims)?)
}

fn train_cmd(a: TrainArgs, c: &Common) -> CliResult<()> {
    let (m, s) = load_data(&a.manifest, &a.split)?;
    let mut model = a.weights.build(a.backbone, c.seed)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: c.seed,
        freeze_policy: match a.freeze_policy {
            Freeze::None => FreezePolicy::None,
            Freeze::BackboneFrozen => FreezePolicy::BackboneFrozen,
        },
    };
    cfg.validate()?;
    let aug = if a.no_augment {
        AugmentationConfig {
            seed: c.seed,
            ..AugmentationConfig::disabled()
        }
    } else {
        AugmentationConfig {
            seed: c.seed,
            ..AugmentationConfig::default()
        }
    };
    let train_set = load_split(&m, &s, Split::Train, &model)?;
    let val_set = load_split(&m, &s, Split::Val, &model)?;
    let dir = out_dir(c)?.to_path_buf();
    let opts = RunOptions {
        run_dir: Some(dir.clone()),
        retain_epoch_checkpoints: a.keep_checkpoints,
    };
    let run = train::train(&mut model, &train_set, &val_set, &cfg, &aug, &opts, |r: &EpochRecord| {
        eprintln!(
            "epoch {:>2}/{}  loss {:.4}  train acc {:.4}  val acc {:.4}  ({:.1}s)",
            r.epoch, cfg.epochs, r.mean_train_loss, r.train_accuracy, r.val_accuracy, r.elapsed_s
        );
    })?;
    #[derive(Serialize)]
    struct RunSummary<'a> {
        backbone: BackboneName,
        seed: u64,
        split_hash: String,
        #[serde(flatten)]
        run: &'a train::TrainingRun,
    }
    let rs = RunSummary {
        backbone: a.backbone,
        seed: c.seed,
        split_hash: s.content_hash(),
        run: &run,
    };
    write_json(&dir.join("run.json"), &rs)?;
    summary(&serde_json::json!({
        "run_dir": dir,
        "best_epoch": run.best_epoch,
        "best_val_accuracy": run.best_val_accuracy,
        "best_checkpoint": run.best_checkpoint,
    }));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WhichSplit {
    Train,
    Val,
    Test,
}

impl From<WhichSplit> for Split {
    fn from(w: WhichSplit) -> Split {
        match w {
            WhichSplit::Train => Split::Train,
            WhichSplit::Val => Split::Val,
            WhichSplit::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `id,label,tb_score` CSV to evaluate directly.
    #[arg(long, conflicts_with_all = ["checkpoint", "manifest", "split"])]
    pub scores: Option<PathBuf>,
    /// Checkpoint to score a split with; needs --manifest and --split.
    #[arg(long, requires_all = ["manifest", "split"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = WhichSplit::Test)]
    pub which: WhichSplit,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

/// Score every example with a trained model.
pub fn score_examples(model: &ClassifierModel, examples: &[Example]) -> CliResult<Vec<ScoreRow>> {
    let mut rows = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(10) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|e| &e.image).collect();
        for (e, p) in chunk.iter().zip(model.predict_batch(&imgs)?) {
            rows.push(ScoreRow {
                id: e.id.clone(),
                label: e.label,
                tb_score: p.tb,
            });
        }
    }
    Ok(rows)
}

fn write_eval_artifacts(dir: &Path, report: &EvalReport, curve: Option<&eval::RocCurve>, title: &str) -> CliResult<()> {
    if let (Some(curve), Some(auc)) = (curve, report.auc) {
        eval::write_roc_csv(&dir.join("roc.csv"), curve)?;
        let svg = render_roc_svg(&[RocSeries { label: title, curve, auc }], "ROC");
        write_text(&dir.join("roc.svg"), &svg)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, c: &Common) -> CliResult<()> {
    if !(a.threshold.is_finite()) {
        return Err(CliError::Invalid(format!("threshold {} is not finite", a.threshold)));
    }
    let dir = out_dir(c)?;
    match (&a.scores, &a.checkpoint) {
        (Some(scores), None) => {
            let rows = eval::read_scores_csv(scores)?;
            let (report, curve) = EvalReport::from_rows(&rows, a.threshold)?;
            write_json(&dir.join("metrics.json"), &report)?;
            write_eval_artifacts(dir, &report, curve.as_ref(), "scores")?;
            summary(&report);
        }
        (None, Some(ck)) => {
            let (m, s) = load_data(a.manifest.as_deref().expect("clap requires"), a.split.as_deref().expect("clap requires"))?;
            let (model, meta) = ClassifierModel::load_checkpoint(ck)?;
            let examples = load_split(&m, &s, a.which.into(), &model)?;
            let rows = score_examples(&model, &examples)?;
            eval::write_scores_csv(&dir.join("scores.csv"), &rows)?;
            let (report, curve) = EvalReport::from_rows(&rows, a.threshold)?;
            let arm = ArmReport {
                approach: Approach::EndToEnd,
                backbone: meta.backbone,
                split_hash: s.content_hash(),
                seed: c.seed,
                report,
            };
            write_json(&dir.join("metrics.json"), &arm)?;
            write_eval_artifacts(dir, &arm.report, curve.as_ref(), meta.backbone.as_str())?;
            summary(&arm);
        }
        _ => return Err(CliError::Invalid("pass either --scores or --checkpoint with --manifest and --split".into())),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    StrongestChannel,
    ClassWeighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Criterion {
    Sum,
    Max,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images to render; alternatively --manifest, --split and --which.
    #[arg(long = "image", num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, requires = "split")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = WhichSplit::Test)]
    pub which: WhichSplit,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = Mode::StrongestChannel)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Criterion::Sum)]
    pub criterion: Criterion,
}

fn cam(a: CamArgs, c: &Common) -> CliResult<()> {
    let (model, _) = ClassifierModel::load_checkpoint(&a.checkpoint)?;
    let dims = model.spec().input_dims;
    let mut jobs: Vec<(String, ImageTensor)> = Vec::new();
    for p in &a.images {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        jobs.push((stem, ImageTensor::load(p, dims)?));
    }
    if let (Some(mp), Some(sp)) = (&a.manifest, &a.split) {
        let (m, s) = load_data(mp, sp)?;
        for e in load_split(&m, &s, a.which.into(), &model)? {
            jobs.push((e.id.replace('/', "__"), e.image));
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Invalid("no images: pass --image or --manifest/--split".into()));
    }
    let opts = CamOptions {
        mode: match a.mode {
            Mode::StrongestChannel => CamMode::StrongestChannel,
            Mode::ClassWeighted => CamMode::ClassWeighted,
        },
        criterion: match a.criterion {
            Criterion::Sum => ChannelCriterion::Sum,
            Criterion::Max => ChannelCriterion::Max,
        },
        alpha: a.alpha,
        ..CamOptions::default()
    };
    let dir = out_dir(c)?;
    for (name, img) in &jobs {
        let out = render_cam(&model, img, &opts)?;
        let png = dir.join(format!("{name}.heatmap.png"));
        std::fs::write(&png, &out.png).map_err(io_err(&png))?;
        write_json(&dir.join(format!("{name}.heatmap.json")), &out.meta)?;
        summary(&serde_json::json!({"image": name, "heatmap": png, "tb_score": out.meta.tb_score, "channel": out.meta.channel}));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_parser = parse_backbone)]
    pub backbone: BackboneName,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[command(flatten)]
    pub weights: WeightsArgs,
    /// Hinge-loss weight of the linear classifier.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

fn baseline(a: BaselineArgs, c: &Common) -> CliResult<()> {
    let (m, s) = load_data(&a.manifest, &a.split)?;
    let model = a.weights.build(a.backbone, c.seed)?;
    let before = model.backbone_checksum()?;
    let dir = out_dir(c)?;
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let layer = model.spec().feature_layer;
    let mut mats = Vec::new();
    for which in [Split::Train, Split::Test] {
        let ex = load_split(&m, &s, which, &model)?;
        let pairs: Vec<(&str, &ImageTensor)> = ex.iter().map(|e| (e.id.as_str(), &e.image)).collect();
        let mat = extract_features(&model, &pairs)?;
        write_feature_cache(&feat_dir.join(format!("{}-{}", a.backbone, which.as_str())), &mat, a.backbone, layer)?;
        let labels: Vec<_> = ex.iter().map(|e| e.label).collect();
        mats.push((mat, labels));
    }
    if model.backbone_checksum()? != before {
        return Err(CliError::Invalid("backbone weights changed during feature extraction".into()));
    }
    let (test, test_labels) = mats.pop().expect("two splits");
    let (train_m, train_labels) = mats.pop().expect("two splits");
    let cfg = SvmConfig {
        c: a.c,
        seed: c.seed,
        ..SvmConfig::default()
    };
    let clf = fit_linear_classifier(&train_m, &train_labels, &cfg)?;
    write_json(&dir.join("svm.json"), &serde_json::json!({"backbone": a.backbone, "layer": layer, "config": cfg, "model": clf}))?;
    let ev = evaluate_baseline(&clf, &test, &test_labels, a.backbone, &s.content_hash())?;
    eval::write_scores_csv(&dir.join("scores.csv"), &ev.scores)?;
    let arm = ArmReport {
        approach: Approach::FeatureBased,
        backbone: a.backbone,
        split_hash: ev.split_hash.clone(),
        seed: c.seed,
        report: EvalReport::from_rows(&ev.scores, a.threshold)?.0,
    };
    write_json(&dir.join("metrics.json"), &arm)?;
    write_eval_artifacts(dir, &arm.report, ev.roc.as_ref(), &format!("{} features", a.backbone))?;
    summary(&arm);
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// `metrics.json` files written by `eval --checkpoint` or `baseline`.
    #[arg(long = "report", required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
}

fn compare(a: CompareArgs, c: &Common) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in &a.reports {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let arm: ArmReport = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
        rows.push(arm.row());
    }
    let rep = ComparisonReport::new(rows);
    let dir = out_dir(c)?;
    write_json(&dir.join("comparison.json"), &rep)?;
    write_text(&dir.join("comparison.md"), &rep.to_markdown())?;
    print!("{}", rep.to_markdown());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML config; TBSCREEN_* environment variables and flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub heatmap_mode: Option<tbscreen_service::HeatmapMode>,
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let mut cfg = tbscreen_service::ServiceConfig::load(a.config.as_deref())?;
    if let Some(v) = a.host {
        cfg.host = v;
    }
    if let Some(v) = a.port {
        cfg.port = v;
    }
    if let Some(v) = a.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = a.data_dir {
        cfg.data_dir = v;
    }
    if let Some(v) = a.static_dir {
        cfg.static_dir = Some(v);
    }
    if let Some(v) = a.heatmap_mode {
        cfg.heatmap_mode = v;
    }
    cfg.validate()?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Invalid(e.to_string()))?;
    rt.block_on(tbscreen_service::run(cfg))?;
    Ok(())
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ReportArgs {
    /// List parameter names and shapes of a backbone's two-class model.
    #[arg(long, value_parser = parse_backbone)]
    pub params: Option<BackboneName>,
    /// Summarize a training run directory as a Markdown table.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

fn report(a: ReportArgs, c: &Common) -> CliResult<()> {
    if let Some(name) = a.params {
        let mut total = 0usize;
        for (pname, shape) in name.param_shapes(2) {
            let n: usize = shape.iter().product();
            total += n;
            println!("{pname}\t{shape:?}\t{n}");
        }
        println!("total\t\t{total}");
        println!("imagenet_1000_class_total\t\t{}", name.imagenet_param_count());
        return Ok(());
    }
    let run = a.run.expect("clap group");
    let path = run.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut md = String::from("| Epoch | Train loss | Train accuracy | Val accuracy | Seconds |\n|---|---|---|---|---|\n");
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = serde_json::from_str(line).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        md.push_str(&format!(
            "| {} | {:.4} | {:.2}% | {:.2}% | {:.1} |\n",
            r.epoch,
            r.mean_train_loss,
            100.0 * r.train_accuracy,
            100.0 * r.val_accuracy,
            r.elapsed_s
        ));
    }
    write_text(&out_dir(c)?.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

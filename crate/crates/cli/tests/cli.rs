use std::path::Path;
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use serde_json::Value;
use tbscreen_core::baseline::{Approach, ArmReport};
use tbscreen_core::zoo::CheckpointMeta;
use tbscreen_core::{BackboneName, ClassifierModel, EvalReport, WeightsOrigin};

fn tbscreen(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbscreen"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).expect("json summary")
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn dataset(root: &Path, per_class: usize) {
    for (class, level) in [("normal", 60u8), ("tb", 190)] {
        std::fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..per_class {
            let img = GrayImage::from_fn(32, 32, |x, y| Luma([level.wrapping_add((x * 3 + y * 5 + i as u32) as u8 % 40)]));
            img.save(root.join(class).join(format!("{class}{i:02}.png"))).unwrap();
        }
    }
    std::fs::write(root.join("normal").join("notes.txt"), "skipped").unwrap();
    std::fs::write(root.join("normal").join("broken.png"), "not an image").unwrap();
}

fn random_checkpoint(dir: &Path, name: BackboneName) -> String {
    let path = dir.join(format!("{name}.safetensors"));
    let meta = CheckpointMeta {
        backbone: name,
        weights_origin: WeightsOrigin::Random,
        train_config_hash: None,
        epoch: None,
        val_accuracy: None,
    };
    ClassifierModel::random(name, 1).unwrap().save_checkpoint(&path, &meta).unwrap();
    path.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tbscreen(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(tbscreen(dir.path(), &["train", "--backbone", "vgg16"]).status.code(), Some(2));
    assert_eq!(tbscreen(dir.path(), &["split", "--manifest", "m", "--ratios", "0.5,0.5"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = tbscreen(dir.path(), &["eval", "--scores", "missing.csv"]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "eval");
    assert_eq!(line["command"], "eval");
    assert!(line["message"].as_str().unwrap().contains("missing.csv"));
}

#[test]
fn missing_weights_name_the_retrieval_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 4);
    let out = dir.path().join("out");
    ok(tbscreen(&out, &["ingest", "--root", data.to_str().unwrap()]));
    ok(tbscreen(&out, &["split", "--manifest", out.join("manifest.jsonl").to_str().unwrap()]));
    let o = Command::new(env!("CARGO_BIN_EXE_tbscreen"))
        .env_remove("TBSCREEN_WEIGHTS_DIR")
        .args(["--out-dir", out.join("run").to_str().unwrap(), "train", "--backbone", "alexnet"])
        .args(["--manifest", out.join("manifest.jsonl").to_str().unwrap()])
        .args(["--split", out.join("split.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let line: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(line["error"], "weights_unavailable");
    assert!(line["message"].as_str().unwrap().contains("export_torchvision_weights.py"));
}

#[test]
fn eval_from_scores_file() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "id,label,tb_score\na,tb,0.9\nb,tb,0.4\nc,healthy,0.6\nd,healthy,0.1\n").unwrap();
    let out = dir.path().join("out");
    let o = ok(tbscreen(&out, &["eval", "--scores", scores.to_str().unwrap(), "--threshold", "0.5"]));
    let summary = stdout_json(&o);
    assert_eq!(summary["sensitivity"], 0.5);
    assert_eq!(summary["specificity"], 0.5);
    assert_eq!(summary["auc"], 0.75);
    let written: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written.auc, Some(0.75));
    assert!(std::fs::read_to_string(out.join("roc.csv")).unwrap().starts_with("fpr,tpr,threshold\n"));
    assert!(std::fs::read_to_string(out.join("roc.svg")).unwrap().contains("<svg"));
}

#[test]
fn ingest_split_is_seeded_and_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 8);
    let out = dir.path().join("out");
    let o = ok(tbscreen(&out, &["ingest", "--root", data.to_str().unwrap()]));
    let rep = stdout_json(&o);
    assert_eq!(rep["records"], 16);
    assert_eq!(rep["undecodable"].as_array().unwrap().len(), 1);
    let manifest = out.join("manifest.jsonl");
    let hash = |seed: &str, sub: &str| {
        let o = ok(tbscreen(&out.join(sub), &["--seed", seed, "split", "--manifest", manifest.to_str().unwrap()]));
        stdout_json(&o)
    };
    let a = hash("3", "a");
    assert_eq!(a["hash"], hash("3", "b")["hash"]);
    assert_ne!(a["hash"], hash("4", "c")["hash"]);
    let counts = a["counts"].as_array().unwrap();
    let n = |split: &str, label: &str| {
        counts.iter().find(|c| c["split"] == split && c["label"] == label).map(|c| c["count"].as_u64().unwrap())
    };
    assert_eq!((n("train", "tb"), n("val", "tb"), n("test", "tb")), (Some(4), Some(2), Some(2)));
}

#[test]
fn report_lists_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(tbscreen(dir.path(), &["report", "--params", "googlenet"]));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("head.weight\t[2, 1024]\t2048"));
    let total: f64 = text.lines().find(|l| l.starts_with("imagenet_1000_class_total")).unwrap().rsplit('\t').next().unwrap().parse().unwrap();
    assert!((total / 1e6 - 7.0).abs() / 7.0 < 0.05, "{total}");
}

#[test]
fn checkpoint_eval_cam_baseline_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 8);
    let out = dir.path().join("out");
    ok(tbscreen(&out, &["ingest", "--root", data.to_str().unwrap()]));
    let manifest = out.join("manifest.jsonl").display().to_string();
    ok(tbscreen(&out, &["split", "--manifest", &manifest]));
    let split = out.join("split.json").display().to_string();
    let ck = random_checkpoint(dir.path(), BackboneName::ResNet18);

    let e2e = out.join("e2e");
    ok(tbscreen(&e2e, &["eval", "--checkpoint", &ck, "--manifest", &manifest, "--split", &split]));
    let arm: ArmReport = serde_json::from_str(&std::fs::read_to_string(e2e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((arm.approach, arm.backbone, arm.report.n_items), (Approach::EndToEnd, BackboneName::ResNet18, 4));

    let cams = out.join("cam");
    let img = data.join("tb").join("tb00.png").display().to_string();
    ok(tbscreen(&cams, &["cam", "--checkpoint", &ck, "--image", &img]));
    let png = image::open(cams.join("tb00.heatmap.png")).unwrap();
    assert_eq!((png.width(), png.height()), (224, 224));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(cams.join("tb00.heatmap.json")).unwrap()).unwrap();
    assert_eq!(meta["layer"], "layer4");

    let fb = out.join("fb");
    ok(tbscreen(&fb, &["baseline", "--backbone", "resnet18", "--random-init", "--manifest", &manifest, "--split", &split]));
    let arm2: ArmReport = serde_json::from_str(&std::fs::read_to_string(fb.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(arm2.approach, Approach::FeatureBased);
    assert_eq!(arm2.split_hash, arm.split_hash);
    assert!(fb.join("features").join("resnet18-train.f32").exists());

    let cmp = out.join("cmp");
    let o = ok(tbscreen(&cmp, &["compare", "--report", e2e.join("metrics.json").to_str().unwrap(), fb.join("metrics.json").to_str().unwrap()]));
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.lines().any(|l| l.starts_with("| resnet18 |")), "{md}");
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(cmp.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(rep["same_split"], true);
}

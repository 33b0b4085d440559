use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use tbscreen_core::baseline::{fit_linear_classifier, FeatureMatrix, SvmConfig};
use tbscreen_core::cam::{heatmap_from_map, strongest_channel, ChannelCriterion, FeatureMapStack};
use tbscreen_core::dataset::{translate, ImageDims};
use tbscreen_core::eval::{auc_pairwise_oracle, roc_auc};
use tbscreen_core::nn::conv2d;
use tbscreen_core::rng::stream;
use tbscreen_core::{BackboneName, ClassifierModel, ImageTensor, Label};

fn scores(n: usize) -> (Vec<f64>, Vec<Label>) {
    let mut rng = stream(0, &["bench".into(), "scores".into()]);
    (0..n)
        .map(|i| {
            let l = if i % 3 == 0 { Label::Tb } else { Label::Healthy };
            (rng.random::<f64>(), l)
        })
        .unzip()
}

fn auc(c: &mut Criterion) {
    let mut g = c.benchmark_group("auc");
    for n in [136, 1000] {
        let (s, l) = scores(n);
        g.bench_with_input(BenchmarkId::new("trapezoid", n), &n, |b, _| b.iter(|| roc_auc(&s, &l).unwrap()));
        g.bench_with_input(BenchmarkId::new("pairwise", n), &n, |b, _| b.iter(|| auc_pairwise_oracle(&s, &l).unwrap()));
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = Tensor::randn(0f32, 1.0, (10, 64, 56, 56), &dev).unwrap();
    let w = Tensor::randn(0f32, 0.1, (64, 64, 3, 3), &dev).unwrap();
    c.bench_function("conv3x3_b10_64x56x56", |b| b.iter(|| conv2d(&x, &w, None, 1, 1).unwrap()));
}

fn forward(c: &mut Criterion) {
    let model = ClassifierModel::random(BackboneName::AlexNet, 0).unwrap();
    let img = ImageTensor::filled(model.spec().input_dims, 0.5);
    let batch: Vec<&ImageTensor> = vec![&img; 10];
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.bench_function("alexnet_b10", |b| b.iter(|| model.predict_batch(&batch).unwrap()));
    g.finish();
}

fn cam(c: &mut Criterion) {
    let mut rng = stream(0, &["bench".into(), "cam".into()]);
    let data: Vec<f32> = (0..512 * 49).map(|_| rng.random::<f32>()).collect();
    let stack = FeatureMapStack::new(512, 7, 7, data).unwrap();
    c.bench_function("strongest_channel_512x7x7", |b| b.iter(|| strongest_channel(&stack, ChannelCriterion::Sum)));
    let ch = stack.channel(3).to_vec();
    c.bench_function("heatmap_7x7_to_224", |b| b.iter(|| heatmap_from_map(&ch, 7, 7, ImageDims::square(224))));
}

fn augment(c: &mut Criterion) {
    let img = ImageTensor::filled(ImageDims::square(227), 0.3);
    c.bench_function("translate_227", |b| b.iter(|| translate(&img, 17, -11, 0.0)));
}

fn svm(c: &mut Criterion) {
    let mut rng = stream(0, &["bench".into(), "svm".into()]);
    let mut m = FeatureMatrix::empty(512);
    let mut labels = Vec::new();
    for i in 0..331 {
        let l = if i % 2 == 0 { Label::Tb } else { Label::Healthy };
        let shift = if l == Label::Tb { 0.3 } else { 0.0 };
        let row: Vec<f32> = (0..512).map(|_| rng.random::<f32>() + shift).collect();
        m.push(format!("r{i}"), &row).unwrap();
        labels.push(l);
    }
    let mut g = c.benchmark_group("svm");
    g.sample_size(10);
    g.bench_function("fit_331x512", |b| b.iter(|| fit_linear_classifier(&m, &labels, &SvmConfig::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, auc, conv, forward, cam, augment, svm);
criterion_main!(benches);

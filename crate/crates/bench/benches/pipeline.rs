use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lfp_core::analysis::distance_to_known;
use lfp_core::config::{AppConfig, Preset};
use lfp_core::datagen::generate_samples;
use lfp_core::inference::run_tiled;
use lfp_core::losses::laplacian_pyramid;
use lfp_core::metrics::evaluate;
use lfp_core::model::NetworkModel;
use lfp_core::training::{Stage, Trainer};
use lfp_core::{AlphaMatte, Image, Label, Tensor, Trimap};

fn ring_trimap(side: usize) -> Trimap {
    let c = side as f64 / 2.0;
    Trimap::from_fn(side, side, |y, x| {
        let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        if r < c * 0.4 {
            Label::Fg
        } else if r < c * 0.6 {
            Label::Unknown
        } else {
            Label::Bg
        }
    })
}

fn analysis(c: &mut Criterion) {
    let t = ring_trimap(512);
    c.bench_function("distance_to_known_512", |b| b.iter(|| distance_to_known(black_box(&t), Label::Fg)));
}

fn losses(c: &mut Criterion) {
    let x = Tensor::new(vec![1, 256, 256], (0..256 * 256).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect()).unwrap();
    c.bench_function("laplacian_pyramid_256_l5", |b| b.iter(|| laplacian_pyramid(black_box(&x), 5).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let t = ring_trimap(256);
    let gt = AlphaMatte::from_fn(256, 256, |_, y, x| ((y + x) % 17) as f64 / 16.0);
    let pred = AlphaMatte::from_fn(256, 256, |_, y, x| ((y * 3 + x) % 13) as f64 / 12.0);
    c.bench_function("evaluate_256", |b| b.iter(|| evaluate(&pred, &gt, &t).unwrap()));
}

fn network(c: &mut Criterion) {
    let cfg = AppConfig::preset(Preset::Tiny);
    let net = cfg.network().unwrap();
    let data = generate_samples(&cfg.procedural_source(), 1, &cfg.augment_config()).unwrap();
    let mut t = Trainer::new(&net, net.init_params(0).unwrap(), cfg.train_config()).unwrap();
    t.begin_stage(Stage::Full).unwrap();
    let mut g = c.benchmark_group("network_tiny");
    g.sample_size(10);
    g.bench_function("full_train_step", |b| b.iter(|| t.train_step(&data[0]).unwrap()));
    let model = NetworkModel {
        net: cfg.network().unwrap(),
        params: net.init_params(0).unwrap(),
    };
    let image = Image::from_fn(160, 160, |ch, y, x| ((ch + y * x) % 11) as f64 / 10.0);
    let trimap = ring_trimap(160);
    g.bench_function("tiled_inference_160", |b| b.iter(|| run_tiled(&image, &trimap, &model, &cfg.inference).unwrap()));
    g.finish();
}

criterion_group!(benches, analysis, losses, metrics, network);
criterion_main!(benches);

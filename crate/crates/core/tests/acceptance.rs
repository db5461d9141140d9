//! Acceptance suite. Runs every criterion at its stated tolerance and runtime
//! budget, printing one PASS/FAIL line each. Expected values come from
//! oracles written here, independent of the library code under test.

use std::time::{Duration, Instant};

use lfp_core::analysis::{dataset_distance_stats, distance_to_known, CURVE_NAMES};
use lfp_core::config::{AppConfig, Preset};
use lfp_core::cspp::BottleneckVariant;
use lfp_core::datagen::{generate_samples, AugmentConfig, TrainingSample};
use lfp_core::geometry::{ContextPair, PatchGeometry};
use lfp_core::inference::{run_tiled, Blend, InferenceConfig, TileModel};
use lfp_core::losses::{
    alpha_loss, composite_loss, fb_composite_loss, fb_laplacian_loss, fb_reconstruction_loss, laplacian_loss, laplacian_pyramid,
    laplacian_reconstruct, matting_loss, propagating_loss, unknown_weight, weighted_alpha_loss, LossConfig, MattingVars,
};
use lfp_core::matting::MattingOutput;
use lfp_core::metrics::evaluate;
use lfp_core::model::NetworkModel;
use lfp_core::nn::{NormKind, ParamStore};
use lfp_core::selfcheck::run_check;
use lfp_core::tensor::{Graph, Tensor, Var};
use lfp_core::training::{mean_matting_loss, train_three_stage, Checkpoint, OptimizerState, Stage, TrainSink, Trainer};
use lfp_core::{composite, AlphaMatte, Image, Label, Result, Sample, Trimap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria known to miss their target; see the README.
const KNOWN_SHORTFALLS: &[usize] = &[8];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random::<f64>()).collect()
}

fn random_trimap(r: &mut ChaCha8Rng, h: usize, w: usize, known: f64) -> Trimap {
    let labels = (0..h * w)
        .map(|_| match (r.random_bool(known), r.random_bool(0.5)) {
            (true, true) => Label::Fg,
            (true, false) => Label::Bg,
            _ => Label::Unknown,
        })
        .collect();
    Trimap::new(h, w, labels).unwrap()
}

fn random_sample(r: &mut ChaCha8Rng, side: usize) -> Sample {
    let fg = Image::new(side, side, uniform(r, 3 * side * side)).unwrap();
    let bg = Image::new(side, side, uniform(r, 3 * side * side)).unwrap();
    let alpha = AlphaMatte::new(side, side, uniform(r, side * side)).unwrap();
    let trimap = random_trimap(r, side, side, 0.4);
    let image = composite(&fg, &bg, &alpha).unwrap();
    Sample::new(image, trimap, alpha, fg, bg).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of `f` at every coordinate of `x`, against reverse
/// mode; returns `‖a − n‖ / max(‖a‖, ‖n‖)`.
fn finite_difference_error(x: &Tensor, f: &dyn Fn(&mut Graph, &Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let l = f(&mut g, &v);
    let analytic = g.backward(&l).unwrap().get(&v).unwrap().data().to_vec();
    let h = 1e-6;
    let eval = |t: &Tensor| {
        let mut g = Graph::inference();
        let v = g.constant(t.clone());
        f(&mut g, &v).value().item()
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn criterion_1() -> Result<Outcome> {
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let s = random_sample(&mut r, 8);
        let cfg = LossConfig {
            pyramid_levels: 3,
            gamma: 10.0,
            ..LossConfig::default()
        };
        let a = Tensor::new(vec![1, 8, 8], uniform(&mut r, 64))?;
        let f = Tensor::new(vec![3, 8, 8], uniform(&mut r, 192))?;
        let b = Tensor::new(vec![3, 8, 8], uniform(&mut r, 192))?;
        let fb_vars = |g: &mut Graph, fixed: &Tensor| g.constant(fixed.clone());
        let cases: Vec<(&str, &Tensor, Box<dyn Fn(&mut Graph, &Var) -> Var>)> = vec![
            ("context alpha", &a, Box::new(|g, v| propagating_loss(g, v, &s.alpha_gt, &s.trimap).unwrap().value)),
            ("weighted alpha", &a, Box::new(|g, v| weighted_alpha_loss(g, v, &s.alpha_gt, &s.trimap, cfg.gamma).unwrap().value)),
            ("alpha composite", &a, Box::new(|g, v| composite_loss(g, v, &s, true).unwrap().value)),
            ("alpha composite full", &a, Box::new(|g, v| composite_loss(g, v, &s, false).unwrap().value)),
            ("alpha pyramid", &a, Box::new(|g, v| {
                let y = g.constant(s.alpha_gt.to_tensor());
                laplacian_loss(g, v, &y, 3).unwrap()
            })),
            ("alpha total", &a, Box::new(|g, v| alpha_loss(g, v, &s, &cfg).unwrap().total)),
            ("fb reconstruction (F)", &f, Box::new(|g, v| {
                let bb = fb_vars(g, &b);
                fb_reconstruction_loss(g, v, &bb, &s).unwrap()
            })),
            ("fb reconstruction (B)", &b, Box::new(|g, v| {
                let ff = fb_vars(g, &f);
                fb_reconstruction_loss(g, &ff, v, &s).unwrap()
            })),
            ("fb composite (F)", &f, Box::new(|g, v| {
                let bb = fb_vars(g, &b);
                fb_composite_loss(g, v, &bb, &s, true).unwrap().value
            })),
            ("fb composite (B)", &b, Box::new(|g, v| {
                let ff = fb_vars(g, &f);
                fb_composite_loss(g, &ff, v, &s, true).unwrap().value
            })),
            ("fb pyramid (F)", &f, Box::new(|g, v| {
                let bb = fb_vars(g, &b);
                fb_laplacian_loss(g, v, &bb, &s, &cfg).unwrap()
            })),
            ("fb pyramid (B)", &b, Box::new(|g, v| {
                let ff = fb_vars(g, &f);
                fb_laplacian_loss(g, &ff, v, &s, &cfg).unwrap()
            })),
            ("matting total (alpha)", &a, Box::new(|g, v| {
                let out = MattingVars {
                    alpha: v.clone(),
                    fg: g.constant(f.clone()),
                    bg: g.constant(b.clone()),
                };
                matting_loss(g, &out, &s, &cfg).unwrap().total
            })),
            ("matting total (F)", &f, Box::new(|g, v| {
                let out = MattingVars {
                    alpha: g.constant(a.clone()),
                    fg: v.clone(),
                    bg: g.constant(b.clone()),
                };
                matting_loss(g, &out, &s, &cfg).unwrap().total
            })),
        ];
        for (name, x, f) in &cases {
            let e = finite_difference_error(x, f.as_ref());
            count += 1;
            if e >= worst.1 {
                worst = (name.to_string(), e);
            }
        }
    }
    outcome(worst.1 < 1e-4, format!("{count} gradient checks, worst relative error {:.2e} ({})", worst.1, worst.0))
}

/// Wide enough that the conv-only receptive field of the far corner stays
/// outside the inner patch.
const CORNER_CONTEXT: usize = 1536;

/// Change of the inner-center outputs when one far-corner context pixel moves.
fn corner_sensitivity(variant: BottleneckVariant) -> Result<f64> {
    let mut cfg = AppConfig::preset(Preset::Tiny);
    cfg.propagating.bottleneck.variant = variant;
    // Normalization statistics span the whole map and would leak the corner
    // everywhere regardless of the bottleneck.
    cfg.propagating.style.norm = NormKind::None;
    cfg.matting.style.norm = NormKind::None;
    let net = cfg.network()?;
    let params = net.init_params(7)?;
    let side = CORNER_CONTEXT;
    let image = Image::from_fn(side, side, |c, y, x| ((c * 5 + y * 3 + x * 7) % 13) as f64 / 12.0);
    let trimap = Trimap::filled(side, side, Label::Unknown);
    let g = PatchGeometry::new(side, side, (side / 4, side / 4), side / 2)?;
    let base = ContextPair::new(image.clone(), trimap.clone(), g)?;
    let mut data = image.data().to_vec();
    data[0] = 1.0 - data[0];
    let moved = ContextPair::new(Image::new(side, side, data)?, trimap, g)?;
    let a = net.predict(&params, &base)?;
    let b = net.predict(&params, &moved)?;
    let c = side / 4;
    let mut delta = (a.alpha.at(c, c) - b.alpha.at(c, c)).abs();
    for ch in 0..3 {
        delta += (a.fg.get(ch, c, c) - b.fg.get(ch, c, c)).abs() + (a.bg.get(ch, c, c) - b.bg.get(ch, c, c)).abs();
    }
    Ok(delta)
}

fn criterion_2() -> Result<Outcome> {
    let cspp = corner_sensitivity(BottleneckVariant::Cspp)?;
    let none = corner_sensitivity(BottleneckVariant::None)?;
    outcome(
        cspp > 1e-9 && none == 0.0,
        format!("{CORNER_CONTEXT}px context, corner-to-center output change: cspp {cspp:.3e}, none {none:e}"),
    )
}

/// `(2r+1)²` box mean of channel 0, reading the context window.
struct BoxMean {
    r: usize,
}

impl TileModel for BoxMean {
    fn predict(&self, cp: &ContextPair) -> Result<MattingOutput> {
        let s = cp.geometry.inner_side;
        let o = cp.geometry.inner_offset_in_context();
        let r = self.r;
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let mut a = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for yy in o + y - r..=o + y + r {
                    for xx in o + x - r..=o + x + r {
                        acc += cp.image.get(0, yy, xx);
                    }
                }
                a[y * s + x] = acc / n;
            }
        }
        let (img, _) = cp.inner();
        Ok(MattingOutput {
            alpha: AlphaMatte::new(s, s, a)?,
            fg: img.clone(),
            bg: img,
        })
    }
}

fn criterion_3() -> Result<Outcome> {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut interior = 0usize;
    for i in 0..20 {
        let (h, w) = (r.random_range(20..150), r.random_range(20..150));
        let radius = r.random_range(1..4);
        let side = [16, 24, 32][i % 3];
        let overlap = if i % 2 == 0 { 0 } else { r.random_range(1..side / 2) };
        let cfg = InferenceConfig {
            inner_side: side,
            overlap,
            blend: if i % 4 == 3 { Blend::LinearRamp } else { Blend::None },
            skip_known_tiles: false,
            ..InferenceConfig::default()
        };
        let img = Image::new(h, w, uniform(&mut r, 3 * h * w))?;
        let tri = Trimap::filled(h, w, Label::Unknown);
        let out = run_tiled(&img, &tri, &BoxMean { r: radius }, &cfg)?;
        let plane = img.plane(0);
        let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
        for y in radius..h - radius {
            for x in radius..w - radius {
                let mut acc = 0.0;
                for yy in y - radius..=y + radius {
                    for xx in x - radius..=x + radius {
                        acc += plane[yy * w + xx];
                    }
                }
                worst = worst.max((out.raw_alpha.at(y, x) - acc / n).abs());
                interior += 1;
            }
        }
    }
    outcome(worst <= 1e-6, format!("20 image sizes, {interior} interior pixels, max deviation {worst:.2e}"))
}

fn brute_distance(t: &Trimap, target: Label) -> Vec<f64> {
    let (h, w) = t.dims();
    let sites: Vec<(i64, i64)> = (0..h * w)
        .filter(|&i| t.labels()[i] == target)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            sites
                .iter()
                .map(|&(sy, sx)| (y - sy) * (y - sy) + (x - sx) * (x - sx))
                .min()
                .map_or(f64::INFINITY, |d| (d as f64).sqrt())
        })
        .collect()
}

fn criterion_4() -> Result<Outcome> {
    let mut r = rng(4);
    let mut mismatched = 0usize;
    let mut pairs = Vec::new();
    for _ in 0..50 {
        let known = r.random_range(0.005..0.4);
        let t = random_trimap(&mut r, 32, 32, known);
        for label in [Label::Fg, Label::Bg] {
            let fast = distance_to_known(&t, label);
            mismatched += fast.iter().zip(brute_distance(&t, label)).filter(|(a, b)| **a != *b).count();
        }
        pairs.push((t, AlphaMatte::new(32, 32, uniform(&mut r, 1024))?));
    }
    // Pooled curves by direct classification and sorting.
    let mut oracle: [Vec<f64>; 4] = Default::default();
    for (t, a) in &pairs {
        if t.count(Label::Fg) == 0 || t.count(Label::Bg) == 0 {
            continue;
        }
        let (df, db) = (brute_distance(t, Label::Fg), brute_distance(t, Label::Bg));
        for i in 0..t.labels().len() {
            if t.labels()[i] != Label::Unknown {
                continue;
            }
            let base = if a.data()[i] >= 0.5 { 0 } else { 2 };
            oracle[base].push(df[i]);
            oracle[base + 1].push(db[i]);
        }
    }
    for o in &mut oracle {
        o.sort_by(f64::total_cmp);
    }
    let stats = dataset_distance_stats(&pairs, 0.5)?;
    let mut cdf_ok = true;
    for (k, curve) in stats.curves.iter().enumerate() {
        cdf_ok &= curve.name == CURVE_NAMES[k] && curve.distances == oracle[k];
        for d in [0.0, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 50.0] {
            let expected = oracle[k].iter().filter(|&&x| x <= d).count() as f64 / oracle[k].len().max(1) as f64;
            cdf_ok &= curve.cdf(d) == expected;
        }
    }
    outcome(
        mismatched == 0 && cdf_ok,
        format!("50 trimaps, {mismatched} distance mismatches, pooled CDF matches sort oracle: {cdf_ok}"),
    )
}

fn tiny_samples(n: usize, crop: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let cfg = AppConfig::preset(Preset::Tiny);
    let aug = AugmentConfig {
        crop_sizes: vec![crop],
        rng_seed: seed,
        ..cfg.augment_config()
    };
    generate_samples(&cfg.procedural_source(), n, &aug)
}

fn criterion_5() -> Result<Outcome> {
    let samples = tiny_samples(12, 64, 5)?;
    let mut worst: f64 = 0.0;
    let mut zero = true;
    for s in &samples {
        for part in [&s.context, &s.inner()] {
            let (h, w) = part.image.dims();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let a = part.alpha_gt.at(y, x);
                        let v = a * part.fg_gt.get(c, y, x) + (1.0 - a) * part.bg_gt.get(c, y, x);
                        worst = worst.max((v - part.image.get(c, y, x)).abs());
                    }
                }
            }
            let m = evaluate(&part.alpha_gt, &part.alpha_gt, &part.trimap)?;
            zero &= (m.sad, m.mse, m.grad, m.conn) == (0.0, 0.0, 0.0, 0.0);
        }
    }
    outcome(
        worst <= 1e-6 && zero,
        format!("{} samples, compositing residual {worst:.2e}, metrics(gt, gt) all zero: {zero}", samples.len()),
    )
}

fn criterion_6() -> Result<Outcome> {
    let big = unknown_weight(400, 100.0);
    let at = unknown_weight(100, 100.0);
    let below = unknown_weight(37, 100.0);
    // Through the loss: 20×20 all-unknown, constant error 0.25.
    let t = Trimap::filled(20, 20, Label::Unknown);
    let gt = AlphaMatte::constant(20, 20, 0.5);
    let mut g = Graph::inference();
    let pred = g.constant(Tensor::full(&[1, 20, 20], 0.75));
    let l = weighted_alpha_loss(&mut g, &pred, &gt, &t, 100.0)?.item();
    outcome(
        big == 2.0 && at == 1.0 && below == 1.0 && (l - 0.5).abs() < 1e-15,
        format!("weight(400) = {big}, weight(100) = {at}, weight(37) = {below}, loss {l}"),
    )
}

fn criterion_7() -> Result<Outcome> {
    let mut r = rng(7);
    let levels = 4;
    let mut rec: f64 = 0.0;
    for (h, w) in [(32, 32), (45, 37), (64, 17)] {
        let x = Tensor::new(vec![3, h, w], uniform(&mut r, 3 * h * w))?;
        rec = rec.max(laplacian_reconstruct(&laplacian_pyramid(&x, levels)?)?.max_abs_diff(&x));
    }
    let x = Tensor::new(vec![1, 32, 32], uniform(&mut r, 1024))?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let self_loss = laplacian_loss(&mut g, &xv, &xv, levels)?.value().item();
    let d = 0.125;
    let shifted = g.constant(x.map(|v| v + d));
    let offset_loss = laplacian_loss(&mut g, &shifted, &xv, levels)?.value().item();
    let bands = laplacian_pyramid(&Tensor::full(&[1, 32, 32], d), levels)?;
    let only_top = bands[..levels].iter().all(|b| b.data().iter().all(|v| v.abs() < 1e-12))
        && bands[levels].data().iter().all(|v| (v - d).abs() < 1e-12);
    let oracle = 2f64.powi(levels as i32) * d;
    outcome(
        rec < 1e-6 && self_loss == 0.0 && only_top && (offset_loss - oracle).abs() < 1e-12,
        format!("reconstruction {rec:.2e}, Lap(x,x) = {self_loss}, offset loss {offset_loss} vs 2^J·d = {oracle}"),
    )
}

fn frozen_unchanged(a: &ParamStore, b: &ParamStore, frozen: impl Fn(&str) -> bool) -> bool {
    a.iter().filter(|(n, _)| frozen(n)).all(|(n, t)| b.get(n) == Some(t))
}

fn criterion_8() -> Result<Outcome> {
    let cfg = AppConfig::preset(Preset::Tiny);
    let net = cfg.network()?;
    let data = tiny_samples(1, 64, 8)?;
    let tc = cfg.train_config();
    let init = net.init_params(cfg.core.seed)?;
    let mut t = Trainer::new(&net, init.clone(), tc.clone())?;
    let before = mean_matting_loss(&net, &t.params, &data, &tc.loss)?;
    t.begin_stage(Stage::Matting)?;
    for _ in 0..200 {
        t.train_step(&data[0])?;
    }
    let after = mean_matting_loss(&net, &t.params, &data, &tc.loss)?;
    let ratio = after / before;

    let start = Checkpoint {
        params: t.params.clone(),
        optimizer: OptimizerState::default(),
        config: serde_json::Value::Null,
        stage: Stage::Pretrain,
        step: 0,
    };
    let staged = lfp_core::training::TrainConfig {
        stage_epochs: [1, 1, 1],
        ..tc.clone()
    };
    let mut sink_buf = Vec::new();
    let mut sink = TrainSink {
        log: &mut sink_buf,
        checkpoint_dir: None,
    };
    let mut frozen_ok = true;
    let mut params = start.params.clone();
    let mut tr = Trainer::from_checkpoint(&net, &start, staged.clone())?;
    for stage in [Stage::Matting, Stage::Decoders, Stage::Full] {
        let s = tr.run_stage(stage, 1, &data, &mut sink)?;
        frozen_ok &= s.frozen_digest_before == s.frozen_digest_after;
        frozen_ok &= frozen_unchanged(&params, &tr.params, |n| !stage.trainable(n));
        params = tr.params.clone();
    }
    let (_, summaries) = train_three_stage(&net, &start, &data, &staged, &mut sink)?;
    frozen_ok &= summaries.iter().all(|s| s.frozen_digest_before == s.frozen_digest_after);
    outcome(
        ratio < 0.2 && frozen_ok,
        format!(
            "200 steps at lr {}: matting loss {before:.4} -> {after:.4} ({:.1}% of initial, target < 20%); frozen sets intact: {frozen_ok}",
            tc.optimizer.lr,
            100.0 * ratio
        ),
    )
}

fn criterion_9() -> Result<Outcome> {
    let eval_sample = &tiny_samples(1, 128, 9)?[0];
    let eval = eval_sample.inner();
    let mut outputs: Vec<(String, Vec<f64>)> = Vec::new();
    for side in [64usize, 128] {
        let data = tiny_samples(1, side, 90 + side as u64)?;
        for variant in BottleneckVariant::ALL {
            let mut cfg = AppConfig::preset(Preset::Tiny);
            cfg.propagating.bottleneck.variant = variant;
            cfg.inference.inner_side = side;
            let net = cfg.network()?;
            let mut t = Trainer::new(&net, net.init_params(cfg.core.seed)?, cfg.train_config())?;
            t.begin_stage(Stage::Full)?;
            let (loss, _, _) = t.train_step(&data[0])?;
            if !loss.is_finite() {
                return outcome(false, format!("{variant:?} at {side}: non-finite loss"));
            }
            let params = t.params.clone();
            drop(t);
            let model = NetworkModel { net, params };
            let out = run_tiled(&eval.image, &eval.trimap, &model, &cfg.inference)?;
            outputs.push((format!("{variant:?}/{side}"), out.raw_alpha.data().to_vec()));
        }
    }
    let mut identical = Vec::new();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            if max_abs(&outputs[i].1, &outputs[j].1) == 0.0 {
                identical.push(format!("{}={}", outputs[i].0, outputs[j].0));
            }
        }
    }
    outcome(
        identical.is_empty(),
        format!("{} configurations trained and inferred end to end; identical pairs: {identical:?}", outputs.len()),
    )
}

fn criterion_10() -> Result<Outcome> {
    let cfg = AppConfig::preset(Preset::Tiny);
    let a = tempfile::tempdir().map_err(|e| lfp_core::LfpError::Data(e.to_string()))?;
    let b = tempfile::tempdir().map_err(|e| lfp_core::LfpError::Data(e.to_string()))?;
    let ra = run_check(&cfg, a.path())?;
    let rb = run_check(&cfg, b.path())?;
    let mut same = ra == rb;
    for f in ["check.jsonl", "train.jsonl", "check.ckpt"] {
        let x = std::fs::read(a.path().join(f)).unwrap_or_default();
        let y = std::fs::read(b.path().join(f)).unwrap_or_default();
        same &= !x.is_empty() && x == y;
    }
    outcome(
        same && ra.all_passed(),
        format!("two check runs: logs and checkpoint bit-identical {same}, all properties passed {}", ra.all_passed()),
    )
}

fn main() {
    let criteria: [(usize, u64, fn() -> Result<Outcome>); 10] = [
        (1, 60, criterion_1),
        (2, 120, criterion_2),
        (3, 60, criterion_3),
        (4, 30, criterion_4),
        (5, 600, criterion_5),
        (6, 600, criterion_6),
        (7, 600, criterion_7),
        (8, 600, criterion_8),
        (9, 600, criterion_9),
        (10, 600, criterion_10),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, budget, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let ok = passed && in_time;
        println!(
            "criterion {id:>2}: {} ({detail}; {:.1}s of {budget}s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !ok && !KNOWN_SHORTFALLS.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

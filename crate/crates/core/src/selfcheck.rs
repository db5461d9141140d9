//! Property suite behind `lfp check`: gradient, oracle and determinism
//! checks sized to run in seconds on the tiny preset.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::border::reflect;
use crate::config::AppConfig;
use crate::datagen::{generate_samples, TrainingSample};
use crate::domain::{clamp_by_trimap, composite, encode_trimap, region_masks, AlphaMatte, Image, Label, Sample, Trimap};
use crate::error::{LfpError, Result};
use crate::geometry::ContextPair;
use crate::inference::{run_tiled, InferenceConfig, TileModel};
use crate::losses::{
    alpha_loss, composite_loss, fb_composite_loss, fb_laplacian_loss, fb_reconstruction_loss, laplacian_loss, laplacian_pyramid,
    laplacian_reconstruct, matting_loss, propagating_loss, unknown_weight, weighted_alpha_loss, LossConfig,
};
use crate::matting::MattingOutput;
use crate::metrics::evaluate;
use crate::model::ContextMode;
use crate::nn::{first_zero_gradient, Ctx};
use crate::tensor::gradcheck::{central_difference, relative_error};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{pretrain_propagating, train_three_stage, Checkpoint, Stage, TrainConfig, TrainSink};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CheckReport {
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

type Outcome = Result<(bool, String)>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape matches data")
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).expect("in range")
}

fn random_trimap(rng: &mut ChaCha8Rng, h: usize, w: usize, known: f64) -> Trimap {
    let labels = (0..h * w)
        .map(|_| {
            if rng.random_bool(known) {
                if rng.random_bool(0.5) {
                    Label::Fg
                } else {
                    Label::Bg
                }
            } else {
                Label::Unknown
            }
        })
        .collect();
    Trimap::new(h, w, labels).expect("sized")
}

/// Random `side × side` sample that satisfies the compositing equation.
pub fn random_sample(rng: &mut ChaCha8Rng, side: usize) -> Sample {
    let fg = random_image(rng, side, side);
    let bg = random_image(rng, side, side);
    let alpha = AlphaMatte::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).expect("in range");
    let trimap = random_trimap(rng, side, side, 0.4);
    let image = composite(&fg, &bg, &alpha).expect("same size");
    Sample::new(image, trimap, alpha, fg, bg).expect("same size")
}

/// Relative error between the autodiff gradient of `f` at `x` and central
/// differences.
pub fn gradient_error(x: &Tensor, f: impl Fn(&mut Graph, &Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let l = f(&mut g, &v)?;
    let grads = g.backward(&l)?;
    let analytic = grads
        .get(&v)
        .ok_or_else(|| LfpError::Data("input received no gradient".into()))?
        .data()
        .to_vec();
    let numeric = central_difference(
        |t| {
            let mut g = Graph::inference();
            let v = g.constant(t.clone());
            f(&mut g, &v).map(|l| l.value().item()).unwrap_or(f64::NAN)
        },
        x,
        1e-6,
        None,
    );
    Ok(relative_error(&analytic, &numeric))
}

/// Gradient errors of every loss term on an `8 × 8` sample, by name.
pub fn loss_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_sample(&mut rng, 8);
    let cfg = LossConfig {
        pyramid_levels: 3,
        ..LossConfig::default()
    };
    let a = random_tensor(&mut rng, &[1, 8, 8]);
    let f = random_tensor(&mut rng, &[3, 8, 8]);
    let b = random_tensor(&mut rng, &[3, 8, 8]);
    // Small gamma so the unknown-region weight is active.
    let gamma = 10.0;
    Ok(vec![
        ("propagating", gradient_error(&a, |g, v| Ok(propagating_loss(g, v, &s.alpha_gt, &s.trimap)?.value))?),
        ("weighted_alpha", gradient_error(&a, |g, v| Ok(weighted_alpha_loss(g, v, &s.alpha_gt, &s.trimap, gamma)?.value))?),
        ("composite", gradient_error(&a, |g, v| Ok(composite_loss(g, v, &s, true)?.value))?),
        ("laplacian_alpha", gradient_error(&a, |g, v| {
            let y = g.constant(s.alpha_gt.to_tensor());
            laplacian_loss(g, v, &y, cfg.pyramid_levels)
        })?),
        ("alpha", gradient_error(&a, |g, v| Ok(alpha_loss(g, v, &s, &cfg)?.total))?),
        ("fb_reconstruction_fg", gradient_error(&f, |g, v| {
            let bb = g.constant(b.clone());
            fb_reconstruction_loss(g, v, &bb, &s)
        })?),
        ("fb_reconstruction_bg", gradient_error(&b, |g, v| {
            let ff = g.constant(f.clone());
            fb_reconstruction_loss(g, &ff, v, &s)
        })?),
        ("fb_composite", gradient_error(&b, |g, v| {
            let ff = g.constant(f.clone());
            Ok(fb_composite_loss(g, &ff, v, &s, true)?.value)
        })?),
        ("fb_laplacian", gradient_error(&f, |g, v| {
            let bb = g.constant(b.clone());
            fb_laplacian_loss(g, v, &bb, &s, &cfg)
        })?),
        ("matting_total_alpha", gradient_error(&a, |g, v| {
            let fg = g.constant(f.clone());
            let bg = g.constant(b.clone());
            let out = crate::losses::MattingVars { alpha: v.clone(), fg, bg };
            Ok(matting_loss(g, &out, &s, &cfg)?.total)
        })?),
    ])
}

fn loss_gradients(cfg: &AppConfig) -> Outcome {
    let errs = loss_gradient_errors(cfg.core.seed)?;
    let (worst, e) = errs.iter().copied().fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok((
        errs.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE),
        format!("{} terms, worst relative error {e:.3e} ({worst})", errs.len()),
    ))
}

fn compositing(cfg: &AppConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.core.seed ^ 0x11);
    let (h, w) = (9, 7);
    let f = random_image(&mut rng, h, w);
    let b = random_image(&mut rng, h, w);
    let a1 = AlphaMatte::new(h, w, (0..h * w).map(|_| rng.random()).collect())?;
    let a2 = AlphaMatte::new(h, w, (0..h * w).map(|_| rng.random()).collect())?;
    let lam: f64 = rng.random();
    let mix = AlphaMatte::new(h, w, a1.data().iter().zip(a2.data()).map(|(x, y)| lam * x + (1.0 - lam) * y).collect())?;
    let c1 = composite(&f, &b, &a1)?;
    let c2 = composite(&f, &b, &a2)?;
    let cm = composite(&f, &b, &mix)?;
    let affine = cm
        .data()
        .iter()
        .zip(c1.data().iter().zip(c2.data()))
        .map(|(m, (x, y))| (m - (lam * x + (1.0 - lam) * y)).abs())
        .fold(0.0, f64::max);
    let same = composite(&f, &f, &a1)?.data().iter().zip(f.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let t = random_trimap(&mut rng, h, w, 0.5);
    let once = clamp_by_trimap(&a1, &t)?;
    let idempotent = clamp_by_trimap(&once, &t)? == once;
    let enc = encode_trimap(&t);
    let one_hot = (0..h * w).all(|i| enc.data()[i] + enc.data()[h * w + i] + enc.data()[2 * h * w + i] == 1.0);
    let m = region_masks(&t);
    let counts = m.fg_or_unknown.count() == t.count(Label::Fg) + m.unknown.count();
    Ok((
        affine <= 1e-12 && same <= 1e-12 && idempotent && one_hot && counts,
        format!("affine {affine:.1e}, same-layer {same:.1e}, clamp idempotent {idempotent}, one-hot {one_hot}, mask counts {counts}"),
    ))
}

fn weight_clamp(_: &AppConfig) -> Outcome {
    let big = unknown_weight(400, 100.0);
    let small = unknown_weight(100, 100.0);
    Ok((big == 2.0 && small == 1.0, format!("weight(400, 100) = {big}, weight(100, 100) = {small}")))
}

fn pyramid(cfg: &AppConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.core.seed ^ 0x22);
    let levels = 3;
    let x = random_tensor(&mut rng, &[3, 24, 21]);
    let rec = laplacian_reconstruct(&laplacian_pyramid(&x, levels)?)?.max_abs_diff(&x);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let self_loss = laplacian_loss(&mut g, &xv, &xv, levels)?.value().item();
    let d = 0.3;
    let shifted = g.constant(x.map(|v| v + d));
    let offset = laplacian_loss(&mut g, &shifted, &xv, levels)?.value().item();
    let expected = (1u64 << levels) as f64 * d;
    let bands_zero = laplacian_pyramid(&x.map(|_| d), levels)?[..levels]
        .iter()
        .all(|b| b.data().iter().all(|v| v.abs() < 1e-12));
    Ok((
        rec < 1e-6 && self_loss == 0.0 && (offset - expected).abs() < 1e-9 && bands_zero,
        format!("reconstruction {rec:.1e}, Lap(x,x) {self_loss}, offset {offset:.12} vs {expected}"),
    ))
}

/// Exhaustive nearest-pixel search.
pub fn brute_force_distance(t: &Trimap, target: Label) -> Vec<f64> {
    let (h, w) = t.dims();
    let targets: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| t.at(y, x) == target)
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            targets
                .iter()
                .map(|&(ty, tx)| (y - ty as i64).pow(2) + (x - tx as i64).pow(2))
                .min()
                .map_or(f64::INFINITY, |d| (d as f64).sqrt())
        })
        .collect()
}

fn distance_transform(cfg: &AppConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.core.seed ^ 0x33);
    let mut mismatches = 0;
    for _ in 0..5 {
        let known = rng.random_range(0.01..0.3);
        let t = random_trimap(&mut rng, 32, 32, known);
        for label in [Label::Fg, Label::Bg] {
            let fast = crate::analysis::distance_to_known(&t, label);
            mismatches += fast.iter().zip(brute_force_distance(&t, label)).filter(|(a, b)| **a != *b).count();
        }
    }
    Ok((mismatches == 0, format!("{mismatches} pixels differ from brute force over 5 trimaps")))
}

/// Translation-equivariant stand-in for the network: a `(2r+1)²` box blur of
/// the first image channel, evaluated with context support.
pub struct BoxBlur {
    pub radius: usize,
}

impl BoxBlur {
    /// The same blur over a whole image with mirrored borders.
    pub fn reference(&self, image: &Image) -> AlphaMatte {
        let (h, w) = image.dims();
        let r = self.radius as isize;
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let plane = image.plane(0);
        AlphaMatte::from_fn(h, w, |_, y, x| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += plane[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                }
            }
            acc / n
        })
    }
}

impl TileModel for BoxBlur {
    fn predict(&self, cp: &ContextPair) -> Result<MattingOutput> {
        let s = cp.geometry.inner_side;
        let o = cp.geometry.inner_offset_in_context();
        let r = self.radius;
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let alpha = AlphaMatte::from_fn(s, s, |_, y, x| {
            let mut acc = 0.0;
            for yy in o + y - r..=o + y + r {
                for xx in o + x - r..=o + x + r {
                    acc += cp.image.get(0, yy, xx);
                }
            }
            acc / n
        });
        let (img, _) = cp.inner();
        Ok(MattingOutput {
            alpha,
            fg: img.clone(),
            bg: img,
        })
    }
}

fn tiled_inference(cfg: &AppConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.core.seed ^ 0x44);
    let model = BoxBlur { radius: 2 };
    let icfg = InferenceConfig {
        inner_side: 16,
        skip_known_tiles: false,
        ..InferenceConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (h, w) = (rng.random_range(5..70), rng.random_range(5..70));
        let img = random_image(&mut rng, h, w);
        let tri = Trimap::filled(h, w, Label::Unknown);
        let out = run_tiled(&img, &tri, &model, &icfg)?;
        worst = worst.max(out.alpha.data().iter().zip(model.reference(&img).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((worst <= 1e-6, format!("max stitched deviation {worst:.1e} over 5 sizes")))
}

fn check_samples(cfg: &AppConfig) -> Result<Vec<TrainingSample>> {
    generate_samples(&cfg.procedural_source(), 2, &cfg.augment_config())
}

fn generated_samples(cfg: &AppConfig) -> Outcome {
    let samples = check_samples(cfg)?;
    let mut worst: f64 = 0.0;
    let mut metrics_zero = true;
    for s in &samples {
        let c = &s.context;
        let rec = composite(&c.fg_gt, &c.bg_gt, &c.alpha_gt)?;
        worst = worst.max(rec.data().iter().zip(c.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let m = evaluate(&c.alpha_gt, &c.alpha_gt, &c.trimap)?;
        metrics_zero &= m.sad == 0.0 && m.mse == 0.0 && m.grad == 0.0 && m.conn == 0.0;
    }
    Ok((
        worst <= 1e-6 && metrics_zero,
        format!("{} samples, compositing residual {worst:.1e}, self metrics zero {metrics_zero}", samples.len()),
    ))
}

fn network_gradients(cfg: &AppConfig) -> Outcome {
    let net = cfg.network()?;
    let params = net.init_params(cfg.core.seed)?;
    let s = &check_samples(cfg)?[0];
    let cp = s.context_pair()?;
    let mut cx = Ctx::train(&params);
    let vars = net.forward(&mut cx, &cp, ContextMode::Attached)?;
    let mut total = matting_loss(&mut cx.graph, &vars.matting, &s.inner(), &cfg.losses)?.total;
    if let Some(p) = &vars.propagation {
        let lp = propagating_loss(&mut cx.graph, &p.context_alpha, s.context_alpha(), &cp.trimap)?;
        total = cx.graph.add(&total, &lp.value)?;
    }
    let mut g = cx.graph.backward(&total)?;
    let grads = cx.param_grads(&mut g);
    let dead = first_zero_gradient(&grads).map(str::to_string);
    let a = net.predict(&params, &cp)?;
    let b = net.predict(&params, &cp)?;
    let repeatable = a.alpha == b.alpha && a.fg == b.fg && a.bg == b.bg;
    Ok((
        dead.is_none() && grads.len() == params.len() && repeatable,
        match dead {
            Some(n) => format!("parameter {n} receives no gradient"),
            None => format!("{} tensors receive gradient, forward repeatable {repeatable}", grads.len()),
        },
    ))
}

struct TrainingArtifacts<'a> {
    dir: &'a Path,
}

fn training(cfg: &AppConfig, art: &TrainingArtifacts) -> Outcome {
    let net = cfg.network()?;
    let data = check_samples(cfg)?;
    let tc = TrainConfig {
        pretrain_epochs: 1,
        stage_epochs: [1, 1, 1],
        checkpoint_every: 0,
        ..cfg.train_config()
    };
    let log_path = art.dir.join("train.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| LfpError::io(&log_path, e))?;
    let mut sink = TrainSink {
        log: &mut log,
        checkpoint_dir: None,
    };
    let init = net.init_params(cfg.core.seed)?;
    let pre = if net.propagating().is_some() {
        pretrain_propagating(&net, init, &data, &tc, cfg.to_json(), &mut sink)?.0
    } else {
        Checkpoint {
            params: init,
            optimizer: Default::default(),
            config: cfg.to_json(),
            stage: Stage::Pretrain,
            step: 0,
        }
    };
    let (ckpt, stages) = train_three_stage(&net, &pre, &data, &tc, &mut sink)?;
    log.flush().map_err(|e| LfpError::io(&log_path, e))?;
    let path = art.dir.join("check.ckpt");
    ckpt.save(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| LfpError::io(&path, e))?;
    let exact = Checkpoint::load(&path)?.to_bytes()? == bytes;
    let frozen = stages.iter().all(|s| s.frozen_digest_before == s.frozen_digest_after);
    let finite = stages.iter().all(|s| s.last_loss.is_some_and(f64::is_finite));
    Ok((
        exact && frozen && finite,
        format!(
            "{} steps, frozen sets intact {frozen}, checkpoint round trip exact {exact}, final loss {:.6e}",
            ckpt.step,
            stages.last().and_then(|s| s.last_loss).unwrap_or(f64::NAN)
        ),
    ))
}

/// Runs every property, writing `check.jsonl`, `train.jsonl` and
/// `check.ckpt` into `out`.
pub fn run_check(cfg: &AppConfig, out: &Path) -> Result<CheckReport> {
    std::fs::create_dir_all(out).map_err(|e| LfpError::io(out, e))?;
    let art = TrainingArtifacts { dir: out };
    let props: Vec<(&'static str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("loss_gradients", Box::new(|| loss_gradients(cfg))),
        ("compositing", Box::new(|| compositing(cfg))),
        ("unknown_weight_clamp", Box::new(|| weight_clamp(cfg))),
        ("laplacian_pyramid", Box::new(|| pyramid(cfg))),
        ("distance_transform", Box::new(|| distance_transform(cfg))),
        ("tiled_inference", Box::new(|| tiled_inference(cfg))),
        ("generated_samples", Box::new(|| generated_samples(cfg))),
        ("network_gradients", Box::new(|| network_gradients(cfg))),
        ("training", Box::new(|| training(cfg, &art))),
    ];
    let log_path = out.join("check.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| LfpError::io(&log_path, e))?;
    let mut report = CheckReport::default();
    for (name, f) in props {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let r = PropertyResult { name, passed, detail };
        writeln!(log, "{}", serde_json::to_string(&r)?).map_err(|e| LfpError::io(&log_path, e))?;
        report.results.push(r);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn brute_force_oracle_on_a_known_layout() {
        let t = Trimap::from_fn(3, 4, |y, x| if (y, x) == (0, 0) { Label::Fg } else { Label::Unknown });
        let d = brute_force_distance(&t, Label::Fg);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[4 * 2 + 3], 13f64.sqrt());
        assert!(brute_force_distance(&t, Label::Bg).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn tiny_suite_passes() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_check(&AppConfig::preset(Preset::Tiny), dir.path()).unwrap();
        for r in &report.results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(report.results.len(), 9);
        assert!(dir.path().join("check.ckpt").exists());
    }
}

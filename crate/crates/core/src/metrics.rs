//! Matting error metrics over the unknown region.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::border::clamp;
use crate::domain::{AlphaMatte, Label, Trimap};
use crate::error::{LfpError, Result};
use crate::io::{read_alpha, read_trimap};

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
/// Connectivity differences below this are treated as fully connected.
pub const CONN_THETA: f64 = 0.15;

/// Unscaled sums and means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

/// Errors in the scaling used by published matting tables: SAD, Grad and
/// Conn divided by 1000, MSE multiplied by 1000.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub unknown_pixels: usize,
    pub raw: RawMetrics,
}

impl MetricReport {
    pub fn from_raw(raw: RawMetrics, unknown_pixels: usize) -> Self {
        Self {
            sad: raw.sad / 1000.0,
            mse: raw.mse * 1000.0,
            grad: raw.grad / 1000.0,
            conn: raw.conn / 1000.0,
            unknown_pixels,
            raw,
        }
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let k = reports.len() as f64;
        let avg = |f: &dyn Fn(&RawMetrics) -> f64| reports.iter().map(|r| f(&r.raw)).sum::<f64>() / k;
        let raw = RawMetrics {
            sad: avg(&|r| r.sad),
            mse: avg(&|r| r.mse),
            grad: avg(&|r| r.grad),
            conn: avg(&|r| r.conn),
        };
        let px = reports.iter().map(|r| r.unknown_pixels).sum::<usize>() / reports.len();
        MetricReport::from_raw(raw, px)
    }
}

fn check(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap) -> Result<Vec<usize>> {
    alpha.same_dims(gt.grid(), "metric ground truth")?;
    alpha.same_dims(trimap.grid(), "metric trimap")?;
    let unknown: Vec<usize> = (0..trimap.labels().len())
        .filter(|&i| trimap.labels()[i] == Label::Unknown)
        .collect();
    if unknown.is_empty() {
        log::warn!("trimap has no unknown pixels; metrics are zero");
    }
    Ok(unknown)
}

/// Sum of absolute differences over unknown pixels, divided by 1000.
pub fn sad(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap) -> Result<f64> {
    Ok(raw_sad(alpha, gt, &check(alpha, gt, trimap)?) / 1000.0)
}

/// Mean squared difference over unknown pixels, times 1000.
pub fn mse(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap) -> Result<f64> {
    Ok(raw_mse(alpha, gt, &check(alpha, gt, trimap)?) * 1000.0)
}

fn raw_sad(a: &AlphaMatte, b: &AlphaMatte, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| (a.data()[i] - b.data()[i]).abs()).sum()
}

fn raw_mse(a: &AlphaMatte, b: &AlphaMatte, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| (a.data()[i] - b.data()[i]).powi(2)).sum::<f64>() / idx.len() as f64
}

/// 1-D factors of the derivative-of-Gaussian filter: `(smooth, derivative)`,
/// scaled so the outer-product kernel has unit Frobenius norm.
pub fn gauss_gradient_factors(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let eps = 1e-2;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as isize;
    let gauss = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let smooth: Vec<f64> = (-half..=half).map(|i| gauss(i as f64)).collect();
    let deriv: Vec<f64> = (-half..=half).map(|i| -(i as f64) * gauss(i as f64) / (sigma * sigma)).collect();
    let norm = (smooth.iter().map(|v| v * v).sum::<f64>() * deriv.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let s = norm.sqrt();
    (smooth.into_iter().map(|v| v / s).collect(), deriv.into_iter().map(|v| v / s).collect())
}

/// Convolution along one axis with replicated borders.
fn convolve_axis(src: &[f64], h: usize, w: usize, k: &[f64], along_x: bool) -> Vec<f64> {
    let half = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                // Convolution flips the kernel.
                let d = half - j as isize;
                let (sy, sx) = if along_x {
                    (y, clamp(x as isize + d, w))
                } else {
                    (clamp(y as isize + d, h), x)
                };
                acc += kv * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gradient magnitude from derivative-of-Gaussian filtering.
pub fn gradient_magnitude(alpha: &AlphaMatte, sigma: f64) -> Vec<f64> {
    let (h, w) = alpha.dims();
    let (smooth, deriv) = gauss_gradient_factors(sigma);
    let gx = convolve_axis(&convolve_axis(alpha.data(), h, w, &smooth, false), h, w, &deriv, true);
    let gy = convolve_axis(&convolve_axis(alpha.data(), h, w, &deriv, false), h, w, &smooth, true);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

fn raw_grad(a: &AlphaMatte, b: &AlphaMatte, idx: &[usize], sigma: f64) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let ga = gradient_magnitude(a, sigma);
    let gb = gradient_magnitude(b, sigma);
    idx.iter().map(|&i| (ga[i] - gb[i]).powi(2)).sum()
}

/// Squared gradient-magnitude differences over unknown pixels, divided by
/// 1000.
pub fn grad_error(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(LfpError::Parameter(format!("gradient sigma {sigma} must be positive")));
    }
    Ok(raw_grad(alpha, gt, &check(alpha, gt, trimap)?, sigma) / 1000.0)
}

/// Largest 4-connected component of `mask`; ties go to the component met
/// first in row-major order. Returns an all-false map for an empty mask.
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        Some((id, _)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; h * w],
    }
}

fn raw_conn(a: &AlphaMatte, b: &AlphaMatte, idx: &[usize], step: f64) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let (h, w) = a.dims();
    let (pa, pb) = (a.data(), b.data());
    // Highest threshold at which each pixel still belonged to the common
    // largest component.
    let mut level: Vec<Option<f64>> = vec![None; h * w];
    let steps = (1.0 / step).round() as usize;
    for k in 1..=steps {
        let t = k as f64 * step;
        let mask: Vec<bool> = (0..h * w).map(|i| pa[i] >= t && pb[i] >= t).collect();
        let omega = largest_component(&mask, h, w);
        for i in 0..h * w {
            if level[i].is_none() && !omega[i] {
                level[i] = Some((k - 1) as f64 * step);
            }
        }
    }
    let phi = |v: f64, l: f64| {
        let d = v - l;
        1.0 - if d >= CONN_THETA { d } else { 0.0 }
    };
    idx.iter()
        .map(|&i| {
            let l = level[i].unwrap_or(1.0);
            (phi(pa[i], l) - phi(pb[i], l)).abs()
        })
        .sum()
}

/// Connectivity error over unknown pixels, divided by 1000.
pub fn conn_error(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap, step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(LfpError::Parameter(format!("connectivity step {step} must lie in (0, 1]")));
    }
    Ok(raw_conn(alpha, gt, &check(alpha, gt, trimap)?, step) / 1000.0)
}

/// All four metrics with the default filter and threshold settings.
pub fn evaluate(alpha: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap) -> Result<MetricReport> {
    let idx = check(alpha, gt, trimap)?;
    let raw = RawMetrics {
        sad: raw_sad(alpha, gt, &idx),
        mse: raw_mse(alpha, gt, &idx),
        grad: raw_grad(alpha, gt, &idx, GRAD_SIGMA),
        conn: raw_conn(alpha, gt, &idx, CONN_STEP),
    };
    Ok(MetricReport::from_raw(raw, idx.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageReport>,
    pub mean: MetricReport,
}

/// Scores every PNG in `pred` against the same file name in `gt` and
/// `trimaps`.
pub fn evaluate_dirs(pred: &Path, gt: &Path, trimaps: &Path) -> Result<EvalReport> {
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .map_err(|e| LfpError::io(pred, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LfpError::Data(format!("no PNG predictions in {}", pred.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    for name in names {
        let a = read_alpha(pred.join(&name))?;
        let g = read_alpha(gt.join(&name))?;
        let t = read_trimap(trimaps.join(&name))?;
        images.push(ImageReport {
            metrics: evaluate(&a, &g, &t)?,
            name,
        });
    }
    let all: Vec<MetricReport> = images.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        mean: MetricReport::mean(&all),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_alpha(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AlphaMatte {
        AlphaMatte::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_trimap(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Trimap {
        let labels = (0..h * w)
            .map(|_| match rng.random_range(0..4) {
                0 => Label::Fg,
                1 => Label::Bg,
                _ => Label::Unknown,
            })
            .collect();
        Trimap::new(h, w, labels).unwrap()
    }

    #[test]
    fn identical_mattes_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_alpha(&mut rng, 20, 30);
        let t = random_trimap(&mut rng, 20, 30);
        let r = evaluate(&a, &a, &t).unwrap();
        assert_eq!((r.sad, r.mse, r.grad, r.conn), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_offset_arithmetic() {
        let a = AlphaMatte::constant(25, 40, 0.5);
        let b = AlphaMatte::constant(25, 40, 0.4);
        let t = Trimap::filled(25, 40, Label::Unknown);
        assert!((sad(&a, &b, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!((mse(&a, &b, &t).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn sad_and_mse_match_masked_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, t) = (random_alpha(&mut rng, 17, 13), random_alpha(&mut rng, 17, 13), random_trimap(&mut rng, 17, 13));
        let (mut s, mut q, mut n) = (0.0, 0.0, 0);
        for y in 0..17 {
            for x in 0..13 {
                if t.at(y, x) == Label::Unknown {
                    let d = a.at(y, x) - b.at(y, x);
                    s += d.abs();
                    q += d * d;
                    n += 1;
                }
            }
        }
        assert!((sad(&a, &b, &t).unwrap() - s / 1000.0).abs() < 1e-12);
        assert!((mse(&a, &b, &t).unwrap() - q / n as f64 * 1000.0).abs() < 1e-9);
    }

    #[test]
    fn empty_unknown_region_scores_zero() {
        let a = AlphaMatte::constant(4, 4, 0.0);
        let b = AlphaMatte::constant(4, 4, 1.0);
        let t = Trimap::filled(4, 4, Label::Fg);
        assert_eq!(evaluate(&a, &b, &t).unwrap(), MetricReport::default());
    }

    #[test]
    fn gradient_filter_has_unit_norm() {
        let (s, d) = gauss_gradient_factors(1.4);
        assert_eq!(s.len(), 2 * 4 + 1);
        let frob: f64 = s.iter().flat_map(|a| d.iter().map(move |b| (a * b).powi(2))).sum();
        assert!((frob - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_dense_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (15, 19);
        let a = random_alpha(&mut rng, h, w);
        let sigma = 1.4;
        // Dense 2-D derivative-of-Gaussian kernels built directly.
        let half = 4isize;
        let g = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut hx = vec![vec![0.0; 9]; 9];
        for i in -half..=half {
            for j in -half..=half {
                hx[(i + half) as usize][(j + half) as usize] = g(i as f64) * (-(j as f64) * g(j as f64) / (sigma * sigma));
            }
        }
        let norm: f64 = hx.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let at = |y: isize, x: isize| a.at(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
        let got = gradient_magnitude(&a, sigma);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut gx, mut gy) = (0.0, 0.0);
                for i in -half..=half {
                    for j in -half..=half {
                        let k = hx[(i + half) as usize][(j + half) as usize] / norm;
                        gx += k * at(y - i, x - j);
                        gy += k * at(y - j, x - i);
                    }
                }
                assert!((got[(y * w as isize + x) as usize] - gx.hypot(gy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_ignores_constant_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AlphaMatte::new(20, 20, (0..400).map(|_| rng.random::<f64>() * 0.5).collect()).unwrap();
        let b = AlphaMatte::from_fn(20, 20, |_, y, x| a.at(y, x) + 0.25);
        let t = Trimap::filled(20, 20, Label::Unknown);
        assert!(grad_error(&a, &b, &t, 1.4).unwrap() < 1e-20);
    }

    #[test]
    fn opaque_mattes_are_connected() {
        let a = AlphaMatte::constant(10, 10, 1.0);
        let t = Trimap::filled(10, 10, Label::Unknown);
        assert_eq!(conn_error(&a, &a, &t, 0.1).unwrap(), 0.0);
    }

    /// Component of `seed` found by exhaustive flood fill.
    fn flood(mask: &[bool], h: usize, w: usize, seed: usize) -> Vec<usize> {
        let mut seen = vec![false; h * w];
        let mut frontier = vec![seed];
        seen[seed] = true;
        let mut out = Vec::new();
        while let Some(i) = frontier.pop() {
            out.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        frontier.push(j);
                    }
                }
            }
        }
        out
    }

    fn conn_oracle(a: &AlphaMatte, b: &AlphaMatte, t: &Trimap) -> f64 {
        let (h, w) = a.dims();
        let mut level = vec![-1.0; h * w];
        for k in 1..=10 {
            let th = k as f64 * 0.1;
            let mask: Vec<bool> = (0..h * w).map(|i| a.data()[i] >= th && b.data()[i] >= th).collect();
            let mut best: Vec<usize> = Vec::new();
            for i in 0..h * w {
                if mask[i] {
                    let c = flood(&mask, h, w, i);
                    let first = *c.iter().min().unwrap();
                    let incumbent = best.iter().min().copied().unwrap_or(usize::MAX);
                    if c.len() > best.len() || (c.len() == best.len() && first < incumbent) {
                        best = c;
                    }
                }
            }
            for i in 0..h * w {
                if level[i] < 0.0 && !best.contains(&i) {
                    level[i] = (k - 1) as f64 * 0.1;
                }
            }
        }
        let mut total = 0.0;
        for i in 0..h * w {
            if t.labels()[i] != Label::Unknown {
                continue;
            }
            let l = if level[i] < 0.0 { 1.0 } else { level[i] };
            let phi = |v: f64| {
                let d = v - l;
                1.0 - if d >= 0.15 { d } else { 0.0 }
            };
            total += (phi(a.data()[i]) - phi(b.data()[i])).abs();
        }
        total / 1000.0
    }

    #[test]
    fn connectivity_matches_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Two blobs of differing size and softness, plus noise.
        let blob = |y: usize, x: usize, cy: f64, cx: f64, r: f64| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            (1.0 - (d - r).max(0.0) / 3.0).clamp(0.0, 1.0)
        };
        for _ in 0..5 {
            let noise: Vec<f64> = (0..256).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
            let a = AlphaMatte::from_fn(16, 16, |_, y, x| {
                blob(y, x, 4.0, 4.0, 3.0).max(blob(y, x, 11.0, 11.0, 2.0)) + noise[y * 16 + x]
            });
            let b = AlphaMatte::from_fn(16, 16, |_, y, x| blob(y, x, 4.5, 4.0, 3.0).max(blob(y, x, 11.0, 10.0, 2.5)));
            let t = random_trimap(&mut rng, 16, 16);
            let want = conn_oracle(&a, &b, &t);
            let got = conn_error(&a, &b, &t, 0.1).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!(got > 0.0);
        }
    }

    #[test]
    fn largest_component_breaks_ties_by_scan_order() {
        let mask = [true, false, true, false, false, false];
        assert_eq!(largest_component(&mask, 2, 3), vec![true, false, false, false, false, false]);
        assert_eq!(largest_component(&[false; 4], 2, 2), vec![false; 4]);
    }

    proptest! {
        #[test]
        fn known_pixels_do_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, t) = (random_alpha(&mut rng, 9, 11), random_alpha(&mut rng, 9, 11), random_trimap(&mut rng, 9, 11));
            let other = random_alpha(&mut rng, 9, 11);
            let a2 = AlphaMatte::from_fn(9, 11, |_, y, x| if t.at(y, x) == Label::Unknown { a.at(y, x) } else { other.at(y, x) });
            prop_assert_eq!(sad(&a, &b, &t).unwrap(), sad(&a2, &b, &t).unwrap());
            prop_assert_eq!(mse(&a, &b, &t).unwrap(), mse(&a2, &b, &t).unwrap());
        }

        #[test]
        fn any_unknown_difference_is_positive(seed in 0u64..1000, dy in 0usize..9, dx in 0usize..11) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_alpha(&mut rng, 9, 11);
            let t = Trimap::filled(9, 11, Label::Unknown);
            let b = AlphaMatte::from_fn(9, 11, |_, y, x| if (y, x) == (dy, dx) { 1.0 - a.at(y, x) + 1e-3 } else { a.at(y, x) });
            prop_assume!(a.at(dy, dx) != b.at(dy, dx));
            prop_assert!(sad(&a, &b, &t).unwrap() > 0.0);
            prop_assert!(mse(&a, &b, &t).unwrap() > 0.0);
        }
    }
}

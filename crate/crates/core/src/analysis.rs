//! How far unknown pixels lie from known foreground and background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AlphaMatte, Label, Trimap};
use crate::error::{LfpError, Result};
use crate::io::{read_alpha, read_trimap};

/// Effective receptive field commonly quoted for a ResNet-50 backbone,
/// drawn as a reference marker on the distance plot.
pub const ERF_MARKER_PX: f64 = 75.0;

pub const PERCENTILES: [f64; 4] = [25.0, 50.0, 75.0, 90.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownClass {
    /// Alpha at or above the threshold.
    FgLike,
    BgLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
    /// Largest distance shown on the plot; `None` fits the data.
    pub plot_max_distance: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            plot_max_distance: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LfpError::Config {
                path: "analysis.threshold".into(),
                message: format!("{} must lie strictly between 0 and 1", self.threshold),
            });
        }
        if self.plot_max_distance.is_some_and(|d| !(d > 0.0)) {
            return Err(LfpError::Config {
                path: "analysis.plot_max_distance".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Splits unknown pixels by their ground-truth alpha; known pixels get `None`.
pub fn classify_unknown(alpha: &AlphaMatte, t: &Trimap, threshold: f64) -> Result<Vec<Option<UnknownClass>>> {
    alpha.same_dims(t.grid(), "classify_unknown trimap")?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LfpError::Parameter(format!("threshold {threshold} must lie in (0, 1)")));
    }
    Ok(t.labels()
        .iter()
        .zip(alpha.data())
        .map(|(&l, &a)| match l {
            Label::Unknown if a >= threshold => Some(UnknownClass::FgLike),
            Label::Unknown => Some(UnknownClass::BgLike),
            _ => None,
        })
        .collect())
}

/// Exact squared distance transform of one line (lower envelope of
/// parabolas). `f` holds 0 on sites and `INFINITY` elsewhere.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest pixel carrying
/// `target`; `INFINITY` everywhere when no pixel does.
pub fn distance_to_known(t: &Trimap, target: Label) -> Vec<f64> {
    let (h, w) = t.dims();
    let mut grid: Vec<f64> = t
        .labels()
        .iter()
        .map(|&l| if l == target { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let (mut line, mut out) = (vec![0.0; h], vec![0.0; h]);
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        edt_1d(&line, &mut out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

/// Pooled distances for one (pixel class, target label) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub name: &'static str,
    /// Ascending.
    pub distances: Vec<f64>,
}

impl Curve {
    /// Fraction of pixels at distance `<= d`.
    pub fn cdf(&self, d: f64) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        self.distances.partition_point(|&x| x <= d) as f64 / self.distances.len() as f64
    }

    /// Nearest-rank percentile.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        let n = self.distances.len();
        if n == 0 {
            return None;
        }
        let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
        Some(self.distances[rank.min(n) - 1])
    }
}

pub const CURVE_NAMES: [&str; 4] = ["fg_like_to_fg", "fg_like_to_bg", "bg_like_to_fg", "bg_like_to_bg"];

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceStats {
    pub curves: [Curve; 4],
    pub samples_used: usize,
    /// Samples without both known foreground and known background.
    pub samples_skipped: usize,
}

/// Per-sample distances in curve order, or `None` when the sample is skipped.
fn sample_distances(t: &Trimap, alpha: &AlphaMatte, threshold: f64) -> Result<Option<[Vec<f64>; 4]>> {
    if t.count(Label::Fg) == 0 || t.count(Label::Bg) == 0 {
        return Ok(None);
    }
    let classes = classify_unknown(alpha, t, threshold)?;
    let to_fg = distance_to_known(t, Label::Fg);
    let to_bg = distance_to_known(t, Label::Bg);
    let mut out: [Vec<f64>; 4] = Default::default();
    for (i, c) in classes.iter().enumerate() {
        let base = match c {
            Some(UnknownClass::FgLike) => 0,
            Some(UnknownClass::BgLike) => 2,
            None => continue,
        };
        out[base].push(to_fg[i]);
        out[base + 1].push(to_bg[i]);
    }
    Ok(Some(out))
}

pub fn dataset_distance_stats(samples: &[(Trimap, AlphaMatte)], threshold: f64) -> Result<DistanceStats> {
    let per: Vec<Option<[Vec<f64>; 4]>> = samples
        .par_iter()
        .map(|(t, a)| sample_distances(t, a, threshold))
        .collect::<Result<_>>()?;
    let skipped = per.iter().filter(|p| p.is_none()).count();
    if skipped == per.len() {
        return Err(LfpError::EmptyStatistics { skipped });
    }
    let mut pooled: [Vec<f64>; 4] = Default::default();
    for p in per.into_iter().flatten() {
        for (dst, src) in pooled.iter_mut().zip(p) {
            dst.extend(src);
        }
    }
    let curves = pooled.map(|mut d| {
        d.sort_by(f64::total_cmp);
        d
    });
    let [a, b, c, d] = curves;
    Ok(DistanceStats {
        curves: [
            Curve { name: CURVE_NAMES[0], distances: a },
            Curve { name: CURVE_NAMES[1], distances: b },
            Curve { name: CURVE_NAMES[2], distances: c },
            Curve { name: CURVE_NAMES[3], distances: d },
        ],
        samples_used: samples.len() - skipped,
        samples_skipped: skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub name: String,
    pub pixels: usize,
    /// `(percentile, distance)` pairs.
    pub percentiles: Vec<(f64, f64)>,
    /// Pixel counts in unit-width distance bins starting at 0.
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub samples_used: usize,
    pub samples_skipped: usize,
    pub threshold: f64,
    pub erf_marker_px: f64,
    pub curves: Vec<CurveReport>,
}

impl DistanceStats {
    pub fn report(&self, threshold: f64) -> DistanceReport {
        let curves = self
            .curves
            .iter()
            .map(|c| {
                let mut histogram = Vec::new();
                for &d in &c.distances {
                    let bin = d.floor() as usize;
                    if histogram.len() <= bin {
                        histogram.resize(bin + 1, 0);
                    }
                    histogram[bin] += 1;
                }
                CurveReport {
                    name: c.name.to_string(),
                    pixels: c.distances.len(),
                    percentiles: PERCENTILES.iter().filter_map(|&p| c.percentile(p).map(|d| (p, d))).collect(),
                    histogram,
                }
            })
            .collect();
        DistanceReport {
            samples_used: self.samples_used,
            samples_skipped: self.samples_skipped,
            threshold,
            erf_marker_px: ERF_MARKER_PX,
            curves,
        }
    }

    /// Writes [`DistanceStats::plot`] as a PNG.
    pub fn save_plot(&self, path: &Path, max_distance: Option<f64>) -> Result<()> {
        self.plot(max_distance).save(path).map_err(|e| LfpError::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Cumulative-distribution plot of all four curves with a vertical
    /// marker at [`ERF_MARKER_PX`].
    pub fn plot(&self, max_distance: Option<f64>) -> RgbImage {
        let (w, h, margin) = (640u32, 400u32, 40u32);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let data_max = self
            .curves
            .iter()
            .filter_map(|c| c.distances.last().copied())
            .fold(0.0, f64::max);
        let xmax = max_distance.unwrap_or(data_max.max(ERF_MARKER_PX) * 1.05).max(1.0);
        let (pw, ph) = (w - 2 * margin, h - 2 * margin);
        let to_px = |d: f64, f: f64| {
            let x = margin as f64 + (d / xmax).min(1.0) * pw as f64;
            let y = (h - margin) as f64 - f * ph as f64;
            (x.round() as u32, y.round() as u32)
        };
        let axis = Rgb([0, 0, 0]);
        for x in margin..=w - margin {
            img.put_pixel(x, h - margin, axis);
        }
        for y in margin..=h - margin {
            img.put_pixel(margin, y, axis);
        }
        let (mx, _) = to_px(ERF_MARKER_PX, 0.0);
        for y in (margin..h - margin).step_by(3) {
            img.put_pixel(mx, y, Rgb([120, 120, 120]));
        }
        let colours = [Rgb([200, 30, 30]), Rgb([240, 140, 20]), Rgb([30, 90, 200]), Rgb([20, 160, 80])];
        for (c, colour) in self.curves.iter().zip(colours) {
            if c.distances.is_empty() {
                continue;
            }
            let mut prev = to_px(0.0, c.cdf(0.0));
            for step in 1..=pw {
                let d = xmax * step as f64 / pw as f64;
                let p = to_px(d, c.cdf(d));
                let (y0, y1) = (prev.1.min(p.1), prev.1.max(p.1));
                for y in y0..=y1 {
                    img.put_pixel(p.0.min(w - 1), y.min(h - 1), colour);
                }
                prev = p;
            }
        }
        img
    }
}

/// Loads `trimap/*.png` with the matching `alpha/*.png` under `root`.
pub fn load_trimap_alpha_pairs(root: &Path) -> Result<Vec<(Trimap, AlphaMatte)>> {
    let dir = root.join("trimap");
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| LfpError::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LfpError::Data(format!("no trimaps under {}", dir.display())));
    }
    names
        .iter()
        .map(|n| {
            let t = read_trimap(dir.join(n))?;
            let a = read_alpha(root.join("alpha").join(n))?;
            a.same_dims(t.grid(), "dataset alpha")?;
            Ok((t, a))
        })
        .collect()
}

//! Training data synthesis: compositing, trimap generation and augmentation.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::border::reflect;
use crate::domain::{composite, AlphaMatte, ColorMap, Grid, Image, Label, Sample, Trimap};
use crate::error::{LfpError, Result};
use crate::geometry::{ContextPair, PatchGeometry};
use crate::io::{read_alpha, read_image, read_trimap, write_alpha, write_image, write_trimap};
use crate::tensor::{apply_separable, LinearMap};

/// Alpha values within this distance of 0 or 1 count as fully known.
pub const KNOWN_EPS: f64 = 1.0 / 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_sizes: Vec<usize>,
    /// Inclusive range of square structuring-element sizes; only odd sizes
    /// are drawn.
    pub trimap_kernel_range: [usize; 2],
    pub fg_to_unknown_prob: f64,
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub shear_deg: f64,
    pub flip_prob: f64,
    pub saturation_range: [f64; 2],
    pub grayscale_prob: f64,
    pub gamma_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_sizes: vec![768, 640, 512, 448, 320],
            trimap_kernel_range: [3, 35],
            fg_to_unknown_prob: 0.1,
            rotation_deg: 15.0,
            scale_range: [0.8, 1.2],
            shear_deg: 10.0,
            flip_prob: 0.5,
            saturation_range: [0.7, 1.3],
            grayscale_prob: 0.1,
            gamma_range: [0.7, 1.5],
            contrast_range: [0.8, 1.2],
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| {
            Err(LfpError::Config {
                path: format!("datagen.{path}"),
                message,
            })
        };
        if self.crop_sizes.is_empty() || self.crop_sizes.iter().any(|&s| s == 0 || s % 2 != 0) {
            return err("crop_sizes", format!("{:?} must be a non-empty list of positive even sizes", self.crop_sizes));
        }
        let [lo, hi] = self.trimap_kernel_range;
        if lo < 1 || hi > 99 || lo > hi {
            return err("trimap_kernel_range", format!("[{lo}, {hi}] must satisfy 1 <= min <= max <= 99"));
        }
        if odd_kernels(self.trimap_kernel_range).is_empty() {
            return err("trimap_kernel_range", format!("[{lo}, {hi}] contains no odd size"));
        }
        for (name, p) in [
            ("fg_to_unknown_prob", self.fg_to_unknown_prob),
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(name, format!("{p} is not a probability"));
            }
        }
        for (name, [a, b]) in [
            ("scale_range", self.scale_range),
            ("saturation_range", self.saturation_range),
            ("gamma_range", self.gamma_range),
            ("contrast_range", self.contrast_range),
        ] {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return err(name, format!("[{a}, {b}] must satisfy 0 < min <= max"));
            }
        }
        if !(self.rotation_deg >= 0.0 && self.shear_deg >= 0.0 && self.shear_deg < 80.0) {
            return err("rotation_deg", "rotation and shear must be non-negative, shear below 80".into());
        }
        Ok(())
    }
}

fn odd_kernels([lo, hi]: [usize; 2]) -> Vec<usize> {
    (lo..=hi).filter(|k| k % 2 == 1).collect()
}

/// A foreground layer with its alpha matte.
#[derive(Clone, Debug, PartialEq)]
pub struct FgAsset {
    pub fg: ColorMap,
    pub alpha: AlphaMatte,
}

impl FgAsset {
    pub fn new(fg: ColorMap, alpha: AlphaMatte) -> Result<Self> {
        fg.same_dims(alpha.grid(), "foreground asset alpha")?;
        Ok(Self { fg, alpha })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BgAsset {
    pub image: Image,
}

/// Separable binary erosion with a `k × k` square; samples beyond the border
/// are mirrored back in.
pub fn erode(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = (k / 2) as isize;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).all(|d| mask[y * w + reflect(x as isize + d, w)]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).all(|d| rows[reflect(y as isize + d, h) * w + x]);
        }
    }
    out
}

/// Known foreground is the eroded opaque region, known background the eroded
/// transparent region; everything else is unknown.
pub fn synth_trimap(alpha: &AlphaMatte, erode_k: usize, dilate_k: usize) -> Result<Trimap> {
    for k in [erode_k, dilate_k] {
        if k == 0 || k % 2 == 0 {
            return Err(LfpError::Parameter(format!("morphology kernel {k} must be odd and positive")));
        }
    }
    let (h, w) = alpha.dims();
    let opaque: Vec<bool> = alpha.data().iter().map(|&a| a >= 1.0 - KNOWN_EPS).collect();
    let clear: Vec<bool> = alpha.data().iter().map(|&a| a <= KNOWN_EPS).collect();
    let fg = erode(&opaque, h, w, erode_k);
    let bg = erode(&clear, h, w, dilate_k);
    let labels = (0..h * w)
        .map(|i| {
            if fg[i] {
                Label::Fg
            } else if bg[i] {
                Label::Bg
            } else {
                Label::Unknown
            }
        })
        .collect();
    Trimap::new(h, w, labels)
}

/// With probability `p` the whole foreground region becomes unknown.
pub fn fg_regions_to_unknown(t: &Trimap, p: f64, rng: &mut impl Rng) -> (Trimap, bool) {
    if !rng.random_bool(p.clamp(0.0, 1.0)) {
        return (t.clone(), false);
    }
    let (h, w) = t.dims();
    let out = Trimap::from_fn(h, w, |y, x| match t.at(y, x) {
        Label::Fg => Label::Unknown,
        l => l,
    });
    (out, true)
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_rad: f64,
    pub scale: f64,
    pub shear_rad: f64,
    pub flip: bool,
    pub saturation: f64,
    pub grayscale: bool,
    pub gamma: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_rad: 0.0,
            scale: 1.0,
            shear_rad: 0.0,
            flip: false,
            saturation: 1.0,
            grayscale: false,
            gamma: 1.0,
            contrast: 1.0,
        }
    }

    /// Forward 2×2 geometric matrix acting on `(x, y)` offsets from the
    /// image centre.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_rad.sin_cos();
        let f = if self.flip { -1.0 } else { 1.0 };
        let t = self.shear_rad.tan();
        // rotation · shear · scale · flip
        let m = [[c, -s], [s, c]];
        let sh = [[1.0, t], [0.0, 1.0]];
        let d = [[self.scale * f, 0.0], [0.0, self.scale]];
        mul2(mul2(m, sh), d)
    }

    pub fn draw(rng: &mut impl Rng, cfg: &AugmentConfig) -> Self {
        let uniform = |rng: &mut dyn rand::RngCore, [a, b]: [f64; 2]| if a == b { a } else { rng.random_range(a..=b) };
        loop {
            let sym = |rng: &mut dyn rand::RngCore, r: f64| if r == 0.0 { 0.0 } else { rng.random_range(-r..=r) };
            let p = Self {
                rotation_rad: sym(rng, cfg.rotation_deg).to_radians(),
                scale: uniform(rng, cfg.scale_range),
                shear_rad: sym(rng, cfg.shear_deg).to_radians(),
                flip: rng.random_bool(cfg.flip_prob),
                saturation: uniform(rng, cfg.saturation_range),
                grayscale: rng.random_bool(cfg.grayscale_prob),
                gamma: uniform(rng, cfg.gamma_range),
                contrast: uniform(rng, cfg.contrast_range),
            };
            let m = p.matrix();
            if (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs() >= 1e-6 {
                return p;
            }
        }
    }
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut o = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    o
}

/// Bilinear sample at `(y, x)`; `None` when the point leaves the grid.
fn bilinear(g: &Grid<f64>, c: usize, y: f64, x: f64, clamp_outside: bool) -> Option<f64> {
    let (h, w) = g.dims();
    let tol = 1e-9;
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    if !clamp_outside && (y < -tol || x < -tol || y > ymax + tol || x > xmax + tol) {
        return None;
    }
    let y = y.clamp(0.0, ymax);
    let x = x.clamp(0.0, xmax);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = g.get(c, y0, x0) * (1.0 - fx) + g.get(c, y0, x1) * fx;
    let bottom = g.get(c, y1, x0) * (1.0 - fx) + g.get(c, y1, x1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Applies a fixed parameter draw. Alpha receives only the geometric part;
/// colours outside the source are edge-extended, alpha outside is zero.
pub fn apply_augment(asset: &FgAsset, p: &AugmentParams) -> Result<FgAsset> {
    let (h, w) = asset.alpha.dims();
    let m = p.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-6 {
        return Err(LfpError::Parameter(format!("degenerate affine transform, determinant {det}")));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let source = |y: usize, x: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (cy + inv[1][0] * dx + inv[1][1] * dy, cx + inv[0][0] * dx + inv[0][1] * dy)
    };
    let alpha = AlphaMatte::from_fn(h, w, |_, y, x| {
        let (sy, sx) = source(y, x);
        bilinear(asset.alpha.grid(), 0, sy, sx, false).unwrap_or(0.0)
    });
    let warped = Grid::from_fn(3, h, w, |c, y, x| {
        let (sy, sx) = source(y, x);
        bilinear(asset.fg.grid(), c, sy, sx, true).unwrap_or(0.0)
    });
    let fg = Image::from_fn(h, w, |c, y, x| {
        let rgb = [warped.get(0, y, x), warped.get(1, y, x), warped.get(2, y, x)];
        let gray = luma(rgb[0], rgb[1], rgb[2]);
        let mut v = gray + p.saturation * (rgb[c] - gray);
        if p.grayscale {
            let sat = rgb.map(|v| gray + p.saturation * (v - gray));
            v = luma(sat[0], sat[1], sat[2]);
        }
        let v = v.clamp(0.0, 1.0).powf(p.gamma);
        0.5 + p.contrast * (v - 0.5)
    });
    FgAsset::new(fg, alpha)
}

pub fn augment(asset: &FgAsset, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<(FgAsset, AugmentParams)> {
    let p = AugmentParams::draw(rng, cfg);
    Ok((apply_augment(asset, &p)?, p))
}

/// Antialiased bilinear resize of every channel.
pub fn resize(g: &Grid<f64>, height: usize, width: usize) -> Result<Grid<f64>> {
    if g.dims() == (height, width) {
        return Ok(g.clone());
    }
    let t = apply_separable(&g.to_tensor(), &LinearMap::bilinear(g.height(), height), &LinearMap::bilinear(g.width(), width))?;
    Grid::new(g.channels(), height, width, t.into_data())
}

/// How a training sample was drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub scene: (usize, usize),
    pub geometry: PatchGeometry,
    pub erode_k: usize,
    pub dilate_k: usize,
    pub fg_to_unknown: bool,
    pub augment: AugmentParams,
}

/// A composited scene cropped to the context window of a training tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Image, trimap and ground truths over the whole `2s × 2s` window.
    pub context: Sample,
    pub meta: SampleMeta,
}

impl TrainingSample {
    pub fn inner_side(&self) -> usize {
        self.meta.geometry.inner_side
    }

    /// The central `s × s` window.
    pub fn inner(&self) -> Sample {
        let s = self.inner_side();
        let o = (s / 2) as isize;
        let c = &self.context;
        Sample {
            image: c.image.crop_reflect(o, o, s, s),
            trimap: c.trimap.crop_reflect(o, o, s, s),
            alpha_gt: c.alpha_gt.crop_reflect(o, o, s, s),
            fg_gt: c.fg_gt.crop_reflect(o, o, s, s),
            bg_gt: c.bg_gt.crop_reflect(o, o, s, s),
        }
    }

    pub fn context_pair(&self) -> Result<ContextPair> {
        ContextPair::new(self.context.image.clone(), self.context.trimap.clone(), self.meta.geometry)
    }

    pub fn context_alpha(&self) -> &AlphaMatte {
        &self.context.alpha_gt
    }
}

/// Composites an augmented foreground over a background and crops a training
/// tile with its context window.
pub fn make_training_sample(fg: &FgAsset, bg: &BgAsset, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<TrainingSample> {
    if fg.alpha.data().iter().all(|&a| a <= 0.0) {
        return Err(LfpError::Data("foreground asset has an empty alpha support".into()));
    }
    let s = *cfg.crop_sizes.choose(rng).expect("validated crop sizes");
    let (mut asset, mut params) = augment(fg, rng, cfg)?;
    if asset.alpha.data().iter().all(|&a| a <= 0.0) {
        asset = fg.clone();
        params = AugmentParams::identity();
    }
    let (h, w) = asset.alpha.dims();
    let bg_img = Image::from_grid(resize(bg.image.grid(), h, w)?)?;
    let image = composite(&asset.fg, &bg_img, &asset.alpha)?;

    let kernels = odd_kernels(cfg.trimap_kernel_range);
    let erode_k = *kernels.choose(rng).expect("validated kernel range");
    let dilate_k = *kernels.choose(rng).expect("validated kernel range");
    let trimap = synth_trimap(&asset.alpha, erode_k, dilate_k)?;
    let (trimap, flipped) = fg_regions_to_unknown(&trimap, cfg.fg_to_unknown_prob, rng);

    let unknown: Vec<usize> = (0..h * w).filter(|&i| trimap.labels()[i] == Label::Unknown).collect();
    let centre = match unknown.choose(rng) {
        Some(&i) => i,
        None => rng.random_range(0..h * w),
    };
    let place = |c: usize, n: usize| c.saturating_sub(s / 2).min(n.saturating_sub(s));
    let origin = (place(centre % w, w), place(centre / w, h));
    let geometry = PatchGeometry::new(w, h, origin, s)?;
    let (left, top) = geometry.context_origin();
    let cs = geometry.context_side();
    let context = Sample::new(
        image.crop_reflect(top, left, cs, cs),
        trimap.crop_reflect(top, left, cs, cs),
        asset.alpha.crop_reflect(top, left, cs, cs),
        asset.fg.crop_reflect(top, left, cs, cs),
        bg_img.crop_reflect(top, left, cs, cs),
    )?;
    Ok(TrainingSample {
        context,
        meta: SampleMeta {
            index: 0,
            seed: 0,
            scene: (w, h),
            geometry,
            erode_k,
            dilate_k,
            fg_to_unknown: flipped,
            augment: params,
        },
    })
}

/// Soft-edged ellipses with a few semi-transparent strands, over a smooth
/// colour field.
pub fn procedural_fg(rng: &mut impl Rng, h: usize, w: usize) -> FgAsset {
    let m = h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(0.3..0.7) * h as f64,
                rng.random_range(0.3..0.7) * w as f64,
                rng.random_range(0.12..0.25) * m,
                rng.random_range(0.12..0.25) * m,
                rng.random_range(1.5..0.06 * m + 2.0),
            )
        })
        .collect();
    let strands: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=5))
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..0.45) * m,
                rng.random_range(0.3..0.8),
                rng.random_range(0.4..1.2),
            )
        })
        .collect();
    let (cy0, cx0) = (blobs[0].0, blobs[0].1);
    let alpha = AlphaMatte::from_fn(h, w, |_, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut a: f64 = 0.0;
        for &(cy, cx, ry, rx, soft) in &blobs {
            let d = (((yf - cy) / ry).powi(2) + ((xf - cx) / rx).powi(2)).sqrt();
            let edge = (d - 1.0) * ry.min(rx);
            a = a.max((0.5 - edge / (2.0 * soft)).clamp(0.0, 1.0));
        }
        for &(theta, len, opacity, width) in &strands {
            let (dy, dx) = (yf - cy0, xf - cx0);
            let along = dx * theta.cos() + dy * theta.sin();
            let across = (-dx * theta.sin() + dy * theta.cos()).abs();
            if along > 0.0 && along < len + 0.2 * m {
                a = a.max(opacity * (1.0 - across / width).clamp(0.0, 1.0));
            }
        }
        a
    });
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let tilt: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let fg = Image::from_fn(h, w, |c, y, x| base[c] + tilt[c] * ((y + x) as f64 / (h + w) as f64 - 0.5));
    FgAsset { fg, alpha }
}

/// Low-frequency sinusoidal texture.
pub fn procedural_bg(rng: &mut impl Rng, h: usize, w: usize) -> BgAsset {
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..6.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let image = Image::from_fn(h, w, |c, y, x| {
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut acc = base[c];
        for wv in waves.iter().skip(c * 3).take(3) {
            acc += wv[4] * (std::f64::consts::TAU * (wv[2] * u + wv[3] * v) + wv[1] + wv[0]).sin();
        }
        acc
    });
    BgAsset { image }
}

/// Foreground/alpha/background files on disk: `fg/`, `alpha/` and `bg/`.
/// Foregrounds pair with alphas by file name. An optional `manifest.txt`
/// restricts and orders the pairs, one file name per line.
#[derive(Clone, Debug)]
pub struct AssetFolder {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub backgrounds: Vec<PathBuf>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| LfpError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    out.sort();
    Ok(out)
}

impl AssetFolder {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join("manifest.txt");
        let names = if manifest.exists() {
            std::fs::read_to_string(&manifest)
                .map_err(|e| LfpError::io(&manifest, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        } else {
            png_names(&root.join("fg"))?
        };
        let mut pairs = Vec::with_capacity(names.len());
        for n in names {
            let (f, a) = (root.join("fg").join(&n), root.join("alpha").join(&n));
            if !a.exists() {
                return Err(LfpError::Data(format!("foreground {n} has no matching alpha")));
            }
            pairs.push((f, a));
        }
        let backgrounds: Vec<PathBuf> = png_names(&root.join("bg"))?.into_iter().map(|n| root.join("bg").join(n)).collect();
        if pairs.is_empty() || backgrounds.is_empty() {
            return Err(LfpError::Data(format!("{} needs at least one fg/alpha pair and one bg", root.display())));
        }
        Ok(Self { pairs, backgrounds })
    }

    pub fn load_fg(&self, i: usize) -> Result<FgAsset> {
        let (f, a) = &self.pairs[i % self.pairs.len()];
        FgAsset::new(read_image(f)?, read_alpha(a)?)
    }

    pub fn load_bg(&self, i: usize) -> Result<BgAsset> {
        Ok(BgAsset {
            image: read_image(&self.backgrounds[i % self.backgrounds.len()])?,
        })
    }
}

/// Where foregrounds and backgrounds come from.
#[derive(Clone, Debug)]
pub enum AssetSource {
    /// Generated shapes of the given side.
    Procedural { side: usize },
    Folder(AssetFolder),
}

/// Sample `i` uses its own ChaCha stream, so generation order and worker
/// count do not affect the output.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_sample(source: &AssetSource, index: usize, cfg: &AugmentConfig) -> Result<TrainingSample> {
    let mut rng = sample_rng(cfg.rng_seed, index);
    let (fg, bg) = match source {
        AssetSource::Procedural { side } => (procedural_fg(&mut rng, *side, *side), procedural_bg(&mut rng, *side, *side)),
        AssetSource::Folder(f) => {
            // A fresh background is drawn for every foreground use.
            let b = rng.random_range(0..f.backgrounds.len());
            (f.load_fg(index)?, f.load_bg(b)?)
        }
    };
    let mut s = make_training_sample(&fg, &bg, &mut rng, cfg)?;
    s.meta.index = index;
    s.meta.seed = cfg.rng_seed;
    Ok(s)
}

pub fn generate_samples(source: &AssetSource, count: usize, cfg: &AugmentConfig) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    (0..count).into_par_iter().map(|i| generate_sample(source, i, cfg)).collect()
}

const SAMPLE_DIRS: [&str; 6] = ["image", "trimap", "alpha", "fg", "bg", "meta"];

/// Writes a sample as `image/`, `trimap/`, `alpha/`, `fg/`, `bg/` PNGs at
/// context size plus `meta/<name>.json`.
pub fn write_sample(root: &Path, s: &TrainingSample) -> Result<String> {
    for d in SAMPLE_DIRS {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| LfpError::io(&p, e))?;
    }
    let name = format!("{:06}", s.meta.index);
    let png = format!("{name}.png");
    let c = &s.context;
    write_image(root.join("image").join(&png), &c.image)?;
    write_trimap(root.join("trimap").join(&png), &c.trimap)?;
    write_alpha(root.join("alpha").join(&png), &c.alpha_gt)?;
    write_image(root.join("fg").join(&png), &c.fg_gt)?;
    write_image(root.join("bg").join(&png), &c.bg_gt)?;
    let meta = root.join("meta").join(format!("{name}.json"));
    std::fs::write(&meta, serde_json::to_string_pretty(&s.meta)?).map_err(|e| LfpError::io(&meta, e))?;
    Ok(name)
}

/// Reads every sample written by [`write_sample`], ordered by name.
/// Colours pass through 8-bit files, so the compositing identity holds only
/// to quantization accuracy after a round trip.
pub fn read_samples(root: &Path) -> Result<Vec<TrainingSample>> {
    let meta_dir = root.join("meta");
    let mut names: Vec<String> = std::fs::read_dir(&meta_dir)
        .map_err(|e| LfpError::io(&meta_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter_map(|n| n.strip_suffix(".json").map(String::from))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LfpError::Data(format!("no samples under {}", root.display())));
    }
    names
        .iter()
        .map(|name| {
            let png = format!("{name}.png");
            let mp = meta_dir.join(format!("{name}.json"));
            let text = std::fs::read_to_string(&mp).map_err(|e| LfpError::io(&mp, e))?;
            let meta: SampleMeta = serde_json::from_str(&text)?;
            let context = Sample::new(
                read_image(root.join("image").join(&png))?,
                read_trimap(root.join("trimap").join(&png))?,
                read_alpha(root.join("alpha").join(&png))?,
                read_image(root.join("fg").join(&png))?,
                read_image(root.join("bg").join(&png))?,
            )?;
            if context.image.dims() != (meta.geometry.context_side(), meta.geometry.context_side()) {
                return Err(LfpError::Data(format!("sample {name} does not match its recorded geometry")));
            }
            Ok(TrainingSample { context, meta })
        })
        .collect()
}

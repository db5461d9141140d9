//! Crop-and-stitch inference over large images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::border::clamp;
use crate::domain::{clamp_by_trimap, AlphaMatte, ColorMap, Grid, Image, Label, Trimap};
use crate::error::{LfpError, Result};
use crate::geometry::{ContextPair, PatchGeometry, Rect};
use crate::matting::MattingOutput;

/// Anything that maps a context pair to predictions for its inner window.
pub trait TileModel: Sync {
    fn predict(&self, context: &ContextPair) -> Result<MattingOutput>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    /// Each pixel is taken from the single tile that owns it.
    None,
    /// Overlapping tiles are mixed with weights falling off linearly towards
    /// tile edges.
    LinearRamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Reflect,
    Replicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub inner_side: usize,
    pub overlap: usize,
    pub blend: Blend,
    pub pad_mode: PadMode,
    pub tta: bool,
    pub skip_known_tiles: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            inner_side: 1024,
            overlap: 0,
            blend: Blend::None,
            pad_mode: PadMode::Reflect,
            tta: false,
            skip_known_tiles: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| {
            Err(LfpError::Config {
                path: format!("inference.{path}"),
                message,
            })
        };
        if self.inner_side == 0 || !self.inner_side.is_multiple_of(8) {
            return err("inner_side", format!("{} is not a positive multiple of 8", self.inner_side));
        }
        if self.overlap >= self.inner_side {
            return err("overlap", format!("{} must be below inner_side {}", self.overlap, self.inner_side));
        }
        Ok(())
    }
}

/// Stitched predictions for a whole image.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    /// Alpha after forcing known pixels to their trimap values.
    pub alpha: AlphaMatte,
    /// Alpha as stitched from the tiles.
    pub raw_alpha: AlphaMatte,
    pub fg: ColorMap,
    pub bg: ColorMap,
    pub tiles: usize,
    /// Tiles that required a model evaluation.
    pub evaluated: usize,
}

/// Tile start offsets along one axis of length `n`; the last tile is shifted
/// inward so it ends at the border.
fn axis_starts(n: usize, side: usize, stride: usize) -> Vec<usize> {
    if n <= side {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut p = 0;
    loop {
        if p + side >= n {
            out.push(n - side);
            return out;
        }
        out.push(p);
        p += stride;
    }
}

/// Ownership intervals: neighbouring tiles split their overlap at its midpoint.
fn axis_owners(n: usize, side: usize, starts: &[usize]) -> Vec<(usize, usize)> {
    let cut = |i: usize| (starts[i + 1] + starts[i] + side) / 2;
    (0..starts.len())
        .map(|i| {
            let lo = if i == 0 { 0 } else { cut(i - 1) };
            let hi = if i + 1 == starts.len() { n.min(starts[i] + side) } else { cut(i) };
            (lo, hi)
        })
        .collect()
}

/// Covers an `h × w` image with inner windows of side `inner_side`, stepping
/// by `inner_side - overlap`. Tiles are listed row by row.
pub fn plan_tiles(height: usize, width: usize, cfg: &InferenceConfig) -> Result<Vec<PatchGeometry>> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(LfpError::Geometry(format!("cannot tile an empty {height}x{width} image")));
    }
    let s = cfg.inner_side;
    let stride = s - cfg.overlap;
    let ys = axis_starts(height, s, stride);
    let xs = axis_starts(width, s, stride);
    let yo = axis_owners(height, s, &ys);
    let xo = axis_owners(width, s, &xs);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for (&y, &(y0, y1)) in ys.iter().zip(&yo) {
        for (&x, &(x0, x1)) in xs.iter().zip(&xo) {
            let mut g = PatchGeometry::new(width, height, (x, y), s)?;
            g.write = Rect {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            };
            out.push(g);
        }
    }
    Ok(out)
}

fn crop_padded<T: Copy>(grid: &Grid<T>, top: isize, left: isize, side: usize, mode: PadMode) -> Grid<T> {
    match mode {
        PadMode::Reflect => grid.crop_reflect(top, left, side, side),
        PadMode::Replicate => Grid::from_fn(grid.channels(), side, side, |c, y, x| {
            grid.get(c, clamp(top + y as isize, grid.height()), clamp(left + x as isize, grid.width()))
        }),
    }
}

/// The `2s × 2s` context window of a tile, padded where it leaves the image.
pub fn extract_context(image: &Image, trimap: &Trimap, g: &PatchGeometry, pad: PadMode) -> Result<ContextPair> {
    let (left, top) = g.context_origin();
    let side = g.context_side();
    let img = Image::from_grid(crop_padded(image.grid(), top, left, side, pad))?;
    let tri_grid = crop_padded(trimap.grid(), top, left, side, pad);
    let tri = Trimap::new(side, side, tri_grid.data().to_vec())?;
    ContextPair::new(img, tri, *g)
}

fn check_inputs(image: &Image, trimap: &Trimap) -> Result<()> {
    if image.dims() != trimap.dims() {
        return Err(LfpError::Geometry(format!(
            "image is {:?} but trimap is {:?}",
            image.dims(),
            trimap.dims()
        )));
    }
    Ok(())
}

fn has_unknown(trimap: &Trimap, r: Rect) -> bool {
    (r.y..r.y + r.height).any(|y| (r.x..r.x + r.width).any(|x| trimap.at(y, x) == Label::Unknown))
}

/// Predictions implied by the trimap alone, for tiles without unknown pixels.
fn known_tile(image: &Image, trimap: &Trimap, g: &PatchGeometry) -> Result<MattingOutput> {
    let s = g.inner_side;
    let (x, y) = (g.inner_origin.0 as isize, g.inner_origin.1 as isize);
    let tri = trimap.crop_reflect(y, x, s, s);
    let alpha = AlphaMatte::from_fn(s, s, |_, y, x| (tri.at(y, x) == Label::Fg) as u8 as f64);
    let colors = image.crop_reflect(y, x, s, s);
    Ok(MattingOutput {
        alpha,
        fg: colors.clone(),
        bg: colors,
    })
}

fn predict_tile(model: &dyn TileModel, image: &Image, trimap: &Trimap, g: &PatchGeometry, pad: PadMode) -> Result<MattingOutput> {
    match model.predict(&extract_context(image, trimap, g, pad)?) {
        Err(LfpError::ResourceExhausted { side }) => {
            log::warn!("tile at {:?} exhausted resources at side {side}; bisecting", g.inner_origin);
            bisect_tile(model, image, trimap, g, pad)
        }
        other => other,
    }
}

/// Evaluates the four quadrants of a tile separately. A second failure is
/// returned to the caller.
fn bisect_tile(model: &dyn TileModel, image: &Image, trimap: &Trimap, g: &PatchGeometry, pad: PadMode) -> Result<MattingOutput> {
    let s = g.inner_side;
    let half = s / 2;
    if !half.is_multiple_of(8) {
        return Err(LfpError::ResourceExhausted { side: s });
    }
    let mut alpha = vec![0.0; s * s];
    let mut fg = vec![0.0; 3 * s * s];
    let mut bg = vec![0.0; 3 * s * s];
    for (dy, dx) in [(0, 0), (0, half), (half, 0), (half, half)] {
        let origin = (g.inner_origin.0 + dx, g.inner_origin.1 + dy);
        if origin.0 >= g.image_width || origin.1 >= g.image_height {
            continue;
        }
        let q = PatchGeometry::new(g.image_width, g.image_height, origin, half)?;
        let out = model.predict(&extract_context(image, trimap, &q, pad)?)?;
        for y in 0..half {
            for x in 0..half {
                let at = (dy + y) * s + dx + x;
                alpha[at] = out.alpha.at(y, x);
                for c in 0..3 {
                    fg[c * s * s + at] = out.fg.get(c, y, x);
                    bg[c * s * s + at] = out.bg.get(c, y, x);
                }
            }
        }
    }
    Ok(MattingOutput {
        alpha: AlphaMatte::new(s, s, alpha)?,
        fg: Image::new(s, s, fg)?,
        bg: Image::new(s, s, bg)?,
    })
}

/// Per-axis blend weight: 1 in the tile interior, falling linearly over the
/// last `overlap` pixels towards each edge, never reaching 0.
fn ramp(offset: usize, side: usize, overlap: usize) -> f64 {
    let d = offset.min(side - 1 - offset) + 1;
    (d as f64 / (overlap + 1) as f64).min(1.0)
}

/// Runs `model` over every tile and stitches the inner predictions.
pub fn run_tiled(image: &Image, trimap: &Trimap, model: &dyn TileModel, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    check_inputs(image, trimap)?;
    let (h, w) = image.dims();
    let tiles = plan_tiles(h, w, cfg)?;
    let preds: Vec<(MattingOutput, bool)> = tiles
        .par_iter()
        .map(|g| {
            if cfg.skip_known_tiles && !has_unknown(trimap, g.inner_rect()) {
                Ok((known_tile(image, trimap, g)?, false))
            } else {
                Ok((predict_tile(model, image, trimap, g, cfg.pad_mode)?, true))
            }
        })
        .collect::<Result<_>>()?;

    let n = h * w;
    let mut alpha = vec![0.0; n];
    let mut fg = vec![0.0; 3 * n];
    let mut bg = vec![0.0; 3 * n];
    let mut weight = vec![0.0; n];
    for (g, (p, _)) in tiles.iter().zip(&preds) {
        let (ox, oy) = g.inner_origin;
        let region = match cfg.blend {
            Blend::None => g.write,
            Blend::LinearRamp => g.inner_rect(),
        };
        for y in region.y..region.y + region.height {
            for x in region.x..region.x + region.width {
                let (ty, tx) = (y - oy, x - ox);
                let wgt = match cfg.blend {
                    Blend::None => 1.0,
                    Blend::LinearRamp => ramp(ty, g.inner_side, cfg.overlap) * ramp(tx, g.inner_side, cfg.overlap),
                };
                let at = y * w + x;
                weight[at] += wgt;
                alpha[at] += wgt * p.alpha.at(ty, tx);
                for c in 0..3 {
                    fg[c * n + at] += wgt * p.fg.get(c, ty, tx);
                    bg[c * n + at] += wgt * p.bg.get(c, ty, tx);
                }
            }
        }
    }
    for at in 0..n {
        let inv = 1.0 / weight[at];
        alpha[at] *= inv;
        for c in 0..3 {
            fg[c * n + at] *= inv;
            bg[c * n + at] *= inv;
        }
    }
    let clip = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    let raw_alpha = AlphaMatte::new(h, w, clip(alpha))?;
    Ok(InferenceOutput {
        alpha: clamp_by_trimap(&raw_alpha, trimap)?,
        raw_alpha,
        fg: Image::new(h, w, clip(fg))?,
        bg: Image::new(h, w, clip(bg))?,
        tiles: tiles.len(),
        evaluated: preds.iter().filter(|(_, e)| *e).count(),
    })
}

/// The flip group used for test-time augmentation; every element is its own
/// inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];

    pub fn apply<T: Copy>(self, g: &Grid<T>) -> Grid<T> {
        match self {
            Flip::Identity => g.clone(),
            Flip::Horizontal => g.flip_horizontal(),
            Flip::Vertical => g.flip_vertical(),
            Flip::Both => g.flip_horizontal().flip_vertical(),
        }
    }
}

fn mean_of(grids: &[Grid<f64>]) -> Grid<f64> {
    let first = &grids[0];
    let k = grids.len() as f64;
    Grid::from_fn(first.channels(), first.height(), first.width(), |c, y, x| {
        grids.iter().map(|g| g.get(c, y, x)).sum::<f64>() / k
    })
}

/// Averages tiled predictions over the four flips, each mapped back before
/// averaging.
pub fn run_tta(image: &Image, trimap: &Trimap, model: &dyn TileModel, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    check_inputs(image, trimap)?;
    let mut runs = Vec::with_capacity(4);
    for f in Flip::ALL {
        let img = Image::from_grid(f.apply(image.grid()))?;
        let tg = f.apply(trimap.grid());
        let tri = Trimap::new(tg.height(), tg.width(), tg.data().to_vec())?;
        runs.push((f, run_tiled(&img, &tri, model, cfg)?));
    }
    let back = |pick: &dyn Fn(&InferenceOutput) -> &Grid<f64>| -> Vec<Grid<f64>> {
        runs.iter().map(|(f, o)| f.apply(pick(o))).collect()
    };
    let raw_alpha = AlphaMatte::from_grid(mean_of(&back(&|o| o.raw_alpha.grid())))?;
    Ok(InferenceOutput {
        alpha: clamp_by_trimap(&raw_alpha, trimap)?,
        raw_alpha,
        fg: Image::from_grid(mean_of(&back(&|o| o.fg.grid())))?,
        bg: Image::from_grid(mean_of(&back(&|o| o.bg.grid())))?,
        tiles: runs.iter().map(|(_, o)| o.tiles).sum(),
        evaluated: runs.iter().map(|(_, o)| o.evaluated).sum(),
    })
}

/// Tiled inference, with test-time augmentation when enabled.
pub fn infer(image: &Image, trimap: &Trimap, model: &dyn TileModel, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    if cfg.tta {
        run_tta(image, trimap, model, cfg)
    } else {
        run_tiled(image, trimap, model, cfg)
    }
}

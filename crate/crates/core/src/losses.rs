//! Training objectives for both networks.
//!
//! Every loss is built on the autodiff [`Graph`], so each one can be
//! differentiated and gradient-checked on its own.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::domain::{region_masks, AlphaMatte, Mask, Sample, Trimap};
use crate::error::{LfpError, Result};
use crate::tensor::{Graph, LinearMap, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_alpha: f64,
    pub lambda_fb: f64,
    /// Unknown-pixel count beyond which the alpha loss is up-weighted.
    pub gamma: f64,
    /// Number of band-pass pyramid levels; one residual level is added.
    pub pyramid_levels: usize,
    /// Average the recomposition losses over unknown pixels only.
    pub composite_over_unknown: bool,
    /// Apply the pyramid losses to the full patch rather than the unknown
    /// region.
    pub laplacian_full_patch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_alpha: 1.0,
            lambda_fb: 0.25,
            gamma: 5e4,
            pyramid_levels: 4,
            composite_over_unknown: true,
            laplacian_full_patch: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_alpha >= 0.0 && self.lambda_fb >= 0.0) {
            return Err(LfpError::Parameter("loss weights must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(LfpError::Parameter("gamma must be positive".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(LfpError::Parameter("pyramid needs at least one band".into()));
        }
        Ok(())
    }
}

/// A scalar loss node. `empty_region` marks a term that was defined as zero
/// because the region it averages over had no pixels.
#[derive(Clone, Debug)]
pub struct Term {
    pub value: Var,
    pub empty_region: bool,
}

impl Term {
    pub fn item(&self) -> f64 {
        self.value.value().item()
    }
}

/// Network predictions for an inner patch as graph nodes:
/// alpha `[1, s, s]`, foreground and background `[3, s, s]`.
#[derive(Clone, Debug)]
pub struct MattingVars {
    pub alpha: Var,
    pub fg: Var,
    pub bg: Var,
}

/// Per-term values of the matting loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weighted_alpha: f64,
    pub composite: f64,
    pub laplacian_alpha: f64,
    pub alpha: f64,
    pub fb_reconstruction: f64,
    pub fb_composite: f64,
    pub fb_laplacian: f64,
    pub fb: f64,
    pub total: f64,
}

pub struct MattingLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn zero(g: &mut Graph, what: &str) -> Term {
    log::warn!("{what}: empty region, term defined as zero");
    Term {
        value: g.constant(Tensor::scalar(0.0)),
        empty_region: true,
    }
}

/// Mask repeated over `channels` planes.
fn mask_tensor(mask: &Mask, channels: usize) -> Tensor {
    let plane = mask.to_tensor().into_data();
    let (h, w) = mask.dims();
    let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    Tensor::new(vec![channels, h, w], data).expect("mask shape")
}

/// `Σ_{i∈mask} Σ_c |residual| / |mask|`, times `weight`.
fn masked_l1(g: &mut Graph, residual: &Var, mask: &Mask, weight: f64, what: &str) -> Result<Term> {
    let n = mask.count();
    if n == 0 {
        return Ok(zero(g, what));
    }
    let c = residual.shape()[0];
    let (h, w) = mask.dims();
    if residual.shape() != [c, h, w] {
        return Err(LfpError::dim("masked loss", format!("[{c}, {h}, {w}]"), format!("{:?}", residual.shape())));
    }
    let m = g.constant(mask_tensor(mask, c));
    let a = g.abs(residual);
    let am = g.mul(&a, &m)?;
    let s = g.sum(&am);
    Ok(Term {
        value: g.scale(&s, weight / n as f64),
        empty_region: false,
    })
}

fn full_mask(h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |_, _| true)
}

/// Mean absolute error of the context alpha over the unknown pixels of the
/// context trimap.
pub fn propagating_loss(g: &mut Graph, context_alpha: &Var, context_alpha_gt: &AlphaMatte, context_trimap: &Trimap) -> Result<Term> {
    let gt = g.constant(context_alpha_gt.to_tensor());
    let r = g.sub(context_alpha, &gt)?;
    masked_l1(g, &r, &region_masks(context_trimap).unknown, 1.0, "propagating loss")
}

/// `max(1, √(|T^U| / γ))`
pub fn unknown_weight(unknown_count: usize, gamma: f64) -> f64 {
    (unknown_count as f64 / gamma).sqrt().max(1.0)
}

/// Masked mean absolute alpha error, up-weighted for trimaps with large
/// unknown regions.
pub fn weighted_alpha_loss(g: &mut Graph, alpha: &Var, alpha_gt: &AlphaMatte, trimap: &Trimap, gamma: f64) -> Result<Term> {
    let unknown = region_masks(trimap).unknown;
    let weight = unknown_weight(unknown.count(), gamma);
    let gt = g.constant(alpha_gt.to_tensor());
    let r = g.sub(alpha, &gt)?;
    masked_l1(g, &r, &unknown, weight, "weighted alpha loss")
}

fn composite_region(sample: &Sample, over_unknown: bool) -> Mask {
    if over_unknown {
        region_masks(&sample.trimap).unknown
    } else {
        let (h, w) = sample.side();
        full_mask(h, w)
    }
}

/// L1 between the recomposition `αF^gt + (1 − α)B^gt` and the image.
pub fn composite_loss(g: &mut Graph, alpha: &Var, sample: &Sample, over_unknown: bool) -> Result<Term> {
    let fg = sample.fg_gt.to_tensor();
    let bg = sample.bg_gt.to_tensor();
    let mut diff = fg.clone();
    for (d, b) in diff.data_mut().iter_mut().zip(bg.data()) {
        *d -= b;
    }
    let a3 = g.repeat_channels(alpha, 3)?;
    let fb = g.constant(diff);
    let scaled = g.mul(&a3, &fb)?;
    let mut offset = bg;
    for (o, i) in offset.data_mut().iter_mut().zip(sample.image.data()) {
        *o -= i;
    }
    let off = g.constant(offset);
    let r = g.add(&scaled, &off)?;
    masked_l1(g, &r, &composite_region(sample, over_unknown), 1.0, "composite loss")
}

fn pyramid_maps(h: usize, w: usize) -> (Rc<LinearMap>, Rc<LinearMap>, Rc<LinearMap>, Rc<LinearMap>) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    (
        Rc::new(LinearMap::pyramid_down(h)),
        Rc::new(LinearMap::pyramid_down(w)),
        Rc::new(LinearMap::pyramid_up(h2, h)),
        Rc::new(LinearMap::pyramid_up(w2, w)),
    )
}

fn check_pyramid_size(shape: &[usize], levels: usize) -> Result<()> {
    let min = 1usize << levels;
    if shape.len() != 3 || shape[1] < min || shape[2] < min {
        return Err(LfpError::Parameter(format!(
            "a {levels}-level pyramid needs sides of at least {min}, got {shape:?}"
        )));
    }
    Ok(())
}

/// Band-pass levels `0..J` followed by the low-pass residual.
pub fn laplacian_pyramid_var(g: &mut Graph, x: &Var, levels: usize) -> Result<Vec<Var>> {
    check_pyramid_size(x.shape(), levels)?;
    let mut out = Vec::with_capacity(levels + 1);
    let mut cur = x.clone();
    for _ in 0..levels {
        let (h, w) = (cur.shape()[1], cur.shape()[2]);
        let (dr, dc, ur, uc) = pyramid_maps(h, w);
        let down = g.resample(&cur, dr, dc)?;
        let up = g.resample(&down, ur, uc)?;
        out.push(g.sub(&cur, &up)?);
        cur = down;
    }
    out.push(cur);
    Ok(out)
}

pub fn laplacian_pyramid(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    Ok(laplacian_pyramid_var(&mut g, &v, levels)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect())
}

/// Inverse of [`laplacian_pyramid`].
pub fn laplacian_reconstruct(levels: &[Tensor]) -> Result<Tensor> {
    let (last, bands) = levels
        .split_last()
        .ok_or_else(|| LfpError::Parameter("empty pyramid".into()))?;
    let mut cur = last.clone();
    for band in bands.iter().rev() {
        let (_, h, w) = band.dims3()?;
        let (_, _, ur, uc) = pyramid_maps(h, w);
        let mut up = crate::tensor::apply_separable(&cur, &ur, &uc)?;
        up.add_assign(band);
        cur = up;
    }
    Ok(cur)
}

/// `Σ_j 2^j · mean|L^j(x) − L^j(y)|` over all pyramid levels including the
/// residual. The pyramid is linear, so it is taken once, of `x − y`.
pub fn laplacian_loss(g: &mut Graph, x: &Var, y: &Var, levels: usize) -> Result<Var> {
    let d = g.sub(x, y)?;
    laplacian_of_difference(g, &d, levels)
}

fn laplacian_of_difference(g: &mut Graph, d: &Var, levels: usize) -> Result<Var> {
    let pyr = laplacian_pyramid_var(g, d, levels)?;
    let mut total: Option<Var> = None;
    for (j, level) in pyr.iter().enumerate() {
        let a = g.abs(level);
        let m = g.mean(&a);
        let t = g.scale(&m, (1u64 << j) as f64);
        total = Some(match total {
            Some(acc) => g.add(&acc, &t)?,
            None => t,
        });
    }
    Ok(total.expect("at least one level"))
}

fn laplacian_term(g: &mut Graph, x: &Var, gt: Tensor, trimap: &Trimap, cfg: &LossConfig) -> Result<Var> {
    let y = g.constant(gt);
    let mut d = g.sub(x, &y)?;
    if !cfg.laplacian_full_patch {
        let m = g.constant(mask_tensor(&region_masks(trimap).unknown, d.shape()[0]));
        d = g.mul(&d, &m)?;
    }
    laplacian_of_difference(g, &d, cfg.pyramid_levels)
}

pub struct AlphaLoss {
    pub total: Var,
    pub weighted: Term,
    pub composite: Term,
    pub laplacian: Var,
}

/// Weighted alpha L1 + recomposition L1 + alpha pyramid loss.
pub fn alpha_loss(g: &mut Graph, alpha: &Var, sample: &Sample, cfg: &LossConfig) -> Result<AlphaLoss> {
    let weighted = weighted_alpha_loss(g, alpha, &sample.alpha_gt, &sample.trimap, cfg.gamma)?;
    let composite = composite_loss(g, alpha, sample, cfg.composite_over_unknown)?;
    let laplacian = laplacian_term(g, alpha, sample.alpha_gt.to_tensor(), &sample.trimap, cfg)?;
    let s = g.add(&weighted.value, &composite.value)?;
    let total = g.add(&s, &laplacian)?;
    Ok(AlphaLoss {
        total,
        weighted,
        composite,
        laplacian,
    })
}

/// Foreground L1 over `T^FU` plus background L1 over `T^BU`.
pub fn fb_reconstruction_loss(g: &mut Graph, fg: &Var, bg: &Var, sample: &Sample) -> Result<Var> {
    let masks = region_masks(&sample.trimap);
    let fgt = g.constant(sample.fg_gt.to_tensor());
    let rf = g.sub(fg, &fgt)?;
    let tf = masked_l1(g, &rf, &masks.fg_or_unknown, 1.0, "foreground reconstruction loss")?;
    let bgt = g.constant(sample.bg_gt.to_tensor());
    let rb = g.sub(bg, &bgt)?;
    let tb = masked_l1(g, &rb, &masks.bg_or_unknown, 1.0, "background reconstruction loss")?;
    g.add(&tf.value, &tb.value)
}

/// L1 between `α^gt F + (1 − α^gt) B` and the image.
pub fn fb_composite_loss(g: &mut Graph, fg: &Var, bg: &Var, sample: &Sample, over_unknown: bool) -> Result<Term> {
    let a = sample.alpha_gt.to_tensor();
    let (h, w) = sample.side();
    let a3 = Tensor::from_fn3(3, h, w, |_, y, x| a.at3(0, y, x));
    let one_minus = a3.map(|v| 1.0 - v);
    let av = g.constant(a3);
    let bv = g.constant(one_minus);
    let pf = g.mul(fg, &av)?;
    let pb = g.mul(bg, &bv)?;
    let rec = g.add(&pf, &pb)?;
    let img = g.constant(sample.image.to_tensor());
    let r = g.sub(&rec, &img)?;
    masked_l1(g, &r, &composite_region(sample, over_unknown), 1.0, "foreground/background composite loss")
}

/// `Lap(F, F^gt) + Lap(B, B^gt)`
pub fn fb_laplacian_loss(g: &mut Graph, fg: &Var, bg: &Var, sample: &Sample, cfg: &LossConfig) -> Result<Var> {
    let lf = laplacian_term(g, fg, sample.fg_gt.to_tensor(), &sample.trimap, cfg)?;
    let lb = laplacian_term(g, bg, sample.bg_gt.to_tensor(), &sample.trimap, cfg)?;
    g.add(&lf, &lb)
}

/// `λ_α·L_α + λ_FB·(L_FBR + L_FBC + L_LFB)` with its per-term values.
pub fn matting_loss(g: &mut Graph, out: &MattingVars, sample: &Sample, cfg: &LossConfig) -> Result<MattingLoss> {
    cfg.validate()?;
    let a = alpha_loss(g, &out.alpha, sample, cfg)?;
    let fbr = fb_reconstruction_loss(g, &out.fg, &out.bg, sample)?;
    let fbc = fb_composite_loss(g, &out.fg, &out.bg, sample, cfg.composite_over_unknown)?;
    let fbl = fb_laplacian_loss(g, &out.fg, &out.bg, sample, cfg)?;
    let fb1 = g.add(&fbr, &fbc.value)?;
    let fb = g.add(&fb1, &fbl)?;
    let wa = g.scale(&a.total, cfg.lambda_alpha);
    let wf = g.scale(&fb, cfg.lambda_fb);
    let total = g.add(&wa, &wf)?;
    let breakdown = LossBreakdown {
        weighted_alpha: a.weighted.item(),
        composite: a.composite.item(),
        laplacian_alpha: a.laplacian.value().item(),
        alpha: a.total.value().item(),
        fb_reconstruction: fbr.value().item(),
        fb_composite: fbc.item(),
        fb_laplacian: fbl.value().item(),
        fb: fb.value().item(),
        total: total.value().item(),
    };
    Ok(MattingLoss { total, breakdown })
}

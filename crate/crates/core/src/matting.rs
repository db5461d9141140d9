//! The matting network: a deep-stem dilated encoder over the inner patch,
//! fusion of the propagated context features, and a pyramid-pooling decoder
//! that predicts alpha, foreground and background.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::cspp::{Csp, CsppConfig, UpsampleMode};
use crate::domain::{AlphaMatte, ColorMap, Image, Trimap};
use crate::error::{LfpError, Result};
use crate::geometry::network_input;
use crate::losses::MattingVars;
use crate::nn::{Conv, ConvNormAct, Ctx, LayerStyle, ParamSpec, ResidualBlock, Stage};
use crate::propagating::{square_side, TapGeometry};
use crate::tensor::{LinearMap, Var};

pub const PREFIX: &str = "matting";

const INPUT_CHANNELS: usize = 6;
const OUTPUT_CHANNELS: usize = 7;

/// Where the context features enter the matting network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoint {
    /// Concatenated with the encoder output before pyramid pooling.
    PrePpm,
    /// Concatenated with the 6-channel network input.
    Input,
    /// Concatenated with the pyramid pooling output.
    PostPpm,
    /// No context features; the propagating network is not used.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub point: FusionPoint,
    /// Channels of the 1×1 projection of the context features.
    pub width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            point: FusionPoint::PrePpm,
            width: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MattingConfig {
    /// Widths of the stacked 3×3 stem convolutions; the first has stride 2.
    pub stem_widths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub fusion: FusionConfig,
    pub ppm_grids: Vec<usize>,
    /// Channels per pooled branch; a quarter of the input when unset.
    pub ppm_branch_channels: Option<usize>,
    /// Output channels of the convolution that merges the pooled branches.
    pub ppm_width: usize,
    /// Residual decoder blocks: three followed by ×2 upsampling, one
    /// refining at full resolution.
    pub decoder_widths: Vec<usize>,
    /// Widths of the two hidden head convolutions.
    pub head_widths: Vec<usize>,
    pub style: LayerStyle,
}

impl Default for MattingConfig {
    fn default() -> Self {
        Self {
            stem_widths: vec![16, 16, 32],
            stage_widths: vec![32, 64, 128, 128],
            stage_blocks: vec![1, 1, 1, 1],
            strides: vec![1, 2, 1, 1],
            dilations: vec![1, 1, 2, 4],
            fusion: FusionConfig::default(),
            ppm_grids: vec![1, 2, 3, 6],
            ppm_branch_channels: None,
            ppm_width: 64,
            decoder_widths: vec![64, 32, 32, 16],
            head_widths: vec![16, 16],
            style: LayerStyle::default(),
        }
    }
}

impl MattingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_widths.is_empty() {
            return Err(LfpError::Parameter("the stem needs at least one convolution".into()));
        }
        let n = self.stage_widths.len();
        if n < 2 || self.stage_blocks.len() != n || self.strides.len() != n || self.dilations.len() != n {
            return Err(LfpError::Parameter(
                "stage widths, blocks, strides and dilations must have equal length of at least two".into(),
            ));
        }
        if self.strides.iter().product::<usize>() != 2 || self.strides[0] != 1 {
            return Err(LfpError::Parameter(format!(
                "stage strides {:?} must give output stride 8 (one stride-2 stage after the first)",
                self.strides
            )));
        }
        if self.decoder_widths.len() != 4 {
            return Err(LfpError::Parameter("the matting decoder has exactly four residual blocks".into()));
        }
        if self.head_widths.len() != 2 {
            return Err(LfpError::Parameter("the head has three convolutions (two hidden widths)".into()));
        }
        if self.fusion.width == 0 || self.ppm_width == 0 {
            return Err(LfpError::Parameter("fusion and pooling widths must be positive".into()));
        }
        CsppConfig {
            grids: self.ppm_grids.clone(),
            ..CsppConfig::default()
        }
        .validate()
    }
}

/// Encoder output and the skips at strides 1, 2 and 4.
pub struct MattingEncoding {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

/// Inner-patch predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct MattingOutput {
    pub alpha: AlphaMatte,
    pub fg: ColorMap,
    pub bg: ColorMap,
}

impl MattingOutput {
    pub fn from_vars(v: &MattingVars) -> Result<Self> {
        Ok(Self {
            alpha: AlphaMatte::from_tensor(v.alpha.value())?,
            fg: Image::from_tensor(v.fg.value())?,
            bg: Image::from_tensor(v.bg.value())?,
        })
    }
}

/// Crops the inner window out of the context features, resamples it and
/// projects it with a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct ContextFusion {
    projection: Conv,
}

impl ContextFusion {
    pub fn new(context_channels: usize, width: usize) -> Self {
        Self {
            projection: Conv::new(format!("{PREFIX}.fusion.projection"), context_channels, width, 1, 1, 1),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.projection.out_channels()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.projection.specs(out);
    }

    /// Projected context features for the inner window, resampled to
    /// `side × side`.
    pub fn project(&self, cx: &mut Ctx, features: &Var, tap: &TapGeometry, inner_side: usize, side: usize) -> Result<Var> {
        let (start, len) = tap.inner_cells(inner_side)?;
        if features.shape()[1..] != [tap.side, tap.side] {
            return Err(LfpError::Geometry(format!(
                "context features {:?} do not match tap side {}",
                features.shape(),
                tap.side
            )));
        }
        let crop = cx.graph.crop(features, start, start, len, len)?;
        let m = Rc::new(LinearMap::bilinear(len, side));
        let resized = cx.graph.resample(&crop, m.clone(), m)?;
        self.projection.forward(cx, &resized)
    }

    /// `map` concatenated with the projected context features.
    pub fn fuse(&self, cx: &mut Ctx, map: &Var, features: &Var, tap: &TapGeometry, inner_side: usize) -> Result<Var> {
        let side = map.shape()[1];
        let p = self.project(cx, features, tap, inner_side, side)?;
        cx.graph.concat(&[map.clone(), p])
    }
}

/// Context features as seen by the matting network.
pub struct ContextFeatures<'v> {
    pub features: &'v Var,
    pub tap: TapGeometry,
}

#[derive(Clone, Debug)]
pub struct MattingModule {
    cfg: MattingConfig,
    stem: Vec<ConvNormAct>,
    stages: Vec<Stage>,
    fusion: Option<ContextFusion>,
    ppm: Csp,
    ppm_merge: ConvNormAct,
    blocks: Vec<ResidualBlock>,
    head: Vec<ConvNormAct>,
    output: Conv,
}

impl MattingModule {
    /// `context_channels` is the width of the tapped propagating features;
    /// ignored when fusion is disabled.
    pub fn new(cfg: &MattingConfig, context_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let style = cfg.style;
        let point = cfg.fusion.point;
        let fusion = (point != FusionPoint::Disabled).then(|| ContextFusion::new(context_channels, cfg.fusion.width));
        let extra = |p: FusionPoint| if point == p { cfg.fusion.width } else { 0 };

        let enc = format!("{PREFIX}.encoder");
        let mut cin = INPUT_CHANNELS + extra(FusionPoint::Input);
        let mut stem = Vec::new();
        for (i, &w) in cfg.stem_widths.iter().enumerate() {
            let stride = if i == 0 { 2 } else { 1 };
            stem.push(ConvNormAct::new(&format!("{enc}.stem.conv{i}"), cin, w, 3, stride, 1, style));
            cin = w;
        }
        let stem_width = cin;
        let mut stages = Vec::new();
        for i in 0..cfg.stage_widths.len() {
            stages.push(Stage::new(
                &format!("{enc}.stage{i}"),
                cin,
                cfg.stage_widths[i],
                cfg.stage_blocks[i],
                cfg.strides[i],
                cfg.dilations[i],
                style,
            ));
            cin = cfg.stage_widths[i];
        }

        let dec = format!("{PREFIX}.decoder");
        cin += extra(FusionPoint::PrePpm);
        let ppm_cfg = CsppConfig {
            grids: cfg.ppm_grids.clone(),
            csp_branch_channels: cfg.ppm_branch_channels,
            upsample: UpsampleMode::Bilinear,
            ..CsppConfig::default()
        };
        let ppm = Csp::new(&format!("{dec}.ppm"), cin, &ppm_cfg, style);
        let ppm_merge = ConvNormAct::new(&format!("{dec}.ppm.merge"), ppm.out_channels(), cfg.ppm_width, 3, 1, 1, style);
        cin = cfg.ppm_width + extra(FusionPoint::PostPpm);

        // Skips joined after each of the three upsampling blocks: stride 4,
        // stride 2, then the raw input.
        let skip_channels = [cfg.stage_widths[0], stem_width, INPUT_CHANNELS];
        let mut blocks = Vec::new();
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            blocks.push(ResidualBlock::new(&format!("{dec}.block{i}"), cin, w, 1, 1, style));
            cin = w + skip_channels.get(i).copied().unwrap_or(0);
        }
        let mut head = Vec::new();
        for (i, &w) in cfg.head_widths.iter().enumerate() {
            head.push(ConvNormAct::new(&format!("{PREFIX}.head.conv{i}"), cin, w, 3, 1, 1, style));
            cin = w;
        }
        let output = Conv::new(format!("{PREFIX}.head.output"), cin, OUTPUT_CHANNELS, 3, 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            fusion,
            ppm,
            ppm_merge,
            blocks,
            head,
            output,
        })
    }

    pub fn config(&self) -> &MattingConfig {
        &self.cfg
    }

    pub fn uses_context(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.stem {
            c.specs(out);
        }
        for s in &self.stages {
            s.specs(out);
        }
        if let Some(f) = &self.fusion {
            f.specs(out);
        }
        self.ppm.specs(out);
        self.ppm_merge.specs(out);
        for b in &self.blocks {
            b.specs(out);
        }
        for h in &self.head {
            h.specs(out);
        }
        self.output.specs(out);
    }

    fn fuse_at(&self, point: FusionPoint, cx: &mut Ctx, map: Var, ctx: Option<&ContextFeatures>, inner: usize) -> Result<Var> {
        match (&self.fusion, ctx) {
            (Some(f), Some(c)) if self.cfg.fusion.point == point => f.fuse(cx, &map, c.features, &c.tap, inner),
            (Some(_), None) if self.cfg.fusion.point == point => {
                Err(LfpError::Parameter("context fusion is enabled but no context features were given".into()))
            }
            _ => Ok(map),
        }
    }

    /// Deep stem, max-pool and residual stages on a `[6, s, s]` input.
    pub fn matting_encode(&self, cx: &mut Ctx, input: &Var, ctx: Option<&ContextFeatures>) -> Result<MattingEncoding> {
        let s = square_side(input, INPUT_CHANNELS)?;
        if s == 0 || s % 8 != 0 {
            return Err(LfpError::Geometry(format!("inner side {s} must be a positive multiple of 8")));
        }
        let mut x = self.fuse_at(FusionPoint::Input, cx, input.clone(), ctx, s)?;
        for c in &self.stem {
            x = c.forward(cx, &x)?;
        }
        let stride2 = x.clone();
        x = cx.graph.max_pool(&x, 3, 2, 1)?;
        let mut stride4 = None;
        for st in &self.stages {
            x = st.forward(cx, &x)?;
            stride4.get_or_insert_with(|| x.clone());
        }
        Ok(MattingEncoding {
            bottleneck: x,
            skips: vec![input.clone(), stride2, stride4.expect("at least one stage")],
        })
    }

    /// Pyramid pooling, residual upsampling with skips, and the 7-channel
    /// sigmoid head.
    pub fn matting_decode(&self, cx: &mut Ctx, fused: &Var, skips: &[Var], ctx: Option<&ContextFeatures>, inner: usize) -> Result<MattingVars> {
        let p = self.ppm.forward(cx, fused)?;
        let p = self.ppm_merge.forward(cx, &p)?;
        let mut x = self.fuse_at(FusionPoint::PostPpm, cx, p, ctx, inner)?;
        let joins = [&skips[2], &skips[1], &skips[0]];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(cx, &x)?;
            if let Some(skip) = joins.get(i) {
                let (_, h, w) = x.value().dims3()?;
                x = cx.graph.resample(
                    &x,
                    Rc::new(LinearMap::bilinear(h, 2 * h)),
                    Rc::new(LinearMap::bilinear(w, 2 * w)),
                )?;
                if x.shape()[1..] != skip.shape()[1..] {
                    return Err(LfpError::Config {
                        path: format!("{PREFIX}.decoder"),
                        message: format!("block {i} output {:?} cannot join skip {:?}", x.shape(), skip.shape()),
                    });
                }
                x = cx.graph.concat(&[x, (*skip).clone()])?;
            }
        }
        for h in &self.head {
            x = h.forward(cx, &x)?;
        }
        let logits = self.output.forward(cx, &x)?;
        let y = cx.graph.sigmoid(&logits);
        Ok(MattingVars {
            alpha: cx.graph.slice_channels(&y, 0, 1)?,
            fg: cx.graph.slice_channels(&y, 1, 3)?,
            bg: cx.graph.slice_channels(&y, 4, 3)?,
        })
    }

    /// Encode, fuse and decode on a `[6, s, s]` input.
    pub fn forward(&self, cx: &mut Ctx, input: &Var, ctx: Option<&ContextFeatures>) -> Result<MattingVars> {
        let s = input.shape().get(1).copied().unwrap_or(0);
        let enc = self.matting_encode(cx, input, ctx)?;
        let fused = self.fuse_at(FusionPoint::PrePpm, cx, enc.bottleneck, ctx, s)?;
        self.matting_decode(cx, &fused, &enc.skips, ctx, s)
    }

    /// Convenience wrapper taking domain values.
    pub fn forward_inner(&self, cx: &mut Ctx, image: &Image, trimap: &Trimap, ctx: Option<&ContextFeatures>) -> Result<MattingVars> {
        image.same_dims(trimap.grid(), "inner trimap")?;
        let x = cx.graph.constant(network_input(image, trimap));
        self.forward(cx, &x, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{first_zero_gradient, ParamStore};
    use crate::tensor::Tensor;

    pub(crate) fn tiny() -> MattingConfig {
        MattingConfig {
            stem_widths: vec![8, 8, 8],
            stage_widths: vec![8, 8, 8, 8],
            fusion: FusionConfig {
                point: FusionPoint::PrePpm,
                width: 8,
            },
            ppm_width: 8,
            decoder_widths: vec![8, 8, 8, 8],
            head_widths: vec![8, 8],
            ..MattingConfig::default()
        }
    }

    fn build(cfg: &MattingConfig, seed: u64) -> (MattingModule, ParamStore) {
        let m = MattingModule::new(cfg, 5).unwrap();
        let mut specs = Vec::new();
        m.specs(&mut specs);
        (m, ParamStore::initialize(&specs, seed).unwrap())
    }

    fn input(side: usize) -> Tensor {
        Tensor::from_fn3(6, side, side, |c, y, x| ((c * 5 + y * 3 + x * 11) % 13) as f64 / 12.0)
    }

    fn tap(inner: usize) -> TapGeometry {
        TapGeometry {
            level: 2,
            channels: 5,
            side: inner,
            stride: 2,
        }
    }

    fn features(inner: usize) -> Tensor {
        Tensor::from_fn3(5, inner, inner, |c, y, x| ((c + y * 2 + x) as f64 * 0.3).sin())
    }

    #[test]
    fn encoder_strides_and_output_shapes() {
        let (m, p) = build(&tiny(), 1);
        for s in [64, 128] {
            let mut cx = Ctx::inference(&p);
            let x = cx.graph.constant(input(s));
            let enc = m.matting_encode(&mut cx, &x, None).unwrap();
            assert_eq!(enc.bottleneck.shape(), &[8, s / 8, s / 8]);
            let sides: Vec<usize> = enc.skips.iter().map(|v| v.shape()[1]).collect();
            assert_eq!(sides, vec![s, s / 2, s / 4]);
            let f = cx.graph.constant(features(s));
            let ctx = ContextFeatures { features: &f, tap: tap(s) };
            let out = m.forward(&mut cx, &x, Some(&ctx)).unwrap();
            assert_eq!(out.alpha.shape(), &[1, s, s]);
            assert_eq!(out.fg.shape(), &[3, s, s]);
            for v in [&out.alpha, &out.fg, &out.bg] {
                assert!(v.value().data().iter().all(|a| (0.0..=1.0).contains(a)));
            }
        }
        let mut cx = Ctx::inference(&p);
        let x = cx.graph.constant(input(60));
        assert!(matches!(m.matting_encode(&mut cx, &x, None), Err(LfpError::Geometry(_))));
    }

    #[test]
    fn zero_features_fuse_as_bias_pattern() {
        let fusion = ContextFusion::new(5, 3);
        let mut specs = Vec::new();
        fusion.specs(&mut specs);
        let mut p = ParamStore::initialize(&specs, 1).unwrap();
        *p.get_mut("matting.fusion.projection.bias").unwrap() = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut cx = Ctx::inference(&p);
        let map = cx.graph.constant(Tensor::full(&[2, 8, 8], 7.0));
        let zeros = cx.graph.constant(Tensor::zeros(&[5, 64, 64]));
        let y = fusion.fuse(&mut cx, &map, &zeros, &tap(64), 64).unwrap();
        assert_eq!(y.shape(), &[5, 8, 8]);
        for (c, want) in [7.0, 7.0, 0.5, -1.0, 2.0].iter().enumerate() {
            assert!(y.value().data()[c * 64..(c + 1) * 64].iter().all(|v| v == want));
        }
    }

    #[test]
    fn inner_center_delta_lands_at_bottleneck_center() {
        let fusion = ContextFusion::new(1, 1);
        let mut p = ParamStore::default();
        p.insert("matting.fusion.projection.weight", Tensor::full(&[1, 1, 1, 1], 1.0));
        p.insert("matting.fusion.projection.bias", Tensor::zeros(&[1]));
        let inner = 64;
        let t = tap(inner);
        // Context-pixel center of the inner window is (s, s); its 2×2 cell
        // block straddles that point.
        let c = inner / t.stride;
        let feat = Tensor::from_fn3(1, t.side, t.side, |_, y, x| {
            ((y == c - 1 || y == c) && (x == c - 1 || x == c)) as u8 as f64
        });
        let mut cx = Ctx::inference(&p);
        let f = cx.graph.constant(feat);
        let y = fusion.project(&mut cx, &f, &t, inner, inner / 8).unwrap();
        let v = y.value();
        let peak = v.data().iter().cloned().fold(f64::MIN, f64::max);
        let b = inner / 16;
        for (yy, xx) in [(b - 1, b - 1), (b - 1, b), (b, b - 1), (b, b)] {
            assert!((v.at3(0, yy, xx) - peak).abs() < 1e-12);
        }
        for yy in 0..inner / 8 {
            for xx in 0..inner / 8 {
                let central = (b - 1..=b).contains(&yy) && (b - 1..=b).contains(&xx);
                assert_eq!((v.at3(0, yy, xx) - peak).abs() < 1e-12, central);
            }
        }
    }

    #[test]
    fn fusion_misaligned_tap_is_geometry_error() {
        let fusion = ContextFusion::new(5, 3);
        let mut specs = Vec::new();
        fusion.specs(&mut specs);
        let p = ParamStore::initialize(&specs, 1).unwrap();
        let mut cx = Ctx::inference(&p);
        let map = cx.graph.constant(Tensor::zeros(&[2, 8, 8]));
        let f = cx.graph.constant(features(64));
        let bad = TapGeometry { stride: 3, ..tap(64) };
        assert!(matches!(fusion.fuse(&mut cx, &map, &f, &bad, 64), Err(LfpError::Geometry(_))));
    }

    #[test]
    fn fusion_points_change_outputs_and_disabled_ignores_context() {
        let mut outputs = Vec::new();
        for point in [FusionPoint::PrePpm, FusionPoint::Input, FusionPoint::PostPpm, FusionPoint::Disabled] {
            let mut cfg = tiny();
            cfg.fusion.point = point;
            let (m, p) = build(&cfg, 4);
            assert_eq!(m.uses_context(), point != FusionPoint::Disabled);
            let mut cx = Ctx::inference(&p);
            let x = cx.graph.constant(input(64));
            let f = cx.graph.constant(features(64));
            let ctx = ContextFeatures { features: &f, tap: tap(64) };
            let out = m.forward(&mut cx, &x, m.uses_context().then_some(&ctx)).unwrap();
            outputs.push(out.alpha.value().clone());
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert!(outputs[i].max_abs_diff(&outputs[j]) > 0.0);
            }
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let (m, p) = build(&tiny(), 9);
        let mut cx = Ctx::train(&p);
        let x = cx.graph.constant(input(64));
        let f = cx.graph.constant(features(64));
        let ctx = ContextFeatures { features: &f, tap: tap(64) };
        let out = m.forward(&mut cx, &x, Some(&ctx)).unwrap();
        let w = cx.graph.constant(Tensor::from_fn3(3, 64, 64, |c, y, x| ((c + y + 2 * x) as f64).cos()));
        let a = cx.graph.sum(&out.alpha);
        let fw = cx.graph.mul(&out.fg, &w).unwrap();
        let bw = cx.graph.mul(&out.bg, &w).unwrap();
        let fs = cx.graph.sum(&fw);
        let bs = cx.graph.sum(&bw);
        let l1 = cx.graph.add(&a, &fs).unwrap();
        let l = cx.graph.add(&l1, &bs).unwrap();
        let mut g = cx.graph.backward(&l).unwrap();
        let pg = cx.param_grads(&mut g);
        assert_eq!(pg.len(), p.len());
        assert_eq!(first_zero_gradient(&pg), None);
    }
}

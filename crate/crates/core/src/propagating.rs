//! The propagating network: encodes the `2s × 2s` context patch at reduced
//! resolution, spreads evidence across it with the bottleneck, and decodes
//! context features plus a context alpha matte.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::cspp::{Bottleneck, CsppConfig};
use crate::domain::AlphaMatte;
use crate::error::{LfpError, Result};
use crate::geometry::ContextPair;
use crate::nn::{Conv, ConvNormAct, Ctx, LayerStyle, ParamSpec, ParamStore, Stage};
use crate::tensor::{FeatureMap, LinearMap, Var};

pub const PREFIX: &str = "propagating";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagatingConfig {
    /// Bicubic reduction applied to the context patch before the stem.
    pub input_downsample_factor: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub bottleneck: CsppConfig,
    pub decoder_widths: Vec<usize>,
    /// Decoder stage whose output is handed to the matting network. When
    /// unset, the stage whose map spans the context at the inner side.
    pub feature_tap_level: Option<usize>,
    pub style: LayerStyle,
}

impl Default for PropagatingConfig {
    fn default() -> Self {
        Self {
            input_downsample_factor: 2,
            stem_width: 32,
            stage_widths: vec![32, 64, 128, 128],
            stage_blocks: vec![1, 1, 1, 1],
            strides: vec![1, 2, 1, 1],
            dilations: vec![1, 1, 2, 4],
            bottleneck: CsppConfig::default(),
            decoder_widths: vec![64, 32, 32, 16],
            feature_tap_level: None,
            style: LayerStyle::default(),
        }
    }
}

impl PropagatingConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_widths.len();
        if n == 0 || self.stage_blocks.len() != n || self.strides.len() != n || self.dilations.len() != n {
            return Err(LfpError::Parameter(
                "stage widths, blocks, strides and dilations must have equal non-zero length".into(),
            ));
        }
        if !self.dilations.ends_with(&[2, 4]) {
            return Err(LfpError::Parameter(format!(
                "dilation schedule {:?} must end with 2, 4",
                self.dilations
            )));
        }
        if self.decoder_widths.len() != 4 {
            return Err(LfpError::Parameter("the context decoder has exactly four stages".into()));
        }
        if self.input_downsample_factor == 0 || self.stem_width == 0 {
            return Err(LfpError::Parameter("downsample factor and stem width must be positive".into()));
        }
        if self.strides.contains(&0) || self.dilations.contains(&0) {
            return Err(LfpError::Parameter("strides and dilations must be positive".into()));
        }
        self.bottleneck.validate()
    }

    /// Total reduction from the context patch to the bottleneck.
    pub fn output_stride(&self) -> usize {
        4 * self.input_downsample_factor * self.strides.iter().product::<usize>()
    }
}

/// Where a decoder feature map sits in the context patch: cell `(u, v)`
/// covers context pixels `[stride·u, stride·(u+1)) × [stride·v, stride·(v+1))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapGeometry {
    pub level: usize,
    pub channels: usize,
    pub side: usize,
    pub stride: usize,
}

impl TapGeometry {
    pub fn cell_to_context(&self, u: usize, v: usize) -> (usize, usize) {
        (self.stride * u, self.stride * v)
    }

    /// Cell range `[start, start + len)` covering the central inner window of
    /// side `inner_side`.
    pub fn inner_cells(&self, inner_side: usize) -> Result<(usize, usize)> {
        let offset = inner_side / 2;
        if !offset.is_multiple_of(self.stride) || !inner_side.is_multiple_of(self.stride) || self.side * self.stride != 2 * inner_side {
            return Err(LfpError::Geometry(format!(
                "context features at stride {} (side {}) do not align with a {inner_side}px inner window",
                self.stride, self.side
            )));
        }
        Ok((offset / self.stride, inner_side / self.stride))
    }
}

/// Graph-level outputs: context alpha `[1, 2s, 2s]` and tapped features.
#[derive(Clone, Debug)]
pub struct PropagationVars {
    pub context_alpha: Var,
    pub features: Var,
    pub tap: TapGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOutput {
    pub context_alpha: AlphaMatte,
    pub context_features: FeatureMap,
    pub tap: TapGeometry,
}

impl PropagationVars {
    pub fn to_output(&self) -> Result<PropagationOutput> {
        Ok(PropagationOutput {
            context_alpha: AlphaMatte::from_tensor(self.context_alpha.value())?,
            context_features: self.features.value().clone(),
            tap: self.tap,
        })
    }
}

/// Encoder maps kept for the decoder, coarsest first.
pub struct EncoderSkips {
    maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PropagatingModule {
    cfg: PropagatingConfig,
    stem: ConvNormAct,
    stages: Vec<Stage>,
    bottleneck: Bottleneck,
    decoder: Vec<ConvNormAct>,
    head: Conv,
    tap_level: usize,
}

const INPUT_CHANNELS: usize = 6;

impl PropagatingModule {
    pub fn new(cfg: &PropagatingConfig) -> Result<Self> {
        cfg.validate()?;
        let style = cfg.style;
        let enc = format!("{PREFIX}.encoder");
        let stem = ConvNormAct::new(&format!("{enc}.stem"), INPUT_CHANNELS, cfg.stem_width, 3, 2, 1, style);
        let mut cin = cfg.stem_width;
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
        let bottleneck = Bottleneck::new(&format!("{PREFIX}.bottleneck"), cin, &cfg.bottleneck, style)?;
        let skip_channels = [cfg.stage_widths[0], cfg.stem_width, INPUT_CHANNELS, INPUT_CHANNELS];
        let mut cin = bottleneck.out_channels();
        let mut decoder = Vec::new();
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            decoder.push(ConvNormAct::new(&format!("{PREFIX}.decoder.stage{i}"), cin, w, 3, 1, 1, style));
            cin = w + skip_channels[i];
        }
        let head = Conv::new(format!("{PREFIX}.head"), cin, 1, 3, 1, 1);
        let tap_level = match cfg.feature_tap_level {
            Some(l) if l < 4 => l,
            Some(l) => return Err(LfpError::Parameter(format!("feature tap level {l} must be below 4"))),
            None => default_tap_level(cfg)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            bottleneck,
            decoder,
            head,
            tap_level,
        })
    }

    pub fn config(&self) -> &PropagatingConfig {
        &self.cfg
    }

    pub fn tap_level(&self) -> usize {
        self.tap_level
    }

    pub fn tap_channels(&self) -> usize {
        self.decoder[self.tap_level].out_channels()
    }

    /// Tap placement for a given context side.
    pub fn tap_geometry(&self, context_side: usize) -> TapGeometry {
        let side = context_side / self.cfg.output_stride() * (2 << self.tap_level);
        TapGeometry {
            level: self.tap_level,
            channels: self.tap_channels(),
            side,
            stride: context_side / side,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem.specs(out);
        for s in &self.stages {
            s.specs(out);
        }
        self.bottleneck.specs(out);
        for d in &self.decoder {
            d.specs(out);
        }
        self.head.specs(out);
    }

    fn check_context_side(&self, side: usize) -> Result<()> {
        let stride = self.cfg.output_stride();
        if side == 0 || !side.is_multiple_of(stride) {
            return Err(LfpError::Geometry(format!(
                "context side {side} must be a positive multiple of {stride}"
            )));
        }
        Ok(())
    }

    /// Bicubic reduction of the 6-channel input followed by the strided
    /// stem; returns `(reduced input, stem output)`.
    pub fn context_downsample(&self, cx: &mut Ctx, input: &Var) -> Result<(Var, Var)> {
        let side = square_side(input, INPUT_CHANNELS)?;
        self.check_context_side(side)?;
        let small = side / self.cfg.input_downsample_factor;
        let m = Rc::new(LinearMap::bicubic(side, small));
        let reduced = cx.graph.resample(input, m.clone(), m)?;
        let stem = self.stem.forward(cx, &reduced)?;
        Ok((reduced, stem))
    }

    /// Max-pool then the residual stages; returns the bottleneck input and
    /// the first stage's output.
    pub fn context_encode(&self, cx: &mut Ctx, stem: &Var) -> Result<(Var, Var)> {
        let mut x = cx.graph.max_pool(stem, 3, 2, 1)?;
        let mut first = None;
        for s in &self.stages {
            x = s.forward(cx, &x)?;
            first.get_or_insert_with(|| x.clone());
        }
        Ok((x, first.expect("at least one stage")))
    }

    /// Four conv + ×2 upsample stages, each joined with its skip, then the
    /// alpha head.
    pub fn context_decode(&self, cx: &mut Ctx, bottleneck: &Var, skips: EncoderSkips) -> Result<PropagationVars> {
        let mut x = bottleneck.clone();
        let mut tap = None;
        for (i, (stage, skip)) in self.decoder.iter().zip(&skips.maps).enumerate() {
            let y = stage.forward(cx, &x)?;
            let (_, h, w) = y.value().dims3()?;
            let up = cx.graph.resample(
                &y,
                Rc::new(LinearMap::bilinear(h, 2 * h)),
                Rc::new(LinearMap::bilinear(w, 2 * w)),
            )?;
            if skip.shape()[1..] != up.shape()[1..] {
                return Err(LfpError::Config {
                    path: format!("{PREFIX}.decoder"),
                    message: format!(
                        "decoder stage {i} at {:?} cannot join skip at {:?}",
                        &up.shape()[1..],
                        &skip.shape()[1..]
                    ),
                });
            }
            if i == self.tap_level {
                tap = Some(up.clone());
            }
            x = cx.graph.concat(&[up, skip.clone()])?;
        }
        let logits = self.head.forward(cx, &x)?;
        let context_alpha = cx.graph.sigmoid(&logits);
        let context_side = context_alpha.shape()[1];
        Ok(PropagationVars {
            context_alpha,
            features: tap.expect("tap level below four"),
            tap: self.tap_geometry(context_side),
        })
    }

    /// The full pass on a `[6, 2s, 2s]` context input.
    pub fn forward(&self, cx: &mut Ctx, input: &Var) -> Result<PropagationVars> {
        let (reduced, stem) = self.context_downsample(cx, input)?;
        let (enc, first) = self.context_encode(cx, &stem)?;
        let b = self.bottleneck.forward(cx, &enc)?;
        let skips = EncoderSkips {
            maps: vec![first, stem, reduced, input.clone()],
        };
        self.context_decode(cx, &b, skips)
    }

    /// Inference on a context pair.
    pub fn propagate(&self, params: &ParamStore, cp: &ContextPair) -> Result<PropagationOutput> {
        let mut cx = Ctx::inference(params);
        let x = cx.graph.constant(cp.to_input());
        self.forward(&mut cx, &x)?.to_output()
    }
}

fn default_tap_level(cfg: &PropagatingConfig) -> Result<usize> {
    // Stage i has side `context · 2^(i+1) / output_stride`; pick the one at
    // half the context side.
    let stride = cfg.output_stride();
    (0..4)
        .find(|i| 2 << i == stride / 2)
        .ok_or_else(|| LfpError::Config {
            path: format!("{PREFIX}.feature_tap_level"),
            message: format!("no decoder stage lies at half the context side (output stride {stride}); set it explicitly"),
        })
}

pub(crate) fn square_side(x: &Var, channels: usize) -> Result<usize> {
    match x.shape() {
        &[c, h, w] if c == channels && h == w => Ok(h),
        other => Err(LfpError::dim("network input", format!("[{channels}, S, S]"), format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cspp::BottleneckVariant;
    use crate::domain::{Image, Label, Trimap};
    use crate::geometry::PatchGeometry;
    use crate::nn::{first_zero_gradient, NormKind};
    use crate::tensor::Tensor;

    pub(crate) fn tiny() -> PropagatingConfig {
        let mut c = PropagatingConfig {
            stem_width: 8,
            stage_widths: vec![8, 8, 8, 8],
            decoder_widths: vec![8, 8, 8, 8],
            ..PropagatingConfig::default()
        };
        c.bottleneck.aspp_branch_channels = 8;
        c.bottleneck.fuse_channels = 8;
        c
    }

    fn build(cfg: &PropagatingConfig, seed: u64) -> (PropagatingModule, ParamStore) {
        let m = PropagatingModule::new(cfg).unwrap();
        let mut specs = Vec::new();
        m.specs(&mut specs);
        (m, ParamStore::initialize(&specs, seed).unwrap())
    }

    fn pair(side: usize) -> ContextPair {
        let image = Image::from_fn(side, side, |c, y, x| ((c * 7 + y * 3 + x * 5) % 17) as f64 / 16.0);
        let trimap = Trimap::from_fn(side, side, |y, x| match (x + y) % 5 {
            0 => Label::Fg,
            1 => Label::Bg,
            _ => Label::Unknown,
        });
        let g = PatchGeometry::new(side, side, (side / 4, side / 4), side / 2).unwrap();
        ContextPair::new(image, trimap, g).unwrap()
    }

    #[test]
    fn shapes_follow_the_stride_schedule() {
        let (m, p) = build(&tiny(), 1);
        let mut cx = Ctx::inference(&p);
        let x = cx.graph.constant(pair(128).to_input());
        let (reduced, stem) = m.context_downsample(&mut cx, &x).unwrap();
        assert_eq!(reduced.shape(), &[6, 64, 64]);
        assert_eq!(stem.shape(), &[8, 32, 32]);
        let (enc, first) = m.context_encode(&mut cx, &stem).unwrap();
        assert_eq!(enc.shape(), &[8, 8, 8]);
        assert_eq!(first.shape(), &[8, 16, 16]);
        let out = m.forward(&mut cx, &x).unwrap();
        assert_eq!(out.context_alpha.shape(), &[1, 128, 128]);
        assert!(out.context_alpha.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.tap, TapGeometry { level: 2, channels: 8, side: 64, stride: 2 });
        assert_eq!(out.features.shape(), &[8, 64, 64]);
        assert_eq!(out.tap.inner_cells(64).unwrap(), (16, 32));
        assert_eq!(out.tap.cell_to_context(3, 5), (6, 10));
    }

    #[test]
    fn indivisible_context_is_a_geometry_error() {
        let (m, p) = build(&tiny(), 1);
        let mut cx = Ctx::inference(&p);
        let x = cx.graph.constant(Tensor::zeros(&[6, 120, 120]));
        assert!(matches!(m.forward(&mut cx, &x), Err(LfpError::Geometry(_))));
    }

    #[test]
    fn bicubic_stage_keeps_constants_and_ramps() {
        let (m, p) = build(&tiny(), 1);
        let mut cx = Ctx::inference(&p);
        let c = cx.graph.constant(Tensor::full(&[6, 64, 64], 0.4));
        let (r, _) = m.context_downsample(&mut cx, &c).unwrap();
        assert!(r.value().data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        let ramp = cx.graph.constant(Tensor::from_fn3(6, 64, 64, |_, _, x| 0.1 + 0.01 * x as f64));
        let (r, _) = m.context_downsample(&mut cx, &ramp).unwrap();
        for x in 1..31 {
            let want = 0.1 + 0.01 * (2.0 * x as f64 + 0.5);
            assert!((r.value().at3(0, 10, x) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_every_parameter_gets_gradient() {
        let (m, p) = build(&tiny(), 5);
        let cp = pair(128);
        assert_eq!(m.propagate(&p, &cp).unwrap(), m.propagate(&p, &cp).unwrap());
        let mut cx = Ctx::train(&p);
        let x = cx.graph.constant(cp.to_input());
        let out = m.forward(&mut cx, &x).unwrap();
        let w = cx.graph.constant(Tensor::from_fn3(8, 64, 64, |c, y, x| ((c + y * x) as f64).sin()));
        let f = cx.graph.mul(&out.features, &w).unwrap();
        let a = cx.graph.sum(&f);
        let b = cx.graph.sum(&out.context_alpha);
        let l = cx.graph.add(&a, &b).unwrap();
        let mut g = cx.graph.backward(&l).unwrap();
        let pg = cx.param_grads(&mut g);
        assert_eq!(pg.len(), p.len());
        assert_eq!(first_zero_gradient(&pg), None);
    }

    /// Number of stem-output cells that influence one encoder output cell.
    fn encoder_footprint(dilations: &[usize]) -> usize {
        let cfg = tiny();
        let style = LayerStyle::linear();
        let stages: Vec<Stage> = (0..4)
            .map(|i| Stage::new(&format!("s{i}"), 8, 8, 1, cfg.strides[i], dilations[i], style))
            .collect();
        let mut specs = Vec::new();
        for s in &stages {
            s.specs(&mut specs);
        }
        let p = ParamStore::initialize(&specs, 2).unwrap();
        let mut cx = Ctx::train(&p);
        let stem = cx.graph.leaf(Tensor::full(&[8, 64, 64], 1.0), true);
        let mut x = cx.graph.max_pool(&stem, 3, 2, 1).unwrap();
        for s in &stages {
            x = s.forward(&mut cx, &x).unwrap();
        }
        let probe = cx.graph.crop(&x, 8, 8, 1, 1).unwrap();
        let l = cx.graph.sum(&probe);
        let g = cx.graph.backward(&l).unwrap();
        g.get(&stem).unwrap().data().iter().filter(|v| **v != 0.0).count()
    }

    #[test]
    fn dilated_tail_widens_the_receptive_field() {
        let dilated = encoder_footprint(&[1, 1, 2, 4]);
        let plain = encoder_footprint(&[1, 1, 1, 1]);
        assert!(dilated > plain, "{dilated} vs {plain}");
    }

    #[test]
    fn far_corner_reaches_center_features_only_through_global_bottleneck() {
        let delta = |variant: BottleneckVariant| {
            let mut cfg = tiny();
            cfg.style.norm = NormKind::None;
            cfg.bottleneck.variant = variant;
            let (m, p) = build(&cfg, 3);
            // Wide enough that the corner lies outside the conv-only
            // receptive field of the center.
            let side = 768;
            let img = Image::from_fn(side, side, |c, y, x| ((c + y * 3 + x * 7) % 11) as f64 / 10.0);
            let tri = Trimap::filled(side, side, Label::Unknown);
            let g = PatchGeometry::new(side, side, (side / 4, side / 4), side / 2).unwrap();
            let base = ContextPair::new(img.clone(), tri.clone(), g).unwrap();
            let mut data = img.data().to_vec();
            data[0] = 1.0 - data[0];
            let moved = ContextPair::new(Image::new(side, side, data).unwrap(), tri, g).unwrap();
            let a = m.propagate(&p, &base).unwrap().context_features;
            let b = m.propagate(&p, &moved).unwrap().context_features;
            let c = a.shape()[1] / 2;
            (0..a.shape()[0]).map(|ch| (a.at3(ch, c, c) - b.at3(ch, c, c)).abs()).sum::<f64>()
        };
        assert!(delta(BottleneckVariant::Cspp) > 1e-9);
        assert_eq!(delta(BottleneckVariant::None), 0.0);
    }
}

//! Center-surround pyramid pooling and the alternative bottlenecks.
//!
//! Block-wise average pooling on several grids mixes statistics from the
//! whole map into every location (CSP); the result then passes through
//! atrous spatial pyramid pooling (ASPP).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{LfpError, Result};
use crate::nn::{Conv, ConvNormAct, Ctx, LayerStyle, ParamSpec};
use crate::tensor::{apply_separable, FeatureMap, LinearMap, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckVariant {
    /// A 1×1 linear projection.
    None,
    /// One global self-attention block.
    Nonlocal,
    Aspp,
    /// CSP followed by ASPP.
    Cspp,
}

impl BottleneckVariant {
    pub const ALL: [BottleneckVariant; 4] = [Self::None, Self::Nonlocal, Self::Aspp, Self::Cspp];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Nonlocal => "nonlocal",
            Self::Aspp => "aspp",
            Self::Cspp => "cspp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

impl UpsampleMode {
    pub fn map(self, input: usize, output: usize) -> LinearMap {
        match self {
            Self::Bilinear => LinearMap::bilinear(input, output),
            Self::Nearest => LinearMap::nearest(input, output),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsppConfig {
    pub variant: BottleneckVariant,
    /// Block grids of the center-surround pooling.
    pub grids: Vec<usize>,
    /// Output channels of each pooled branch; a quarter of the input when
    /// unset.
    pub csp_branch_channels: Option<usize>,
    /// Dilation rates of the ASPP 3×3 branches.
    pub rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    pub fuse_channels: usize,
    pub upsample: UpsampleMode,
    /// Project the six concatenated ASPP branches to `fuse_channels`; when
    /// off, the concatenation itself is the output.
    pub aspp_fusion: bool,
}

impl Default for CsppConfig {
    fn default() -> Self {
        Self {
            variant: BottleneckVariant::Cspp,
            grids: vec![1, 2, 3, 6],
            csp_branch_channels: None,
            rates: vec![3, 7, 12, 18],
            aspp_branch_channels: 64,
            fuse_channels: 64,
            upsample: UpsampleMode::Bilinear,
            aspp_fusion: true,
        }
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    !v.is_empty() && v[0] > 0 && v.windows(2).all(|w| w[1] > w[0])
}

impl CsppConfig {
    pub fn validate(&self) -> Result<()> {
        if !strictly_increasing(&self.grids) {
            return Err(LfpError::Parameter(format!("pooling grids {:?} must be strictly increasing positives", self.grids)));
        }
        if !strictly_increasing(&self.rates) {
            return Err(LfpError::Parameter(format!("dilation rates {:?} must be strictly increasing positives", self.rates)));
        }
        if self.aspp_branch_channels == 0 || self.fuse_channels == 0 || self.csp_branch_channels == Some(0) {
            return Err(LfpError::Parameter("bottleneck channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channels emitted by every variant.
    pub fn out_channels(&self) -> usize {
        if self.aspp_fusion {
            self.fuse_channels
        } else {
            (self.rates.len() + 2) * self.aspp_branch_channels
        }
    }
}

fn check_grid(grid: usize, h: usize, w: usize) -> Result<()> {
    if grid == 0 || grid > h.min(w) {
        return Err(LfpError::Parameter(format!("pooling grid {grid} exceeds the {h}x{w} feature map")));
    }
    Ok(())
}

fn check_channels(x: &Var, expected: usize, what: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        &[c, h, w] if c == expected => Ok((h, w)),
        other => Err(LfpError::dim(what, format!("[{expected}, H, W]"), format!("{other:?}"))),
    }
}

/// Mean of each cell of a `grid × grid` block partition; boundaries at
/// `round(k·H/grid)` and `round(k·W/grid)`.
pub fn csp_pool(f: &FeatureMap, grid: usize) -> Result<FeatureMap> {
    let (_, h, w) = f.dims3()?;
    check_grid(grid, h, w)?;
    apply_separable(f, &LinearMap::block_mean(h, grid)?, &LinearMap::block_mean(w, grid)?)
}

/// Center-surround pooling: the input concatenated with one pooled,
/// projected and re-upsampled branch per grid.
#[derive(Clone, Debug)]
pub struct Csp {
    in_channels: usize,
    grids: Vec<usize>,
    branches: Vec<ConvNormAct>,
    upsample: UpsampleMode,
}

impl Csp {
    pub fn new(name: &str, in_channels: usize, cfg: &CsppConfig, style: LayerStyle) -> Self {
        let bc = cfg.csp_branch_channels.unwrap_or((in_channels / 4).max(1));
        let branches = cfg
            .grids
            .iter()
            .map(|g| ConvNormAct::pooled(&format!("{name}.grid{g}"), in_channels, bc, style))
            .collect();
        Self {
            in_channels,
            grids: cfg.grids.clone(),
            branches,
            upsample: cfg.upsample,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.branches.iter().map(ConvNormAct::out_channels).sum::<usize>()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.branches {
            b.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let (h, w) = check_channels(x, self.in_channels, "center-surround pooling input")?;
        let mut parts = vec![x.clone()];
        for (&grid, branch) in self.grids.iter().zip(&self.branches) {
            check_grid(grid, h, w)?;
            let pooled = cx.graph.resample(
                x,
                Rc::new(LinearMap::block_mean(h, grid)?),
                Rc::new(LinearMap::block_mean(w, grid)?),
            )?;
            let p = branch.forward(cx, &pooled)?;
            let up = cx.graph.resample(
                &p,
                Rc::new(self.upsample.map(grid, h)),
                Rc::new(self.upsample.map(grid, w)),
            )?;
            parts.push(up);
        }
        cx.graph.concat(&parts)
    }
}

/// 1×1 branch, global-pool branch and dilated 3×3 branches, concatenated and
/// optionally fused by a 1×1 projection.
#[derive(Clone, Debug)]
pub struct Aspp {
    in_channels: usize,
    pointwise: ConvNormAct,
    global: ConvNormAct,
    dilated: Vec<ConvNormAct>,
    fuse: Option<ConvNormAct>,
}

impl Aspp {
    pub fn new(name: &str, in_channels: usize, cfg: &CsppConfig, style: LayerStyle) -> Self {
        let bc = cfg.aspp_branch_channels;
        let dilated = cfg
            .rates
            .iter()
            .map(|&r| ConvNormAct::new(&format!("{name}.rate{r}"), in_channels, bc, 3, 1, r, style))
            .collect();
        let fuse = cfg.aspp_fusion.then(|| {
            ConvNormAct::new(&format!("{name}.fuse"), (cfg.rates.len() + 2) * bc, cfg.fuse_channels, 1, 1, 1, style)
        });
        Self {
            in_channels,
            pointwise: ConvNormAct::new(&format!("{name}.pointwise"), in_channels, bc, 1, 1, 1, style),
            global: ConvNormAct::pooled(&format!("{name}.global"), in_channels, bc, style),
            dilated,
            fuse,
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.fuse {
            Some(f) => f.out_channels(),
            None => (self.dilated.len() + 2) * self.pointwise.out_channels(),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.pointwise.specs(out);
        self.global.specs(out);
        for d in &self.dilated {
            d.specs(out);
        }
        if let Some(f) = &self.fuse {
            f.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let (h, w) = check_channels(x, self.in_channels, "ASPP input")?;
        let mut parts = vec![self.pointwise.forward(cx, x)?];
        let pooled = cx.graph.resample(
            x,
            Rc::new(LinearMap::block_mean(h, 1)?),
            Rc::new(LinearMap::block_mean(w, 1)?),
        )?;
        let g = self.global.forward(cx, &pooled)?;
        parts.push(cx.graph.resample(&g, Rc::new(LinearMap::broadcast(h)), Rc::new(LinearMap::broadcast(w)))?);
        for d in &self.dilated {
            parts.push(d.forward(cx, x)?);
        }
        let cat = cx.graph.concat(&parts)?;
        match &self.fuse {
            Some(f) => f.forward(cx, &cat),
            None => Ok(cat),
        }
    }
}

/// Embedded-Gaussian self-attention over all spatial positions with a
/// residual connection.
#[derive(Clone, Debug)]
pub struct NonLocal {
    in_channels: usize,
    inner: usize,
    theta: Conv,
    phi: Conv,
    value: Conv,
    out: Conv,
}

impl NonLocal {
    pub fn new(name: &str, in_channels: usize) -> Self {
        let inner = (in_channels / 2).max(1);
        Self {
            in_channels,
            inner,
            theta: Conv::new(format!("{name}.theta"), in_channels, inner, 1, 1, 1),
            phi: Conv::new(format!("{name}.phi"), in_channels, inner, 1, 1, 1),
            value: Conv::new(format!("{name}.value"), in_channels, inner, 1, 1, 1),
            out: Conv::new(format!("{name}.out"), inner, in_channels, 1, 1, 1),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for c in [&self.theta, &self.phi, &self.value, &self.out] {
            c.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let (h, w) = check_channels(x, self.in_channels, "non-local input")?;
        let n = h * w;
        let k = self.inner;
        let t = self.theta.forward(cx, x)?;
        let t = cx.graph.reshape(&t, vec![k, n])?;
        let p = self.phi.forward(cx, x)?;
        let p = cx.graph.reshape(&p, vec![k, n])?;
        let v = self.value.forward(cx, x)?;
        let v = cx.graph.reshape(&v, vec![k, n])?;
        let tt = cx.graph.transpose(&t)?;
        let scores = cx.graph.matmul(&tt, &p)?;
        let attn = cx.graph.softmax_rows(&scores)?;
        let at = cx.graph.transpose(&attn)?;
        let y = cx.graph.matmul(&v, &at)?;
        let y = cx.graph.reshape(&y, vec![k, h, w])?;
        let y = self.out.forward(cx, &y)?;
        cx.graph.add(x, &y)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Projection(Conv),
    NonLocal(NonLocal, ConvNormAct),
    Aspp(Aspp),
    Cspp(Csp, Aspp),
}

/// The bottleneck between an encoder and its decoder.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    variant: BottleneckVariant,
    out_channels: usize,
    body: Body,
}

impl Bottleneck {
    pub fn new(name: &str, in_channels: usize, cfg: &CsppConfig, style: LayerStyle) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_channels();
        let body = match cfg.variant {
            BottleneckVariant::None => Body::Projection(Conv::new(format!("{name}.projection"), in_channels, out, 1, 1, 1)),
            BottleneckVariant::Nonlocal => Body::NonLocal(
                NonLocal::new(&format!("{name}.nonlocal"), in_channels),
                ConvNormAct::new(&format!("{name}.projection"), in_channels, out, 1, 1, 1, style),
            ),
            BottleneckVariant::Aspp => Body::Aspp(Aspp::new(&format!("{name}.aspp"), in_channels, cfg, style)),
            BottleneckVariant::Cspp => {
                let csp = Csp::new(&format!("{name}.csp"), in_channels, cfg, style);
                let aspp = Aspp::new(&format!("{name}.aspp"), csp.out_channels(), cfg, style);
                Body::Cspp(csp, aspp)
            }
        };
        Ok(Self {
            variant: cfg.variant,
            out_channels: out,
            body,
        })
    }

    pub fn variant(&self) -> BottleneckVariant {
        self.variant
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        match &self.body {
            Body::Projection(c) => c.specs(out),
            Body::NonLocal(n, p) => {
                n.specs(out);
                p.specs(out);
            }
            Body::Aspp(a) => a.specs(out),
            Body::Cspp(c, a) => {
                c.specs(out);
                a.specs(out);
            }
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        match &self.body {
            Body::Projection(c) => c.forward(cx, x),
            Body::NonLocal(n, p) => {
                let y = n.forward(cx, x)?;
                p.forward(cx, &y)
            }
            Body::Aspp(a) => a.forward(cx, x),
            Body::Cspp(c, a) => {
                let y = c.forward(cx, x)?;
                a.forward(cx, &y)
            }
        }
    }
}

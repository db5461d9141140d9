use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvShape};
use super::{LinearMap, Tensor};
use crate::error::{LfpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride-1 convolution whose zero padding keeps the spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
///
/// Cloning is cheap. When gradients are disabled the handle owns its value
/// outright, so intermediate activations are freed as soon as they go out of
/// scope.
#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: usize,
    value: Tensor,
    op: Option<Op>,
    requires_grad: bool,
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Normalize {
        x: Var,
        rstd: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Resample {
        x: Var,
        rows: Rc<LinearMap>,
        cols: Rc<LinearMap>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    RepeatChannels(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients keyed by the node that received them.
#[derive(Default)]
pub struct Grads(HashMap<usize, Tensor>);

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.0.get(&var.id())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.0.remove(&var.id())
    }
}

/// Define-by-run tape.
pub struct Graph {
    tape: Vec<Var>,
    grad_enabled: bool,
    next_id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            tape: Vec::new(),
            grad_enabled: true,
            next_id: 0,
        }
    }

    /// A graph that records nothing; only forward values are computed.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn node(&mut self, value: Tensor, op: Option<Op>, requires_grad: bool) -> Var {
        let id = self.next_id;
        self.next_id += 1;
        let requires_grad = requires_grad && self.grad_enabled;
        let var = Var(Rc::new(Node {
            id,
            value,
            op: if requires_grad { op } else { None },
            requires_grad,
        }));
        if requires_grad {
            self.tape.push(var.clone());
        }
        var
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[&Var]) -> Var {
        let rg = parents.iter().any(|p| p.requires_grad());
        self.node(value, Some(op), rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.node(value, None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        a.value().same_shape(b.value(), "add")?;
        let mut v = a.value().clone();
        v.add_assign(b.value());
        Ok(self.push(v, Op::Add(a.clone(), b.clone()), &[a, b]))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        a.value().same_shape(b.value(), "sub")?;
        let mut v = a.value().clone();
        for (x, y) in v.data_mut().iter_mut().zip(b.value().data()) {
            *x -= y;
        }
        Ok(self.push(v, Op::Sub(a.clone(), b.clone()), &[a, b]))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        a.value().same_shape(b.value(), "mul")?;
        let mut v = a.value().clone();
        for (x, y) in v.data_mut().iter_mut().zip(b.value().data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a.clone(), b.clone()), &[a, b]))
    }

    pub fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = a.value().map(|x| x * k);
        self.push(v, Op::Scale(a.clone(), k), &[a])
    }

    pub fn add_scalar(&mut self, a: &Var, k: f64) -> Var {
        let v = a.value().map(|x| x + k);
        self.push(v, Op::AddScalar(a.clone()), &[a])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: &Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(&n, 1.0)
    }

    pub fn abs(&mut self, a: &Var) -> Var {
        let v = a.value().map(f64::abs);
        self.push(v, Op::Abs(a.clone()), &[a])
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let v = a.value().map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.clone()), &[a])
    }

    pub fn sigmoid(&mut self, a: &Var) -> Var {
        let v = a.value().map(sigmoid);
        self.push(v, Op::Sigmoid(a.clone()), &[a])
    }

    pub fn sum(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(a.value().sum());
        self.push(v, Op::Sum(a.clone()), &[a])
    }

    pub fn mean(&mut self, a: &Var) -> Var {
        let n = a.value().len() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        let s = conv_shape(x.value(), w.value(), spec)?;
        if let Some(b) = b {
            if b.value().shape() != [s.cout] {
                return Err(LfpError::dim("conv2d bias", format!("[{}]", s.cout), format!("{:?}", b.shape())));
            }
        }
        let out = kernels::conv2d_forward(x.value().data(), w.value().data(), b.map(|b| b.value().data()), &s, spec);
        let v = Tensor::new(vec![s.cout, s.ho, s.wo], out)?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push(
            v,
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
                spec,
            },
            &parents,
        ))
    }

    /// Standardizes `chunks` equal contiguous slices of `x` (group
    /// normalization over `[C, H, W]`, weight standardization over
    /// `[Cout, fan_in]`).
    pub fn normalize_chunks(&mut self, x: &Var, chunks: usize, eps: f64) -> Result<Var> {
        if chunks == 0 || !x.value().len().is_multiple_of(chunks) {
            return Err(LfpError::Parameter(format!(
                "cannot split {} values into {chunks} chunks",
                x.value().len()
            )));
        }
        let mut out = Tensor::zeros(x.shape());
        let rstd = kernels::normalize_chunks(x.value().data(), chunks, eps, out.data_mut());
        Ok(self.push(out, Op::Normalize { x: x.clone(), rstd }, &[x]))
    }

    /// Per-channel `scale·x + shift` on a `[C, H, W]` map.
    pub fn channel_affine(&mut self, x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(LfpError::dim("channel affine", format!("[{c}]"), format!("{:?}", scale.shape())));
        }
        let mut v = x.value().clone();
        for (ci, plane) in v.data_mut().chunks_mut(h * w).enumerate() {
            let (k, b) = (scale.value().data()[ci], shift.value().data()[ci]);
            for p in plane {
                *p = *p * k + b;
            }
        }
        Ok(self.push(
            v,
            Op::ChannelAffine {
                x: x.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
            },
            &[x, scale, shift],
        ))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| LfpError::Parameter("concat of nothing".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(LfpError::dim("concat", format!("[_, {tail:?}]"), format!("{:?}", p.shape())));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.value().data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let v = Tensor::new(shape, data)?;
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(self.push(v, Op::Concat(parts.to_vec()), &refs))
    }

    /// Spatial window `[top, top+h) × [left, left+w)` of a `[C, H, W]` map.
    pub fn crop(&mut self, x: &Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = x.value().dims3()?;
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(LfpError::Geometry(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {ih}x{iw}"
            )));
        }
        let src = x.value().data();
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in top..top + h {
                let row = (ci * ih + y) * iw;
                data.extend_from_slice(&src[row + left..row + left + w]);
            }
        }
        let v = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(v, Op::Crop { x: x.clone(), top, left }, &[x]))
    }

    /// Separable linear resampling: `rows` acts on H, `cols` on W.
    pub fn resample(&mut self, x: &Var, rows: Rc<LinearMap>, cols: Rc<LinearMap>) -> Result<Var> {
        let v = apply_separable(x.value(), &rows, &cols)?;
        Ok(self.push(v, Op::Resample { x: x.clone(), rows, cols }, &[x]))
    }

    pub fn max_pool(&mut self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        let (out, argmax, ho, wo) = kernels::max_pool(x.value().data(), c, h, w, kernel, stride, padding);
        if ho == 0 || wo == 0 {
            return Err(LfpError::Geometry(format!("max pool kernel {kernel} too large for {h}x{w}")));
        }
        let v = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool { x: x.clone(), argmax }, &[x]))
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = dims2(a.value())?;
        let (k2, n) = dims2(b.value())?;
        if k != k2 {
            return Err(LfpError::dim("matmul", format!("inner {k}"), k2));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.value().data(), k, 1, b.value().data(), n, 1, 0.0, &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a.clone(), b.clone()), &[a, b]))
    }

    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        let (m, n) = dims2(a.value())?;
        let v = Tensor::new(vec![n, m], transpose(a.value().data(), m, n))?;
        Ok(self.push(v, Op::Transpose(a.clone()), &[a]))
    }

    pub fn softmax_rows(&mut self, a: &Var) -> Result<Var> {
        let (_, n) = dims2(a.value())?;
        let mut v = a.value().clone();
        for row in v.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.push(v, Op::SoftmaxRows(a.clone()), &[a]))
    }

    pub fn reshape(&mut self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let v = a.value().clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a.clone()), &[a]))
    }

    /// Channels `[start, start + len)` of a `[C, H, W]` map.
    pub fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        if len == 0 || start + len > c {
            return Err(LfpError::dim("slice_channels", format!("at most {c} channels"), start + len));
        }
        let plane = h * w;
        let data = x.value().data()[start * plane..(start + len) * plane].to_vec();
        let v = Tensor::new(vec![len, h, w], data)?;
        Ok(self.push(v, Op::SliceChannels { x: x.clone(), start }, &[x]))
    }

    /// Broadcasts a `[1, H, W]` map to `[n, H, W]`.
    pub fn repeat_channels(&mut self, a: &Var, n: usize) -> Result<Var> {
        let (c, h, w) = a.value().dims3()?;
        if c != 1 {
            return Err(LfpError::dim("repeat_channels", "[1, H, W]", format!("{:?}", a.shape())));
        }
        let mut data = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            data.extend_from_slice(a.value().data());
        }
        let v = Tensor::new(vec![n, h, w], data)?;
        Ok(self.push(v, Op::RepeatChannels(a.clone()), &[a]))
    }

    /// Reverse-mode sweep from a scalar. Leaves that require gradients keep
    /// theirs in the returned map.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        if loss.value().len() != 1 {
            return Err(LfpError::dim("backward", "scalar", format!("{:?}", loss.shape())));
        }
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        if !loss.requires_grad() {
            return Ok(Grads(grads));
        }
        grads.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
        for var in self.tape.iter().rev() {
            if var.id() > loss.id() {
                continue;
            }
            let node = &var.0;
            let Some(op) = &node.op else { continue };
            let Some(g) = grads.remove(&node.id) else { continue };
            for (parent, pg) in backward_op(op, &node.value, g)? {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(Grads(grads))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        other => Err(LfpError::dim("matrix", "[M, N]", format!("{other:?}"))),
    }
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn conv_shape(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<ConvShape> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, wcin, kh, kw) = match w.shape() {
        &[a, b, c, d] => (a, b, c, d),
        other => return Err(LfpError::dim("conv2d weight", "[Cout, Cin, kh, kw]", format!("{other:?}"))),
    };
    if wcin != cin {
        return Err(LfpError::dim("conv2d input channels", wcin, cin));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(LfpError::Parameter("conv stride and dilation must be positive".into()));
    }
    let ho = kernels::conv_out_len(h, kh, spec);
    let wo = kernels::conv_out_len(wd, kw, spec);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(ConvShape {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
        }),
        _ => Err(LfpError::Geometry(format!(
            "{kh}x{kw} kernel (dilation {}) does not fit a {h}x{wd} map",
            spec.dilation
        ))),
    }
}

pub(crate) fn apply_separable(x: &Tensor, rows: &LinearMap, cols: &LinearMap) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if rows.input() != h || cols.input() != w {
        return Err(LfpError::dim(
            "resample",
            format!("{}x{}", rows.input(), cols.input()),
            format!("{h}x{w}"),
        ));
    }
    let (ho, wo) = (rows.output(), cols.output());
    let mut tmp = vec![0.0; c * h * wo];
    for (src, dst) in x.data().chunks(w).zip(tmp.chunks_mut(wo)) {
        cols.apply(src, dst);
    }
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let t = &tmp[ci * h * wo..(ci + 1) * h * wo];
        let o = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for (oy, taps) in rows.rows().iter().enumerate() {
            let orow = &mut o[oy * wo..(oy + 1) * wo];
            for &(iy, wt) in taps {
                for (d, s) in orow.iter_mut().zip(&t[iy * wo..(iy + 1) * wo]) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

fn apply_separable_adjoint(g: &Tensor, rows: &LinearMap, cols: &LinearMap) -> Tensor {
    let (c, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (rows.input(), cols.input());
    let mut tmp = vec![0.0; c * h * wo];
    for ci in 0..c {
        let gs = &g.data()[ci * ho * wo..(ci + 1) * ho * wo];
        let t = &mut tmp[ci * h * wo..(ci + 1) * h * wo];
        for (oy, taps) in rows.rows().iter().enumerate() {
            let grow = &gs[oy * wo..(oy + 1) * wo];
            for &(iy, wt) in taps {
                for (d, s) in t[iy * wo..(iy + 1) * wo].iter_mut().zip(grow) {
                    *d += wt * s;
                }
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for (src, dst) in tmp.chunks(wo).zip(out.chunks_mut(w)) {
        cols.apply_adjoint(src, dst);
    }
    Tensor::new(vec![c, h, w], out).expect("adjoint shape")
}

fn backward_op(op: &Op, out: &Tensor, g: Tensor) -> Result<Vec<(Var, Tensor)>> {
    Ok(match op {
        Op::Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g)],
        Op::Sub(a, b) => {
            let neg = g.map(|v| -v);
            vec![(a.clone(), g), (b.clone(), neg)]
        }
        Op::Mul(a, b) => {
            let mut ga = g.clone();
            for (x, y) in ga.data_mut().iter_mut().zip(b.value().data()) {
                *x *= y;
            }
            let mut gb = g;
            for (x, y) in gb.data_mut().iter_mut().zip(a.value().data()) {
                *x *= y;
            }
            vec![(a.clone(), ga), (b.clone(), gb)]
        }
        Op::Scale(a, k) => vec![(a.clone(), g.map(|v| v * k))],
        Op::AddScalar(a) => vec![(a.clone(), g)],
        Op::Abs(a) => {
            let mut ga = g;
            for (x, v) in ga.data_mut().iter_mut().zip(a.value().data()) {
                *x *= if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            vec![(a.clone(), ga)]
        }
        Op::Relu(a) => {
            let mut ga = g;
            for (x, v) in ga.data_mut().iter_mut().zip(a.value().data()) {
                if *v <= 0.0 {
                    *x = 0.0;
                }
            }
            vec![(a.clone(), ga)]
        }
        Op::Sigmoid(a) => {
            let mut ga = g;
            for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                *x *= y * (1.0 - y);
            }
            vec![(a.clone(), ga)]
        }
        Op::Sum(a) => vec![(a.clone(), Tensor::full(a.shape(), g.item()))],
        Op::Conv2d { x, w, b, spec } => {
            let s = conv_shape(x.value(), w.value(), *spec)?;
            let (dx, dw, db) = kernels::conv2d_backward(
                x.value().data(),
                w.value().data(),
                g.data(),
                &s,
                *spec,
                x.requires_grad(),
                w.requires_grad(),
            );
            let mut res = Vec::with_capacity(3);
            if let Some(dx) = dx {
                res.push((x.clone(), Tensor::new(x.shape().to_vec(), dx)?));
            }
            if let Some(dw) = dw {
                res.push((w.clone(), Tensor::new(w.shape().to_vec(), dw)?));
            }
            if let Some(b) = b {
                res.push((b.clone(), Tensor::new(vec![s.cout], db)?));
            }
            res
        }
        Op::Normalize { x, rstd } => {
            let dx = kernels::normalize_chunks_backward(out.data(), rstd, g.data());
            vec![(x.clone(), Tensor::new(x.shape().to_vec(), dx)?)]
        }
        Op::ChannelAffine { x, scale, shift } => {
            let (c, h, w) = x.value().dims3()?;
            let plane = h * w;
            let mut gx = g.clone();
            let mut gs = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ci in 0..c {
                let k = scale.value().data()[ci];
                let r = ci * plane..(ci + 1) * plane;
                for (gv, xv) in g.data()[r.clone()].iter().zip(&x.value().data()[r.clone()]) {
                    gs[ci] += gv * xv;
                    gb[ci] += gv;
                }
                for v in &mut gx.data_mut()[r] {
                    *v *= k;
                }
            }
            vec![
                (x.clone(), gx),
                (scale.clone(), Tensor::new(vec![c], gs)?),
                (shift.clone(), Tensor::new(vec![c], gb)?),
            ]
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let n = p.value().len();
                let slice = g.data()[offset..offset + n].to_vec();
                offset += n;
                res.push((p.clone(), Tensor::new(p.shape().to_vec(), slice)?));
            }
            res
        }
        Op::Crop { x, top, left } => {
            let (c, ih, iw) = x.value().dims3()?;
            let (h, w) = (out.shape()[1], out.shape()[2]);
            let mut gx = Tensor::zeros(&[c, ih, iw]);
            let dst = gx.data_mut();
            for ci in 0..c {
                for y in 0..h {
                    let src = &g.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
                    let row = (ci * ih + top + y) * iw + left;
                    dst[row..row + w].copy_from_slice(src);
                }
            }
            vec![(x.clone(), gx)]
        }
        Op::Resample { x, rows, cols } => vec![(x.clone(), apply_separable_adjoint(&g, rows, cols))],
        Op::MaxPool { x, argmax } => {
            let mut gx = Tensor::zeros(x.shape());
            let dst = gx.data_mut();
            for (gv, &i) in g.data().iter().zip(argmax) {
                dst[i] += gv;
            }
            vec![(x.clone(), gx)]
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims2(a.value())?;
            let n = b.shape()[1];
            let mut res = Vec::with_capacity(2);
            if a.requires_grad() {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), n, 1, b.value().data(), 1, n, 0.0, &mut ga);
                res.push((a.clone(), Tensor::new(vec![m, k], ga)?));
            }
            if b.requires_grad() {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, a.value().data(), 1, k, g.data(), n, 1, 0.0, &mut gb);
                res.push((b.clone(), Tensor::new(vec![k, n], gb)?));
            }
            res
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(a.value())?;
            vec![(a.clone(), Tensor::new(vec![m, n], transpose(g.data(), n, m))?)]
        }
        Op::SoftmaxRows(a) => {
            let n = out.shape()[1];
            let mut ga = g.clone();
            for ((grow, yrow), drow) in g.data().chunks(n).zip(out.data().chunks(n)).zip(ga.data_mut().chunks_mut(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = yv * (gv - dot);
                }
            }
            vec![(a.clone(), ga)]
        }
        Op::Reshape(a) => vec![(a.clone(), g.reshape(a.shape().to_vec())?)],
        Op::SliceChannels { x, start } => {
            let plane = x.shape()[1] * x.shape()[2];
            let mut gx = Tensor::zeros(x.shape());
            gx.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
            vec![(x.clone(), gx)]
        }
        Op::RepeatChannels(a) => {
            let plane = a.value().len();
            let mut ga = Tensor::zeros(a.shape());
            for chunk in g.data().chunks(plane) {
                for (d, s) in ga.data_mut().iter_mut().zip(chunk) {
                    *d += s;
                }
            }
            vec![(a.clone(), ga)]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(weights ⊙ f(x)))/dx against central differences.
    fn check(build: impl Fn(&mut Graph, &Var) -> Var, x: &Tensor) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = build(&mut g, &xv);
        let weights = random(y.shape(), 99);
        let wv = g.constant(weights.clone());
        let prod = g.mul(&y, &wv).unwrap();
        let loss = g.sum(&prod);
        let grads = g.backward(&loss).unwrap();
        let analytic = grads.get(&xv).unwrap().data().to_vec();
        let numeric = central_difference(
            |t| {
                let mut g = Graph::inference();
                let xv = g.constant(t.clone());
                let y = build(&mut g, &xv);
                y.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            },
            x,
            1e-6,
            None,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn elementwise_ops() {
        let x = random(&[2, 3, 4], 1);
        check(|g, x| { let a = g.sigmoid(x); let b = g.abs(x); let c = g.mul(&a, &b).unwrap(); let d = g.relu(&c); let e = g.sub(&c, &d).unwrap(); let f = g.add(&e, &a).unwrap(); g.add_scalar(&f, 0.3) }, &x);
        check(|g, x| { let s = g.scale(x, -2.5); g.one_minus(&s) }, &x);
    }

    #[test]
    fn conv_and_normalization() {
        let x = random(&[3, 7, 6], 2);
        let w = random(&[4, 3, 3, 3], 3);
        let b = random(&[4], 4);
        for spec in [ConvSpec { stride: 1, padding: 1, dilation: 1 }, ConvSpec { stride: 2, padding: 1, dilation: 1 }, ConvSpec { stride: 1, padding: 2, dilation: 2 }] {
            check(|g, x| { let w = g.constant(w.clone()); let b = g.constant(b.clone()); g.conv2d(x, &w, Some(&b), spec).unwrap() }, &x);
            check(|g, wv| { let xc = g.constant(x.clone()); g.conv2d(&xc, wv, None, spec).unwrap() }, &w);
        }
        check(|g, x| g.normalize_chunks(x, 3, 1e-5).unwrap(), &x);
        let s = random(&[3], 5);
        check(|g, x| { let k = g.constant(s.clone()); let b = g.constant(s.clone()); g.channel_affine(x, &k, &b).unwrap() }, &x);
        check(|g, sv| { let xc = g.constant(x.clone()); let b = g.constant(s.clone()); g.channel_affine(&xc, sv, &b).unwrap() }, &s);
    }

    #[test]
    fn structural_ops() {
        let x = random(&[2, 6, 5], 6);
        check(|g, x| { let c = g.crop(x, 1, 2, 3, 3).unwrap(); let d = g.concat(&[c.clone(), c]).unwrap(); g.slice_channels(&d, 1, 2).unwrap() }, &x);
        check(|g, x| g.max_pool(x, 3, 2, 1).unwrap(), &x);
        let rows = Rc::new(LinearMap::bilinear(6, 3));
        let cols = Rc::new(LinearMap::bicubic(5, 9));
        check(|g, x| g.resample(x, rows.clone(), cols.clone()).unwrap(), &x);
        let one = random(&[1, 4, 3], 7);
        check(|g, x| g.repeat_channels(x, 3).unwrap(), &one);
    }

    #[test]
    fn matrix_ops() {
        let a = random(&[3, 4], 8);
        let b = random(&[4, 5], 9);
        check(|g, a| { let b = g.constant(b.clone()); let m = g.matmul(a, &b).unwrap(); g.softmax_rows(&m).unwrap() }, &a);
        check(|g, b| { let a = g.constant(a.clone()); let m = g.matmul(&a, b).unwrap(); let t = g.transpose(&m).unwrap(); g.reshape(&t, vec![1, 5, 3]).unwrap() }, &b);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.scale(&x, 3.0);
        assert!(!y.requires_grad());
        assert!(g.tape.is_empty());
    }
}

//! Named parameters and the convolutional building blocks shared by both
//! networks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LfpError, Result};
use crate::tensor::{ConvSpec, Grads, Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance `2 / fan_in`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter tensors keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Draws every parameter from one seeded stream, in declaration order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Kaiming { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| LfpError::Parameter(e.to_string()))?;
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            if map.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?).is_some() {
                return Err(LfpError::Parameter(format!("duplicate parameter name {}", spec.name)));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// SHA-256 over the names, shapes and exact bits of the selected
    /// parameters.
    pub fn digest(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.map.iter().filter(|(n, _)| select(n)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fails unless names and shapes match `specs` exactly.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.map.len() {
            return Err(LfpError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.map.len()
            )));
        }
        for s in specs {
            match self.map.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(LfpError::Checkpoint(format!(
                        "{} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(LfpError::Checkpoint(format!("missing parameter {}", s.name))),
            }
        }
        Ok(())
    }
}

/// A forward pass: the graph plus the parameter leaves bound so far.
pub struct Ctx<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    trainable: Option<&'a dyn Fn(&str) -> bool>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    /// Gradients flow to every parameter.
    pub fn train(params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            params,
            trainable: None,
            bound: BTreeMap::new(),
        }
    }

    /// Gradients flow only to parameters accepted by `trainable`.
    pub fn train_subset(params: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            trainable: Some(trainable),
            ..Self::train(params)
        }
    }

    /// Forward values only; intermediates are dropped as soon as possible.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self {
            graph: Graph::inference(),
            ..Self::train(params)
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| LfpError::Checkpoint(format!("missing parameter {name}")))?
            .clone();
        let rg = self.trainable.is_none_or(|f| f(name));
        let v = self.graph.leaf(value, rg);
        if self.graph.grad_enabled() {
            self.bound.insert(name.to_string(), v.clone());
        }
        Ok(v)
    }

    /// Gradients of the trainable parameters touched by this pass; unused
    /// paths yield zeros.
    pub fn param_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Group normalization, with weight standardization on the preceding
    /// convolution.
    Group,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStyle {
    pub norm: NormKind,
    pub activation: Activation,
}

impl Default for LayerStyle {
    fn default() -> Self {
        Self {
            norm: NormKind::Group,
            activation: Activation::Relu,
        }
    }
}

impl LayerStyle {
    pub fn linear() -> Self {
        Self {
            norm: NormKind::None,
            activation: Activation::Identity,
        }
    }

    fn without_activation(self) -> Self {
        Self {
            activation: Activation::Identity,
            ..self
        }
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn activate(cx: &mut Ctx, x: &Var, act: Activation) -> Var {
    match act {
        Activation::Relu => cx.graph.relu(x),
        Activation::Identity => x.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    spec: ConvSpec,
    bias: bool,
    standardize: bool,
}

impl Conv {
    /// A biased convolution with "same" padding at stride 1.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            spec: ConvSpec {
                stride,
                padding: dilation * (kernel - 1) / 2,
                dilation,
            },
            bias: true,
            standardize: false,
        }
    }

    fn standardized(mut self) -> Self {
        self.bias = false;
        self.standardize = self.cin * self.kernel * self.kernel > 1;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.cin * self.kernel * self.kernel;
        out.push(ParamSpec {
            name: self.weight_name(),
            shape: vec![self.cout, self.cin, self.kernel, self.kernel],
            init: Init::Kaiming { fan_in },
        });
        if self.bias {
            out.push(ParamSpec {
                name: self.bias_name(),
                shape: vec![self.cout],
                init: Init::Zeros,
            });
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut w = cx.param(&self.weight_name())?;
        if self.standardize {
            let fan_in = self.cin * self.kernel * self.kernel;
            let flat = cx.graph.reshape(&w, vec![self.cout, fan_in])?;
            let std = cx.graph.normalize_chunks(&flat, self.cout, NORM_EPS)?;
            w = cx.graph.reshape(&std, vec![self.cout, self.cin, self.kernel, self.kernel])?;
        }
        let b = if self.bias { Some(cx.param(&self.bias_name())?) } else { None };
        cx.graph.conv2d(x, &w, b.as_ref(), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    name: String,
    channels: usize,
    groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{}.scale", self.name),
            shape: vec![self.channels],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{}.shift", self.name),
            shape: vec![self.channels],
            init: Init::Zeros,
        });
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let n = cx.graph.normalize_chunks(x, self.groups, NORM_EPS)?;
        let k = cx.param(&format!("{}.scale", self.name))?;
        let b = cx.param(&format!("{}.shift", self.name))?;
        cx.graph.channel_affine(&n, &k, &b)
    }
}

/// Convolution, optional normalization, activation.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    conv: Conv,
    norm: Option<GroupNorm>,
    act: Activation,
}

impl ConvNormAct {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        style: LayerStyle,
    ) -> Self {
        Self::with_groups(name, cin, cout, kernel, stride, dilation, style, group_count(cout))
    }

    /// For maps pooled down to a few cells, where per-group statistics would
    /// be taken over too few values: a single normalization group.
    pub fn pooled(name: &str, cin: usize, cout: usize, style: LayerStyle) -> Self {
        Self::with_groups(name, cin, cout, 1, 1, 1, style, 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_groups(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        style: LayerStyle,
        groups: usize,
    ) -> Self {
        let conv = Conv::new(format!("{name}.conv"), cin, cout, kernel, stride, dilation);
        match style.norm {
            NormKind::Group => Self {
                conv: conv.standardized(),
                norm: Some(GroupNorm::new(format!("{name}.norm"), cout, groups)),
                act: style.activation,
            },
            NormKind::None => Self {
                conv,
                norm: None,
                act: style.activation,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        if let Some(n) = &self.norm {
            n.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut y = self.conv.forward(cx, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(cx, &y)?;
        }
        Ok(activate(cx, &y, self.act))
    }
}

/// Two 3×3 convolutions plus a shortcut (1×1 projection when the shape
/// changes).
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: ConvNormAct,
    conv2: ConvNormAct,
    shortcut: Option<ConvNormAct>,
    act: Activation,
}

impl ResidualBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, dilation: usize, style: LayerStyle) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            ConvNormAct::new(&format!("{name}.shortcut"), cin, cout, 1, stride, 1, style.without_activation())
        });
        Self {
            conv1: ConvNormAct::new(&format!("{name}.conv1"), cin, cout, 3, stride, dilation, style),
            conv2: ConvNormAct::new(&format!("{name}.conv2"), cout, cout, 3, 1, dilation, style.without_activation()),
            shortcut,
            act: style.activation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.specs(out);
        self.conv2.specs(out);
        if let Some(s) = &self.shortcut {
            s.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.conv2.forward(cx, &h)?;
        let s = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x.clone(),
        };
        let y = cx.graph.add(&h, &s)?;
        Ok(activate(cx, &y, self.act))
    }
}

/// Residual blocks sharing one width; only the first may stride.
#[derive(Clone, Debug)]
pub struct Stage {
    blocks: Vec<ResidualBlock>,
}

impl Stage {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
        stride: usize,
        dilation: usize,
        style: LayerStyle,
    ) -> Self {
        let blocks = (0..blocks.max(1))
            .map(|i| {
                let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                ResidualBlock::new(&format!("{name}.block{i}"), ci, cout, s, dilation, style)
            })
            .collect();
        Self { blocks }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.blocks {
            b.specs(out);
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(cx, &y)?;
        }
        Ok(y)
    }
}

/// Name of the first parameter whose gradient is identically zero.
pub fn first_zero_gradient(grads: &BTreeMap<String, Tensor>) -> Option<&str> {
    grads
        .iter()
        .find(|(_, g)| g.data().iter().all(|v| *v == 0.0))
        .map(|(n, _)| n.as_str())
}

//! Optimizer, staged training schedule and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TrainingSample;
use crate::error::{LfpError, Result};
use crate::losses::{matting_loss, propagating_loss, LossBreakdown, LossConfig};
use crate::model::{ContextMode, LfpNet};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-5,
            betas: [0.5, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    /// Epochs of the matting-only, decoders-only and full stages.
    pub stage_epochs: [usize; 3],
    pub loss: LossConfig,
    /// Weight of the context-alpha loss whenever the propagating decoder is
    /// trainable alongside the matting network.
    pub propagation_loss_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 1,
            pretrain_epochs: 10,
            stage_epochs: [35, 10, 5],
            loss: LossConfig::default(),
            propagation_loss_weight: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| {
            Err(LfpError::Config {
                path: format!("training.{path}"),
                message,
            })
        };
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return err("optimizer.lr", format!("{} must be positive", o.lr));
        }
        if !(o.weight_decay >= 0.0) {
            return err("optimizer.weight_decay", format!("{} must be non-negative", o.weight_decay));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return err("optimizer.betas", format!("{:?} must lie in [0, 1)", o.betas));
        }
        if !(o.eps > 0.0) {
            return err("optimizer.eps", "must be positive".into());
        }
        if self.batch_size != 1 {
            return err("batch_size", format!("only batch size 1 is supported, got {}", self.batch_size));
        }
        if !(self.propagation_loss_weight >= 0.0) {
            return err("propagation_loss_weight", "must be non-negative".into());
        }
        self.loss.validate()
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn is_zero(&self) -> bool {
        self.step == 0 && self.m.is_empty() && self.v.is_empty()
    }
}

/// Adam with the variance rectification term, L2 weight decay folded into
/// the gradient.
#[derive(Clone, Debug)]
pub struct Radam {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState,
}

impl Radam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            state: OptimizerState::default(),
        }
    }

    pub fn reset(&mut self) {
        self.state = OptimizerState::default();
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let [b1, b2] = self.cfg.betas;
        let (lr, wd, eps) = (self.cfg.lr, self.cfg.weight_decay, self.cfg.eps);
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f64 * b2.powi(t) / bc2;
        let rect = (rho_t > 5.0)
            .then(|| ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| LfpError::Checkpoint(format!("gradient for unknown parameter {name}")))?;
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] + wd * pd[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                pd[i] -= match rect {
                    Some(r) => lr * r * mhat * bc2.sqrt() / (vd[i].sqrt() + eps),
                    None => lr * mhat,
                };
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Propagating network alone on the context-alpha loss.
    Pretrain,
    /// Matting network only; the propagating network supplies fixed features.
    Matting,
    /// Both decoders and prediction heads, plus the context fusion projection.
    Decoders,
    Full,
}

const DECODER_PREFIXES: [&str; 5] = [
    "propagating.decoder.",
    "propagating.head.",
    "matting.decoder.",
    "matting.head.",
    "matting.fusion.",
];

impl Stage {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            Stage::Pretrain => name.starts_with("propagating."),
            Stage::Matting => name.starts_with("matting."),
            Stage::Decoders => DECODER_PREFIXES.iter().any(|p| name.starts_with(p)),
            Stage::Full => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Matting => "matting",
            Stage::Decoders => "decoders",
            Stage::Full => "full",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// One optimizer step, as written to the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub sample: usize,
    pub total: f64,
    pub propagation: Option<f64>,
    pub matting: Option<LossBreakdown>,
}

/// Frozen-set digests and loss trend of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub steps: u64,
    pub trainable_tensors: usize,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

struct Losses {
    total: Var,
    propagation: Option<f64>,
    matting: Option<LossBreakdown>,
}

fn stage_losses(net: &LfpNet, cx: &mut Ctx, sample: &TrainingSample, stage: Stage, cfg: &TrainConfig) -> Result<Losses> {
    let cp = sample.context_pair()?;
    if stage == Stage::Pretrain {
        let p = net
            .propagating()
            .ok_or_else(|| LfpError::Config {
                path: "matting.fusion.point".into(),
                message: "pretraining needs the propagating network, which is disabled".into(),
            })?;
        let x = cx.graph.constant(cp.to_input());
        let v = p.forward(cx, &x)?;
        let lp = propagating_loss(&mut cx.graph, &v.context_alpha, sample.context_alpha(), &cp.trimap)?;
        return Ok(Losses {
            propagation: Some(lp.item()),
            total: lp.value,
            matting: None,
        });
    }
    let mode = if stage == Stage::Matting {
        ContextMode::Detached
    } else {
        ContextMode::Attached
    };
    let vars = net.forward(cx, &cp, mode)?;
    let inner = sample.inner();
    let lm = matting_loss(&mut cx.graph, &vars.matting, &inner, &cfg.loss)?;
    let mut total = lm.total;
    let mut propagation = None;
    if let (Some(pv), true) = (&vars.propagation, stage != Stage::Matting) {
        let lp = propagating_loss(&mut cx.graph, &pv.context_alpha, sample.context_alpha(), &cp.trimap)?;
        propagation = Some(lp.item());
        let w = cx.graph.scale(&lp.value, cfg.propagation_loss_weight);
        total = cx.graph.add(&total, &w)?;
    }
    Ok(Losses {
        total,
        propagation,
        matting: Some(lm.breakdown),
    })
}

/// Mean matting loss over `data` without updating anything.
pub fn mean_matting_loss(net: &LfpNet, params: &ParamStore, data: &[TrainingSample], loss: &LossConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(LfpError::Data("no samples to evaluate".into()));
    }
    let mut acc = 0.0;
    for s in data {
        let mut cx = Ctx::inference(params);
        let vars = net.forward(&mut cx, &s.context_pair()?, ContextMode::Attached)?;
        acc += matting_loss(&mut cx.graph, &vars.matting, &s.inner(), loss)?.breakdown.total;
    }
    Ok(acc / data.len() as f64)
}

/// Where progress goes while training.
pub struct TrainSink<'a> {
    /// JSON-lines step log.
    pub log: &'a mut dyn Write,
    /// Periodic checkpoints are written here when cadence is enabled.
    pub checkpoint_dir: Option<&'a Path>,
}

pub struct Trainer<'n> {
    net: &'n LfpNet,
    pub params: ParamStore,
    pub optimizer: Radam,
    pub cfg: TrainConfig,
    pub stage: Stage,
    pub step: u64,
    /// Resolved configuration stored in every checkpoint.
    pub snapshot: serde_json::Value,
}

impl<'n> Trainer<'n> {
    pub fn new(net: &'n LfpNet, params: ParamStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&net.specs())?;
        Ok(Self {
            net,
            params,
            optimizer: Radam::new(cfg.optimizer.clone()),
            cfg,
            stage: Stage::Pretrain,
            step: 0,
            snapshot: serde_json::Value::Null,
        })
    }

    pub fn from_checkpoint(net: &'n LfpNet, ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(net, ckpt.params.clone(), cfg)?;
        t.optimizer.state = ckpt.optimizer.clone();
        t.stage = ckpt.stage;
        t.step = ckpt.step;
        t.snapshot = ckpt.config.clone();
        Ok(t)
    }

    /// Switches stage with fresh optimizer moments.
    pub fn begin_stage(&mut self, stage: Stage) -> Result<usize> {
        let n = self.params.names().filter(|n| stage.trainable(n)).count();
        if n == 0 {
            return Err(LfpError::Config {
                path: format!("training.{}", stage.name()),
                message: "stage trains no parameters".into(),
            });
        }
        self.stage = stage;
        self.optimizer.reset();
        Ok(n)
    }

    pub fn train_step(&mut self, sample: &TrainingSample) -> Result<(f64, Option<f64>, Option<LossBreakdown>)> {
        let stage = self.stage;
        let filter = |n: &str| stage.trainable(n);
        let (total, propagation, matting, grads) = {
            let mut cx = Ctx::train_subset(&self.params, &filter);
            let l = stage_losses(self.net, &mut cx, sample, stage, &self.cfg)?;
            let total = l.total.value().item();
            if !total.is_finite() {
                return Err(LfpError::Data(format!("non-finite loss at step {}", self.step)));
            }
            let mut g = cx.graph.backward(&l.total)?;
            (total, l.propagation, l.matting, cx.param_grads(&mut g))
        };
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok((total, propagation, matting))
    }

    /// Runs `epochs` passes over `data` in a seeded order per epoch, checking
    /// that parameters outside the stage stay bit-identical.
    pub fn run_stage(&mut self, stage: Stage, epochs: usize, data: &[TrainingSample], sink: &mut TrainSink) -> Result<StageSummary> {
        if data.is_empty() {
            return Err(LfpError::Data("training set is empty".into()));
        }
        let trainable_tensors = self.begin_stage(stage)?;
        let frozen = |n: &str| !stage.trainable(n);
        let before = self.params.digest(frozen);
        let (mut first, mut last) = (None, None);
        let start = self.step;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(stage.index() << 32 | epoch as u64);
            order.shuffle(&mut rng);
            for &i in &order {
                let (total, propagation, matting) = self.train_step(&data[i])?;
                first.get_or_insert(total);
                last = Some(total);
                let rec = StepRecord {
                    stage,
                    epoch,
                    step: self.step,
                    sample: i,
                    total,
                    propagation,
                    matting,
                };
                writeln!(sink.log, "{}", serde_json::to_string(&rec)?).map_err(|e| LfpError::io("training log", e))?;
                if let Some(dir) = sink.checkpoint_dir {
                    if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                        self.checkpoint().save(&dir.join(format!("step-{:08}.ckpt", self.step)))?;
                    }
                }
            }
        }
        let after = self.params.digest(frozen);
        if after != before {
            return Err(LfpError::Checkpoint(format!("frozen parameters changed during stage {}", stage.name())));
        }
        log::info!("stage {} done after {} steps", stage.name(), self.step - start);
        Ok(StageSummary {
            stage,
            epochs,
            steps: self.step - start,
            trainable_tensors,
            frozen_digest_before: before,
            frozen_digest_after: after,
            first_loss: first,
            last_loss: last,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.state.clone(),
            config: self.snapshot.clone(),
            stage: self.stage,
            step: self.step,
        }
    }
}

/// Optimizes the propagating network on the context-alpha loss only.
pub fn pretrain_propagating(
    net: &LfpNet,
    init: ParamStore,
    data: &[TrainingSample],
    cfg: &TrainConfig,
    snapshot: serde_json::Value,
    sink: &mut TrainSink,
) -> Result<(Checkpoint, StageSummary)> {
    let mut t = Trainer::new(net, init, cfg.clone())?;
    t.snapshot = snapshot;
    let summary = t.run_stage(Stage::Pretrain, cfg.pretrain_epochs, data, sink)?;
    Ok((t.checkpoint(), summary))
}

/// Matting-only, then decoders-only, then full fine-tuning, each with fresh
/// optimizer state.
pub fn train_three_stage(
    net: &LfpNet,
    init: &Checkpoint,
    data: &[TrainingSample],
    cfg: &TrainConfig,
    sink: &mut TrainSink,
) -> Result<(Checkpoint, Vec<StageSummary>)> {
    let mut t = Trainer::from_checkpoint(net, init, cfg.clone())?;
    let mut out = Vec::with_capacity(3);
    for (stage, epochs) in [Stage::Matting, Stage::Decoders, Stage::Full].into_iter().zip(cfg.stage_epochs) {
        out.push(t.run_stage(stage, epochs, data, sink)?);
    }
    Ok((t.checkpoint(), out))
}

const MAGIC: &[u8; 8] = b"LFPCKPT1";

/// Parameters, optimizer moments and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub config: serde_json::Value,
    pub stage: Stage,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: u64,
    optimizer_step: u64,
    config: serde_json::Value,
    params: Vec<TensorEntry>,
    first_moments: Vec<TensorEntry>,
    second_moments: Vec<TensorEntry>,
}

fn entries<'a>(it: impl Iterator<Item = (&'a String, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<&'a Tensor>) {
    it.map(|(n, t)| {
        (
            TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            },
            t,
        )
    })
    .unzip()
}

impl Checkpoint {
    /// `LFPCKPT1`, a little-endian `u64` header length, a JSON header naming
    /// every tensor, then all values as little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (params, pt) = entries(self.params.iter());
        let (first_moments, mt) = entries(self.optimizer.m.iter());
        let (second_moments, vt) = entries(self.optimizer.v.iter());
        let header = serde_json::to_vec(&Header {
            stage: self.stage,
            step: self.step,
            optimizer_step: self.optimizer.step,
            config: self.config.clone(),
            params,
            first_moments,
            second_moments,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.scalar_count() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in pt.into_iter().chain(mt).chain(vt) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LfpError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut cursor = body_start;
        let mut take = |list: Vec<TensorEntry>| -> Result<BTreeMap<String, Tensor>> {
            let mut out = BTreeMap::new();
            for e in list {
                let n: usize = e.shape.iter().product();
                let end = cursor.checked_add(8 * n).filter(|&end| end <= bytes.len()).ok_or_else(|| bad("truncated data"))?;
                let data = bytes[cursor..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                cursor = end;
                out.insert(e.name, Tensor::new(e.shape, data)?);
            }
            Ok(out)
        };
        let mut params = ParamStore::default();
        for (n, t) in take(header.params)? {
            params.insert(n, t);
        }
        let m = take(header.first_moments)?;
        let v = take(header.second_moments)?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m,
                v,
            },
            config: header.config,
            stage: header.stage,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| LfpError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| LfpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| LfpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_samples, AssetSource, AugmentConfig};
    use crate::matting::MattingConfig;
    use crate::propagating::PropagatingConfig;

    pub(crate) fn tiny_net() -> LfpNet {
        let mut p = PropagatingConfig {
            stem_width: 8,
            stage_widths: vec![8, 8, 8, 8],
            decoder_widths: vec![8, 8, 8, 8],
            ..PropagatingConfig::default()
        };
        p.bottleneck.aspp_branch_channels = 8;
        p.bottleneck.fuse_channels = 8;
        let mut m = MattingConfig {
            stem_widths: vec![8, 8, 8],
            stage_widths: vec![8, 8, 8, 8],
            ppm_width: 8,
            decoder_widths: vec![8, 8, 8, 8],
            head_widths: vec![8, 8],
            ..MattingConfig::default()
        };
        m.fusion.width = 8;
        LfpNet::new(&p, &m).unwrap()
    }

    fn samples(n: usize) -> Vec<TrainingSample> {
        let cfg = AugmentConfig {
            crop_sizes: vec![64],
            trimap_kernel_range: [3, 9],
            rng_seed: 5,
            ..AugmentConfig::default()
        };
        generate_samples(&AssetSource::Procedural { side: 96 }, n, &cfg).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn radam_matches_reference_arithmetic() {
        let mut params = ParamStore::default();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut opt = Radam::new(OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, 0.25]).unwrap());
        // Independent replay of the update rule for one coordinate.
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=8 {
            opt.step(&mut params, &grads).unwrap();
            let g = 0.5 + 0.01 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let bc1 = 1.0 - 0.9f64.powi(t);
            let bc2 = 1.0 - 0.999f64.powi(t);
            let rho_inf = 2.0 / 0.001 - 1.0;
            let rho = rho_inf - 2.0 * t as f64 * 0.999f64.powi(t) / bc2;
            if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                p -= 0.1 * r * (m / bc1) / ((v / bc2).sqrt() + 1e-8 / bc2.sqrt());
            } else {
                p -= 0.1 * m / bc1;
            }
            assert!((params.get("w").unwrap().data()[0] - p).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn stage_filters() {
        assert!(Stage::Pretrain.trainable("propagating.encoder.stem.weight"));
        assert!(!Stage::Pretrain.trainable("matting.head.output.weight"));
        assert!(Stage::Matting.trainable("matting.encoder.stage0.block0.conv1.weight"));
        assert!(!Stage::Matting.trainable("propagating.head.weight"));
        assert!(Stage::Decoders.trainable("propagating.decoder.stage0.weight"));
        assert!(Stage::Decoders.trainable("matting.fusion.projection.weight"));
        assert!(!Stage::Decoders.trainable("propagating.bottleneck.aspp.pointwise.weight"));
        assert!(!Stage::Decoders.trainable("matting.encoder.stem.conv0.weight"));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let net = tiny_net();
        let data = samples(1);
        let mut t = Trainer::new(&net, net.init_params(1).unwrap(), cfg()).unwrap();
        t.snapshot = serde_json::json!({"preset": "tiny", "x": 0.1});
        t.begin_stage(Stage::Full).unwrap();
        t.train_step(&data[0]).unwrap();
        let c = t.checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"LFPCKPT0").is_err());
    }

    #[test]
    fn reload_resumes_with_identical_next_loss() {
        let net = tiny_net();
        let data = samples(1);
        let mut a = Trainer::new(&net, net.init_params(2).unwrap(), cfg()).unwrap();
        a.begin_stage(Stage::Pretrain).unwrap();
        for _ in 0..3 {
            a.train_step(&data[0]).unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&a.checkpoint().to_bytes().unwrap()).unwrap();
        let mut b = Trainer::from_checkpoint(&net, &ckpt, cfg()).unwrap();
        let la = a.train_step(&data[0]).unwrap().0;
        let lb = b.train_step(&data[0]).unwrap().0;
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_epoch_pretraining_keeps_initialization() {
        let net = tiny_net();
        let init = net.init_params(3).unwrap();
        let c = TrainConfig {
            pretrain_epochs: 0,
            ..cfg()
        };
        let mut log = Vec::new();
        let mut sink = TrainSink {
            log: &mut log,
            checkpoint_dir: None,
        };
        let (ckpt, _) = pretrain_propagating(&net, init.clone(), &samples(1), &c, serde_json::Value::Null, &mut sink).unwrap();
        assert_eq!(ckpt.params, init);
        let err = pretrain_propagating(&net, init, &[], &c, serde_json::Value::Null, &mut sink).unwrap_err();
        assert!(matches!(err, LfpError::Data(_)));
    }

    #[test]
    fn stages_respect_frozen_sets_and_reset_moments() {
        let net = tiny_net();
        let data = samples(1);
        let init = Checkpoint {
            params: net.init_params(4).unwrap(),
            optimizer: OptimizerState::default(),
            config: serde_json::Value::Null,
            stage: Stage::Pretrain,
            step: 0,
        };
        let c = TrainConfig {
            stage_epochs: [1, 1, 1],
            ..cfg()
        };
        let mut log = Vec::new();
        let mut sink = TrainSink {
            log: &mut log,
            checkpoint_dir: None,
        };
        let mut t = Trainer::from_checkpoint(&net, &init, c.clone()).unwrap();
        let prop_before = t.params.digest(|n| n.starts_with("propagating."));
        t.run_stage(Stage::Matting, 1, &data, &mut sink).unwrap();
        assert_eq!(t.params.digest(|n| n.starts_with("propagating.")), prop_before);
        assert!(!t.optimizer.state.is_zero());
        t.begin_stage(Stage::Decoders).unwrap();
        assert!(t.optimizer.state.is_zero());
        let enc = |n: &str| n.contains(".encoder.") || n.starts_with("propagating.bottleneck.");
        let enc_before = t.params.digest(enc);
        let all_before = t.params.digest(|_| true);
        t.run_stage(Stage::Decoders, 1, &data, &mut sink).unwrap();
        assert_eq!(t.params.digest(enc), enc_before);
        assert_ne!(t.params.digest(|_| true), all_before);
        let (_, summaries) = train_three_stage(&net, &init, &data, &c, &mut sink).unwrap();
        assert_eq!(summaries.len(), 3);
        for s in &summaries {
            assert_eq!(s.frozen_digest_before, s.frozen_digest_after);
        }
        let text = String::from_utf8(log).unwrap();
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.stage, Stage::Matting);
        assert!(first.matting.is_some() && first.propagation.is_none());
    }
}

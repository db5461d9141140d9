//! The complete two-network model.

use crate::error::Result;
use crate::geometry::{network_input, ContextPair};
use crate::inference::TileModel;
use crate::losses::MattingVars;
use crate::matting::{ContextFeatures, MattingConfig, MattingModule, MattingOutput};
use crate::nn::{Ctx, ParamSpec, ParamStore};
use crate::propagating::{PropagatingConfig, PropagatingModule, PropagationVars};

/// How the propagating network participates in a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// Part of the differentiated graph.
    Attached,
    /// Evaluated separately without gradients; its outputs enter the graph as
    /// constants.
    Detached,
}

pub struct NetVars {
    pub propagation: Option<PropagationVars>,
    pub matting: MattingVars,
}

#[derive(Clone, Debug)]
pub struct LfpNet {
    propagating: Option<PropagatingModule>,
    matting: MattingModule,
}

impl LfpNet {
    /// With context fusion disabled the propagating network is omitted
    /// entirely.
    pub fn new(propagating: &PropagatingConfig, matting: &MattingConfig) -> Result<Self> {
        let prop = PropagatingModule::new(propagating)?;
        let matting_module = MattingModule::new(matting, prop.tap_channels())?;
        Ok(Self {
            propagating: matting_module.uses_context().then_some(prop),
            matting: matting_module,
        })
    }

    pub fn propagating(&self) -> Option<&PropagatingModule> {
        self.propagating.as_ref()
    }

    pub fn matting(&self) -> &MattingModule {
        &self.matting
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if let Some(p) = &self.propagating {
            p.specs(&mut out);
        }
        self.matting.specs(&mut out);
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::initialize(&self.specs(), seed)
    }

    pub fn forward(&self, cx: &mut Ctx, cp: &ContextPair, mode: ContextMode) -> Result<NetVars> {
        let propagation = match &self.propagating {
            None => None,
            Some(p) => Some(match mode {
                ContextMode::Attached => {
                    let x = cx.graph.constant(cp.to_input());
                    p.forward(cx, &x)?
                }
                ContextMode::Detached => {
                    let mut side = Ctx::inference(cx.params());
                    let x = side.graph.constant(cp.to_input());
                    let v = p.forward(&mut side, &x)?;
                    PropagationVars {
                        context_alpha: cx.graph.constant(v.context_alpha.value().clone()),
                        features: cx.graph.constant(v.features.value().clone()),
                        tap: v.tap,
                    }
                }
            }),
        };
        let (image, trimap) = cp.inner();
        let input = cx.graph.constant(network_input(&image, &trimap));
        let ctx = propagation.as_ref().map(|p| ContextFeatures {
            features: &p.features,
            tap: p.tap,
        });
        let matting = self.matting.forward(cx, &input, ctx.as_ref())?;
        Ok(NetVars { propagation, matting })
    }

    pub fn predict(&self, params: &ParamStore, cp: &ContextPair) -> Result<MattingOutput> {
        let mut cx = Ctx::inference(params);
        let v = self.forward(&mut cx, cp, ContextMode::Attached)?;
        MattingOutput::from_vars(&v.matting)
    }
}

/// A network bound to its parameters, usable for tiled inference.
pub struct NetworkModel {
    pub net: LfpNet,
    pub params: ParamStore,
}

impl TileModel for NetworkModel {
    fn predict(&self, context: &ContextPair) -> Result<MattingOutput> {
        self.net.predict(&self.params, context)
    }
}

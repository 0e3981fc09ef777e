//! GCN⁺, GIN⁺ and GatedGCN⁺ layers sharing one enhancement pipeline:
//! aggregation → batch norm → ReLU → dropout → residual → FFN, each stage
//! switchable through [`TechniqueFlags`].

mod gated;
mod gcn;
mod gin;

pub use gated::GatedGcnLayer;
pub use gcn::GcnLayer;
pub use gin::GinLayer;

use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormConfig, Mode, RunningStats, Tape, Var};
use crate::error::{bail, Result};
use crate::graph::{FeatureSchema, Features, GraphBatch};
use crate::params::{BufferId, Buffers, Bound, ParamId, ParameterStore};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Gcn,
    Gin,
    GatedGcn,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Gcn, Backbone::Gin, Backbone::GatedGcn];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Gcn => "gcn",
            Backbone::Gin => "gin",
            Backbone::GatedGcn => "gatedgcn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueFlags {
    pub use_edge_features: bool,
    pub use_norm: bool,
    pub dropout_rate: f64,
    pub use_residual: bool,
    pub use_ffn: bool,
    pub use_pe: bool,
}

impl TechniqueFlags {
    pub const NONE: TechniqueFlags = TechniqueFlags {
        use_edge_features: false,
        use_norm: false,
        dropout_rate: 0.0,
        use_residual: false,
        use_ffn: false,
        use_pe: false,
    };

    /// Flags from a 6-bit mask: bit 0 edge features, 1 norm, 2 dropout (at
    /// `rate`), 3 residual, 4 FFN, 5 PE.
    pub fn from_bits(bits: u8, rate: f64) -> Self {
        let on = |i: u8| bits & (1 << i) != 0;
        Self {
            use_edge_features: on(0),
            use_norm: on(1),
            dropout_rate: if on(2) { rate } else { 0.0 },
            use_residual: on(3),
            use_ffn: on(4),
            use_pe: on(5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout rate must lie in [0, 1), got {}", self.dropout_rate);
        }
        Ok(())
    }
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(p.get(self.w))?;
        match self.b {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Batch norm with learned affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParameterStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
            stats: store.add_buffer(format!("{name}.running"), RunningStats::new(dim))?,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, cx: &mut LayerCtx<'_, 't, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (g, b) = (cx.params.get(self.gamma), cx.params.get(self.beta));
        x.batch_norm(g, b, cx.buffers.get_mut(self.stats), cx.mode, cx.bn)
    }
}

/// `FFN(h) = BN(ReLU(h W₁ + b₁) W₂ + b₂ + h)`; the norm is present only when
/// normalization is enabled.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
    pub norm: Option<Norm>,
}

/// Expansion factor of the FFN's inner layer.
pub const FFN_EXPANSION: usize = 2;

impl Ffn {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        dim: usize,
        norm: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let inner = FFN_EXPANSION * dim;
        Ok(Self {
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, inner, true, rng)?,
            lin2: Linear::new(store, &format!("{name}.lin2"), inner, dim, true, rng)?,
            norm: if norm {
                Some(Norm::new(store, &format!("{name}.norm"), dim)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'t, S: Scalar>(&self, cx: &mut LayerCtx<'_, 't, S>, h: Var<'t, S>) -> Result<Var<'t, S>> {
        let inner = self.lin1.forward(cx.params, h)?.relu();
        let y = self.lin2.forward(cx.params, inner)?.add(h)?;
        match &self.norm {
            Some(n) => n.forward(cx, y),
            None => Ok(y),
        }
    }
}

/// Arc structure of a batch plus the GCN normalization coefficients, shared
/// by every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct MessageGraph<S: Scalar> {
    pub num_nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `1/√(d̂_u d̂_v)` per arc `u → v`.
    pub arc_coef: Rc<[S]>,
    /// `1/d̂_v` per node.
    pub self_coef: Rc<[S]>,
}

impl<S: Scalar> MessageGraph<S> {
    pub fn new(batch: &GraphBatch) -> Self {
        let d = &batch.hat_degrees;
        let arc_coef = batch
            .src
            .iter()
            .zip(batch.dst.iter())
            .map(|(&u, &v)| S::lit(1.0 / (d[u] * d[v]).sqrt()))
            .collect();
        let self_coef = d.iter().map(|&x| S::lit(1.0 / x)).collect();
        Self {
            num_nodes: batch.num_nodes,
            src: batch.src.clone(),
            dst: batch.dst.clone(),
            arc_coef,
            self_coef,
        }
    }
}

/// Raw node or edge features ready to be multiplied into a weight matrix.
///
/// Categorical columns act as one-hot blocks laid side by side, so `x W` is a
/// sum of row lookups into `W` with per-column offsets.
#[derive(Clone, Debug)]
pub enum FeatureInput<S: Scalar> {
    Categorical(Vec<Arc<[usize]>>),
    Continuous(Tensor<S>),
}

impl<S: Scalar> FeatureInput<S> {
    pub fn new(f: &Features, schema: &FeatureSchema) -> Result<Self> {
        match (f, schema) {
            (Features::Categorical { cols, data }, FeatureSchema::Categorical(vocab))
                if *cols == vocab.len() =>
            {
                let rows = f.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(*cols);
                for (c, &size) in vocab.iter().enumerate() {
                    out.push((0..rows).map(|r| offset + data[r * cols + c]).collect());
                    offset += size;
                }
                Ok(FeatureInput::Categorical(out))
            }
            (Features::Continuous { dim, data }, FeatureSchema::Continuous(d)) if dim == d => {
                let rows = f.rows();
                Ok(FeatureInput::Continuous(Tensor::from_f64([rows, *dim], data)?))
            }
            _ => bail!(Schema, "features do not match schema {schema:?}"),
        }
    }

    /// `x W` for a `W` of shape `[raw_width, out]`.
    pub fn project<'t>(&self, tape: &'t Tape<S>, w: Var<'t, S>) -> Result<Var<'t, S>> {
        match self {
            FeatureInput::Categorical(cols) => {
                let mut acc = w.gather_rows(&cols[0])?;
                for c in &cols[1..] {
                    acc = acc.add(w.gather_rows(c)?)?;
                }
                Ok(acc)
            }
            FeatureInput::Continuous(x) => tape.constant(x.clone()).matmul(w),
        }
    }
}

/// Everything a layer needs besides its own weights and inputs.
pub struct LayerCtx<'a, 't, S: Scalar> {
    pub tape: &'t Tape<S>,
    pub params: &'a Bound<'t, S>,
    pub buffers: Buffers<'a, S>,
    pub mode: Mode,
    pub rng: &'a mut RngState,
    pub graph: &'a MessageGraph<S>,
    pub bn: BatchNormConfig,
}

/// The post-aggregation stages shared by all backbones.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub flags: TechniqueFlags,
    pub norm: Option<Norm>,
    pub ffn: Option<Ffn>,
}

impl Pipeline {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        dim: usize,
        flags: TechniqueFlags,
        rng: &mut RngState,
    ) -> Result<Self> {
        let norm = if flags.use_norm {
            Some(Norm::new(store, &format!("{name}.norm"), dim)?)
        } else {
            None
        };
        let ffn = if flags.use_ffn {
            Some(Ffn::new(store, &format!("{name}.ffn"), dim, flags.use_norm, rng)?)
        } else {
            None
        };
        Ok(Self { flags, norm, ffn })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        cx: &mut LayerCtx<'_, 't, S>,
        agg: Var<'t, S>,
        h_prev: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let mut h = match &self.norm {
            Some(n) => n.forward(cx, agg)?,
            None => agg,
        };
        h = h.relu().dropout(self.flags.dropout_rate, cx.mode, cx.rng)?;
        if self.flags.use_residual {
            h = h.add(h_prev)?;
        }
        match &self.ffn {
            Some(f) => f.forward(cx, h),
            None => Ok(h),
        }
    }
}

/// One message-passing layer of any backbone.
#[derive(Clone, Debug)]
pub enum Layer {
    Gcn(GcnLayer),
    Gin(GinLayer),
    GatedGcn(GatedGcnLayer),
}

/// Edge input to a layer: raw features for GCN⁺/GIN⁺, hidden edge
/// representations for GatedGCN⁺.
pub enum EdgeState<'a, 't, S: Scalar> {
    None,
    Raw(&'a FeatureInput<S>),
    Hidden(Var<'t, S>),
}

impl Layer {
    pub fn new<S: Scalar>(
        backbone: Backbone,
        store: &mut ParameterStore<S>,
        name: &str,
        hidden: usize,
        edge_raw_width: usize,
        flags: TechniqueFlags,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(match backbone {
            Backbone::Gcn => Layer::Gcn(GcnLayer::new(store, name, hidden, edge_raw_width, flags, rng)?),
            Backbone::Gin => Layer::Gin(GinLayer::new(store, name, hidden, edge_raw_width, flags, rng)?),
            Backbone::GatedGcn => Layer::GatedGcn(GatedGcnLayer::new(store, name, hidden, flags, rng)?),
        })
    }

    /// Returns the new node representations and, for GatedGCN⁺ with edge
    /// features, the new edge representations.
    pub fn forward<'t, S: Scalar>(
        &self,
        cx: &mut LayerCtx<'_, 't, S>,
        h: Var<'t, S>,
        e: EdgeState<'_, 't, S>,
    ) -> Result<(Var<'t, S>, Option<Var<'t, S>>)> {
        match (self, e) {
            (Layer::Gcn(l), EdgeState::Hidden(_)) | (Layer::Gcn(l), EdgeState::None) => {
                Ok((l.forward(cx, h, None)?, None))
            }
            (Layer::Gcn(l), EdgeState::Raw(r)) => Ok((l.forward(cx, h, Some(r))?, None)),
            (Layer::Gin(l), EdgeState::Raw(r)) => Ok((l.forward(cx, h, Some(r))?, None)),
            (Layer::Gin(l), _) => Ok((l.forward(cx, h, None)?, None)),
            (Layer::GatedGcn(l), EdgeState::Hidden(e)) => {
                let (h, e) = l.forward(cx, h, Some(e))?;
                Ok((h, e))
            }
            (Layer::GatedGcn(l), _) => Ok((l.forward(cx, h, None)?.0, None)),
        }
    }
}

pub(crate) fn missing_edges() -> crate::Error {
    crate::Error::Config("edge features are enabled but the batch carries none".into())
}

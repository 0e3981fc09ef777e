use super::{missing_edges, FeatureInput, LayerCtx, Linear, Pipeline, TechniqueFlags};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngState;
use crate::scalar::Scalar;

/// GIN⁺ with `ε = 0`: `MLP(h_v + Σ_u m_uv)` where `m_uv = ReLU(h_u + e_uv W_e)`
/// with edge features and `h_u` without.
#[derive(Clone, Debug)]
pub struct GinLayer {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub w_edge: Option<ParamId>,
    pub post: Pipeline,
}

impl GinLayer {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        hidden: usize,
        edge_raw_width: usize,
        flags: TechniqueFlags,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mlp1 = Linear::new(store, &format!("{name}.mlp1"), hidden, hidden, true, rng)?;
        let mlp2 = Linear::new(store, &format!("{name}.mlp2"), hidden, hidden, true, rng)?;
        let w_edge = if flags.use_edge_features {
            Some(store.add_glorot(format!("{name}.w_edge"), edge_raw_width, hidden, rng)?)
        } else {
            None
        };
        let post = Pipeline::new(store, name, hidden, flags, rng)?;
        Ok(Self {
            mlp1,
            mlp2,
            w_edge,
            post,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        cx: &mut LayerCtx<'_, 't, S>,
        h: Var<'t, S>,
        e: Option<&FeatureInput<S>>,
    ) -> Result<Var<'t, S>> {
        let g = cx.graph;
        let mut msg = h.gather_rows(&g.src)?;
        if let Some(w_edge) = self.w_edge {
            let e = e.ok_or_else(missing_edges)?;
            msg = msg.add(e.project(cx.tape, cx.params.get(w_edge))?)?.relu();
        }
        let agg = h.add(msg.segment_sum(&g.dst, g.num_nodes)?)?;
        let z = self.mlp1.forward(cx.params, agg)?.relu();
        let z = self.mlp2.forward(cx.params, z)?;
        self.post.forward(cx, z, h)
    }
}

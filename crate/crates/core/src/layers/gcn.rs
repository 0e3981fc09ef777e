use super::{missing_edges, FeatureInput, LayerCtx, Linear, Pipeline, TechniqueFlags};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngState;
use crate::scalar::Scalar;

/// GCN⁺: symmetric-normalized sum over `N(v) ∪ {v}` of `h_u W`, plus
/// `e_uv W_e` on real arcs when edge features are on.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub lin: Linear,
    /// `[raw edge width, hidden]`, present with edge features.
    pub w_edge: Option<ParamId>,
    pub post: Pipeline,
}

impl GcnLayer {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        hidden: usize,
        edge_raw_width: usize,
        flags: TechniqueFlags,
        rng: &mut RngState,
    ) -> Result<Self> {
        let lin = Linear::new(store, &format!("{name}.conv"), hidden, hidden, true, rng)?;
        let w_edge = if flags.use_edge_features {
            Some(store.add_glorot(format!("{name}.conv.w_edge"), edge_raw_width, hidden, rng)?)
        } else {
            None
        };
        let post = Pipeline::new(store, name, hidden, flags, rng)?;
        Ok(Self { lin, w_edge, post })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        cx: &mut LayerCtx<'_, 't, S>,
        h: Var<'t, S>,
        e: Option<&FeatureInput<S>>,
    ) -> Result<Var<'t, S>> {
        let g = cx.graph;
        let hw = h.matmul(cx.params.get(self.lin.w))?;
        let mut msg = hw.gather_rows(&g.src)?;
        if let Some(w_edge) = self.w_edge {
            let e = e.ok_or_else(missing_edges)?;
            msg = msg.add(e.project(cx.tape, cx.params.get(w_edge))?)?;
        }
        let neigh = msg.row_scale(&g.arc_coef)?.segment_sum(&g.dst, g.num_nodes)?;
        let mut agg = neigh.add(hw.row_scale(&g.self_coef)?)?;
        if let Some(b) = self.lin.b {
            agg = agg.add(cx.params.get(b))?;
        }
        self.post.forward(cx, agg, h)
    }
}

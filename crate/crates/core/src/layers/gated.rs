use super::{missing_edges, LayerCtx, Linear, Norm, Pipeline, TechniqueFlags};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::ParameterStore;
use crate::rng::RngState;
use crate::scalar::Scalar;

/// Added to the gate sum before dividing.
pub const GATE_EPS: f64 = 1e-6;

/// GatedGCN⁺. Gate logits `g_uv = h_v W₃ + h_u W₄ (+ e_uv W₅)`, gates
/// `η = σ(g)`, aggregation `h_v W₁ + Σ_u η_uv ⊙ h_u W₂ / (Σ_u η_uv + 1e-6)`.
/// With edge features the logits, after their own norm/ReLU/dropout/residual,
/// become the next layer's edge representations.
#[derive(Clone, Debug)]
pub struct GatedGcnLayer {
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    pub w4: Linear,
    pub w5: Option<Linear>,
    pub edge_norm: Option<Norm>,
    pub post: Pipeline,
}

impl GatedGcnLayer {
    pub fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        hidden: usize,
        flags: TechniqueFlags,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut lin = |k: &str| Linear::new(store, &format!("{name}.{k}"), hidden, hidden, true, rng);
        let (w1, w2, w3, w4) = (lin("w1")?, lin("w2")?, lin("w3")?, lin("w4")?);
        let w5 = if flags.use_edge_features {
            Some(lin("w5")?)
        } else {
            None
        };
        let edge_norm = if flags.use_edge_features && flags.use_norm {
            Some(Norm::new(store, &format!("{name}.edge_norm"), hidden)?)
        } else {
            None
        };
        let post = Pipeline::new(store, name, hidden, flags, rng)?;
        Ok(Self {
            w1,
            w2,
            w3,
            w4,
            w5,
            edge_norm,
            post,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        cx: &mut LayerCtx<'_, 't, S>,
        h: Var<'t, S>,
        e: Option<Var<'t, S>>,
    ) -> Result<(Var<'t, S>, Option<Var<'t, S>>)> {
        let g = cx.graph;
        let p = cx.params;
        let self_term = self.w1.forward(p, h)?;
        let values = self.w2.forward(p, h)?.gather_rows(&g.src)?;
        let mut logits = self
            .w3
            .forward(p, h)?
            .gather_rows(&g.dst)?
            .add(self.w4.forward(p, h)?.gather_rows(&g.src)?)?;
        let e = match (&self.w5, e) {
            (Some(w5), Some(e)) => {
                logits = logits.add(w5.forward(p, e)?)?;
                Some(e)
            }
            (Some(_), None) => return Err(missing_edges()),
            (None, _) => None,
        };
        let eta = logits.sigmoid();
        let num = eta.mul(values)?.segment_sum(&g.dst, g.num_nodes)?;
        let den = eta
            .segment_sum(&g.dst, g.num_nodes)?
            .add_scalar(S::lit(GATE_EPS));
        let agg = self_term.add(num.div(den)?)?;
        let h_out = self.post.forward(cx, agg, h)?;
        let e_out = match e {
            Some(e_prev) => {
                let mut x = match &self.edge_norm {
                    Some(n) => n.forward(cx, logits)?,
                    None => logits,
                };
                x = x.relu().dropout(self.post.flags.dropout_rate, cx.mode, cx.rng)?;
                if self.post.flags.use_residual {
                    x = x.add(e_prev)?;
                }
                Some(x)
            }
            None => None,
        };
        Ok((h_out, e_out))
    }
}

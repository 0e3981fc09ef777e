//! Random-walk structural encoding and its fusion with node features.

use crate::autodiff::Var;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[num_nodes × steps]` return probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RwseMatrix {
    pub values: Tensor<f64>,
    pub steps: usize,
}

/// Entry `(v, k-1)` is `(P^k)_vv` for `P = D⁻¹A`, `k = 1..=steps`. `A` counts
/// stored arcs, so a stored self-loop contributes to `P`; nodes without
/// outgoing arcs have zero rows.
pub fn compute_rwse(graph: &Graph, steps: usize) -> Result<RwseMatrix> {
    if steps == 0 {
        bail!(Argument, "RWSE needs at least one step");
    }
    let n = graph.num_nodes;
    let mut out_deg = vec![0usize; n];
    for &(u, _) in &graph.edges {
        out_deg[u] += 1;
    }
    // Sparse rows of P.
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(u, v) in &graph.edges {
        rows[u].push((v, 1.0 / out_deg[u] as f64));
    }
    let mut power = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            power[i * n + j] += p;
        }
    }
    let mut values = vec![0.0; n * steps];
    let mut next = vec![0.0; n * n];
    for k in 0..steps {
        for v in 0..n {
            values[v * steps + k] = power[v * n + v];
        }
        if k + 1 == steps {
            break;
        }
        next.fill(0.0);
        for i in 0..n {
            let src = &power[i * n..(i + 1) * n];
            let dst = &mut next[i * n..(i + 1) * n];
            for (j, &m) in src.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                for &(c, p) in &rows[j] {
                    dst[c] += m * p;
                }
            }
        }
        std::mem::swap(&mut power, &mut next);
    }
    Ok(RwseMatrix {
        values: Tensor::new([n, steps], values)?,
        steps,
    })
}

/// `[x ‖ pe] · W_PE`.
pub fn fuse_pe<'t, S: Scalar>(x: Var<'t, S>, pe: Var<'t, S>, w_pe: Var<'t, S>) -> Result<Var<'t, S>> {
    let (xs, ps, ws) = (x.shape(), pe.shape(), w_pe.shape());
    if xs.len() != 2 || ps.len() != 2 || xs[0] != ps[0] || ws.len() != 2 || ws[0] != xs[1] + ps[1] {
        bail!(
            Dimension,
            "cannot fuse features {xs:?} and encoding {ps:?} through W_PE {ws:?}"
        );
    }
    Var::concat_last(&[x, pe])?.matmul(w_pe)
}

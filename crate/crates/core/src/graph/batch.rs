use std::sync::Arc;

use super::{Features, Graph, Label};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labels of a batch, concatenated in graph order.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    /// `[num_graphs × targets]`, row-major.
    Regression { targets: usize, values: Vec<f64> },
    Classes(Vec<usize>),
    /// `[num_graphs × labels]` zero/one entries, row-major.
    MultiLabel { labels: usize, values: Vec<f64> },
    NodeClasses(Vec<usize>),
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        match self {
            BatchLabels::Regression { targets, values } => values.len() / (*targets).max(1),
            BatchLabels::MultiLabel { labels, values } => values.len() / (*labels).max(1),
            BatchLabels::Classes(c) | BatchLabels::NodeClasses(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint union of graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_nodes: usize,
    pub num_graphs: usize,
    /// Arc sources with node offsets applied.
    pub src: Arc<[usize]>,
    /// Arc destinations with node offsets applied.
    pub dst: Arc<[usize]>,
    pub node_feat: Features,
    pub edge_feat: Option<Features>,
    /// Graph index of every node; non-decreasing.
    pub graph_id: Arc<[usize]>,
    pub graph_sizes: Vec<usize>,
    pub labels: BatchLabels,
    /// `d̂` per node.
    pub hat_degrees: Vec<f64>,
    /// RWSE steps and `[num_nodes × steps]` values, when attached.
    pub rwse: Option<(usize, Vec<f64>)>,
}

impl GraphBatch {
    pub fn num_arcs(&self) -> usize {
        self.src.len()
    }

    pub fn rwse_tensor<S: Scalar>(&self) -> Option<Tensor<S>> {
        self.rwse.as_ref().map(|(k, v)| {
            Tensor::from_f64([self.num_nodes, *k], v).expect("rwse cache matches batch size")
        })
    }
}

pub fn batch_graphs(graphs: &[&Graph]) -> Result<GraphBatch> {
    let Some(first) = graphs.first() else {
        bail!(Argument, "cannot batch an empty list of graphs");
    };
    let mut node_feat = first.node_feat.empty_like();
    let mut edge_feat = first.edge_feat.as_ref().map(Features::empty_like);
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let total_arcs: usize = graphs.iter().map(|g| g.edges.len()).sum();
    let mut src = Vec::with_capacity(total_arcs);
    let mut dst = Vec::with_capacity(total_arcs);
    let mut graph_id = Vec::with_capacity(total_nodes);
    let mut graph_sizes = Vec::with_capacity(graphs.len());
    let mut labels = match &first.label {
        Label::Regression(v) => BatchLabels::Regression {
            targets: v.len(),
            values: Vec::new(),
        },
        Label::Class(_) => BatchLabels::Classes(Vec::new()),
        Label::MultiLabel(v) => BatchLabels::MultiLabel {
            labels: v.len(),
            values: Vec::new(),
        },
        Label::NodeClasses(_) => BatchLabels::NodeClasses(Vec::new()),
    };
    let mut offset = 0;
    for (k, g) in graphs.iter().enumerate() {
        node_feat.extend(&g.node_feat)?;
        match (&mut edge_feat, &g.edge_feat) {
            (Some(acc), Some(ef)) => acc.extend(ef)?,
            (None, None) => {}
            _ => bail!(Schema, "graph {k} disagrees with graph 0 on edge features"),
        }
        for &(u, v) in &g.edges {
            src.push(u + offset);
            dst.push(v + offset);
        }
        graph_id.extend(std::iter::repeat_n(k, g.num_nodes));
        graph_sizes.push(g.num_nodes);
        match (&mut labels, &g.label) {
            (BatchLabels::Regression { targets, values }, Label::Regression(v))
                if v.len() == *targets =>
            {
                values.extend_from_slice(v)
            }
            (BatchLabels::Classes(acc), Label::Class(c)) => acc.push(*c),
            (BatchLabels::MultiLabel { labels, values }, Label::MultiLabel(v))
                if v.len() == *labels =>
            {
                values.extend(v.iter().map(|&b| b as f64))
            }
            (BatchLabels::NodeClasses(acc), Label::NodeClasses(v)) => acc.extend_from_slice(v),
            _ => bail!(Schema, "graph {k} has a label incompatible with graph 0"),
        }
        offset += g.num_nodes;
    }
    let mut hat_degrees = vec![1.0; total_nodes];
    for &v in &dst {
        hat_degrees[v] += 1.0;
    }
    Ok(GraphBatch {
        num_nodes: total_nodes,
        num_graphs: graphs.len(),
        src: src.into(),
        dst: dst.into(),
        node_feat,
        edge_feat,
        graph_id: graph_id.into(),
        graph_sizes,
        labels,
        hat_degrees,
        rwse: None,
    })
}

/// `d̂_v = 1 + in-degree(v)`: the implicit self-loop plus every stored arc
/// into `v`.
pub fn compute_hat_degrees(batch: &GraphBatch) -> Tensor<f64> {
    let mut d = vec![1.0; batch.num_nodes];
    for &v in batch.dst.iter() {
        d[v] += 1.0;
    }
    Tensor::vector(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize, label: usize) -> Graph {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::from_undirected(
            n,
            &pairs,
            Features::Continuous {
                dim: 1,
                data: vec![1.0; n],
            },
            None,
            Label::Class(label),
        )
        .unwrap()
    }

    #[test]
    fn offsets_shift_second_graph() {
        let (a, b) = (path(2, 0), path(3, 1));
        let batch = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(batch.src[2], 2);
        assert_eq!(batch.dst[2], 3);
        assert_eq!(&*batch.graph_id, &[0, 0, 1, 1, 1]);
        assert_eq!(batch.labels, BatchLabels::Classes(vec![0, 1]));
    }

    #[test]
    fn empty_list_is_an_argument_error() {
        assert!(matches!(batch_graphs(&[]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn mixed_feature_widths_are_rejected() {
        let a = path(2, 0);
        let mut b = path(2, 0);
        b.node_feat = Features::Continuous {
            dim: 2,
            data: vec![0.0; 4],
        };
        assert!(matches!(batch_graphs(&[&a, &b]), Err(crate::Error::Schema(_))));
    }

    #[test]
    fn triangle_hat_degrees() {
        let g = Graph::from_undirected(
            3,
            &[(0, 1), (1, 2), (2, 0)],
            Features::Continuous {
                dim: 1,
                data: vec![0.0; 3],
            },
            None,
            Label::Class(0),
        )
        .unwrap();
        let b = batch_graphs(&[&g]).unwrap();
        assert_eq!(compute_hat_degrees(&b).data(), &[3.0, 3.0, 3.0]);
    }
}

//! Graphs, datasets, disjoint-union batching, file I/O and synthetic
//! generators.
//!
//! Undirected graphs are stored as directed arcs in both directions, laid out
//! pairwise: the arcs of undirected edge `i` sit at positions `2i` and
//! `2i + 1`. A self-loop occupies a single arc. Every layer then treats
//! `N(v)` as the set of in-neighbors of `v`.

mod batch;
mod dataset;
mod io;
mod synth;

pub use batch::{batch_graphs, compute_hat_degrees, BatchLabels, GraphBatch};
pub use dataset::{Dataset, Splits};
pub use io::{load_dataset, save_dataset, write_dataset};
pub use synth::{
    count_triangles, generate_regression_task, generate_sbm_node_task, RegressionParams,
    SbmParams, REGRESSION_EDGE_PROB, REGRESSION_EDGE_VOCAB, REGRESSION_NODE_VOCAB,
};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Prediction target family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GraphRegression,
    GraphClassification,
    GraphMultilabel,
    NodeClassification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::GraphRegression => "graph_regression",
            Task::GraphClassification => "graph_classification",
            Task::GraphMultilabel => "graph_multilabel",
            Task::NodeClassification => "node_classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "graph_regression" => Task::GraphRegression,
            "graph_classification" => Task::GraphClassification,
            "graph_multilabel" => Task::GraphMultilabel,
            "node_classification" => Task::NodeClassification,
            other => bail!(Config, "unknown task {other:?}"),
        })
    }

    pub fn is_node_level(self) -> bool {
        self == Task::NodeClassification
    }
}

/// Declared layout of node or edge features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSchema {
    None,
    /// One integer column per entry, each with its vocabulary size.
    Categorical(Vec<usize>),
    /// Dense real vectors of the given width.
    Continuous(usize),
}

impl FeatureSchema {
    pub fn is_none(&self) -> bool {
        matches!(self, FeatureSchema::None)
    }

    /// Width of the raw feature vector: one-hot width summed over columns for
    /// categorical features.
    pub fn raw_width(&self) -> usize {
        match self {
            FeatureSchema::None => 0,
            FeatureSchema::Categorical(v) => v.iter().sum(),
            FeatureSchema::Continuous(d) => *d,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FeatureSchema::None => "none",
            FeatureSchema::Categorical(_) => "categorical",
            FeatureSchema::Continuous(_) => "continuous",
        }
    }
}

/// Everything a model needs to know about a dataset to be built for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub task: Task,
    pub node: FeatureSchema,
    pub edge: FeatureSchema,
    /// Regression targets, classes, or labels, depending on the task.
    pub num_targets: usize,
}

/// Row-major per-node or per-edge features.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Categorical { cols: usize, data: Vec<usize> },
    Continuous { dim: usize, data: Vec<f64> },
}

impl Features {
    pub fn rows(&self) -> usize {
        match self {
            Features::Categorical { cols, data } => {
                if *cols == 0 {
                    0
                } else {
                    data.len() / cols
                }
            }
            Features::Continuous { dim, data } => {
                if *dim == 0 {
                    0
                } else {
                    data.len() / dim
                }
            }
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Features::Categorical { cols, .. } => *cols,
            Features::Continuous { dim, .. } => *dim,
        }
    }

    pub fn empty_like(&self) -> Features {
        match self {
            Features::Categorical { cols, .. } => Features::Categorical {
                cols: *cols,
                data: Vec::new(),
            },
            Features::Continuous { dim, .. } => Features::Continuous {
                dim: *dim,
                data: Vec::new(),
            },
        }
    }

    /// Appends rows of a compatible feature block.
    pub fn extend(&mut self, other: &Features) -> Result<()> {
        match (self, other) {
            (
                Features::Categorical { cols, data },
                Features::Categorical { cols: c2, data: d2 },
            ) if *cols == *c2 => data.extend_from_slice(d2),
            (Features::Continuous { dim, data }, Features::Continuous { dim: e2, data: d2 })
                if *dim == *e2 =>
            {
                data.extend_from_slice(d2)
            }
            (a, b) => bail!(
                Schema,
                "feature layouts differ: {} x{} vs {} x{}",
                a.kind(),
                a.width(),
                b.kind(),
                b.width()
            ),
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Features {
        match self {
            Features::Categorical { cols, data } => Features::Categorical {
                cols: *cols,
                data: rows
                    .iter()
                    .flat_map(|&r| data[r * cols..(r + 1) * cols].iter().copied())
                    .collect(),
            },
            Features::Continuous { dim, data } => Features::Continuous {
                dim: *dim,
                data: rows
                    .iter()
                    .flat_map(|&r| data[r * dim..(r + 1) * dim].iter().copied())
                    .collect(),
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Features::Categorical { .. } => "categorical",
            Features::Continuous { .. } => "continuous",
        }
    }

    /// Checks the block against a declared schema.
    pub fn conforms(&self, schema: &FeatureSchema) -> Result<()> {
        match (self, schema) {
            (Features::Categorical { cols, data }, FeatureSchema::Categorical(vocab)) => {
                if *cols != vocab.len() {
                    bail!(Schema, "{cols} categorical columns, schema declares {}", vocab.len());
                }
                for (i, &v) in data.iter().enumerate() {
                    if v >= vocab[i % cols] {
                        bail!(
                            Validation,
                            "category {v} in column {} exceeds vocabulary {}",
                            i % cols,
                            vocab[i % cols]
                        );
                    }
                }
                Ok(())
            }
            (Features::Continuous { dim, .. }, FeatureSchema::Continuous(d)) if dim == d => Ok(()),
            (f, s) => bail!(
                Schema,
                "{} features of width {} do not match schema {:?}",
                f.kind(),
                f.width(),
                s
            ),
        }
    }
}

/// Ground truth attached to one graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Regression(Vec<f64>),
    Class(usize),
    MultiLabel(Vec<u8>),
    NodeClasses(Vec<usize>),
}

impl Label {
    fn matches(&self, task: Task) -> bool {
        matches!(
            (self, task),
            (Label::Regression(_), Task::GraphRegression)
                | (Label::Class(_), Task::GraphClassification)
                | (Label::MultiLabel(_), Task::GraphMultilabel)
                | (Label::NodeClasses(_), Task::NodeClassification)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    /// Directed arcs `(src, dst)` in the pairwise layout described above.
    pub edges: Vec<(usize, usize)>,
    pub node_feat: Features,
    /// One row per stored arc.
    pub edge_feat: Option<Features>,
    pub label: Label,
}

impl Graph {
    /// Builds a graph from undirected edges listed once each; arcs are
    /// mirrored and per-edge features duplicated onto both arcs.
    pub fn from_undirected(
        num_nodes: usize,
        pairs: &[(usize, usize)],
        node_feat: Features,
        edge_feat: Option<Features>,
        label: Label,
    ) -> Result<Self> {
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= num_nodes || v >= num_nodes) {
            bail!(
                Validation,
                "edge ({u}, {v}) references a node outside [0, {num_nodes})"
            );
        }
        if let Some(ef) = &edge_feat {
            if ef.rows() != pairs.len() {
                bail!(
                    Validation,
                    "{} edge feature rows for {} edges",
                    ef.rows(),
                    pairs.len()
                );
            }
        }
        let mut edges = Vec::with_capacity(pairs.len() * 2);
        let mut rows = Vec::with_capacity(pairs.len() * 2);
        for (i, &(u, v)) in pairs.iter().enumerate() {
            edges.push((u, v));
            rows.push(i);
            if u != v {
                edges.push((v, u));
                rows.push(i);
            }
        }
        let edge_feat = edge_feat.map(|f| f.select_rows(&rows));
        let g = Self {
            num_nodes,
            edges,
            node_feat,
            edge_feat,
            label,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if let Some(&(u, v)) = self.edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            bail!(Validation, "edge ({u}, {v}) references a node outside [0, {n})");
        }
        if self.node_feat.rows() != n {
            bail!(
                Validation,
                "{} node feature rows for {n} nodes",
                self.node_feat.rows()
            );
        }
        if let Some(ef) = &self.edge_feat {
            if ef.rows() != self.edges.len() {
                bail!(
                    Validation,
                    "{} edge feature rows for {} arcs",
                    ef.rows(),
                    self.edges.len()
                );
            }
        }
        if let Label::NodeClasses(y) = &self.label {
            if y.len() != n {
                bail!(Validation, "{} node labels for {n} nodes", y.len());
            }
        }
        Ok(())
    }

    /// Checks features and label against a dataset schema.
    pub fn conforms(&self, schema: &Schema) -> Result<()> {
        self.node_feat.conforms(&schema.node)?;
        match (&self.edge_feat, &schema.edge) {
            (None, FeatureSchema::None) => {}
            (Some(f), s) if !s.is_none() => f.conforms(s)?,
            (None, _) if self.edges.is_empty() => {}
            (Some(f), FeatureSchema::None) if f.rows() == 0 => {}
            _ => bail!(Schema, "edge features do not match schema {:?}", schema.edge),
        }
        if !self.label.matches(schema.task) {
            bail!(Schema, "label kind does not match task {}", schema.task.name());
        }
        let t = schema.num_targets;
        match &self.label {
            Label::Regression(v) if v.len() != t => {
                bail!(Validation, "{} regression targets, expected {t}", v.len())
            }
            Label::Class(c) if *c >= t => bail!(Validation, "class {c} out of range for {t} classes"),
            Label::MultiLabel(v) if v.len() != t || v.iter().any(|&b| b > 1) => {
                bail!(Validation, "multilabel vector must hold {t} zero/one entries")
            }
            Label::NodeClasses(v) if v.iter().any(|&c| c >= t) => {
                bail!(Validation, "node class out of range for {t} classes")
            }
            _ => {}
        }
        Ok(())
    }

    /// Undirected edges in listing order, if the arcs follow the pairwise
    /// layout; also returns the arc index carrying each edge's features.
    pub fn undirected_pairs(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.edges.len() {
            let (u, v) = self.edges[i];
            if u == v {
                out.push((u, v, i));
                i += 1;
                continue;
            }
            if self.edges.get(i + 1) != Some(&(v, u)) {
                bail!(Validation, "arc {i} ({u}, {v}) is not followed by its mirror");
            }
            out.push((u, v, i));
            i += 2;
        }
        Ok(out)
    }

    /// Relabels node `i` as `perm[i]`, keeping the arc order.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes;
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let label = match &self.label {
            Label::NodeClasses(y) => Label::NodeClasses(inverse.iter().map(|&o| y[o]).collect()),
            other => other.clone(),
        };
        Graph {
            num_nodes: n,
            edges: self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            node_feat: self.node_feat.select_rows(&inverse),
            edge_feat: self.edge_feat.clone(),
            label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Features {
        Features::Categorical {
            cols: 1,
            data: vec![0; n],
        }
    }

    #[test]
    fn undirected_edge_becomes_two_arcs() {
        let g = Graph::from_undirected(2, &[(0, 1)], feats(2), None, Label::Class(0)).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        let g = Graph::from_undirected(1, &[(0, 0)], feats(1), None, Label::Class(0)).unwrap();
        assert_eq!(g.edges, vec![(0, 0)]);
    }

    #[test]
    fn out_of_range_endpoint_is_rejected() {
        let err = Graph::from_undirected(3, &[(0, 7)], feats(3), None, Label::Class(0));
        assert!(matches!(err, Err(crate::Error::Validation(_))));
    }

    #[test]
    fn permutation_moves_features_and_labels() {
        let g = Graph::from_undirected(
            3,
            &[(0, 1)],
            Features::Categorical {
                cols: 1,
                data: vec![5, 6, 7],
            },
            None,
            Label::NodeClasses(vec![0, 1, 2]),
        )
        .unwrap();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(p.edges, vec![(2, 0), (0, 2)]);
        assert_eq!(
            p.node_feat,
            Features::Categorical {
                cols: 1,
                data: vec![6, 7, 5]
            }
        );
        assert_eq!(p.label, Label::NodeClasses(vec![1, 2, 0]));
    }
}

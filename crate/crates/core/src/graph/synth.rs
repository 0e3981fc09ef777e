//! Synthetic datasets: SBM node classification and triangle-density
//! regression.

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, Features, Graph, Label, Schema, Splits, Task};
use crate::error::{bail, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    pub num_blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Probability that a node's feature is replaced by the unknown symbol.
    pub feature_noise: f64,
}

/// Graphs drawn from a stochastic block model. Node labels are block ids;
/// node features are the block id, or the unknown symbol `num_blocks` with
/// probability `feature_noise`.
pub fn generate_sbm_node_task(p: &SbmParams, rng: &mut RngState) -> Result<Dataset> {
    let prob = |x: f64| (0.0..=1.0).contains(&x);
    if !(prob(p.p_inter) && prob(p.p_intra) && p.p_inter < p.p_intra) {
        bail!(
            Config,
            "need 0 <= p_inter < p_intra <= 1, got p_inter={} p_intra={}",
            p.p_inter,
            p.p_intra
        );
    }
    if !prob(p.feature_noise) {
        bail!(Config, "feature_noise must lie in [0, 1], got {}", p.feature_noise);
    }
    if p.num_blocks < 2 {
        bail!(Config, "num_blocks must be at least 2, got {}", p.num_blocks);
    }
    let n = p.nodes_per_graph;
    let mut graphs = Vec::with_capacity(p.num_graphs);
    for _ in 0..p.num_graphs {
        let mut block: Vec<usize> = (0..n).map(|i| i % p.num_blocks).collect();
        rng.shuffle(&mut block);
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let q = if block[u] == block[v] { p.p_intra } else { p.p_inter };
                if rng.bernoulli(q) {
                    pairs.push((u, v));
                }
            }
        }
        let feat = block
            .iter()
            .map(|&b| if rng.bernoulli(p.feature_noise) { p.num_blocks } else { b })
            .collect();
        graphs.push(Graph::from_undirected(
            n,
            &pairs,
            Features::Categorical { cols: 1, data: feat },
            None,
            Label::NodeClasses(block),
        )?);
    }
    let schema = Schema {
        task: Task::NodeClassification,
        node: FeatureSchema::Categorical(vec![p.num_blocks + 1]),
        edge: FeatureSchema::None,
        num_targets: p.num_blocks,
    };
    Dataset::new(graphs, Splits::ordered_80_10_10(p.num_graphs), schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams {
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
}

pub const REGRESSION_EDGE_PROB: f64 = 0.3;
pub const REGRESSION_NODE_VOCAB: usize = 4;
pub const REGRESSION_EDGE_VOCAB: usize = 3;

/// Brute-force count of triangles over undirected simple edges.
pub fn count_triangles(num_nodes: usize, pairs: &[(usize, usize)]) -> usize {
    let mut adj = vec![vec![false; num_nodes]; num_nodes];
    for &(u, v) in pairs {
        if u != v {
            adj[u][v] = true;
            adj[v][u] = true;
        }
    }
    let mut count = 0;
    for a in 0..num_nodes {
        for b in a + 1..num_nodes {
            if !adj[a][b] {
                continue;
            }
            for c in b + 1..num_nodes {
                if adj[a][c] && adj[b][c] {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Erdős–Rényi graphs with random categorical node and edge features. The
/// target is `3 · triangles / |V|`.
pub fn generate_regression_task(p: &RegressionParams, rng: &mut RngState) -> Result<Dataset> {
    if p.min_nodes == 0 || p.min_nodes > p.max_nodes {
        bail!(
            Config,
            "invalid size range [{}, {}]",
            p.min_nodes,
            p.max_nodes
        );
    }
    let mut graphs = Vec::with_capacity(p.num_graphs);
    for _ in 0..p.num_graphs {
        let n = rng.int_inclusive(p.min_nodes, p.max_nodes);
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(REGRESSION_EDGE_PROB) {
                    pairs.push((u, v));
                }
            }
        }
        let node = (0..n).map(|_| rng.below(REGRESSION_NODE_VOCAB)).collect();
        let edge = (0..pairs.len()).map(|_| rng.below(REGRESSION_EDGE_VOCAB)).collect();
        let y = 3.0 * count_triangles(n, &pairs) as f64 / n as f64;
        graphs.push(Graph::from_undirected(
            n,
            &pairs,
            Features::Categorical { cols: 1, data: node },
            Some(Features::Categorical { cols: 1, data: edge }),
            Label::Regression(vec![y]),
        )?);
    }
    let schema = Schema {
        task: Task::GraphRegression,
        node: FeatureSchema::Categorical(vec![REGRESSION_NODE_VOCAB]),
        edge: FeatureSchema::Categorical(vec![REGRESSION_EDGE_VOCAB]),
        num_targets: 1,
    };
    Dataset::new(graphs, Splits::ordered_80_10_10(p.num_graphs), schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sbm(noise: f64, p_intra: f64, p_inter: f64) -> SbmParams {
        SbmParams {
            num_graphs: 5,
            nodes_per_graph: 12,
            num_blocks: 3,
            p_intra,
            p_inter,
            feature_noise: noise,
        }
    }

    #[test]
    fn degenerate_sbm_is_union_of_cliques() {
        let ds = generate_sbm_node_task(&sbm(0.0, 1.0, 0.0), &mut RngState::new(1)).unwrap();
        for g in &ds.graphs {
            let Label::NodeClasses(y) = &g.label else { panic!() };
            assert!(g.edges.iter().all(|&(u, v)| y[u] == y[v]));
            // 3 cliques of 4 nodes: 3 * 6 undirected edges.
            assert_eq!(g.edges.len(), 36);
        }
    }

    #[test]
    fn full_noise_hides_every_feature() {
        let ds = generate_sbm_node_task(&sbm(1.0, 0.5, 0.1), &mut RngState::new(2)).unwrap();
        for g in &ds.graphs {
            let Features::Categorical { data, .. } = &g.node_feat else { panic!() };
            assert!(data.iter().all(|&x| x == 3));
        }
    }

    #[test]
    fn invalid_probabilities_are_config_errors() {
        let err = generate_sbm_node_task(&sbm(0.0, 0.1, 0.5), &mut RngState::new(0));
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn triangle_label_is_one() {
        assert_eq!(count_triangles(3, &[(0, 1), (1, 2), (0, 2)]), 1);
        assert_eq!(count_triangles(4, &[]), 0);
    }
}

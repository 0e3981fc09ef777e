use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{batch_graphs, GraphBatch};
use super::{Graph, Schema};
use crate::error::{bail, Result};
use crate::pe::compute_rwse;

/// Graph indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        Ok(match name {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            other => bail!(Argument, "unknown split {other:?}; expected train, val or test"),
        })
    }

    /// First `n·8/10` indices for training, the next `n/10` for validation,
    /// the rest for test.
    pub fn ordered_80_10_10(n: usize) -> Self {
        let train = n * 8 / 10;
        let val = n / 10;
        Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..n).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct RwseCache {
    steps: usize,
    per_graph: Vec<Arc<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub splits: Splits,
    pub schema: Schema,
    rwse: Option<RwseCache>,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, splits: Splits, schema: Schema) -> Result<Self> {
        for (i, g) in graphs.iter().enumerate() {
            g.validate()
                .and_then(|_| g.conforms(&schema))
                .map_err(|e| crate::Error::Validation(format!("graph {i}: {e}")))?;
        }
        let n = graphs.len();
        let mut seen = vec![false; n];
        for (name, idx) in [
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
        ] {
            for &i in idx {
                if i >= n {
                    bail!(Validation, "{name} split index {i} out of range for {n} graphs");
                }
                if seen[i] {
                    bail!(Validation, "graph {i} appears in more than one split");
                }
                seen[i] = true;
            }
        }
        Ok(Self {
            graphs,
            splits,
            schema,
            rwse: None,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Computes and caches `steps`-step RWSE for every graph. A no-op when a
    /// cache for the same `steps` exists.
    pub fn cache_rwse(&mut self, steps: usize) -> Result<()> {
        if self.rwse.as_ref().is_some_and(|c| c.steps == steps) {
            return Ok(());
        }
        let per_graph = self
            .graphs
            .par_iter()
            .map(|g| compute_rwse(g, steps).map(|m| Arc::new(m.values.into_data())))
            .collect::<Result<Vec<_>>>()?;
        self.rwse = Some(RwseCache { steps, per_graph });
        Ok(())
    }

    pub fn rwse_steps(&self) -> Option<usize> {
        self.rwse.as_ref().map(|c| c.steps)
    }

    /// Batches the given graphs, attaching cached RWSE when present.
    pub fn batch(&self, indices: &[usize]) -> Result<GraphBatch> {
        let graphs: Vec<&Graph> = indices.iter().map(|&i| &self.graphs[i]).collect();
        let mut batch = batch_graphs(&graphs)?;
        if let Some(cache) = &self.rwse {
            let mut values = Vec::with_capacity(batch.num_nodes * cache.steps);
            for &i in indices {
                values.extend_from_slice(&cache.per_graph[i]);
            }
            batch.rwse = Some((cache.steps, values));
        }
        Ok(batch)
    }

    /// Average node and undirected-edge counts.
    pub fn summary(&self) -> (f64, f64) {
        let n = self.graphs.len().max(1) as f64;
        let nodes: usize = self.graphs.iter().map(|g| g.num_nodes).sum();
        let edges: usize = self
            .graphs
            .iter()
            .map(|g| {
                let loops = g.edges.iter().filter(|(u, v)| u == v).count();
                loops + (g.edges.len() - loops) / 2
            })
            .sum();
        (nodes as f64 / n, edges as f64 / n)
    }
}

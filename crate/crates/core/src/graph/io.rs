//! JSON Lines interchange format.
//!
//! Line 1 is a header:
//!
//! ```text
//! {"task": "node_classification",
//!  "node_feat_kind": "categorical", "node_feat_dim_or_vocab": [5],
//!  "edge_feat_kind": "none", "edge_feat_dim_or_vocab": 0,
//!  "num_targets": 4,
//!  "splits": {"train": [0, 1], "val": [2], "test": [3]}}
//! ```
//!
//! Every following line is one graph:
//!
//! ```text
//! {"num_nodes": 3, "edges": [[0, 1], [1, 2]],
//!  "node_feat": [[0], [4], [2]], "edge_feat": [[1], [0]], "label": [0, 3, 2]}
//! ```
//!
//! Undirected edges are listed once and mirrored on load. `node_feat` holds
//! one row per node (category indices or real values), `edge_feat` one row per
//! listed edge. `num_targets` is optional and inferred from the labels when
//! absent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Dataset, FeatureSchema, Features, Graph, Label, Schema, Splits, Task};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: String,
    node_feat_kind: String,
    node_feat_dim_or_vocab: Value,
    edge_feat_kind: String,
    #[serde(default)]
    edge_feat_dim_or_vocab: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_targets: Option<usize>,
    splits: Splits,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_feat: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_feat: Option<Vec<Vec<f64>>>,
    label: Value,
}

fn feature_schema(kind: &str, spec: &Value) -> std::result::Result<FeatureSchema, String> {
    let as_usize = |v: &Value| {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| format!("expected a non-negative integer, found {v}"))
    };
    match kind {
        "none" => Ok(FeatureSchema::None),
        "continuous" => Ok(FeatureSchema::Continuous(as_usize(spec)?)),
        "categorical" => match spec {
            Value::Array(items) => Ok(FeatureSchema::Categorical(
                items.iter().map(as_usize).collect::<std::result::Result<_, _>>()?,
            )),
            other => Ok(FeatureSchema::Categorical(vec![as_usize(other)?])),
        },
        other => Err(format!("unknown feature kind {other:?}")),
    }
}

fn schema_spec(s: &FeatureSchema) -> Value {
    match s {
        FeatureSchema::None => Value::from(0),
        FeatureSchema::Categorical(v) => Value::from(v.clone()),
        FeatureSchema::Continuous(d) => Value::from(*d),
    }
}

fn features(rows: &[Vec<f64>], schema: &FeatureSchema) -> std::result::Result<Features, String> {
    match schema {
        FeatureSchema::None => Err("features given but schema declares none".into()),
        FeatureSchema::Continuous(dim) => {
            let mut data = Vec::with_capacity(rows.len() * dim);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != *dim {
                    return Err(format!("feature row {i} has width {}, expected {dim}", r.len()));
                }
                data.extend_from_slice(r);
            }
            Ok(Features::Continuous { dim: *dim, data })
        }
        FeatureSchema::Categorical(vocab) => {
            let cols = vocab.len();
            let mut data = Vec::with_capacity(rows.len() * cols);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != cols {
                    return Err(format!("feature row {i} has width {}, expected {cols}", r.len()));
                }
                for &x in r {
                    if x < 0.0 || x.fract() != 0.0 {
                        return Err(format!("feature row {i}: {x} is not a category index"));
                    }
                    data.push(x as usize);
                }
            }
            Ok(Features::Categorical { cols, data })
        }
    }
}

fn feature_rows(f: &Features, rows: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    match f {
        Features::Categorical { cols, data } => rows
            .map(|r| data[r * cols..(r + 1) * cols].iter().map(|&x| x as f64).collect())
            .collect(),
        Features::Continuous { dim, data } => {
            rows.map(|r| data[r * dim..(r + 1) * dim].to_vec()).collect()
        }
    }
}

fn label(v: &Value, task: Task) -> std::result::Result<Label, String> {
    let index = |v: &Value| {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| format!("expected a class index, found {v}"))
    };
    let list = |v: &Value| -> std::result::Result<Vec<Value>, String> {
        v.as_array().cloned().ok_or_else(|| format!("expected an array label, found {v}"))
    };
    Ok(match task {
        Task::GraphRegression => match v {
            Value::Array(items) => Label::Regression(
                items
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| format!("non-numeric target {x}")))
                    .collect::<std::result::Result<_, _>>()?,
            ),
            x => Label::Regression(vec![x.as_f64().ok_or_else(|| format!("non-numeric target {x}"))?]),
        },
        Task::GraphClassification => Label::Class(index(v)?),
        Task::GraphMultilabel => Label::MultiLabel(
            list(v)?
                .iter()
                .map(|x| match x.as_u64() {
                    Some(b @ (0 | 1)) => Ok(b as u8),
                    _ => Err(format!("multilabel entries must be 0 or 1, found {x}")),
                })
                .collect::<std::result::Result<_, _>>()?,
        ),
        Task::NodeClassification => {
            Label::NodeClasses(list(v)?.iter().map(index).collect::<std::result::Result<_, _>>()?)
        }
    })
}

fn label_value(l: &Label) -> Value {
    match l {
        Label::Regression(v) if v.len() == 1 => Value::from(v[0]),
        Label::Regression(v) => Value::from(v.clone()),
        Label::Class(c) => Value::from(*c),
        Label::MultiLabel(v) => Value::from(v.clone()),
        Label::NodeClasses(v) => Value::from(v.clone()),
    }
}

fn infer_targets(task: Task, labels: &[&Label]) -> usize {
    let max_class = |it: &mut dyn Iterator<Item = usize>| it.max().map_or(0, |m| m + 1);
    match task {
        Task::GraphRegression | Task::GraphMultilabel => labels
            .first()
            .map_or(0, |l| match l {
                Label::Regression(v) => v.len(),
                Label::MultiLabel(v) => v.len(),
                _ => 0,
            }),
        Task::GraphClassification => max_class(&mut labels.iter().filter_map(|l| match l {
            Label::Class(c) => Some(*c),
            _ => None,
        })),
        Task::NodeClassification => max_class(&mut labels.iter().flat_map(|l| match l {
            Label::NodeClasses(v) => v.clone(),
            _ => Vec::new(),
        })),
    }
}

/// Reads a dataset, validating every record against the header.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "empty file; expected a header record".into())),
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("header: {e}")))?;
    let task = Task::parse(&header.task).map_err(|e| parse_err(1, e.to_string()))?;
    let node = feature_schema(&header.node_feat_kind, &header.node_feat_dim_or_vocab)
        .map_err(|m| parse_err(1, format!("node features: {m}")))?;
    if node.is_none() {
        return Err(parse_err(1, "node features are required".into()));
    }
    let edge = feature_schema(&header.edge_feat_kind, &header.edge_feat_dim_or_vocab)
        .map_err(|m| parse_err(1, format!("edge features: {m}")))?;

    let mut graphs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let record = graphs.len();
        let invalid = |m: String| Error::Validation(format!("record {record} (line {lineno}): {m}"));
        let node_feat = features(&rec.node_feat, &node).map_err(invalid)?;
        let edge_feat = match (&rec.edge_feat, &edge) {
            (None, FeatureSchema::None) => None,
            (Some(_), FeatureSchema::None) => {
                return Err(invalid("edge_feat given but header declares none".into()))
            }
            (Some(rows), s) => Some(features(rows, s).map_err(invalid)?),
            (None, _) => return Err(invalid("missing edge_feat".into())),
        };
        let label = label(&rec.label, task).map_err(|m| parse_err(lineno, m))?;
        let pairs: Vec<_> = rec.edges.iter().map(|&[u, v]| (u, v)).collect();
        let g = Graph::from_undirected(rec.num_nodes, &pairs, node_feat, edge_feat, label)
            .map_err(|e| invalid(e.to_string()))?;
        graphs.push(g);
    }
    let num_targets = header
        .num_targets
        .unwrap_or_else(|| infer_targets(task, &graphs.iter().map(|g| &g.label).collect::<Vec<_>>()));
    let schema = Schema {
        task,
        node,
        edge,
        num_targets,
    };
    Dataset::new(graphs, header.splits, schema)
}

/// Serializes a dataset in the interchange format.
pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let header = Header {
        task: ds.schema.task.name().into(),
        node_feat_kind: ds.schema.node.kind_name().into(),
        node_feat_dim_or_vocab: schema_spec(&ds.schema.node),
        edge_feat_kind: ds.schema.edge.kind_name().into(),
        edge_feat_dim_or_vocab: schema_spec(&ds.schema.edge),
        num_targets: Some(ds.schema.num_targets),
        splits: ds.splits.clone(),
    };
    let io = |e: std::io::Error| Error::io("<output>", e);
    serde_json::to_writer(&mut *out, &header).map_err(|e| Error::io("<output>", e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for g in &ds.graphs {
        let pairs = g.undirected_pairs()?;
        let rec = Record {
            num_nodes: g.num_nodes,
            edges: pairs.iter().map(|&(u, v, _)| [u, v]).collect(),
            node_feat: feature_rows(&g.node_feat, 0..g.num_nodes),
            edge_feat: g
                .edge_feat
                .as_ref()
                .map(|f| feature_rows(f, pairs.iter().map(|p| p.2))),
            label: label_value(&g.label),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(|e| Error::io("<output>", e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, text).unwrap();
        load_dataset(&p)
    }

    const HEADER: &str = r#"{"task":"graph_regression","node_feat_kind":"categorical","node_feat_dim_or_vocab":[3],"edge_feat_kind":"none","splits":{"train":[0],"val":[],"test":[]}}"#;

    #[test]
    fn undirected_edge_is_mirrored() {
        let ds = load_str(&format!(
            "{HEADER}\n{{\"num_nodes\":2,\"edges\":[[0,1]],\"node_feat\":[[0],[2]],\"label\":0.5}}\n"
        ))
        .unwrap();
        assert_eq!(ds.schema.task, Task::GraphRegression);
        assert_eq!(ds.graphs[0].edges, vec![(0, 1), (1, 0)]);
        assert_eq!(ds.schema.num_targets, 1);
    }

    #[test]
    fn bad_endpoint_names_the_record() {
        let err = load_str(&format!(
            "{HEADER}\n{{\"num_nodes\":3,\"edges\":[[0,7]],\"node_feat\":[[0],[0],[0]],\"label\":0.5}}\n"
        ))
        .unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("record 0")), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_str(&format!("{HEADER}\n{{\"num_nodes\": oops}}\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}

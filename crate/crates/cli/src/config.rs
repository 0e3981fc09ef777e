//! Run specifications: `[model]`, `[train]` and `[data]` sections of flat
//! `key = value` pairs (TOML syntax). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use gnnplus::graph::{
    generate_regression_task, generate_sbm_node_task, load_dataset, FeatureSchema,
    RegressionParams, SbmParams,
};
use gnnplus::{
    Backbone, Dataset, MetricName, ModelConfig, Readout, RngState, Schema, Selection, Task,
    TechniqueFlags, TrainConfig,
};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    model: RawModel,
    train: RawTrain,
    data: RawData,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    backbone: Backbone,
    num_layers: usize,
    hidden_dim: usize,
    use_edge_features: bool,
    use_norm: bool,
    dropout: f64,
    use_residual: bool,
    use_ffn: bool,
    use_pe: bool,
    #[serde(default)]
    pe_steps: usize,
    readout: String,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    learning_rate: f64,
    epochs: usize,
    warmup_epochs: usize,
    weight_decay: f64,
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    eval_metric: Option<String>,
    selection: Option<Selection>,
    grad_clip: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    task: Option<String>,
    node_feat_kind: Option<String>,
    node_feat_dim_or_vocab: Option<toml::Value>,
    edge_feat_kind: Option<String>,
    edge_feat_dim_or_vocab: Option<toml::Value>,
    num_targets: Option<usize>,
    sbm: Option<SbmSection>,
    regression: Option<RegressionSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSection {
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    pub num_blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Where a run's graphs come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    File(PathBuf),
    Sbm(SbmSection),
    Regression(RegressionSection),
    /// Schema only: enough to build a model, not to train one.
    Declared,
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: DataSource,
    /// Declared schema, when the config states one.
    pub schema: Option<Schema>,
    pub output_dir: PathBuf,
}

fn feature_schema(kind: &str, spec: Option<&toml::Value>) -> Result<FeatureSchema, String> {
    let int = |v: &toml::Value| {
        v.as_integer()
            .filter(|&x| x >= 0)
            .map(|x| x as usize)
            .ok_or_else(|| format!("expected a non-negative integer, found {v}"))
    };
    match (kind, spec) {
        ("none", _) => Ok(FeatureSchema::None),
        ("continuous", Some(v)) => Ok(FeatureSchema::Continuous(int(v)?)),
        ("categorical", Some(toml::Value::Array(items))) => Ok(FeatureSchema::Categorical(
            items.iter().map(int).collect::<Result<_, _>>()?,
        )),
        ("categorical", Some(v)) => Ok(FeatureSchema::Categorical(vec![int(v)?])),
        (k @ ("continuous" | "categorical"), None) => Err(format!("{k} features need a size")),
        (other, _) => Err(format!("unknown feature kind {other:?}")),
    }
}

impl RunSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|source| CliError::Toml {
            path: origin.to_path_buf(),
            source,
        })?;
        let bad = |msg: String| CliError::Config {
            path: origin.to_path_buf(),
            msg,
        };
        let m = raw.model;
        let model = ModelConfig {
            backbone: m.backbone,
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            flags: TechniqueFlags {
                use_edge_features: m.use_edge_features,
                use_norm: m.use_norm,
                dropout_rate: m.dropout,
                use_residual: m.use_residual,
                use_ffn: m.use_ffn,
                use_pe: m.use_pe,
            },
            pe_steps: m.pe_steps,
            readout: Readout::parse(&m.readout).map_err(|e| bad(e.to_string()))?,
            seed: m.seed,
        };

        let d = raw.data;
        let schema = match &d.task {
            Some(task) => {
                let task = Task::parse(task).map_err(|e| bad(e.to_string()))?;
                let node = feature_schema(
                    d.node_feat_kind.as_deref().unwrap_or("none"),
                    d.node_feat_dim_or_vocab.as_ref(),
                )
                .map_err(|m| bad(format!("node features: {m}")))?;
                let edge = feature_schema(
                    d.edge_feat_kind.as_deref().unwrap_or("none"),
                    d.edge_feat_dim_or_vocab.as_ref(),
                )
                .map_err(|m| bad(format!("edge features: {m}")))?;
                let num_targets = d
                    .num_targets
                    .ok_or_else(|| bad("a declared schema needs num_targets".into()))?;
                Some(Schema {
                    task,
                    node,
                    edge,
                    num_targets,
                })
            }
            None => None,
        };
        let source = match (d.path, d.sbm, d.regression) {
            (Some(p), None, None) => DataSource::File(p),
            (None, Some(s), None) => DataSource::Sbm(s),
            (None, None, Some(r)) => DataSource::Regression(r),
            (None, None, None) if schema.is_some() => DataSource::Declared,
            (None, None, None) => {
                return Err(bad("[data] needs a path, a generator section, or a task".into()))
            }
            _ => return Err(bad("[data] may name only one of path, sbm, regression".into())),
        };

        let t = raw.train;
        let task = schema.as_ref().map(|s| s.task).or(match &source {
            DataSource::Sbm(_) => Some(Task::NodeClassification),
            DataSource::Regression(_) => Some(Task::GraphRegression),
            _ => None,
        });
        let eval_metric = match (&t.eval_metric, task) {
            (Some(name), _) => MetricName::parse(name).map_err(|e| bad(e.to_string()))?,
            (None, Some(task)) => MetricName::default_for(task),
            (None, None) => MetricName::Mae,
        };
        let selection = t.selection.unwrap_or(if eval_metric.higher_is_better() {
            Selection::Max
        } else {
            Selection::Min
        });
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: t.seed,
            eval_metric,
            selection,
            grad_clip: t.grad_clip,
        };
        train.validate().map_err(|e| bad(e.to_string()))?;
        model.flags.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            model,
            train,
            source,
            schema,
            output_dir: d.output_dir,
        })
    }

    /// Overrides both the model and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Loads or generates the dataset and caches RWSE when the model needs
    /// it. Re-selects the default metric if the loaded task differs from
    /// the declared one.
    pub fn load_data(&self) -> Result<Dataset> {
        let mut data = match &self.source {
            DataSource::File(p) => {
                if !p.exists() {
                    return Err(CliError::MissingData(p.clone()));
                }
                load_dataset(p)?
            }
            DataSource::Sbm(s) => generate_sbm_node_task(
                &SbmParams {
                    num_graphs: s.num_graphs,
                    nodes_per_graph: s.nodes_per_graph,
                    num_blocks: s.num_blocks,
                    p_intra: s.p_intra,
                    p_inter: s.p_inter,
                    feature_noise: s.feature_noise,
                },
                &mut RngState::new(s.seed),
            )?,
            DataSource::Regression(r) => generate_regression_task(
                &RegressionParams {
                    num_graphs: r.num_graphs,
                    min_nodes: r.min_nodes,
                    max_nodes: r.max_nodes,
                },
                &mut RngState::new(r.seed),
            )?,
            DataSource::Declared => {
                return Err(CliError::Usage(
                    "this config declares a schema but no dataset; set [data] path".into(),
                ))
            }
        };
        if let Some(declared) = &self.schema {
            if declared != &data.schema {
                return Err(gnnplus::Error::Schema(format!(
                    "dataset schema {:?} differs from the declared {:?}",
                    data.schema, declared
                ))
                .into());
            }
        }
        if self.model.flags.use_pe {
            data.cache_rwse(self.model.pe_steps)?;
        }
        Ok(data)
    }

    /// Schema to build against without touching data: the declared one, or
    /// the one a generator would produce.
    pub fn static_schema(&self) -> Option<Schema> {
        if let Some(s) = &self.schema {
            return Some(s.clone());
        }
        match &self.source {
            DataSource::Sbm(s) => Some(Schema {
                task: Task::NodeClassification,
                node: FeatureSchema::Categorical(vec![s.num_blocks + 1]),
                edge: FeatureSchema::None,
                num_targets: s.num_blocks,
            }),
            DataSource::Regression(_) => Some(Schema {
                task: Task::GraphRegression,
                node: FeatureSchema::Categorical(vec![gnnplus::graph::REGRESSION_NODE_VOCAB]),
                edge: FeatureSchema::Categorical(vec![gnnplus::graph::REGRESSION_EDGE_VOCAB]),
                num_targets: 1,
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
backbone = "gcn"
num_layers = 4
hidden_dim = 16
use_edge_features = false
use_norm = true
dropout = 0.1
use_residual = true
use_ffn = false
use_pe = false
readout = "mean"

[train]
learning_rate = 0.001
epochs = 3
warmup_epochs = 1
weight_decay = 0.0
batch_size = 8

[data]
path = "x.jsonl"
"#;

    #[test]
    fn parses_minimal_spec() {
        let s = RunSpec::parse(BASE, Path::new("t.cfg")).unwrap();
        assert_eq!(s.model.num_layers, 4);
        assert!(matches!(s.source, DataSource::File(_)));
        assert_eq!(s.train.selection, Selection::Min);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BASE.replace("batch_size = 8", "batch_size = 8\nbatch_sise = 8");
        assert!(RunSpec::parse(&text, Path::new("t.cfg")).is_err());
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let text = BASE.replace("warmup_epochs = 1", "warmup_epochs = 9");
        assert!(matches!(
            RunSpec::parse(&text, Path::new("t.cfg")),
            Err(CliError::Config { .. })
        ));
    }
}

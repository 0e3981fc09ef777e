//! End-to-end model: input encoders, optional RWSE fusion, stacked layers,
//! readout and a linear prediction head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormConfig, Mode, Tape, Var};
use crate::error::{bail, Result};
use crate::graph::{BatchLabels, FeatureSchema, GraphBatch, Schema, Task};
use crate::layers::{
    Backbone, EdgeState, FeatureInput, Layer, LayerCtx, Linear, MessageGraph, TechniqueFlags,
};
use crate::params::{Bound, Buffers, ParamId, ParameterStore};
use crate::pe::fuse_pe;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Mean,
    Sum,
    Max,
    NodeLevel,
}

impl Readout {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => Readout::Mean,
            "sum" | "add" => Readout::Sum,
            "max" => Readout::Max,
            "node_level" => Readout::NodeLevel,
            other => bail!(Config, "unknown readout {other:?}"),
        })
    }
}

pub const MIN_LAYERS: usize = 3;
pub const MAX_LAYERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub flags: TechniqueFlags,
    /// RWSE steps `K`; only read when PE is enabled.
    pub pe_steps: usize,
    pub readout: Readout,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        self.flags.validate()?;
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&self.num_layers) {
            bail!(
                Config,
                "num_layers must lie in [{MIN_LAYERS}, {MAX_LAYERS}], got {}",
                self.num_layers
            );
        }
        if self.hidden_dim == 0 {
            bail!(Config, "hidden_dim must be positive");
        }
        if self.flags.use_pe && self.pe_steps == 0 {
            bail!(Config, "pe_steps must be positive when PE is enabled");
        }
        if (self.readout == Readout::NodeLevel) != schema.task.is_node_level() {
            bail!(
                Config,
                "readout {:?} does not fit task {}",
                self.readout,
                schema.task.name()
            );
        }
        if self.flags.use_edge_features && schema.edge.is_none() {
            bail!(Config, "edge features enabled but the dataset has none");
        }
        if schema.num_targets == 0 {
            bail!(Config, "dataset declares zero targets");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    /// Summed embedding rows, one lookup per categorical column.
    Table(ParamId),
    Linear(Linear),
}

impl Encoder {
    fn new<S: Scalar>(
        store: &mut ParameterStore<S>,
        name: &str,
        schema: &FeatureSchema,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(match schema {
            FeatureSchema::Categorical(_) => {
                Encoder::Table(store.add_glorot(format!("{name}.table"), schema.raw_width(), hidden, rng)?)
            }
            FeatureSchema::Continuous(d) => Encoder::Linear(Linear::new(store, name, *d, hidden, true, rng)?),
            FeatureSchema::None => bail!(Config, "{name}: nothing to encode"),
        })
    }

    fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        p: &Bound<'t, S>,
        x: &FeatureInput<S>,
    ) -> Result<Var<'t, S>> {
        match self {
            Encoder::Table(t) => x.project(tape, p.get(*t)),
            Encoder::Linear(l) => {
                let FeatureInput::Continuous(v) = x else {
                    bail!(Schema, "continuous encoder given categorical features");
                };
                l.forward(p, tape.constant(v.clone()))
            }
        }
    }
}

/// Model output for a batch: one row per graph, or per node for node-level
/// tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S: Scalar> {
    pub output: Tensor<S>,
    pub task: Task,
}

/// Weights-free description of the network; parameters live in the store.
#[derive(Clone, Debug)]
struct Arch {
    node_enc: Encoder,
    edge_enc: Option<Encoder>,
    w_pe: Option<ParamId>,
    layers: Vec<Layer>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub schema: Schema,
    pub store: ParameterStore<S>,
    arch: Arch,
}

impl<S: Scalar> Model<S> {
    /// Allocates and initializes all parameters from `config.seed`.
    pub fn build(config: &ModelConfig, schema: &Schema) -> Result<Self> {
        config.validate(schema)?;
        let mut rng = RngState::new(config.seed);
        let mut store = ParameterStore::new();
        let h = config.hidden_dim;
        let flags = config.flags;
        let node_enc = Encoder::new(&mut store, "node_encoder", &schema.node, h, &mut rng)?;
        let w_pe = if flags.use_pe {
            Some(store.add_glorot("pe.w", h + config.pe_steps, h, &mut rng)?)
        } else {
            None
        };
        let edge_enc = if flags.use_edge_features && config.backbone == Backbone::GatedGcn {
            Some(Encoder::new(&mut store, "edge_encoder", &schema.edge, h, &mut rng)?)
        } else {
            None
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                Layer::new(
                    config.backbone,
                    &mut store,
                    &format!("layers.{l}"),
                    h,
                    schema.edge.raw_width(),
                    flags,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut store, "head", h, schema.num_targets, true, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            store,
            arch: Arch {
                node_enc,
                edge_enc,
                w_pe,
                layers,
                head,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Forward pass with externally bound parameters. Train mode updates the
    /// batch-norm statistics held in the store.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape<S>,
        bound: &Bound<'t, S>,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Var<'t, S>> {
        let buffers = self.store.buffers_mut();
        forward_arch(&self.arch, &self.config, &self.schema, tape, bound, buffers, batch, mode, rng)
    }

    /// Eval-mode prediction that leaves the model untouched; safe to call
    /// from several threads.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Prediction<S>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let mut buffers = self.store.snapshot_buffers();
        let mut rng = RngState::new(0);
        let out = forward_arch(
            &self.arch,
            &self.config,
            &self.schema,
            &tape,
            &bound,
            buffers.view(),
            batch,
            Mode::Eval,
            &mut rng,
        )?;
        let output = (*out.value()).clone();
        Ok(Prediction {
            output,
            task: self.schema.task,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_arch<'t, S: Scalar>(
    arch: &Arch,
    config: &ModelConfig,
    schema: &Schema,
    tape: &'t Tape<S>,
    bound: &Bound<'t, S>,
    buffers: Buffers<'_, S>,
    batch: &GraphBatch,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Var<'t, S>> {
    let flags = config.flags;
    let x = FeatureInput::new(&batch.node_feat, &schema.node)?;
    let mut h = arch.node_enc.forward(tape, bound, &x)?;
    if let Some(w_pe) = arch.w_pe {
        let Some((k, _)) = &batch.rwse else {
            bail!(State, "PE is enabled but the batch has no cached RWSE");
        };
        if *k != config.pe_steps {
            bail!(State, "cached RWSE has {k} steps, model expects {}", config.pe_steps);
        }
        let pe = tape.constant(batch.rwse_tensor().expect("checked above"));
        h = fuse_pe(h, pe, bound.get(w_pe))?;
    }
    let raw_edges = match (&batch.edge_feat, flags.use_edge_features) {
        (Some(f), true) => Some(FeatureInput::new(f, &schema.edge)?),
        (None, true) if batch.num_arcs() == 0 => Some(FeatureInput::new(
            &empty_features(&schema.edge),
            &schema.edge,
        )?),
        _ => None,
    };
    let mut e = match (&arch.edge_enc, &raw_edges) {
        (Some(enc), Some(raw)) => Some(enc.forward(tape, bound, raw)?),
        _ => None,
    };
    let graph = MessageGraph::new(batch);
    let mut cx = LayerCtx {
        tape,
        params: bound,
        buffers,
        mode,
        rng,
        graph: &graph,
        bn: BatchNormConfig::default(),
    };
    for layer in &arch.layers {
        let edge = match (e, &raw_edges) {
            (Some(v), _) => EdgeState::Hidden(v),
            (None, Some(r)) if arch.edge_enc.is_none() => EdgeState::Raw(r),
            _ => EdgeState::None,
        };
        let (h_next, e_next) = layer.forward(&mut cx, h, edge)?;
        h = h_next;
        e = e_next;
    }
    let pooled = readout(h, batch, config.readout)?;
    arch.head.forward(bound, pooled)
}

fn empty_features(schema: &FeatureSchema) -> crate::graph::Features {
    match schema {
        FeatureSchema::Categorical(v) => crate::graph::Features::Categorical {
            cols: v.len(),
            data: Vec::new(),
        },
        FeatureSchema::Continuous(d) => crate::graph::Features::Continuous {
            dim: *d,
            data: Vec::new(),
        },
        FeatureSchema::None => crate::graph::Features::Continuous {
            dim: 0,
            data: Vec::new(),
        },
    }
}

/// Pools node rows per graph.
pub fn readout<'t, S: Scalar>(h: Var<'t, S>, batch: &GraphBatch, kind: Readout) -> Result<Var<'t, S>> {
    let g = batch.num_graphs;
    match kind {
        Readout::NodeLevel => Ok(h),
        Readout::Sum => h.segment_sum(&batch.graph_id, g),
        Readout::Mean => {
            let inv: Rc<[S]> = batch
                .graph_sizes
                .iter()
                .map(|&n| if n == 0 { S::zero() } else { S::lit(1.0 / n as f64) })
                .collect();
            h.segment_sum(&batch.graph_id, g)?.row_scale(&inv)
        }
        Readout::Max => h.segment_max(&batch.graph_id, g),
    }
}

/// Task loss: MAE for regression, mean softmax cross-entropy for
/// classification, mean sigmoid BCE for multilabel.
pub fn loss<'t, S: Scalar>(out: Var<'t, S>, labels: &BatchLabels) -> Result<Var<'t, S>> {
    match labels {
        BatchLabels::Regression { targets, values } => {
            let shape = out.shape();
            if shape.len() != 2 || shape[1] != *targets || shape[0] * targets != values.len() {
                bail!(
                    Dimension,
                    "predictions {shape:?} vs {} regression targets of width {targets}",
                    values.len()
                );
            }
            let y = out.tape().constant(Tensor::from_f64(shape, values)?);
            out.sub(y)?.abs().mean(None)
        }
        BatchLabels::Classes(c) | BatchLabels::NodeClasses(c) => out.softmax_cross_entropy(c),
        BatchLabels::MultiLabel { labels, values } => {
            let shape = out.shape();
            if shape.len() != 2 || shape[1] != *labels {
                bail!(Dimension, "predictions {shape:?} vs {labels} labels");
            }
            let t: Vec<S> = values.iter().map(|&x| S::lit(x)).collect();
            out.bce_with_logits(&t)
        }
    }
}

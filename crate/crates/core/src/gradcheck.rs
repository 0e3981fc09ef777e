//! Finite-difference verification of analytic gradients.
//!
//! Two families of checks: every primitive op on small random inputs, and
//! whole models for every backbone and every combination of the six
//! technique flags. Errors are measured per tensor as
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.

use std::rc::Rc;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{BatchNormConfig, Mode, OpKind, RunningStats, Tape, Var};
use crate::error::Result;
use crate::graph::{
    Dataset, FeatureSchema, Features, Graph, Label, Schema, Splits, Task,
};
use crate::layers::{Backbone, TechniqueFlags};
use crate::model::{Model, ModelConfig, Readout};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub hidden: usize,
    pub layers: usize,
    pub graphs: usize,
    pub max_nodes: usize,
    pub pe_steps: usize,
    pub dropout: f64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the error denominator.
    pub floor: f64,
    pub seed: u64,
    /// Scales the backward rule of one op kind, to prove the check bites.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            hidden: 6,
            layers: 3,
            graphs: 2,
            max_nodes: 12,
            pe_steps: 4,
            dropout: 0.2,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub backbone: Backbone,
    pub bits: u8,
    pub flags: TechniqueFlags,
    pub worst: f64,
    pub worst_param: String,
    pub tensors: usize,
    /// Coordinates whose difference had to be retaken near a kink.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: OpKind,
    pub worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.worst < self.tolerance)
            && self.cases.iter().all(|c| c.worst < self.tolerance)
    }

    pub fn failing_ops(&self) -> Vec<OpKind> {
        self.ops
            .iter()
            .filter(|o| o.worst >= self.tolerance)
            .map(|o| o.op)
            .collect()
    }

    pub fn failing_cases(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| c.worst >= self.tolerance).collect()
    }
}

/// Short label such as `edge+norm+drop` (`none` when all are off).
pub fn flags_label(f: &TechniqueFlags) -> String {
    let mut parts = Vec::new();
    for (on, name) in [
        (f.use_edge_features, "edge"),
        (f.use_norm, "norm"),
        (f.dropout_rate > 0.0, "drop"),
        (f.use_residual, "rc"),
        (f.use_ffn, "ffn"),
        (f.use_pe, "pe"),
    ] {
        if on {
            parts.push(name);
        }
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

fn rel_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut n.iter().copied()))
        .max(floor);
    diff / scale
}

/// Central difference at `x0`, where `f(x0) = l0`. When the forward and
/// backward one-sided slopes disagree, the step straddles a kink (ReLU, abs)
/// and the difference is retaken with smaller steps. Returns the estimate and
/// whether refinement happened.
fn central_difference(
    mut f: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    l0: f64,
    step: f64,
) -> Result<(f64, bool)> {
    let mut h = step;
    let mut refined = false;
    loop {
        let lp = f(x0 + h)?;
        let lm = f(x0 - h)?;
        let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
        let kink = (fwd - bwd).abs() > KINK_RATIO * fwd.abs().max(bwd.abs()).max(1.0);
        if !kink || h <= step * 1e-3 {
            return Ok(((lp - lm) / (2.0 * h), refined));
        }
        refined = true;
        h /= 10.0;
    }
}

/// Relative disagreement of one-sided slopes that marks a kink.
const KINK_RATIO: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Checks `f` (any scalar-valued function of the inputs) at `inputs`.
/// Returns the worst per-input relative error.
pub fn check_function<F>(inputs: &[Tensor<f64>], cfg: &GradcheckConfig, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        tape.inject_fault(cfg.fault);
        let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let value = out.value().item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(out)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| {
                g.get(v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; x.numel()])
            })
            .collect();
        Ok((value, gs))
    };
    let (l0, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let xs = inputs.to_vec();
    for i in 0..xs.len() {
        let mut numeric = vec![0.0; xs[i].numel()];
        for j in 0..numeric.len() {
            let orig = xs[i].data()[j];
            let probe = |x: f64| {
                let mut ys = xs.clone();
                ys[i].data_mut()[j] = x;
                eval(&ys, false).map(|r| r.0)
            };
            numeric[j] = central_difference(probe, orig, l0, cfg.step)?.0;
        }
        worst = worst.max(rel_error(&analytic[i], &numeric, cfg.floor));
    }
    Ok(worst)
}

/// Projects an output onto fixed random weights so every element matters.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = RngState::new(seed);
    let r = random_tensor(&out.shape(), &mut rng);
    out.mul(out.tape().constant(r))?.sum(None)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.2, 2.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values (spaced ≥ 0.1 apart) so max picks are stable under the
/// finite-difference step.
fn distinct(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    rng.shuffle(&mut data);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error for each primitive op.
pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    OpKind::ALL
        .iter()
        .map(|&op| {
            let mut rng = RngState::derived(cfg.seed, 1000 + op as u64);
            let worst = check_op(op, cfg, &mut rng)?;
            Ok(OpReport { op, worst })
        })
        .collect()
}

type BinaryFn = for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>;

fn check_op(op: OpKind, cfg: &GradcheckConfig, rng: &mut RngState) -> Result<f64> {
    let s = cfg.seed;
    let mut r = |shape: &[usize]| random_tensor(shape, rng);
    let binary = |a: Tensor<f64>, b: Tensor<f64>, f: BinaryFn| {
        check_function(&[a, b], cfg, move |_, v| project(f(v[0], v[1])?, s))
    };
    let worst = match op {
        OpKind::MatMul => binary(r(&[4, 3]), r(&[3, 5]), |a, b| a.matmul(b))?,
        OpKind::Add => binary(r(&[4, 3]), r(&[3]), |a, b| a.add(b))?
            .max(binary(r(&[4, 3]), r(&[4, 3]), |a, b| a.add(b))?),
        OpKind::Sub => binary(r(&[4, 3]), r(&[1]), |a, b| a.sub(b))?
            .max(binary(r(&[3]), r(&[4, 3]), |a, b| a.sub(b))?),
        OpKind::Mul => binary(r(&[4, 3]), r(&[4, 3]), |a, b| a.mul(b))?
            .max(binary(r(&[4, 3]), r(&[3]), |a, b| a.mul(b))?),
        OpKind::Div => {
            let (a, b) = (r(&[4, 3]), away_from_zero(&[4, 3], rng));
            binary(a, b, |a, b| a.div(b))?
        }
        OpKind::Neg => check_function(&[r(&[5])], cfg, |_, v| project(v[0].neg(), s))?,
        OpKind::Scale => check_function(&[r(&[5])], cfg, |_, v| project(v[0].scale(-1.7), s))?,
        OpKind::Relu => {
            check_function(&[away_from_zero(&[4, 3], rng)], cfg, |_, v| project(v[0].relu(), s))?
        }
        OpKind::Sigmoid => check_function(&[r(&[4, 3])], cfg, |_, v| project(v[0].sigmoid(), s))?,
        OpKind::Abs => {
            check_function(&[away_from_zero(&[4, 3], rng)], cfg, |_, v| project(v[0].abs(), s))?
        }
        OpKind::ConcatLast => binary(r(&[4, 2]), r(&[4, 3]), |a, b| Var::concat_last(&[a, b]))?,
        OpKind::SegmentSum => {
            let ids: Arc<[usize]> = vec![0, 2, 2, 0, 1, 2].into();
            check_function(&[r(&[6, 3])], cfg, |_, v| project(v[0].segment_sum(&ids, 4)?, s))?
        }
        OpKind::SegmentMax => {
            let ids = vec![0, 2, 2, 0, 1, 2];
            let x = distinct(&[6, 3], rng);
            check_function(&[x], cfg, |_, v| project(v[0].segment_max(&ids, 4)?, s))?
        }
        OpKind::GatherRows => {
            let idx: Arc<[usize]> = vec![1, 1, 0, 3, 1].into();
            check_function(&[r(&[4, 3])], cfg, |_, v| project(v[0].gather_rows(&idx)?, s))?
        }
        OpKind::RowScale => {
            let coef: Rc<[f64]> = vec![0.5, -1.0, 2.0, 0.25].into();
            check_function(&[r(&[4, 3])], cfg, |_, v| project(v[0].row_scale(&coef)?, s))?
        }
        OpKind::BatchNorm => {
            let inputs = [r(&[6, 3]), r(&[3]), r(&[3])];
            let train = check_function(&inputs, cfg, |_, v| {
                let mut st = RunningStats::new(3);
                project(v[0].batch_norm(v[1], v[2], &mut st, Mode::Train, BatchNormConfig::default())?, s)
            })?;
            let eval = check_function(&inputs, cfg, |_, v| {
                let mut st = RunningStats {
                    mean: vec![0.3, -0.2, 0.1],
                    var: vec![1.5, 0.7, 2.0],
                };
                project(v[0].batch_norm(v[1], v[2], &mut st, Mode::Eval, BatchNormConfig::default())?, s)
            })?;
            train.max(eval)
        }
        OpKind::Dropout => check_function(&[r(&[10, 4])], cfg, |_, v| {
            let mut d = RngState::new(s ^ 0xd);
            project(v[0].dropout(0.3, Mode::Train, &mut d)?, s)
        })?,
        OpKind::Sum => check_function(&[r(&[4, 3])], cfg, |_, v| project(v[0].sum(Some(0))?, s))?
            .max(check_function(&[r(&[4, 3])], cfg, |_, v| v[0].sum(None))?),
        OpKind::Mean => check_function(&[r(&[4, 3])], cfg, |_, v| project(v[0].mean(Some(1))?, s))?
            .max(check_function(&[r(&[4, 3])], cfg, |_, v| v[0].mean(None))?),
        OpKind::Max => {
            let x = distinct(&[4, 3], rng);
            check_function(std::slice::from_ref(&x), cfg, |_, v| project(v[0].max(Some(0))?, s))?
                .max(check_function(&[x], cfg, |_, v| v[0].max(None))?)
        }
        OpKind::SoftmaxCrossEntropy => {
            let labels = [2, 0, 1, 2];
            check_function(&[r(&[4, 3])], cfg, |_, v| v[0].softmax_cross_entropy(&labels))?
        }
        OpKind::BceWithLogits => {
            let t = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
            check_function(&[r(&[2, 3])], cfg, |_, v| v[0].bce_with_logits(&t))?
        }
    };
    Ok(worst)
}

/// Small random graphs with two categorical node columns and continuous
/// edge features, for model-level checks.
pub fn random_dataset(cfg: &GradcheckConfig, rng: &mut RngState) -> Result<Dataset> {
    let mut graphs = Vec::new();
    for _ in 0..cfg.graphs {
        let n = rng.int_inclusive(3, cfg.max_nodes);
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.bernoulli(0.35) {
                    pairs.push((u, v));
                }
            }
        }
        let node = (0..n).flat_map(|_| [rng.below(4), rng.below(3)]).collect::<Vec<_>>();
        let edge = (0..pairs.len() * 2).map(|_| rng.normal()).collect();
        let label = Label::Regression(vec![rng.normal(), rng.normal()]);
        graphs.push(Graph::from_undirected(
            n,
            &pairs,
            Features::Categorical { cols: 2, data: node },
            Some(Features::Continuous { dim: 2, data: edge }),
            label,
        )?);
    }
    let schema = Schema {
        task: Task::GraphRegression,
        node: FeatureSchema::Categorical(vec![4, 3]),
        edge: FeatureSchema::Continuous(2),
        num_targets: 2,
    };
    let n = graphs.len();
    let mut ds = Dataset::new(
        graphs,
        Splits {
            train: (0..n).collect(),
            ..Splits::default()
        },
        schema,
    )?;
    ds.cache_rwse(cfg.pe_steps)?;
    Ok(ds)
}

/// Gradient check of one backbone under one flag combination, in train mode
/// with fixed dropout masks.
pub fn check_model(backbone: Backbone, bits: u8, cfg: &GradcheckConfig) -> Result<CaseReport> {
    let case_seed = cfg.seed.wrapping_mul(1_000_003) + 64 * backbone as u64 + bits as u64;
    let mut rng = RngState::new(case_seed);
    let data = random_dataset(cfg, &mut rng)?;
    let flags = TechniqueFlags::from_bits(bits, cfg.dropout);
    let mcfg = ModelConfig {
        backbone,
        num_layers: cfg.layers,
        hidden_dim: cfg.hidden,
        flags,
        pe_steps: cfg.pe_steps,
        readout: Readout::Mean,
        seed: case_seed,
    };
    let mut model = Model::<f64>::build(&mcfg, &data.schema)?;
    // Move every parameter off its initial value so zero biases and unit
    // gammas do not sit on special points.
    for (_, p) in model.store.iter_mut() {
        for x in p.value.data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    let batch = data.batch(&data.splits.train)?;
    let proj_seed = rng.next_seed();

    let loss = |model: &mut Model<f64>, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        tape.inject_fault(cfg.fault);
        let bound = model.store.bind(&tape, grads);
        let mut drop_rng = RngState::new(case_seed ^ 0x5eed);
        let out = model.forward(&tape, &bound, &batch, Mode::Train, &mut drop_rng)?;
        let l = project(out, proj_seed)?;
        let value = l.value().item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(l)?;
        model.store.load_grads(&bound, &g);
        let out = model
            .store
            .iter_mut()
            .map(|(_, p)| p.grad.take().unwrap().into_data())
            .collect();
        Ok((value, out))
    };

    let (l0, analytic) = loss(&mut model, true)?;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = 0.0;
    let mut worst_param = String::new();
    let mut kinks = 0;
    for (i, name) in names.iter().enumerate() {
        let len = analytic[i].len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let orig = model.store.get(name).unwrap().value.data()[j];
            let probe = |x: f64| {
                model.store.get_mut(name).unwrap().value.data_mut()[j] = x;
                loss(&mut model, false).map(|r| r.0)
            };
            let (d, refined) = central_difference(probe, orig, l0, cfg.step)?;
            model.store.get_mut(name).unwrap().value.data_mut()[j] = orig;
            numeric[j] = d;
            kinks += refined as usize;
        }
        let e = rel_error(&analytic[i], &numeric, cfg.floor);
        if e > worst || worst_param.is_empty() {
            worst = e;
            worst_param = name.clone();
        }
    }
    Ok(CaseReport {
        backbone,
        bits,
        flags,
        worst,
        worst_param,
        tensors: names.len(),
        kinks,
    })
}

/// Every primitive op, then every backbone × all 64 flag combinations.
/// Model cases run in parallel on the current rayon pool; the report order is
/// fixed.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let ops = check_ops(cfg)?;
    let jobs: Vec<(Backbone, u8)> = Backbone::ALL
        .iter()
        .flat_map(|&b| (0..64u8).map(move |bits| (b, bits)))
        .collect();
    let cases = jobs
        .par_iter()
        .map(|&(b, bits)| check_model(b, bits, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops,
        cases,
    })
}

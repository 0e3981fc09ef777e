use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gnnplus::gradcheck::{self, flags_label, GradcheckConfig, GradcheckReport};
use gnnplus::graph::{
    generate_regression_task, generate_sbm_node_task, load_dataset, save_dataset,
    RegressionParams, SbmParams,
};
use gnnplus::model::{load_checkpoint, save_checkpoint};
use gnnplus::train::{evaluate, train, EpochLog, TrainOutcome};
use gnnplus::{Dataset, Model64, OpKind, RngState, TechniqueFlags};
use serde::Serialize;

use crate::config::RunSpec;
use crate::error::{CliError, Result};

pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub metric: String,
    pub test_metric: f64,
    pub val_metric: f64,
    pub epoch_of_best: Option<usize>,
    pub num_params: usize,
    pub steps: u64,
    pub wall_seconds: f64,
}

pub struct Run {
    pub outcome: TrainOutcome<f64>,
    pub summary: Summary,
}

/// Builds the model for `spec` and trains it on `data`.
pub fn run_training(spec: &RunSpec, data: &Dataset, progress: bool) -> Result<Run> {
    let start = Instant::now();
    let model = Model64::build(&spec.model, &data.schema)?;
    let num_params = model.num_params();
    let metric = spec.train.eval_metric.name();
    let outcome = train(model, data, &spec.train, |row: &EpochLog| {
        if progress {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  train_loss {:.5}  val_{metric} {:.5}  test_{metric} {:.5}",
                row.epoch, row.lr, row.train_loss, row.val_metric, row.test_metric
            );
        }
    })?;
    let summary = Summary {
        metric: metric.to_string(),
        test_metric: outcome.test_metric,
        val_metric: outcome.val_metric,
        epoch_of_best: outcome.best_epoch,
        num_params,
        steps: outcome.steps,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Run { outcome, summary })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if log.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "val_metric", "test_metric"])?;
    }
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `train`: log, best checkpoint and summary into `out`.
pub fn cmd_train(spec: &RunSpec, out: &Path) -> Result<Summary> {
    let data = spec.load_data()?;
    let run = run_training(spec, &data, true)?;
    create_dir(out)?;
    write_log(&out.join(LOG_FILE), &run.outcome.log)?;
    save_checkpoint(&run.outcome.best, out.join(CHECKPOINT_FILE))?;
    write_file(
        &out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&run.summary)?.as_bytes(),
    )?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(run.summary)
}

/// `eval`: metrics of a checkpoint on one split, as JSON.
pub fn cmd_eval(checkpoint: &Path, data_path: &Path, split: &str, batch_size: usize) -> Result<String> {
    if !data_path.exists() {
        return Err(CliError::MissingData(data_path.to_path_buf()));
    }
    let model: Model64 = load_checkpoint(checkpoint)?;
    let mut data = load_dataset(data_path)?;
    if data.schema != model.schema {
        return Err(gnnplus::Error::Schema(format!(
            "checkpoint expects {:?}, dataset has {:?}",
            model.schema, data.schema
        ))
        .into());
    }
    let indices = data.splits.get(split)?.to_vec();
    if model.config.flags.use_pe {
        data.cache_rwse(model.config.pe_steps)?;
    }
    let metrics = evaluate(&model, &data, &indices, batch_size)?;
    Ok(serde_json::to_string_pretty(&metrics)?)
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub val_metric: f64,
    pub test_metric: f64,
    pub delta: f64,
    pub delta_pct: f64,
    pub epoch_of_best: Option<usize>,
}

/// The six single-technique removals, each with whether it changes `flags`.
pub fn ablations(flags: &TechniqueFlags) -> Vec<(&'static str, bool, TechniqueFlags)> {
    let f = *flags;
    vec![
        ("(-) Edge.", f.use_edge_features, TechniqueFlags { use_edge_features: false, ..f }),
        ("(-) Norm", f.use_norm, TechniqueFlags { use_norm: false, ..f }),
        ("(-) Dropout", f.dropout_rate > 0.0, TechniqueFlags { dropout_rate: 0.0, ..f }),
        ("(-) RC", f.use_residual, TechniqueFlags { use_residual: false, ..f }),
        ("(-) FFN", f.use_ffn, TechniqueFlags { use_ffn: false, ..f }),
        ("(-) PE", f.use_pe, TechniqueFlags { use_pe: false, ..f }),
    ]
}

pub fn run_ablation(spec: &RunSpec, data: &Dataset) -> Result<Vec<AblationRow>> {
    let base = run_training(spec, data, false)?.summary;
    eprintln!("base: test {} {:.5}", base.metric, base.test_metric);
    let row = |variant: &str, status: &str, s: &Summary| {
        let delta = s.test_metric - base.test_metric;
        let delta_pct = if base.test_metric != 0.0 {
            100.0 * delta / base.test_metric.abs()
        } else {
            0.0
        };
        AblationRow {
            variant: variant.to_string(),
            status: status.to_string(),
            val_metric: s.val_metric,
            test_metric: s.test_metric,
            delta,
            delta_pct,
            epoch_of_best: s.epoch_of_best,
        }
    };
    let mut rows = vec![row("base", "active", &base)];
    for (name, active, flags) in ablations(&spec.model.flags) {
        if !active {
            rows.push(row(name, "not active", &base));
            continue;
        }
        let mut variant = spec.clone();
        variant.model.flags = flags;
        let s = run_training(&variant, data, false)?.summary;
        eprintln!("{name}: test {} {:.5}", s.metric, s.test_metric);
        rows.push(row(name, "active", &s));
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow], metric: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<11} {:>12} {:>12} {:>11} {:>9} {:>10}",
        "variant",
        "status",
        format!("val_{metric}"),
        format!("test_{metric}"),
        "delta",
        "delta_%",
        "best_epoch"
    );
    for r in rows {
        let epoch = r.epoch_of_best.map_or("-".to_string(), |e| e.to_string());
        let _ = writeln!(
            out,
            "{:<12} {:<11} {:>12.5} {:>12.5} {:>+11.5} {:>+8.2}% {:>10}",
            r.variant, r.status, r.val_metric, r.test_metric, r.delta, r.delta_pct, epoch
        );
    }
    out
}

/// `ablate`: base run plus one run per removable technique.
pub fn cmd_ablate(spec: &RunSpec, out: &Path) -> Result<Vec<AblationRow>> {
    let data = spec.load_data()?;
    let rows = run_ablation(spec, &data)?;
    create_dir(out)?;
    let mut w = csv::Writer::from_path(out.join(ABLATION_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(out.join(ABLATION_CSV), e))?;
    let text = format_ablation(&rows, spec.train.eval_metric.name());
    write_file(&out.join(ABLATION_TXT), text.as_bytes())?;
    print!("{text}");
    Ok(rows)
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let tol = report.tolerance;
    let status = |e: f64| if e < tol { "ok" } else { "FAIL" };
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>12}  status", "op", "worst_rel_err");
    for o in &report.ops {
        let _ = writeln!(out, "{:<24} {:>12.3e}  {}", o.op.name(), o.worst, status(o.worst));
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<9} {:<30} {:>12}  {:<28} {:>5}  status",
        "backbone", "flags", "worst_rel_err", "worst_param", "kinks"
    );
    for c in &report.cases {
        let _ = writeln!(
            out,
            "{:<9} {:<30} {:>12.3e}  {:<28} {:>5}  {}",
            c.backbone.name(),
            flags_label(&c.flags),
            c.worst,
            c.worst_param,
            c.kinks,
            status(c.worst)
        );
    }
    let _ = writeln!(
        out,
        "\n{} ops, {} model cases, tolerance {:e}",
        report.ops.len(),
        report.cases.len(),
        tol
    );
    out
}

/// `gradcheck`: prints the report; fails naming the ops over tolerance.
pub fn cmd_gradcheck(seed: u64, fault: Option<OpKind>, out: Option<&Path>) -> Result<GradcheckReport> {
    let cfg = GradcheckConfig {
        seed,
        fault,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    let text = format_gradcheck(&report);
    print!("{text}");
    if let Some(p) = out {
        write_file(p, text.as_bytes())?;
    }
    if !report.passed() {
        let ops: Vec<&str> = report.failing_ops().iter().map(|o| o.name()).collect();
        let cases = report.failing_cases().len();
        return Err(CliError::GradcheckFailed(format!(
            "failing ops: [{}]; {cases} failing model cases",
            ops.join(", ")
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub enum GenKind {
    Sbm(SbmParams),
    Regression(RegressionParams),
}

/// `gen-data`: writes the dataset and returns the statistics line.
pub fn cmd_gen_data(kind: &GenKind, seed: u64, out: &Path) -> Result<String> {
    let mut rng = RngState::new(seed);
    let data = match kind {
        GenKind::Sbm(p) => generate_sbm_node_task(p, &mut rng)?,
        GenKind::Regression(p) => generate_regression_task(p, &mut rng)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(&data, out)?;
    let (nodes, edges) = data.summary();
    let text = format!(
        "{:<10} {:>8} {:>13} {:>13}\n{:<10} {:>8} {:>13.2} {:>13.2}\n",
        "dataset",
        "# graphs",
        "Avg. # nodes",
        "Avg. # edges",
        out.file_name().map_or("-".into(), |n| n.to_string_lossy().into_owned()),
        data.len(),
        nodes,
        edges
    );
    let _ = std::io::stdout().write_all(text.as_bytes());
    Ok(text)
}

/// Default output directory of a run: the config's, unless overridden.
pub fn output_dir(spec: &RunSpec, out: Option<&PathBuf>) -> PathBuf {
    out.cloned().unwrap_or_else(|| spec.output_dir.clone())
}

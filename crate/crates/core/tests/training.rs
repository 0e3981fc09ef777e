use gnnplus::graph::{
    generate_regression_task, generate_sbm_node_task, BatchLabels, RegressionParams, SbmParams,
    Splits,
};
use gnnplus::tensor::Tensor;
use gnnplus::train::{
    adamw_step, auroc, average_precision, compute_metrics, f1_macro, lr_at, train, AdamW,
};
use gnnplus::{
    Backbone, Dataset, Error, MetricName, Model64, ModelConfig, ParameterStore64, Readout, RngState,
    Selection, Task, TechniqueFlags, TrainConfig,
};

fn random_vec(n: usize, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Textbook Adam, one scalar at a time.
struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        for i in 0..theta.len() {
            theta[i] *= 1.0 - lr * wd;
            self.m[i] = 0.9 * self.m[i] + 0.1 * grad[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

#[test]
fn adamw_matches_reference_trajectories() {
    let mut rng = RngState::new(7);
    for wd in [0.0, 0.01] {
        for _ in 0..20 {
            let n = 1 + rng.below(10);
            let init = random_vec(n, &mut rng);
            let mut store = ParameterStore64::new();
            let id = store.add("p", Tensor::vector(init.clone())).unwrap();
            let mut theta = init;
            let mut reference = RefAdam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            };
            let opt = AdamW {
                weight_decay: wd,
                ..AdamW::default()
            };
            for step in 0..10 {
                let g = random_vec(n, &mut rng);
                let lr = 1e-2 * (1.0 + step as f64);
                store.param_mut(id).grad = Some(Tensor::vector(g.clone()));
                adamw_step(&mut store, lr, &opt).unwrap();
                reference.step(&mut theta, &g, lr, wd);
                for (a, b) in store.param(id).value.data().iter().zip(&theta) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
    let mut store = ParameterStore64::new();
    store.add("p", Tensor::vector(vec![1.0])).unwrap();
    assert!(matches!(adamw_step(&mut store, 0.1, &AdamW::default()), Err(Error::State(_))));
}

#[test]
fn schedule_is_continuous_and_decays() {
    for (warmup, epochs) in [(5, 100), (1, 10), (50, 2000)] {
        let base = 1e-3;
        assert!((lr_at(warmup - 1, base, warmup, epochs) - lr_at(warmup, base, warmup, epochs)).abs() < 1e-15);
        let after: Vec<f64> = (warmup..epochs).map(|e| lr_at(e, base, warmup, epochs)).collect();
        assert!(after.windows(2).all(|w| w[1] <= w[0]));
        assert!(lr_at(epochs, base, warmup, epochs).abs() < 1e-18);
    }
}

fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Walks distinct thresholds from high to low, adding `ΔR · P`.
fn brute_ap(s: &[f64], y: &[bool]) -> f64 {
    let npos = y.iter().filter(|&&b| b).count();
    let mut thresholds = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0);
    for t in thresholds {
        let selected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| y[i]).count();
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / npos as f64) * (tp as f64 / selected.len() as f64);
        }
        prev_tp = tp;
    }
    ap
}

fn brute_f1(p: &[usize], t: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let tp = (0..p.len()).filter(|&i| p[i] == k && t[i] == k).count();
        let fp = (0..p.len()).filter(|&i| p[i] == k && t[i] != k).count();
        let fne = (0..p.len()).filter(|&i| p[i] != k && t[i] == k).count();
        if 2 * tp + fp + fne > 0 {
            total += (2 * tp) as f64 / (2 * tp + fp + fne) as f64;
        }
    }
    total / c as f64
}

#[test]
fn ranking_metrics_match_brute_force() {
    let mut rng = RngState::new(8);
    for _ in 0..1000 {
        let n = 2 + rng.below(15);
        // Coarse scores so ties are common.
        let s: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        let npos = y.iter().filter(|&&b| b).count();
        if npos == 0 {
            assert!(average_precision(&s, &y).is_err());
        } else {
            assert_eq!(average_precision(&s, &y).unwrap(), brute_ap(&s, &y));
        }
        if npos == 0 || npos == n {
            assert!(matches!(auroc(&s, &y), Err(Error::UndefinedMetric(_))));
        } else {
            assert_eq!(auroc(&s, &y).unwrap(), brute_auroc(&s, &y));
        }
        let c = 2 + rng.below(4);
        let p: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let t: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        assert_eq!(f1_macro(&p, &t, c), brute_f1(&p, &t, c));
    }
}

#[test]
fn metrics_ignore_item_order() {
    let mut rng = RngState::new(9);
    let n = 30;
    let logits = Tensor::new([n, 3], random_vec(n * 3, &mut rng)).unwrap();
    let y: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let a = compute_metrics(&logits, &BatchLabels::Classes(y.clone()), Task::GraphClassification).unwrap();
    let y2: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
    let b = compute_metrics(&logits.select_rows(&perm), &BatchLabels::Classes(y2), Task::GraphClassification)
        .unwrap();
    assert_eq!(a.get(MetricName::Accuracy).unwrap(), b.get(MetricName::Accuracy).unwrap());
    assert_eq!(a.get(MetricName::F1Macro).unwrap(), b.get(MetricName::F1Macro).unwrap());
}

fn regression_setup() -> (Dataset, ModelConfig, TrainConfig) {
    let data = generate_regression_task(
        &RegressionParams {
            num_graphs: 20,
            min_nodes: 4,
            max_nodes: 10,
        },
        &mut RngState::new(1),
    )
    .unwrap();
    let model = ModelConfig {
        backbone: Backbone::Gin,
        num_layers: 3,
        hidden_dim: 8,
        flags: TechniqueFlags::from_bits(0b011111, 0.1),
        pe_steps: 4,
        readout: Readout::Mean,
        seed: 3,
    };
    let train = TrainConfig {
        learning_rate: 1e-2,
        epochs: 8,
        warmup_epochs: 2,
        weight_decay: 1e-5,
        batch_size: 4,
        seed: 5,
        eval_metric: MetricName::Mae,
        selection: Selection::Min,
        grad_clip: None,
    };
    (data, model, train)
}

#[test]
fn training_is_deterministic_and_selects_best_validation_epoch() {
    let (data, mcfg, tcfg) = regression_setup();
    let run = || train(Model64::build(&mcfg, &data.schema).unwrap(), &data, &tcfg, |_| {}).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.steps, 8 * 4);
    let best = a.best_epoch.unwrap();
    let min = a.log.iter().map(|r| r.val_metric).fold(f64::INFINITY, f64::min);
    assert_eq!(a.log[best].val_metric, min);
    assert!(a.log[..best].iter().all(|r| r.val_metric > min));
    assert_eq!(a.test_metric, a.log[best].test_metric);
    assert_eq!(a.val_metric, min);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let (data, mcfg, mut tcfg) = regression_setup();
    tcfg.epochs = 0;
    tcfg.warmup_epochs = 0;
    let init = Model64::build(&mcfg, &data.schema).unwrap();
    let out = train(init.clone(), &data, &tcfg, |_| {}).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, None);
    for ((_, a), (_, b)) in out.best.store.iter().zip(init.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn empty_splits_are_dataset_errors() {
    let (data, mcfg, tcfg) = regression_setup();
    let n = data.len();
    let data = Dataset::new(
        data.graphs,
        Splits {
            train: (0..n - 2).collect(),
            val: vec![],
            test: vec![n - 1],
        },
        data.schema,
    )
    .unwrap();
    let model = Model64::build(&mcfg, &data.schema).unwrap();
    assert!(matches!(train(model, &data, &tcfg, |_| {}), Err(Error::Dataset(_))));
}

#[test]
fn node_classification_learns_blocks() {
    let data = generate_sbm_node_task(
        &SbmParams {
            num_graphs: 40,
            nodes_per_graph: 20,
            num_blocks: 2,
            p_intra: 0.5,
            p_inter: 0.05,
            feature_noise: 0.2,
        },
        &mut RngState::new(2),
    )
    .unwrap();
    let mcfg = ModelConfig {
        backbone: Backbone::GatedGcn,
        num_layers: 3,
        hidden_dim: 16,
        flags: TechniqueFlags::from_bits(0b011110, 0.0),
        pe_steps: 4,
        readout: Readout::NodeLevel,
        seed: 0,
    };
    let tcfg = TrainConfig {
        learning_rate: 5e-3,
        epochs: 15,
        warmup_epochs: 1,
        weight_decay: 0.0,
        batch_size: 8,
        seed: 0,
        eval_metric: MetricName::Accuracy,
        selection: Selection::Max,
        grad_clip: Some(5.0),
    };
    let out = train(Model64::build(&mcfg, &data.schema).unwrap(), &data, &tcfg, |_| {}).unwrap();
    assert!(out.test_metric > 0.85, "accuracy {}", out.test_metric);
}

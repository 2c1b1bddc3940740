//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard criterion fails. Pass criterion numbers as arguments
//! to run a subset: `cargo test --test acceptance -- 2 5`.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseseg::autograd::{Graph, Tensor, Var};
use sparseseg::config::ExperimentConfig;
use sparseseg::evaluator::ResultRecord;
use sparseseg::meta_trainer::{inner_adapt_objective, outer_step, BatchObjective, MetaConfig, MetaObjective};
use sparseseg::model::{forward, init_network_params, init_params, MiniUNet, ModelConfig, ModelParams, TinyUNet};
use sparseseg::objective::{jaccard, weighted_cross_entropy, ClassWeighting};
use sparseseg::optim::{Optimizer, OptimizerKind};
use sparseseg::pipeline;
use sparseseg::sparsifier::{densify_passthrough, grid_with_offsets, points, PixelLabel, SparseMask, SparsitySpec};
use sparseseg::task_store::{DenseMask, Image};

// Tolerances and budgets.
const META_GRAD_REL_TOL: f64 = 1e-3;
const META_GRAD_INSTANCES: usize = 20;
const META_GRAD_FD_STEP: f64 = 1e-6;
const META_GRAD_BUDGET_S: f64 = 60.0;
const SCALAR_TOL: f64 = 1e-12;
const ANNOTATION_LIMIT: f64 = 0.02;
const LOSS_PAIRS: usize = 100;
const DENSE_CE_TOL: f64 = 1e-10;
const IOU_PAIRS: usize = 1000;
const TREND_SEEDS: [u64; 3] = [11, 12, 13];
const TREND_BUDGET_S: f64 = 45.0 * 60.0;
const DENSITY_MARGIN: f64 = 0.02;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Missed, but inside the stated stochastic margin.
    Report(String),
}

struct Suite {
    selected: Vec<usize>,
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.selected.is_empty() && !self.selected.contains(&id) {
            return;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|e| Outcome::Fail(format!("panicked: {:?}", e.downcast_ref::<String>())));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Report(d) => ("REPORT", d),
            Outcome::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] criterion {id} {name}: {detail} ({secs:.1}s)");
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

// ---------------------------------------------------------------- 1

fn tiny_instance(seed: u64) -> (BatchObjective<'static>, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
    let (sx, qx) = (image(&mut rng), image(&mut rng));
    let mask = |rng: &mut ChaCha8Rng| DenseMask::from_fn(4, 4, |_, _| rng.random_bool(0.5));
    let support_y = (0..2)
        .map(|i| points(&mask(&mut rng), 3, seed * 7 + i).unwrap())
        .collect();
    let query_y = (0..2).map(|_| densify_passthrough(&mask(&mut rng))).collect();
    let objective = BatchObjective {
        net: &TinyUNet,
        support_x: sx,
        support_y,
        query_x: qx,
        query_y,
        weighting: ClassWeighting::None,
    };
    (objective, init_network_params(&TinyUNet, seed))
}

/// θ ↦ L_qry(θ − α ∇L_sup(θ)).
fn adapted_query_loss(obj: &dyn MetaObjective, theta: &ModelParams, alpha: f64) -> f64 {
    let adapted = inner_adapt_objective(obj, theta, alpha, 1).unwrap();
    let graph = Graph::new();
    graph.no_grad(|| {
        let vars: Vec<Var> = adapted.bind(&graph);
        obj.query_loss(&vars).unwrap().value().item()
    })
}

fn meta_gradient_oracle() -> Outcome {
    let alpha = 0.5;
    let mut worst: f64 = 0.0;
    let mut worst_first_order: f64 = f64::INFINITY;
    for seed in 0..META_GRAD_INSTANCES as u64 {
        let (obj, theta) = tiny_instance(seed);
        assert!(theta.numel() <= 50);
        let config = MetaConfig {
            alpha,
            beta: 1.0,
            second_order: true,
            ..MetaConfig::default()
        };
        let mut stepped = theta.clone();
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 1.0, &stepped);
        outer_step(&mut stepped, &[&obj as &dyn MetaObjective], &config, &mut sgd).unwrap();
        let analytic: Vec<f64> = theta.to_flat().iter().zip(stepped.to_flat()).map(|(a, b)| a - b).collect();

        let base = theta.to_flat();
        let mut numeric = vec![0.0; base.len()];
        let mut probe = theta.clone();
        for i in 0..base.len() {
            let mut at = |delta: f64| {
                let mut x = base.clone();
                x[i] += delta;
                probe.set_flat(&x).unwrap();
                adapted_query_loss(&obj, &probe, alpha)
            };
            numeric[i] = (at(META_GRAD_FD_STEP) - at(-META_GRAD_FD_STEP)) / (2.0 * META_GRAD_FD_STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&numeric).max(1e-12);
        worst = worst.max(rel);

        let mut fo = theta.clone();
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 1.0, &fo);
        let first_order = MetaConfig {
            second_order: false,
            ..config
        };
        outer_step(&mut fo, &[&obj as &dyn MetaObjective], &first_order, &mut sgd).unwrap();
        let fo_diff: Vec<f64> = base
            .iter()
            .zip(fo.to_flat())
            .zip(&numeric)
            .map(|((a, b), n)| a - b - n)
            .collect();
        worst_first_order = worst_first_order.min(norm(&fo_diff) / norm(&numeric).max(1e-12));
    }
    check(
        worst < META_GRAD_REL_TOL,
        format!(
            "worst relative error {worst:.2e} < {META_GRAD_REL_TOL:e} over {META_GRAD_INSTANCES} instances \
             (first-order gradient misses by at least {worst_first_order:.2e})"
        ),
    )
}

// ---------------------------------------------------------------- 2

struct Quadratic;

impl MetaObjective for Quadratic {
    fn support_loss<'g>(&self, p: &[Var<'g>]) -> sparseseg::Result<Var<'g>> {
        Ok((p[0] * p[0]).sum().scale(0.5))
    }
    fn query_loss<'g>(&self, p: &[Var<'g>]) -> sparseseg::Result<Var<'g>> {
        let d = p[0] - p[0].graph().constant(Tensor::new(&[1], vec![2.0]));
        Ok((d * d).sum().scale(0.5))
    }
}

fn scalar_step(second_order: bool) -> f64 {
    let mut theta = ModelParams::new(vec!["theta".into()], vec![Tensor::new(&[1], vec![1.0])]).unwrap();
    let config = MetaConfig {
        alpha: 0.1,
        beta: 1.0,
        second_order,
        ..MetaConfig::default()
    };
    let mut sgd = Optimizer::new(OptimizerKind::Sgd, 1.0, &theta);
    outer_step(&mut theta, &[&Quadratic as &dyn MetaObjective], &config, &mut sgd).unwrap();
    theta.to_flat()[0]
}

fn scalar_oracle() -> Outcome {
    let (so, fo) = (scalar_step(true), scalar_step(false));
    check(
        (so - 1.99).abs() < SCALAR_TOL && (fo - 2.1).abs() < SCALAR_TOL,
        format!("second-order {so}, first-order {fo} (expected 1.99, 2.1 within {SCALAR_TOL:e})"),
    )
}

// ---------------------------------------------------------------- 3

fn annotation_budget() -> Outcome {
    let truth = DenseMask::from_fn(128, 128, |r, c| (r as i64 - 64).pow(2) + (c as i64 - 64).pow(2) < 900);
    let g = grid_with_offsets(&truth, 8, (0, 0)).unwrap();
    let fraction = g.labeled_count() as f64 / (128.0 * 128.0);
    let p = points(&truth, 5, 3).unwrap();
    check(
        g.labeled_count() == 256 && fraction == 0.015625 && fraction < ANNOTATION_LIMIT && p.labeled_count() == 10,
        format!(
            "grid s=8 labels {} pixels ({:.4}%), points n=5 labels {}",
            g.labeled_count(),
            fraction * 100.0,
            p.labeled_count()
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Mean over labeled pixels of −log softmax(score)[label].
fn reference_ce(scores: &Tensor, labels: &[Option<bool>], hw: usize) -> f64 {
    let s = scores.data();
    let (mut total, mut count) = (0.0, 0);
    for (i, l) in labels.iter().enumerate() {
        if let Some(fg) = l {
            let (s0, s1) = (s[i], s[hw + i]);
            let m = s0.max(s1);
            let lse = m + ((s0 - m).exp() + (s1 - m).exp()).ln();
            total += lse - if *fg { s1 } else { s0 };
            count += 1;
        }
    }
    total / count as f64
}

fn loss_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_dense_err: f64 = 0.0;
    for pair in 0..LOSS_PAIRS {
        let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
        let scores = Tensor::from_fn(&[2, h, w], |_| rng.random_range(-4.0..4.0));
        let labels: Vec<PixelLabel> = (0..h * w)
            .map(|_| match rng.random_range(0..3) {
                0 => PixelLabel::Background,
                1 => PixelLabel::Foreground,
                _ => PixelLabel::Unknown,
            })
            .collect();
        if labels.iter().all(|l| *l == PixelLabel::Unknown) {
            continue;
        }
        let spec = SparsitySpec::Points(1);
        let sparse = SparseMask::new(h, w, labels.clone(), spec).unwrap();
        let base = weighted_cross_entropy(&scores, &sparse).unwrap().value;

        // two dense truths that agree on labeled pixels and differ elsewhere,
        // restricted back to the labeled set
        let truth = |rng: &mut ChaCha8Rng| -> DenseMask {
            let hyp: Vec<bool> = labels
                .iter()
                .map(|l| match l {
                    PixelLabel::Foreground => true,
                    PixelLabel::Background => false,
                    PixelLabel::Unknown => rng.random_bool(0.5),
                })
                .collect();
            DenseMask::from_fn(h, w, |r, c| hyp[r * w + c])
        };
        for _ in 0..2 {
            let t = truth(&mut rng);
            let restricted: Vec<PixelLabel> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if *l == PixelLabel::Unknown {
                        PixelLabel::Unknown
                    } else if t.is_foreground(i / w, i % w) {
                        PixelLabel::Foreground
                    } else {
                        PixelLabel::Background
                    }
                })
                .collect();
            let m = SparseMask::new(h, w, restricted, spec).unwrap();
            let v = weighted_cross_entropy(&scores, &m).unwrap().value;
            if v != base {
                return Outcome::Fail(format!("pair {pair}: loss moved from {base} to {v}"));
            }
        }
        let mut perturbed = scores.clone();
        for (i, l) in labels.iter().enumerate() {
            if *l == PixelLabel::Unknown {
                perturbed.data_mut()[i] = rng.random_range(-50.0..50.0);
                perturbed.data_mut()[h * w + i] = rng.random_range(-50.0..50.0);
            }
        }
        let v = weighted_cross_entropy(&perturbed, &sparse).unwrap().value;
        if v != base {
            return Outcome::Fail(format!("pair {pair}: unlabeled scores moved loss from {base} to {v}"));
        }

        let t = truth(&mut rng);
        let dense = weighted_cross_entropy(&scores, &densify_passthrough(&t)).unwrap().value;
        let all: Vec<Option<bool>> = (0..h * w).map(|i| Some(t.is_foreground(i / w, i % w))).collect();
        max_dense_err = max_dense_err.max((dense - reference_ce(&scores, &all, h * w)).abs());
    }
    check(
        max_dense_err < DENSE_CE_TOL,
        format!(
            "unlabeled relabeling never changed the loss over {LOSS_PAIRS} pairs; dense passthrough error \
             {max_dense_err:.1e} < {DENSE_CE_TOL:e}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..IOU_PAIRS {
        let p = rng.random_range(0.0..1.0);
        let a = DenseMask::from_fn(8, 8, |_, _| rng.random_bool(p));
        let b = DenseMask::from_fn(8, 8, |_, _| rng.random_bool(p));
        let set = |m: &DenseMask| -> HashSet<(usize, usize)> {
            (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).filter(|&(r, c)| m.is_foreground(r, c)).collect()
        };
        let (sa, sb) = (set(&a), set(&b));
        let union = sa.union(&sb).count();
        let expected = if union == 0 {
            1.0
        } else {
            sa.intersection(&sb).count() as f64 / union as f64
        };
        let got = jaccard(&a, &b).unwrap();
        if got != expected {
            return Outcome::Fail(format!("pair {i}: {got} != {expected}"));
        }
    }
    Outcome::Pass(format!("{IOU_PAIRS} random 8x8 pairs match exactly"))
}

// ---------------------------------------------------------------- 6, 7, 8

fn trend_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}
output_dir = "{}"

[data.synth]
images_per_dataset = 30
side = 64

[model]
encoder_channels = [8, 16, 32]
center_channels = 64
input_side = 64

[meta]
alpha = 0.01
beta = 0.002
outer_optimizer = "adam"
meta_iterations = 200
task_batch = 4
support_batch = 2
query_batch = 2

[tune]
learning_rate = 0.001
epochs = 40
batch_size = 5

[plan]
held_out_task = "banded/organ"
methods = ["weasel", "scratch"]
shots = [1, 5]
sparsity = ["points:5", "grid:8"]
folds = 5
"#,
        dir.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

fn mean_iou(records: &[ResultRecord], method: &str, k: usize, sparsity: &str) -> f64 {
    let sel: Vec<f64> = records
        .iter()
        .filter(|r| r.method == method && r.k == k && r.sparsity == sparsity)
        .map(|r| r.mean_iou)
        .collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

struct TrendRun {
    records: Vec<Vec<ResultRecord>>,
    seconds: f64,
    first_config: ExperimentConfig,
    _dirs: Vec<tempfile::TempDir>,
}

fn run_trend() -> TrendRun {
    let start = Instant::now();
    let mut records = Vec::new();
    let mut dirs = Vec::new();
    let mut first_config = None;
    for seed in TREND_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let config = trend_config(dir.path(), seed);
        pipeline::synth(&config).unwrap();
        pipeline::meta_train(&config).unwrap();
        records.push(pipeline::sweep(&config).unwrap().records);
        first_config.get_or_insert(config);
        dirs.push(dir);
    }
    TrendRun {
        records,
        seconds: start.elapsed().as_secs_f64(),
        first_config: first_config.unwrap(),
        _dirs: dirs,
    }
}

fn seed_mean(run: &TrendRun, method: &str, k: usize, sparsity: &str) -> f64 {
    run.records.iter().map(|r| mean_iou(r, method, k, sparsity)).sum::<f64>() / run.records.len() as f64
}

fn weasel_beats_scratch(run: &TrendRun) -> Outcome {
    let mut ok = run.seconds < TREND_BUDGET_S;
    let mut parts = Vec::new();
    for k in [1, 5] {
        let (w, s) = (seed_mean(run, "weasel", k, "points:5"), seed_mean(run, "scratch", k, "points:5"));
        ok &= w > s;
        parts.push(format!("k={k}: weasel {w:.4} vs scratch {s:.4}"));
    }
    check(
        ok,
        format!(
            "{} over {} seeds x 5 folds; {:.0}s of {TREND_BUDGET_S:.0}s budget",
            parts.join(", "),
            TREND_SEEDS.len(),
            run.seconds
        ),
    )
}

fn grid_beats_points(run: &TrendRun) -> Outcome {
    let methods = ["weasel", "scratch"];
    let mut detail = Vec::new();
    let (mut grid, mut pts) = (0.0, 0.0);
    for method in methods {
        let (g, p) = (seed_mean(run, method, 5, "grid:8"), seed_mean(run, method, 5, "points:5"));
        grid += g / methods.len() as f64;
        pts += p / methods.len() as f64;
        detail.push(format!("{method} {g:.4} vs {p:.4}"));
    }
    let detail = format!("k=5 grid:8 {grid:.4} vs points:5 {pts:.4} (per method: {})", detail.join(", "));
    if grid >= pts {
        Outcome::Pass(detail)
    } else if grid >= pts - DENSITY_MARGIN {
        Outcome::Report(format!("{detail}; shortfall {:.4} within {DENSITY_MARGIN}", pts - grid))
    } else {
        Outcome::Fail(detail)
    }
}

fn sweep_determinism(run: &TrendRun) -> Outcome {
    let config = &run.first_config;
    let path = config.output_dir.join(pipeline::RESULTS);
    let first = std::fs::read(&path).unwrap();
    pipeline::sweep(config).unwrap();
    let second = std::fs::read(&path).unwrap();
    check(
        first == second && !first.is_empty(),
        format!("results CSV of {} bytes reproduced: {}", first.len(), first == second),
    )
}

// ---------------------------------------------------------------- 9

fn conv3(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

fn recipe_count(enc: [usize; 3], center: usize) -> usize {
    let mut total = 0;
    let mut cin = 1;
    for c in enc.iter().copied().chain([center]) {
        total += conv3(cin, c) + conv3(c, c);
        cin = c;
    }
    for &c in enc.iter().rev() {
        total += conv3(cin + c, c) + conv3(c, c);
        cin = c;
    }
    total + 2 * cin + 2
}

fn random_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn architecture() -> Outcome {
    let default = ModelConfig::default();
    let count = init_params(&default, 0).unwrap().numel();
    let expected = recipe_count(default.encoder_channels, default.center_channels);
    let mut ok = count == expected;
    let mut shapes = Vec::new();
    for side in [64, 128] {
        let config = ModelConfig {
            input_side: side,
            ..ModelConfig::default()
        };
        let net = MiniUNet::new(config.clone()).unwrap();
        let out = forward(&net, &init_params(&config, 1).unwrap(), &[&random_image(side, 2)]).unwrap();
        ok &= out.shape() == [1, 2, side, side];
        shapes.push(format!("{:?}", out.shape()));
    }
    let config = ModelConfig {
        input_side: 64,
        ..ModelConfig::default()
    };
    let params = init_params(&config, 3).unwrap();
    let img = random_image(64, 4);
    let with = forward(&MiniUNet::new(config.clone()).unwrap(), &params, &[&img]).unwrap();
    let without_config = ModelConfig {
        skip_connections: [false, true, true],
        ..config
    };
    let without = forward(&MiniUNet::new(without_config).unwrap(), &params, &[&img]).unwrap();
    let change = norm(&flat(&[with.sub(&without)]));
    ok &= change > 1e-9;
    check(
        ok,
        format!("parameters {count} (recipe {expected}), outputs {}, skip removal changes outputs by {change:.3e}", shapes.join(" ")),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut suite = Suite { selected, failures: 0 };
    suite.run(1, "second-order meta-gradient vs finite differences", || {
        let start = Instant::now();
        match meta_gradient_oracle() {
            Outcome::Pass(d) if start.elapsed().as_secs_f64() >= META_GRAD_BUDGET_S => {
                Outcome::Fail(format!("{d}; over the {META_GRAD_BUDGET_S}s budget"))
            }
            o => o,
        }
    });
    suite.run(2, "scalar meta-update hand oracle", scalar_oracle);
    suite.run(3, "annotation budget", annotation_budget);
    suite.run(4, "unlabeled pixels are ignored by the loss", loss_masking);
    suite.run(5, "IoU vs brute-force pixel sets", iou_oracle);
    let needs_trend = suite.selected.is_empty() || suite.selected.iter().any(|c| (6..=8).contains(c));
    if needs_trend {
        let run = run_trend();
        suite.run(6, "meta-learned init beats scratch", || weasel_beats_scratch(&run));
        suite.run(7, "grid labels beat points at k=5", || grid_beats_points(&run));
        suite.run(8, "sweep reproducibility", || sweep_determinism(&run));
    }
    suite.run(9, "architecture shapes and parameter count", architecture);
    if suite.failures > 0 {
        println!("{} criterion(s) failed", suite.failures);
        std::process::exit(1);
    }
}

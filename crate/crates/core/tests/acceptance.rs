//! One pass/fail line per primary acceptance criterion, written straight to stderr
//! so the lines show up without `--nocapture`.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use prunekit::criteria::{self, Criterion, HessianMethod, FD_STEP};
use prunekit::data::{cifar10_available, load_cifar10, synthetic_split, Dataset};
use prunekit::engine::{self, PruneConfig, Schedule, TrainConfig};
use prunekit::experiments::{
    self, fixed_batches, mean_std, pooled_std, pruned_before_crossing, CurveOptions,
};
use prunekit::graph::{Mode, NetworkGraph, Op, Placement};
use prunekit::models::{build_lenet3_with, build_mlp, build_toy_convnet};
use prunekit::oracle::{combinatorial_oracle, greedy_oracle_prune, COMBINATORIAL_BUDGET};
use prunekit::stats::{kendall, pearson, spearman};
use prunekit::{
    build_lenet3, build_tiny_resnet, compact, count_flops_params, insert_gates, PruneMask,
    ResNetConfig, Unit,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Blocked,
}

struct Line {
    name: &'static str,
    status: Status,
    detail: String,
}

fn emit(line: &Line, secs: f64) {
    let tag = match line.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Blocked => "BLOCKED",
    };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] {tag:7} {:28} {} ({secs:.1}s)",
        line.name,
        line.detail
    );
}

fn line(name: &'static str, ok: bool, detail: String) -> Line {
    Line {
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os("PRUNEKIT_DATA")
        .map(PathBuf::from)
        .filter(|p| cifar10_available(p))
}

// ----- gradients ------------------------------------------------------------

fn gradient_correctness() -> Line {
    let r = common::gradient_corpus(100, 11);
    line(
        "gradient_correctness",
        r.configs == 100 && r.max_rel_err < 1e-7,
        format!(
            "{} configs over {} layer kinds, max rel err {:.2e} (< 1e-7) at {}",
            r.configs,
            r.kinds_seen.len(),
            r.max_rel_err,
            r.worst
        ),
    )
}

// ----- gate/weight equivalence ----------------------------------------------

/// `(sum_k w_k dE/dw_k + b dE/db)` of the filter behind each gate channel, read straight from the parameters.
fn weight_contributions(g: &NetworkGraph<f64>, gate: usize) -> Vec<f64> {
    let f = g.gate(gate).filters[0];
    let (w, b) = match g.node(f).op {
        Op::Conv2d { weight, bias, .. } | Op::Linear { weight, bias, .. } => (weight, bias),
        _ => unreachable!("gates sit behind filters"),
    };
    let (wp, bp) = (g.param(w), g.param(b));
    let per = wp.value.len() / bp.value.len();
    (0..bp.value.len())
        .map(|c| {
            let r = c * per..(c + 1) * per;
            let s: f64 = wp.value.data()[r.clone()]
                .iter()
                .zip(&wp.grad.data()[r])
                .map(|(a, d)| a * d)
                .sum();
            s + bp.value.data()[c] * bp.grad.data()[c]
        })
        .collect()
}

fn max_gate_weight_gap(mut g: NetworkGraph<f64>, ds: &Dataset, n: usize, mode: Mode) -> f64 {
    let (x, y) = ds.batch::<f64>(&(0..n).collect::<Vec<_>>());
    g.mode = mode;
    g.update_running_stats = false;
    g.forward(&x, &y).unwrap();
    g.backward().unwrap();
    let fo = criteria::taylor_fo_gate(&g).unwrap();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for gate in 0..g.gates().len() {
        for c in weight_contributions(&g, gate) {
            worst = worst.max(rel(fo[k], c * c));
            k += 1;
        }
    }
    assert_eq!(k, fo.len());
    worst
}

fn gate_weight_equivalence() -> Line {
    let (lenet_data, _) = synthetic_split(10, 2, 1, 32, 1).unwrap();
    let lenet = insert_gates(build_lenet3::<f64>(1), Placement::AfterConv).unwrap();
    let a = max_gate_weight_gap(lenet, &lenet_data, 16, Mode::Train);
    let (res_data, _) = synthetic_split(10, 2, 1, 16, 2).unwrap();
    let cfg = ResNetConfig {
        image_size: 16,
        ..ResNetConfig::default()
    };
    let mut res = build_tiny_resnet::<f64>(&cfg, 2).unwrap();
    common::randomize_bn(&mut res, &mut ChaCha8Rng::seed_from_u64(2));
    let res = insert_gates(res, Placement::AfterConv).unwrap();
    // behind a training-mode batch norm these gradients vanish by scale invariance, so the
    // identity is checked with running statistics where both sides are far from zero
    let b = max_gate_weight_gap(res, &res_data, 8, Mode::Eval);
    line(
        "gate_equals_group_weight",
        a < 1e-10 && b < 1e-10,
        format!("max rel err lenet3 {a:.2e}, tiny resnet (eval BN) {b:.2e} (< 1e-10)"),
    )
}

fn bn_decomposition() -> Line {
    let (ds, _) = synthetic_split(10, 2, 1, 16, 3).unwrap();
    let cfg = ResNetConfig {
        image_size: 16,
        ..ResNetConfig::default()
    };
    let mut g = build_tiny_resnet::<f64>(&cfg, 3).unwrap();
    common::randomize_bn(&mut g, &mut ChaCha8Rng::seed_from_u64(3));
    let mut g = insert_gates(g, Placement::AfterBn).unwrap();
    g.update_running_stats = false;
    let (x, y) = ds.batch::<f64>(&(0..8).collect::<Vec<_>>());
    g.forward(&x, &y).unwrap();
    g.backward().unwrap();
    let fo = criteria::taylor_fo_gate(&g).unwrap();
    let (mut worst, mut checked, mut k): (f64, usize, usize) = (0.0, 0, 0);
    for gate in 0..g.gates().len() {
        let gs = g.gate(gate);
        let bn = gs.bns.first().map(|&b| match g.node(b).op {
            Op::BatchNorm { gamma, beta, .. } => (g.param(gamma), g.param(beta)),
            _ => unreachable!(),
        });
        for c in 0..gs.channels() {
            if let Some((gm, bt)) = bn {
                let d =
                    gm.value.data()[c] * gm.grad.data()[c] + bt.value.data()[c] * bt.grad.data()[c];
                worst = worst.max(rel(fo[k], d * d));
                checked += 1;
            }
            k += 1;
        }
    }
    line(
        "bn_decomposition",
        checked > 0 && worst < 1e-10,
        format!("{checked} after-BN units, max rel err {worst:.2e} (< 1e-10)"),
    )
}

// ----- Hessian ----------------------------------------------------------------

fn hessian_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.abs().max(y.abs()) < 1e-9 * scale {
                0.0
            } else {
                rel(*x, *y)
            }
        })
        .fold(0.0, f64::max)
}

fn hessian_agreement() -> Line {
    let (ds, _) = synthetic_split(4, 8, 1, 6, 4).unwrap();
    let batches = fixed_batches::<f64>(&ds, 32, 16);
    let mut worst_methods: f64 = 0.0;
    let mut worst_halving: f64 = 0.0;
    let nets: Vec<NetworkGraph<f64>> = vec![
        insert_gates(
            build_toy_convnet::<f64>(3, 6, 6, 4, 5).unwrap(),
            Placement::AfterConv,
        )
        .unwrap(),
        insert_gates(
            build_mlp::<f64>(108, 10, 4, 6).unwrap(),
            Placement::AfterConv,
        )
        .unwrap(),
    ];
    for mut g in nets {
        let batches: Vec<_> = if g.input_shape().len() == 1 {
            batches
                .iter()
                .map(|(x, y)| (x.clone().reshape(&[x.dim0(), 108]).unwrap(), y.clone()))
                .collect()
        } else {
            batches.clone()
        };
        let exact = criteria::hessian_diag(&mut g, &batches, HessianMethod::DoubleBackward)
            .unwrap()
            .values;
        let fd = criteria::second_order_window(&mut g, &batches, HessianMethod::FdOfGrad, FD_STEP)
            .unwrap()
            .1
            .values;
        let fd2 =
            criteria::second_order_window(&mut g, &batches, HessianMethod::FdOfGrad, FD_STEP / 2.0)
                .unwrap()
                .1
                .values;
        worst_methods = worst_methods.max(hessian_gap(&exact, &fd));
        worst_halving = worst_halving.max(hessian_gap(&fd, &fd2));
    }
    line(
        "hessian_diag_agreement",
        worst_methods < 1e-4 && worst_halving < 1e-4,
        format!("fd vs double-backward {worst_methods:.2e}, fd step halving {worst_halving:.2e} (< 1e-4) on 2-layer nets"),
    )
}

fn taylor_so_fidelity() -> Line {
    let (ds, _) = synthetic_split(4, 8, 1, 6, 7).unwrap();
    let mut g = insert_gates(
        build_toy_convnet::<f64>(3, 6, 5, 4, 7).unwrap(),
        Placement::AfterConv,
    )
    .unwrap();
    let (x, y) = ds.batch::<f64>(&(0..32).collect::<Vec<_>>());
    g.mode = Mode::Eval;
    let base = g.loss(&x, &y).unwrap();
    g.forward(&x, &y).unwrap();
    g.backward().unwrap();
    let derivs: Vec<(f64, f64)> = (0..g.gate(0).channels())
        .map(|c| (g.gate(0).grad[c], g.gate_hessian_diag_entry(0, c).unwrap()))
        .collect();
    let mut min_slope = f64::INFINITY;
    for (c, &(grad, h)) in derivs.iter().enumerate() {
        let resid: Vec<f64> = [0.5, 0.25, 0.125]
            .iter()
            .map(|&e| {
                let d = g.loss_at_gate_value(&x, &y, 0, c, 1.0 - e).unwrap() - base;
                (d - (-e * grad + 0.5 * e * e * h)).abs()
            })
            .collect();
        let slope = (resid[0] / resid[2]).ln() / 4f64.ln();
        min_slope = min_slope.min(slope);
    }
    line(
        "taylor_so_fidelity",
        min_slope >= 2.5,
        format!(
            "min log-log residual slope over eps in {{0.5,0.25,0.125}}: {min_slope:.2} (>= 2.5)"
        ),
    )
}

// ----- oracle -------------------------------------------------------------------

fn oracle_consistency() -> Line {
    let (mut always, mut max_gap) = (true, 0.0f64);
    let mut baselines = Vec::new();
    for seed in 0..3u64 {
        // LeNet3 conv1 (16 filters), lightly trained so the baseline loss sits at a CIFAR-like level
        let (train, test) = synthetic_split(10, 13, 10, 32, seed).unwrap();
        let mut g = insert_gates(build_lenet3::<f64>(seed), Placement::AfterConv).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            lr: 0.01,
            lr_decay_every: 0,
            batch_size: 10,
            augment: false,
            weight_decay: 0.0,
            seed,
            ..TrainConfig::default()
        };
        engine::train(&mut g, &train.take(120), &test, &tc).unwrap();
        let batches = fixed_batches::<f64>(&train, 128, 64);
        let candidates: Vec<Unit> = (0..16).map(|c| Unit::new(0, c)).collect();
        let greedy = greedy_oracle_prune(&g, &batches, 3, Some(&candidates)).unwrap();
        for k in 1..=3 {
            let comb = combinatorial_oracle(&g, &batches, 0, k, COMBINATORIAL_BUDGET).unwrap();
            always &= comb.loss <= greedy.losses[k - 1];
            max_gap = max_gap.max((greedy.losses[k - 1] - comb.loss) / greedy.baseline);
        }
        baselines.push(format!("{:.2}", greedy.baseline));
    }
    line(
        "oracle_consistency",
        always && max_gap <= 0.05,
        format!(
            "lenet3 conv1 (16 filters), 3 seeds, k=1..3: combinatorial <= greedy {always}, max greedy gap {:.2}% of baseline (<= 5%), baselines {}",
            100.0 * max_gap,
            baselines.join("/")
        ),
    )
}

// ----- correlation definitions ---------------------------------------------------

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx.sqrt() * vy.sqrt()))
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let eq = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn brute_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut s, mut tx, mut ty, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1.0;
            let a = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let b = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            s += a * b;
            tx += f64::from(x[i] == x[j]);
            ty += f64::from(y[i] == y[j]);
        }
    }
    let d = (pairs - tx) * (pairs - ty);
    (d > 0.0).then(|| s / d.sqrt())
}

fn correlation_definitions() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst, mut mismatched, mut with_ties) = (0.0f64, 0usize, 0usize);
    for case in 0..1000 {
        let n = rng.random_range(2..=8);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if case % 2 == 0 {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        if (0..n).any(|i| (i + 1..n).any(|j| x[i] == x[j] || y[i] == y[j])) {
            with_ties += 1;
        }
        let pairs = [
            (pearson(&x, &y).ok(), brute_pearson(&x, &y)),
            (
                spearman(&x, &y).ok(),
                brute_pearson(&brute_ranks(&x), &brute_ranks(&y)),
            ),
            (kendall(&x, &y).ok(), brute_kendall(&x, &y)),
        ];
        for (lib, oracle) in pairs {
            match (lib, oracle) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched += 1,
            }
        }
    }
    line(
        "correlation_definitions",
        worst <= 1e-12 && mismatched == 0,
        format!("1000 cases ({with_ties} with ties), max abs diff {worst:.1e} (<= 1e-12), definedness mismatches {mismatched}"),
    )
}

// ----- criterion ranking -------------------------------------------------------------------

struct RankingSeed {
    so: f64,
    fo: f64,
    wm: f64,
    fo_before: f64,
}

fn ranking_seed(
    train: &Dataset,
    test: &Dataset,
    image_size: usize,
    epochs: usize,
    seed: u64,
) -> RankingSeed {
    let cfg = ResNetConfig {
        image_size,
        classes: train.num_classes,
        ..ResNetConfig::default()
    };
    let mut base = build_tiny_resnet::<f32>(&cfg, seed).unwrap();
    let tc = TrainConfig {
        epochs,
        lr: 0.05,
        lr_decay_every: 0,
        batch_size: 32,
        augment: false,
        seed,
        ..TrainConfig::default()
    };
    engine::train(&mut base, train, test, &tc).unwrap();
    let oracle_batches = fixed_batches::<f32>(train, 128, 64);
    let criterion_batches = fixed_batches::<f32>(train, 128, 16);
    let mut after = insert_gates(base.clone(), Placement::AfterBn).unwrap();
    let mut before = insert_gates(base, Placement::BeforeBn).unwrap();
    let oracle = experiments::oracle_unit_scores(&after, &oracle_batches).unwrap();
    let a = experiments::criterion_reports(
        &mut after,
        &[
            Criterion::TaylorSo,
            Criterion::TaylorFo,
            Criterion::WeightMagnitude,
        ],
        &criterion_batches,
        &oracle,
        HessianMethod::DoubleBackward,
        seed,
        "after_bn",
    )
    .unwrap();
    let b = experiments::criterion_reports(
        &mut before,
        &[Criterion::TaylorFo],
        &criterion_batches,
        &oracle,
        HessianMethod::DoubleBackward,
        seed,
        "before_bn",
    )
    .unwrap();
    RankingSeed {
        so: a[0].all_layers.spearman,
        fo: a[1].all_layers.spearman,
        wm: a[2].all_layers.spearman,
        fo_before: b[0].all_layers.spearman,
    }
}

fn ranking_summary(rows: &[RankingSeed]) -> (usize, usize, String) {
    let order = rows.iter().filter(|r| r.so >= r.fo && r.fo >= r.wm).count();
    let placement = rows.iter().filter(|r| r.fo > r.fo_before).count();
    let fmt = |f: fn(&RankingSeed) -> f64| {
        rows.iter()
            .map(|r| format!("{:.2}", f(r)))
            .collect::<Vec<_>>()
            .join("/")
    };
    let detail = format!(
        "SO>=FO>=WM in {order}/5, after-BN>before-BN in {placement}/5; spearman SO {} FO {} WM {} FO@before {}",
        fmt(|r| r.so),
        fmt(|r| r.fo),
        fmt(|r| r.wm),
        fmt(|r| r.fo_before)
    );
    (order, placement, detail)
}

fn ranking_trend() -> Vec<Line> {
    let mut out = Vec::new();
    match data_root() {
        Some(root) => {
            let (train, test) = load_cifar10(&root).unwrap();
            let train = train.take(5000);
            let rows: Vec<_> = (0..5)
                .map(|s| ranking_seed(&train, &test, 32, 10, s))
                .collect();
            let (order, placement, detail) = ranking_summary(&rows);
            out.push(line(
                "ranking_trend_cifar10",
                order >= 3 && placement >= 4,
                detail,
            ));
        }
        None => out.push(Line {
            name: "ranking_trend_cifar10",
            status: Status::Blocked,
            detail: "PRUNEKIT_DATA does not point at the CIFAR-10 binary batches".into(),
        }),
    }
    let rows: Vec<_> = (0..5)
        .map(|s| {
            let (train, test) = synthetic_split(10, 100, 50, 16, s).unwrap();
            ranking_seed(&train, &test, 16, 3, s)
        })
        .collect();
    let (order, placement, detail) = ranking_summary(&rows);
    out.push(Line {
        name: "ranking_trend_synthetic_proxy",
        status: if order >= 3 && placement >= 4 {
            Status::Pass
        } else {
            Status::Fail
        },
        detail: format!("informational, not a substitute: {detail}"),
    });
    out
}

// ----- pruning without fine-tuning -----------------------------------------------

fn no_finetune_check() -> Line {
    let criteria_list = [
        Criterion::Oracle,
        Criterion::TaylorSo,
        Criterion::TaylorFo,
        Criterion::WeightMagnitude,
        Criterion::Random,
    ];
    let mut counts = vec![Vec::new(); criteria_list.len()];
    for seed in 0..5u64 {
        let (train, test) = synthetic_split(10, 100, 50, 32, seed).unwrap();
        let mut g = insert_gates(build_lenet3::<f32>(seed), Placement::AfterConv).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr: 0.01,
            lr_decay_every: 0,
            weight_decay: 0.0,
            batch_size: 32,
            augment: false,
            seed,
            ..TrainConfig::default()
        };
        engine::train(&mut g, &train, &test, &tc).unwrap();
        let batches = fixed_batches::<f32>(&train, 128, 64);
        let full_train = fixed_batches::<f32>(&train, train.len(), 250);
        let opts = CurveOptions {
            neurons_per_step: 4,
            stop_loss: 1.0,
            max_pruned: 248,
            hessian_method: HessianMethod::DoubleBackward,
            seed,
        };
        for (i, &c) in criteria_list.iter().enumerate() {
            let rows = experiments::no_finetune_curve(&g, c, &batches, &full_train, &opts).unwrap();
            counts[i].push(pruned_before_crossing(&rows, 1.0) as f64);
        }
    }
    let m: Vec<f64> = counts.iter().map(|c| mean_std(c).0).collect();
    let margin = |a: usize, b: usize| (m[a] - m[b], pooled_std(&counts[a], &counts[b]));
    // every relation in the chain oracle >= SO >= FO > {WM, random} must clear one pooled std
    let pairs = [
        (0, 1, "oracle-SO"),
        (1, 2, "SO-FO"),
        (2, 3, "FO-WM"),
        (2, 4, "FO-random"),
    ];
    let margins: Vec<(f64, f64, &str)> = pairs
        .iter()
        .map(|&(a, b, n)| {
            let (d, s) = margin(a, b);
            (d, s, n)
        })
        .collect();
    let ok = margins.iter().all(|&(d, s, _)| d > s);
    let per: Vec<String> = criteria_list
        .iter()
        .zip(&counts)
        .map(|(c, v)| {
            let (mu, sd) = mean_std(v);
            format!("{} {mu:.1}+-{sd:.1}", c.name())
        })
        .collect();
    let gaps: Vec<String> = margins
        .iter()
        .map(|(d, s, n)| format!("{n} {d:.1} vs pooled sd {s:.1}"))
        .collect();
    line(
        "no_finetune_trend",
        ok,
        format!(
            "units pruned before train loss 1.0 over 5 seeds: {}; margins {}",
            per.join(", "),
            gaps.join(", ")
        ),
    )
}

// ----- schedules ------------------------------------------------------------------------

fn schedule_trend() -> Line {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let (train, test) = synthetic_split(10, 100, 50, 16, seed).unwrap();
        let cfg = ResNetConfig {
            image_size: 16,
            ..ResNetConfig::default()
        };
        let mut base = build_tiny_resnet::<f32>(&cfg, seed).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr: 0.05,
            lr_decay_every: 0,
            batch_size: 32,
            augment: false,
            seed,
            ..TrainConfig::default()
        };
        engine::train(&mut base, &train, &test, &tc).unwrap();
        let g = insert_gates(base, Placement::AfterBn).unwrap();
        let pc = PruneConfig {
            neurons_per_step: 8,
            batches_per_step: 5,
            target_pruned: 96,
            lr: 0.01,
            lr_decay_every: 0,
            epochs: 20,
            finetune_batches_after: Some(31),
            batch_size: 32,
            seed,
            ..PruneConfig::default()
        };
        let logs = experiments::compare_schedules(
            &g,
            &train,
            &test,
            &pc,
            &[Schedule::Iterative, Schedule::SingleStep],
        )
        .unwrap();
        let it = logs[0].rows.last().unwrap().train_loss;
        let ss = logs[1].rows.last().unwrap().train_loss;
        assert_eq!(logs[0].mask.len(), 96);
        assert_eq!(logs[1].mask.len(), 96);
        wins += usize::from(it <= ss);
        pairs.push(format!("{it:.3}/{ss:.3}"));
    }
    line(
        "schedule_iterative_vs_single",
        wins >= 3,
        format!("iterative <= single-step final train loss in {wins}/5 seeds (>= 3); iterative/single {}", pairs.join(" ")),
    )
}

// ----- determinism -----------------------------------------------------------------------

fn run_cli(dir: &Path, command: &str, config: &Path, extra: &[String]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prunekit"));
    cmd.arg(command)
        .arg("--config")
        .arg(config)
        .arg("--set")
        .arg(format!("output_dir=\"{}\"", dir.display()));
    for e in extra {
        cmd.arg("--set").arg(e);
    }
    cmd.env_remove("PRUNEKIT_DATA").output().unwrap()
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "ckpt"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn cli_determinism() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(
        &config,
        "seed = 4\nprecision = \"f32\"\n[synthetic]\nclasses = 10\ntrain_per_class = 12\ntest_per_class = 4\nimage_size = 32\n\
         [train]\nepochs = 1\nbatch_size = 20\naugment = true\n\
         [prune]\ncriterion = \"taylor_fo\"\nneurons_per_step = 2\nbatches_per_step = 2\ntarget_pruned = 8\nepochs = 3\nbatch_size = 20\n\
         [study]\nsamples = 40\nbatch_size = 20\ncriteria = [\"taylor_so\", \"taylor_fo\", \"weight_magnitude\", \"oracle\"]\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        let ckpt = format!("checkpoint=\"{}\"", dir.join("model.ckpt").display());
        for command in ["train", "prune", "oracle", "correlate", "flops"] {
            let extra = if command == "train" {
                vec![]
            } else {
                vec![ckpt.clone()]
            };
            let o = run_cli(&dir, command, &config, &extra);
            if !o.status.success() {
                failures.push(format!(
                    "{command}: {}",
                    String::from_utf8_lossy(&o.stderr).trim()
                ));
            }
        }
        outputs.push(csv_bytes(&dir));
    }
    let names: Vec<_> = outputs[0].iter().map(|(n, _)| n.clone()).collect();
    let differing: Vec<&str> = outputs[0]
        .iter()
        .zip(&outputs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let identical = outputs[0].len() == outputs[1].len() && differing.is_empty();
    line(
        "determinism_cli",
        failures.is_empty() && identical && names.len() >= 7,
        format!("two runs of train/prune/oracle/correlate/flops (f32), byte-identical {identical}: {}{}{}", names.join(", "), if differing.is_empty() { String::new() } else { format!("; differing {differing:?}") }, if failures.is_empty() { String::new() } else { format!("; failures {failures:?}") }),
    )
}

// ----- FLOPs ---------------------------------------------------------------------------------

fn lenet3_closed_form(c1: u64, c2: u64, f1: u64, f2: u64) -> (u64, u64) {
    // conv 5x5 valid: 32 -> 28, pool -> 14, conv -> 10, pool -> 5
    let conv1 = 2 * 25 * 3 * c1 * 784;
    let conv2 = 2 * 25 * c1 * c2 * 100;
    let elementwise = c1 * 784 + c1 * 196 + c2 * 100 + c2 * 25 + f1 + f2;
    let fc = 2 * (25 * c2) * f1 + 2 * f1 * f2 + 2 * f2 * 10;
    let params = 75 * c1 + c1 + 25 * c1 * c2 + c2 + 25 * c2 * f1 + f1 + f1 * f2 + f2 + f2 * 10 + 10;
    (conv1 + conv2 + elementwise + fc, params)
}

/// Pre-activation tiny ResNet; `kept[b] = (conv1 width, conv2 width)` of block `b`.
fn resnet_closed_form(cfg: &ResNetConfig, kept: &[(u64, u64)]) -> (u64, u64) {
    let (mut flops, mut params) = (0u64, 0u64);
    let c = cfg.in_channels as u64;
    let mut s = cfg.image_size as u64;
    let mut w = cfg.base_width as u64;
    flops += 2 * 9 * c * w * s * s;
    params += 9 * c * w + w;
    for (b, &out) in cfg.block_widths().iter().enumerate() {
        let out = out as u64;
        let stride = if out != w { 2 } else { 1 };
        let so = (s - 1) / stride + 1;
        let (m1, m2) = kept[b];
        flops += 2 * w * s * s; // bn1 + relu1
        params += 2 * w;
        flops += 2 * 9 * w * m1 * so * so;
        params += 9 * w * m1 + m1;
        flops += 2 * m1 * so * so; // bn2 + relu2
        params += 2 * m1;
        flops += 2 * 9 * m1 * m2 * so * so;
        params += 9 * m1 * m2 + m2;
        if stride != 1 || out != w {
            flops += 2 * w * out * so * so;
            params += w * out + out;
        }
        flops += out * so * so; // add
        w = out;
        s = so;
    }
    let k = cfg.classes as u64;
    flops += 3 * w * s * s + 2 * w * k; // final bn, relu, global pool, fc
    params += 2 * w + w * k + k;
    (flops, params)
}

fn flops_closed_form() -> Line {
    let mut problems = Vec::new();
    let lenet = insert_gates(build_lenet3::<f64>(0), Placement::AfterConv).unwrap();
    if count_flops_params(&lenet) != lenet3_closed_form(16, 32, 120, 84) {
        problems.push("lenet3 full".to_string());
    }
    let mut masked = lenet.clone();
    let mut mask = PruneMask::from_graph(&masked);
    let prune = [(0, 5), (1, 9), (2, 40), (3, 20)];
    for (gate, n) in prune {
        let channels = masked.gate(gate).channels();
        for c in 0..n {
            mask.apply(&mut masked, Unit::new(gate, c * 2 % channels), 1, 0.0)
                .unwrap();
        }
    }
    let widths: Vec<u64> = (0..4)
        .map(|g| masked.gate(g).active_count() as u64)
        .collect();
    let want = lenet3_closed_form(widths[0], widths[1], widths[2], widths[3]);
    let compacted = compact(&masked, &mask).unwrap();
    if count_flops_params(&masked) != want || count_flops_params(&compacted) != want {
        problems.push(format!("lenet3 masked {widths:?}"));
    }

    let cfg = ResNetConfig::default();
    let g = insert_gates(
        build_tiny_resnet::<f64>(&cfg, 0).unwrap(),
        Placement::AfterBn,
    )
    .unwrap();
    let full: Vec<(u64, u64)> = cfg
        .block_widths()
        .iter()
        .map(|&w| (w as u64, w as u64))
        .collect();
    let full_ok = count_flops_params(&g) == resnet_closed_form(&cfg, &full);
    if !full_ok {
        problems.push(format!(
            "tiny resnet full {:?} vs {:?}",
            count_flops_params(&g),
            resnet_closed_form(&cfg, &full)
        ));
    }
    let mut masked = g.clone();
    let mut mask = PruneMask::from_graph(&masked);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..60 {
        let gate = rng.random_range(0..masked.gates().len());
        let ch = rng.random_range(0..masked.gate(gate).channels());
        if masked.gate(gate).is_active(ch) && masked.gate(gate).active_count() > 1 {
            mask.apply(&mut masked, Unit::new(gate, ch), 1, 0.0)
                .unwrap();
        }
    }
    let kept: Vec<(u64, u64)> = (0..cfg.blocks)
        .map(|b| {
            (
                masked.gate(2 * b).active_count() as u64,
                masked.gate(2 * b + 1).active_count() as u64,
            )
        })
        .collect();
    let want = resnet_closed_form(&cfg, &kept);
    let compacted = compact(&masked, &mask).unwrap();
    if count_flops_params(&masked) != want
        || count_flops_params(&compacted) != want
        || want.0 >= count_flops_params(&g).0
    {
        problems.push(format!("tiny resnet masked {kept:?}"));
    }
    line(
        "flops_params_closed_form",
        problems.is_empty(),
        format!(
            "lenet3 {:?}, tiny resnet {:?}, masked and compacted counts equal hand counts{}",
            count_flops_params(&lenet),
            count_flops_params(&g),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {problems:?}")
            }
        ),
    )
}

// ----- LeNet3 on CIFAR-10 ------------------------------------------------------------------------

fn lenet3_cifar() -> Vec<Line> {
    let mut out = Vec::new();
    match data_root() {
        Some(root) => {
            let (train, test) = load_cifar10(&root).unwrap();
            let mut g = build_lenet3::<f32>(0);
            let m = engine::train(&mut g, &train, &test, &TrainConfig::default()).unwrap();
            let best = m.iter().map(|e| e.test_acc).fold(0.0, f64::max);
            out.push(line(
                "lenet3_cifar10_accuracy",
                best >= 0.70,
                format!(
                    "best test accuracy {:.2}% within {} epochs (>= 70%)",
                    100.0 * best,
                    m.len()
                ),
            ));
        }
        None => out.push(Line {
            name: "lenet3_cifar10_accuracy",
            status: Status::Blocked,
            detail: "PRUNEKIT_DATA does not point at the CIFAR-10 binary batches".into(),
        }),
    }
    let (train, test) = synthetic_split(10, 100, 50, 32, 0).unwrap();
    let mut g = build_lenet3_with::<f32>(32, 10, 0).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        lr_decay_every: 0,
        augment: false,
        ..TrainConfig::default()
    };
    let m = engine::train(&mut g, &train, &test, &tc).unwrap();
    let best = m.iter().map(|e| e.test_acc).fold(0.0, f64::max);
    out.push(Line {
        name: "lenet3_synthetic_accuracy",
        status: if best >= 0.8 {
            Status::Pass
        } else {
            Status::Fail
        },
        detail: format!(
            "informational: best synthetic test accuracy {:.1}% within 5 epochs (>= 80%)",
            100.0 * best
        ),
    });
    out
}

#[test]
fn acceptance() {
    type Check = (&'static str, fn() -> Vec<Line>);
    let checks: Vec<Check> = vec![
        ("gradients", || vec![gradient_correctness()]),
        ("gate_weight", || vec![gate_weight_equivalence()]),
        ("bn", || vec![bn_decomposition()]),
        ("hessian", || vec![hessian_agreement()]),
        ("so", || vec![taylor_so_fidelity()]),
        ("oracle", || vec![oracle_consistency()]),
        ("correlation", || vec![correlation_definitions()]),
        ("flops", || vec![flops_closed_form()]),
        ("determinism", || vec![cli_determinism()]),
        ("lenet3", lenet3_cifar),
        ("schedule", || vec![schedule_trend()]),
        ("ranking", ranking_trend),
        ("no_finetune", || vec![no_finetune_check()]),
    ];
    let mut all = Vec::new();
    // comma-separated check keys, e.g. `PRUNEKIT_ACCEPTANCE_ONLY=gate_weight,flops`
    let only = std::env::var("PRUNEKIT_ACCEPTANCE_ONLY").ok();
    for (key, f) in checks {
        if only
            .as_deref()
            .is_some_and(|o| !o.split(',').any(|k| k.trim() == key))
        {
            continue;
        }
        let t = Instant::now();
        let lines = f();
        let secs = t.elapsed().as_secs_f64();
        for l in &lines {
            emit(l, secs);
        }
        all.extend(lines);
    }
    let failed: Vec<_> = all
        .iter()
        .filter(|l| l.status == Status::Fail)
        .map(|l| l.name)
        .collect();
    let blocked: Vec<_> = all
        .iter()
        .filter(|l| l.status == Status::Blocked)
        .map(|l| l.name)
        .collect();
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] {} checks, failed {:?}, blocked {:?}",
        all.len(),
        failed,
        blocked
    );
    assert!(failed.is_empty(), "failed acceptance criteria: {failed:?}");
}

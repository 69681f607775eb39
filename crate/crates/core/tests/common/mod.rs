#![allow(dead_code)]

use prunekit::graph::{Mode, NetworkGraph, Op, Placement};
use prunekit::{compact, insert_gates, models, PruneMask, ResNetConfig, Tensor, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    graph: &NetworkGraph<f64>,
    n: usize,
) -> (Tensor<f64>, Vec<usize>) {
    let mut shape = vec![n];
    shape.extend_from_slice(graph.input_shape());
    let x = normal_tensor(rng, &shape, 1.0);
    let c = graph.num_classes();
    let y = (0..n).map(|_| rng.random_range(0..c)).collect();
    (x, y)
}

/// Perturbs every batch-norm affine and running parameter so they are not at their identity init.
pub fn randomize_bn(graph: &mut NetworkGraph<f64>, rng: &mut ChaCha8Rng) {
    for p in graph.params_mut() {
        let d = p.value.data_mut();
        if p.name.ends_with(".gamma") || p.name.ends_with(".running_var") {
            d.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if p.name.ends_with(".beta")
            || p.name.ends_with(".running_mean")
            || p.name.ends_with(".bias")
        {
            d.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

/// One gradient-check configuration: a graph under test with a batch.
pub struct GradCase {
    pub label: String,
    pub graph: NetworkGraph<f64>,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

const KINDS: [&str; 11] = [
    "conv",
    "linear",
    "relu",
    "maxpool",
    "bn_train",
    "bn_eval",
    "gate",
    "gap",
    "add",
    "resnet",
    "resnet_compacted",
];

/// The `i`-th seeded configuration; kinds cycle so every layer type is covered.
pub fn grad_case(i: usize, seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
    let kind = KINDS[i % KINDS.len()];
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(5..=8);
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(2..=4);
    let mut g = NetworkGraph::<f64>::new(&[c, hw, hw]);
    let mut label = format!("{kind} c={c} hw={hw} n={batch}");
    let mut mode = Mode::Train;
    let head = |g: &mut NetworkGraph<f64>, x, rng: &mut ChaCha8Rng| {
        let f = if g.node(x).shape.len() == 3 {
            g.flatten("flat", x)
        } else {
            x
        };
        g.linear("head", f, classes, false, rng).unwrap();
    };
    match kind {
        "conv" => {
            let (k, s, p) = (
                rng.random_range(1..=3),
                rng.random_range(1..=2),
                rng.random_range(0..=1),
            );
            label += &format!(" k={k} s={s} p={p}");
            let x = g
                .conv2d("conv", 0, rng.random_range(1..=4), k, s, p, true, &mut rng)
                .unwrap();
            head(&mut g, x, &mut rng);
        }
        "linear" => {
            let f = g.flatten("in", 0);
            let h = g
                .linear("fc", f, rng.random_range(2..=6), true, &mut rng)
                .unwrap();
            head(&mut g, h, &mut rng);
        }
        "relu" => {
            let x = g.conv2d("conv", 0, 3, 3, 1, 1, true, &mut rng).unwrap();
            let x = g.relu("relu", x);
            head(&mut g, x, &mut rng);
        }
        "maxpool" => {
            let s = rng.random_range(1..=2);
            label += &format!(" s={s}");
            let x = g.conv2d("conv", 0, 3, 3, 1, 1, true, &mut rng).unwrap();
            let x = g.maxpool2d("pool", x, 2, s).unwrap();
            head(&mut g, x, &mut rng);
        }
        "bn_train" | "bn_eval" => {
            let x = g.conv2d("conv", 0, 3, 3, 1, 0, true, &mut rng).unwrap();
            let x = g.batchnorm("bn", x);
            let x = g.relu("relu", x);
            head(&mut g, x, &mut rng);
            if kind == "bn_eval" {
                mode = Mode::Eval;
            }
        }
        "gate" => {
            let x = g.conv2d("conv", 0, 4, 3, 1, 1, true, &mut rng).unwrap();
            let x = g.relu("relu", x);
            head(&mut g, x, &mut rng);
            g = insert_gates(g, Placement::AfterConv).unwrap();
        }
        "gap" => {
            let x = g.conv2d("conv", 0, 4, 3, 1, 1, true, &mut rng).unwrap();
            let x = g.global_avg_pool("gap", x);
            head(&mut g, x, &mut rng);
        }
        "add" => {
            let a = g.conv2d("a", 0, 3, 3, 1, 1, true, &mut rng).unwrap();
            let b = g.conv2d("b", 0, 3, 1, 1, 0, true, &mut rng).unwrap();
            let x = g.add("add", a, b).unwrap();
            let x = g.relu("relu", x);
            head(&mut g, x, &mut rng);
        }
        _ => {
            let cfg = ResNetConfig {
                blocks: 2,
                base_width: 3,
                image_size: hw,
                in_channels: c,
                classes,
            };
            g = insert_gates(
                models::build_tiny_resnet::<f64>(&cfg, rng.random()).unwrap(),
                Placement::AfterBn,
            )
            .unwrap();
            if rng.random_bool(0.5) {
                mode = Mode::Eval;
            }
            if kind == "resnet_compacted" {
                // prune one conv1 and one conv2 channel so compaction introduces channel maps
                let mut mask = PruneMask::from_graph(&g);
                for gate in 0..g.gates().len().min(2) {
                    mask.apply(&mut g, Unit::new(gate, 0), 1, 0.0).unwrap();
                }
                g = compact(&g, &mask).unwrap();
            }
        }
    }
    randomize_bn(&mut g, &mut rng);
    g.mode = mode;
    g.update_running_stats = false;
    if mode == Mode::Eval {
        label += " eval";
    }
    let (x, y) = random_batch(&mut rng, &g, batch);
    GradCase {
        label,
        graph: g,
        x,
        y,
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|a| a / n).collect()
}

/// Richardson-extrapolated central difference of `f` at 0.
fn richardson(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let d = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let d1 = d(&mut f, h);
    let d2 = d(&mut f, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Worst relative error over directional derivatives of every trainable parameter
/// tensor and over every gate channel, with the name of the worst tensor.
pub fn check_case(case: &mut GradCase, dir_seed: u64) -> (f64, String) {
    let h = 1e-5;
    let g = &mut case.graph;
    g.forward(&case.x, &case.y).unwrap();
    g.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(dir_seed);
    let mut worst = (0.0, String::new());
    for p in 0..g.params().len() {
        if !g.params()[p].trainable {
            continue;
        }
        let grad = g.params()[p].grad.data().to_vec();
        let r: Vec<f64> = (0..grad.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let v = unit(
            &unit(&grad)
                .iter()
                .zip(unit(&r))
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        );
        let analytic: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
        let base = g.params()[p].value.clone();
        let numeric = richardson(
            |t| {
                let val = &mut g.params_mut()[p].value;
                for ((w, b), d) in val.data_mut().iter_mut().zip(base.data()).zip(&v) {
                    *w = b + t * d;
                }
                let l = g.loss(&case.x, &case.y).unwrap();
                g.params_mut()[p].value = base.clone();
                l
            },
            h,
        );
        // a parameter feeding training-mode batch norm only through a per-channel shift has an
        // exactly zero gradient; that is checked absolutely against the difference quotient
        let zero = grad.iter().all(|a| a.abs() < 1e-12);
        let e = match zero {
            true if numeric.abs() < 1e-8 => 0.0,
            true => f64::INFINITY,
            false => rel(analytic, numeric),
        };
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, g.params()[p].name.clone());
        }
    }
    for gate in 0..g.gates().len() {
        let analytic = g.gate(gate).grad.clone();
        let mut num = Vec::with_capacity(analytic.len());
        for ch in 0..analytic.len() {
            let z0 = g.gate(gate).z()[ch];
            num.push(richardson(
                |t| {
                    g.loss_at_gate_value(&case.x, &case.y, gate, ch, z0 + t)
                        .unwrap()
                },
                h,
            ));
        }
        let diff = analytic
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        let e = if scale == 0.0 { 0.0 } else { diff / scale };
        if e > worst.0 {
            worst = (e, format!("gate {}", g.gate(gate).name));
        }
    }
    (worst.0, worst.1)
}

pub struct GradReport {
    pub configs: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub kinds_seen: Vec<&'static str>,
}

/// Runs `n` seeded configurations.
pub fn gradient_corpus(n: usize, seed: u64) -> GradReport {
    let mut report = GradReport {
        configs: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        kinds_seen: Vec::new(),
    };
    for i in 0..n {
        let mut case = grad_case(i, seed);
        let (e, name) = check_case(&mut case, seed ^ i as u64);
        report.configs += 1;
        let kind = KINDS[i % KINDS.len()];
        if !report.kinds_seen.contains(&kind) {
            report.kinds_seen.push(kind);
        }
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{} [{name}]", case.label);
        }
    }
    report
}

/// Whether `graph` contains an add node with a channel map.
pub fn has_channel_map(graph: &NetworkGraph<f64>) -> bool {
    graph
        .nodes()
        .iter()
        .any(|n| matches!(&n.op, Op::Add { maps } if maps.iter().any(Option::is_some)))
}

//! Desk-scale studies built from the library pieces: loss-vs-pruned curves
//! without fine-tuning, criterion/oracle correlation, and schedule comparison.

use serde::{Deserialize, Serialize};

use crate::criteria::{self, Batch, Criterion, HessianMethod, ImportanceTable, FD_STEP};
use crate::data::{eval_batches, Dataset, Split};
use crate::engine::{self, PruneConfig, RunLog};
use crate::error::{Error, Result};
use crate::gates::PruneMask;
use crate::graph::{Mode, NetworkGraph};
use crate::kernels;
use crate::oracle;
use crate::stats::{correlation_study, CorrelationReport, StudyOptions, UnitScores};
use crate::tensor::Scalar;

/// Eval-mode loss over `batches`, weighted by batch size.
pub fn loss_on<T: Scalar>(graph: &NetworkGraph<T>, batches: &[Batch<T>]) -> Result<f64> {
    let mut g = graph.clone();
    g.mode = Mode::Eval;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in batches {
        let logits = g.predict(x)?;
        let (l, _) = kernels::softmax_xent_forward(&logits, y)?;
        let l = l.to_f64c();
        if !l.is_finite() {
            return Err(Error::NonFinite {
                layer: "softmax_xent".into(),
            });
        }
        sum += l * y.len() as f64;
        n += y.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no batches to evaluate".into()));
    }
    Ok(sum / n as f64)
}

/// Fixed evaluation batches over the first `n` samples of `ds`.
pub fn fixed_batches<T: Scalar>(ds: &Dataset, n: usize, batch_size: usize) -> Vec<Batch<T>> {
    eval_batches::<T>(&ds.take(n.min(ds.len())), batch_size).collect()
}

/// Scores of every prunable unit from one pass over `batches` with the network held fixed.
///
/// Gradient criteria run in training mode with running statistics frozen. With `squared`
/// (for correlation) `obd` and `oracle` report squared values, otherwise signed ones (for pruning).
pub fn criterion_scores<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    criterion: Criterion,
    batches: &[Batch<T>],
    method: HessianMethod,
    seed: u64,
    iteration: usize,
    squared: bool,
) -> Result<Vec<f64>> {
    let prev = (graph.mode, graph.update_running_stats, graph.full_gradient);
    graph.mode = Mode::Train;
    graph.update_running_stats = false;
    graph.full_gradient = criterion == Criterion::TaylorFoFg;
    let r = (|| {
        if criterion.is_per_batch() {
            let mut table = ImportanceTable::for_graph(criterion, graph);
            for (x, y) in batches {
                graph.forward(x, y)?;
                graph.backward()?;
                let s = engine::batch_scores(graph, criterion)?.expect("per-batch criterion");
                table.accumulate(&s)?;
            }
            table.end_window()?;
            Ok(table.window_mean.clone())
        } else if criterion == Criterion::Obd {
            let h = criteria::second_order_window(graph, batches, method, FD_STEP)?.1;
            Ok(criteria::obd(&h, !squared))
        } else if criterion == Criterion::Oracle && squared {
            let o = oracle::ablation_scores(graph, batches, Split::Train)?;
            Ok(o.dense_signed(&graph.prunable_units())
                .into_iter()
                .map(|d| d * d)
                .collect())
        } else {
            engine::window_scores(graph, criterion, batches, method, seed, iteration)
        }
    })();
    (graph.mode, graph.update_running_stats, graph.full_gradient) = prev;
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub criterion: String,
    pub seed: u64,
    pub step: usize,
    pub pruned: usize,
    pub loss: f64,
}

/// Options for [`no_finetune_curve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    pub neurons_per_step: usize,
    /// Stop once the loss exceeds this.
    pub stop_loss: f64,
    pub max_pruned: usize,
    pub hessian_method: HessianMethod,
    pub seed: u64,
}

/// Prunes a fixed network step by step, re-scoring on `batches` before every step
/// and recording the loss on `loss_batches` after it.
pub fn no_finetune_curve<T: Scalar>(
    graph: &NetworkGraph<T>,
    criterion: Criterion,
    batches: &[Batch<T>],
    loss_batches: &[Batch<T>],
    opts: &CurveOptions,
) -> Result<Vec<CurveRow>> {
    if opts.neurons_per_step == 0 {
        return Err(Error::Config("neurons_per_step must be at least 1".into()));
    }
    let mut g = graph.clone();
    let units = g.prunable_units();
    let mut mask = PruneMask::from_graph(&g);
    let row = |step, pruned, loss| CurveRow {
        criterion: criterion.name().into(),
        seed: opts.seed,
        step,
        pruned,
        loss,
    };
    let mut rows = vec![row(0, 0, loss_on(&g, loss_batches)?)];
    let mut step = 0;
    while mask.len() < opts.max_pruned {
        step += 1;
        let scores = criterion_scores(
            &mut g,
            criterion,
            batches,
            opts.hessian_method,
            opts.seed,
            step,
            false,
        )?;
        let n = opts.neurons_per_step.min(opts.max_pruned - mask.len());
        if engine::prune_step(&mut g, &mut mask, &units, &scores, n, step)?.is_empty() {
            break;
        }
        let loss = loss_on(&g, loss_batches)?;
        rows.push(row(step, mask.len(), loss));
        if loss > opts.stop_loss {
            break;
        }
    }
    Ok(rows)
}

/// Units pruned at the last point before the loss first exceeds `threshold`.
pub fn pruned_before_crossing(rows: &[CurveRow], threshold: f64) -> usize {
    let mut last = 0;
    for r in rows {
        if r.loss > threshold {
            break;
        }
        last = r.pruned;
    }
    last
}

/// Sample mean and unbiased standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// `sqrt((s_a^2 + s_b^2) / 2)` for equally sized samples.
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_std(a);
    let (_, sb) = mean_std(b);
    ((sa * sa + sb * sb) / 2.0).sqrt()
}

/// Squared single-unit ablation scores over every active unit.
pub fn oracle_unit_scores<T: Scalar>(
    graph: &NetworkGraph<T>,
    batches: &[Batch<T>],
) -> Result<UnitScores> {
    let o = oracle::ablation_scores(graph, batches, Split::Train)?;
    UnitScores::new(Criterion::Oracle.name(), o.units, o.squared)
}

/// Correlation of each criterion, computed on `graph`, with the given oracle scores.
pub fn criterion_reports<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    criteria_list: &[Criterion],
    batches: &[Batch<T>],
    oracle_scores: &UnitScores,
    method: HessianMethod,
    seed: u64,
    label: &str,
) -> Result<Vec<CorrelationReport>> {
    let units = graph.prunable_units();
    let mut out = Vec::with_capacity(criteria_list.len());
    for &c in criteria_list {
        let s = criterion_scores(graph, c, batches, method, seed, 0, true)?;
        let name = if label.is_empty() {
            c.name().to_string()
        } else {
            format!("{}@{label}", c.name())
        };
        let scores = UnitScores::new(name, units.clone(), s)?.restrict(&oracle_scores.units)?;
        out.push(correlation_study(
            &scores,
            oracle_scores,
            StudyOptions::default(),
        )?);
    }
    Ok(out)
}

/// Runs `cfg` on a copy of `graph` once per schedule; returns the logs in order.
pub fn compare_schedules<T: Scalar>(
    graph: &NetworkGraph<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &PruneConfig,
    schedules: &[engine::Schedule],
) -> Result<Vec<RunLog>> {
    schedules
        .iter()
        .map(|&s| {
            let mut g = graph.clone();
            engine::run(
                &mut g,
                train,
                test,
                &PruneConfig {
                    schedule: s,
                    ..cfg.clone()
                },
            )
        })
        .collect()
}

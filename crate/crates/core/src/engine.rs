//! Interleaved fine-tuning and pruning.
//!
//! Each pruning iteration fine-tunes on a window of minibatches while
//! accumulating the criterion, then zeroes the gates of the lowest-scoring
//! units. Gates are never updated by the optimizer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criteria::{
    self, Aggregation, Batch, Criterion, HessianMethod, ImportanceTable, FD_STEP,
};
use crate::data::{eval_batches, minibatches, Dataset, Split};
use crate::error::{Error, Result};
use crate::flops::count_flops_params;
use crate::gates::{PruneMask, Unit};
use crate::graph::{Mode, NetworkGraph};
use crate::kernels;
use crate::oracle;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Prune `neurons_per_step` after every window until the target is reached.
    Iterative,
    /// Accumulate one window, prune the whole target at once, then fine-tune.
    SingleStep,
    /// Like iterative, but only prune while the window's training loss passes the threshold test.
    Continuous,
}

/// How the continuous schedule compares the window loss with `loss_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Prune while loss <= threshold.
    #[default]
    Below,
    /// Prune while loss >= threshold.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub neurons_per_step: usize,
    /// Minibatches per pruning window.
    pub batches_per_step: usize,
    pub target_pruned: usize,
    pub schedule: Schedule,
    pub loss_threshold: Option<f64>,
    pub threshold_rule: ThresholdRule,
    /// Stop pruning once the window's training loss exceeds this.
    pub max_loss: Option<f64>,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Upper bound on fine-tuning epochs.
    pub epochs: usize,
    /// Fine-tuning batches after the target is reached; `None` uses the rest of the epoch budget.
    pub finetune_batches_after: Option<usize>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub augment: bool,
    /// Rank by the EMA across iterations (gradient-based criteria only).
    pub use_ema: bool,
    /// Freeze the scores of the first window and replay them.
    pub fixed_criterion: bool,
    pub hessian_method: HessianMethod,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            criterion: Criterion::TaylorFo,
            neurons_per_step: 4,
            batches_per_step: 10,
            target_pruned: 0,
            schedule: Schedule::Iterative,
            loss_threshold: None,
            threshold_rule: ThresholdRule::Below,
            max_loss: None,
            lr: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            finetune_batches_after: None,
            batch_size: 64,
            eval_batch_size: 256,
            augment: false,
            use_ema: true,
            fixed_criterion: false,
            hessian_method: HessianMethod::DoubleBackward,
            seed: 0,
        }
    }
}

impl PruneConfig {
    /// Rejects contradictory settings before any training.
    pub fn validate<T: Scalar>(&self, graph: &NetworkGraph<T>, train_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.neurons_per_step == 0 {
            return bad("neurons_per_step must be at least 1".into());
        }
        if self.batches_per_step == 0 {
            return bad("batches_per_step must be at least 1".into());
        }
        if self.schedule == Schedule::Continuous && self.loss_threshold.is_none() {
            return bad("continuous schedule requires loss_threshold".into());
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return bad(format!(
                "batch_size {} must be in 1..={train_len}",
                self.batch_size
            ));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(self.sgd_momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr, sgd_momentum and weight_decay must be non-negative".into());
        }
        if graph.gates().is_empty() {
            return bad("model has no gates; choose a gate placement".into());
        }
        let removable: usize = graph
            .gates()
            .iter()
            .map(|g| g.active_count().saturating_sub(1))
            .sum();
        if self.target_pruned > removable {
            return bad(format!(
                "target_pruned {} exceeds the {removable} removable units",
                self.target_pruned
            ));
        }
        if self.criterion == Criterion::BnScale {
            criteria::bn_scale(graph).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// SGD with momentum over trainable parameters; `v = m v + g + wd w`, `w -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(graph: &NetworkGraph<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: graph
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, graph: &mut NetworkGraph<T>) {
        let (lr, m, wd) = (
            T::from_f64c(self.lr),
            T::from_f64c(self.momentum),
            T::from_f64c(self.weight_decay),
        );
        for (p, v) in graph.params_mut().iter_mut().zip(self.velocity.iter_mut()) {
            if !p.trainable {
                continue;
            }
            for ((w, &g), vel) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut())
            {
                *vel = m * *vel + g + wd * *w;
                *w = *w - lr * *vel;
            }
        }
    }

    pub fn reset(&mut self) {
        for v in self.velocity.iter_mut() {
            v.fill(T::zero());
        }
    }

    pub fn is_reset(&self) -> bool {
        self.velocity
            .iter()
            .all(|v| v.data().iter().all(|&x| x == T::zero()))
    }
}

/// Per-batch criterion scores from the last backward pass, for criteria that accumulate that way.
pub fn batch_scores<T: Scalar>(
    graph: &NetworkGraph<T>,
    criterion: Criterion,
) -> Result<Option<Vec<f64>>> {
    Ok(Some(match criterion {
        Criterion::TaylorFo => criteria::taylor_fo_gate(graph)?,
        Criterion::TaylorFoFg => criteria::taylor_fo_fg(graph)?,
        Criterion::TaylorFoWeightGroup => criteria::taylor_fo_weight(graph, Aggregation::Group)?,
        Criterion::TaylorFoWeightSum => {
            criteria::taylor_fo_weight(graph, Aggregation::IndividualSum)?
        }
        Criterion::TaylorOutput => criteria::taylor_output(graph)?,
        _ => return Ok(None),
    }))
}

/// One training-mode SGD update; accumulates `table` from the same backward pass.
pub fn finetune_step<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    opt: &mut Sgd<T>,
    table: Option<&mut ImportanceTable>,
) -> Result<f64> {
    graph.mode = Mode::Train;
    let loss = graph.forward(batch, labels)?.to_f64c();
    graph.backward()?;
    if let Some(t) = table {
        if let Some(s) = batch_scores(graph, t.criterion)? {
            t.accumulate(&s)?;
        }
    }
    if opt.lr != 0.0 {
        opt.step(graph);
    }
    Ok(loss)
}

/// Window-end scores for criteria that are not accumulated per batch.
///
/// `window` holds the window's batches; `iteration` seeds the random criterion.
pub fn window_scores<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    criterion: Criterion,
    window: &[Batch<T>],
    method: HessianMethod,
    seed: u64,
    iteration: usize,
) -> Result<Vec<f64>> {
    let units = graph.prunable_units();
    Ok(match criterion {
        Criterion::TaylorSo => {
            let (grads, h) = criteria::second_order_window(graph, window, method, FD_STEP)?;
            criteria::taylor_so_gate(&grads, &h)?
        }
        Criterion::Obd => criteria::obd(&criteria::hessian_diag(graph, window, method)?, true),
        Criterion::Oracle => {
            oracle::ablation_scores(graph, window, Split::Train)?.dense_signed(&units)
        }
        Criterion::WeightMagnitude => criteria::weight_magnitude(graph)?,
        Criterion::BnScale => criteria::bn_scale(graph)?,
        Criterion::Random => criteria::random_scores(
            units.len(),
            seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ),
        c => {
            return Err(Error::InvalidArgument(format!(
                "{c} is accumulated per batch"
            )))
        }
    })
}

/// Zeroes the `n` lowest-scoring active units, lower `(gate, channel)` first on ties,
/// keeping one active channel per gate. Returns the removed units.
pub fn prune_step<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    mask: &mut PruneMask,
    units: &[Unit],
    scores: &[f64],
    n: usize,
    iteration: usize,
) -> Result<Vec<Unit>> {
    if units.len() != scores.len() {
        return Err(Error::shape(
            "prune_step scores",
            &[units.len()],
            &[scores.len()],
        ));
    }
    let mut order: Vec<usize> = (0..units.len())
        .filter(|&i| graph.gate(units[i].gate).is_active(units[i].channel))
        .collect();
    if let Some(&i) = order.iter().find(|&&i| scores[i].is_nan()) {
        return Err(Error::NonFinite {
            layer: format!("score of unit {}", units[i]),
        });
    }
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(units[a].cmp(&units[b]))
    });
    let mut removed = Vec::with_capacity(n);
    for i in order {
        if removed.len() == n {
            break;
        }
        let u = units[i];
        if graph.gate(u.gate).active_count() <= 1 {
            continue;
        }
        mask.apply(graph, u, iteration, scores[i])?;
        removed.push(u);
    }
    if removed.len() < n {
        log::warn!(
            "only {} of {} requested units could be pruned",
            removed.len(),
            n
        );
    }
    Ok(removed)
}

/// One RunLog row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub iteration: usize,
    pub batches_seen: usize,
    pub pruned_total: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
    pub mask: PruneMask,
    /// Criterion tables as they stood at each pruning iteration.
    pub tables: Vec<ImportanceTable>,
    pub momentum_reset: bool,
}

impl RunLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

pub(crate) fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Eval-mode mean loss and accuracy over a dataset.
pub fn evaluate<T: Scalar>(
    graph: &NetworkGraph<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut g = graph.clone();
    g.mode = Mode::Eval;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (x, y) in eval_batches::<T>(ds, batch_size) {
        let logits = g.predict(&x)?;
        let (l, _) = kernels::softmax_xent_forward(&logits, &y)?;
        loss += l.to_f64c() * y.len() as f64;
        let c = logits.row_len();
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += usize::from(arg == label);
        }
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn lr_at(lr: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        lr
    } else {
        lr * factor.powi((epoch / every) as i32)
    }
}

/// Runs the configured schedule on `graph`, which must carry gates.
pub fn run<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &PruneConfig,
) -> Result<RunLog> {
    cfg.validate(graph, train.len())?;
    graph.full_gradient = cfg.criterion == Criterion::TaylorFoFg;
    // a network that is not fine-tuned keeps its batch-norm statistics too
    let frozen_stats = cfg.lr == 0.0;
    let prev_stats = graph.update_running_stats;
    graph.update_running_stats = !frozen_stats;
    let result = run_inner(graph, train, test, cfg);
    graph.update_running_stats = prev_stats;
    result
}

fn run_inner<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &PruneConfig,
) -> Result<RunLog> {
    let units = graph.prunable_units();
    let mut mask = PruneMask::from_graph(graph);
    let start_pruned = mask.len();
    let mut opt = Sgd::new(graph, cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
    let mut table = ImportanceTable::new(cfg.criterion, units.clone());
    let mut frozen: Option<Vec<f64>> = None;
    let mut tables = Vec::new();
    let mut rows = Vec::new();
    let mut window: Vec<Batch<T>> = Vec::new();
    let keep_window = !cfg.criterion.is_per_batch();
    let mut window_loss = (0.0, 0usize);
    let mut batches_seen = 0usize;
    let mut iteration = 0usize;
    let mut pruning_done = cfg.target_pruned == 0;
    let mut momentum_reset = false;
    let mut after = 0usize;

    let log_row =
        |graph: &NetworkGraph<T>, iteration, batches_seen, pruned, loss| -> Result<RunLogRow> {
            let (_, acc) = evaluate(graph, test, cfg.eval_batch_size)?;
            let (flops, params) = count_flops_params(graph);
            Ok(RunLogRow {
                iteration,
                batches_seen,
                pruned_total: pruned,
                train_loss: loss,
                test_acc: acc,
                flops,
                params,
            })
        };
    let initial_loss = evaluate(graph, train, cfg.eval_batch_size)?.0;
    rows.push(log_row(graph, 0, 0, start_pruned, initial_loss)?);

    'epochs: for epoch in 0..cfg.epochs {
        opt.lr = lr_at(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
        for (x, y) in minibatches::<T>(train, cfg.batch_size, cfg.seed, epoch as u64, cfg.augment)?
        {
            let tbl = if pruning_done { None } else { Some(&mut table) };
            let loss = finetune_step(graph, &x, &y, &mut opt, tbl)?;
            batches_seen += 1;
            window_loss.0 += loss;
            window_loss.1 += 1;
            if pruning_done {
                after += 1;
                if cfg.finetune_batches_after.is_some_and(|n| after >= n) {
                    break 'epochs;
                }
                continue;
            }
            if keep_window {
                window.push((x, y));
            }
            if window_loss.1 < cfg.batches_per_step {
                continue;
            }
            // close the window
            let mean_loss = window_loss.0 / window_loss.1 as f64;
            window_loss = (0.0, 0);
            let pruned_now = mask.len() - start_pruned;
            let remaining = cfg.target_pruned - pruned_now;
            let over_max = cfg.max_loss.is_some_and(|m| mean_loss > m);
            let allowed = match cfg.schedule {
                Schedule::Continuous => {
                    let t = cfg.loss_threshold.expect("validated");
                    match cfg.threshold_rule {
                        ThresholdRule::Below => mean_loss <= t,
                        ThresholdRule::Above => mean_loss >= t,
                    }
                }
                _ => true,
            };
            let n = match cfg.schedule {
                Schedule::SingleStep => remaining,
                _ => cfg.neurons_per_step.min(remaining),
            };
            let scores: Vec<f64> = if let Some(f) = &frozen {
                f.clone()
            } else {
                if !cfg.criterion.is_per_batch() {
                    let s = window_scores(
                        graph,
                        cfg.criterion,
                        &window,
                        cfg.hessian_method,
                        cfg.seed,
                        iteration,
                    )?;
                    table.set_window(&s)?;
                } else {
                    table.end_window()?;
                }
                tables.push(table.clone());
                let s = table
                    .scores(cfg.use_ema && cfg.criterion.is_gradient_based())
                    .to_vec();
                if cfg.fixed_criterion {
                    frozen = Some(s.clone());
                }
                s
            };
            window.clear();
            if over_max {
                log::info!("window loss {mean_loss:.4} exceeds max_loss; pruning stops");
                pruning_done = true;
            } else if allowed {
                iteration += 1;
                let removed = prune_step(graph, &mut mask, &units, &scores, n, iteration)?;
                graph.mode = Mode::Train;
                rows.push(log_row(
                    graph,
                    iteration,
                    batches_seen,
                    mask.len(),
                    mean_loss,
                )?);
                if removed.is_empty() || mask.len() - start_pruned >= cfg.target_pruned {
                    pruning_done = true;
                }
            }
            if pruning_done {
                opt.reset();
                momentum_reset = true;
                if cfg.finetune_batches_after == Some(0) {
                    break 'epochs;
                }
            }
        }
    }
    if !pruning_done && cfg.target_pruned > 0 {
        log::warn!(
            "epoch budget exhausted after pruning {} of {} units",
            mask.len() - start_pruned,
            cfg.target_pruned
        );
    }
    let final_loss = evaluate(graph, train, cfg.eval_batch_size)?.0;
    rows.push(log_row(
        graph,
        iteration + 1,
        batches_seen,
        mask.len(),
        final_loss,
    )?);
    Ok(RunLog {
        rows,
        mask,
        tables,
        momentum_reset,
    })
}

/// Optimizer recipe for plain training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            eval_batch_size: 256,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Plain training from the current weights; one metrics row per epoch.
pub fn train<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if cfg.batch_size == 0 || cfg.batch_size > train.len() || cfg.eval_batch_size == 0 {
        return Err(Error::Config(format!(
            "batch_size {} must be in 1..={}",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut opt = Sgd::new(graph, cfg.lr, cfg.sgd_momentum, cfg.weight_decay);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
        let (mut sum, mut n) = (0.0, 0usize);
        for (x, y) in minibatches::<T>(train, cfg.batch_size, cfg.seed, epoch as u64, cfg.augment)?
        {
            sum += finetune_step(graph, &x, &y, &mut opt, None)?;
            n += 1;
        }
        let (test_loss, test_acc) = evaluate(graph, test, cfg.eval_batch_size)?;
        log::info!(
            "epoch {epoch}: train loss {:.4}, test acc {:.4}",
            sum / n as f64,
            test_acc
        );
        out.push(EpochMetrics {
            epoch,
            train_loss: sum / n as f64,
            test_loss,
            test_acc,
        });
    }
    graph.mode = Mode::Train;
    Ok(out)
}

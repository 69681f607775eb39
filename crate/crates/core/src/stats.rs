//! Correlation of criterion scores with oracle importance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::Unit;
use crate::graph::GateId;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two points".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "correlation inputs must be finite".into(),
        ));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Kendall tau-b with tie correction.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut s, mut n1, mut n2) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
            if a != 0 {
                n1 += 1;
            }
            if b != 0 {
                n2 += 1;
            }
        }
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::Undefined("kendall tau of a constant vector".into()));
    }
    Ok((s as f64 / ((n1 as f64) * (n2 as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// The three coefficients; `NaN` marks an undefined coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl Coefficients {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        let undefined = |r: Result<f64>| match r {
            Ok(v) => Ok(v),
            Err(Error::Undefined(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        };
        Ok(Coefficients {
            pearson: undefined(pearson(x, y))?,
            spearman: undefined(spearman(x, y))?,
            kendall: undefined(kendall(x, y))?,
        })
    }
}

/// Scores over an explicit unit set.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    pub name: String,
    pub units: Vec<Unit>,
    pub values: Vec<f64>,
}

impl UnitScores {
    pub fn new(name: impl Into<String>, units: Vec<Unit>, values: Vec<f64>) -> Result<Self> {
        if units.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} units but {} scores",
                units.len(),
                values.len()
            )));
        }
        Ok(UnitScores {
            name: name.into(),
            units,
            values,
        })
    }

    /// Restricted to `keep`, in `keep`'s order.
    pub fn restrict(&self, keep: &[Unit]) -> Result<Self> {
        let map: BTreeMap<Unit, f64> = self
            .units
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .collect();
        let values = keep
            .iter()
            .map(|u| {
                map.get(u).copied().ok_or_else(|| {
                    Error::UnitMismatch(format!("{} has no score for unit {u}", self.name))
                })
            })
            .collect::<Result<_>>()?;
        Ok(UnitScores {
            name: self.name.clone(),
            units: keep.to_vec(),
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StudyOptions {
    /// Weight the per-layer mean by layer width instead of averaging layers equally.
    pub width_weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub criterion: String,
    pub per_layer: Vec<(GateId, Coefficients)>,
    pub per_layer_mean: Coefficients,
    pub all_layers: Coefficients,
    pub n_units: usize,
}

fn mean_defined(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut w) = (0.0, 0.0);
    for (v, wt) in values {
        if v.is_finite() {
            s += v * wt;
            w += wt;
        }
    }
    if w > 0.0 {
        s / w
    } else {
        f64::NAN
    }
}

fn describe_mismatch(a: &UnitScores, b: &UnitScores) -> String {
    let sa: std::collections::BTreeSet<Unit> = a.units.iter().copied().collect();
    let sb: std::collections::BTreeSet<Unit> = b.units.iter().copied().collect();
    let only_a: Vec<String> = sa.difference(&sb).map(|u| u.to_string()).collect();
    let only_b: Vec<String> = sb.difference(&sa).map(|u| u.to_string()).collect();
    format!(
        "only in {}: [{}]; only in {}: [{}]",
        a.name,
        only_a.join(", "),
        b.name,
        only_b.join(", ")
    )
}

/// Per-layer, mean-of-layers and pooled coefficients of one criterion against the oracle.
///
/// Both sides must cover the same unit set. Layers whose coefficients are
/// undefined (constant scores) are left out of the mean.
pub fn correlation_study(
    criterion: &UnitScores,
    oracle: &UnitScores,
    opts: StudyOptions,
) -> Result<CorrelationReport> {
    let mut cu = criterion.units.clone();
    let mut ou = oracle.units.clone();
    cu.sort_unstable();
    ou.sort_unstable();
    if cu != ou || cu.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::UnitMismatch(describe_mismatch(criterion, oracle)));
    }
    let c = criterion.restrict(&cu)?;
    let o = oracle.restrict(&cu)?;
    let mut layers: BTreeMap<GateId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((u, &x), &y) in cu.iter().zip(&c.values).zip(&o.values) {
        let e = layers.entry(u.gate).or_default();
        e.0.push(x);
        e.1.push(y);
    }
    let mut per_layer = Vec::new();
    let mut widths = Vec::new();
    for (g, (x, y)) in &layers {
        let coef = if x.len() < 2 {
            Coefficients {
                pearson: f64::NAN,
                spearman: f64::NAN,
                kendall: f64::NAN,
            }
        } else {
            Coefficients::compute(x, y)?
        };
        per_layer.push((*g, coef));
        widths.push(x.len() as f64);
    }
    let weight = |i: usize| if opts.width_weighted { widths[i] } else { 1.0 };
    let per_layer_mean = Coefficients {
        pearson: mean_defined(
            per_layer
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (c.pearson, weight(i))),
        ),
        spearman: mean_defined(
            per_layer
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (c.spearman, weight(i))),
        ),
        kendall: mean_defined(
            per_layer
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (c.kendall, weight(i))),
        ),
    };
    Ok(CorrelationReport {
        criterion: criterion.name.clone(),
        per_layer,
        per_layer_mean,
        all_layers: Coefficients::compute(&c.values, &o.values)?,
        n_units: cu.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub criterion: String,
    pub scope: String,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl CorrelationReport {
    /// Rows `layer:<gate>`, `per_layer_mean` and `all_layers`.
    pub fn rows(&self) -> Vec<CorrelationRow> {
        let row = |scope: String, c: &Coefficients| CorrelationRow {
            criterion: self.criterion.clone(),
            scope,
            pearson: c.pearson,
            spearman: c.spearman,
            kendall: c.kendall,
        };
        let mut out: Vec<CorrelationRow> = self
            .per_layer
            .iter()
            .map(|(g, c)| row(format!("layer:{g}"), c))
            .collect();
        out.push(row("per_layer_mean".into(), &self.per_layer_mean));
        out.push(row("all_layers".into(), &self.all_layers));
        out
    }
}

/// Writes `(criterion, scope, pearson, spearman, kendall)` rows for every report.
pub fn write_correlation_csv(path: &Path, reports: &[CorrelationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for row in r.rows() {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

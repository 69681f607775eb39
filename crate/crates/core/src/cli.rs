//! Experiment configuration and the command implementations behind the binary.
//!
//! A configuration is a TOML document; `--set a.b=value` overrides are applied
//! to the parsed tree before it is checked against [`ExperimentConfig`], so
//! unknown keys are rejected either way.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::compact::compact;
use crate::criteria::{write_importance_csv, Criterion, HessianMethod};
use crate::data::{cifar10_available, load_cifar10, synthetic_split, Dataset, Split};
use crate::engine::{self, PruneConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::experiments::{self, fixed_batches};
use crate::flops::count_flops_params;
use crate::gates::insert_gates;
use crate::graph::{NetworkGraph, Placement};
use crate::models::{build_lenet3_with, build_tiny_resnet, build_toy_convnet, ResNetConfig};
use crate::oracle;
use crate::stats::write_correlation_csv;
use crate::tensor::{DType, Scalar};

/// Environment variable holding the dataset root.
pub const DATA_ENV: &str = "PRUNEKIT_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Prune,
    Oracle,
    Correlate,
    Flops,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Prune => "prune",
            Command::Oracle => "oracle",
            Command::Correlate => "correlate",
            Command::Flops => "flops",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lenet3,
    TinyResnet,
    ToyConvnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resnet_blocks: usize,
    pub resnet_base_width: usize,
    pub toy_filters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let r = ResNetConfig::default();
        ModelConfig {
            resnet_blocks: r.blocks,
            resnet_base_width: r.base_width,
            toy_filters: 4,
        }
    }
}

/// Settings shared by `oracle` and `correlate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub split: Split,
    /// Leading samples of the split used for scoring.
    pub samples: usize,
    pub batch_size: usize,
    pub criteria: Vec<Criterion>,
    /// Placements at which criteria are computed; the oracle always uses `placement`.
    pub placements: Vec<Placement>,
    pub hessian_method: HessianMethod,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            split: Split::Train,
            samples: 256,
            batch_size: 64,
            criteria: vec![
                Criterion::TaylorSo,
                Criterion::TaylorFo,
                Criterion::WeightMagnitude,
            ],
            placements: Vec::new(),
            hessian_method: HessianMethod::DoubleBackward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub model: ModelKind,
    pub dataset: DatasetKind,
    /// Dataset root; falls back to `PRUNEKIT_DATA`.
    pub data_path: Option<PathBuf>,
    /// Use only the first `n` training samples.
    pub train_subset: Option<usize>,
    /// Gate placement; defaults to `after_bn` for models with batch norm, `after_conv` otherwise.
    pub placement: Option<Placement>,
    pub output_dir: PathBuf,
    /// Input checkpoint for every command but `train`.
    pub checkpoint: Option<PathBuf>,
    pub precision: Precision,
    /// Seeds initialization, data generation, shuffling and the random criterion.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: None,
            model: ModelKind::Lenet3,
            dataset: DatasetKind::Synthetic,
            data_path: None,
            train_subset: None,
            placement: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            precision: Precision::F32,
            seed: 0,
            synthetic: SyntheticConfig::default(),
            arch: ModelConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override; the value is TOML, or a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let mut t = table;
    for p in &path[..path.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (if any), applies the overrides and fills in defaults.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn data_root(&self) -> Result<PathBuf> {
        self.data_path
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("cifar10 needs `data_path` or {DATA_ENV}")))
    }

    /// Loads the configured train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                synthetic_split(
                    s.classes,
                    s.train_per_class,
                    s.test_per_class,
                    s.image_size,
                    self.seed,
                )?
            }
            DatasetKind::Cifar10 => {
                let root = self.data_root()?;
                if !cifar10_available(&root) {
                    return Err(Error::io(
                        &root,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "CIFAR-10 binary batches not found",
                        ),
                    ));
                }
                load_cifar10(&root)?
            }
        };
        Ok(match self.train_subset {
            Some(n) => (train.take(n), test),
            None => (train, test),
        })
    }

    /// Freshly initialized model for the dataset's image shape.
    pub fn build_model<T: Scalar>(&self, ds: &Dataset) -> Result<NetworkGraph<T>> {
        let [c, h, w] = ds.image_shape;
        if h != w {
            return Err(Error::Config(format!(
                "square images required, got {h}x{w}"
            )));
        }
        match self.model {
            ModelKind::Lenet3 => {
                if c != 3 {
                    return Err(Error::Config(format!(
                        "lenet3 expects 3 input channels, got {c}"
                    )));
                }
                build_lenet3_with(h, ds.num_classes, self.seed)
            }
            ModelKind::TinyResnet => build_tiny_resnet(
                &ResNetConfig {
                    blocks: self.arch.resnet_blocks,
                    base_width: self.arch.resnet_base_width,
                    image_size: h,
                    in_channels: c,
                    classes: ds.num_classes,
                },
                self.seed,
            ),
            ModelKind::ToyConvnet => {
                build_toy_convnet(c, h, self.arch.toy_filters, ds.num_classes, self.seed)
            }
        }
    }

    pub fn placement_for<T: Scalar>(&self, graph: &NetworkGraph<T>) -> Placement {
        self.placement.unwrap_or(if graph.has_batchnorm() {
            Placement::AfterBn
        } else {
            Placement::AfterConv
        })
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("`checkpoint` is required for this command".into()))
    }
}

/// Loads the input checkpoint, checks it against the data and gates it at `placement`.
fn load_gated<T: Scalar>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    placement: Option<Placement>,
) -> Result<NetworkGraph<T>> {
    let path = cfg.checkpoint_path()?;
    let g = load_checkpoint::<T>(path).map_err(|e| match e {
        Error::Format { path, message } if message.contains("dtype") => Error::Config(format!(
            "{}: {message}; set `precision` to match",
            path.display()
        )),
        e => e,
    })?;
    let shape: Vec<usize> = ds.image_shape.to_vec();
    if g.input_shape() != shape.as_slice() || g.num_classes() != ds.num_classes {
        return Err(Error::Config(format!(
            "checkpoint {} takes {:?} with {} classes; dataset has {:?} with {}",
            path.display(),
            g.input_shape(),
            g.num_classes(),
            shape,
            ds.num_classes
        )));
    }
    let want = placement.unwrap_or_else(|| cfg.placement_for(&g));
    if let Some(gate) = g.gates().first() {
        if gate.placement != want {
            return Err(Error::Config(format!(
                "checkpoint is gated {} but placement {want} was requested",
                gate.placement
            )));
        }
        return Ok(g);
    }
    insert_gates(g, want)
}

/// Metadata written beside every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub git_revision: String,
    pub outputs: Vec<String>,
    pub config: &'a ExperimentConfig,
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Runs `command` and returns the written paths, manifest last.
pub fn run_command(command: Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut cfg = cfg.clone();
    cfg.command = Some(command);
    cfg.train.seed = cfg.seed;
    cfg.prune.seed = cfg.seed;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut outputs = match cfg.precision {
        Precision::F32 => dispatch::<f32>(command, &cfg)?,
        Precision::F64 => dispatch::<f64>(command, &cfg)?,
    };
    let manifest_path = cfg
        .output_dir
        .join(format!("{}.manifest.json", command.name()));
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        git_revision: git_revision(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        config: &cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    outputs.push(manifest_path);
    Ok(outputs)
}

fn dispatch<T: Scalar>(command: Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let out = |name: &str| cfg.output_dir.join(name);
    match command {
        Command::Train => {
            let (train, test) = cfg.load_data()?;
            let mut g = cfg.build_model::<T>(&train)?;
            let metrics = engine::train(&mut g, &train, &test, &cfg.train)?;
            let ckpt = out("model.ckpt");
            save_checkpoint(&g, &ckpt)?;
            let csv = out("metrics.csv");
            engine::write_rows(&csv, &metrics)?;
            Ok(vec![
                ckpt.clone(),
                crate::checkpoint::architecture_path(&ckpt),
                csv,
            ])
        }
        Command::Prune => {
            let (train, test) = cfg.load_data()?;
            let mut g = load_gated::<T>(cfg, &train, None)?;
            let log = engine::run(&mut g, &train, &test, &cfg.prune)?;
            let runlog = out("runlog.csv");
            log.write_csv(&runlog)?;
            let importance = out("importance.csv");
            write_importance_csv(&importance, &log.tables.iter().collect::<Vec<_>>())?;
            let mask = out("mask.json");
            let json = serde_json::to_string_pretty(&log.mask).expect("mask serializes");
            std::fs::write(&mask, json).map_err(|e| Error::io(&mask, e))?;
            let ckpt = out("pruned.ckpt");
            match compact(&g, &log.mask) {
                Ok(c) => save_checkpoint(&c, &ckpt)?,
                Err(Error::Unsupported(why)) => {
                    log::warn!("saving the masked network uncompacted: {why}");
                    save_checkpoint(&g, &ckpt)?
                }
                Err(e) => return Err(e),
            }
            Ok(vec![
                runlog,
                importance,
                mask,
                ckpt.clone(),
                crate::checkpoint::architecture_path(&ckpt),
            ])
        }
        Command::Oracle => {
            let (train, test) = cfg.load_data()?;
            let g = load_gated::<T>(cfg, &train, None)?;
            let ds = if cfg.study.split == Split::Train {
                &train
            } else {
                &test
            };
            let batches = fixed_batches::<T>(ds, cfg.study.samples, cfg.study.batch_size);
            let scores = oracle::ablation_scores(&g, &batches, cfg.study.split)?;
            let path = out("oracle.csv");
            scores.write_csv(&path)?;
            Ok(vec![path])
        }
        Command::Correlate => {
            let (train, test) = cfg.load_data()?;
            let ds = if cfg.study.split == Split::Train {
                &train
            } else {
                &test
            };
            let batches = fixed_batches::<T>(ds, cfg.study.samples, cfg.study.batch_size);
            let g = load_gated::<T>(cfg, &train, None)?;
            let oracle_scores = experiments::oracle_unit_scores(&g, &batches)?;
            let home = g.gates()[0].placement;
            let placements = if cfg.study.placements.is_empty() {
                vec![home]
            } else {
                cfg.study.placements.clone()
            };
            let mut reports = Vec::new();
            for p in placements {
                let mut gp = if p == home {
                    g.clone()
                } else {
                    load_gated::<T>(cfg, &train, Some(p))?
                };
                let label = if p == home && cfg.study.placements.is_empty() {
                    String::new()
                } else {
                    p.to_string()
                };
                reports.extend(experiments::criterion_reports(
                    &mut gp,
                    &cfg.study.criteria,
                    &batches,
                    &oracle_scores,
                    cfg.study.hessian_method,
                    cfg.seed,
                    &label,
                )?);
            }
            let path = out("correlation.csv");
            write_correlation_csv(&path, &reports)?;
            Ok(vec![path])
        }
        Command::Flops => {
            let g = match &cfg.checkpoint {
                Some(p) => load_checkpoint::<T>(p)?,
                None => {
                    let (train, _) = cfg.load_data()?;
                    cfg.build_model::<T>(&train)?
                }
            };
            let (flops, params) = count_flops_params(&g);
            let path = out("flops.csv");
            engine::write_rows(
                &path,
                &[FlopsRow {
                    model: cfg.checkpoint.as_ref().map_or_else(
                        || format!("{:?}", cfg.model).to_lowercase(),
                        |p| {
                            p.file_name().map_or_else(
                                || p.display().to_string(),
                                |n| n.to_string_lossy().into_owned(),
                            )
                        },
                    ),
                    dtype: match T::DTYPE {
                        DType::F32 => "f32".into(),
                        DType::F64 => "f64".into(),
                    },
                    flops,
                    params,
                }],
            )?;
            Ok(vec![path])
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct FlopsRow {
    model: String,
    dtype: String,
    flops: u64,
    params: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve_config(
            None,
            &[
                "prune.criterion=taylor_so".into(),
                "seed=7".into(),
                "model=tiny_resnet".into(),
                "study.criteria=[\"oracle\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.prune.criterion, Criterion::TaylorSo);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelKind::TinyResnet);
        assert_eq!(cfg.study.criteria, vec![Criterion::Oracle]);
    }

    #[test]
    fn unknown_keys_and_malformed_overrides_are_config_errors() {
        for bad in [
            "prune.nope=1",
            "noequals",
            "prune.criterion=nonsense",
            "seed.x=1",
        ] {
            let e = resolve_config(None, &["seed=1".into(), bad.into()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn config_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[prune]\nneurons_per_step = 2\n").unwrap();
        let cfg = resolve_config(Some(&p), &["prune.neurons_per_step=5".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.prune.neurons_per_step), (3, 5));
        let missing = resolve_config(Some(&dir.path().join("none.toml")), &[]).unwrap_err();
        assert_eq!(missing.exit_code(), 4);
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}

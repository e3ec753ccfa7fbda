//! End-to-end runs: train every task of the stream under one strategy,
//! measure the merged model after each task, and write the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{GroupRegistry, LowRank, TaskAdapter};
use crate::backbone::{ForwardContext, FrozenBackbone};
use crate::config::{ExperimentConfig, Strategy};
use crate::error::{HamError, Result};
use crate::ham::{ham_consolidate, Decision, GroupingRule};
use crate::io::{save_adapter, write_atomic, AdapterFile};
use crate::merging::{finalize, merge_baseline, merge_ham, MergeAlgorithm, MergedDelta};
use crate::metrics::{average_accuracy, forgetting_measure, AccuracyMatrix};
use crate::rng::{streams, RngState};
use crate::tasks::{evaluate, generate_stream, TaskDataset};
use crate::trainer::{train_adapter, train_task};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLog {
    pub task_id: usize,
    pub epoch_losses: Vec<f64>,
    pub alpha: f64,
    /// `None` outside the HAM strategy; otherwise the group joined (or created).
    pub group: Option<usize>,
    pub created_group: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group_id: usize,
    pub member_task_ids: Vec<usize>,
    pub alpha: f64,
    pub rank: usize,
    pub nonzero_parameters: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub accuracy: AccuracyMatrix,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub task_logs: Vec<TaskLog>,
    pub groups: Vec<GroupSummary>,
    /// Nonzero adapter parameters kept at the end of the run (groups for
    /// HAM, every per-task adapter for `per_task_merge`, the single adapter
    /// for `naive_ft`).
    pub nonzero_parameters: usize,
    pub merged: MergedDelta,
    pub registry: Option<GroupRegistry>,
}

impl RunResult {
    pub fn merged_rank(&self) -> Option<usize> {
        self.merged.rank()
    }
}

/// HAM-strategy merge of the registry with the configured algorithm. The
/// baselines see the alpha-scaled group updates.
fn merge_groups(registry: &GroupRegistry, cfg: &ExperimentConfig) -> Result<MergedDelta> {
    match cfg.merge {
        MergeAlgorithm::Ham => merge_ham(registry),
        algo => {
            let deltas = registry
                .groups
                .iter()
                .map(|g| Ok(g.deltas()?.into_iter().map(|d| d.scale(g.alpha_g)).collect()))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<usize> = registry.groups.iter().map(|g| g.group_id).collect();
            merge_baseline(algo, &deltas, &ids, &cfg.merge_params())
        }
    }
}

fn measure(backbone: &FrozenBackbone, merged: &MergedDelta, seen: &[TaskDataset]) -> Result<Vec<f64>> {
    evaluate(&finalize(backbone, merged)?, seen)
}

fn check_frozen(backbone: &FrozenBackbone, expected: u64) -> Result<()> {
    if backbone.frozen_checksum() != expected {
        return Err(HamError::State("frozen backbone weights changed during training".into()));
    }
    Ok(())
}

/// Runs the configured strategy over a freshly generated stream.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let stream = generate_stream(&cfg.stream_spec())?;
    run_on_stream(cfg, &stream)
}

/// Runs the configured strategy over the given stream.
pub fn run_on_stream(cfg: &ExperimentConfig, stream: &[TaskDataset]) -> Result<RunResult> {
    cfg.validate()?;
    let input_dim = stream
        .first()
        .map(|d| d.train_x.cols())
        .ok_or_else(|| HamError::Input("empty task stream".into()))?;
    let mut backbone = FrozenBackbone::new(input_dim, &cfg.hidden, cfg.seed)?;
    let checksum = backbone.frozen_checksum();
    let shapes = backbone.adapted_shapes();
    let train_cfg = cfg.train();
    let mut rng = RngState::substream(cfg.seed, streams::ADAPTER);

    let mut accuracy = AccuracyMatrix::new(stream.len());
    let mut task_logs = Vec::with_capacity(stream.len());
    let mut registry = GroupRegistry::new(cfg.g_max, cfg.tau_sim)?;
    let mut per_task: Vec<TaskAdapter> = Vec::new();
    let mut running: Option<TaskAdapter> = None;
    let mut merged = MergedDelta::zeros(&shapes);

    for (t, ds) in stream.iter().enumerate() {
        backbone.expand_head(ds.class_ids.len())?;
        let report = match cfg.strategy {
            Strategy::Ham => train_task(ds, &mut backbone, &registry, &train_cfg, &mut rng)?,
            Strategy::NaiveFt => {
                let adapter = match running.take() {
                    Some(a) => a,
                    None => TaskAdapter::init(ds.task_id, &shapes, cfg.rank, &mut rng)?,
                };
                let mut ctx = ForwardContext::solo(Some(adapter));
                ctx.current_alpha_trainable = false;
                train_adapter(ds, &mut backbone, ctx, &train_cfg, &mut rng)?
            }
            Strategy::PerTaskMerge => {
                let adapter = TaskAdapter::init(ds.task_id, &shapes, cfg.rank, &mut rng)?;
                let mut ctx = ForwardContext::solo(Some(adapter));
                ctx.current_alpha_trainable = false;
                train_adapter(ds, &mut backbone, ctx, &train_cfg, &mut rng)?
            }
        };
        check_frozen(&backbone, checksum)?;

        let mut log = TaskLog {
            task_id: ds.task_id,
            epoch_losses: report.epoch_losses.clone(),
            alpha: report.adapter.alpha,
            group: None,
            created_group: false,
        };
        merged = match cfg.strategy {
            Strategy::Ham => {
                let decision = ham_consolidate(&report.adapter, &mut registry, &cfg.consolidation())?;
                let (group, created) = match decision {
                    Decision::Join(id) => (id, false),
                    Decision::CreateNew => (registry.groups.last().expect("just created").group_id, true),
                };
                log.group = Some(group);
                log.created_group = created;
                merge_groups(&registry, cfg)?
            }
            Strategy::NaiveFt => {
                let adapter = report.adapter;
                let m = MergedDelta {
                    layers: adapter.deltas()?.into_iter().map(|d| d.scale(adapter.alpha)).collect(),
                    factors: None,
                    provenance: vec![(adapter.task_id, adapter.alpha)],
                };
                running = Some(adapter);
                m
            }
            Strategy::PerTaskMerge => {
                per_task.push(report.adapter);
                let deltas = per_task.iter().map(|a| a.deltas()).collect::<Result<Vec<_>>>()?;
                let ids: Vec<usize> = per_task.iter().map(|a| a.task_id).collect();
                merge_baseline(cfg.merge, &deltas, &ids, &cfg.merge_params())?
            }
        };
        task_logs.push(log);
        accuracy.push_row(measure(&backbone, &merged, &stream[..=t])?)?;
    }

    let groups: Vec<GroupSummary> = registry
        .groups
        .iter()
        .map(|g| GroupSummary {
            group_id: g.group_id,
            member_task_ids: g.member_task_ids.clone(),
            alpha: g.alpha_g,
            rank: g.rank(),
            nonzero_parameters: g.nonzero_parameter_count(),
        })
        .collect();
    let nonzero_parameters = match cfg.strategy {
        Strategy::Ham => groups.iter().map(|g| g.nonzero_parameters).sum(),
        Strategy::NaiveFt => running.as_ref().map_or(0, |a| a.nonzero_parameter_count()),
        Strategy::PerTaskMerge => per_task.iter().map(|a| a.nonzero_parameter_count()).sum(),
    };
    Ok(RunResult {
        average_accuracy: average_accuracy(&accuracy)?,
        forgetting: if stream.len() >= 2 { Some(forgetting_measure(&accuracy)?) } else { None },
        accuracy,
        task_logs,
        groups,
        nonzero_parameters,
        merged,
        registry: (cfg.strategy == Strategy::Ham).then_some(registry),
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    strategy: String,
    merge: String,
    seed: u64,
    num_tasks: usize,
    average_accuracy: f64,
    forgetting_measure: Option<f64>,
    nonzero_parameters: usize,
    merged_rank: Option<usize>,
    groups: &'a [GroupSummary],
    tasks: &'a [TaskLog],
}

fn train_log_csv(logs: &[TaskLog]) -> String {
    let mut s = String::from("task,epoch,loss\n");
    for log in logs {
        for (e, loss) in log.epoch_losses.iter().enumerate() {
            writeln!(s, "{},{},{loss:.8}", log.task_id + 1, e + 1).unwrap();
        }
    }
    s
}

/// Writes every output file of a run into `dir`, each one atomically.
pub fn write_outputs(cfg: &ExperimentConfig, result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("accuracy_matrix.csv"), result.accuracy.to_csv().as_bytes())?;
    let summary = Summary {
        strategy: cfg.strategy.to_string(),
        merge: cfg.merge.to_string(),
        seed: cfg.seed,
        num_tasks: result.accuracy.num_tasks(),
        average_accuracy: result.average_accuracy,
        forgetting_measure: result.forgetting,
        nonzero_parameters: result.nonzero_parameters,
        merged_rank: result.merged_rank(),
        groups: &result.groups,
        tasks: &result.task_logs,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| HamError::Format(e.to_string()))?;
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    write_atomic(&dir.join("train_log.csv"), train_log_csv(&result.task_logs).as_bytes())?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    save_adapter(&dir.join("merged.hama"), &AdapterFile::from(&result.merged))?;
    if let Some(reg) = &result.registry {
        for g in &reg.groups {
            save_adapter(&dir.join(format!("group_{}.hama", g.group_id)), &AdapterFile::from(g))?;
        }
    }
    Ok(())
}

/// Runs and writes outputs under the resolved output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let result = run(cfg)?;
    write_outputs(cfg, &result, &cfg.resolved_output_dir())?;
    Ok(result)
}

/// Parameter grid for a sweep; every listed key is crossed with every other.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub keep_fraction: Option<Vec<f64>>,
    pub g_max: Option<Vec<usize>>,
    pub tau_sim: Option<Vec<f64>>,
    pub grouping: Option<Vec<GroupingRule>>,
    pub merge: Option<Vec<MergeAlgorithm>>,
    pub strategy: Option<Vec<Strategy>>,
    pub num_tasks: Option<Vec<usize>>,
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: Grid,
}

impl SweepConfig {
    /// A run config with an extra `[grid]` table.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| HamError::Config(e.to_string()))?;
        let grid = match table.remove("grid") {
            Some(v) => v.try_into::<Grid>().map_err(|e| HamError::Config(format!("grid: {e}")))?,
            None => Grid::default(),
        };
        let base: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HamError::Config(e.to_string()))?;
        Ok(SweepConfig { base, grid })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HamError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every grid point as a validated config. Empty grids and invalid
    /// points are rejected before anything runs.
    pub fn points(&self) -> Result<Vec<(BTreeMap<&'static str, String>, ExperimentConfig)>> {
        let g = &self.grid;
        type Apply = Box<dyn Fn(&mut ExperimentConfig) + Sync>;
        let mut axes: Vec<(&'static str, Vec<(String, Apply)>)> = Vec::new();
        macro_rules! axis {
            ($name:literal, $field:expr, $set:expr) => {
                if let Some(values) = &$field {
                    if values.is_empty() {
                        return Err(HamError::Config(format!("grid key '{}' has no values", $name)));
                    }
                    let entries: Vec<(String, Apply)> = values
                        .iter()
                        .cloned()
                        .map(|v| {
                            let label = to_label(&v);
                            let f: Apply = Box::new(move |c: &mut ExperimentConfig| ($set)(c, v.clone()));
                            (label, f)
                        })
                        .collect();
                    axes.push(($name, entries));
                }
            };
        }
        fn to_label<T: Serialize>(v: &T) -> String {
            match toml::Value::try_from(v) {
                Ok(toml::Value::String(s)) => s,
                Ok(other) => other.to_string(),
                Err(_) => String::new(),
            }
        }
        axis!("keep_fraction", g.keep_fraction, |c: &mut ExperimentConfig, v| c.keep_fraction = v);
        axis!("g_max", g.g_max, |c: &mut ExperimentConfig, v| c.g_max = v);
        axis!("tau_sim", g.tau_sim, |c: &mut ExperimentConfig, v| c.tau_sim = v);
        axis!("grouping", g.grouping, |c: &mut ExperimentConfig, v| c.grouping = v);
        axis!("merge", g.merge, |c: &mut ExperimentConfig, v| c.merge = v);
        axis!("strategy", g.strategy, |c: &mut ExperimentConfig, v| c.strategy = v);
        axis!("num_tasks", g.num_tasks, |c: &mut ExperimentConfig, v| c.stream.num_tasks = v);
        axis!("seed", g.seed, |c: &mut ExperimentConfig, v| c.seed = v);
        if axes.is_empty() {
            return Err(HamError::Config("sweep grid is empty".into()));
        }

        let mut points = vec![(BTreeMap::new(), self.base.clone())];
        for (name, entries) in &axes {
            let mut next = Vec::with_capacity(points.len() * entries.len());
            for (labels, cfg) in &points {
                for (label, apply) in entries {
                    let mut labels = labels.clone();
                    labels.insert(*name, label.clone());
                    let mut cfg = cfg.clone();
                    apply(&mut cfg);
                    next.push((labels, cfg));
                }
            }
            points = next;
        }
        let base_dir = self.base.resolved_output_dir();
        for (i, (_, cfg)) in points.iter_mut().enumerate() {
            cfg.validate()
                .map_err(|e| HamError::Config(format!("grid point {i}: {e}")))?;
            cfg.output_dir = base_dir.join(format!("point_{i:03}"));
        }
        Ok(points)
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub params: BTreeMap<&'static str, String>,
    pub outcome: std::result::Result<(f64, Option<f64>, Option<usize>, usize), String>,
}

pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn to_csv(&self) -> String {
        let keys: Vec<&str> = self.rows.first().map(|r| r.params.keys().copied().collect()).unwrap_or_default();
        let mut s = String::from("point");
        for k in &keys {
            write!(s, ",{k}").unwrap();
        }
        s.push_str(",status,average_accuracy,forgetting_measure,merged_rank,nonzero_parameters\n");
        for r in &self.rows {
            write!(s, "{}", r.index).unwrap();
            for k in &keys {
                write!(s, ",{}", r.params[k]).unwrap();
            }
            match &r.outcome {
                Ok((aa, fm, rank, nz)) => {
                    let fm = fm.map(|v| format!("{v:.6}")).unwrap_or_default();
                    let rank = rank.map(|v| v.to_string()).unwrap_or_default();
                    writeln!(s, ",ok,{aa:.6},{fm},{rank},{nz}").unwrap();
                }
                Err(e) => {
                    let msg = e.replace([',', '\n'], ";");
                    writeln!(s, ",error: {msg},,,,").unwrap();
                }
            }
        }
        s
    }
}

/// One run per grid point, in parallel; failures are recorded and the
/// remaining points still run. Writes `sweep.csv` next to the point folders.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    let points = cfg.points()?;
    let rows: Vec<SweepRow> = points
        .into_par_iter()
        .enumerate()
        .map(|(index, (params, point))| {
            let outcome = run(&point)
                .and_then(|r| {
                    write_outputs(&point, &r, &point.output_dir)?;
                    Ok((r.average_accuracy, r.forgetting, r.merged_rank(), r.nonzero_parameters))
                })
                .map_err(|e| e.to_string());
            SweepRow { index, params, outcome }
        })
        .collect();
    let report = SweepReport { rows };
    write_atomic(&cfg.base.resolved_output_dir().join("sweep.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

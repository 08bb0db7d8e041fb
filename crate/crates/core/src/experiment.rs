//! Leave-a-dataset-out experiment harness: plan enumeration, the training
//! loop with best-validation checkpointing, and the balanced-vs-random
//! comparison suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::data::{class_counts, subset_sequential, DataError, DatasetManifest, ImagePack, TaskSet};
use crate::metrics::{aggregate_seeds, masked_auc_report, AucReport, SeedAggregate};
use crate::nn::{
    adam_step, backward, env_sum_loss, forward, init_model, pos_weights_from_counts, wbce_loss,
    LossWeights, ModelSpec, ModelState, NnError, OptimConfig,
};
use crate::sampler::{assemble_batch, epoch_plans, Batch, SamplerConfig, SamplerError, SamplerMode};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("duplicate dataset name {0:?}")]
    DuplicateName(String),
    #[error("plan requires 4 distinct datasets")]
    BadPlanNames,
    #[error("sampler produced an empty epoch (pool too small for the batch size)")]
    EmptyEpoch,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One leave-a-dataset-out configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub train_envs: (String, String),
    pub valid_env: String,
    pub test_env: String,
    pub seed: u64,
    pub mode: SamplerModeName,
    pub label: String,
}

/// Serializable sampler mode name used in plans, logs, and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerModeName {
    Random,
    Balanced,
}

impl SamplerModeName {
    pub fn to_mode(self) -> SamplerMode {
        match self {
            SamplerModeName::Random => SamplerMode::RandomMerged,
            SamplerModeName::Balanced => SamplerMode::Balanced,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerModeName::Random => "random",
            SamplerModeName::Balanced => "balanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanPreset {
    Paper6,
    All12,
}

fn plan_label(a: &str, b: &str, valid: &str, test: &str) -> String {
    format!("{a}_{b}/{valid}/{test}")
}

fn make_plan(names: &[String], a: usize, b: usize, v: usize, t: usize) -> ExperimentPlan {
    ExperimentPlan {
        train_envs: (names[a].clone(), names[b].clone()),
        valid_env: names[v].clone(),
        test_env: names[t].clone(),
        seed: 0,
        mode: SamplerModeName::Balanced,
        label: plan_label(&names[a], &names[b], &names[v], &names[t]),
    }
}

/// Enumerate leave-a-dataset-out plans over four dataset names.
///
/// `Paper6` follows the six published columns with names taken in the
/// role order (NIH, CHEX, MIMIC, PC); `All12` is every unordered train
/// pair with both assignments of the remaining two datasets.
pub fn enumerate_plans(names: &[String], preset: PlanPreset) -> Result<Vec<ExperimentPlan>, ExperimentError> {
    if names.len() != 4 {
        return Err(ExperimentError::BadPlanNames);
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(ExperimentError::DuplicateName(n.clone()));
        }
    }
    let plans = match preset {
        PlanPreset::Paper6 => vec![
            make_plan(names, 0, 1, 2, 3),
            make_plan(names, 0, 3, 2, 1),
            make_plan(names, 1, 2, 3, 0),
            make_plan(names, 0, 2, 1, 3),
            make_plan(names, 1, 3, 0, 2),
            make_plan(names, 2, 3, 1, 0),
        ],
        PlanPreset::All12 => {
            let mut out = Vec::with_capacity(12);
            for a in 0..4 {
                for b in a + 1..4 {
                    let rest: Vec<usize> = (0..4).filter(|i| *i != a && *i != b).collect();
                    out.push(make_plan(names, a, b, rest[0], rest[1]));
                    out.push(make_plan(names, a, b, rest[1], rest[0]));
                }
            }
            out
        }
    };
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub aug: AugmentConfig,
    pub model: ModelSpec,
    pub early_stop_patience: Option<usize>,
    pub train_n: Option<usize>,
    pub valid_n: Option<usize>,
    pub test_n: Option<usize>,
}

impl TrainConfig {
    pub fn desk_scale(target_size: usize, model: ModelSpec) -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            optim: OptimConfig::default(),
            aug: AugmentConfig {
                target_size,
                ..AugmentConfig::default()
            },
            model,
            early_stop_patience: None,
            train_n: None,
            valid_n: None,
            test_n: None,
        }
    }
}

/// One line of the per-epoch run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mean_auc: Option<f64>,
    pub checkpointed: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_valid_auc: f64,
    pub best_epoch: usize,
    pub best_state: ModelState,
    pub model_spec: ModelSpec,
    pub test_report: AucReport,
    pub valid_report_at_best: AucReport,
    pub history: Vec<EpochRecord>,
}

/// Score a full dataset with augmentation disabled, in fixed chunks.
pub fn evaluate(
    state: &ModelState,
    spec: &ModelSpec,
    env: &(DatasetManifest, ImagePack),
    target_size: usize,
) -> Result<AucReport, ExperimentError> {
    let aug = AugmentConfig::disabled(target_size);
    let n = env.0.records.len();
    let k = env.0.tasks.len();
    let mut scores = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n * k);
    let mut mask = Vec::with_capacity(n * k);
    let envs = std::slice::from_ref(env);
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let plan: Vec<(usize, usize)> = (start..end).map(|i| (0, i)).collect();
        let batch = assemble_batch(&plan, envs, &aug, 0, 0, 0);
        let logits = forward(state, spec, &batch.features)?;
        scores.extend(logits);
        labels.extend(batch.labels);
        mask.extend(batch.mask);
        start = end;
    }
    Ok(masked_auc_report(&scores, &labels, &mask, &env.0.tasks))
}

fn resolve<'a>(
    envs: &'a BTreeMap<String, (DatasetManifest, ImagePack)>,
    name: &str,
) -> Result<&'a (DatasetManifest, ImagePack), ExperimentError> {
    envs.get(name)
        .ok_or_else(|| ExperimentError::UnknownEnv(name.to_string()))
}

fn maybe_subset(
    env: &(DatasetManifest, ImagePack),
    n: Option<usize>,
) -> Result<(DatasetManifest, ImagePack), ExperimentError> {
    let manifest = match n {
        Some(n) if n < env.0.records.len() => subset_sequential(&env.0, n)?,
        _ => env.0.clone(),
    };
    Ok((manifest, env.1.clone()))
}

fn split_batch_by_env(batch: &Batch, env_index: usize, n_tasks: usize, input_dim: usize) -> Batch {
    let rows: Vec<usize> = (0..batch.rows)
        .filter(|&r| batch.env_tags[r] == env_index)
        .collect();
    let mut out = Batch {
        rows: rows.len(),
        features: Vec::with_capacity(rows.len() * input_dim),
        labels: Vec::with_capacity(rows.len() * n_tasks),
        mask: Vec::with_capacity(rows.len() * n_tasks),
        env_tags: vec![env_index; rows.len()],
    };
    for r in rows {
        out.features
            .extend_from_slice(&batch.features[r * input_dim..(r + 1) * input_dim]);
        out.labels
            .extend_from_slice(&batch.labels[r * n_tasks..(r + 1) * n_tasks]);
        out.mask
            .extend_from_slice(&batch.mask[r * n_tasks..(r + 1) * n_tasks]);
    }
    out
}

/// Train one plan: per-epoch sampling, the mode-specific loss path, one
/// optimizer step per batch, validation scoring, and best-checkpoint
/// tracking. Deterministic in (plan, cfg).
pub fn train_one(
    plan: &ExperimentPlan,
    envs: &BTreeMap<String, (DatasetManifest, ImagePack)>,
    cfg: &TrainConfig,
) -> Result<RunResult, ExperimentError> {
    let train_a = maybe_subset(resolve(envs, &plan.train_envs.0)?, cfg.train_n)?;
    let train_b = maybe_subset(resolve(envs, &plan.train_envs.1)?, cfg.train_n)?;
    let valid = maybe_subset(resolve(envs, &plan.valid_env)?, cfg.valid_n)?;
    let test = maybe_subset(resolve(envs, &plan.test_env)?, cfg.test_n)?;
    let train_envs = vec![train_a, train_b];
    let n_tasks = train_envs[0].0.tasks.len();
    let input_dim = cfg.aug.target_size * cfg.aug.target_size;

    // class-imbalance weights from the training split only
    let per_env_weights: Vec<LossWeights> = train_envs
        .iter()
        .map(|(m, _)| pos_weights_from_counts(&class_counts(m)))
        .collect();
    let pooled_weights = {
        let mut counts = class_counts(&train_envs[0].0);
        for (t, c) in class_counts(&train_envs[1].0).iter().enumerate() {
            counts[t].0 += c.0;
            counts[t].1 += c.1;
            counts[t].2 += c.2;
        }
        pos_weights_from_counts(&counts)
    };

    let sampler_cfg = SamplerConfig {
        mode: plan.mode.to_mode(),
        batch_size: cfg.batch_size,
        seed: plan.seed,
        drop_last: true,
    };
    let env_sizes: Vec<usize> = train_envs.iter().map(|(m, _)| m.records.len()).collect();

    let mut state = init_model(&cfg.model, plan.seed);
    let mut best_state = state.clone();
    let mut best_valid_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_valid_report: Option<AucReport> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut epochs_since_improvement = 0usize;

    for epoch in 0..cfg.epochs {
        let plans = epoch_plans(&env_sizes, &sampler_cfg, epoch as u64)?;
        if plans.is_empty() {
            return Err(ExperimentError::EmptyEpoch);
        }
        let mut loss_sum = 0.0;
        for (batch_index, batch_plan) in plans.iter().enumerate() {
            let batch = assemble_batch(
                batch_plan,
                &train_envs,
                &cfg.aug,
                plan.seed,
                epoch as u64,
                batch_index as u64,
            );
            let (loss, grads) = match sampler_cfg.mode {
                SamplerMode::Balanced => {
                    let mut per_env = Vec::with_capacity(train_envs.len());
                    for e in 0..train_envs.len() {
                        let sub = split_batch_by_env(&batch, e, n_tasks, input_dim);
                        let logits = forward(&state, &cfg.model, &sub.features)?;
                        let (l, dlogits) = wbce_loss(&logits, &sub.labels, &sub.mask, &per_env_weights[e]);
                        let g = backward(&state, &cfg.model, &sub.features, &dlogits)?;
                        per_env.push((l, g));
                    }
                    env_sum_loss(&per_env)?
                }
                SamplerMode::RandomMerged => {
                    let logits = forward(&state, &cfg.model, &batch.features)?;
                    let (l, dlogits) = wbce_loss(&logits, &batch.labels, &batch.mask, &pooled_weights);
                    let g = backward(&state, &cfg.model, &batch.features, &dlogits)?;
                    (l, g)
                }
            };
            if !loss.is_finite() {
                return Err(ExperimentError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    loss,
                });
            }
            adam_step(&mut state, &grads, &cfg.optim)?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / plans.len() as f64;

        let valid_report = evaluate(&state, &cfg.model, &valid, cfg.aug.target_size)?;
        let valid_mean = valid_report.mean_auc;
        let checkpointed = match valid_mean {
            Some(v) if v > best_valid_auc => {
                best_valid_auc = v;
                best_epoch = epoch;
                best_state = state.clone();
                best_valid_report = Some(valid_report);
                epochs_since_improvement = 0;
                true
            }
            _ => {
                epochs_since_improvement += 1;
                false
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_mean_auc: valid_mean,
            checkpointed,
        });
        if let Some(patience) = cfg.early_stop_patience {
            if epochs_since_improvement >= patience {
                break;
            }
        }
    }

    let test_report = evaluate(&best_state, &cfg.model, &test, cfg.aug.target_size)?;
    Ok(RunResult {
        best_valid_auc,
        best_epoch,
        best_state,
        model_spec: cfg.model,
        test_report,
        valid_report_at_best: best_valid_report
            .expect("at least one epoch must produce a validation report"),
        history,
    })
}

/// Aggregated results for one split column under one sampler mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnResult {
    pub label: String,
    pub seeds: Vec<u64>,
    pub best_valid_auc: SeedAggregate,
    pub avg_test_auc: Option<SeedAggregate>,
    pub per_task: Vec<Option<SeedAggregate>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBlock {
    pub mode: SamplerModeName,
    pub columns: Vec<ColumnResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeBlock>,
}

/// Run every (plan, seed) pair under each requested mode and aggregate
/// per split column. Jobs may run in parallel; output order is stable.
pub fn run_suite(
    plans: &[ExperimentPlan],
    envs: &BTreeMap<String, (DatasetManifest, ImagePack)>,
    cfg: &TrainConfig,
    seeds: &[u64],
    modes: &[SamplerModeName],
    jobs: usize,
) -> Result<SuiteResult, ExperimentError> {
    assert!(!plans.is_empty() && !seeds.is_empty() && !modes.is_empty());
    let tasks: TaskSet = envs
        .values()
        .next()
        .map(|(m, _)| m.tasks.clone())
        .unwrap_or_default();

    // flatten jobs, keep an index for order-stable assembly
    let mut job_plans = Vec::new();
    for &mode in modes {
        for plan in plans {
            for &seed in seeds {
                let mut p = plan.clone();
                p.seed = seed;
                p.mode = mode;
                job_plans.push(p);
            }
        }
    }

    let results = run_jobs(&job_plans, envs, cfg, jobs.max(1))?;

    let mut blocks = Vec::with_capacity(modes.len());
    let mut it = results.into_iter();
    for &mode in modes {
        let mut columns = Vec::with_capacity(plans.len());
        for plan in plans {
            let per_seed: Vec<RunResult> = (0..seeds.len())
                .map(|_| it.next().expect("job count mismatch"))
                .collect();
            let reports: Vec<AucReport> = per_seed.iter().map(|r| r.test_report.clone()).collect();
            let agg = aggregate_seeds(&reports);
            columns.push(ColumnResult {
                label: plan.label.clone(),
                seeds: seeds.to_vec(),
                best_valid_auc: SeedAggregate::from_values(
                    per_seed.iter().map(|r| r.best_valid_auc).collect(),
                ),
                avg_test_auc: agg.mean_auc,
                per_task: agg.per_task,
            });
        }
        blocks.push(ModeBlock { mode, columns });
    }
    Ok(SuiteResult {
        tasks: tasks.names().to_vec(),
        seeds: seeds.to_vec(),
        modes: blocks,
    })
}

fn run_jobs(
    job_plans: &[ExperimentPlan],
    envs: &BTreeMap<String, (DatasetManifest, ImagePack)>,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<RunResult>, ExperimentError> {
    if jobs <= 1 || job_plans.len() <= 1 {
        return job_plans.iter().map(|p| train_one(p, envs, cfg)).collect();
    }
    let mut slots: Vec<Option<Result<RunResult, ExperimentError>>> =
        (0..job_plans.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(job_plans.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= job_plans.len() {
                    break;
                }
                let r = train_one(&job_plans[i], envs, cfg);
                slots_mutex.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

const METRIC_ROWS: [&str; 2] = ["Best Valid AUC", "Avg Test AUC"];

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

/// Monospace comparison table: one block per mode, split columns plus a
/// MEAN ± std column (the ± axis is across splits, matching the published
/// layout; per-column values are means over seeds).
pub fn render_table(suite: &SuiteResult) -> String {
    let mut out = String::new();
    for block in &suite.modes {
        let title = match block.mode {
            SamplerModeName::Balanced => "Balanced Batching",
            SamplerModeName::Random => "Random Batching",
        };
        out.push_str(&format!(
            "{title} (per-column: mean over seeds {:?}; MEAN ± std across splits)\n",
            suite.seeds
        ));
        let labels: Vec<&str> = block.columns.iter().map(|c| c.label.as_str()).collect();
        let mut widths: Vec<usize> = labels.iter().map(|l| l.len().max(6)).collect();
        let row_names: Vec<String> = METRIC_ROWS
            .iter()
            .map(|s| s.to_string())
            .chain(suite.tasks.iter().cloned())
            .collect();
        let name_w = row_names.iter().map(|r| r.len()).max().unwrap_or(0);
        for w in &mut widths {
            *w = (*w).max(6);
        }
        out.push_str(&format!("{:<name_w$}", ""));
        for (l, w) in labels.iter().zip(&widths) {
            out.push_str(&format!("  {l:>w$}"));
        }
        out.push_str(&format!("  {:>12}\n", "MEAN"));

        let mut emit_row = |name: &str, cells: Vec<Option<f64>>| {
            out.push_str(&format!("{name:<name_w$}"));
            for (c, w) in cells.iter().zip(&widths) {
                out.push_str(&format!("  {:>w$}", fmt_cell(*c)));
            }
            let defined: Vec<f64> = cells.iter().flatten().copied().collect();
            if defined.is_empty() {
                out.push_str(&format!("  {:>12}\n", "-"));
            } else {
                let agg = SeedAggregate::from_values(defined);
                out.push_str(&format!("  {:>12}\n", format!("{:.2} ± {:.2}", agg.mean, agg.std)));
            }
        };

        emit_row(
            "Best Valid AUC",
            block
                .columns
                .iter()
                .map(|c| Some(c.best_valid_auc.mean))
                .collect(),
        );
        emit_row(
            "Avg Test AUC",
            block
                .columns
                .iter()
                .map(|c| c.avg_test_auc.as_ref().map(|a| a.mean))
                .collect(),
        );
        for (t, task) in suite.tasks.iter().enumerate() {
            emit_row(
                task,
                block
                    .columns
                    .iter()
                    .map(|c| c.per_task[t].as_ref().map(|a| a.mean))
                    .collect(),
            );
        }
        out.push('\n');
    }
    out
}

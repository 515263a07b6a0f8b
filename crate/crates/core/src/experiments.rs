//! Multi-run recipes: model comparison, task scaling, velocity alignment and
//! paraphrase robustness. Every trained model is evaluated on the seed it
//! was trained with; summaries average over those runs.

use serde::{Deserialize, Serialize};

use crate::baselines::{expert_prompts, BaselineModel, PromptSet};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::RunConfig;
use crate::controller::Precision;
use crate::dataset::{generate_dataset, split_tasks, OfflineDataset};
use crate::envs::{
    pointgoal_registry, veltrack_registry, Family, Level, RegistryKind, TaskSpec, VELTRACK_HELDOUT, VELTRACK_OOD,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, paraphrase_eval, velocity_alignment, AlignmentPoint, BaselineFactory, EvalReport, EvalSplit,
    ParaphraseRow, PolicyFactory, TenetFactory,
};
use crate::model::{ModelConfig, TenetModel, Variant};
use crate::text::{ProviderSpec, TextEncoder};
use crate::train::{train_learner, LossRecord, RunMeta, TrainConfig};

/// Shared settings for every run of a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub m: usize,
    pub registry_seed: u64,
    pub data_seed: u64,
    pub split_seed: u64,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub rollouts: usize,
    pub provider: ProviderSpec,
    pub prompt_seed: u64,
    pub precision: Precision,
}

impl Recipe {
    pub fn from_run_config(c: &RunConfig) -> Self {
        Self {
            model: c.model.clone(),
            train: c.train.clone(),
            k: c.data.k,
            m: c.data.m,
            registry_seed: c.data.registry_seed,
            data_seed: c.data.seed,
            split_seed: c.split.seed,
            seeds: c.eval.seeds.clone(),
            rollouts: c.eval.rollouts,
            provider: c.provider.clone(),
            prompt_seed: c.eval.prompt_seed,
            precision: c.eval.precision,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() || self.rollouts == 0 {
            return Err(Error::Config("a recipe needs at least one seed and one rollout".into()));
        }
        Ok(())
    }

    fn model_for(&self, family: Family, variant: Variant) -> ModelConfig {
        ModelConfig {
            state_dim: family.state_dim(),
            action_dim: family.action_dim(),
            variant,
            ..self.model.clone()
        }
    }

    fn dataset(&self, tasks: &[TaskSpec]) -> Result<OfflineDataset> {
        generate_dataset(tasks, self.k, self.m, &[self.train.level], self.data_seed)
    }
}

/// A trainable configuration compared by [`compare_arms`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    TenetDirect,
    TenetMse,
    TenetContrastive,
    BcShared,
    TrajHn,
    PromptConcat,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::TenetDirect,
        Arm::TenetMse,
        Arm::TenetContrastive,
        Arm::BcShared,
        Arm::TrajHn,
        Arm::PromptConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::TenetDirect => "tenet-direct",
            Arm::TenetMse => "tenet-mse",
            Arm::TenetContrastive => "tenet-contrastive",
            Arm::BcShared => "bc-shared",
            Arm::TrajHn => "traj-hn",
            Arm::PromptConcat => "prompt-concat",
        }
    }

    fn variant(self) -> Option<Variant> {
        match self {
            Arm::TenetDirect => Some(Variant::Direct),
            Arm::TenetMse => Some(Variant::Mse),
            Arm::TenetContrastive => Some(Variant::Contrastive),
            _ => None,
        }
    }

    fn baseline_kind(self) -> Option<ModelKind> {
        match self {
            Arm::BcShared => Some(ModelKind::BcShared),
            Arm::TrajHn => Some(ModelKind::TrajHn),
            Arm::PromptConcat => Some(ModelKind::PromptConcat),
            _ => None,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// A trained model of either family.
#[derive(Debug, Clone)]
pub enum Trained {
    Tenet(TenetModel),
    Baseline(BaselineModel),
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub arm: Arm,
    pub seed: u64,
    pub model: Trained,
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

pub fn train_arm(
    arm: Arm,
    recipe: &Recipe,
    family: Family,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    seed: u64,
) -> Result<TrainedRun> {
    let meta = RunMeta {
        run_config: serde_json::to_value(recipe)?,
        config_hash: String::new(),
        seed,
    };
    let (model, out) = match (arm.variant(), arm.baseline_kind()) {
        (Some(v), _) => {
            let m = TenetModel::init(recipe.model_for(family, v), seed)?;
            let out = train_learner(m, &recipe.train, dataset, encoder, &meta)?;
            (Trained::Tenet(out.checkpoint.to_tenet()?), out)
        }
        (None, Some(kind)) => {
            let m = BaselineModel::init(kind, recipe.model_for(family, Variant::Direct), seed)?;
            let out = train_learner(m, &recipe.train, dataset, encoder, &meta)?;
            let back = <BaselineModel as crate::train::Learner>::from_checkpoint(&out.checkpoint)?;
            (Trained::Baseline(back), out)
        }
        (None, None) => unreachable!("every arm is a variant or a baseline"),
    };
    Ok(TrainedRun {
        arm,
        seed,
        model,
        checkpoint: out.checkpoint,
        log: out.log,
    })
}

/// Evaluates a trained run on `splits` with `rollouts` episodes on its seed.
pub fn evaluate_run(
    run: &TrainedRun,
    encoder: &dyn TextEncoder,
    level: Level,
    prompts: Option<&PromptSet>,
    splits: &[EvalSplit],
    recipe: &Recipe,
) -> Result<EvalReport> {
    let factory: Box<dyn PolicyFactory + '_> = match &run.model {
        Trained::Tenet(m) => Box::new(TenetFactory {
            model: m,
            encoder,
            level,
            precision: recipe.precision,
        }),
        Trained::Baseline(b) => Box::new(BaselineFactory {
            model: b,
            prompts,
            precision: recipe.precision,
        }),
    };
    evaluate(factory.as_ref(), splits, recipe.rollouts, &[run.seed], &run.checkpoint.config_hash)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub seed: u64,
    pub train_success: f64,
    /// Absent when there is no held-out split.
    pub test_success: Option<f64>,
    pub final_bc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub model: String,
    pub trainable_params: usize,
    pub train_success: f64,
    pub train_success_std: f64,
    pub test_success: Option<f64>,
    pub test_success_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<ComparisonSummary>,
}

impl Comparison {
    pub fn get(&self, model: &str) -> Option<&ComparisonSummary> {
        self.summary.iter().find(|s| s.model == model)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Trains every arm once per seed on `train_tasks` and evaluates train and
/// (if non-empty) test success. For traj-hn, a second row evaluates with
/// every task given the next task's prompt.
pub fn compare_arms(
    arms: &[Arm],
    recipe: &Recipe,
    train_tasks: &[TaskSpec],
    test_tasks: &[TaskSpec],
    with_wrong_prompt: bool,
) -> Result<(Comparison, Vec<TrainedRun>)> {
    recipe.validate()?;
    let family = train_tasks
        .first()
        .ok_or_else(|| Error::Config("no training tasks".into()))?
        .family;
    let encoder = recipe.provider.build()?;
    let dataset = recipe.dataset(train_tasks)?;
    let all: Vec<TaskSpec> = train_tasks.iter().chain(test_tasks).cloned().collect();
    let prompts = expert_prompts(&all, recipe.prompt_seed)?;
    let wrong = prompts.rotated(&all)?;
    let mut splits = vec![EvalSplit::new("train", train_tasks.to_vec())];
    if !test_tasks.is_empty() {
        splits.push(EvalSplit::new("test", test_tasks.to_vec()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut runs = Vec::new();
    for &arm in arms {
        let mut variants = vec![(arm.name().to_string(), &prompts)];
        if with_wrong_prompt && arm == Arm::TrajHn {
            variants.push((format!("{}-wrong-prompt", arm.name()), &wrong));
        }
        let mut per_variant: Vec<Vec<ComparisonRow>> = vec![Vec::new(); variants.len()];
        let mut params = 0;
        for &seed in &recipe.seeds {
            let run = train_arm(arm, recipe, family, &dataset, encoder.as_ref(), seed)?;
            params = run.checkpoint.blocks.iter().map(|b| b.params.len()).sum();
            let final_bc = run.log.last().map(|r| r.bc).unwrap_or(f64::NAN);
            for (i, (name, p)) in variants.iter().enumerate() {
                let r = evaluate_run(&run, encoder.as_ref(), recipe.train.level, Some(p), &splits, recipe)?;
                per_variant[i].push(ComparisonRow {
                    model: name.clone(),
                    seed,
                    train_success: r.success_rate("train")?,
                    test_success: r.split("test").map(|s| s.success_rate),
                    final_bc,
                });
            }
            runs.push(run);
        }
        for ((name, _), rs) in variants.iter().zip(per_variant) {
            let (tm, ts) = mean_std(&rs.iter().map(|r| r.train_success).collect::<Vec<_>>());
            let test: Option<Vec<f64>> = rs.iter().map(|r| r.test_success).collect();
            let test_stats = test.map(|t| mean_std(&t));
            summary.push(ComparisonSummary {
                model: name.clone(),
                trainable_params: params,
                train_success: tm,
                train_success_std: ts,
                test_success: test_stats.map(|s| s.0),
                test_success_std: test_stats.map(|s| s.1),
            });
            rows.extend(rs);
        }
    }
    Ok((Comparison { rows, summary }, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub seed: u64,
    pub test_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub size: usize,
    pub test_success: f64,
    pub test_success_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub summary: Vec<ScalingSummary>,
}

/// Held-out PointGoal2D success as the number of registered goals grows.
pub fn task_scaling(sizes: &[usize], variant: Variant, recipe: &Recipe) -> Result<ScalingTable> {
    recipe.validate()?;
    if sizes.is_empty() {
        return Err(Error::Config("no task-scaling sizes given".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "task-scaling sizes must be strictly ascending without duplicates, got {sizes:?}"
        )));
    }
    let encoder = recipe.provider.build()?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &size in sizes {
        let tasks = pointgoal_registry(size, recipe.registry_seed)?;
        let (train_t, test_t) = split_tasks(&tasks, None, recipe.split_seed)?;
        let ds = recipe.dataset(&train_t)?;
        let splits = [EvalSplit::new("test", test_t.clone())];
        let mut succ = Vec::new();
        for &seed in &recipe.seeds {
            let run = train_arm(arm_for(variant), recipe, Family::PointGoal2D, &ds, encoder.as_ref(), seed)?;
            let r = evaluate_run(&run, encoder.as_ref(), recipe.train.level, None, &splits, recipe)?;
            let s = r.success_rate("test")?;
            succ.push(s);
            rows.push(ScalingRow {
                size,
                train_tasks: train_t.len(),
                test_tasks: test_t.len(),
                seed,
                test_success: s,
            });
        }
        let (m, sd) = mean_std(&succ);
        summary.push(ScalingSummary {
            size,
            test_success: m,
            test_success_std: sd,
        });
    }
    Ok(ScalingTable { rows, summary })
}

fn arm_for(variant: Variant) -> Arm {
    match variant {
        Variant::Direct => Arm::TenetDirect,
        Variant::Mse => Arm::TenetMse,
        Variant::Contrastive => Arm::TenetContrastive,
    }
}

/// The commanded targets of the velocity experiment: held-out grid points
/// followed by the out-of-range command.
pub fn velocity_targets() -> Vec<f64> {
    let mut t = VELTRACK_HELDOUT.to_vec();
    t.push(VELTRACK_OOD);
    t
}

/// Trains on the velocity grid minus the held-out targets and measures the
/// alignment curve, pooling rollouts over seeds.
pub fn velocity_experiment(variant: Variant, recipe: &Recipe) -> Result<Vec<AlignmentPoint>> {
    recipe.validate()?;
    let encoder = recipe.provider.build()?;
    let tasks = veltrack_registry(recipe.registry_seed);
    let (train_t, _) = split_tasks(&tasks, None, recipe.split_seed)?;
    let ds = recipe.dataset(&train_t)?;
    let targets = velocity_targets();
    let mut curves = Vec::new();
    for &seed in &recipe.seeds {
        let run = train_arm(arm_for(variant), recipe, Family::VelTrack1D, &ds, encoder.as_ref(), seed)?;
        let Trained::Tenet(model) = &run.model else {
            unreachable!("tenet arm")
        };
        let f = TenetFactory {
            model,
            encoder: encoder.as_ref(),
            level: recipe.train.level,
            precision: recipe.precision,
        };
        curves.push(velocity_alignment(&f, &targets, recipe.rollouts, seed)?);
    }
    Ok(pool_curves(&curves))
}

fn pool_curves(curves: &[Vec<AlignmentPoint>]) -> Vec<AlignmentPoint> {
    let n = curves.len() as f64;
    (0..curves[0].len())
        .map(|i| {
            let pts: Vec<&AlignmentPoint> = curves.iter().map(|c| &c[i]).collect();
            let mean = pts.iter().map(|p| p.achieved_mean).sum::<f64>() / n;
            // pooled variance of equally sized groups
            let var = pts
                .iter()
                .map(|p| p.achieved_std.powi(2) + (p.achieved_mean - mean).powi(2))
                .sum::<f64>()
                / n;
            let target = pts[0].target;
            AlignmentPoint {
                target,
                achieved_mean: mean,
                achieved_std: var.sqrt(),
                abs_error: (mean - target).abs(),
                success_rate: pts.iter().map(|p| p.success_rate).sum::<f64>() / n,
                rollouts: pts.iter().map(|p| p.rollouts).sum(),
            }
        })
        .collect()
}

/// Trains on one description level and evaluates every level, for each
/// provider. Rows are averaged over seeds.
pub fn paraphrase_experiment(
    registry: RegistryKind,
    variant: Variant,
    levels: &[Level],
    providers: &[(String, ProviderSpec)],
    recipe: &Recipe,
) -> Result<Vec<ParaphraseRow>> {
    recipe.validate()?;
    let tasks = registry.build(recipe.registry_seed)?;
    let ds = recipe.dataset(&tasks)?;
    let mut out = Vec::new();
    for (name, spec) in providers {
        let encoder = spec.build()?;
        let r = Recipe {
            model: ModelConfig {
                d_z: encoder.dim(),
                ..recipe.model.clone()
            },
            ..recipe.clone()
        };
        let mut per_seed = Vec::new();
        for &seed in &recipe.seeds {
            let run = train_arm(arm_for(variant), &r, registry.family(), &ds, encoder.as_ref(), seed)?;
            let Trained::Tenet(model) = &run.model else {
                unreachable!("tenet arm")
            };
            per_seed.push(paraphrase_eval(model, encoder.as_ref(), name, &tasks, levels, recipe.rollouts, &[seed])?);
        }
        out.extend(average_paraphrase(&per_seed));
    }
    Ok(out)
}

/// Paraphrase table from already trained models.
pub fn paraphrase_from_models(
    models: &[(u64, &TenetModel)],
    encoder: &dyn TextEncoder,
    provider: &str,
    tasks: &[TaskSpec],
    levels: &[Level],
    rollouts: usize,
) -> Result<Vec<ParaphraseRow>> {
    let per_seed = models
        .iter()
        .map(|(seed, m)| paraphrase_eval(m, encoder, provider, tasks, levels, rollouts, &[*seed]))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_paraphrase(&per_seed))
}

fn average_paraphrase(per_seed: &[Vec<ParaphraseRow>]) -> Vec<ParaphraseRow> {
    (0..per_seed[0].len())
        .map(|i| {
            let xs: Vec<f64> = per_seed.iter().map(|r| r[i].success_rate).collect();
            let (m, s) = mean_std(&xs);
            ParaphraseRow {
                provider: per_seed[0][i].provider.clone(),
                level: per_seed[0][i].level,
                success_rate: m,
                success_std_over_seeds: s,
                mean_return: per_seed.iter().map(|r| r[i].mean_return).sum::<f64>() / per_seed.len() as f64,
            }
        })
        .collect()
}

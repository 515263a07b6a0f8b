//! Closed-loop evaluation.
//!
//! A [`PolicyFactory`] turns `(task, episode seed)` into a controller; the
//! harness runs one episode per `(task, eval seed, rollout)` in parallel and
//! aggregates per task and per split. Results depend only on the factory,
//! the task lists and the seeds.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineModel, PromptSet};
use crate::controller::{mlp_controller, Controller, ControllerFile, ExpertController, Precision};
use crate::envs::{
    achieved_velocity, env_reset, env_step, sample_description, success, veltrack_task, Behavior, Family, Level,
    TaskSpec, Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::model::TenetModel;
use crate::ndiff::ParamVec;
use crate::seed::derive_seed;
use crate::text::TextEncoder;

pub const EVAL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ROLLOUTS: usize = 50;
pub const DEFAULT_EVAL_SEEDS: [u64; 3] = [0, 1, 2];

const TAG_EPISODE: u64 = 0x6570_6973;
const TAG_INSTANCE: u64 = 0x696e_7374;

/// Text to policy parameters. Reads no trajectory data.
pub fn instantiate(model: &TenetModel, description: &str, encoder: &dyn TextEncoder) -> Result<ParamVec> {
    if encoder.dim() != model.config().d_z {
        return Err(Error::Incompatible(format!(
            "text encoder dimension {} does not match model d_z {}",
            encoder.dim(),
            model.config().d_z
        )));
    }
    let z = encoder.embed(description)?;
    model.policy_from_embedding(&z.values)
}

pub trait PolicyFactory: Sync {
    /// Controller for one episode of `task`. `seed` selects any stochastic
    /// choice made at instantiation (e.g. which paraphrase is used).
    fn controller(&self, task: &TaskSpec, seed: u64) -> Result<Box<dyn Controller>>;
}

/// TeNet instantiated from a sampled description of the requested level.
pub struct TenetFactory<'a> {
    pub model: &'a TenetModel,
    pub encoder: &'a dyn TextEncoder,
    pub level: Level,
    pub precision: Precision,
}

impl<'a> TenetFactory<'a> {
    pub fn new(model: &'a TenetModel, encoder: &'a dyn TextEncoder, level: Level) -> Self {
        Self {
            model,
            encoder,
            level,
            precision: Precision::F64,
        }
    }
}

impl PolicyFactory for TenetFactory<'_> {
    fn controller(&self, task: &TaskSpec, seed: u64) -> Result<Box<dyn Controller>> {
        let text = sample_description(task, self.level, derive_seed(seed, &[TAG_INSTANCE]));
        let params = instantiate(self.model, &text, self.encoder)?;
        Ok(mlp_controller(params, self.precision))
    }
}

pub struct ExpertFactory;

impl PolicyFactory for ExpertFactory {
    fn controller(&self, task: &TaskSpec, _seed: u64) -> Result<Box<dyn Controller>> {
        Ok(Box::new(ExpertController::new(task.clone())))
    }
}

/// Baselines; prompt-conditioned kinds look up the task's prompt.
pub struct BaselineFactory<'a> {
    pub model: &'a BaselineModel,
    pub prompts: Option<&'a PromptSet>,
    pub precision: Precision,
}

impl PolicyFactory for BaselineFactory<'_> {
    fn controller(&self, task: &TaskSpec, _seed: u64) -> Result<Box<dyn Controller>> {
        let prompt = self.prompts.and_then(|p| p.get(task.id));
        let policy = self.model.controller_params(task.id, prompt)?;
        ControllerFile::from_baseline(policy, self.model.kind(), "").controller(self.precision)
    }
}

/// The same stored controller for every task.
pub struct FileFactory<'a> {
    pub file: &'a ControllerFile,
    pub precision: Precision,
}

impl PolicyFactory for FileFactory<'_> {
    fn controller(&self, task: &TaskSpec, _seed: u64) -> Result<Box<dyn Controller>> {
        let c = self.file.controller(self.precision)?;
        if c.state_dim() != task.state_dim() || c.action_dim() != task.action_dim() {
            return Err(Error::Incompatible(format!(
                "controller is {}->{} but task {} needs {}->{}",
                c.state_dim(),
                c.action_dim(),
                task.id,
                task.state_dim(),
                task.action_dim()
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub episode_return: f64,
    /// The policy emitted a non-finite action; the episode counts as failed.
    pub non_finite: bool,
    pub trajectory: Trajectory,
}

pub fn run_episode(task: &TaskSpec, controller: &mut dyn Controller, seed: u64) -> Result<EpisodeOutcome> {
    let mut state = env_reset(task, seed);
    let mut action = vec![0.0; task.action_dim()];
    let mut transitions = Vec::with_capacity(task.horizon);
    let mut ret = 0.0;
    let mut non_finite = false;
    for t in 0..task.horizon {
        controller.act(&state, &mut action);
        if action.iter().any(|a| !a.is_finite()) {
            non_finite = true;
            break;
        }
        let out = env_step(task, &state, &action, t)?;
        ret += out.reward;
        transitions.push(Transition {
            state: std::mem::take(&mut state),
            action: out.action,
            reward: out.reward,
            next_state: out.next_state.clone(),
        });
        state = out.next_state;
    }
    let trajectory = Trajectory {
        task_id: task.id,
        seed,
        transitions,
    };
    Ok(EpisodeOutcome {
        success: !non_finite && success(task, &trajectory),
        episode_return: ret,
        non_finite,
        trajectory,
    })
}

/// Episode seed of rollout `i` of `task` under evaluation seed `seed`.
pub fn episode_seed(seed: u64, task_id: u32, i: usize) -> u64 {
    derive_seed(seed, &[TAG_EPISODE, task_id as u64, i as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
}

impl EvalSplit {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskSpec>) -> Self {
        Self {
            name: name.into(),
            tasks,
        }
    }
}

/// One task under one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub task_id: u32,
    pub family: Family,
    pub behavior: Behavior,
    pub seed: u64,
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub non_finite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub tasks: usize,
    pub rollouts: usize,
    pub success_rate: f64,
    /// Split success under each evaluation seed, in seed order.
    pub success_by_seed: Vec<f64>,
    pub success_std_over_seeds: f64,
    pub mean_return: f64,
    pub non_finite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub n_rollouts: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
    pub splits: Vec<SplitSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitSummary> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn success_rate(&self, split: &str) -> Result<f64> {
        self.split(split)
            .map(|s| s.success_rate)
            .ok_or_else(|| Error::Config(format!("report has no split {split:?}")))
    }

    /// Success of one task pooled over seeds.
    pub fn task_success(&self, task_id: u32) -> Option<f64> {
        let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.task_id == task_id).collect();
        let n: usize = rows.iter().map(|r| r.rollouts).sum();
        (n > 0).then(|| rows.iter().map(|r| r.successes).sum::<usize>() as f64 / n as f64)
    }

    pub fn total_rollouts(&self) -> usize {
        self.rows.iter().map(|r| r.rollouts).sum()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// One row per task per seed.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn summarize(split: &EvalSplit, rows: &[EvalRow], seeds: &[u64]) -> SplitSummary {
    let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.split == split.name).collect();
    let rollouts: usize = mine.iter().map(|r| r.rollouts).sum();
    let successes: usize = mine.iter().map(|r| r.successes).sum();
    let by_seed: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let rs: Vec<&&EvalRow> = mine.iter().filter(|r| r.seed == s).collect();
            let n: usize = rs.iter().map(|r| r.rollouts).sum();
            let k: usize = rs.iter().map(|r| r.successes).sum();
            if n == 0 {
                0.0
            } else {
                k as f64 / n as f64
            }
        })
        .collect();
    let weighted_return = mine.iter().map(|r| r.mean_return * r.rollouts as f64).sum::<f64>();
    SplitSummary {
        split: split.name.clone(),
        tasks: split.tasks.len(),
        rollouts,
        success_rate: if rollouts == 0 { 0.0 } else { successes as f64 / rollouts as f64 },
        success_std_over_seeds: mean_std(&by_seed).1,
        success_by_seed: by_seed,
        mean_return: if rollouts == 0 { 0.0 } else { weighted_return / rollouts as f64 },
        non_finite: mine.iter().map(|r| r.non_finite).sum(),
    }
}

/// `n_rollouts` episodes for every task of every split under every seed.
pub fn evaluate(
    factory: &dyn PolicyFactory,
    splits: &[EvalSplit],
    n_rollouts: usize,
    seeds: &[u64],
    config_hash: &str,
) -> Result<EvalReport> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be at least 1".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one evaluation seed is required".into()));
    }
    let jobs: Vec<(&EvalSplit, &TaskSpec, u64)> = splits
        .iter()
        .flat_map(|sp| sp.tasks.iter().flat_map(move |t| seeds.iter().map(move |&s| (sp, t, s))))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(sp, task, seed)| -> Result<EvalRow> {
            let mut returns = Vec::with_capacity(n_rollouts);
            let (mut successes, mut non_finite) = (0, 0);
            for i in 0..n_rollouts {
                let es = episode_seed(seed, task.id, i);
                let mut c = factory.controller(task, es)?;
                let ep = run_episode(task, c.as_mut(), es)?;
                successes += ep.success as usize;
                non_finite += ep.non_finite as usize;
                returns.push(ep.episode_return);
            }
            let (mean_return, std_return) = mean_std(&returns);
            Ok(EvalRow {
                split: sp.name.clone(),
                task_id: task.id,
                family: task.family,
                behavior: task.behavior,
                seed,
                rollouts: n_rollouts,
                successes,
                success_rate: successes as f64 / n_rollouts as f64,
                mean_return,
                std_return,
                non_finite,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = splits.iter().map(|sp| summarize(sp, &rows, seeds)).collect();
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        n_rollouts,
        seeds: seeds.to_vec(),
        rows,
        splits: summaries,
    })
}

/// One point of the velocity alignment curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub target: f64,
    pub achieved_mean: f64,
    pub achieved_std: f64,
    pub abs_error: f64,
    pub success_rate: f64,
    pub rollouts: usize,
}

/// Achieved velocity (mean over the final window) per commanded target.
pub fn velocity_alignment(
    factory: &dyn PolicyFactory,
    targets: &[f64],
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<AlignmentPoint>> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be at least 1".into()));
    }
    targets
        .par_iter()
        .enumerate()
        .map(|(i, &target)| {
            let task = veltrack_task(10_000 + i as u32, target, seed);
            let mut achieved = Vec::with_capacity(n_rollouts);
            let mut successes = 0;
            for r in 0..n_rollouts {
                let es = episode_seed(seed, task.id, r);
                let mut c = factory.controller(&task, es)?;
                let ep = run_episode(&task, c.as_mut(), es)?;
                successes += ep.success as usize;
                achieved.push(if ep.non_finite { f64::NAN } else { achieved_velocity(&ep.trajectory) });
            }
            let (m, s) = mean_std(&achieved);
            Ok(AlignmentPoint {
                target: task.params[0],
                achieved_mean: m,
                achieved_std: s,
                abs_error: (m - task.params[0]).abs(),
                success_rate: successes as f64 / n_rollouts as f64,
                rollouts: n_rollouts,
            })
        })
        .collect()
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseRow {
    pub provider: String,
    pub level: Level,
    pub success_rate: f64,
    pub success_std_over_seeds: f64,
    pub mean_return: f64,
}

/// Re-instantiates every task from fresh descriptions of each level.
pub fn paraphrase_eval(
    model: &TenetModel,
    encoder: &dyn TextEncoder,
    provider: &str,
    tasks: &[TaskSpec],
    levels: &[Level],
    n_rollouts: usize,
    seeds: &[u64],
) -> Result<Vec<ParaphraseRow>> {
    if levels.is_empty() {
        return Err(Error::Config("no description levels requested".into()));
    }
    let split = [EvalSplit::new("eval", tasks.to_vec())];
    levels
        .iter()
        .map(|&level| {
            let f = TenetFactory::new(model, encoder, level);
            let r = evaluate(&f, &split, n_rollouts, seeds, "")?;
            let s = &r.splits[0];
            Ok(ParaphraseRow {
                provider: provider.to_string(),
                level,
                success_rate: s.success_rate,
                success_std_over_seeds: s.success_std_over_seeds,
                mean_return: s.mean_return,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{switchworld_registry, VELTRACK_HELDOUT};
    use crate::model::{policy_manifest, ModelConfig};
    use crate::text::HashEmbedder;
    use rand::SeedableRng;

    struct NanFactory;

    impl PolicyFactory for NanFactory {
        fn controller(&self, task: &TaskSpec, _seed: u64) -> Result<Box<dyn Controller>> {
            struct Nan(usize);
            impl Controller for Nan {
                fn state_dim(&self) -> usize {
                    4
                }
                fn action_dim(&self) -> usize {
                    self.0
                }
                fn act(&mut self, _s: &[f64], out: &mut [f64]) {
                    out.fill(f64::NAN);
                }
                fn param_count(&self) -> usize {
                    0
                }
            }
            Ok(Box::new(Nan(task.action_dim())))
        }
    }

    #[test]
    fn expert_passes_and_counts_add_up() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let split = [EvalSplit::new("train", tasks.clone())];
        let r = evaluate(&ExpertFactory, &split, 20, &[0, 1], "h").unwrap();
        assert_eq!(r.total_rollouts(), tasks.len() * 20 * 2);
        assert_eq!(r.rows.len(), tasks.len() * 2);
        assert!(r.success_rate("train").unwrap() >= 0.95);
        assert_eq!(r.split("train").unwrap().success_by_seed.len(), 2);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let model = TenetModel::init(ModelConfig::default(), 3).unwrap();
        let enc = HashEmbedder::new(256).unwrap();
        let f = TenetFactory::new(&model, &enc, Level::L1);
        let split = [EvalSplit::new("train", tasks)];
        let a = evaluate(&f, &split, 5, &[7], "x").unwrap();
        let b = evaluate(&f, &split, 5, &[7], "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = ParamVec::init_glorot(policy_manifest(4, &[64, 64], 2).unwrap(), 1.0, &mut rng);
        let file = ControllerFile::from_params(p, crate::checkpoint::ModelKind::Tenet, "");
        let f = FileFactory {
            file: &file,
            precision: Precision::F64,
        };
        let r = evaluate(&f, &[EvalSplit::new("train", tasks)], 20, &[0], "").unwrap();
        assert!(r.success_rate("train").unwrap() <= 0.2);
    }

    #[test]
    fn non_finite_actions_fail_and_are_flagged() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let r = evaluate(&NanFactory, &[EvalSplit::new("t", tasks[..2].to_vec())], 3, &[0], "").unwrap();
        assert_eq!(r.success_rate("t").unwrap(), 0.0);
        assert_eq!(r.split("t").unwrap().non_finite, 6);
    }

    #[test]
    fn expert_alignment_is_tight() {
        let pts = velocity_alignment(&ExpertFactory, &VELTRACK_HELDOUT, 5, 0).unwrap();
        assert_eq!(pts.len(), 5);
        for p in pts {
            assert!(p.abs_error < 0.05, "{p:?}");
        }
    }

    #[test]
    fn instantiate_checks_encoder_dim() {
        let model = TenetModel::init(ModelConfig::default(), 0).unwrap();
        let enc = HashEmbedder::new(64).unwrap();
        assert!(matches!(instantiate(&model, "Move.", &enc), Err(Error::Incompatible(_))));
    }
}

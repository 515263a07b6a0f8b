//! Offline training loop.
//!
//! Each step draws its batch from a generator keyed by `(seed, step)`, so a
//! run resumed from a checkpoint at step `s` continues exactly as the
//! uninterrupted run would. Batch sampling does not depend on the variant:
//! a grounding trajectory is drawn even when it is not used.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, NamedBlock};
use crate::dataset::OfflineDataset;
use crate::envs::Level;
use crate::error::{Error, Result};
use crate::model::{BatchEntry, LossBreakdown, ModelConfig, TenetModel, TrainBatch};
use crate::ndiff::{AdamState, ParamVec};
use crate::seed::rng_for;
use crate::text::TextEncoder;

pub const MAX_BATCH_TASKS: usize = 32;
const TAG_STEP: u64 = 0x7374_6570;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    /// Tasks per step; `None` means `min(32, train tasks)`.
    pub batch_tasks: Option<usize>,
    pub transitions_per_task: usize,
    pub log_every: u64,
    /// Description level used for training.
    pub level: Level,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 3e-4,
            batch_tasks: None,
            transitions_per_task: 64,
            log_every: 100,
            level: Level::L0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.transitions_per_task == 0 {
            return Err(Error::Config("transitions_per_task must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.batch_tasks == Some(0) {
            return Err(Error::Config("batch_tasks must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self, n_tasks: usize) -> usize {
        self.batch_tasks.unwrap_or(MAX_BATCH_TASKS).min(n_tasks)
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub bc: f64,
    pub align: f64,
    pub text_traj: f64,
    pub text_text: f64,
}

impl LossRecord {
    fn new(step: u64, b: LossBreakdown) -> Self {
        Self {
            step,
            total: b.total,
            bc: b.bc,
            align: b.align,
            text_traj: b.text_traj,
            text_text: b.text_text,
        }
    }
}

pub fn write_loss_csv(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Metadata stamped into checkpoints written by the loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMeta {
    pub run_config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Per-task tensors prepared once before the loop.
pub(crate) struct PreparedTask {
    pub task_id: u32,
    pub texts: Vec<Vec<f64>>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub n_transitions: usize,
    pub trajectories: Vec<Vec<f64>>,
}

pub(crate) struct Prepared {
    pub tasks: Vec<PreparedTask>,
    pub state_dim: usize,
    pub action_dim: usize,
}

pub(crate) fn prepare(dataset: &OfflineDataset, encoder: &dyn TextEncoder, level: Level, d_z: usize) -> Result<Prepared> {
    if dataset.tasks.is_empty() {
        return Err(Error::Config("dataset has no tasks".into()));
    }
    if encoder.dim() != d_z {
        return Err(Error::Incompatible(format!(
            "text encoder dimension {} does not match model d_z {d_z}",
            encoder.dim()
        )));
    }
    let state_dim = dataset.tasks[0].task.state_dim();
    let action_dim = dataset.tasks[0].task.action_dim();
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut tasks = Vec::with_capacity(dataset.tasks.len());
    for td in &dataset.tasks {
        if td.task.state_dim() != state_dim || td.task.action_dim() != action_dim {
            return Err(Error::Config("dataset mixes state or action dimensions".into()));
        }
        let descs = td.descriptions(level);
        if descs.is_empty() {
            return Err(Error::Config(format!(
                "task {} has no {level} descriptions in the dataset",
                td.task.id
            )));
        }
        let mut texts = Vec::with_capacity(descs.len());
        for d in descs {
            if !cache.contains_key(d.as_str()) {
                cache.insert(d.as_str(), encoder.embed(d)?.values);
            }
            texts.push(cache[d.as_str()].clone());
        }
        if td.trajectories.is_empty() {
            return Err(Error::Config(format!("task {} has no trajectories", td.task.id)));
        }
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut trajectories = Vec::with_capacity(td.trajectories.len());
        for t in &td.trajectories {
            if t.is_empty() {
                return Err(Error::Input(format!("task {} has an empty trajectory", td.task.id)));
            }
            let mut f = Vec::new();
            for tr in &t.transitions {
                states.extend_from_slice(&tr.state);
                actions.extend_from_slice(&tr.action);
                tr.write_features(&mut f);
            }
            trajectories.push(f);
        }
        tasks.push(PreparedTask {
            task_id: td.task.id,
            texts,
            n_transitions: states.len() / state_dim,
            states,
            actions,
            trajectories,
        });
    }
    Ok(Prepared {
        tasks,
        state_dim,
        action_dim,
    })
}

impl Prepared {
    /// Draws a batch for one step. The number and order of draws is fixed,
    /// whatever the caller later uses.
    pub fn sample(&self, rng: &mut ChaCha8Rng, batch_tasks: usize, per_task: usize) -> TrainBatch {
        let n = self.tasks.len();
        let picks: Vec<usize> = if batch_tasks >= n {
            (0..n).collect()
        } else {
            sample(rng, n, batch_tasks).into_vec()
        };
        let (sd, ad) = (self.state_dim, self.action_dim);
        let entries = picks
            .into_iter()
            .map(|i| {
                let t = &self.tasks[i];
                let d = rng.gen_range(0..t.texts.len());
                let p = rng.gen_range(0..t.texts.len());
                let k = rng.gen_range(0..t.trajectories.len());
                let mut states = Vec::with_capacity(per_task * sd);
                let mut actions = Vec::with_capacity(per_task * ad);
                for _ in 0..per_task {
                    let j = rng.gen_range(0..t.n_transitions);
                    states.extend_from_slice(&t.states[j * sd..(j + 1) * sd]);
                    actions.extend_from_slice(&t.actions[j * ad..(j + 1) * ad]);
                }
                BatchEntry {
                    task_id: t.task_id,
                    text: t.texts[d].clone(),
                    text_positive: Some(t.texts[p].clone()),
                    states,
                    actions,
                    trajectory: t.trajectories[k].clone(),
                }
            })
            .collect();
        TrainBatch { entries }
    }
}

pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    rng_for(seed, &[TAG_STEP, step])
}

/// A model the offline loop can optimize.
pub trait Learner: Clone + Sized {
    fn kind(&self) -> ModelKind;
    fn model_config(&self) -> &ModelConfig;
    fn named_blocks(&self) -> Vec<(&'static str, &ParamVec)>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamVec>;
    fn total_loss(&self, batch: &TrainBatch) -> Result<LossBreakdown>;
    /// Gradients in [`Learner::named_blocks`] order.
    fn loss_and_grad(&self, batch: &TrainBatch) -> Result<(LossBreakdown, Vec<Vec<f64>>)>;
    fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self>;

    fn checkpoint(
        &self,
        meta: &RunMeta,
        steps: u64,
        adam: Option<Vec<AdamState>>,
    ) -> Checkpoint {
        Checkpoint {
            kind: self.kind(),
            model_config: self.model_config().clone(),
            run_config: meta.run_config.clone(),
            config_hash: meta.config_hash.clone(),
            seed: meta.seed,
            steps,
            blocks: self
                .named_blocks()
                .into_iter()
                .map(|(name, p)| NamedBlock {
                    name: name.to_string(),
                    params: p.clone(),
                })
                .collect(),
            adam,
        }
    }
}

impl Learner for TenetModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Tenet
    }

    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn named_blocks(&self) -> Vec<(&'static str, &ParamVec)> {
        self.blocks().to_vec()
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamVec> {
        TenetModel::blocks_mut(self).into()
    }

    fn total_loss(&self, batch: &TrainBatch) -> Result<LossBreakdown> {
        TenetModel::total_loss(self, batch)
    }

    fn loss_and_grad(&self, batch: &TrainBatch) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let (l, g) = TenetModel::loss_and_grad(self, batch)?;
        Ok((l, g.into()))
    }

    fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        checkpoint.to_tenet()
    }
}

fn fresh_adam<L: Learner>(model: &L) -> Vec<AdamState> {
    model.named_blocks().iter().map(|(_, p)| AdamState::new(p.len())).collect()
}

/// Trains a freshly initialized TeNet model for `cfg.steps` steps.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    meta: &RunMeta,
) -> Result<TrainOutcome> {
    let model = TenetModel::init(model_config.clone(), meta.seed)?;
    train_learner(model, cfg, dataset, encoder, meta)
}

/// Trains an already initialized model from step 0.
pub fn train_learner<L: Learner>(
    model: L,
    cfg: &TrainConfig,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    meta: &RunMeta,
) -> Result<TrainOutcome> {
    let adam = fresh_adam(&model);
    run(model, adam, 0, cfg, dataset, encoder, meta)
}

/// Continues a checkpoint of any kind up to `cfg.steps` total steps.
pub fn resume(
    checkpoint: &Checkpoint,
    cfg: &TrainConfig,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    meta: &RunMeta,
) -> Result<TrainOutcome> {
    match checkpoint.kind {
        ModelKind::Tenet => resume_as::<TenetModel>(checkpoint, cfg, dataset, encoder, meta),
        _ => resume_as::<crate::baselines::BaselineModel>(checkpoint, cfg, dataset, encoder, meta),
    }
}

fn resume_as<L: Learner>(
    checkpoint: &Checkpoint,
    cfg: &TrainConfig,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    meta: &RunMeta,
) -> Result<TrainOutcome> {
    let model = L::from_checkpoint(checkpoint)?;
    let adam = checkpoint.adam.clone().unwrap_or_else(|| fresh_adam(&model));
    if checkpoint.steps > cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {}, beyond the configured {} steps",
            checkpoint.steps, cfg.steps
        )));
    }
    let meta = RunMeta {
        seed: checkpoint.seed,
        ..meta.clone()
    };
    run(model, adam, checkpoint.steps, cfg, dataset, encoder, &meta)
}

fn run<L: Learner>(
    mut model: L,
    mut adam: Vec<AdamState>,
    start: u64,
    cfg: &TrainConfig,
    dataset: &OfflineDataset,
    encoder: &dyn TextEncoder,
    meta: &RunMeta,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = model.model_config().clone();
    let prepared = prepare(dataset, encoder, cfg.level, mc.d_z)?;
    if prepared.state_dim != mc.state_dim || prepared.action_dim != mc.action_dim {
        return Err(Error::Incompatible(format!(
            "dataset dims ({}, {}) differ from model dims ({}, {})",
            prepared.state_dim, prepared.action_dim, mc.state_dim, mc.action_dim
        )));
    }
    if adam.len() != model.named_blocks().len() {
        return Err(Error::shape("optimizer state blocks", model.named_blocks().len(), adam.len()));
    }
    let b = cfg.batch_size(prepared.tasks.len());
    let mut log = Vec::new();
    for step in start..cfg.steps {
        let mut rng = step_rng(meta.seed, step);
        let batch = prepared.sample(&mut rng, b, cfg.transitions_per_task);
        let (loss, grads) = match model.loss_and_grad(&batch) {
            Ok(x) => x,
            Err(Error::Numeric(d)) => {
                return Err(Error::NanAbort {
                    step,
                    diagnostic: d,
                    last_good: Box::new(model.checkpoint(meta, step, Some(adam))),
                })
            }
            Err(e) => return Err(e),
        };
        if step % cfg.log_every == 0 {
            log.push(LossRecord::new(step, loss));
        }
        let before = model.clone();
        let before_adam = adam.clone();
        for ((p, g), s) in model.blocks_mut().into_iter().zip(&grads).zip(adam.iter_mut()) {
            s.update(p.values_mut(), g, cfg.lr)?;
        }
        if let Some((name, _)) = model
            .named_blocks()
            .into_iter()
            .find(|(_, p)| p.values().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NanAbort {
                step,
                diagnostic: format!("parameters of {name} became non-finite after the update"),
                last_good: Box::new(before.checkpoint(meta, step, Some(before_adam))),
            });
        }
    }
    // closing row: loss at the final parameters on the next batch
    let mut rng = step_rng(meta.seed, cfg.steps);
    let batch = prepared.sample(&mut rng, b, cfg.transitions_per_task);
    let loss = model.total_loss(&batch)?;
    if !loss.is_finite() {
        return Err(Error::NanAbort {
            step: cfg.steps,
            diagnostic: format!("final loss is not finite ({})", loss.total),
            last_good: Box::new(model.checkpoint(meta, cfg.steps, Some(adam))),
        });
    }
    log.push(LossRecord::new(cfg.steps, loss));
    Ok(TrainOutcome {
        checkpoint: model.checkpoint(meta, cfg.steps, Some(adam)),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::envs::{switchworld_registry, veltrack_task};
    use crate::model::Variant;
    use crate::text::HashEmbedder;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_z: 64,
            d_e: 8,
            proj_hidden: vec![16],
            hyper_hidden: vec![16],
            policy_hidden: vec![8],
            traj_feature_hidden: vec![8],
            traj_feature_dim: 8,
            traj_head_hidden: vec![8],
            variant,
            ..ModelConfig::default()
        }
    }

    fn data() -> OfflineDataset {
        let tasks = switchworld_registry(10, 0).unwrap();
        generate_dataset(&tasks[..4], 2, 2, &[Level::L0], 3).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let enc = HashEmbedder::new(64).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let meta = RunMeta {
            seed: 9,
            ..RunMeta::default()
        };
        let out = train(&small(Variant::Contrastive), &cfg, &data(), &enc, &meta).unwrap();
        let init = TenetModel::init(small(Variant::Contrastive), 9).unwrap();
        assert_eq!(out.checkpoint.to_tenet().unwrap(), init);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let enc = HashEmbedder::new(64).unwrap();
        let ds = data();
        let meta = RunMeta {
            seed: 4,
            ..RunMeta::default()
        };
        let full = TrainConfig {
            steps: 12,
            log_every: 5,
            transitions_per_task: 8,
            ..TrainConfig::default()
        };
        let half = TrainConfig { steps: 5, ..full.clone() };
        let a = train(&small(Variant::Mse), &full, &ds, &enc, &meta).unwrap();
        let h = train(&small(Variant::Mse), &half, &ds, &enc, &meta).unwrap();
        let b = resume(&h.checkpoint, &full, &ds, &enc, &meta).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn lambda_zero_matches_direct_updates() {
        let enc = HashEmbedder::new(64).unwrap();
        let ds = data();
        let meta = RunMeta {
            seed: 2,
            ..RunMeta::default()
        };
        let cfg = TrainConfig {
            steps: 6,
            transitions_per_task: 8,
            ..TrainConfig::default()
        };
        let direct = train(&small(Variant::Direct), &cfg, &ds, &enc, &meta).unwrap();
        let mut c = small(Variant::Contrastive);
        c.lambda_g = 0.0;
        let zero = train(&c, &cfg, &ds, &enc, &meta).unwrap();
        let d = direct.checkpoint.to_tenet().unwrap();
        let z = zero.checkpoint.to_tenet().unwrap();
        assert_eq!(d.g, z.g);
        assert_eq!(d.h, z.h);
        assert_eq!(direct.log[0].bc, zero.log[0].bc);
        assert_eq!(zero.log[0].total, zero.log[0].bc);
        assert!(zero.log[0].text_traj > 0.0);
    }

    #[test]
    fn contrastive_with_one_task_is_config_error() {
        let enc = HashEmbedder::new(64).unwrap();
        let t = veltrack_task(0, 1.2, 0);
        let ds = generate_dataset(&[t], 1, 1, &[Level::L0], 0).unwrap();
        let mut mc = small(Variant::Contrastive);
        mc.state_dim = 1;
        mc.action_dim = 1;
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        let err = train(&mc, &cfg, &ds, &enc, &RunMeta::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn nan_loss_aborts_with_last_good_checkpoint() {
        let enc = HashEmbedder::new(64).unwrap();
        let mut ds = data();
        for td in &mut ds.tasks {
            for t in &mut td.trajectories {
                t.transitions[0].action[0] = f64::NAN;
                t.transitions.truncate(1);
            }
        }
        let cfg = TrainConfig {
            steps: 3,
            transitions_per_task: 4,
            ..TrainConfig::default()
        };
        match train(&small(Variant::Direct), &cfg, &ds, &enc, &RunMeta::default()) {
            Err(Error::NanAbort { step, last_good, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good.steps, 0);
                assert!(last_good.to_tenet().is_ok());
            }
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }
}

//! Comparison models trained with the same offline loop as TeNet.
//!
//! * `bc-shared`: one policy for every task, no task signal.
//! * `traj-hn`: the TeNet hypernetwork conditioned on an encoded prompt
//!   trajectory instead of text.
//! * `prompt-concat`: a policy on `[state ; encoded prompt]`.
//!
//! During training the prompt is the batch entry's sampled demonstration.
//! At evaluation time it must be supplied explicitly.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::envs::{rollout, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::experts::expert_action_into;
use crate::model::{bc_on_tape, traj_on_tape, LossBreakdown, ModelConfig, TrainBatch, TrajectoryEncoder};
use crate::ndiff::{Activation, Manifest, ParamVec, Tape, Var};
use crate::seed::{derive_seed, rng_for};
use crate::train::Learner;

const TAG_PROMPT: u64 = 0x7072_6f6d;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    kind: ModelKind,
    config: ModelConfig,
    /// Generated-policy manifest (traj-hn only).
    generated: Option<Manifest>,
    pub policy: Option<ParamVec>,
    pub h: Option<ParamVec>,
    pub f_traj: Option<TrajectoryEncoder>,
}

fn shared_manifest(config: &ModelConfig, input: usize) -> Result<Manifest> {
    Manifest::mlp(
        "policy",
        input,
        &config.baseline_hidden,
        config.action_dim,
        Activation::Tanh,
        Activation::Tanh,
    )
}

impl BaselineModel {
    pub fn init(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x6261_7365, kind as u64]);
        let encoder = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<TrajectoryEncoder> {
            Ok(TrajectoryEncoder {
                feat: ParamVec::init_glorot(config.traj_feature_manifest()?, 1.0, rng),
                head: ParamVec::init_glorot(config.traj_head_manifest()?, 1.0, rng),
            })
        };
        let (policy, h, f_traj, generated) = match kind {
            ModelKind::Tenet => {
                return Err(Error::Config("tenet is not a baseline kind".into()));
            }
            ModelKind::BcShared => {
                let m = shared_manifest(&config, config.state_dim)?;
                (Some(ParamVec::init_glorot(m, 1.0, &mut rng)), None, None, None)
            }
            ModelKind::PromptConcat => {
                let m = shared_manifest(&config, config.state_dim + config.d_e)?;
                let p = ParamVec::init_glorot(m, 1.0, &mut rng);
                (Some(p), None, Some(encoder(&mut rng)?), None)
            }
            ModelKind::TrajHn => {
                let h = ParamVec::init_glorot(config.hyper_manifest()?, config.hyper_output_scale, &mut rng);
                (None, Some(h), Some(encoder(&mut rng)?), Some(config.policy_manifest()?))
            }
        };
        Ok(Self {
            kind,
            config,
            generated,
            policy,
            h,
            f_traj,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn needs_prompt(&self) -> bool {
        self.kind != ModelKind::BcShared
    }

    pub fn trainable_count(&self) -> usize {
        self.named_blocks().iter().map(|(_, p)| p.len()).sum()
    }

    fn encoder(&self) -> &TrajectoryEncoder {
        self.f_traj.as_ref().expect("prompt-conditioned baseline has an encoder")
    }

    /// Deployed controller for one task. `prompt` is required for the
    /// prompt-conditioned kinds.
    pub fn controller_params(&self, task_id: u32, prompt: Option<&Trajectory>) -> Result<BaselinePolicy> {
        let prompt = |model: &Self| -> Result<Vec<f64>> {
            match prompt {
                Some(t) => model.encoder().encode(&t.transitions),
                None => Err(Error::MissingPrompt { task_id }),
            }
        };
        match self.kind {
            ModelKind::BcShared => Ok(BaselinePolicy::Plain(self.policy.clone().expect("policy block"))),
            ModelKind::TrajHn => {
                let z = prompt(self)?;
                let theta = self.h.as_ref().expect("h block").forward(&z)?;
                Ok(BaselinePolicy::Plain(ParamVec::new(
                    self.generated.clone().expect("generated manifest"),
                    theta,
                )?))
            }
            ModelKind::PromptConcat => Ok(BaselinePolicy::Conditioned {
                policy: self.policy.clone().expect("policy block"),
                conditioning: prompt(self)?,
            }),
            ModelKind::Tenet => unreachable!("baseline kinds only"),
        }
    }

    fn build(&self, tape: &mut Tape, vars: &[Var], batch: &TrainBatch) -> Result<Var> {
        let cfg = &self.config;
        batch.validate(cfg.d_z, cfg.state_dim, cfg.action_dim, cfg.transition_width())?;
        let (sd, ad) = (cfg.state_dim, cfg.action_dim);
        match self.kind {
            ModelKind::BcShared => {
                let policy = self.policy.as_ref().expect("policy block");
                per_entry_bc(tape, batch, sd, ad, |tape, _, x| tape.mlp(x, vars[0], policy.manifest()))
            }
            ModelKind::TrajHn => {
                let enc = self.encoder();
                let zx = traj_on_tape(tape, vars[1], vars[2], enc, batch, cfg.transition_width())?;
                let h = self.h.as_ref().expect("h block");
                let theta = tape.mlp(zx, vars[0], h.manifest())?;
                bc_on_tape(tape, theta, self.generated.as_ref().expect("manifest"), batch, sd, ad)
            }
            ModelKind::PromptConcat => {
                let enc = self.encoder();
                let zx = traj_on_tape(tape, vars[1], vars[2], enc, batch, cfg.transition_width())?;
                let policy = self.policy.as_ref().expect("policy block");
                per_entry_bc(tape, batch, sd, ad, |tape, i, x| {
                    let r = tape.row(zx, i)?;
                    let xin = tape.concat_cols(x, r)?;
                    tape.mlp(xin, vars[0], policy.manifest())
                })
            }
            ModelKind::Tenet => unreachable!("baseline kinds only"),
        }
    }
}

fn per_entry_bc<F>(tape: &mut Tape, batch: &TrainBatch, sd: usize, ad: usize, mut forward: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let mut per = Vec::with_capacity(batch.entries.len());
    for (i, e) in batch.entries.iter().enumerate() {
        let n = e.states.len() / sd;
        let x = tape.constant(n, sd, e.states.clone())?;
        let y = forward(tape, i, x)?;
        let a = tape.constant(n, ad, e.actions.clone())?;
        let d = tape.sub(y, a)?;
        let sq = tape.square(d);
        per.push(tape.mean(sq));
    }
    let stacked = tape.stack_rows(&per)?;
    Ok(tape.mean(stacked))
}

/// Parameters of a baseline's deployed controller.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselinePolicy {
    Plain(ParamVec),
    /// Policy on `[state ; conditioning]`.
    Conditioned { policy: ParamVec, conditioning: Vec<f64> },
}

impl Learner for BaselineModel {
    fn kind(&self) -> ModelKind {
        self.kind
    }

    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn named_blocks(&self) -> Vec<(&'static str, &ParamVec)> {
        let mut out = Vec::with_capacity(3);
        if let Some(p) = &self.policy {
            out.push(("policy", p));
        }
        if let Some(h) = &self.h {
            out.push(("h", h));
        }
        if let Some(f) = &self.f_traj {
            out.push(("f_traj.feat", &f.feat));
            out.push(("f_traj.head", &f.head));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamVec> {
        let mut out = Vec::with_capacity(3);
        if let Some(p) = &mut self.policy {
            out.push(p);
        }
        if let Some(h) = &mut self.h {
            out.push(h);
        }
        if let Some(f) = &mut self.f_traj {
            out.push(&mut f.feat);
            out.push(&mut f.head);
        }
        out
    }

    fn total_loss(&self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .named_blocks()
            .iter()
            .map(|(_, p)| tape.constant(1, p.len(), p.values().to_vec()))
            .collect::<Result<_>>()?;
        let bc = self.build(&mut tape, &vars, batch)?;
        let v = tape.scalar(bc);
        Ok(LossBreakdown {
            total: v,
            bc: v,
            ..LossBreakdown::default()
        })
    }

    fn loss_and_grad(&self, batch: &TrainBatch) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.named_blocks().iter().map(|(_, p)| tape.param_vec(p)).collect();
        let bc = self.build(&mut tape, &vars, batch)?;
        let mut grads = tape.backward(bc)?;
        let out: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v)).collect();
        for ((name, _), g) in self.named_blocks().iter().zip(&out) {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name}[{i}] is not finite")));
            }
        }
        let v = tape.scalar(bc);
        Ok((
            LossBreakdown {
                total: v,
                bc: v,
                ..LossBreakdown::default()
            },
            out,
        ))
    }

    fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.kind == ModelKind::Tenet {
            return Err(Error::Incompatible("expected a baseline checkpoint, found tenet".into()));
        }
        let mut model = Self::init(checkpoint.kind, checkpoint.model_config.clone(), 0)?;
        let names: Vec<&str> = model.named_blocks().iter().map(|(n, _)| *n).collect();
        if checkpoint.blocks.len() != names.len() {
            return Err(Error::Incompatible(format!(
                "{} checkpoint should have {} blocks, found {}",
                checkpoint.kind,
                names.len(),
                checkpoint.blocks.len()
            )));
        }
        for (name, slot) in names.into_iter().zip(model.blocks_mut()) {
            let stored = checkpoint.block(name)?;
            if stored.manifest() != slot.manifest() {
                return Err(Error::Incompatible(format!("block {name} has an unexpected layout")));
            }
            *slot = stored.clone();
        }
        Ok(model)
    }
}

/// One expert prompt trajectory per task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub prompts: BTreeMap<u32, Trajectory>,
}

impl PromptSet {
    pub fn get(&self, task_id: u32) -> Option<&Trajectory> {
        self.prompts.get(&task_id)
    }

    /// Reassigns prompts so task `i` in `tasks` receives the prompt of task
    /// `i + 1` (cyclically). Used to probe conditioning sensitivity.
    pub fn rotated(&self, tasks: &[TaskSpec]) -> Result<Self> {
        let mut prompts = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            let donor = &tasks[(i + 1) % tasks.len()];
            let p = self.get(donor.id).ok_or(Error::MissingPrompt { task_id: donor.id })?;
            prompts.insert(t.id, p.clone());
        }
        Ok(Self { prompts })
    }
}

/// Expert rollouts on seeds disjoint from dataset generation.
pub fn expert_prompts(tasks: &[TaskSpec], seed: u64) -> Result<PromptSet> {
    let prompts = tasks
        .par_iter()
        .map(|t| {
            let s = derive_seed(seed, &[TAG_PROMPT, t.id as u64]);
            rollout(t, s, |st, a| expert_action_into(t, st, a)).map(|tr| (t.id, tr))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(PromptSet { prompts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::envs::{switchworld_registry, Level};
    use crate::model::Variant;
    use crate::text::HashEmbedder;
    use crate::train::{train_learner, RunMeta, TrainConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            d_z: 64,
            d_e: 8,
            proj_hidden: vec![16],
            hyper_hidden: vec![16],
            policy_hidden: vec![8],
            traj_feature_hidden: vec![8],
            traj_feature_dim: 8,
            traj_head_hidden: vec![8],
            baseline_hidden: vec![16],
            variant: Variant::Direct,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn block_layouts() {
        let bc = BaselineModel::init(ModelKind::BcShared, small(), 0).unwrap();
        assert_eq!(bc.named_blocks().len(), 1);
        assert_eq!(bc.trainable_count(), (4 * 16 + 16) + (16 * 2 + 2));
        let hn = BaselineModel::init(ModelKind::TrajHn, small(), 0).unwrap();
        let names: Vec<_> = hn.named_blocks().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["h", "f_traj.feat", "f_traj.head"]);
        let pc = BaselineModel::init(ModelKind::PromptConcat, small(), 0).unwrap();
        assert_eq!(pc.policy.as_ref().unwrap().manifest().input_dim(), 4 + 8);
        assert!(BaselineModel::init(ModelKind::Tenet, small(), 0).is_err());
    }

    #[test]
    fn prompt_kinds_refuse_without_prompt() {
        for kind in [ModelKind::TrajHn, ModelKind::PromptConcat] {
            let m = BaselineModel::init(kind, small(), 0).unwrap();
            assert!(matches!(
                m.controller_params(7, None),
                Err(Error::MissingPrompt { task_id: 7 })
            ));
        }
        let bc = BaselineModel::init(ModelKind::BcShared, small(), 0).unwrap();
        assert!(bc.controller_params(7, None).is_ok());
    }

    #[test]
    fn train_and_reload_every_kind() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let ds = generate_dataset(&tasks[..3], 2, 1, &[Level::L0], 0).unwrap();
        let enc = HashEmbedder::new(64).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            transitions_per_task: 8,
            ..TrainConfig::default()
        };
        for kind in [ModelKind::BcShared, ModelKind::TrajHn, ModelKind::PromptConcat] {
            let m = BaselineModel::init(kind, small(), 1).unwrap();
            let out = train_learner(m, &cfg, &ds, &enc, &RunMeta::default()).unwrap();
            assert_eq!(out.checkpoint.kind, kind);
            let back = BaselineModel::from_checkpoint(&out.checkpoint).unwrap();
            assert_eq!(back.checkpoint(&RunMeta::default(), 5, out.checkpoint.adam.clone()), out.checkpoint);
        }
    }

    #[test]
    fn rotated_prompts_come_from_the_next_task() {
        let tasks = switchworld_registry(10, 0).unwrap();
        let p = expert_prompts(&tasks[..3], 4).unwrap();
        let r = p.rotated(&tasks[..3]).unwrap();
        assert_eq!(r.get(tasks[0].id), p.get(tasks[1].id));
        assert_eq!(r.get(tasks[2].id), p.get(tasks[0].id));
    }
}

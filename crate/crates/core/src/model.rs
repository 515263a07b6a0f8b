//! The text-conditioned hypernetwork model.
//!
//! `z_d` (frozen text embedding) -> `g` -> `z~_d` -> `h` -> `theta_pi`, the
//! flat parameter vector of a small tanh policy. A trajectory encoder
//! `f_traj` (per-transition featurizer, mean pool, head) maps demonstrations
//! into the same space as `z~_d` for the grounding losses.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::ndiff::{Activation, Manifest, ParamVec, Tape, Var};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Direct,
    Mse,
    Contrastive,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Direct => "direct",
            Variant::Mse => "mse",
            Variant::Contrastive => "contrastive",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Variant::Direct),
            "mse" => Ok(Variant::Mse),
            "contrastive" | "contrast" => Ok(Variant::Contrastive),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_z: usize,
    pub d_e: usize,
    pub proj_hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub traj_feature_hidden: Vec<usize>,
    pub traj_feature_dim: usize,
    pub traj_head_hidden: Vec<usize>,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Init bound multiplier for the last hypernetwork layer.
    pub hyper_output_scale: f64,
    pub variant: Variant,
    pub beta: f64,
    pub lambda_g: f64,
    /// Use a second description of the same task as the text-text positive.
    pub paraphrase_positive: bool,
    /// Hidden widths of the bc-shared and prompt-concat baseline policies.
    pub baseline_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: crate::text::DEFAULT_DIM,
            d_e: 64,
            proj_hidden: vec![128],
            hyper_hidden: vec![256, 256],
            policy_hidden: vec![64, 64],
            traj_feature_hidden: vec![64],
            traj_feature_dim: 64,
            traj_head_hidden: vec![64],
            state_dim: 4,
            action_dim: 2,
            hyper_output_scale: 0.01,
            variant: Variant::Contrastive,
            beta: 0.1,
            lambda_g: 1.0,
            paraphrase_positive: false,
            baseline_hidden: vec![256, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda_g >= 0.0) {
            return Err(Error::Config(format!("lambda_g must be >= 0, got {}", self.lambda_g)));
        }
        if !(self.hyper_output_scale >= 0.0) {
            return Err(Error::Config("hyper_output_scale must be >= 0".into()));
        }
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_e", self.d_e),
            ("traj_feature_dim", self.traj_feature_dim),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn transition_width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1
    }

    pub fn policy_manifest(&self) -> Result<Manifest> {
        policy_manifest(self.state_dim, &self.policy_hidden, self.action_dim)
    }

    pub fn projection_manifest(&self) -> Result<Manifest> {
        Manifest::mlp("g", self.d_z, &self.proj_hidden, self.d_e, Activation::Tanh, Activation::Linear)
    }

    pub fn hyper_manifest(&self) -> Result<Manifest> {
        let out = self.policy_manifest()?.param_count();
        Manifest::mlp("h", self.d_e, &self.hyper_hidden, out, Activation::Tanh, Activation::Linear)
    }

    pub fn traj_feature_manifest(&self) -> Result<Manifest> {
        Manifest::mlp(
            "f_traj.feat",
            self.transition_width(),
            &self.traj_feature_hidden,
            self.traj_feature_dim,
            Activation::Tanh,
            Activation::Tanh,
        )
    }

    pub fn traj_head_manifest(&self) -> Result<Manifest> {
        Manifest::mlp(
            "f_traj.head",
            self.traj_feature_dim,
            &self.traj_head_hidden,
            self.d_e,
            Activation::Tanh,
            Activation::Linear,
        )
    }
}

/// Tanh hidden layers, tanh output (actions live in `[-1, 1]`).
pub fn policy_manifest(state_dim: usize, hidden: &[usize], action_dim: usize) -> Result<Manifest> {
    Manifest::mlp("policy", state_dim, hidden, action_dim, Activation::Tanh, Activation::Tanh)
}

pub fn count_params(manifest: &Manifest) -> usize {
    manifest.param_count()
}

/// Per-transition featurizer, mean pool over time, head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEncoder {
    pub feat: ParamVec,
    pub head: ParamVec,
}

impl TrajectoryEncoder {
    pub fn feature_width(&self) -> usize {
        self.feat.manifest().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.manifest().output_dim()
    }

    /// Rows of `[s ; a ; r ; s']`.
    pub fn features(&self, transitions: &[Transition]) -> Result<Vec<f64>> {
        if transitions.is_empty() {
            return Err(Error::Input("cannot encode an empty trajectory".into()));
        }
        let w = self.feature_width();
        let mut f = Vec::with_capacity(transitions.len() * w);
        for t in transitions {
            if t.width() != w {
                return Err(Error::shape("transition features", w, t.width()));
            }
            t.write_features(&mut f);
        }
        Ok(f)
    }

    pub fn encode(&self, transitions: &[Transition]) -> Result<Vec<f64>> {
        let f = self.features(transitions)?;
        let w = self.feature_width();
        let fd = self.feat.manifest().output_dim();
        let mut pooled = vec![0.0; fd];
        for row in f.chunks_exact(w) {
            for (p, v) in pooled.iter_mut().zip(self.feat.forward(row)?) {
                *p += v;
            }
        }
        let n = transitions.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        self.head.forward(&pooled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenetModel {
    config: ModelConfig,
    policy: Manifest,
    pub g: ParamVec,
    pub h: ParamVec,
    pub f_traj: TrajectoryEncoder,
}

pub const BLOCK_NAMES: [&str; 4] = ["g", "h", "f_traj.feat", "f_traj.head"];

impl TenetModel {
    /// Glorot init; the hypernetwork's last layer is shrunk by
    /// `hyper_output_scale` so the initial policies are near zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x696e_6974]);
        let g = ParamVec::init_glorot(config.projection_manifest()?, 1.0, &mut rng);
        let h = ParamVec::init_glorot(config.hyper_manifest()?, config.hyper_output_scale, &mut rng);
        let feat = ParamVec::init_glorot(config.traj_feature_manifest()?, 1.0, &mut rng);
        let head = ParamVec::init_glorot(config.traj_head_manifest()?, 1.0, &mut rng);
        Self::from_parts(config, g, h, TrajectoryEncoder { feat, head })
    }

    pub fn from_parts(config: ModelConfig, g: ParamVec, h: ParamVec, f_traj: TrajectoryEncoder) -> Result<Self> {
        config.validate()?;
        let policy = config.policy_manifest()?;
        let expect = [
            ("g", config.projection_manifest()?, &g),
            ("h", config.hyper_manifest()?, &h),
            ("f_traj.feat", config.traj_feature_manifest()?, &f_traj.feat),
            ("f_traj.head", config.traj_head_manifest()?, &f_traj.head),
        ];
        for (name, m, p) in expect {
            if p.manifest() != &m {
                return Err(Error::shape(
                    format!("block {name} manifest"),
                    m.param_count(),
                    p.len(),
                ));
            }
        }
        if h.manifest().output_dim() != policy.param_count() {
            return Err(Error::shape("hypernetwork output", policy.param_count(), h.manifest().output_dim()));
        }
        Ok(Self {
            config,
            policy,
            g,
            h,
            f_traj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn policy_manifest(&self) -> &Manifest {
        &self.policy
    }

    pub fn blocks(&self) -> [(&'static str, &ParamVec); 4] {
        [
            (BLOCK_NAMES[0], &self.g),
            (BLOCK_NAMES[1], &self.h),
            (BLOCK_NAMES[2], &self.f_traj.feat),
            (BLOCK_NAMES[3], &self.f_traj.head),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut ParamVec; 4] {
        [&mut self.g, &mut self.h, &mut self.f_traj.feat, &mut self.f_traj.head]
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks().iter().map(|(_, p)| p.len()).sum()
    }

    /// All trainable parameters concatenated in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, p)| p.values().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::shape("flat parameters", self.trainable_count(), flat.len()));
        }
        let mut off = 0;
        for p in self.blocks_mut() {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn project(&self, z_d: &[f64]) -> Result<Vec<f64>> {
        if z_d.len() != self.config.d_z {
            return Err(Error::shape("text embedding", self.config.d_z, z_d.len()));
        }
        self.g.forward(z_d)
    }

    pub fn project_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        zs.iter().map(|z| self.project(z)).collect()
    }

    /// `theta_pi = h(z~_d)`.
    pub fn generate_policy(&self, z_tilde: &[f64]) -> Result<ParamVec> {
        if z_tilde.len() != self.config.d_e {
            return Err(Error::shape("projected embedding", self.config.d_e, z_tilde.len()));
        }
        ParamVec::new(self.policy.clone(), self.h.forward(z_tilde)?)
    }

    /// Text embedding to policy; consumes no trajectory data.
    pub fn policy_from_embedding(&self, z_d: &[f64]) -> Result<ParamVec> {
        self.generate_policy(&self.project(z_d)?)
    }

    pub fn encode_trajectory(&self, transitions: &[Transition]) -> Result<Vec<f64>> {
        self.f_traj.encode(transitions)
    }

    /// Mean over transitions and action dims of the squared error between
    /// the generated policy and the expert actions.
    pub fn bc_loss(&self, z_tilde: &[f64], transitions: &[Transition]) -> Result<f64> {
        let policy = self.generate_policy(z_tilde)?;
        bc_mse(&policy, transitions)
    }

    pub fn total_loss(&self, batch: &TrainBatch) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let nodes = self.build(&mut tape, &vars, batch)?;
        Ok(nodes.breakdown(&tape))
    }

    /// Loss breakdown and the gradient of the total with respect to every
    /// block, in [`BLOCK_NAMES`] order.
    pub fn loss_and_grad(&self, batch: &TrainBatch) -> Result<(LossBreakdown, [Vec<f64>; 4])> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let nodes = self.build(&mut tape, &vars, batch)?;
        let mut grads = tape.backward(nodes.total)?;
        let out = [
            grads.take(vars.g),
            grads.take(vars.h),
            grads.take(vars.feat),
            grads.take(vars.head),
        ];
        for (name, g) in BLOCK_NAMES.iter().zip(&out) {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name}[{i}] is not finite")));
            }
        }
        Ok((nodes.breakdown(&tape), out))
    }

    /// Value of one loss term and its gradient with respect to the flat
    /// parameter vector. Terms absent from the variant have zero gradient.
    pub fn term_grad(&self, batch: &TrainBatch, term: LossTerm) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let nodes = self.build(&mut tape, &vars, batch)?;
        let node = match term {
            LossTerm::Total => Some(nodes.total),
            LossTerm::Bc => Some(nodes.bc),
            LossTerm::Align => nodes.align,
            LossTerm::TextTraj => nodes.text_traj,
            LossTerm::TextText => nodes.text_text,
        };
        let Some(node) = node else {
            return Ok((0.0, vec![0.0; self.trainable_count()]));
        };
        let mut grads = tape.backward(node)?;
        let flat = [vars.g, vars.h, vars.feat, vars.head]
            .into_iter()
            .flat_map(|v| grads.take(v))
            .collect();
        Ok((tape.scalar(node), flat))
    }

    pub fn flat_grad(&self, batch: &TrainBatch) -> Result<(LossBreakdown, Vec<f64>)> {
        let (b, g) = self.loss_and_grad(batch)?;
        Ok((b, g.concat()))
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut reg = |p: &ParamVec| {
            if trainable {
                tape.param_vec(p)
            } else {
                tape.constant(1, p.len(), p.values().to_vec()).expect("consistent shape")
            }
        };
        BlockVars {
            g: reg(&self.g),
            h: reg(&self.h),
            feat: reg(&self.f_traj.feat),
            head: reg(&self.f_traj.head),
        }
    }

    fn build(&self, tape: &mut Tape, vars: &BlockVars, batch: &TrainBatch) -> Result<LossNodes> {
        let cfg = &self.config;
        batch.validate(cfg.d_z, cfg.state_dim, cfg.action_dim, cfg.transition_width())?;
        let b = batch.entries.len();
        let z = tape.constant(b, cfg.d_z, batch.entries.iter().flat_map(|e| e.text.iter().copied()).collect())?;
        let zt = tape.mlp(z, vars.g, self.g.manifest())?;
        let theta = tape.mlp(zt, vars.h, self.h.manifest())?;
        let bc = bc_on_tape(tape, theta, &self.policy, batch, cfg.state_dim, cfg.action_dim)?;

        let mut nodes = LossNodes {
            bc,
            align: None,
            text_traj: None,
            text_text: None,
            total: bc,
        };
        if cfg.variant == Variant::Direct {
            return Ok(nodes);
        }
        let zx = traj_on_tape(tape, vars.feat, vars.head, &self.f_traj, batch, cfg.transition_width())?;
        let ground = match cfg.variant {
            Variant::Mse => {
                let a = align_on_tape(tape, zt, zx)?;
                nodes.align = Some(a);
                a
            }
            Variant::Contrastive => {
                if b < 2 {
                    return Err(Error::Config(format!(
                        "contrastive grounding needs at least 2 tasks per batch, got {b}"
                    )));
                }
                let tt = infonce_on_tape(tape, zt, zx, cfg.beta)?;
                let positives = if cfg.paraphrase_positive {
                    let data: Option<Vec<f64>> = batch
                        .entries
                        .iter()
                        .map(|e| e.text_positive.clone())
                        .collect::<Option<Vec<_>>>()
                        .map(|v| v.concat());
                    match data {
                        Some(d) => {
                            let zp = tape.constant(b, cfg.d_z, d)?;
                            Some(tape.mlp(zp, vars.g, self.g.manifest())?)
                        }
                        None => {
                            return Err(Error::Config(
                                "paraphrase_positive needs a second description per batch entry".into(),
                            ))
                        }
                    }
                } else {
                    None
                };
                let xx = text_text_on_tape(tape, zt, positives.unwrap_or(zt), cfg.beta)?;
                nodes.text_traj = Some(tt);
                nodes.text_text = Some(xx);
                tape.add(tt, xx)?
            }
            Variant::Direct => unreachable!(),
        };
        // with lambda_g = 0 the grounding terms are evaluated but detached
        if cfg.lambda_g > 0.0 {
            let weighted = tape.scale(ground, cfg.lambda_g);
            nodes.total = tape.add(bc, weighted)?;
        }
        Ok(nodes)
    }
}

struct BlockVars {
    g: Var,
    h: Var,
    feat: Var,
    head: Var,
}

struct LossNodes {
    bc: Var,
    align: Option<Var>,
    text_traj: Option<Var>,
    text_text: Option<Var>,
    total: Var,
}

impl LossNodes {
    fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| tape.scalar(v)).unwrap_or(0.0);
        LossBreakdown {
            total: tape.scalar(self.total),
            bc: tape.scalar(self.bc),
            align: get(self.align),
            text_traj: get(self.text_traj),
            text_text: get(self.text_text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Total,
    Bc,
    Align,
    TextTraj,
    TextText,
}

impl LossTerm {
    pub fn of(self, b: &LossBreakdown) -> f64 {
        match self {
            LossTerm::Total => b.total,
            LossTerm::Bc => b.bc,
            LossTerm::Align => b.align,
            LossTerm::TextTraj => b.text_traj,
            LossTerm::TextText => b.text_text,
        }
    }
}

/// Scalar loss and its terms; absent terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bc: f64,
    pub align: f64,
    pub text_traj: f64,
    pub text_text: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.bc, self.align, self.text_traj, self.text_text]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// One task's slice of a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub task_id: u32,
    /// Raw text embedding `z_d`.
    pub text: Vec<f64>,
    /// A second description of the same task, used only with
    /// `paraphrase_positive`.
    pub text_positive: Option<Vec<f64>>,
    /// `n x state_dim`, row-major.
    pub states: Vec<f64>,
    /// `n x action_dim`, row-major.
    pub actions: Vec<f64>,
    /// Grounding trajectory as rows of transition features.
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub entries: Vec<BatchEntry>,
}

impl TrainBatch {
    pub fn validate(&self, d_z: usize, sd: usize, ad: usize, width: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.task_id) {
                return Err(Error::Input(format!("task {} appears twice in a batch", e.task_id)));
            }
            if e.text.len() != d_z {
                return Err(Error::shape("batch text embedding", d_z, e.text.len()));
            }
            if let Some(p) = &e.text_positive {
                if p.len() != d_z {
                    return Err(Error::shape("batch positive embedding", d_z, p.len()));
                }
            }
            let n = e.states.len() / sd;
            if n == 0 || e.states.len() != n * sd || e.actions.len() != n * ad {
                return Err(Error::shape("batch transitions", n * ad, e.actions.len()));
            }
            if e.trajectory.is_empty() || e.trajectory.len() % width != 0 {
                return Err(Error::shape("batch trajectory features", width, e.trajectory.len()));
            }
        }
        Ok(())
    }
}

pub(crate) fn bc_mse(policy: &ParamVec, transitions: &[Transition]) -> Result<f64> {
    if transitions.is_empty() {
        return Err(Error::Input("bc loss over zero transitions".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in transitions {
        let y = policy.forward(&t.state)?;
        if y.len() != t.action.len() {
            return Err(Error::shape("expert action", y.len(), t.action.len()));
        }
        for (p, a) in y.iter().zip(&t.action) {
            total += (p - a).powi(2);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over entries of per-entry BC, with entry `b` using row `b` of
/// `theta` as its policy parameters.
pub(crate) fn bc_on_tape(
    tape: &mut Tape,
    theta: Var,
    policy: &Manifest,
    batch: &TrainBatch,
    sd: usize,
    ad: usize,
) -> Result<Var> {
    let mut per = Vec::with_capacity(batch.entries.len());
    for (i, e) in batch.entries.iter().enumerate() {
        let n = e.states.len() / sd;
        let th = tape.row(theta, i)?;
        let x = tape.constant(n, sd, e.states.clone())?;
        let y = tape.mlp(x, th, policy)?;
        let a = tape.constant(n, ad, e.actions.clone())?;
        let d = tape.sub(y, a)?;
        let sq = tape.square(d);
        per.push(tape.mean(sq));
    }
    let stacked = tape.stack_rows(&per)?;
    Ok(tape.mean(stacked))
}

/// `B x d_e` trajectory embeddings of every entry's grounding trajectory.
pub(crate) fn traj_on_tape(
    tape: &mut Tape,
    feat: Var,
    head: Var,
    enc: &TrajectoryEncoder,
    batch: &TrainBatch,
    width: usize,
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let t = e.trajectory.len() / width;
        let x = tape.constant(t, width, e.trajectory.clone())?;
        let f = tape.mlp(x, feat, enc.feat.manifest())?;
        pooled.push(tape.mean_rows(f)?);
    }
    let p = tape.stack_rows(&pooled)?;
    tape.mlp(p, head, enc.head.manifest())
}

fn diag_labels(b: usize) -> Vec<usize> {
    (0..b).collect()
}

pub(crate) fn align_on_tape(tape: &mut Tape, zt: Var, zx: Var) -> Result<Var> {
    let b = tape.value(zt).rows;
    let d = tape.sub(zt, zx)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / b as f64))
}

pub(crate) fn infonce_on_tape(tape: &mut Tape, zt: Var, zx: Var, beta: f64) -> Result<Var> {
    let b = tape.value(zt).rows;
    let s = tape.cosine(zt, zx)?;
    let logits = tape.scale(s, 1.0 / beta);
    let labels = diag_labels(b);
    let t2x = tape.softmax_xent(logits, &labels)?;
    let lt = tape.transpose(logits);
    let x2t = tape.softmax_xent(lt, &labels)?;
    let both = tape.add(t2x, x2t)?;
    Ok(tape.scale(both, 0.5))
}

pub(crate) fn text_text_on_tape(tape: &mut Tape, zt: Var, positives: Var, beta: f64) -> Result<Var> {
    let b = tape.value(zt).rows;
    let s = tape.cosine(zt, positives)?;
    let logits = tape.scale(s, 1.0 / beta);
    tape.softmax_xent(logits, &diag_labels(b))
}

/// In-batch grounding candidates: one `(z~_d, z_xi)` pair per distinct task.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingBatch {
    pub task_ids: Vec<u32>,
    pub text: Vec<Vec<f64>>,
    pub traj: Vec<Vec<f64>>,
}

impl GroundingBatch {
    pub fn new(task_ids: Vec<u32>, text: Vec<Vec<f64>>, traj: Vec<Vec<f64>>) -> Result<Self> {
        if task_ids.len() != text.len() || text.len() != traj.len() {
            return Err(Error::shape("grounding batch entries", task_ids.len(), text.len().min(traj.len())));
        }
        let unique: HashSet<u32> = task_ids.iter().copied().collect();
        if unique.len() != task_ids.len() {
            return Err(Error::Input("grounding batch has duplicated task ids".into()));
        }
        let d = text.first().map_or(0, Vec::len);
        for v in text.iter().chain(&traj) {
            if v.len() != d {
                return Err(Error::shape("grounding embedding", d, v.len()));
            }
        }
        Ok(Self { task_ids, text, traj })
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    fn dim(&self) -> usize {
        self.text.first().map_or(0, Vec::len)
    }

    fn require_negatives(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Config(format!(
                "contrastive loss needs a batch of at least 2, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn constant_rows(tape: &mut Tape, rows: &[Vec<f64>], d: usize) -> Result<Var> {
    tape.constant(rows.len(), d, rows.concat())
}

/// Mean over pairs of the squared L2 distance.
pub fn mse_align_loss(text: &[Vec<f64>], traj: &[Vec<f64>]) -> Result<f64> {
    if text.len() != traj.len() {
        return Err(Error::shape("alignment batch", text.len(), traj.len()));
    }
    if text.is_empty() {
        return Err(Error::Input("alignment over an empty batch".into()));
    }
    let mut total = 0.0;
    for (a, b) in text.iter().zip(traj) {
        if a.len() != b.len() {
            return Err(Error::shape("alignment pair", a.len(), b.len()));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / text.len() as f64)
}

/// Symmetric InfoNCE over cosine similarity / `beta`.
pub fn infonce_text_traj(batch: &GroundingBatch, beta: f64) -> Result<f64> {
    batch.require_negatives()?;
    let mut tape = Tape::new();
    let d = batch.dim();
    let zt = constant_rows(&mut tape, &batch.text, d)?;
    let zx = constant_rows(&mut tape, &batch.traj, d)?;
    let l = infonce_on_tape(&mut tape, zt, zx, beta)?;
    Ok(tape.scalar(l))
}

/// Text-text contrastive term; the positive is each entry's own embedding.
pub fn text_text_loss(batch: &GroundingBatch, beta: f64) -> Result<f64> {
    batch.require_negatives()?;
    let mut tape = Tape::new();
    let zt = constant_rows(&mut tape, &batch.text, batch.dim())?;
    let l = text_text_on_tape(&mut tape, zt, zt, beta)?;
    Ok(tape.scalar(l))
}

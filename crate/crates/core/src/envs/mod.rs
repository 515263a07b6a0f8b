//! Synthetic language-augmented MDPs.
//!
//! Three families share one interface:
//!
//! - `PointGoal2D`: planar point mass, reach a goal in `[-1, 1]^2`.
//! - `SwitchWorld`: the same point mass with a closed behavior registry
//!   (reach a waypoint, hold the origin, oscillate along x).
//! - `VelTrack1D`: first-order velocity system, track a commanded speed.
//!
//! Dynamics are deterministic; only the initial state is random. Episodes
//! always run for exactly the task horizon.

mod describe;
mod registry;

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub use describe::{sample_description, Level};
pub use registry::{
    halton, pointgoal_registry, registry_records, switchworld_registry, task_registry,
    veltrack_ood_task, veltrack_registry, veltrack_task, RegistryKind, TaskRecord,
    VELTRACK_GRID_STEP, VELTRACK_HELDOUT, VELTRACK_OOD,
};

pub const PLANAR_HORIZON: usize = 60;
pub const VELTRACK_HORIZON: usize = 100;

pub const PLANAR_DT: f64 = 0.1;
pub const PLANAR_MAX_SPEED: f64 = 1.0;
pub const RESET_HALF_WIDTH: f64 = 0.1;

pub const VEL_DRAG: f64 = 0.95;
pub const VEL_GAIN: f64 = 0.15;
pub const VEL_REWARD_FLOOR: f64 = 4.0;

pub const REACH_RADIUS: f64 = 0.1;
pub const REACH_WINDOW: usize = 10;
pub const HOLD_RADIUS: f64 = 0.15;
pub const HOLD_WINDOW: usize = 20;
pub const OSC_SWITCH: f64 = 0.45;
pub const OSC_SPEED: f64 = 0.6;
pub const OSC_MIN_SIGN_CHANGES: usize = 2;
pub const OSC_MIN_AMPLITUDE: f64 = 0.4;
pub const VEL_BAND: f64 = 0.15;
pub const VEL_WINDOW: usize = 20;

/// Environment constants, embedded in dataset provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConstants {
    pub planar_dt: f64,
    pub planar_max_speed: f64,
    pub reset_half_width: f64,
    pub vel_drag: f64,
    pub vel_gain: f64,
    pub reach_radius: f64,
    pub reach_window: usize,
    pub hold_radius: f64,
    pub hold_window: usize,
    pub osc_switch: f64,
    pub osc_min_sign_changes: usize,
    pub osc_min_amplitude: f64,
    pub vel_band: f64,
    pub vel_window: usize,
}

impl EnvConstants {
    pub fn current() -> Self {
        Self {
            planar_dt: PLANAR_DT,
            planar_max_speed: PLANAR_MAX_SPEED,
            reset_half_width: RESET_HALF_WIDTH,
            vel_drag: VEL_DRAG,
            vel_gain: VEL_GAIN,
            reach_radius: REACH_RADIUS,
            reach_window: REACH_WINDOW,
            hold_radius: HOLD_RADIUS,
            hold_window: HOLD_WINDOW,
            osc_switch: OSC_SWITCH,
            osc_min_sign_changes: OSC_MIN_SIGN_CHANGES,
            osc_min_amplitude: OSC_MIN_AMPLITUDE,
            vel_band: VEL_BAND,
            vel_window: VEL_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    PointGoal2D,
    VelTrack1D,
    SwitchWorld,
}

impl Family {
    pub fn state_dim(self) -> usize {
        match self {
            Family::VelTrack1D => 1,
            _ => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::VelTrack1D => 1,
            _ => 2,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Family::VelTrack1D => VELTRACK_HORIZON,
            _ => PLANAR_HORIZON,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::PointGoal2D => "pointgoal2d",
            Family::VelTrack1D => "veltrack1d",
            Family::SwitchWorld => "switchworld",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pointgoal2d" | "pointgoal" => Ok(Family::PointGoal2D),
            "veltrack1d" | "veltrack" => Ok(Family::VelTrack1D),
            "switchworld" => Ok(Family::SwitchWorld),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

/// What the agent is asked to do. Planar families use `Reach`, `Hold` and
/// `Oscillate`; velocity tracking uses `Track`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Reach,
    Hold,
    Oscillate,
    Track,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub family: Family,
    pub behavior: Behavior,
    /// Goal `[x, y]`, target `[v]`, or behavior parameters.
    pub params: Vec<f64>,
    pub horizon: usize,
    pub descriptor_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task {}: {msg}", self.id)));
        if self.horizon != self.family.horizon() {
            return bad(format!("horizon {} != {}", self.horizon, self.family.horizon()));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return bad("non-finite parameter".into());
        }
        match (self.family, self.behavior) {
            (Family::VelTrack1D, Behavior::Track) => {
                let v = self.params.first().copied().unwrap_or(f64::NAN);
                if self.params.len() != 1 || !(v > 0.0 && v <= 4.0) {
                    return bad(format!("target velocity {:?} outside (0, 4]", self.params));
                }
            }
            (Family::PointGoal2D, Behavior::Reach) | (Family::SwitchWorld, _)
                if self.behavior != Behavior::Track =>
            {
                if self.params.len() != 2 || self.params.iter().any(|p| p.abs() > 1.0) {
                    return bad(format!("parameters {:?} outside [-1, 1]^2", self.params));
                }
            }
            (family, behavior) => {
                return bad(format!("behavior {behavior:?} not defined for {family}"));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.family.action_dim()
    }

    /// Goal position for reach tasks.
    pub fn goal(&self) -> Option<[f64; 2]> {
        match self.behavior {
            Behavior::Reach => Some([self.params[0], self.params[1]]),
            _ => None,
        }
    }

    pub fn target_velocity(&self) -> Option<f64> {
        match self.behavior {
            Behavior::Track => Some(self.params[0]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn width(&self) -> usize {
        self.state.len() + self.action.len() + 1 + self.next_state.len()
    }

    /// `[s ; a ; r ; s']`, the trajectory encoder's per-step input.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.width());
        self.write_features(&mut f);
        f
    }

    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.state);
        out.extend_from_slice(&self.action);
        out.push(self.reward);
        out.extend_from_slice(&self.next_state);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u32,
    pub seed: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Checks that `next_state` of each step equals `state` of the next.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Whether any action coordinate was outside `[-1, 1]`.
    pub clamped: bool,
    /// The action actually applied.
    pub action: Vec<f64>,
}

thread_local! {
    static STEP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Number of `env_step` calls made on the current thread so far.
pub fn env_steps_on_this_thread() -> u64 {
    STEP_COUNT.with(Cell::get)
}

pub fn env_reset(task: &TaskSpec, seed: u64) -> Vec<f64> {
    match task.family {
        Family::VelTrack1D => vec![0.0],
        Family::PointGoal2D | Family::SwitchWorld => {
            let mut rng = rng_for(seed, &[0x7265_7365_74]);
            let x = rng.gen_range(-RESET_HALF_WIDTH..=RESET_HALF_WIDTH);
            let y = rng.gen_range(-RESET_HALF_WIDTH..=RESET_HALF_WIDTH);
            vec![x, y, 0.0, 0.0]
        }
    }
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Advances one step. `t` is the zero-based index of this step within the
/// episode; `done` is set on the last step of the horizon.
pub fn env_step(task: &TaskSpec, state: &[f64], action: &[f64], t: usize) -> Result<StepOutcome> {
    STEP_COUNT.with(|c| c.set(c.get() + 1));
    if state.len() != task.state_dim() {
        return Err(Error::shape("environment state", task.state_dim(), state.len()));
    }
    if action.len() != task.action_dim() {
        return Err(Error::shape("environment action", task.action_dim(), action.len()));
    }
    if state.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite state {state:?}")));
    }
    if action.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite action {action:?}")));
    }
    let clamped = action.iter().any(|a| a.abs() > 1.0);
    let applied: Vec<f64> = action.iter().map(|&a| clamp_unit(a)).collect();
    let (next_state, reward) = match task.family {
        Family::VelTrack1D => {
            let v = VEL_DRAG * state[0] + VEL_GAIN * applied[0];
            let r = -(v - task.params[0]).abs().min(VEL_REWARD_FLOOR);
            (vec![v], r)
        }
        Family::PointGoal2D | Family::SwitchWorld => {
            let vx = (state[2] + PLANAR_DT * applied[0]).clamp(-PLANAR_MAX_SPEED, PLANAR_MAX_SPEED);
            let vy = (state[3] + PLANAR_DT * applied[1]).clamp(-PLANAR_MAX_SPEED, PLANAR_MAX_SPEED);
            let x = state[0] + PLANAR_DT * vx;
            let y = state[1] + PLANAR_DT * vy;
            let next = vec![x, y, vx, vy];
            let r = planar_reward(task, &next);
            (next, r)
        }
    };
    if next_state.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite next state {next_state:?}")));
    }
    Ok(StepOutcome {
        next_state,
        reward,
        done: t + 1 >= task.horizon,
        clamped,
        action: applied,
    })
}

const PLANAR_REWARD_FLOOR: f64 = 2.0 * std::f64::consts::SQRT_2;

fn planar_reward(task: &TaskSpec, s: &[f64]) -> f64 {
    let (x, y, vx) = (s[0], s[1], s[2]);
    let r = match task.behavior {
        Behavior::Reach => ((x - task.params[0]).powi(2) + (y - task.params[1]).powi(2)).sqrt(),
        Behavior::Hold => (x * x + y * y).sqrt(),
        // track the shuttle speed along x while staying on the axis
        Behavior::Oscillate => (vx.abs() - OSC_SPEED).abs() + y.abs(),
        Behavior::Track => unreachable!("validated task"),
    };
    -r.min(PLANAR_REWARD_FLOOR)
}

/// Number of sign changes in `xs`, skipping exact zeros.
pub fn sign_changes(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut last = 0.0f64;
    let mut n = 0;
    for x in xs {
        if x == 0.0 {
            continue;
        }
        if last != 0.0 && (x > 0.0) != (last > 0.0) {
            n += 1;
        }
        last = x;
    }
    n
}

/// Mean velocity over the last `VEL_WINDOW` steps.
pub fn achieved_velocity(traj: &Trajectory) -> f64 {
    let n = traj.transitions.len().min(VEL_WINDOW).max(1);
    traj.transitions
        .iter()
        .rev()
        .take(n)
        .map(|t| t.next_state[0])
        .sum::<f64>()
        / n as f64
}

pub fn success(task: &TaskSpec, traj: &Trajectory) -> bool {
    if traj.transitions.is_empty() {
        return false;
    }
    let tail = |k: usize| {
        let n = traj.transitions.len();
        &traj.transitions[n.saturating_sub(k)..]
    };
    match task.behavior {
        Behavior::Reach => {
            let (gx, gy) = (task.params[0], task.params[1]);
            tail(REACH_WINDOW).iter().any(|t| {
                let s = &t.next_state;
                ((s[0] - gx).powi(2) + (s[1] - gy).powi(2)).sqrt() < REACH_RADIUS
            })
        }
        Behavior::Hold => {
            traj.transitions.len() >= HOLD_WINDOW
                && tail(HOLD_WINDOW)
                    .iter()
                    .all(|t| (t.next_state[0].powi(2) + t.next_state[1].powi(2)).sqrt() < HOLD_RADIUS)
        }
        Behavior::Oscillate => {
            let xs = std::iter::once(traj.transitions[0].state[0])
                .chain(traj.transitions.iter().map(|t| t.next_state[0]));
            let amplitude = traj
                .transitions
                .iter()
                .map(|t| t.next_state[0].abs())
                .fold(0.0, f64::max);
            sign_changes(xs) >= OSC_MIN_SIGN_CHANGES && amplitude >= OSC_MIN_AMPLITUDE
        }
        Behavior::Track => (achieved_velocity(traj) - task.params[0]).abs() < VEL_BAND,
    }
}

/// Runs one closed-loop episode. `policy` writes an action for the given
/// state into its output buffer.
pub fn rollout<P>(task: &TaskSpec, seed: u64, mut policy: P) -> Result<Trajectory>
where
    P: FnMut(&[f64], &mut [f64]),
{
    let mut state = env_reset(task, seed);
    let mut action = vec![0.0; task.action_dim()];
    let mut transitions = Vec::with_capacity(task.horizon);
    for t in 0..task.horizon {
        policy(&state, &mut action);
        let out = env_step(task, &state, &action, t)?;
        transitions.push(Transition {
            state: std::mem::take(&mut state),
            action: out.action,
            reward: out.reward,
            next_state: out.next_state.clone(),
        });
        state = out.next_state;
    }
    Ok(Trajectory {
        task_id: task.id,
        seed,
        transitions,
    })
}

/// Re-executes the stored actions from the stored initial state.
pub fn replay(task: &TaskSpec, traj: &Trajectory) -> Result<Trajectory> {
    let Some(first) = traj.transitions.first() else {
        return Ok(traj.clone());
    };
    let mut state = first.state.clone();
    let mut transitions = Vec::with_capacity(traj.transitions.len());
    for (t, tr) in traj.transitions.iter().enumerate() {
        let out = env_step(task, &state, &tr.action, t)?;
        transitions.push(Transition {
            state: std::mem::take(&mut state),
            action: out.action,
            reward: out.reward,
            next_state: out.next_state.clone(),
        });
        state = out.next_state;
    }
    Ok(Trajectory {
        task_id: traj.task_id,
        seed: traj.seed,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vel(target: f64) -> TaskSpec {
        veltrack_task(0, target, 0)
    }

    fn reach(gx: f64, gy: f64) -> TaskSpec {
        TaskSpec {
            id: 0,
            family: Family::PointGoal2D,
            behavior: Behavior::Reach,
            params: vec![gx, gy],
            horizon: PLANAR_HORIZON,
            descriptor_seed: 0,
        }
    }

    #[test]
    fn veltrack_reset_is_zero() {
        for seed in [0, 1, 99] {
            assert_eq!(env_reset(&vel(1.0), seed), vec![0.0]);
        }
    }

    #[test]
    fn planar_reset_support_and_determinism() {
        let task = reach(0.8, 0.8);
        assert_eq!(env_reset(&task, 0), env_reset(&task, 0));
        for seed in 0..1000 {
            let s = env_reset(&task, seed);
            assert!(s[0].abs() <= 0.1 && s[1].abs() <= 0.1);
            assert_eq!(&s[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn veltrack_exact_tracking_reward() {
        let task = vel(1.2);
        // v' = drag * v + gain * a = 1.2 when a = (1.2 - drag * 1.2) / gain
        let a = (1.2 - VEL_DRAG * 1.2) / VEL_GAIN;
        let out = env_step(&task, &[1.2], &[a], 0).unwrap();
        assert!((out.next_state[0] - 1.2).abs() < 1e-12);
        assert!(out.reward.abs() < 1e-12);
    }

    #[test]
    fn veltrack_reward_at_rest() {
        let task = vel(3.5);
        let out = env_step(&task, &[0.0], &[0.0], 0).unwrap();
        assert_eq!(out.next_state, vec![0.0]);
        assert_eq!(out.reward, -3.5);
    }

    #[test]
    fn veltrack_saturates_at_three() {
        let task = vel(3.5);
        let mut v = vec![0.0];
        for t in 0..400 {
            v = env_step(&task, &v, &[1.0], t).unwrap().next_state;
        }
        assert!((v[0] - 3.0).abs() < 0.01, "{}", v[0]);
    }

    #[test]
    fn clamp_flag_and_applied_action() {
        let out = env_step(&reach(0.5, 0.5), &[0.0; 4], &[2.0, -0.5], 0).unwrap();
        assert!(out.clamped);
        assert_eq!(out.action, vec![1.0, -0.5]);
        let out = env_step(&reach(0.5, 0.5), &[0.0; 4], &[1.0, -0.5], 0).unwrap();
        assert!(!out.clamped);
    }

    #[test]
    fn non_finite_state_is_numeric_error() {
        let err = env_step(&reach(0.5, 0.5), &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0], 0);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn done_exactly_at_horizon() {
        let task = reach(0.2, 0.2);
        let traj = rollout(&task, 3, |_, a| a.fill(0.0)).unwrap();
        assert_eq!(traj.len(), PLANAR_HORIZON);
        assert!(traj.is_chained());
        assert!(!env_step(&task, &[0.0; 4], &[0.0; 2], PLANAR_HORIZON - 2).unwrap().done);
        assert!(env_step(&task, &[0.0; 4], &[0.0; 2], PLANAR_HORIZON - 1).unwrap().done);
    }

    #[test]
    fn trajectory_parked_on_goal_succeeds() {
        let task = reach(0.3, -0.4);
        let traj = Trajectory {
            task_id: 0,
            seed: 0,
            transitions: (0..10)
                .map(|_| Transition {
                    state: vec![0.3, -0.4, 0.0, 0.0],
                    action: vec![0.0, 0.0],
                    reward: 0.0,
                    next_state: vec![0.3, -0.4, 0.0, 0.0],
                })
                .collect(),
        };
        assert!(success(&task, &traj));
    }

    #[test]
    fn zero_actions_do_not_reach_far_goal() {
        let task = reach(0.8, 0.8);
        let traj = rollout(&task, 0, |_, a| a.fill(0.0)).unwrap();
        assert!(!success(&task, &traj));
    }

    #[test]
    fn sign_changes_skip_zeros() {
        assert_eq!(sign_changes([1.0, 0.0, -1.0, -2.0, 0.0, 3.0]), 2);
        assert_eq!(sign_changes([0.0, 0.0]), 0);
    }

    #[test]
    fn rewards_are_bounded() {
        let far = reach(1.0, 1.0);
        let out = env_step(&far, &[-50.0, -50.0, 0.0, 0.0], &[0.0, 0.0], 0).unwrap();
        assert!((out.reward + 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let v = vel(0.1);
        let out = env_step(&v, &[-40.0], &[-1.0], 0).unwrap();
        assert_eq!(out.reward, -4.0);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let mut t = vel(1.0);
        t.params = vec![4.5];
        assert!(t.validate().is_err());
        let mut r = reach(0.5, 0.5);
        r.params = vec![1.5, 0.0];
        assert!(r.validate().is_err());
        r.params = vec![0.5, 0.0];
        r.horizon = 10;
        assert!(r.validate().is_err());
    }
}

//! Scripted experts. All are stateless functions of the current state.

use crate::envs::{Behavior, TaskSpec, OSC_SPEED, OSC_SWITCH, VEL_DRAG, VEL_GAIN};

pub const EXPERT_VERSION: u32 = 1;

pub const REACH_KP: f64 = 4.0;
pub const REACH_KD: f64 = 2.0;
pub const TRACK_KP: f64 = 8.0;
pub const OSC_KV: f64 = 4.0;

fn pd(target: f64, pos: f64, vel: f64) -> f64 {
    (REACH_KP * (target - pos) - REACH_KD * vel).clamp(-1.0, 1.0)
}

/// Writes the expert action for `state` into `out`.
pub fn expert_action_into(task: &TaskSpec, state: &[f64], out: &mut [f64]) {
    match task.behavior {
        Behavior::Track => {
            let target = task.params[0];
            // feedforward holds the target at steady state; the P term corrects
            let trim = target * (1.0 - VEL_DRAG) / VEL_GAIN;
            out[0] = (TRACK_KP * (target - state[0]) + trim).clamp(-1.0, 1.0);
        }
        Behavior::Reach => {
            out[0] = pd(task.params[0], state[0], state[2]);
            out[1] = pd(task.params[1], state[1], state[3]);
        }
        Behavior::Hold => {
            out[0] = pd(0.0, state[0], state[2]);
            out[1] = pd(0.0, state[1], state[3]);
        }
        Behavior::Oscillate => {
            let (x, vx) = (state[0], state[2]);
            let dir = if x >= OSC_SWITCH {
                -1.0
            } else if x <= -OSC_SWITCH {
                1.0
            } else if vx >= 0.0 {
                1.0
            } else {
                -1.0
            };
            out[0] = (OSC_KV * (dir * OSC_SPEED - vx)).clamp(-1.0, 1.0);
            out[1] = pd(0.0, state[1], state[3]);
        }
    }
}

pub fn expert_action(task: &TaskSpec, state: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; task.action_dim()];
    expert_action_into(task, state, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{
        achieved_velocity, rollout, success, switchworld_registry, veltrack_registry,
        veltrack_task, VELTRACK_HELDOUT,
    };

    #[test]
    fn pd_fixed_point() {
        let sw = switchworld_registry(10, 0).unwrap();
        let g = sw[1].goal().unwrap();
        assert_eq!(expert_action(&sw[1], &[g[0], g[1], 0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn velocity_fixed_point_is_hold_action() {
        let t = veltrack_task(0, 1.2, 0);
        let a = expert_action(&t, &[1.2]);
        assert!((VEL_DRAG * 1.2 + VEL_GAIN * a[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn expert_tracks_every_grid_target_closely() {
        for t in veltrack_registry(0) {
            let traj = rollout(&t, 0, |s, a| expert_action_into(&t, s, a)).unwrap();
            let err = (achieved_velocity(&traj) - t.params[0]).abs();
            assert!(err < 0.05, "target {} err {err}", t.params[0]);
        }
        for v in VELTRACK_HELDOUT {
            let t = veltrack_task(0, v, 0);
            let traj = rollout(&t, 0, |s, a| expert_action_into(&t, s, a)).unwrap();
            assert!(success(&t, &traj));
        }
    }

    #[test]
    fn target_point_six_succeeds_every_rollout() {
        let t = veltrack_task(0, 0.6, 0);
        for seed in 0..50 {
            let traj = rollout(&t, seed, |s, a| expert_action_into(&t, s, a)).unwrap();
            assert!(success(&t, &traj));
        }
    }
}

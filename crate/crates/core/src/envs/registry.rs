use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_description, Behavior, Family, Level, TaskSpec, OSC_SWITCH};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

pub const VELTRACK_GRID_STEP: f64 = 0.075;
pub const VELTRACK_GRID_LEN: usize = 40;
pub const VELTRACK_HELDOUT: [f64; 5] = [0.225, 0.6, 1.2, 1.8, 2.025];
pub const VELTRACK_OOD: f64 = 3.5;
pub const COMPASS_RADIUS: f64 = 0.8;
pub const GOAL_EXTENT: f64 = 0.9;

/// Rounds to the three decimals used in descriptions, so the numbers in the
/// text are exactly the task parameters.
pub(crate) fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0 + 0.0
}

pub fn veltrack_task(id: u32, target: f64, seed: u64) -> TaskSpec {
    TaskSpec {
        id,
        family: Family::VelTrack1D,
        behavior: Behavior::Track,
        params: vec![round3(target)],
        horizon: Family::VelTrack1D.horizon(),
        descriptor_seed: derive_seed(seed, &[id as u64]),
    }
}

/// The out-of-range command, kept out of the grid registry.
pub fn veltrack_ood_task(id: u32, seed: u64) -> TaskSpec {
    veltrack_task(id, VELTRACK_OOD, seed)
}

/// Targets `0.075, 0.150, ..., 3.000`.
pub fn veltrack_registry(seed: u64) -> Vec<TaskSpec> {
    (1..=VELTRACK_GRID_LEN)
        .map(|k| veltrack_task(k as u32 - 1, k as f64 * VELTRACK_GRID_STEP, seed))
        .collect()
}

fn planar(id: u32, family: Family, behavior: Behavior, params: [f64; 2], seed: u64) -> TaskSpec {
    TaskSpec {
        id,
        family,
        behavior,
        params: params.iter().map(|&p| round3(p)).collect(),
        horizon: family.horizon(),
        descriptor_seed: derive_seed(seed, &[id as u64]),
    }
}

/// `count` is 10 (compass waypoints) or 50 (7x7 grid minus origin); both end
/// with hold-origin and oscillate-x.
pub fn switchworld_registry(count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let goals: Vec<[f64; 2]> = match count {
        10 => (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                [COMPASS_RADIUS * a.cos(), COMPASS_RADIUS * a.sin()]
            })
            .collect(),
        50 => {
            let ticks: Vec<f64> = (0..7).map(|i| -GOAL_EXTENT + 0.3 * i as f64).collect();
            let mut g = Vec::with_capacity(48);
            for &y in &ticks {
                for &x in &ticks {
                    if round3(x) != 0.0 || round3(y) != 0.0 {
                        g.push([x, y]);
                    }
                }
            }
            g
        }
        other => {
            return Err(Error::Config(format!(
                "SwitchWorld registry has 10 or 50 tasks, not {other}"
            )))
        }
    };
    let mut tasks: Vec<TaskSpec> = goals
        .iter()
        .enumerate()
        .map(|(i, &g)| planar(i as u32, Family::SwitchWorld, Behavior::Reach, g, seed))
        .collect();
    let n = tasks.len() as u32;
    tasks.push(planar(n, Family::SwitchWorld, Behavior::Hold, [0.0, 0.0], seed));
    tasks.push(planar(
        n + 1,
        Family::SwitchWorld,
        Behavior::Oscillate,
        [-OSC_SWITCH, OSC_SWITCH],
        seed,
    ));
    Ok(tasks)
}

/// Radical inverse of `index` in `base`.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Halton (2, 3) points with a seeded random shift modulo 1, mapped onto
/// `[-0.9, 0.9]^2`.
pub fn pointgoal_registry(count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::Config("PointGoal2D registry needs at least one task".into()));
    }
    let mut rng = rng_for(seed, &[0x6861_6c74]);
    let shift: [f64; 2] = [rng.gen(), rng.gen()];
    let tasks = (0..count)
        .map(|i| {
            let u = (halton(i as u64 + 1, 2) + shift[0]).fract();
            let v = (halton(i as u64 + 1, 3) + shift[1]).fract();
            let g = [GOAL_EXTENT * (2.0 * u - 1.0), GOAL_EXTENT * (2.0 * v - 1.0)];
            planar(i as u32, Family::PointGoal2D, Behavior::Reach, g, seed)
        })
        .collect();
    Ok(tasks)
}

pub fn task_registry(family: Family, count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::Config("registry count must be at least 1".into()));
    }
    match family {
        Family::VelTrack1D if count == VELTRACK_GRID_LEN => Ok(veltrack_registry(seed)),
        Family::VelTrack1D => Err(Error::Config(format!(
            "VelTrack1D registry has exactly {VELTRACK_GRID_LEN} grid targets, not {count}"
        ))),
        Family::SwitchWorld => switchworld_registry(count, seed),
        Family::PointGoal2D => pointgoal_registry(count, seed),
    }
}

/// Named registries accepted on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RegistryKind {
    VelTrack,
    SwitchWorld10,
    SwitchWorld50,
    PointGoal2D(usize),
}

impl RegistryKind {
    pub fn family(self) -> Family {
        match self {
            RegistryKind::VelTrack => Family::VelTrack1D,
            RegistryKind::SwitchWorld10 | RegistryKind::SwitchWorld50 => Family::SwitchWorld,
            RegistryKind::PointGoal2D(_) => Family::PointGoal2D,
        }
    }

    pub fn count(self) -> usize {
        match self {
            RegistryKind::VelTrack => VELTRACK_GRID_LEN,
            RegistryKind::SwitchWorld10 => 10,
            RegistryKind::SwitchWorld50 => 50,
            RegistryKind::PointGoal2D(n) => n,
        }
    }

    pub fn build(self, seed: u64) -> Result<Vec<TaskSpec>> {
        task_registry(self.family(), self.count(), seed)
    }
}

impl fmt::Display for RegistryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegistryKind::VelTrack => f.write_str("veltrack"),
            RegistryKind::SwitchWorld10 => f.write_str("switchworld10"),
            RegistryKind::SwitchWorld50 => f.write_str("switchworld50"),
            RegistryKind::PointGoal2D(n) => write!(f, "pointgoal2d-{n}"),
        }
    }
}

impl FromStr for RegistryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "veltrack" | "veltrack1d" => return Ok(RegistryKind::VelTrack),
            "switchworld10" | "switchworld-10" => return Ok(RegistryKind::SwitchWorld10),
            "switchworld50" | "switchworld-50" => return Ok(RegistryKind::SwitchWorld50),
            _ => {}
        }
        if let Some(n) = lower
            .strip_prefix("pointgoal2d-")
            .or_else(|| lower.strip_prefix("pointgoal2d"))
        {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad PointGoal2D size in {s:?}")))?;
            if n == 0 {
                return Err(Error::Config("PointGoal2D registry needs at least one task".into()));
            }
            return Ok(RegistryKind::PointGoal2D(n));
        }
        Err(Error::Config(format!(
            "unknown registry {s:?} (expected veltrack, switchworld10, switchworld50 or pointgoal2d-N)"
        )))
    }
}

impl TryFrom<String> for RegistryKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RegistryKind> for String {
    fn from(k: RegistryKind) -> String {
        k.to_string()
    }
}

/// JSON export row for a registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u32,
    pub family: Family,
    pub behavior: Behavior,
    pub params: Vec<f64>,
    pub horizon: usize,
    pub description: String,
}

pub fn registry_records(tasks: &[TaskSpec]) -> Vec<TaskRecord> {
    tasks
        .iter()
        .map(|t| TaskRecord {
            id: t.id,
            family: t.family,
            behavior: t.behavior,
            params: t.params.clone(),
            horizon: t.horizon,
            description: sample_description(t, Level::L0, 0),
        })
        .collect()
}

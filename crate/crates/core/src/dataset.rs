//! Offline datasets: expert gate, generation, task splits and the on-disk
//! directory format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json                  tasks, seeds, K, M, levels, provenance, blob digests
//! task_00000.bin                 trajectories of task 0 (little-endian)
//! task_00000.descriptions.json   {"L0": [...], "L1": [...], ...}
//! ...
//! ```
//!
//! A trajectory blob is the magic `TNTTRAJ1`, then `u32` trajectory count,
//! `u32` state dim, `u32` action dim, then per trajectory a `u64` reset seed,
//! a `u32` length and `length` rows of `state, action, reward, next_state`
//! as `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{
    rollout, sample_description, success, EnvConstants, Family, Level, TaskSpec, Trajectory,
    Transition, VELTRACK_HELDOUT,
};
use crate::error::{Error, Result};
use crate::experts::{expert_action_into, EXPERT_VERSION};
use crate::seed::{derive_seed, rng_for};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 20;
pub const DEFAULT_M: usize = 10;
pub const GATE_ROLLOUTS: usize = 50;
pub const GATE_THRESHOLD: f64 = 0.95;
pub const DEFAULT_HOLDOUT: f64 = 0.1;

const BLOB_MAGIC: &[u8; 8] = b"TNTTRAJ1";
const TAG_GATE: u64 = 0x6761_7465;
const TAG_DEMO: u64 = 0x6465_6d6f;
const TAG_DESC: u64 = 0x6465_7363;

/// Expert success rate on one task over `n` seeded rollouts.
pub fn expert_success_rate(task: &TaskSpec, n: usize, seed: u64) -> Result<f64> {
    let mut ok = 0;
    for k in 0..n {
        let s = derive_seed(seed, &[TAG_GATE, task.id as u64, k as u64]);
        let traj = rollout(task, s, |st, a| expert_action_into(task, st, a))?;
        ok += success(task, &traj) as usize;
    }
    Ok(ok as f64 / n.max(1) as f64)
}

/// Fails with the list of `(task id, success rate)` below the threshold.
pub fn expert_gate(tasks: &[TaskSpec], seed: u64) -> Result<Vec<f64>> {
    let rates = tasks
        .par_iter()
        .map(|t| expert_success_rate(t, GATE_ROLLOUTS, seed))
        .collect::<Result<Vec<f64>>>()?;
    let failing: Vec<(u32, f64)> = tasks
        .iter()
        .zip(&rates)
        .filter(|(_, &r)| r < GATE_THRESHOLD)
        .map(|(t, &r)| (t.id, r))
        .collect();
    if failing.is_empty() {
        Ok(rates)
    } else {
        Err(Error::ExpertGate { failing })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub expert_version: u32,
    pub env: EnvConstants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: TaskSpec,
    pub trajectories: Vec<Trajectory>,
    pub descriptions: BTreeMap<Level, Vec<String>>,
}

impl TaskData {
    pub fn descriptions(&self, level: Level) -> &[String] {
        self.descriptions.get(&level).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub levels: Vec<Level>,
    pub provenance: Provenance,
    pub tasks: Vec<TaskData>,
}

impl OfflineDataset {
    pub fn task(&self, id: u32) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.task.id == id)
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    pub fn trajectory_count(&self) -> usize {
        self.tasks.iter().map(|t| t.trajectories.len()).sum()
    }

    pub fn description_count(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.descriptions.values())
            .map(Vec::len)
            .sum()
    }

    pub fn summary(&self) -> Vec<TaskSummary> {
        self.tasks
            .iter()
            .map(|t| {
                let n = t.trajectories.len().max(1) as f64;
                TaskSummary {
                    task_id: t.task.id,
                    trajectories: t.trajectories.len(),
                    transitions: t.trajectories.iter().map(Trajectory::len).sum(),
                    mean_return: t.trajectories.iter().map(Trajectory::episode_return).sum::<f64>() / n,
                }
            })
            .collect()
    }

    /// Only the listed tasks, in the listed order.
    pub fn subset(&self, ids: &[u32]) -> Result<OfflineDataset> {
        let tasks = ids
            .iter()
            .map(|&id| {
                self.task(id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("task {id} is not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OfflineDataset {
            tasks,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> OfflineDataset {
        OfflineDataset {
            seed: self.seed,
            k: self.k,
            m: self.m,
            levels: self.levels.clone(),
            provenance: self.provenance.clone(),
            tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: u32,
    pub trajectories: usize,
    pub transitions: usize,
    pub mean_return: f64,
}

pub fn generate_dataset(
    tasks: &[TaskSpec],
    k: usize,
    m: usize,
    levels: &[Level],
    seed: u64,
) -> Result<OfflineDataset> {
    if k == 0 || m == 0 {
        return Err(Error::Config("K and M must both be at least 1".into()));
    }
    if levels.is_empty() {
        return Err(Error::Config("at least one description level is required".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to generate".into()));
    }
    for t in tasks {
        t.validate()?;
    }
    expert_gate(tasks, seed)?;
    let data = tasks
        .par_iter()
        .map(|task| -> Result<TaskData> {
            let trajectories = (0..k)
                .map(|i| {
                    let s = derive_seed(seed, &[TAG_DEMO, task.id as u64, i as u64]);
                    rollout(task, s, |st, a| expert_action_into(task, st, a))
                })
                .collect::<Result<Vec<_>>>()?;
            let descriptions = levels
                .iter()
                .map(|&level| {
                    let texts = (0..m)
                        .map(|j| {
                            sample_description(task, level, derive_seed(seed, &[TAG_DESC, j as u64]))
                        })
                        .collect();
                    (level, texts)
                })
                .collect();
            Ok(TaskData {
                task: task.clone(),
                trajectories,
                descriptions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels = levels.to_vec();
    levels.sort();
    levels.dedup();
    Ok(OfflineDataset {
        seed,
        k,
        m,
        levels,
        provenance: Provenance {
            expert_version: EXPERT_VERSION,
            env: EnvConstants::current(),
        },
        tasks: data,
    })
}

/// Disjoint seeded split into `(train, test)`, each sorted by task id.
///
/// With no fraction, a velocity-tracking registry uses the fixed held-out
/// targets and every other family uses 10%.
pub fn split_tasks(
    tasks: &[TaskSpec],
    holdout_fraction: Option<f64>,
    seed: u64,
) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    let all_vel = !tasks.is_empty() && tasks.iter().all(|t| t.family == Family::VelTrack1D);
    let (mut train, mut test): (Vec<TaskSpec>, Vec<TaskSpec>) = match holdout_fraction {
        None if all_vel => tasks
            .iter()
            .cloned()
            .partition(|t| !VELTRACK_HELDOUT.contains(&t.params[0])),
        _ => {
            let f = holdout_fraction.unwrap_or(DEFAULT_HOLDOUT);
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("holdout fraction {f} not in (0, 1)")));
            }
            let n = tasks.len();
            let n_test = ((n as f64 * f).round() as usize).max(1);
            if n_test >= n {
                return Err(Error::Config(format!(
                    "split of {n} tasks at {f} leaves no training tasks"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(seed, &[0x73706c74]));
            let test_idx: std::collections::HashSet<usize> = order[..n_test].iter().copied().collect();
            let (a, b): (Vec<_>, Vec<_>) = tasks.iter().enumerate().partition(|(i, _)| !test_idx.contains(i));
            (
                a.into_iter().map(|(_, t)| t.clone()).collect(),
                b.into_iter().map(|(_, t)| t.clone()).collect(),
            )
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("split leaves an empty side".into()));
    }
    train.sort_by_key(|t| t.id);
    test.sort_by_key(|t| t.id);
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub registry: String,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub levels: Vec<Level>,
    pub provenance: Provenance,
    pub tasks: Vec<TaskSpec>,
    /// sha256 hex of each task's trajectory blob, keyed by task id.
    pub blob_sha256: BTreeMap<u32, String>,
    pub config_hash: String,
}

fn blob_name(id: u32) -> String {
    format!("task_{id:05}.bin")
}

fn desc_name(id: u32) -> String {
    format!("task_{id:05}.descriptions.json")
}

pub fn encode_trajectories(trajs: &[Trajectory], state_dim: usize, action_dim: usize) -> Vec<u8> {
    let row = 2 * state_dim + action_dim + 1;
    let n: usize = trajs.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(20 + trajs.len() * 12 + n * row * 8);
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&(trajs.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(state_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(action_dim as u32).to_le_bytes());
    for t in trajs {
        buf.extend_from_slice(&t.seed.to_le_bytes());
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for tr in &t.transitions {
            for x in tr.state.iter().chain(&tr.action).chain(std::iter::once(&tr.reward)).chain(&tr.next_state) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated blob"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_trajectories(bytes: &[u8], task_id: u32, path: &Path) -> Result<Vec<Trajectory>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != BLOB_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let n = c.u32()? as usize;
    let sd = c.u32()? as usize;
    let ad = c.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = c.u64()?;
        let len = c.u32()? as usize;
        let mut transitions = Vec::with_capacity(len);
        for _ in 0..len {
            let state = c.f64s(sd)?;
            let action = c.f64s(ad)?;
            let reward = c.f64s(1)?[0];
            let next_state = c.f64s(sd)?;
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
            });
        }
        out.push(Trajectory {
            task_id,
            seed,
            transitions,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the dataset directory. Refuses a non-empty target unless `force`.
pub fn save_dataset(
    ds: &OfflineDataset,
    dir: &Path,
    registry: &str,
    config_hash: &str,
    force: bool,
) -> Result<DatasetManifest> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    let mut blob_sha256 = BTreeMap::new();
    for td in &ds.tasks {
        let blob = encode_trajectories(&td.trajectories, td.task.state_dim(), td.task.action_dim());
        blob_sha256.insert(td.task.id, sha256_hex(&blob));
        fs::write(dir.join(blob_name(td.task.id)), &blob)?;
        let desc: BTreeMap<String, &Vec<String>> = td
            .descriptions
            .iter()
            .map(|(l, v)| (l.to_string(), v))
            .collect();
        fs::write(dir.join(desc_name(td.task.id)), serde_json::to_vec_pretty(&desc)?)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        registry: registry.to_string(),
        seed: ds.seed,
        k: ds.k,
        m: ds.m,
        levels: ds.levels.clone(),
        provenance: ds.provenance.clone(),
        tasks: ds.task_specs(),
        blob_sha256,
        config_hash: config_hash.to_string(),
    };
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            producer: "tenet gen".into(),
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(OfflineDataset, DatasetManifest)> {
    let manifest = load_manifest(dir)?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for spec in &manifest.tasks {
        let path = dir.join(blob_name(spec.id));
        let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact {
            path: path.clone(),
            producer: "tenet gen --force".into(),
        })?;
        match manifest.blob_sha256.get(&spec.id) {
            Some(d) if *d == sha256_hex(&bytes) => {}
            _ => return Err(Error::format(&path, "digest does not match manifest")),
        }
        let trajectories = decode_trajectories(&bytes, spec.id, &path)?;
        let dpath = dir.join(desc_name(spec.id));
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_slice(&fs::read(&dpath)?)
            .map_err(|e| Error::format(&dpath, e.to_string()))?;
        let descriptions = raw
            .into_iter()
            .map(|(k, v)| Ok((k.parse::<Level>()?, v)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        tasks.push(TaskData {
            task: spec.clone(),
            trajectories,
            descriptions,
        });
    }
    let ds = OfflineDataset {
        seed: manifest.seed,
        k: manifest.k,
        m: manifest.m,
        levels: manifest.levels.clone(),
        provenance: manifest.provenance.clone(),
        tasks,
    };
    Ok((ds, manifest))
}

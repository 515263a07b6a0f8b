//! Deployed controllers and the standalone controller file.
//!
//! ```text
//! b"TENETCTL" | u32 version | u64 header length | header JSON
//! | parameters as little-endian f64
//! ```
//!
//! A controller file carries everything needed to act: the policy manifest,
//! its parameters and, for prompt-concat policies, the fixed conditioning
//! vector. No model code is required to load it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselinePolicy;
use crate::checkpoint::{put_f64s, ModelKind, Reader};
use crate::envs::TaskSpec;
use crate::error::{Error, Result};
use crate::experts::expert_action_into;
use crate::ndiff::{Activation, Manifest, MlpScratch, ParamVec};

pub const CONTROLLER_MAGIC: &[u8; 8] = b"TENETCTL";
pub const CONTROLLER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f64 or f32)"))),
        }
    }
}

/// A state-to-action map used closed-loop.
pub trait Controller: Send {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Writes the action for `state` into `out`.
    fn act(&mut self, state: &[f64], out: &mut [f64]);
    /// Parameters held by the deployed controller.
    fn param_count(&self) -> usize;
}

pub struct MlpController {
    params: ParamVec,
    scratch: MlpScratch,
}

impl MlpController {
    pub fn new(params: ParamVec) -> Self {
        let scratch = MlpScratch::for_manifest(params.manifest());
        Self { params, scratch }
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }
}

impl Controller for MlpController {
    fn state_dim(&self) -> usize {
        self.params.manifest().input_dim()
    }

    fn action_dim(&self) -> usize {
        self.params.manifest().output_dim()
    }

    #[inline]
    fn act(&mut self, state: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.params.forward_with(state, &mut self.scratch));
    }

    fn param_count(&self) -> usize {
        self.params.len()
    }
}

struct LayerF32 {
    weights: Vec<f32>,
    bias: Vec<f32>,
    input: usize,
    activation: Activation,
}

/// Single-precision copy of an MLP.
pub struct MlpControllerF32 {
    layers: Vec<LayerF32>,
    a: Vec<f32>,
    b: Vec<f32>,
    input: usize,
    output: usize,
    count: usize,
}

impl MlpControllerF32 {
    pub fn new(params: &ParamVec) -> Self {
        let m = params.manifest();
        let v = params.values();
        let layers = m
            .slots()
            .iter()
            .map(|s| LayerF32 {
                weights: v[s.weight_offset..s.bias_offset].iter().map(|&x| x as f32).collect(),
                bias: v[s.bias_offset..s.bias_offset + s.output].iter().map(|&x| x as f32).collect(),
                input: s.input,
                activation: s.activation,
            })
            .collect();
        let w = m.max_width();
        Self {
            layers,
            a: vec![0.0; w],
            b: vec![0.0; w],
            input: m.input_dim(),
            output: m.output_dim(),
            count: params.len(),
        }
    }
}

impl Controller for MlpControllerF32 {
    fn state_dim(&self) -> usize {
        self.input
    }

    fn action_dim(&self) -> usize {
        self.output
    }

    #[inline]
    fn act(&mut self, state: &[f64], out: &mut [f64]) {
        assert_eq!(state.len(), self.input, "controller state dimension");
        for (a, &s) in self.a.iter_mut().zip(state) {
            *a = s as f32;
        }
        for layer in &self.layers {
            let x = &self.a[..layer.input];
            for ((o, row), &bo) in self.b.iter_mut().zip(layer.weights.chunks_exact(layer.input)).zip(&layer.bias) {
                let mut acc = bo;
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                *o = layer.activation.apply_f32(acc);
            }
            std::mem::swap(&mut self.a, &mut self.b);
        }
        for (o, &a) in out.iter_mut().zip(&self.a[..self.output]) {
            *o = a as f64;
        }
    }

    fn param_count(&self) -> usize {
        self.count
    }
}

/// Policy on `[state ; conditioning]` with a fixed conditioning vector.
pub struct ConditionedController {
    inner: Box<dyn Controller>,
    input: Vec<f64>,
    state_dim: usize,
}

impl ConditionedController {
    pub fn new(inner: Box<dyn Controller>, conditioning: Vec<f64>) -> Result<Self> {
        let total = inner.state_dim();
        if conditioning.len() > total {
            return Err(Error::shape("conditioning vector", total, conditioning.len()));
        }
        let state_dim = total - conditioning.len();
        let mut input = vec![0.0; state_dim];
        input.extend_from_slice(&conditioning);
        Ok(Self {
            inner,
            input,
            state_dim,
        })
    }
}

impl Controller for ConditionedController {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn act(&mut self, state: &[f64], out: &mut [f64]) {
        self.input[..self.state_dim].copy_from_slice(state);
        self.inner.act(&self.input, out);
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// The scripted expert behind the controller interface.
pub struct ExpertController {
    task: TaskSpec,
}

impl ExpertController {
    pub fn new(task: TaskSpec) -> Self {
        Self { task }
    }
}

impl Controller for ExpertController {
    fn state_dim(&self) -> usize {
        self.task.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    fn act(&mut self, state: &[f64], out: &mut [f64]) {
        expert_action_into(&self.task, state, out);
    }

    fn param_count(&self) -> usize {
        0
    }
}

pub fn mlp_controller(params: ParamVec, precision: Precision) -> Box<dyn Controller> {
    match precision {
        Precision::F64 => Box::new(MlpController::new(params)),
        Precision::F32 => Box::new(MlpControllerF32::new(&params)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerHeader {
    format_version: u32,
    manifest: Manifest,
    source: ModelKind,
    config_hash: String,
    description: Option<String>,
    task_id: Option<u32>,
    conditioning: Option<Vec<f64>>,
}

/// Standalone serialized controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerFile {
    pub params: ParamVec,
    pub source: ModelKind,
    pub config_hash: String,
    /// Text the policy was instantiated from, if any.
    pub description: Option<String>,
    pub task_id: Option<u32>,
    /// Appended to the state for prompt-concat policies.
    pub conditioning: Option<Vec<f64>>,
}

impl ControllerFile {
    pub fn from_params(params: ParamVec, source: ModelKind, config_hash: &str) -> Self {
        Self {
            params,
            source,
            config_hash: config_hash.to_string(),
            description: None,
            task_id: None,
            conditioning: None,
        }
    }

    pub fn from_baseline(policy: BaselinePolicy, source: ModelKind, config_hash: &str) -> Self {
        match policy {
            BaselinePolicy::Plain(p) => Self::from_params(p, source, config_hash),
            BaselinePolicy::Conditioned { policy, conditioning } => Self {
                conditioning: Some(conditioning),
                ..Self::from_params(policy, source, config_hash)
            },
        }
    }

    /// Parameter count of the deployed controller.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn controller(&self, precision: Precision) -> Result<Box<dyn Controller>> {
        let inner = mlp_controller(self.params.clone(), precision);
        match &self.conditioning {
            None => Ok(inner),
            Some(c) => Ok(Box::new(ConditionedController::new(inner, c.clone())?)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ControllerHeader {
            format_version: CONTROLLER_VERSION,
            manifest: self.params.manifest().clone(),
            source: self.source,
            config_hash: self.config_hash.clone(),
            description: self.description.clone(),
            task_id: self.task_id,
            conditioning: self.conditioning.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.len());
        out.extend_from_slice(CONTROLLER_MAGIC);
        out.extend_from_slice(&CONTROLLER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_f64s(&mut out, self.params.values());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CONTROLLER_MAGIC {
            return Err(Error::format(path, "not a controller file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CONTROLLER_VERSION {
            return Err(Error::format(path, format!("unsupported controller version {version}")));
        }
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let h: ControllerHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        let values = r.f64s(h.manifest.param_count())?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after controller payload"));
        }
        Ok(Self {
            params: ParamVec::new(h.manifest, values)?,
            source: h.source,
            config_hash: h.config_hash,
            description: h.description,
            task_id: h.task_id,
            conditioning: h.conditioning,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "tenet instantiate --out".into(),
            });
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::policy_manifest;
    use rand::SeedableRng;

    fn params(seed: u64) -> ParamVec {
        let m = policy_manifest(4, &[64, 64], 2).unwrap();
        ParamVec::init_glorot(m, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn f32_tracks_f64() {
        let p = params(1);
        let mut a = MlpController::new(p.clone());
        let mut b = MlpControllerF32::new(&p);
        let s = [0.3, -0.2, 0.05, 0.7];
        let (mut x, mut y) = ([0.0; 2], [0.0; 2]);
        a.act(&s, &mut x);
        b.act(&s, &mut y);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-5);
        }
        assert_eq!(a.param_count(), 4610);
        assert_eq!(b.param_count(), 4610);
    }

    #[test]
    fn conditioned_controller_appends_vector() {
        let m = policy_manifest(6, &[8], 2).unwrap();
        let p = ParamVec::init_glorot(m, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let mut c = ConditionedController::new(mlp_controller(p.clone(), Precision::F64), vec![0.5, -0.5]).unwrap();
        assert_eq!(c.state_dim(), 4);
        let mut out = [0.0; 2];
        c.act(&[0.1, 0.2, 0.3, 0.4], &mut out);
        assert_eq!(out.to_vec(), p.forward(&[0.1, 0.2, 0.3, 0.4, 0.5, -0.5]).unwrap());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let mut f = ControllerFile::from_params(params(2), ModelKind::Tenet, "abc");
        f.description = Some("Hold position at the origin (0.000, 0.000).".into());
        f.task_id = Some(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ctl");
        f.save(&path).unwrap();
        let back = ControllerFile::load(&path).unwrap();
        assert_eq!(back, f);
        let bits = |p: &ParamVec| p.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&f.params));
        let bytes = f.to_bytes().unwrap();
        assert!(ControllerFile::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    }
}

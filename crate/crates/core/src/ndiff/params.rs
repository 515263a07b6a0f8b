//! Flat parameter vectors for dense networks.
//!
//! A [`ParamVec`] is a single `f64` buffer plus a [`Manifest`] describing how
//! it splits into layers. Each layer stores its weight matrix row-major with
//! shape `(output, input)`, immediately followed by its bias. The same layout
//! is used for parameters owned by a trainable network and for parameters
//! emitted by the hypernetwork, so either can be fed to the same forward code.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    #[inline]
    pub fn apply_f32(self, x: f32) -> f32 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Capability(format!("activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Where one layer lives inside a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct Manifest {
    layers: Vec<LayerSpec>,
}

impl TryFrom<Vec<LayerSpec>> for Manifest {
    type Error = Error;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        Manifest::new(layers)
    }
}

impl From<Manifest> for Vec<LayerSpec> {
    fn from(m: Manifest) -> Self {
        m.layers
    }
}

impl Manifest {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("manifest needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.input == 0 || layer.output == 0 {
                return Err(Error::Config(format!(
                    "layer {} has a zero dimension",
                    layer.name
                )));
            }
            if i > 0 && layers[i - 1].output != layer.input {
                return Err(Error::shape(
                    format!("layer {} input", layer.name),
                    layers[i - 1].output,
                    layer.input,
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Dense chain `input -> hidden... -> output`; layers are named `{prefix}.{i}`.
    pub fn mlp(
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                name: format!("{prefix}.{i}"),
                input: dims[i],
                output: dims[i + 1],
                activation: if i + 1 == n {
                    output_activation
                } else {
                    hidden_activation
                },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn max_width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.output.max(l.input))
            .max()
            .unwrap_or(0)
    }

    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let slot = LayerSlot {
                    weight_offset: offset,
                    bias_offset: offset + l.input * l.output,
                    input: l.input,
                    output: l.output,
                    activation: l.activation,
                };
                offset += l.param_count();
                slot
            })
            .collect()
    }
}

/// Scratch buffers for allocation-free repeated forward passes.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl MlpScratch {
    pub fn for_manifest(manifest: &Manifest) -> Self {
        let w = manifest.max_width();
        Self {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    manifest: Manifest,
    values: Vec<f64>,
}

impl ParamVec {
    pub fn new(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        if values.len() != manifest.param_count() {
            return Err(Error::shape(
                "parameter vector length",
                manifest.param_count(),
                values.len(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let n = manifest.param_count();
        Self {
            manifest,
            values: vec![0.0; n],
        }
    }

    /// Glorot-uniform weights, zero biases. `last_layer_scale` multiplies the
    /// bound of the final layer only.
    pub fn init_glorot<R: Rng + ?Sized>(
        manifest: Manifest,
        last_layer_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut values = vec![0.0; manifest.param_count()];
        let slots = manifest.slots();
        let last = slots.len() - 1;
        for (i, slot) in slots.iter().enumerate() {
            let mut bound = (6.0 / (slot.input + slot.output) as f64).sqrt();
            if i == last {
                bound *= last_layer_scale;
            }
            for w in &mut values[slot.weight_offset..slot.bias_offset] {
                *w = if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                };
            }
        }
        Self { manifest, values }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(self, input)
    }

    /// Forward pass reusing `scratch`; returns a view of the output.
    ///
    /// Panics if `input` does not match the manifest input dimension.
    #[inline]
    pub fn forward_with<'s>(&self, input: &[f64], scratch: &'s mut MlpScratch) -> &'s [f64] {
        forward_flat(&self.manifest, &self.values, input, scratch)
    }
}

/// Evaluates the network described by `params` on one input vector.
pub fn mlp_forward(params: &ParamVec, input: &[f64]) -> Result<Vec<f64>> {
    let first = &params.manifest.layers[0];
    if input.len() != first.input {
        return Err(Error::shape(
            format!("input of layer {}", first.name),
            first.input,
            input.len(),
        ));
    }
    let mut scratch = MlpScratch::for_manifest(&params.manifest);
    Ok(params.forward_with(input, &mut scratch).to_vec())
}

#[inline]
pub(crate) fn forward_flat<'s>(
    manifest: &Manifest,
    values: &[f64],
    input: &[f64],
    scratch: &'s mut MlpScratch,
) -> &'s [f64] {
    assert_eq!(input.len(), manifest.input_dim(), "mlp input dimension");
    let MlpScratch { a, b } = scratch;
    a[..input.len()].copy_from_slice(input);
    let mut cur_len = input.len();
    let mut offset = 0;
    for layer in &manifest.layers {
        let (n_in, n_out) = (layer.input, layer.output);
        debug_assert_eq!(cur_len, n_in);
        let w = &values[offset..offset + n_in * n_out];
        let bias = &values[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let x = &a[..n_in];
        for ((o, row), &bo) in b[..n_out].iter_mut().zip(w.chunks_exact(n_in)).zip(bias) {
            let mut acc = bo;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *o = layer.activation.apply(acc);
        }
        std::mem::swap(a, b);
        cur_len = n_out;
        offset += n_in * n_out + n_out;
    }
    &a[..cur_len]
}

//! Frozen text encoders.
//!
//! Two providers implement [`TextEncoder`]:
//!
//! - [`HashEmbedder`]: signed feature hashing of lowercase alphanumeric word
//!   tokens into the first `dim - 24` coordinates (L2-normalized), plus two
//!   12-wide numeric channels that carry up to two decimal literals as
//!   `v/4`, ten ramps `tanh 3(v - c)` and a constant 1. The top ramp sits at
//!   2, so a literal past the trained range still reads as a large value.
//! - [`EmbeddingTable`]: exact-match lookup into precomputed vectors, for
//!   plugging in embeddings produced offline by a large language model.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const NUMERIC_WIDTH: usize = 12;
const RAMP_CENTERS: [f64; NUMERIC_WIDTH - 2] = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
pub const MAX_LITERALS: usize = 2;
pub const NUMERIC_CHANNELS: usize = NUMERIC_WIDTH * MAX_LITERALS;
pub const TABLE_VERSION: u32 = 1;

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());
static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z0-9]+").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Hash,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVec {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingVec {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVec) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm()).max(1e-300)
    }
}

/// A frozen mapping from text to a fixed-dimension vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVec>;
    fn source(&self) -> EmbeddingSource;
}

/// Decimal literals in textual order.
pub fn extract_numeric_literals(text: &str) -> Vec<f64> {
    NUMBER
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .collect()
}

/// Word tokens with numeric literals removed.
pub fn word_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let stripped = NUMBER.replace_all(&lower, " ");
    TOKEN
        .find_iter(&stripped)
        .map(|m| m.as_str())
        .filter(|t| !t.bytes().all(|b| b.is_ascii_digit()))
        .map(str::to_owned)
        .collect()
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so low bits depend on every input byte
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

const HASH_SEEDS: [u64; 2] = [0x5151, 0xa7a7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < NUMERIC_CHANNELS + 16 {
            return Err(Error::Config(format!(
                "hash embedding dimension must be at least {}, got {dim}",
                NUMERIC_CHANNELS + 16
            )));
        }
        Ok(Self { dim })
    }

    pub fn word_dims(&self) -> usize {
        self.dim - NUMERIC_CHANNELS
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

pub fn encode_literal(v: f64) -> [f64; NUMERIC_WIDTH] {
    let mut out = [1.0; NUMERIC_WIDTH];
    out[0] = v / 4.0;
    for (o, c) in out[1..].iter_mut().zip(RAMP_CENTERS) {
        *o = (3.0 * (v - c)).tanh();
    }
    out
}

impl TextEncoder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::Hash
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVec> {
        if text.trim().is_empty() {
            return Err(Error::Input("cannot embed empty text".into()));
        }
        let words = self.word_dims();
        let mut values = vec![0.0; self.dim];
        for tok in word_tokens(text) {
            for seed in HASH_SEEDS {
                let h = fnv1a(seed, tok.as_bytes());
                let idx = (h % words as u64) as usize;
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                values[idx] += sign;
            }
        }
        let norm = values[..words].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            values[..words].iter_mut().for_each(|x| *x /= norm);
        }
        let literals = extract_numeric_literals(text);
        for (k, &v) in literals.iter().take(MAX_LITERALS).enumerate() {
            let start = words + k * NUMERIC_WIDTH;
            values[start..start + NUMERIC_WIDTH].copy_from_slice(&encode_literal(v));
        }
        if norm == 0.0 && literals.is_empty() {
            return Err(Error::Input(format!("text {text:?} has no tokens")));
        }
        Ok(EmbeddingVec {
            values,
            source: EmbeddingSource::Hash,
        })
    }
}

/// Trims and collapses internal whitespace runs.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    version: u32,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRecord {
    text: String,
    embedding: Vec<f64>,
}

/// Exact-match embedding lookup loaded from newline-delimited JSON.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut map: HashMap<String, Vec<f64>> = HashMap::new();
        for (text, vec) in entries {
            if vec.len() != dim {
                return Err(Error::TableLoad(format!(
                    "entry {text:?} has dimension {}, table dimension is {dim}",
                    vec.len()
                )));
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::TableLoad(format!("entry {text:?} is not finite")));
            }
            let key = normalize_whitespace(&text);
            match map.get(&key) {
                Some(prev) if prev != &vec => {
                    return Err(Error::TableLoad(format!(
                        "conflicting duplicate entries for {key:?}"
                    )))
                }
                Some(_) => {}
                None => {
                    map.insert(key, vec);
                }
            }
        }
        Ok(Self { dim, entries: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate().filter(|(_, l)| {
            l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
        });
        let header: TableHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?)
                .map_err(|e| Error::TableLoad(format!("bad header record: {e}")))?,
            None => return Err(Error::TableLoad("empty table file".into())),
        };
        if header.version != TABLE_VERSION {
            return Err(Error::TableLoad(format!(
                "unsupported table version {}",
                header.version
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let rec: TableRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::TableLoad(format!("line {}: {e}", i + 1)))?;
            records.push((rec.text, rec.embedding));
        }
        Self::from_entries(header.dim, records)
    }

    pub fn write(path: &Path, dim: usize, entries: &[(String, Vec<f64>)]) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &TableHeader {
                version: TABLE_VERSION,
                dim,
            },
        )?;
        writeln!(w)?;
        for (text, embedding) in entries {
            serde_json::to_writer(
                &mut w,
                &TableRecord {
                    text: text.clone(),
                    embedding: embedding.clone(),
                },
            )?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TextEncoder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::Table
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVec> {
        let key = normalize_whitespace(text);
        match self.entries.get(&key) {
            Some(v) => Ok(EmbeddingVec {
                values: v.clone(),
                source: EmbeddingSource::Table,
            }),
            None => Err(Error::Lookup(key)),
        }
    }
}

/// Load-time provider selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderSpec {
    Hash { dim: usize },
    Table { path: std::path::PathBuf },
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Hash { dim: DEFAULT_DIM }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        match self {
            ProviderSpec::Hash { dim } => Ok(Box::new(HashEmbedder::new(*dim)?)),
            ProviderSpec::Table { path } => Ok(Box::new(EmbeddingTable::load(path)?)),
        }
    }
}

/// Fails if two distinct texts map to the same embedding.
pub fn ensure_injective(encoder: &dyn TextEncoder, texts: &[String]) -> Result<()> {
    let mut seen: HashMap<Vec<u64>, &str> = HashMap::new();
    for text in texts {
        let e = encoder.embed(text)?;
        let key: Vec<u64> = e.values.iter().map(|x| x.to_bits()).collect();
        if let Some(prev) = seen.insert(key, text) {
            if prev != text {
                return Err(Error::Config(format!(
                    "descriptions {prev:?} and {text:?} collide in embedding space"
                )));
            }
        }
    }
    Ok(())
}

//! `LPGF` checkpoint files: magic, format version, a JSON header describing
//! each tensor, then the raw little-endian `f32` blobs.

use std::collections::BTreeMap;
use std::path::Path;

use lpgflow_core::model::{Dit, LoraAdapter, LoraPair, PromptTokens};
use lpgflow_core::numerics::Tensor;
use lpgflow_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{canonical, RunConfig};

pub const MAGIC: &[u8; 4] = b"LPGF";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Base weights, optionally bundled with an adapter or prompt tokens.
    Base,
    /// A standalone adapter.
    Lora,
    /// Standalone prompt tokens.
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: RunConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: RunConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

const PROMPT_TENSOR: &str = "prompt";

impl Checkpoint {
    pub fn new(kind: CheckpointKind, step: u64, config: RunConfig) -> Self {
        Self {
            kind,
            step,
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_base(mut self, model: &Dit) -> Self {
        for (n, t) in model.base.iter() {
            self.tensors.insert(n.to_string(), plain(t));
        }
        self
    }

    pub fn with_adapter(mut self, adapter: &LoraAdapter) -> Self {
        for (n, t) in adapter.tensors() {
            self.tensors.insert(n, plain(t));
        }
        self.meta.insert("task".into(), adapter.task.clone());
        self.meta.insert("lora_scale".into(), format!("{:?}", adapter.scale));
        self
    }

    pub fn with_prompt(mut self, prompt: &PromptTokens) -> Self {
        self.tensors.insert(PROMPT_TENSOR.into(), plain(&prompt.tokens));
        self
    }

    /// The base network stored in this file.
    pub fn model(&self) -> Result<Dit> {
        let base: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("lora.") && n.as_str() != PROMPT_TENSOR)
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        if base.is_empty() {
            return Err(Error::Contract(format!("a {:?} checkpoint holds no base weights", self.kind)));
        }
        Dit::from_tensors(self.config.model.clone(), base)
    }

    pub fn adapter(&self) -> Result<Option<LoraAdapter>> {
        let mut sites: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (n, t) in &self.tensors {
            let Some(rest) = n.strip_prefix("lora.") else { continue };
            let (site, part) = rest
                .rsplit_once('.')
                .ok_or_else(|| Error::Contract(format!("malformed adapter tensor name {n}")))?;
            let e = sites.entry(site.to_string()).or_default();
            match part {
                "a" => e.0 = Some(t.clone()),
                "b" => e.1 = Some(t.clone()),
                _ => return Err(Error::Contract(format!("malformed adapter tensor name {n}"))),
            }
        }
        if sites.is_empty() {
            return Ok(None);
        }
        let mut pairs = BTreeMap::new();
        for (site, (a, b)) in sites {
            let (Some(a), Some(b)) = (a, b) else {
                return Err(Error::Contract(format!("adapter site {site} lacks a factor")));
            };
            pairs.insert(site, LoraPair { a, b });
        }
        let scale = match self.meta.get("lora_scale") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Contract(format!("lora_scale {s:?} is not a number")))?,
            None => self.config.model.lora_scale,
        };
        let task = self.meta.get("task").cloned().unwrap_or_default();
        LoraAdapter::from_sites(task, scale, pairs).map(Some)
    }

    pub fn prompt(&self) -> Option<PromptTokens> {
        self.tensors.get(PROMPT_TENSOR).map(|t| PromptTokens { tokens: t.clone() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if !t.all_finite() {
                return Err(Error::Numeric {
                    context: format!("tensor {name} holds non-finite values"),
                    step: None,
                });
            }
            let length = (t.numel() * 4) as u64;
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = Header {
            kind: self.kind,
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = canonical(&header).into_bytes();
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Parses and checks only the header.
    pub fn read_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(path, "file is shorter than the preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(path, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = PREAMBLE
            .checked_add(usize::try_from(len).map_err(|_| corrupt(path, "header length overflows"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(path, "header runs past the end of the file"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end])
            .map_err(|e| corrupt(path, format!("header does not parse: {e}")))?;
        Ok((header, end))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, start) = Self::read_header(bytes, path)?;
        let blob = &bytes[start..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(path, format!("tensor {name} has dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != (numel * 4) as u64 {
                return Err(corrupt(path, format!("tensor {name} length disagrees with its shape")));
            }
            let stop = e
                .offset
                .checked_add(e.length)
                .filter(|&s| s <= blob.len() as u64)
                .ok_or_else(|| corrupt(path, format!("tensor {name} runs past the end of the file")))?;
            spans.push((e.offset, stop, name));
            let data = blob[e.offset as usize..stop as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(path, err.to_string()))?;
            tensors.insert(name.clone(), t);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(corrupt(path, format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let used: u64 = spans.iter().map(|s| s.1 - s.0).sum();
        if used != blob.len() as u64 {
            return Err(corrupt(path, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already consistent")
}

//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SGCKPT\0\0"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON (see `Header`)
//! payload    f32 values of every tensor listed in `header.tensors`, in order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::segmentation::ContrastiveConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
    pub n_classes: Option<usize>,
    pub rng: RngState,
    pub extractor: Option<ContrastiveConfig>,
    /// Adam step counter per parameter group.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            let t = self.tensor(&e.name)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("tensor {} shape mismatch", e.name)));
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| Error::Format("checkpoint is truncated".into()))
        };
        if take(0, 8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(take(20, hlen)?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let mut at = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = take(at, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
            at += n * 4;
        }
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

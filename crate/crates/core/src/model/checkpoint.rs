//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//! ```text
//! magic "CSSDCKPT" | u32 version | u64 step
//! u32 len | ModelConfig as JSON
//! u32 len | metadata as JSON object
//! u32 count | count x (u32 len | name | u32 ndim | ndim x u64 | f64 data)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use super::{ModelConfig, Parameters, TensorSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64) -> Self {
        Self {
            config,
            step,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_parameters(params: &Parameters, step: u64) -> Self {
        let mut ckpt = Self::new(params.config.clone(), step);
        ckpt.push_set("model", params);
        ckpt
    }

    /// Appends every tensor of `set` under `prefix.`.
    pub fn push_set(&mut self, prefix: &str, set: &impl TensorSet) {
        for (name, t) in set.tensors() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                data: t.iter().copied().collect(),
            });
        }
    }

    pub fn has_set(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    /// Overwrites every tensor of `set` from the entries under `prefix.`.
    pub fn load_set(&self, prefix: &str, set: &mut impl TensorSet) -> Result<()> {
        let index: BTreeMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, mut target) in set.tensors_mut() {
            let key = format!("{prefix}.{name}");
            let stored = index
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if stored.shape != target.shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    stored.shape,
                    target.shape()
                )));
            }
            let array = ArrayD::from_shape_vec(IxDyn(&stored.shape), stored.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
            target.assign(&array);
        }
        Ok(())
    }

    pub fn parameters(&self) -> Result<Parameters> {
        let mut params = Parameters::init(&self.config, 0)?;
        self.load_set("model", &mut params)?;
        Ok(params)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u64::<LittleEndian>(self.step)?;
        for blob in [
            serde_json::to_vec(&self.config)?,
            serde_json::to_vec(&self.metadata)?,
        ] {
            out.write_u32::<LittleEndian>(blob.len() as u32)?;
            out.write_all(&blob)?;
        }
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            out.write_u32::<LittleEndian>(t.name.len() as u32)?;
            out.write_all(t.name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in &t.data {
                out.write_f64::<LittleEndian>(x)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let step = input.read_u64::<LittleEndian>()?;
        let mut blob = || -> Result<Vec<u8>> {
            let len = input.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0; len];
            input.read_exact(&mut buf)?;
            Ok(buf)
        };
        let config: ModelConfig = serde_json::from_slice(&blob()?)?;
        let metadata = serde_json::from_slice(&blob()?)?;
        let count = input.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = input.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let ndim = input.read_u32::<LittleEndian>()?;
            let shape = (0..ndim)
                .map(|_| input.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let mut data = vec![0.0; shape.iter().product()];
            input.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            config,
            step,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

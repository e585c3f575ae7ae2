//! Model checkpoint file format, shared by pretraining and classification.
//!
//! Layout:
//!
//! ```text
//! SHLK1\n
//! config <key>=<value>\n        (one line per config entry, in written order)
//! tensor <name> <d0>x<d1>x... <byte offset>\n   (manifest, in written order)
//! data\n
//! <raw little-endian f32 values, manifest order>
//! ```
//!
//! Offsets are relative to the first byte after the `data` line. A scalar
//! tensor writes its shape as `scalar`. Values are quantized to `f32` on
//! save and widened back to `f64` on load.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SHLK1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` configuration entries.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("config key `{key}` has invalid value `{raw}`")))
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor) {
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            values: tensor.to_vec(),
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies stored values into `target`, which must already have the right
    /// shape. Values come back exactly as the `f32` the file holds.
    pub fn load_into(&self, name: &str, target: &Tensor) -> Result<()> {
        let stored = self
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if stored.shape != target.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                stored.shape,
                target.shape()
            )));
        }
        target.set_data(&stored.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.config {
            debug_assert!(!k.contains(['\n', ' ', '=']) && !v.contains('\n'));
            header.push_str(&format!("config {k}={v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims = if t.shape.is_empty() {
                "scalar".to_string()
            } else {
                t.shape
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("tensor {} {dims} {offset}\n", t.name));
            offset += t.values.len() * 4;
        }
        header.push_str("data\n");

        let mut blob = Vec::with_capacity(header.len() + offset);
        blob.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.values {
                blob.write_all(&(*v as f32).to_le_bytes())
                    .expect("writing to a Vec cannot fail");
            }
        }
        std::fs::write(path, blob).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut pos = 0usize;
        let mut next_line = |raw: &[u8]| -> Result<String> {
            let rest = &raw[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("non-utf8 header"))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };

        if next_line(&raw)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut ckpt = Checkpoint::new();
        let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let line = next_line(&raw)?;
            if line == "data" {
                break;
            } else if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad("config line without `=`"))?;
                ckpt.config.push((k.to_string(), v.to_string()));
            } else if let Some(entry) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = entry.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad("malformed tensor line"));
                }
                let shape: Vec<usize> = if parts[1] == "scalar" {
                    vec![]
                } else {
                    parts[1]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad tensor shape")))
                        .collect::<Result<_>>()?
                };
                let offset: usize = parts[2].parse().map_err(|_| bad("bad tensor offset"))?;
                manifest.push((parts[0].to_string(), shape, offset));
            } else {
                return Err(bad("unexpected header line"));
            }
        }

        let data = &raw[pos..];
        for (name, shape, offset) in manifest {
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if end > data.len() {
                return Err(bad(&format!("tensor `{name}` overruns the data section")));
            }
            let values = data[offset..end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            ckpt.tensors.push(CheckpointTensor { name, shape, values });
        }
        Ok(ckpt)
    }
}

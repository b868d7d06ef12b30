//! Named parameter registry and the binary checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! FFCKPT1
//! meta <one line of free text>
//! count <n>
//! <name> <d0>x<d1>x...      (n lines, registration order; scalars use "-")
//! end
//! <little-endian f64 payload, same order>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FFCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &str) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf, meta)
            .map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write, meta: &str) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "meta {}", meta.replace('\n', " "))?;
        writeln!(w, "count {}", self.entries.len())?;
        for p in &self.entries {
            writeln!(w, "{} {}", p.name, shape_token(p.value.shape()))?;
        }
        writeln!(w, "end")?;
        for p in &self.entries {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint into this store. Names and shapes must match the
    /// registry exactly and in order. Returns the checkpoint's meta line.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        self.read_from(&mut BufReader::new(file))
    }

    pub fn read_from(&mut self, r: &mut impl BufRead) -> Result<String> {
        let header = read_header(r)?;
        if header.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model registers {}",
                header.entries.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), p) in header.entries.iter().zip(&self.entries) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {name} {shape:?} does not match model tensor {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let mut bytes = [0u8; 8];
        for p in &mut self.entries {
            for v in p.value.data_mut() {
                r.read_exact(&mut bytes)
                    .map_err(|_| Error::Checkpoint("truncated payload".into()))?;
                *v = f64::from_le_bytes(bytes);
            }
        }
        if r.read(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(header.meta)
    }
}

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

pub struct CheckpointHeader {
    pub meta: String,
    pub entries: Vec<(String, Vec<usize>)>,
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if line.is_empty() {
        return Err(Error::Checkpoint("unexpected end of header".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

/// Parses the text header, leaving the reader at the payload.
pub fn read_header(r: &mut impl BufRead) -> Result<CheckpointHeader> {
    let magic = read_line(r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC}"
        )));
    }
    let meta = read_line(r)?
        .strip_prefix("meta ")
        .ok_or_else(|| Error::Checkpoint("missing meta line".into()))?
        .to_string();
    let count: usize = read_line(r)?
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing count line".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(r)?;
        let (name, shape) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor line {line:?}")))?;
        let shape = if shape == "-" {
            vec![]
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?
        };
        entries.push((name.to_string(), shape));
    }
    if read_line(r)? != "end" {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    Ok(CheckpointHeader { meta, entries })
}

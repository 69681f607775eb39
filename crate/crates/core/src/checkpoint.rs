//! Binary checkpoints of parameters and gates, with the architecture as JSON beside them.
//!
//! Layout: magic `PRKT`, `u32` version, `u32` record count, then per record a
//! `u32`-prefixed UTF-8 name, a dtype tag byte, a `u32` rank, `u64` dims and
//! little-endian element data. Gate records are named `gate:<name>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::new_gate;
use crate::graph::{NetworkGraph, Node, NodeId, Parameter, Placement};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PRKT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GateSpec {
    name: String,
    placement: Placement,
    filters: Vec<NodeId>,
    bns: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    trainable: bool,
}

/// Serialized architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Architecture {
    nodes: Vec<Node>,
    output: NodeId,
    params: Vec<ParamSpec>,
    gates: Vec<GateSpec>,
}

/// Path of the architecture file that accompanies `path`.
pub fn architecture_path(path: &Path) -> PathBuf {
    path.with_extension("arch.json")
}

fn push_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

/// Encodes parameters and gate values in the binary layout.
pub fn encode<T: Scalar>(graph: &NetworkGraph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = graph.params().len() + graph.gates().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in graph.params() {
        push_record(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for g in graph.gates() {
        push_record(
            &mut out,
            &format!("gate:{}", g.name),
            &[g.channels()],
            g.z(),
        );
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated file"));
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

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Decodes records as `(name, shape, data)`.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<T>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.err("record name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| r.err(format!("unknown dtype tag {tag} in `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(r.err(format!(
                "record `{name}` is {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        records.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(records)
}

/// Writes `path` (binary) and its architecture file.
pub fn save_checkpoint<T: Scalar>(graph: &NetworkGraph<T>, path: &Path) -> Result<()> {
    let arch = Architecture {
        nodes: graph.nodes().to_vec(),
        output: graph.output(),
        params: graph
            .params()
            .iter()
            .map(|p| ParamSpec {
                name: p.name.clone(),
                trainable: p.trainable,
            })
            .collect(),
        gates: graph
            .gates()
            .iter()
            .map(|g| GateSpec {
                name: g.name.clone(),
                placement: g.placement,
                filters: g.filters.clone(),
                bns: g.bns.clone(),
            })
            .collect(),
    };
    std::fs::write(path, encode(graph)).map_err(|e| Error::io(path, e))?;
    let arch_path = architecture_path(path);
    let json = serde_json::to_vec_pretty(&arch).expect("architecture serializes");
    std::fs::write(&arch_path, json).map_err(|e| Error::io(&arch_path, e))
}

/// Restores a graph saved by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<NetworkGraph<T>> {
    let arch_path = architecture_path(path);
    let json = std::fs::read(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
    let arch: Architecture = serde_json::from_slice(&json).map_err(|e| Error::Format {
        path: arch_path.clone(),
        message: e.to_string(),
    })?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode::<T>(&bytes, path)?;
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if records.len() != arch.params.len() + arch.gates.len() {
        return Err(format_err(format!(
            "{} records, architecture expects {}",
            records.len(),
            arch.params.len() + arch.gates.len()
        )));
    }
    let mut it = records.into_iter();
    let mut params = Vec::with_capacity(arch.params.len());
    for spec in &arch.params {
        let (name, shape, data) = it.next().expect("count checked");
        if name != spec.name {
            return Err(format_err(format!(
                "record `{name}` where `{}` was expected",
                spec.name
            )));
        }
        params.push(Parameter::new(
            name,
            Tensor::from_vec(&shape, data)?,
            spec.trainable,
        ));
    }
    let mut gates = Vec::with_capacity(arch.gates.len());
    for spec in arch.gates {
        let (name, _, data) = it.next().expect("count checked");
        if name != format!("gate:{}", spec.name) {
            return Err(format_err(format!(
                "record `{name}` where gate `{}` was expected",
                spec.name
            )));
        }
        let mut g = new_gate::<T>(
            spec.name,
            spec.placement,
            data.len(),
            spec.filters,
            spec.bns,
        );
        g.z = data;
        gates.push(g);
    }
    Ok(NetworkGraph::from_parts(
        arch.nodes,
        params,
        gates,
        arch.output,
    ))
}

//! CSNW binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..4     magic "CSNW"
//! 4..8     u32 version (1)
//! 8..16    u64 header length H
//! 16..16+H UTF-8 JSON header
//! ...      payload: f32 LE tensors, offsets relative to payload start
//! ```
//!
//! The header carries `arch_id`, `num_classes`, `preproc_tag`, `epsilon` and
//! the `tensors` manifest. Other header fields are preserved but not
//! interpreted here.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"CSNW";
pub const CONTAINER_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch_id: String,
    num_classes: usize,
    preproc_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    tensors: Vec<ManifestEntry>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Decoded container: header fields plus named tensors in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arch_id: String,
    pub num_classes: usize,
    pub preproc_tag: String,
    pub epsilon: Option<f64>,
    /// Header fields beyond the ones above.
    pub extra: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(arch_id: impl Into<String>, num_classes: usize, preproc_tag: impl Into<String>) -> Self {
        Self {
            arch_id: arch_id.into(),
            num_classes,
            preproc_tag: preproc_tag.into(),
            epsilon: None,
            extra: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container(c: &Container) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let manifest = c
        .tensors
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset };
            offset += 4 * t.len() as u64;
            entry
        })
        .collect();
    let header = Header {
        arch_id: c.arch_id.clone(),
        num_classes: c.num_classes,
        preproc_tag: c.preproc_tag.clone(),
        epsilon: c.epsilon,
        tensors: manifest,
        extra: c.extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &c.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the fixed prefix", bytes.len())));
    }
    if &bytes[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREFIX_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Format("header extends past end of file".into()))? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];

    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
    }
    // Each tensor owns the bytes up to the next tensor's offset, or to the
    // end of the payload for the last one.
    let mut order: Vec<usize> = (0..header.tensors.len()).collect();
    order.sort_by_key(|&i| header.tensors[i].offset);
    let mut spans = vec![(0usize, 0usize); header.tensors.len()];
    let mut cursor = 0u64;
    for (rank, &i) in order.iter().enumerate() {
        let entry = &header.tensors[i];
        if entry.offset != cursor {
            return Err(Error::Validation(format!(
                "tensor {} starts at byte {}, expected {cursor}",
                entry.name, entry.offset
            )));
        }
        let need = entry.shape.iter().product::<usize>() as u64 * 4;
        let next = order.get(rank + 1).map(|&j| header.tensors[j].offset).unwrap_or(payload.len() as u64);
        let available = next.saturating_sub(entry.offset);
        if available < need {
            if rank + 1 == order.len() {
                return Err(Error::Format(format!(
                    "payload truncated: tensor {} needs {need} bytes, {available} remain",
                    entry.name
                )));
            }
            return Err(Error::Validation(format!(
                "tensor {} declares {:?} ({} values) but holds {} values",
                entry.name,
                entry.shape,
                need / 4,
                available / 4
            )));
        }
        spans[i] = (entry.offset as usize, need as usize);
        cursor = entry.offset + need;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Validation(format!(
            "{} payload bytes not referenced by the manifest",
            payload.len() as u64 - cursor
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (entry, &(start, len)) in header.tensors.iter().zip(&spans) {
        let data =
            payload[start..start + len].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Validation(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(Container {
        arch_id: header.arch_id,
        num_classes: header.num_classes,
        preproc_tag: header.preproc_tag,
        epsilon: header.epsilon,
        extra: header.extra,
        tensors,
    })
}

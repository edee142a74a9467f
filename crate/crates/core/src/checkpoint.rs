//! Checkpoint format: a text manifest (name, shape, byte offset, length per
//! tensor) followed by a little-endian 32-bit float payload. Values are
//! computed in f64 and down-converted only at this boundary; loading widens
//! them back deterministically.

use std::io::Write;
use std::path::Path;

use crate::detector::params::{apply_named_tensors, HrParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "graphdet-checkpoint v1";

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name {name:?} contains whitespace"
            )));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!(
            "tensor {name} {} {offset} {}\n",
            dims.join("x"),
            t.numel()
        ));
        offset += t.numel() * 4;
    }
    header.push_str(&format!("payload {offset}\n"));

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(offset);
    for (_, t) in tensors {
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut next_line = || -> Result<String> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::Checkpoint("truncated header".to_string()));
        }
        let line = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Checkpoint("non-text header".to_string()))?
            .to_string();
        pos += 1;
        Ok(line)
    };

    if next_line()? != MAGIC {
        return Err(Error::Checkpoint("bad magic line".to_string()));
    }
    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        len: usize,
    }
    let mut entries = Vec::new();
    let payload_len;
    loop {
        let line = next_line()?;
        if let Some(rest) = line.strip_prefix("payload ") {
            payload_len = rest
                .parse::<usize>()
                .map_err(|_| Error::Checkpoint("bad payload length".to_string()))?;
            break;
        }
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| Error::Checkpoint(format!("unexpected line: {line}")))?;
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 4 {
            return Err(Error::Checkpoint(format!("malformed tensor line: {line}")));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in: {line}")))
            })
            .collect::<Result<_>>()?;
        let offset = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in: {line}")))?;
        let len = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad length in: {line}")))?;
        entries.push(Entry {
            name: parts[0].to_string(),
            shape,
            offset,
            len,
        });
    }
    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header says {payload_len}",
            payload.len()
        )));
    }

    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset + e.len * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns payload",
                e.name
            )));
        }
        let data: Vec<f64> = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

/// Save every registered model tensor in registry order.
pub fn save_model(path: &Path, params: &HrParams) -> Result<()> {
    save(path, &params.named_tensors())
}

/// Load a checkpoint into an initialized model of matching architecture.
pub fn load_model(path: &Path, params: &mut HrParams) -> Result<()> {
    let loaded = load(path)?;
    apply_named_tensors(params, &loaded)
}

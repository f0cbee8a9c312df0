//! Model checkpoints: architecture descriptor plus the flat vector.
//!
//! Two encodings share one reader. Binary files start with `FIOTMDL1` and
//! store little-endian values; text files start with `fediot-model 1` and hold
//! one value per line in shortest round-trip notation.

use std::path::Path;

use super::arch::{ArchitectureSpec, ModelKind};
use super::engine::ModelParameters;
use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 8] = b"FIOTMDL1";
const TEXT_MAGIC: &str = "fediot-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFormat {
    Binary,
    Text,
}

pub fn encode(params: &ModelParameters, format: CheckpointFormat) -> Vec<u8> {
    match format {
        CheckpointFormat::Binary => encode_binary(params),
        CheckpointFormat::Text => encode_text(params).into_bytes(),
    }
}

fn encode_binary(params: &ModelParameters) -> Vec<u8> {
    let arch = &params.arch;
    let mut out = Vec::with_capacity(32 + 8 * params.flat.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.push(match arch.kind {
        ModelKind::Classifier => 0,
        ModelKind::Autoencoder => 1,
    });
    out.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &h in &arch.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.flat.len() as u64).to_le_bytes());
    for v in &params.flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_text(params: &ModelParameters) -> String {
    let arch = &params.arch;
    let hidden = arch
        .hidden
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    let mut out = format!(
        "{TEXT_MAGIC}\nkind {}\ninput_dim {}\nhidden {}\nd {}\n",
        arch.kind.name(),
        arch.input_dim,
        hidden,
        params.flat.len()
    );
    for v in &params.flat {
        out.push_str(&format!("{v:?}\n"));
    }
    out
}

/// Size in bytes of the binary encoding.
pub fn binary_size(arch: &ArchitectureSpec) -> usize {
    8 + 1 + 4 + 4 + 4 * arch.hidden.len() + 8 + 8 * arch.param_count()
}

pub fn decode(bytes: &[u8]) -> Result<ModelParameters> {
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(&bytes[BINARY_MAGIC.len()..])
    } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint("text checkpoint is not utf-8".into()))?;
        decode_text(text)
    } else {
        Err(Error::Checkpoint("unrecognised checkpoint header".into()))
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::Checkpoint("truncated binary checkpoint".into()));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("split_at returned N bytes"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}

fn decode_binary(bytes: &[u8]) -> Result<ModelParameters> {
    let mut cur = Cursor(bytes);
    let kind = match cur.take::<1>()?[0] {
        0 => ModelKind::Classifier,
        1 => ModelKind::Autoencoder,
        other => return Err(Error::Checkpoint(format!("unknown model kind tag {other}"))),
    };
    let input_dim = cur.u32()?;
    let depth = cur.u32()?;
    let hidden = (0..depth).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let d = u64::from_le_bytes(cur.take()?) as usize;
    let flat = (0..d)
        .map(|_| cur.take::<8>().map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    if !cur.0.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let arch = ArchitectureSpec::new(kind, input_dim, hidden)?;
    ModelParameters::from_flat(arch, flat)
}

fn decode_text(text: &str) -> Result<ModelParameters> {
    let mut lines = text.lines().skip(1);
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {name} line")))?;
        line.strip_prefix(name)
            .map(|rest| rest.trim().to_owned())
            .ok_or_else(|| Error::Checkpoint(format!("expected {name}, found {line:?}")))
    };
    let kind = match field("kind")?.as_str() {
        "classifier" => ModelKind::Classifier,
        "autoencoder" => ModelKind::Autoencoder,
        other => return Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
    };
    let number = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Checkpoint(format!("bad integer {s:?}")))
    };
    let input_dim = number(&field("input_dim")?)?;
    let hidden = field("hidden")?
        .split_whitespace()
        .map(number)
        .collect::<Result<Vec<_>>>()?;
    let d = number(&field("d")?)?;
    let flat = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad value {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if flat.len() != d {
        return Err(Error::Checkpoint(format!(
            "declared {d} parameters, found {}",
            flat.len()
        )));
    }
    let arch = ArchitectureSpec::new(kind, input_dim, hidden)?;
    ModelParameters::from_flat(arch, flat)
}

pub fn save(params: &ModelParameters, path: &Path, format: CheckpointFormat) -> Result<()> {
    std::fs::write(path, encode(params, format)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
